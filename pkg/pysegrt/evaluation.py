"""Per-pixel precision-recall curves and average precision.

Every pixel of every image is one scored binary decision per class; nothing here knows about object instances. A
curve is a dotdict of equal-length ``threshold``, ``precision`` and ``recall`` arrays, thresholds descending, along
with its ``label`` and the number of ``positives``.
"""
import json
import logging
from pathlib import Path
import numpy as np
import pandas as pd
import aljpy
from . import model as M, dataset as D, layers as L
from .tensor import ShapeError, PreconditionError

log = logging.getLogger(__name__)

# Above this many pooled decisions, sweep over bins rather than over every distinct score
EXACT_LIMIT = 100_000
BINS = 1024

LABELS = ('Field', 'Line', 'Robot', 'Ball', 'Goal')
ALL = 'All'
SUMMARY_ROWS = ('Ball', 'Field', 'Line', 'Goal', 'Robot', ALL)

class DegenerateClassError(ValueError):
    pass

def _exact(scores, targets):
    order = np.argsort(-scores, kind='stable')
    scores, targets = scores[order], targets[order]

    # Pixels with the same score are one decision; keep the last of each run of ties
    last = np.ones(len(scores), dtype=bool)
    last[:-1] = scores[:-1] != scores[1:]

    tp = np.cumsum(targets)[last]
    pp = (np.arange(len(scores)) + 1)[last]
    return scores[last], tp, pp

def _binned(scores, targets, bins):
    index = np.minimum((scores*bins).astype(int), bins - 1)
    counts = np.bincount(index, minlength=bins)[::-1]
    hits = np.bincount(index, weights=targets, minlength=bins)[::-1]
    occupied = counts > 0
    thresholds = (np.arange(bins)/bins)[::-1]
    return thresholds[occupied], np.cumsum(hits)[occupied], np.cumsum(counts)[occupied]

def _curve(scores, targets, label, method='auto'):
    scores, targets = np.ravel(scores).astype(float), np.ravel(targets).astype(float)
    if (scores < 0).any() or (scores > 1).any():
        raise PreconditionError('Scores must be probabilities in [0, 1]')
    positives = int(targets.sum())
    if positives == 0:
        raise DegenerateClassError(f'"{label}" has no positive pixels, so its recall is undefined')

    if method == 'auto':
        method = 'exact' if len(scores) <= EXACT_LIMIT else 'binned'
    if method == 'exact':
        thresholds, tp, pp = _exact(scores, targets)
    elif method == 'binned':
        thresholds, tp, pp = _binned(scores, targets, BINS)
    else:
        raise ValueError(f'Unknown sweep method "{method}"')

    with np.errstate(invalid='ignore', divide='ignore'):
        precision = np.where(pp > 0, tp/pp, 1.)
    return aljpy.dotdict(
        label=label, positives=positives,
        threshold=thresholds, precision=precision, recall=tp/positives)

def _check(scores, targets):
    if scores.shape != targets.shape:
        raise ShapeError(targets.shape, scores.shape, 'targets')

def pixel_pr_curve(scores, targets, cls, method='auto', label=None):
    """The precision-recall curve of channel ``cls``, pooling every pixel of every image.

    :param method: ``'exact'`` sweeps every distinct score, ``'binned'`` sweeps :data:`BINS` uniform score bins, and
        ``'auto'`` picks exact unless there are more than :data:`EXACT_LIMIT` decisions.
    """
    _check(scores, targets)
    label = LABELS[cls] if label is None else label
    return _curve(scores[..., cls], targets[..., cls], label, method)

def average_precision(curve):
    """Rectangular AP: the precision at each threshold times the recall gained there."""
    if not len(curve.recall):
        raise PreconditionError('Can\'t take the AP of an empty curve')
    return float(np.sum(np.diff(curve.recall, prepend=0.)*curve.precision))

def micro_average(scores, targets, method='auto'):
    """Pools the decisions of every class into one binary problem and returns its curve and AP."""
    _check(scores, targets)
    curve = _curve(scores, targets, ALL, method)
    return curve, average_precision(curve)

def evaluate(scores, targets, labels=LABELS, method='auto'):
    """Curves and APs for each class and for the micro-average.

    A class with no positive pixels gets an AP of NaN and no curve.
    """
    report = aljpy.dotdict(curves={}, ap={}, positives={})
    for c, label in enumerate(labels):
        report.positives[label] = int(targets[..., c].sum())
        try:
            curve = pixel_pr_curve(scores, targets, c, method, label)
        except DegenerateClassError as e:
            log.warning(str(e))
            report.curves[label], report.ap[label] = None, np.nan
        else:
            report.curves[label], report.ap[label] = curve, average_precision(curve)
    report.positives[ALL] = int(targets.sum())
    report.curves[ALL], report.ap[ALL] = micro_average(scores, targets, method)
    return report

def predict_split(model, manifest, split, batch_size=8):
    """The model's probabilities and the targets over a split, at the model's input resolution."""
    model = M.prepare_inference(model)
    scores, targets = [], []
    for x, y in D.iterate_batches(manifest, split, batch_size, 0, size=(model.height, model.width)):
        scores.append(L.sigmoid(M.forward(model, x)))
        targets.append(y)
    return np.concatenate(scores), np.concatenate(targets)

def evaluate_model(model, manifest, split='test', batch_size=8):
    scores, targets = predict_split(model, manifest, split, batch_size)
    report = evaluate(scores, targets)
    log.info(f'Evaluated {len(scores)} samples from "{split}": mAP {report.ap[ALL]:.4f}')
    return report

def pixel_accuracy(predicted, masks):
    """The fraction of pixels whose predicted class index matches the mask."""
    if predicted.shape != masks.shape:
        raise ShapeError(predicted.shape, masks.shape, 'predicted classes')
    return float((predicted == masks).mean())

def summary_table(reports):
    """A classes-by-configurations table of APs from a dict of named reports."""
    return pd.DataFrame(
        {name: [r.ap[row] for row in SUMMARY_ROWS] for name, r in reports.items()},
        index=pd.Index(SUMMARY_ROWS, name='class'))

def _slug(label):
    return label.lower().replace(' ', '_')

def export_report(report, path, name='model'):
    """Writes ``curve_{class}.csv`` for each class and for the micro-average, plus ``summary.csv`` and
    ``summary.json``."""
    path = Path(path)
    path.mkdir(exist_ok=True, parents=True)
    for label, curve in report.curves.items():
        columns = ['threshold', 'precision', 'recall']
        df = pd.DataFrame({k: curve[k] for k in columns} if curve is not None else [], columns=columns)
        df.to_csv(path / f'curve_{_slug(label)}.csv', index=False, float_format='%.9g')

    table = summary_table({name: report})
    table.to_csv(path / 'summary.csv', float_format='%.6f')
    summary = {name: {row: (None if np.isnan(ap) else round(float(ap), 6)) for row, ap in table[name].items()}}
    (path / 'summary.json').write_text(json.dumps(summary, indent=2))
    log.info(f'Exported the evaluation report to {path}')

def _channel(values):
    return np.asarray(values, dtype=float).reshape(1, -1, 1, 1).repeat(5, -1)

def _points(curve):
    return set(zip(np.round(curve.precision, 9), np.round(curve.recall, 9)))

def test_perfect():
    targets = (np.random.default_rng(0).random((2, 8, 8, 5)) < .3).astype(float)
    curve = pixel_pr_curve(targets, targets, 3)
    assert (1., 1.) in _points(curve)
    assert average_precision(curve) == 1.
    assert micro_average(targets, targets)[1] == 1.

def test_hand_case():
    from . import test
    scores, targets = _channel([.9, .8, .7, .2]), _channel([1, 0, 1, 0])
    curve = pixel_pr_curve(scores, targets, 0)
    assert {(1., .5), (round(2/3, 9), 1.)} <= _points(curve)
    assert np.isclose(average_precision(curve), 5/6, rtol=0, atol=1e-12)
    assert np.isclose(average_precision(curve), test.exhaustive_average_precision(scores[..., 0], targets[..., 0]))

def test_constant_scores():
    scores, targets = _channel([.5]*8), _channel([1, 1, 1, 0, 0, 0, 0, 0])
    curve = pixel_pr_curve(scores, targets, 0)
    np.testing.assert_array_equal(curve.threshold, [.5])
    np.testing.assert_allclose(curve.precision, [3/8])
    np.testing.assert_allclose(curve.recall, [1.])

def test_anticorrelated():
    scores, targets = _channel([.9, .9, .1, .1]), _channel([0, 0, 1, 1])
    assert np.isclose(average_precision(pixel_pr_curve(scores, targets, 0)), .5)

def test_degenerate():
    import pytest
    scores, targets = _channel([.9, .1]), _channel([0, 0])
    with pytest.raises(DegenerateClassError):
        pixel_pr_curve(scores, targets, 0)

    targets = (np.random.default_rng(0).random((1, 4, 4, 5)) < .5).astype(float)
    targets[..., 2] = 0
    report = evaluate(np.random.default_rng(1).random(targets.shape), targets)
    assert np.isnan(report.ap['Robot']) and report.curves['Robot'] is None
    assert 0 <= report.ap[ALL] <= 1

def test_scores_out_of_range():
    import pytest
    with pytest.raises(PreconditionError):
        pixel_pr_curve(_channel([1.5, .1]), _channel([1, 0]), 0)

def test_micro_duplicates():
    rng = np.random.default_rng(0)
    scores = rng.random((2, 8, 8, 1)).repeat(5, -1)
    targets = (rng.random((2, 8, 8, 1)) < .4).astype(float).repeat(5, -1)
    assert np.isclose(micro_average(scores, targets)[1], average_precision(pixel_pr_curve(scores, targets, 0)))

def test_curve_properties():
    from . import test
    rng = np.random.default_rng(0)
    scores = rng.random((2, 8, 8, 5))
    targets = (rng.random(scores.shape) < scores).astype(float)
    for c in range(5):
        curve = pixel_pr_curve(scores, targets, c)
        assert (np.diff(curve.recall) >= 0).all()
        assert (np.diff(curve.threshold) < 0).all()
        assert ((0 <= curve.precision) & (curve.precision <= 1)).all()
        assert curve.positives == targets[..., c].sum()
        assert np.isclose(average_precision(curve), test.exhaustive_average_precision(scores[..., c], targets[..., c]))
        # AP only depends on the ranking
        assert np.isclose(average_precision(curve), average_precision(pixel_pr_curve(scores**3, targets, c)))

def test_binned_matches_exact():
    rng = np.random.default_rng(0)
    scores = rng.random((2, 8, 8, 5))
    targets = (rng.random(scores.shape) < scores).astype(float)
    assert abs(micro_average(scores, targets, 'binned')[1] - micro_average(scores, targets, 'exact')[1]) < 1e-3

    for _ in range(10):
        scores = rng.random((1, 100, 100, 1))
        targets = (rng.random(scores.shape) < scores).astype(float)
        exact, binned = micro_average(scores, targets, 'exact')[1], micro_average(scores, targets, 'binned')[1]
        assert abs(exact - binned) < 1e-3

def test_pixel_accuracy():
    masks = np.zeros((2, 4, 4), np.uint8)
    predicted = masks.copy()
    predicted[0, 0, :2] = 3
    assert pixel_accuracy(predicted, masks) == 30/32

def test_export(tmp_path):
    rng = np.random.default_rng(0)
    scores = rng.random((2, 8, 8, 5))
    targets = (rng.random(scores.shape) < scores).astype(float)
    report = evaluate(scores, targets)
    export_report(report, tmp_path / 'a')
    export_report(report, tmp_path / 'b')

    files = sorted(p.name for p in (tmp_path / 'a').iterdir())
    assert len([f for f in files if f.startswith('curve_')]) == 6
    assert {'summary.csv', 'summary.json'} <= set(files)
    for f in files:
        assert (tmp_path / 'a' / f).read_bytes() == (tmp_path / 'b' / f).read_bytes()

    summary = pd.read_csv(tmp_path / 'a' / 'summary.csv', index_col=0)
    assert set(summary.index) == {'Ball', 'Field', 'Line', 'Goal', 'Robot', 'All'}
    assert json.loads((tmp_path / 'a' / 'summary.json').read_text())['model']['All'] == round(report.ap[ALL], 6)

def test_summary_table():
    rng = np.random.default_rng(0)
    scores = rng.random((1, 8, 8, 5))
    targets = (rng.random(scores.shape) < .5).astype(float)
    table = summary_table({'none': evaluate(scores, targets), 'perfect': evaluate(targets, targets)})
    assert list(table.columns) == ['none', 'perfect']
    assert list(table.index) == list(SUMMARY_ROWS)
    assert (table['perfect'] == 1.).all()
