import numpy as np
import matplotlib.pyplot as plt
from . import dataset

def plot_curves(report, ax=None):
    """Plots the precision-recall curve of every class in an evaluation report, with the micro-average dashed."""
    fig, ax = plt.subplots() if ax is None else (ax.figure, ax)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel('recall')
    ax.set_ylabel('precision')

    for i, (label, curve) in enumerate(report.curves.items()):
        if curve is None:
            continue
        style = {'color': 'k', 'linestyle': '--'} if label == 'All' else {'color': f'C{i}'}
        ax.step(curve.recall, curve.precision, where='post', label=f'{label} ({report.ap[label]:.3f})', **style)
    ax.legend(loc='lower left')
    ax.grid(alpha=.25)

    return ax

def plot_sample(sample, predicted=None, axes=None):
    """Shows an image beside its mask and, optionally, beside a predicted mask."""
    panels = [sample.image, dataset.encode_mask(sample.mask)]
    if predicted is not None:
        panels.append(dataset.encode_mask(predicted))
    fig, axes = plt.subplots(1, len(panels), squeeze=False) if axes is None else (axes[0].figure, np.asarray(axes)[None])
    for ax, panel, title in zip(axes[0], panels, ['image', 'mask', 'predicted']):
        ax.imshow(panel, interpolation='nearest')
        ax.set_title(title)
        ax.set_axis_off()
    return axes[0]

def test_plot_curves():
    import matplotlib
    matplotlib.use('Agg')
    from . import evaluation
    rng = np.random.default_rng(0)
    scores = rng.random((1, 8, 8, 5))
    targets = (rng.random(scores.shape) < scores).astype(float)
    targets[..., 2] = 0
    ax = plot_curves(evaluation.evaluate(scores, targets))
    assert len(ax.get_lines()) == 5
    plt.close(ax.figure)

def test_plot_sample():
    import matplotlib
    matplotlib.use('Agg')
    sample = dataset.generate_toy_scene(0, 32, 32)
    axes = plot_sample(sample, predicted=sample.mask)
    assert len(axes) == 3
    plt.close(axes[0].figure)
