"""Fixtures and independent reference implementations for the tests.

The references here are deliberately naive - nested loops, brute force, hand arithmetic - so that they share as
little as possible with the code they check.
"""
import math
import pytest
import numpy as np
from aljpy import arrdict
from . import layers as L, model as M, dataset as D, config as C, augment, train, evaluation, bench
from .tensor import DTYPE

def random_batch(shape, seed=0, dtype=DTYPE):
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)

def identity_conv(c, dtype=DTYPE):
    depthwise = np.zeros((3, 3, c), dtype)
    depthwise[1, 1] = 1.
    return arrdict.arrdict(depthwise=depthwise, pointwise=np.eye(c, dtype=dtype), bias=np.zeros((c,), dtype))

def random_conv(c_in, c_out, seed=0, dtype=DTYPE):
    rng = np.random.default_rng(seed)
    return arrdict.arrdict(
        depthwise=rng.normal(size=(3, 3, c_in)).astype(dtype),
        pointwise=rng.normal(size=(c_in, c_out)).astype(dtype),
        bias=rng.normal(size=(c_out,)).astype(dtype))

def identity_bn(c, dtype=DTYPE):
    return arrdict.arrdict(
        gamma=np.ones((c,), dtype), beta=np.zeros((c,), dtype),
        mean=np.zeros((c,), dtype), var=np.ones((c,), dtype))

def random_bn(c, seed=0, dtype=DTYPE):
    rng = np.random.default_rng(seed)
    return arrdict.arrdict(
        gamma=rng.uniform(.5, 1.5, c).astype(dtype),
        beta=rng.normal(0, .5, c).astype(dtype),
        mean=rng.normal(0, .5, c).astype(dtype),
        var=rng.uniform(.5, 1.5, c).astype(dtype))

def randomized_model(height, width, seed=0):
    """A freshly-built model whose biases and batch norm parameters have been scrambled too, so that neither is an
    identity."""
    model = M.build_model(height, width, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for layer in model.layers:
        if layer.kind == 'sconv':
            c = len(layer.conv.bias)
            layer.conv['bias'] = rng.normal(0, .1, c).astype(DTYPE)
            layer['bn'] = random_bn(c, seed=int(rng.integers(2**31)))
    return model

def direct_sconv(x, conv, stride=1):
    """Separable convolution by direct nested loops."""
    B, H, W, C = x.shape
    C_out = conv.pointwise.shape[1]
    out = np.zeros((B, H//stride, W//stride, C_out))
    for b in range(B):
        for i in range(H//stride):
            for j in range(W//stride):
                mixed = np.zeros(C)
                for c in range(C):
                    for dy in range(3):
                        for dx in range(3):
                            y, x_ = stride*i + dy - 1, stride*j + dx - 1
                            if 0 <= y < H and 0 <= x_ < W:
                                mixed[c] += x[b, y, x_, c]*conv.depthwise[dy, dx, c]
                for o in range(C_out):
                    out[b, i, j, o] = sum(mixed[c]*conv.pointwise[c, o] for c in range(C)) + conv.bias[o]
    return out

def assert_gradient(f, array, analytic, step=1e-4, rtol=1e-5, atol=1e-8, samples=None, rng=None, kinks=None):
    """Checks ``analytic`` against central differences of the scalar function ``f()`` with respect to the entries of
    ``array``, which is perturbed in place and restored.

    ``kinks``, if given, is called after each evaluation of ``f`` and returns the signs of every input to a
    non-smooth op. When the two evaluations of a central difference disagree on them, the step is cut by ten until
    they agree.
    """
    indices = list(np.ndindex(array.shape))
    if samples is not None and samples < len(indices):
        rng = np.random.default_rng(0) if rng is None else rng
        indices = [indices[i] for i in rng.choice(len(indices), samples, replace=False)]

    def evaluate(i, value):
        array[i] = value
        result = f()
        return result, (None if kinks is None else kinks())

    for i in indices:
        old, h = array[i], step
        while True:
            (up, up_signs), (down, down_signs) = evaluate(i, old + h), evaluate(i, old - h)
            if kinks is None or (up_signs == down_signs).all() or h < 1e-9:
                break
            h = h/10
        array[i] = old

        numeric = (up - down)/(2*h)
        assert np.isclose(analytic[i], numeric, rtol=rtol, atol=atol), \
            f'Gradient at {i} is {analytic[i]}, finite differences with step {h:g} give {numeric}'

def reference_forward(model, x):
    """Runs the architecture table top to bottom with the layer primitives, without going through the model's graph
    wiring."""
    convs = [l for l in model.layers if l.kind == 'sconv']
    assert len(convs) == 19

    def block(x, layer, stride=1):
        z = L.sconv_forward(x, layer.conv, stride)
        if layer.bn is not None:
            z, _ = L.bn_forward(z, layer.bn)
        return L.leaky_relu_forward(z, model.alpha)

    def up(x):
        return x.repeat(2, 1).repeat(2, 2)

    full = block(x, convs[0])
    h = block(full, convs[1])
    h = block(h, convs[2], stride=2)
    h = block(h, convs[3])
    half = block(h, convs[4])
    h = block(half, convs[5], stride=2)
    for layer in convs[6:12]:
        h = block(h, layer)
    h = np.concatenate([up(h), half], -1)
    for layer in convs[12:15]:
        h = block(h, layer)
    h = np.concatenate([up(h), full], -1)
    for layer in convs[15:18]:
        h = block(h, layer)
    return block(h, convs[18])

# (c_in, c_out) of every separable conv in the architecture table, top to bottom
TABLE_CONVS = (
    [(3, 8), (8, 8), (8, 8), (8, 16), (16, 16), (16, 16), (16, 24)] + 5*[(24, 24)] +
    [(40, 16), (16, 16), (16, 16)] +
    [(24, 8), (8, 8), (8, 8), (8, 5)])

def table_parameter_count(depthwise_bias=False, batch_norm=True, running_stats=False):
    """Sums the parameter count of the architecture table by hand, under the given counting assumptions."""
    total = 0
    for c_in, c_out in TABLE_CONVS:
        total += 9*c_in + c_in*c_out + c_out
        if depthwise_bias:
            total += c_in
        if batch_norm:
            total += 2*c_out
        if running_stats:
            total += 2*c_out
    return total

def point_in_polygon(vertices, px, py):
    """Even-odd crossing test for a single point."""
    inside = False
    for (x0, y0), (x1, y1) in zip(vertices, np.roll(vertices, -1, 0)):
        if (y0 > py) != (y1 > py):
            if px < x0 + (py - y0)*(x1 - x0)/(y1 - y0):
                inside = not inside
    return inside

def exhaustive_average_precision(scores, targets):
    """Rectangular AP by thresholding at every distinct score in turn."""
    scores, targets = np.ravel(scores), np.ravel(targets).astype(bool)
    ap, last_recall = 0., 0.
    for t in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= t
        tp = (predicted & targets).sum()
        recall = tp/targets.sum()
        ap += (recall - last_recall)*tp/predicted.sum()
        last_recall = recall
    return ap

def scalar_adam(theta, grads, lr, beta1=.9, beta2=.999, eps=1e-8):
    m = v = 0.
    for t, g in enumerate(grads, 1):
        m = beta1*m + (1 - beta1)*g
        v = beta2*v + (1 - beta2)*g*g
        theta -= lr*(m/(1 - beta1**t))/(math.sqrt(v/(1 - beta2**t)) + eps)
    return theta

def test_table_parameter_count():
    assert table_parameter_count() == 9282
    assert table_parameter_count(batch_norm=False) == 9282 - 2*293
    assert table_parameter_count(depthwise_bias=True) == 9282 + 315
    assert table_parameter_count(running_stats=True) == 9282 + 2*293

@pytest.mark.slow
def test_overfit(tmp_path):
    import pysegrt
    manifest = D.write_toy_dataset(tmp_path, 8, seed=0, height=32, width=32, fractions=(.5, .5))
    manifest['splits'] = {'train': list(range(8)), 'val': list(range(8))}
    # The last layer's batch norm and LeakyReLU sit in front of the sigmoid, so a confident negative needs a
    # pre-activation of about -3/alpha. With a .2 slope, two-image batches at a high rate get there inside 500 epochs.
    settings = C.resolve({
        'train': {
            'max_epochs': 500, 'initial_lr': .05, 'batch_size': 2, 'alpha': .2,
            'plateau_patience': 500, 'early_stop_patience': 500},
        'augment': augment.PRESETS['none']})
    model = M.build_model(32, 32, alpha=settings.train.alpha)
    best, history = train.fit(model, manifest, settings.train)
    assert len(history) == 500
    assert history[-1].train_loss < .05

    samples = [D.load_sample(*D.paths(manifest, i)) for i in range(8)]
    predicted = pysegrt.classify(pysegrt.predict(M.prepare_inference(best), np.stack([s.image for s in samples])))
    assert evaluation.pixel_accuracy(predicted, np.stack([s.mask for s in samples])) > .95

@pytest.mark.slow
def test_desk_run(tmp_path):
    manifest = D.write_toy_dataset(tmp_path, 275, seed=0, height=64, width=64, fractions=(200/275, 25/275, 50/275))
    assert [len(manifest.splits[k]) for k in ('train', 'val', 'test')] == [200, 25, 50]
    settings = C.resolve({'train': {'max_epochs': 60, 'initial_lr': .01, 'batch_size': 16}})
    best, _ = train.fit(M.build_model(64, 64), manifest, settings.train, settings.augment)
    report = evaluation.evaluate_model(best, manifest, 'test')
    assert report.ap['All'] >= .9

@pytest.mark.slow
def test_latency_scaling():
    report = bench.scaling_report(bench.LADDER, iterations=50, warmup=5)
    assert report.r2 >= .95
    medians = report.table.median_ms.values
    assert (np.diff(medians) >= 0).all()
