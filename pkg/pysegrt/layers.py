"""Forward and backward passes for each kind of layer in the segmentation network.

Batches are (B, H, W, C)-arrays. Every function here is pure: it computes in the dtype of its inputs and returns
fresh arrays, so running one in float64 gives the verification mode used by the gradient checks.

Parameter groups are :class:`~aljpy.arrdict.arrdict` s:

``conv``
    ``depthwise`` (3, 3, C_in), ``pointwise`` (C_in, C_out) and ``bias`` (C_out,). The stride lives with the layer,
    not the parameters. Padding is always 'same', with zeros.
``bn``
    ``gamma``, ``beta``, ``mean`` and ``var``, each (C,). The last two are the running statistics.
"""
import numpy as np
import scipy.special
from aljpy import arrdict
from .tensor import ShapeError, PreconditionError, assert_shape

ALPHA = .01
BN_EPS = 1e-5
BN_MOMENTUM = .9
BCE_EPS = 1e-7

def _check_conv(x, conv, stride):
    if x.shape[-1] != conv.depthwise.shape[-1]:
        raise ShapeError(x.shape, x.shape[:-1] + conv.depthwise.shape[-1:], 'separable conv input')
    if stride not in (1, 2):
        raise PreconditionError(f'Stride must be 1 or 2, got {stride}')
    if stride == 2 and (x.shape[1] % 2 or x.shape[2] % 2):
        raise PreconditionError(f'Stride-2 convolution needs even height and width, got {x.shape[1:3]}')

def _taps(H, W, stride):
    """The slices of the zero-padded input that line up with each of the 3x3 taps."""
    for dy in range(3):
        for dx in range(3):
            yield dy, dx, (slice(None), slice(dy, dy+H, stride), slice(dx, dx+W, stride))

def depthwise(x, kernel, stride=1):
    B, H, W, C = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, H//stride, W//stride, C), dtype=np.result_type(x, kernel))
    for dy, dx, s in _taps(H, W, stride):
        out += padded[s]*kernel[dy, dx]
    return out

def sconv_forward(x, conv, stride=1):
    """A 3x3 depthwise convolution, then a 1x1 pointwise mix, then the bias."""
    _check_conv(x, conv, stride)
    return depthwise(x, conv.depthwise, stride) @ conv.pointwise + conv.bias

def sconv_backward(x, conv, grad, stride=1):
    """Returns the gradient with respect to ``x`` and an arrdict of gradients with respect to ``conv``."""
    _check_conv(x, conv, stride)
    B, H, W, C = x.shape
    assert_shape(grad, (B, H//stride, W//stride, conv.pointwise.shape[1]), 'upstream gradient')

    mixed = depthwise(x, conv.depthwise, stride)
    g_pointwise = np.tensordot(mixed, grad, ((0, 1, 2), (0, 1, 2)))
    g_bias = grad.sum((0, 1, 2))
    g_mixed = grad @ conv.pointwise.T

    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    g_padded = np.zeros_like(padded, dtype=g_mixed.dtype)
    g_depthwise = np.zeros_like(conv.depthwise, dtype=g_mixed.dtype)
    for dy, dx, s in _taps(H, W, stride):
        g_depthwise[dy, dx] = (padded[s]*g_mixed).sum((0, 1, 2))
        g_padded[s] += g_mixed*conv.depthwise[dy, dx]

    g_conv = arrdict.arrdict(depthwise=g_depthwise, pointwise=g_pointwise, bias=g_bias)
    return g_padded[:, 1:-1, 1:-1], g_conv

def bn_forward(x, bn, train=False, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Batch normalization.

    In inference mode this uses the running statistics and the second return value is ``None``. In training mode it
    uses the statistics of ``x`` over the batch and spatial axes, and the second return value holds those statistics
    plus the updated running ones. The parameters passed in are never modified.
    """
    if x.shape[-1] != len(bn.gamma):
        raise ShapeError(x.shape, x.shape[:-1] + (len(bn.gamma),), 'batch norm input')
    if not train:
        return bn.gamma*(x - bn.mean)/np.sqrt(bn.var + eps) + bn.beta, None

    mean = x.mean((0, 1, 2))
    var = x.var((0, 1, 2))
    xhat = (x - mean)/np.sqrt(var + eps)
    stats = arrdict.arrdict(
        mean=mean,
        var=var,
        running_mean=momentum*bn.mean + (1 - momentum)*mean,
        running_var=momentum*bn.var + (1 - momentum)*var)
    return bn.gamma*xhat + bn.beta, stats

def bn_backward(x, bn, stats, grad, eps=BN_EPS):
    """Gradients of the training-mode :func:`bn_forward` with respect to ``x``, ``gamma`` and ``beta``."""
    if stats is None:
        raise ValueError('The backward pass of batch norm needs the statistics from a training-mode forward pass')
    assert_shape(grad, x.shape, 'upstream gradient')

    n = x.shape[0]*x.shape[1]*x.shape[2]
    inv_std = 1/np.sqrt(stats.var + eps)
    xhat = (x - stats.mean)*inv_std

    g_gamma = (grad*xhat).sum((0, 1, 2))
    g_beta = grad.sum((0, 1, 2))
    g_xhat = grad*bn.gamma
    g_x = inv_std/n*(n*g_xhat - g_xhat.sum((0, 1, 2)) - xhat*(g_xhat*xhat).sum((0, 1, 2)))
    return g_x, arrdict.arrdict(gamma=g_gamma, beta=g_beta)

def leaky_relu_forward(x, alpha=ALPHA):
    return np.where(x >= 0, x, alpha*x)

def leaky_relu_backward(x, grad, alpha=ALPHA):
    return np.where(x >= 0, grad, alpha*grad)

def upsample_forward(x):
    """Nearest-neighbour 2x upsampling of the spatial axes."""
    return x.repeat(2, -3).repeat(2, -2)

def upsample_backward(grad):
    B, H, W, C = grad.shape
    return grad.reshape(B, H//2, 2, W//2, 2, C).sum((2, 4))

def concat_forward(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(b.shape, a.shape[:-1] + b.shape[-1:], 'concat input')
    return np.concatenate([a, b], -1)

def concat_backward(grad, a_channels):
    """Splits the gradient of a :func:`concat_forward` back into the gradients of its two inputs."""
    return grad[..., :a_channels], grad[..., a_channels:]

def sigmoid(x):
    return scipy.special.expit(x)

def sigmoid_backward(p, grad):
    """Gradient through a sigmoid, in terms of its output ``p``."""
    return grad*p*(1 - p)

def bce_loss(p, y, eps=BCE_EPS):
    """Mean binary cross-entropy between probabilities ``p`` and binary targets ``y``.

    Returns the loss and its gradient with respect to ``p``. Chain it through :func:`sigmoid_backward` to get the
    gradient with respect to the logits.
    """
    assert_shape(y, p.shape, 'targets')
    clamped = np.clip(p, eps, 1 - eps)
    loss = -(y*np.log(clamped) + (1 - y)*np.log(1 - clamped)).mean()
    grad = (clamped - y)/(clamped*(1 - clamped))/p.size
    # The clamp is flat outside its range
    grad = np.where((eps <= p) & (p <= 1 - eps), grad, 0.)
    return float(loss), grad.astype(p.dtype)

def bce_with_logits(logits, y, eps=BCE_EPS):
    """:func:`bce_loss` of ``sigmoid(logits)``, returning the gradient with respect to the logits.

    The gradient is ``(sigmoid(logits) - y)/N`` from the unclamped probabilities, so it doesn't vanish where a pixel
    is confidently wrong. Only the loss value goes through the clamp.
    """
    p = sigmoid(logits)
    loss, _ = bce_loss(p, y, eps)
    return loss, ((p - y)/p.size).astype(logits.dtype)

def fold_batch_norm(conv, bn, eps=BN_EPS):
    """Returns conv parameters equivalent to an inference-mode batch norm applied after ``conv``.

    The pointwise columns and the bias are scaled channel by channel; the depthwise kernel is untouched. The scale
    and shift are worked out in float64 and only the results are cast back.
    """
    if len(bn.gamma) != conv.pointwise.shape[1]:
        raise ShapeError(bn.gamma.shape, conv.bias.shape, 'batch norm parameters')
    bn = bn.map(lambda a: a.astype(np.float64))
    scale = bn.gamma/np.sqrt(bn.var + eps)
    return arrdict.arrdict(
        depthwise=conv.depthwise.copy(),
        pointwise=(conv.pointwise.astype(np.float64)*scale).astype(conv.pointwise.dtype),
        bias=((conv.bias.astype(np.float64) - bn.mean)*scale + bn.beta).astype(conv.bias.dtype))

def test_sconv_identity():
    from . import test
    x = test.random_batch((2, 5, 6, 4))
    conv = test.identity_conv(4)
    np.testing.assert_array_equal(sconv_forward(x, conv), x)

    g = test.random_batch((2, 5, 6, 4), seed=1)
    gx, _ = sconv_backward(x, conv, g)
    np.testing.assert_array_equal(gx, g)

def test_sconv_counts_ones():
    conv = arrdict.arrdict(
        depthwise=np.ones((3, 3, 1), np.float32),
        pointwise=np.full((1, 1), 2., np.float32),
        bias=np.zeros((1,), np.float32))
    out = sconv_forward(np.ones((1, 3, 3, 1), np.float32), conv)[0, ..., 0]
    assert out[1, 1] == 18.
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 8.

def test_sconv_matches_direct():
    from . import test
    x = test.random_batch((2, 8, 8, 4))
    conv = test.random_conv(4, 3, seed=1)
    for stride in (1, 2):
        actual = sconv_forward(x, conv, stride)
        assert actual.shape == (2, 8//stride, 8//stride, 3)
        np.testing.assert_allclose(actual, test.direct_sconv(x, conv, stride), atol=1e-5)

def test_sconv_preconditions():
    import pytest
    from . import test
    conv = test.random_conv(4, 3)
    with pytest.raises(ShapeError):
        sconv_forward(test.random_batch((1, 4, 4, 2)), conv)
    with pytest.raises(PreconditionError):
        sconv_forward(test.random_batch((1, 5, 4, 4)), conv, stride=2)

def test_sconv_backward():
    from . import test
    x = test.random_batch((2, 4, 4, 2), dtype=np.float64)
    conv = test.random_conv(2, 3, seed=1, dtype=np.float64)
    for stride in (1, 2):
        w = test.random_batch((2, 4//stride, 4//stride, 3), seed=2, dtype=np.float64)
        gx, gconv = sconv_backward(x, conv, w, stride)

        def f():
            return (sconv_forward(x, conv, stride)*w).sum()
        test.assert_gradient(f, x, gx)
        for k in gconv:
            test.assert_gradient(f, conv[k], gconv[k])

        zx, zconv = sconv_backward(x, conv, np.zeros_like(w), stride)
        assert not zx.any() and not any(v.any() for v in zconv.values())

def test_bn_forward():
    from . import test
    x = test.random_batch((3, 4, 5, 2), dtype=np.float64)
    identity = test.identity_bn(2, dtype=np.float64)
    out, stats = bn_forward(x, identity, eps=0.)
    assert stats is None
    np.testing.assert_allclose(out, x)

    out, stats = bn_forward(x, identity, train=True)
    np.testing.assert_allclose(out.mean((0, 1, 2)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var((0, 1, 2)), 1, atol=1e-4)
    np.testing.assert_allclose(stats.running_mean, .1*x.mean((0, 1, 2)))
    # Inputs are never mutated
    np.testing.assert_array_equal(identity.mean, 0.)

    bn = arrdict.arrdict(gamma=np.array([2.]), beta=np.array([3.]), mean=np.array([1.]), var=np.array([4.]))
    out, _ = bn_forward(np.full((1, 1, 1, 1), 5.), bn, eps=0.)
    assert out.item() == 7.

def test_bn_backward():
    from . import test
    x = test.random_batch((2, 3, 3, 2), dtype=np.float64)
    bn = test.random_bn(2, seed=1, dtype=np.float64)
    w = test.random_batch((2, 3, 3, 2), seed=2, dtype=np.float64)
    _, stats = bn_forward(x, bn, train=True)
    gx, gbn = bn_backward(x, bn, stats, w)

    def f():
        return (bn_forward(x, bn, train=True)[0]*w).sum()
    test.assert_gradient(f, x, gx)
    test.assert_gradient(f, bn.gamma, gbn.gamma)
    test.assert_gradient(f, bn.beta, gbn.beta)

    zx, zbn = bn_backward(x, bn, stats, np.zeros_like(w))
    assert not zx.any() and not zbn.gamma.any() and not zbn.beta.any()

    _, gbn = bn_backward(x, test.identity_bn(2, dtype=np.float64), stats, np.ones_like(w))
    np.testing.assert_allclose(gbn.beta, np.full(2, 18.))

def test_leaky_relu():
    x = np.array([1., -2., 0.])
    np.testing.assert_allclose(leaky_relu_forward(x, .01), [1., -.02, 0.])
    np.testing.assert_allclose(leaky_relu_backward(x, np.ones(3), .01), [1., .01, 1.])

    from . import test
    x = test.random_batch((2, 4, 4, 3), dtype=np.float64)
    w = test.random_batch(x.shape, seed=1, dtype=np.float64)
    f = lambda: (leaky_relu_forward(x, .01)*w).sum()
    test.assert_gradient(f, x, leaky_relu_backward(x, w, .01), kinks=lambda: x >= 0)

def test_upsample():
    x = np.array([[1, 2], [3, 4]], dtype=np.float32)[None, :, :, None]
    up = upsample_forward(x)
    assert up.shape == (1, 4, 4, 1)
    np.testing.assert_array_equal(up[0, ..., 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    np.testing.assert_array_equal(upsample_backward(np.ones((1, 4, 4, 1))), np.full((1, 2, 2, 1), 4.))

    from . import test
    x = test.random_batch((2, 2, 3, 2), dtype=np.float64)
    w = test.random_batch((2, 4, 6, 2), seed=1, dtype=np.float64)
    test.assert_gradient(lambda: (upsample_forward(x)*w).sum(), x, upsample_backward(w))

def test_concat():
    import pytest
    from . import test
    a, b = test.random_batch((1, 3, 4, 24)), test.random_batch((1, 3, 4, 16), seed=1)
    ab = concat_forward(a, b)
    assert ab.shape == (1, 3, 4, 40)
    assert concat_forward(test.random_batch((1, 3, 4, 16)), test.random_batch((1, 3, 4, 8))).shape[-1] == 24
    a2, b2 = concat_backward(ab, 24)
    assert a2.tobytes() == a.tobytes() and b2.tobytes() == b.tobytes()

    a, b = a.astype(np.float64), b.astype(np.float64)
    w = test.random_batch((1, 3, 4, 40), seed=2, dtype=np.float64)
    ga, gb = concat_backward(w, 24)
    f = lambda: (concat_forward(a, b)*w).sum()
    test.assert_gradient(f, a, ga)
    test.assert_gradient(f, b, gb)
    with pytest.raises(ShapeError):
        concat_forward(a, test.random_batch((1, 2, 4, 16)))

def test_sigmoid():
    assert sigmoid(np.float32(0.)) == .5
    assert abs(sigmoid(100.) - 1.) < 1e-6
    x = np.random.default_rng(0).normal(size=100)
    np.testing.assert_allclose(sigmoid(-x), 1 - sigmoid(x), atol=1e-7)
    p = sigmoid(np.linspace(-20, 20, 41))
    assert ((0 < p) & (p < 1)).all()

def test_bce_loss():
    from . import test
    y = (np.random.default_rng(0).random((2, 2, 2, 5)) < .5).astype(np.float64)
    loss, _ = bce_loss(np.full(y.shape, .5), y)
    assert abs(loss - np.log(2)) < 1e-6
    loss, _ = bce_loss(y.copy(), y)
    assert loss <= 1e-6
    assert np.isfinite(bce_loss(np.zeros(y.shape), y)[0])

    logits = test.random_batch((2, 2, 2, 5), dtype=np.float64)
    _, gp = bce_loss(sigmoid(logits), y)
    glogits = sigmoid_backward(sigmoid(logits), gp)
    test.assert_gradient(lambda: bce_loss(sigmoid(logits), y)[0], logits, glogits)

def test_bce_with_logits():
    from . import test
    y = (np.random.default_rng(1).random((2, 2, 2, 5)) < .5).astype(np.float64)
    logits = test.random_batch((2, 2, 2, 5), seed=1, dtype=np.float64)
    loss, grad = bce_with_logits(logits, y)
    assert loss == bce_loss(sigmoid(logits), y)[0]
    test.assert_gradient(lambda: bce_with_logits(logits, y)[0], logits, grad)

    # Confidently wrong pixels still get pushed back
    loss, grad = bce_with_logits(np.array([20., -20.], np.float32), np.array([0., 1.], np.float32))
    assert loss > 15
    np.testing.assert_allclose(grad, [.5, -.5], atol=1e-6)

def test_fold_batch_norm():
    from . import test
    conv = test.random_conv(4, 3)
    folded = fold_batch_norm(conv, test.identity_bn(3), eps=0.)
    for k in conv:
        np.testing.assert_array_equal(folded[k], conv[k])

    bn = test.identity_bn(3)
    bn['gamma'] = np.full(3, 2., np.float32)
    folded = fold_batch_norm(conv, bn, eps=0.)
    np.testing.assert_array_equal(folded.pointwise, 2*conv.pointwise)
    np.testing.assert_array_equal(folded.bias, 2*conv.bias)

    bn = test.random_bn(3, seed=2)
    x = test.random_batch((2, 6, 6, 4))
    expected, _ = bn_forward(sconv_forward(x, conv), bn)
    np.testing.assert_allclose(sconv_forward(x, fold_batch_norm(conv, bn)), expected, atol=1e-5)
