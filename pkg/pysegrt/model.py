"""The segmentation network: a small U-Net built from separable convolutions.

A model is a :ref:`dotdict <dotdicts>` with keys

``height``, ``width``
    The input resolution. Both are multiples of 4, since the encoder downscales twice.
``classes``, ``names``
    The number of output channels and their names, in channel order.
``alpha``
    The LeakyReLU slope.
``mode``
    ``'train'`` or ``'infer'``. Training mode normalizes with batch statistics and caches activations for
    :func:`backward`.
``layers``
    The layer graph, in execution order. Each layer is a dotdict with a ``kind`` of ``'sconv'``, ``'up'`` or
    ``'concat'``. Separable conv layers carry ``conv`` and ``bn`` parameter groups (``bn`` is ``None`` once folded),
    a ``stride``, and optionally a ``tap`` naming the skip connection their output feeds. Concat layers carry the
    ``skip`` they read back and the ``channels`` of their first input.
"""
import logging
import math
import struct
import zlib
from pathlib import Path
import numpy as np
import aljpy
from aljpy import arrdict
from . import layers as L
from .tensor import DTYPE, ShapeError, PreconditionError

log = logging.getLogger(__name__)

NAMES = ('field', 'line', 'robot', 'ball', 'goal post')

# One entry per row of the architecture table. ``scale`` is the downscaling factor relative to the input; a row
# whose scale is coarser than the previous one starts with a stride-2 convolution. The first repetition of a row
# changes the channel count to ``f``, the rest keep it.
ARCHITECTURE = (
    aljpy.dotdict(kind='sconv', scale=1, n=1, f=8, tap='full'),
    aljpy.dotdict(kind='sconv', scale=1, n=1, f=8),
    aljpy.dotdict(kind='sconv', scale=2, n=1, f=8),
    aljpy.dotdict(kind='sconv', scale=2, n=2, f=16, tap='half'),
    aljpy.dotdict(kind='sconv', scale=4, n=1, f=16),
    aljpy.dotdict(kind='sconv', scale=4, n=6, f=24),
    aljpy.dotdict(kind='up', scale=2),
    aljpy.dotdict(kind='concat', scale=2, skip='half'),
    aljpy.dotdict(kind='sconv', scale=2, n=3, f=16),
    aljpy.dotdict(kind='up', scale=1),
    aljpy.dotdict(kind='concat', scale=1, skip='full'),
    aljpy.dotdict(kind='sconv', scale=1, n=3, f=8),
    aljpy.dotdict(kind='sconv', scale=1, n=1, f=len(NAMES)))

TAPS = ('full', 'half')

MAGIC = b'SGRT'
VERSION = 1
TAGS = {'sconv': 1, 'up': 2, 'concat': 3}

class StateError(RuntimeError):
    pass

class WeightFileError(ValueError):

    def __init__(self, path, message):
        self.path = path
        super().__init__(f'{path}: {message}')

class CorruptHeaderError(WeightFileError):
    pass

class VersionMismatchError(WeightFileError):
    pass

class TruncatedFileError(WeightFileError):
    pass

def _init_conv(c_in, c_out, rng):
    # Fan-in-scaled uniform
    def uniform(shape, fan_in):
        lim = np.sqrt(6/fan_in)
        return rng.uniform(-lim, +lim, shape).astype(DTYPE)

    return arrdict.arrdict(
        depthwise=uniform((3, 3, c_in), 9),
        pointwise=uniform((c_in, c_out), c_in),
        bias=np.zeros((c_out,), DTYPE))

def _init_bn(c):
    return arrdict.arrdict(
        gamma=np.ones((c,), DTYPE),
        beta=np.zeros((c,), DTYPE),
        mean=np.zeros((c,), DTYPE),
        var=np.ones((c,), DTYPE))

def build_model(height, width, seed=0, alpha=L.ALPHA, names=NAMES):
    """Builds the network for ``height`` x ``width`` inputs, with weights drawn deterministically from ``seed``."""
    if height < 4 or width < 4 or height % 4 or width % 4:
        raise PreconditionError(f'Input height and width must be positive multiples of 4, got {height}x{width}')

    rng = np.random.default_rng(seed)
    channels, scale, taps, graph = 3, 1, {}, []
    for row in ARCHITECTURE:
        if row.kind == 'sconv':
            f = len(names) if row is ARCHITECTURE[-1] else row.f
            for i in range(row.n):
                stride = row.scale//scale if i == 0 else 1
                graph.append(aljpy.dotdict(
                    kind='sconv',
                    stride=stride,
                    conv=_init_conv(channels, f, rng),
                    bn=_init_bn(f),
                    tap=row.get('tap') if i == row.n-1 else None))
                channels = f
            if row.get('tap'):
                taps[row.tap] = channels
        elif row.kind == 'up':
            graph.append(aljpy.dotdict(kind='up'))
        elif row.kind == 'concat':
            graph.append(aljpy.dotdict(kind='concat', skip=row.skip, channels=channels))
            channels += taps[row.skip]
        scale = row.scale

    for i, layer in enumerate(graph):
        layer['name'] = f'{i:02d}.{layer.kind}'

    return aljpy.dotdict(
        height=height, width=width,
        classes=len(names), names=tuple(names),
        alpha=alpha, mode='infer',
        layers=graph, cache=None)

def _copy(model, f=lambda a: a.copy()):
    graph = []
    for layer in model.layers:
        layer = aljpy.dotdict(layer)
        for k in ('conv', 'bn'):
            if layer.get(k) is not None:
                layer[k] = layer[k].map(f)
        graph.append(layer)
    copy = aljpy.dotdict(model)
    copy['layers'] = graph
    copy['cache'] = None
    return copy

def copy(model):
    """A deep copy of the model's parameters, without any cached activations."""
    return _copy(model)

def cast(model, dtype):
    """A copy of the model with every parameter cast to ``dtype``. Casting to float64 gives the verification mode."""
    return _copy(model, lambda a: a.astype(dtype))

def with_mode(model, mode):
    assert mode in ('train', 'infer')
    model['mode'] = mode
    model['cache'] = None
    return model

def output_channels(model):
    """The channel count after each layer; the concat entries are the joined widths."""
    channels, taps, result = 3, {}, []
    for layer in model.layers:
        if layer.kind == 'sconv':
            channels = layer.conv.pointwise.shape[1]
            if layer.tap:
                taps[layer.tap] = channels
        elif layer.kind == 'concat':
            channels = layer.channels + taps[layer.skip]
        result.append(channels)
    return result

def forward(model, x):
    """Runs the network on a (B, H, W, 3)-batch, returning (B, H, W, classes) logits.

    In training mode, this updates the running batch-norm statistics and caches what :func:`backward` needs.
    """
    B = x.shape[0] if x.ndim == 4 else 0
    if x.shape != (B, model.height, model.width, 3):
        raise ShapeError(x.shape, (B, model.height, model.width, 3), 'model input')
    train = (model.mode == 'train')

    taps, cache = {}, []
    for layer in model.layers:
        entry = aljpy.dotdict(x=x)
        if layer.kind == 'sconv':
            z = L.sconv_forward(x, layer.conv, layer.stride)
            y, stats = z, None
            if layer.bn is not None:
                y, stats = L.bn_forward(z, layer.bn, train)
                if train:
                    layer.bn['mean'] = stats.running_mean.astype(layer.bn.mean.dtype)
                    layer.bn['var'] = stats.running_var.astype(layer.bn.var.dtype)
            x = L.leaky_relu_forward(y, model.alpha)
            entry.update(z=z, y=y, stats=stats)
            if layer.tap:
                taps[layer.tap] = x
        elif layer.kind == 'up':
            x = L.upsample_forward(x)
        elif layer.kind == 'concat':
            x = L.concat_forward(x, taps[layer.skip])
        cache.append(entry)

    model['cache'] = cache if train else None
    return x

def backward(model, grad):
    """Backpropagates the gradient of the loss with respect to the logits of the last training-mode
    :func:`forward` call. Returns a dict of gradients keyed like :func:`parameters`.
    """
    if not model.get('cache'):
        raise StateError('backward needs a preceding training-mode forward pass')

    grads, skips = {}, {}
    for layer, entry in zip(model.layers[::-1], model.cache[::-1]):
        if layer.kind == 'sconv':
            if layer.tap:
                grad = grad + skips.pop(layer.tap)
            grad = L.leaky_relu_backward(entry.y, grad, model.alpha)
            if layer.bn is not None:
                grad, g_bn = L.bn_backward(entry.z, layer.bn, entry.stats, grad)
                for k, v in g_bn.items():
                    grads[f'{layer.name}.bn.{k}'] = v
            grad, g_conv = L.sconv_backward(entry.x, layer.conv, grad, layer.stride)
            for k, v in g_conv.items():
                grads[f'{layer.name}.conv.{k}'] = v
        elif layer.kind == 'up':
            grad = L.upsample_backward(grad)
        elif layer.kind == 'concat':
            grad, skips[layer.skip] = L.concat_backward(grad, layer.channels)
    assert not skips

    return grads

def parameters(model):
    """The trainable parameters as a flat dict of arrays, keyed ``'{layer}.{group}.{name}'``, in graph order. The
    arrays are the model's own, not copies."""
    result = {}
    for layer in model.layers:
        if layer.kind != 'sconv':
            continue
        for k in ('depthwise', 'pointwise', 'bias'):
            result[f'{layer.name}.conv.{k}'] = layer.conv[k]
        if layer.bn is not None:
            for k in ('gamma', 'beta'):
                result[f'{layer.name}.bn.{k}'] = layer.bn[k]
    return result

def assign(model, params):
    """Writes a dict of arrays keyed like :func:`parameters` back into the model."""
    for name, value in params.items():
        layer, group, k = name.rsplit('.', 2)
        [target] = [l for l in model.layers if l.name == layer]
        current = target[group][k]
        if value.shape != current.shape:
            raise ShapeError(value.shape, current.shape, name)
        target[group][k] = value.astype(current.dtype)
    return model

def count_parameters(model):
    """Counts the trainable parameters: depthwise, pointwise, bias, gamma and beta.

    :return: the total, and a per-layer breakdown which also reports the running statistics separately.
    """
    breakdown = []
    for layer in model.layers:
        if layer.kind != 'sconv':
            continue
        has_bn = layer.bn is not None
        row = aljpy.dotdict(
            name=layer.name,
            c_in=layer.conv.pointwise.shape[0],
            c_out=layer.conv.pointwise.shape[1],
            depthwise=layer.conv.depthwise.size,
            pointwise=layer.conv.pointwise.size,
            bias=layer.conv.bias.size,
            gamma=layer.bn.gamma.size if has_bn else 0,
            beta=layer.bn.beta.size if has_bn else 0,
            running=(layer.bn.mean.size + layer.bn.var.size) if has_bn else 0)
        row['trainable'] = row.depthwise + row.pointwise + row.bias + row.gamma + row.beta
        breakdown.append(row)
    return sum(r.trainable for r in breakdown), breakdown

def prepare_inference(model):
    """Returns an inference-mode copy of the model with every batch norm folded into the convolution before it."""
    folded = with_mode(copy(model), 'infer')
    for layer in folded.layers:
        if layer.kind == 'sconv' and layer.bn is not None:
            layer['conv'] = L.fold_batch_norm(layer.conv, layer.bn)
            layer['bn'] = None
    return folded

def save_weights(model, path):
    """Writes the model to ``path`` in the little-endian SGRT format:

    * the magic ``SGRT``, the format version, input height and width, class count and layer count as u32s, the
      LeakyReLU slope as an f32, and the comma-separated class names as a u16-length-prefixed UTF-8 string;
    * per layer, a u8 tag and a shape header, then the f32 payloads in the order depthwise, pointwise, bias, gamma,
      beta, running mean, running variance;
    * a CRC-32 of everything before it.
    """
    names = ','.join(model.names).encode()
    parts = [
        MAGIC,
        struct.pack('<5I', VERSION, model.height, model.width, model.classes, len(model.layers)),
        struct.pack('<f', model.alpha),
        struct.pack('<H', len(names)), names]
    for layer in model.layers:
        parts.append(struct.pack('<B', TAGS[layer.kind]))
        if layer.kind == 'sconv':
            c_in, c_out = layer.conv.pointwise.shape
            tap = TAPS.index(layer.tap) + 1 if layer.tap else 0
            parts.append(struct.pack('<2I3B', c_in, c_out, layer.stride, layer.bn is not None, tap))
            arrays = [layer.conv.depthwise, layer.conv.pointwise, layer.conv.bias]
            if layer.bn is not None:
                arrays += [layer.bn.gamma, layer.bn.beta, layer.bn.mean, layer.bn.var]
            parts.extend(np.ascontiguousarray(a, dtype='<f4').tobytes() for a in arrays)
        elif layer.kind == 'concat':
            parts.append(struct.pack('<BI', TAPS.index(layer.skip) + 1, layer.channels))

    body = b''.join(parts)
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    path.write_bytes(body + struct.pack('<I', zlib.crc32(body)))
    log.info(f'Saved {len(model.layers)} layers to "{path}"')

class _Reader:

    def __init__(self, path, content):
        self.path = path
        self.content = content
        self.offset = 0

    def take(self, n):
        if self.offset + n > len(self.content):
            raise TruncatedFileError(self.path, f'expected {n} more bytes at offset {self.offset}')
        chunk = self.content[self.offset:self.offset+n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, *shape):
        n = math.prod(shape)
        return np.frombuffer(self.take(4*n), dtype='<f4').astype(DTYPE).reshape(shape)

def _parse(reader, header):
    path = reader.path
    version, height, width, classes, n_layers = header
    alpha, = reader.unpack('<f')
    n_names, = reader.unpack('<H')
    try:
        names = tuple(reader.take(n_names).decode().split(','))
    except UnicodeDecodeError:
        raise CorruptHeaderError(path, 'class names are not valid UTF-8')
    if len(names) != classes:
        raise CorruptHeaderError(path, f'{len(names)} class names for {classes} classes')

    tags = {v: k for k, v in TAGS.items()}
    graph = []
    for i in range(n_layers):
        tag, = reader.unpack('<B')
        if tag not in tags:
            raise CorruptHeaderError(path, f'unknown layer tag {tag} at layer {i}')
        layer = aljpy.dotdict(kind=tags[tag], name=f'{i:02d}.{tags[tag]}')
        if layer.kind == 'sconv':
            c_in, c_out, stride, has_bn, tap = reader.unpack('<2I3B')
            if stride not in (1, 2) or has_bn > 1 or tap > len(TAPS):
                raise CorruptHeaderError(path, f'bad separable conv header at layer {i}')
            layer.update(
                stride=stride,
                tap=TAPS[tap-1] if tap else None,
                conv=arrdict.arrdict(
                    depthwise=reader.floats(3, 3, c_in),
                    pointwise=reader.floats(c_in, c_out),
                    bias=reader.floats(c_out)),
                bn=None)
            if has_bn:
                layer['bn'] = arrdict.arrdict(
                    gamma=reader.floats(c_out),
                    beta=reader.floats(c_out),
                    mean=reader.floats(c_out),
                    var=reader.floats(c_out))
        elif layer.kind == 'concat':
            skip, channels = reader.unpack('<BI')
            if not 1 <= skip <= len(TAPS):
                raise CorruptHeaderError(path, f'bad skip {skip} at layer {i}')
            layer.update(skip=TAPS[skip-1], channels=channels)
        graph.append(layer)

    # The checksum
    reader.take(4)
    if reader.offset != len(reader.content):
        raise CorruptHeaderError(path, f'{len(reader.content) - reader.offset} trailing bytes')

    return aljpy.dotdict(
        version=version, height=height, width=width,
        classes=classes, names=names, alpha=float(alpha),
        layers=graph)

def load_weights(path):
    """Reads a file written by :func:`save_weights`.

    Only the magic and the version are read before the checksum is verified. A file that fails its checksum is
    reported as truncated if its own layout says it's short, and as corrupt otherwise.

    :return: a dotdict with the header fields and the ``layers``; turn it into a model with :func:`from_weights`.
    """
    content = Path(path).read_bytes()
    reader = _Reader(path, content)
    if reader.take(4) != MAGIC:
        raise CorruptHeaderError(path, 'bad magic bytes')
    header = reader.unpack('<5I')
    if header[0] != VERSION:
        raise VersionMismatchError(path, f'format version {header[0]}, expected {VERSION}')

    crc, = struct.unpack('<I', content[-4:])
    if crc != zlib.crc32(content[:-4]):
        try:
            _parse(reader, header)
        except CorruptHeaderError:
            pass
        raise CorruptHeaderError(path, 'checksum mismatch')
    return _parse(reader, header)

def tensors(weights):
    """The flat list of parameter arrays in graph and payload order."""
    result = []
    for layer in weights.layers:
        if layer.kind == 'sconv':
            result.extend(layer.conv[k] for k in ('depthwise', 'pointwise', 'bias'))
            if layer.bn is not None:
                result.extend(layer.bn[k] for k in ('gamma', 'beta', 'mean', 'var'))
    return result

def from_weights(weights):
    return aljpy.dotdict(
        height=weights.height, width=weights.width,
        classes=weights.classes, names=weights.names,
        alpha=weights.alpha, mode='infer',
        layers=weights.layers, cache=None)

def load_model(path):
    return from_weights(load_weights(path))

def test_architecture():
    model = build_model(88, 120)
    kinds = [l.kind for l in model.layers]
    assert kinds.count('sconv') == 19
    assert kinds.count('up') == 2
    assert kinds.count('concat') == 2
    assert [l.stride for l in model.layers if l.kind == 'sconv'].count(2) == 2

    channels = output_channels(model)
    assert [c for l, c in zip(model.layers, channels) if l.kind == 'concat'] == [40, 24]
    assert channels[-1] == 5

    x = np.zeros((1, 88, 120, 3), DTYPE)
    assert forward(model, x).shape == (1, 88, 120, 5)
    assert forward(build_model(4, 4), np.zeros((2, 4, 4, 3), DTYPE)).shape == (2, 4, 4, 5)

def test_build_preconditions():
    import pytest
    with pytest.raises(PreconditionError):
        build_model(5, 4)
    with pytest.raises(PreconditionError):
        build_model(0, 4)

def test_build_is_deterministic():
    a, b = build_model(8, 8, seed=3), build_model(8, 8, seed=3)
    for (k, v), w in zip(parameters(a).items(), parameters(b).values()):
        assert v.tobytes() == w.tobytes(), k
    c = build_model(8, 8, seed=4)
    assert parameters(a)['00.sconv.conv.pointwise'].tobytes() != parameters(c)['00.sconv.conv.pointwise'].tobytes()

def test_forward_shape_mismatch():
    import pytest
    with pytest.raises(ShapeError):
        forward(build_model(8, 8), np.zeros((1, 8, 12, 3), DTYPE))

def test_count_parameters():
    from . import test
    model = build_model(8, 8)
    trainable, breakdown = count_parameters(model)
    assert trainable == test.table_parameter_count()
    assert breakdown[0].trainable == 27 + 24 + 8 + 8 + 8
    assert sum(r.running for r in breakdown) == 2*sum(r.c_out for r in breakdown)

    stripped, _ = count_parameters(prepare_inference(model))
    assert trainable - stripped == 2*sum(r.c_out for r in breakdown)

def test_zero_network():
    model = build_model(8, 8)
    params = parameters(model)
    assign(model, {k: np.zeros_like(v) for k, v in params.items() if '.conv.' in k})
    logits = forward(model, np.random.default_rng(0).random((2, 8, 8, 3)).astype(DTYPE))
    assert not logits.any()
    np.testing.assert_array_equal(L.sigmoid(logits), .5)

def test_forward_matches_reference():
    from . import test
    model = test.randomized_model(8, 8, seed=1)
    x = test.random_batch((2, 8, 8, 3), seed=2)
    np.testing.assert_allclose(forward(model, x), test.reference_forward(model, x), atol=1e-5)

def test_forward_is_deterministic():
    from . import test
    model = test.randomized_model(8, 8)
    x = test.random_batch((1, 8, 8, 3))
    assert forward(model, x).tobytes() == forward(model, x).tobytes()

def test_prepare_inference():
    from . import test
    fresh = build_model(8, 8)
    x = test.random_batch((2, 8, 8, 3))
    folded = prepare_inference(fresh)
    assert all(l.bn is None for l in folded.layers if l.kind == 'sconv')
    # float32 rounding compounds over the 19 layers to a few parts per million of the logits
    np.testing.assert_allclose(forward(folded, x), forward(fresh, x), rtol=1e-5, atol=1e-6)

    fresh64, x64 = cast(fresh, np.float64), x.astype(np.float64)
    np.testing.assert_allclose(forward(prepare_inference(fresh64), x64), forward(fresh64, x64), rtol=0, atol=1e-5)

    twice = prepare_inference(folded)
    np.testing.assert_array_equal(forward(twice, x), forward(folded, x))

    model = test.randomized_model(8, 8, seed=3)
    np.testing.assert_allclose(forward(prepare_inference(model), x), forward(model, x), atol=1e-4)

def test_backward_needs_forward():
    import pytest
    model = with_mode(build_model(4, 4), 'train')
    with pytest.raises(StateError):
        backward(model, np.zeros((1, 4, 4, 5)))

def test_backward_zero_gradient():
    from . import test
    model = with_mode(test.randomized_model(8, 8), 'train')
    logits = forward(model, test.random_batch((2, 8, 8, 3)))
    grads = backward(model, np.zeros_like(logits))
    assert grads.keys() == parameters(model).keys()
    assert not any(g.any() for g in grads.values())

def test_backward_matches_finite_differences():
    from . import test
    model = with_mode(cast(test.randomized_model(4, 4, seed=5), np.float64), 'train')
    x = test.random_batch((2, 4, 4, 3), seed=6, dtype=np.float64)
    y = (np.random.default_rng(7).random((2, 4, 4, 5)) < .3).astype(np.float64)

    def f():
        return L.bce_with_logits(forward(model, x), y)[0]

    def kinks():
        return np.concatenate([e.y.ravel() >= 0 for e in model.cache if 'y' in e])

    _, g_logits = L.bce_with_logits(forward(model, x), y)
    grads = backward(model, g_logits)
    for name, value in parameters(model).items():
        test.assert_gradient(f, value, grads[name], step=1e-4, rtol=1e-4, atol=1e-9, kinks=kinks)

def test_every_parameter_is_connected():
    from . import test
    model = with_mode(test.randomized_model(8, 8, seed=9), 'train')
    logits = forward(model, test.random_batch((2, 8, 8, 3), seed=10))
    w = test.random_batch(logits.shape, seed=11)
    grads = backward(model, w)
    for name, g in grads.items():
        if name.endswith('.conv.bias'):
            # A training-mode batch norm subtracts the batch mean, which cancels any bias before it
            np.testing.assert_allclose(g, 0, atol=1e-3)
        else:
            assert (g != 0).all(), name

def test_weights_round_trip(tmp_path):
    from . import test
    model = test.randomized_model(8, 12, seed=12)
    save_weights(model, tmp_path / 'model.sgrt')
    loaded = load_model(tmp_path / 'model.sgrt')
    assert (loaded.height, loaded.width, loaded.names) == (8, 12, NAMES)
    assert loaded.alpha == np.float32(model.alpha)
    for a, b in zip(tensors(model), tensors(loaded)):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    x = test.random_batch((1, 8, 12, 3))
    assert forward(model, x).tobytes() == forward(loaded, x).tobytes()

    folded = prepare_inference(model)
    save_weights(folded, tmp_path / 'folded.sgrt')
    assert all(l.bn is None for l in load_model(tmp_path / 'folded.sgrt').layers if l.kind == 'sconv')

def test_weights_errors(tmp_path):
    import pytest
    path = tmp_path / 'model.sgrt'
    save_weights(build_model(4, 4), path)
    content = path.read_bytes()

    (tmp_path / 'magic.sgrt').write_bytes(b'XXXX' + content[4:])
    with pytest.raises(CorruptHeaderError):
        load_weights(tmp_path / 'magic.sgrt')

    (tmp_path / 'short.sgrt').write_bytes(content[:-1])
    with pytest.raises(TruncatedFileError):
        load_weights(tmp_path / 'short.sgrt')

    (tmp_path / 'version.sgrt').write_bytes(content[:4] + struct.pack('<I', VERSION+1) + content[8:])
    with pytest.raises(VersionMismatchError):
        load_weights(tmp_path / 'version.sgrt')

    flipped = bytearray(content)
    flipped[-10] ^= 0xFF
    (tmp_path / 'flipped.sgrt').write_bytes(bytes(flipped))
    with pytest.raises(CorruptHeaderError):
        load_weights(tmp_path / 'flipped.sgrt')

def test_weights_corrupted_in_each_region(tmp_path):
    import pytest
    model = build_model(4, 4)
    path = tmp_path / 'model.sgrt'
    save_weights(model, path)
    content = path.read_bytes()

    offset = 4 + 20 + 4 + 2
    regions = {'names': offset}
    offset += len(','.join(model.names).encode())
    for layer in model.layers:
        regions.setdefault(f'{layer.kind} tag', offset)
        offset += 1
        if layer.kind == 'sconv':
            c_in, c_out = layer.conv.pointwise.shape
            regions.setdefault('tap', offset + 10)
            regions.setdefault('payload', offset + 11)
            offset += 11 + 4*(9*c_in + c_in*c_out + c_out + 4*c_out)
        elif layer.kind == 'concat':
            regions.setdefault('skip', offset)
            offset += 5
    regions['checksum'] = offset
    assert offset + 4 == len(content)

    for region, i in regions.items():
        flipped = bytearray(content)
        flipped[i] ^= 0xFF
        path.write_bytes(bytes(flipped))
        with pytest.raises(CorruptHeaderError):
            load_weights(path)
