"""Dense (height, width, channels) float arrays, and the handful of utilities the rest of the package shares.

A tensor here is just a C-ordered :class:`numpy.ndarray` of shape ``(height, width, channels)``, so the element at
``(y, x, c)`` lives at flat offset ``(y*width + x)*channels + c``. A batch is the same with a leading minibatch axis.
"""
from typing import NamedTuple
import numpy as np

DTYPE = np.float32
# Only the gradient checks run in this precision
CHECK_DTYPE = np.float64

class ShapeError(ValueError):

    def __init__(self, actual, expected, what='tensor'):
        self.actual = tuple(actual)
        self.expected = tuple(expected)
        super().__init__(f'{what} has shape {self.actual}, expected {self.expected}')

class PreconditionError(ValueError):
    pass

class Shape(NamedTuple):
    height: int
    width: int
    channels: int

    @classmethod
    def of(cls, t):
        """The shape of a single tensor, or of each member of a batch."""
        return cls(*t.shape[-3:])

    @property
    def size(self):
        return self.height*self.width*self.channels

def shape(height, width, channels):
    s = Shape(int(height), int(width), int(channels))
    if min(s) < 1:
        raise PreconditionError(f'All components of a shape must be at least 1, got {s}')
    return s

def filled(s, value, dtype=DTYPE):
    """A tensor of shape ``s`` with every element equal to ``value``."""
    s = shape(*s)
    return np.full(s, value, dtype=dtype)

def map_elementwise(t, f):
    """Applies the scalar function ``f`` to every element of ``t``, returning a fresh tensor of the same shape and
    dtype."""
    t = np.asarray(t)
    return np.vectorize(f, otypes=[t.dtype])(t).reshape(t.shape)

def assert_shape(t, expected, what='tensor'):
    """Raises a :class:`ShapeError` carrying both shapes unless ``t`` has shape ``expected``."""
    if tuple(t.shape) != tuple(expected):
        raise ShapeError(t.shape, expected, what)

def offset(s, y, x, c):
    """Flat index of ``(y, x, c)`` in a tensor of shape ``s``."""
    return (y*s.width + x)*s.channels + c

def test_filled():
    assert filled((1, 1, 1), 0.).tolist() == [[[0.]]]
    assert (filled((2, 2, 1), 1.5) == 1.5).all()
    t = filled((2, 3, 5), 0.)
    assert t.size == 30 and t.dtype == DTYPE

    import pytest
    with pytest.raises(PreconditionError):
        filled((0, 1, 1), 0.)

def test_map_elementwise():
    t = np.array([[[1., -2.]]], dtype=DTYPE)
    np.testing.assert_array_equal(map_elementwise(t, lambda v: -v), [[[-1., 2.]]])
    np.testing.assert_array_equal(map_elementwise(np.array([[[.25]]], DTYPE), lambda v: 4*v), [[[1.]]])

    r = np.random.default_rng(0).normal(size=(3, 4, 2)).astype(DTYPE)
    s = map_elementwise(r, lambda v: v)
    assert s.dtype == r.dtype and s.tobytes() == r.tobytes()

def test_assert_shape():
    import pytest
    assert_shape(np.zeros((2, 2, 3)), (2, 2, 3))
    assert_shape(np.zeros((1, 1, 1)), Shape(1, 1, 1))
    with pytest.raises(ShapeError) as info:
        assert_shape(np.zeros((2, 2, 3)), (2, 2, 5))
    assert info.value.actual == (2, 2, 3) and info.value.expected == (2, 2, 5)

def test_offset_is_a_bijection():
    s = shape(3, 4, 5)
    t = np.arange(s.size).reshape(s)
    seen = np.zeros(s.size, dtype=int)
    for y in range(s.height):
        for x in range(s.width):
            for c in range(s.channels):
                i = offset(s, y, x, c)
                assert t.flat[i] == t[y, x, c]
                seen[i] += 1
    assert (seen == 1).all()
