"""Polygon rasterization."""
import numpy as np

def crossings(vertices, y):
    """The sorted x-coordinates where the horizontal line at height ``y`` crosses the polygon's edges.

    An edge counts if its endpoints lie on opposite sides of the line, with an endpoint exactly on the line treated as
    being below it. This keeps every vertex from being counted twice.
    """
    vertices = np.asarray(vertices, dtype=float)
    (x0, y0), (x1, y1) = vertices.T, np.roll(vertices, -1, 0).T
    straddles = (y0 > y) != (y1 > y)
    x0, y0, x1, y1 = x0[straddles], y0[straddles], x1[straddles], y1[straddles]
    return np.sort(x0 + (y - y0)*(x1 - x0)/(y1 - y0))

def fill_polygon(vertices, height, width):
    """Scanline fill of a polygon with the even-odd rule, returning a (height, width) boolean mask.

    A pixel is inside if its center is. Vertices are (x, y) pixel coordinates and may lie outside the frame.
    """
    mask = np.zeros((height, width), dtype=bool)
    centers = np.arange(width) + .5
    for row in range(height):
        xs = crossings(vertices, row + .5)
        if len(xs):
            # Inside iff an odd number of crossings lie to the right of the center
            right = len(xs) - np.searchsorted(xs, centers, side='right')
            mask[row] = (right % 2 == 1)
    return mask

def random_polygon(rng, height, width, sides=(3, 6)):
    """A polygon with a uniformly-chosen number of sides in ``sides``, its vertices uniform over the frame."""
    n = rng.integers(sides[0], sides[1] + 1)
    return np.stack([rng.uniform(0, width, n), rng.uniform(0, height, n)], -1)

def test_triangle():
    mask = fill_polygon([(0, 0), (8, 0), (0, 8)], 8, 8)
    # Centers strictly below the hypotenuse x + y = 8
    ys, xs = np.mgrid[:8, :8] + .5
    np.testing.assert_array_equal(mask, xs + ys < 8)

def test_degenerate():
    assert not fill_polygon([(1, 1), (5, 5), (9, 9)], 12, 12).any()
    assert not fill_polygon([(1, 3), (9, 3), (5, 3)], 12, 12).any()

def test_clipping():
    mask = fill_polygon([(-10, -10), (100, -10), (100, 100), (-10, 100)], 6, 7)
    assert mask.all()

def test_matches_brute_force():
    from . import test
    rng = np.random.default_rng(0)
    for _ in range(20):
        h, w = rng.integers(8, 65, 2)
        polygon = random_polygon(rng, h, w)
        mask = fill_polygon(polygon, h, w)
        for y in range(h):
            for x in range(w):
                assert mask[y, x] == test.point_in_polygon(polygon, x + .5, y + .5)
