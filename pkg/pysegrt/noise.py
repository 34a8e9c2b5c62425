"""Seeded 2D simplex noise, vectorized over arrays of coordinates."""
import numpy as np

# The 3D cube-edge gradients; only their first two components are used
EDGES = np.array([
    (1, 1, 0), (-1, 1, 0), (1, -1, 0), (-1, -1, 0),
    (1, 0, 1), (-1, 0, 1), (1, 0, -1), (-1, 0, -1),
    (0, 1, 1), (0, -1, 1), (0, 1, -1), (0, -1, -1)], dtype=float)[:, :2]

F2 = .5*(np.sqrt(3) - 1)
G2 = (3 - np.sqrt(3))/6

class Simplex:

    def __init__(self, seed):
        """A simplex gradient-lattice noise field.

        The lattice hashing uses a permutation of 0-255 drawn from ``seed``, so two fields with the same seed are
        identical.
        """
        self.seed = seed
        perm = np.random.default_rng(seed).permutation(256)
        self._perm = np.concatenate([perm, perm])

    def _gradient(self, i, j):
        return EDGES[self._perm[i + self._perm[j]] % 12]

    def __call__(self, x, y):
        """Noise values in [-1, +1] at the points ``(x, y)``. The arrays can be any (matching) shape."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)

        # Skew into the simplex lattice and find which of the cell's two triangles we're in
        s = (x + y)*F2
        i, j = np.floor(x + s), np.floor(y + s)
        t = (i + j)*G2
        x0, y0 = x - (i - t), y - (j - t)
        upper = x0 > y0
        i1, j1 = upper.astype(int), 1 - upper.astype(int)
        corners = [
            (x0, y0, 0, 0),
            (x0 - i1 + G2, y0 - j1 + G2, i1, j1),
            (x0 - 1 + 2*G2, y0 - 1 + 2*G2, 1, 1)]

        ii, jj = i.astype(int) & 255, j.astype(int) & 255
        total = np.zeros_like(x)
        for cx, cy, di, dj in corners:
            g = self._gradient(ii + di, jj + dj)
            falloff = np.clip(.5 - cx**2 - cy**2, 0, None)
            total += falloff**4*(g[..., 0]*cx + g[..., 1]*cy)

        return np.clip(70*total, -1, +1)

    def field(self, height, width, scale):
        """Samples the noise on a pixel grid, with pixel ``(y, x)`` at lattice point ``(x*scale, y*scale)``."""
        ys, xs = np.mgrid[:height, :width]
        return self(xs*scale, ys*scale)

def test_deterministic():
    a = Simplex(3).field(16, 20, .1)
    b = Simplex(3).field(16, 20, .1)
    assert a.shape == (16, 20)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != Simplex(4).field(16, 20, .1).tobytes()

def test_range_and_mean():
    rng = np.random.default_rng(0)
    xs, ys = rng.uniform(0, 1000, (2, 10000))
    values = Simplex(0)(xs, ys)
    assert ((-1 <= values) & (values <= +1)).all()
    assert abs(values.mean()) < .05
    assert values.std() > .1

def test_matches_scalar():
    # The scalar formulation, one corner at a time
    noise = Simplex(1)
    perm = noise._perm

    def scalar(x, y):
        s = (x + y)*F2
        i, j = int(np.floor(x + s)), int(np.floor(y + s))
        t = (i + j)*G2
        x0, y0 = x - i + t, y - j + t
        i1, j1 = (1, 0) if x0 > y0 else (0, 1)
        n = 0.
        for cx, cy, di, dj in [(x0, y0, 0, 0), (x0 - i1 + G2, y0 - j1 + G2, i1, j1), (x0 - 1 + 2*G2, y0 - 1 + 2*G2, 1, 1)]:
            r = .5 - cx*cx - cy*cy
            if r >= 0:
                gx, gy = EDGES[perm[((i + di) & 255) + perm[(j + dj) & 255]] % 12]
                n += r**4*(gx*cx + gy*cy)
        return max(-1., min(1., 70*n))

    rng = np.random.default_rng(2)
    for x, y in rng.uniform(-50, 50, (50, 2)):
        assert np.isclose(noise(x, y), scalar(x, y))
