"""Online augmentation: background replacement, mirroring, photometric noise and sun patches.

Every op takes a :ref:`sample <samples>` and returns a new one. Images stay in [0, 1]; photometric ops never touch the
mask, and the mirror moves mask and image with the same index map. :func:`apply_pipeline` is a pure function of the
sample, the config and the sample's index.
"""
import numpy as np
import scipy.ndimage
import matplotlib.colors
import aljpy
from . import noise, raster
from .config import ConfigError, AUGMENT, PHOTOMETRIC, check_limits
from .tensor import DTYPE, ShapeError

PRESETS = {
    'none': {name: {'enabled': False} for name in AUGMENT.order},
    'conventional_without_sun': {'sun': {'enabled': False}},
    'conventional': {}}

def _sample(sample, image):
    return aljpy.dotdict(image=np.clip(image, 0, 1).astype(DTYPE), mask=sample.mask)

def _check(condition, message):
    if not condition:
        raise ConfigError(message)

def fit_background(background, height, width):
    """Scales ``background`` to cover a ``height`` x ``width`` frame, keeping its aspect ratio, then center-crops it."""
    bh, bw = background.shape[:2]
    if (bh, bw) != (height, width):
        zoom = max(height/bh, width/bw)
        background = scipy.ndimage.zoom(background, (zoom, zoom, 1), order=1, mode='nearest', grid_mode=True)
        top, left = (background.shape[0] - height)//2, (background.shape[1] - width)//2
        background = background[top:top+height, left:left+width]
    if background.shape[:2] != (height, width):
        raise ShapeError(background.shape, (height, width, 3), 'fitted background')
    return background

def replace_background(sample, background, background_class=0):
    """Puts ``background`` behind every pixel whose mask class is background."""
    h, w = sample.mask.shape
    background = fit_background(np.asarray(background, dtype=DTYPE), h, w)
    image = np.where((sample.mask == background_class)[..., None], background, sample.image)
    return _sample(sample, image)

def flip_mirror(sample):
    """Mirrors image and mask about the vertical axis."""
    return aljpy.dotdict(image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy())

def gaussian_noise(sample, sigma, rng):
    check_limits('gaussian_noise', 'sigma', sigma)
    return _sample(sample, sample.image + rng.normal(0, sigma, sample.image.shape))

def multiply_brightness(sample, m):
    check_limits('multiply', 'factor', m)
    return _sample(sample, sample.image*m)

def add_rgb(sample, delta):
    """Adds ``delta`` to the image; either one offset for all channels or one per channel."""
    check_limits('add_rgb', 'delta', delta)
    return _sample(sample, sample.image + np.broadcast_to(delta, (3,)))

def add_hsv(sample, dh, ds, dv):
    """Shifts hue (wrapping around), saturation and value (both clamped) in HSV space."""
    check_limits('add_hsv', 'hue', dh)
    check_limits('add_hsv', 'saturation', ds)
    check_limits('add_hsv', 'value', dv)
    hsv = matplotlib.colors.rgb_to_hsv(np.clip(sample.image, 0, 1))
    hsv[..., 0] = np.mod(hsv[..., 0] + dh, 1.)
    hsv[..., 1] = np.clip(hsv[..., 1] + ds, 0, 1)
    hsv[..., 2] = np.clip(hsv[..., 2] + dv, 0, 1)
    return _sample(sample, matplotlib.colors.hsv_to_rgb(hsv))

def contrast_normalize(sample, alpha):
    check_limits('contrast', 'alpha', alpha)
    return _sample(sample, .5 + alpha*(sample.image - .5))

def blur_kernel(length, angle):
    """A normalized (length, length) kernel holding a line through its center at ``angle`` degrees."""
    _check(length >= 1 and length % 2 == 1, f'Blur length must be a positive odd integer, got {length}')
    kernel = np.zeros((length, length))
    theta = np.deg2rad(angle)
    ts = np.linspace(-(length - 1)/2, (length - 1)/2, 4*length)
    ys = np.rint(length//2 - ts*np.sin(theta)).astype(int)
    xs = np.rint(length//2 + ts*np.cos(theta)).astype(int)
    kernel[ys, xs] = 1.
    return kernel/kernel.sum()

def motion_blur(sample, length, angle):
    check_limits('motion_blur', 'length', length)
    check_limits('motion_blur', 'angle', angle)
    kernel = blur_kernel(length, angle)
    blurred = np.stack([
        scipy.ndimage.convolve(sample.image[..., c], kernel, mode='reflect')
        for c in range(sample.image.shape[-1])], -1)
    return _sample(sample, blurred)

def simplex_overlay(sample, amplitude, scale, seed):
    """Adds ``amplitude`` times a seeded simplex noise field to every channel."""
    check_limits('simplex', 'amplitude', amplitude)
    check_limits('simplex', 'scale', scale)
    h, w = sample.mask.shape
    field = noise.Simplex(seed).field(h, w, scale)
    return _sample(sample, sample.image + amplitude*field[..., None])

def apply_polygons(sample, polygons, factors):
    """Multiplies the inside of each polygon by its factor."""
    h, w = sample.mask.shape
    image = sample.image.astype(float)
    for polygon, factor in zip(polygons, factors):
        image[raster.fill_polygon(polygon, h, w)] *= factor
    return _sample(sample, image)

def sun_patches(sample, rng, count=(1, 4), factor=(1.1, 1.8)):
    """Brightens a random number of random 3-to-6-sided polygons, each by its own random factor."""
    check_limits('sun', 'count', count)
    check_limits('sun', 'factor', factor)
    _check(count[0] <= count[1] and factor[0] <= factor[1], f'Sun ranges must be low <= high, got {count} and {factor}')
    h, w = sample.mask.shape
    k = rng.integers(count[0], count[1] + 1)
    polygons = [raster.random_polygon(rng, h, w) for _ in range(k)]
    factors = rng.uniform(factor[0], factor[1], k)
    return apply_polygons(sample, polygons, factors)

def _draw(op, params, rng):
    """Draws the parameters of one op from its configured ranges and returns a function applying it."""
    def uniform(k):
        return rng.uniform(*params[k])

    if op == 'flip':
        return flip_mirror
    if op == 'gaussian_noise':
        sigma = uniform('sigma')
        return lambda s: gaussian_noise(s, sigma, rng)
    if op == 'multiply':
        m = uniform('factor')
        return lambda s: multiply_brightness(s, m)
    if op == 'add_rgb':
        delta = rng.uniform(*params.delta, 3)
        return lambda s: add_rgb(s, delta)
    if op == 'add_hsv':
        dh, ds, dv = uniform('hue'), uniform('saturation'), uniform('value')
        return lambda s: add_hsv(s, dh, ds, dv)
    if op == 'simplex':
        amplitude, scale, seed = uniform('amplitude'), uniform('scale'), int(rng.integers(2**31))
        return lambda s: simplex_overlay(s, amplitude, scale, seed)
    if op == 'motion_blur':
        length, angle = int(rng.choice(params.length)), uniform('angle')
        return lambda s: motion_blur(s, length, angle)
    if op == 'contrast':
        alpha = uniform('alpha')
        return lambda s: contrast_normalize(s, alpha)
    if op == 'sun':
        return lambda s: sun_patches(s, rng, params.count, params.factor)
    raise ConfigError(f'Unknown augmentation "{op}"')

def apply_pipeline(sample, config, index):
    """Applies each enabled augmentation in the configured order, each with its own probability.

    The random stream is derived from ``(config.seed, index)``, so the result depends only on the arguments.
    """
    rng = np.random.default_rng([config.seed, index])
    for op in config.order:
        params = config[op]
        if not params.enabled:
            continue
        if rng.random() < params.probability:
            sample = _draw(op, params, rng)(sample)
    return sample

def test_replace_background():
    from . import dataset
    sample = dataset.generate_toy_scene(0, 32, 48)
    background = np.random.default_rng(0).random((32, 48, 3)).astype(DTYPE)

    everywhere = aljpy.dotdict(image=sample.image, mask=np.zeros_like(sample.mask))
    np.testing.assert_array_equal(replace_background(everywhere, background).image, background)

    nowhere = aljpy.dotdict(image=sample.image, mask=np.ones_like(sample.mask))
    np.testing.assert_array_equal(replace_background(nowhere, background).image, sample.image)

    half = aljpy.dotdict(image=sample.image, mask=np.zeros_like(sample.mask))
    half.mask[:, 24:] = 1
    replaced = replace_background(half, background)
    np.testing.assert_array_equal(replaced.image[:, :24], background[:, :24])
    np.testing.assert_array_equal(replaced.image[:, 24:], sample.image[:, 24:])
    assert replaced.mask is half.mask

def test_fit_background():
    background = np.random.default_rng(0).random((60, 40, 3)).astype(DTYPE)
    assert fit_background(background, 32, 48).shape == (32, 48, 3)
    assert fit_background(background, 60, 40) is background

def test_flip():
    from . import dataset
    sample = dataset.generate_toy_scene(1, 32, 40)
    flipped = flip_mirror(sample)
    np.testing.assert_array_equal(flipped.image[:, -1], sample.image[:, 0])
    np.testing.assert_array_equal(np.bincount(flipped.mask.ravel(), minlength=6), np.bincount(sample.mask.ravel(), minlength=6))
    twice = flip_mirror(flipped)
    assert twice.image.tobytes() == sample.image.tobytes()
    assert twice.mask.tobytes() == sample.mask.tobytes()

def test_photometric():
    constant = aljpy.dotdict(image=np.full((16, 16, 3), .5, DTYPE), mask=np.zeros((16, 16), np.uint8))
    rng = np.random.default_rng(0)

    assert gaussian_noise(constant, 0., rng).image.tobytes() == constant.image.tobytes()
    np.testing.assert_allclose(multiply_brightness(constant, 1.4).image, .7, atol=1e-6)
    np.testing.assert_allclose(motion_blur(constant, 7, 30.).image, .5, atol=1e-6)
    np.testing.assert_allclose(contrast_normalize(constant, 1.5).image, .5)
    np.testing.assert_allclose(add_rgb(constant, [.1, 0., -.1]).image[0, 0], [.6, .5, .4], atol=1e-6)

    image = np.random.default_rng(1).random((16, 16, 3)).astype(DTYPE)
    colorful = aljpy.dotdict(image=image, mask=constant.mask)
    np.testing.assert_allclose(add_hsv(colorful, 0., 0., 0.).image, image, atol=1e-5)

    red = matplotlib.colors.rgb_to_hsv(np.array([[[1., 0., 0.]]]))
    np.testing.assert_allclose(red[0, 0], [0., 1., 1.])

    a = simplex_overlay(colorful, .1, .05, seed=3)
    b = simplex_overlay(colorful, .1, .05, seed=3)
    assert a.image.tobytes() == b.image.tobytes()

def test_parameter_errors():
    import pytest
    sample = aljpy.dotdict(image=np.full((8, 8, 3), .5, DTYPE), mask=np.zeros((8, 8), np.uint8))
    with pytest.raises(ConfigError):
        gaussian_noise(sample, -1., np.random.default_rng(0))
    with pytest.raises(ConfigError):
        motion_blur(sample, 4, 0.)
    with pytest.raises(ConfigError):
        simplex_overlay(sample, .1, 0., 0)

    rng = np.random.default_rng(0)
    out_of_range = [
        lambda: gaussian_noise(sample, 2., rng),
        lambda: multiply_brightness(sample, -.5),
        lambda: multiply_brightness(sample, 10.),
        lambda: add_rgb(sample, [0., 1.5, 0.]),
        lambda: add_hsv(sample, 0., -2., 0.),
        lambda: add_hsv(sample, 0., 0., np.nan),
        lambda: contrast_normalize(sample, 5.),
        lambda: motion_blur(sample, 33, 0.),
        lambda: motion_blur(sample, 3, 720.),
        lambda: simplex_overlay(sample, 2., .05, 0),
        lambda: sun_patches(sample, rng, count=(1, 40)),
        lambda: sun_patches(sample, rng, factor=(1.8, 1.1))]
    for op in out_of_range:
        with pytest.raises(ConfigError):
            op()

def test_blur_kernel():
    for length in (3, 5, 7, 9):
        for angle in (0., 45., 90., 133.):
            k = blur_kernel(length, angle)
            assert np.isclose(k.sum(), 1.)
            assert k[length//2, length//2] > 0
    np.testing.assert_allclose(blur_kernel(3, 0.)[1], 1/3)

def test_sun_patches():
    sample = aljpy.dotdict(image=np.full((16, 16, 3), .5, DTYPE), mask=np.zeros((16, 16), np.uint8))
    triangle = np.array([(0, 0), (16, 0), (0, 16)])
    lit = apply_polygons(sample, [triangle], [1.4])
    inside = raster.fill_polygon(triangle, 16, 16)
    np.testing.assert_allclose(lit.image[inside], .7, atol=1e-6)
    np.testing.assert_array_equal(lit.image[~inside], .5)

    unchanged = sun_patches(sample, np.random.default_rng(0), factor=(1., 1.))
    assert unchanged.image.tobytes() == sample.image.tobytes()

    flat = apply_polygons(sample, [np.array([(1, 1), (5, 5), (9, 9)])], [1.8])
    assert flat.image.tobytes() == sample.image.tobytes()

def test_sun_patches_match_brute_force():
    from . import test
    rng = np.random.default_rng(0)
    for _ in range(5):
        h, w = rng.integers(8, 65, 2)
        sample = aljpy.dotdict(image=np.full((h, w, 3), .25, DTYPE), mask=np.zeros((h, w), np.uint8))
        polygon = raster.random_polygon(rng, h, w)
        lit = apply_polygons(sample, [polygon], [2.])
        for y in range(h):
            for x in range(w):
                expected = .5 if test.point_in_polygon(polygon, x + .5, y + .5) else .25
                assert (lit.image[y, x] == expected).all()

def test_pipeline_disabled():
    from . import config as C, dataset
    sample = dataset.generate_toy_scene(2, 32, 32)
    augment = C.resolve({'augment': PRESETS['none']}).augment
    out = apply_pipeline(sample, augment, 0)
    assert out.image.tobytes() == sample.image.tobytes()
    assert out.mask.tobytes() == sample.mask.tobytes()

def test_pipeline_deterministic():
    from . import config as C, dataset
    augment = C.resolve({'augment': {op: {'probability': 1.} for op in C.ORDER}}).augment
    sample = dataset.generate_toy_scene(3, 32, 32)
    a, b = apply_pipeline(sample, augment, 7), apply_pipeline(sample, augment, 7)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.image.tobytes() != apply_pipeline(sample, augment, 8).image.tobytes()

def test_pipeline_properties():
    from . import config as C, dataset
    photometric = {op: {'enabled': op in PHOTOMETRIC} for op in C.ORDER}
    photometric_only = C.resolve({'augment': photometric}).augment
    full = C.resolve({'augment': {op: {'probability': 1.} for op in C.ORDER}}).augment
    for i in range(100):
        sample = dataset.generate_toy_scene(i, 32, 32)
        out = apply_pipeline(sample, photometric_only, i)
        assert out.mask.tobytes() == sample.mask.tobytes()
        assert ((0 <= out.image) & (out.image <= 1)).all()

        out = apply_pipeline(sample, full, i)
        assert ((0 <= out.image) & (out.image <= 1)).all()
        np.testing.assert_array_equal(out.mask, sample.mask[:, ::-1])
