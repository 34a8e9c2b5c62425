"""Samples, masks, manifests and the procedural toy scenes.

.. _samples:

A sample is a dotdict with an ``image``, a (H, W, 3) float32 array in [0, 1], and a ``mask``, a (H, W) array of class
indices into :data:`CLASSES`. Masks are stored on disk as RGB PNGs in the :data:`PALETTE` colors.

A manifest is a dotdict with

``root``
    The directory that the entry paths are relative to.
``entries``
    A list of dotdicts with ``image`` and ``mask`` paths.
``splits``
    A dict from split name to a list of entry indices.
``split_seed``
    The seed the splits were drawn with.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
import numpy as np
import aljpy
from PIL import Image
from tqdm.auto import tqdm
from . import augment as A
from .tensor import DTYPE, ShapeError, PreconditionError

log = logging.getLogger(__name__)

CLASSES = ('background', 'field', 'line', 'robot', 'ball', 'goal post')

PALETTE = np.array([
    (0, 0, 0),
    (0, 255, 0),
    (255, 255, 255),
    (255, 0, 255),
    (255, 0, 0),
    (0, 0, 255)], dtype=np.uint8)

# What the toy scenes paint each class with. These are deliberately not the palette colors.
COLORS = np.array([
    (.45, .45, .45),
    (.15, .55, .2),
    (.95, .95, .95),
    (.7, .3, .7),
    (.9, .15, .1),
    (.2, .3, .85)], dtype=DTYPE)

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg', '.bmp')

class DecodeError(ValueError):
    pass

def _codes(rgb):
    rgb = rgb.astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]

def decode_mask(rgb):
    """Turns an (H, W, 3) palette-colored uint8 image into an (H, W) array of class indices."""
    palette = _codes(PALETTE)
    order = np.argsort(palette)
    codes = _codes(rgb)
    positions = np.clip(np.searchsorted(palette[order], codes), 0, len(palette) - 1)
    known = palette[order][positions] == codes
    if not known.all():
        y, x = np.argwhere(~known)[0]
        raise DecodeError(f'Unknown mask color {tuple(int(c) for c in rgb[y, x])} at pixel (y={y}, x={x})')
    return order[positions].astype(np.uint8)

def encode_mask(mask):
    return PALETTE[mask]

def _read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert('RGB'))

def load_image(path):
    return (_read_rgb(path)/255.).astype(DTYPE)

def save_image(image, path):
    Path(path).parent.mkdir(exist_ok=True, parents=True)
    Image.fromarray(np.rint(np.clip(image, 0, 1)*255).astype(np.uint8)).save(path)

def load_mask(path):
    try:
        return decode_mask(_read_rgb(path))
    except DecodeError as e:
        raise DecodeError(f'{path}: {e}')

def save_mask(mask, path):
    Path(path).parent.mkdir(exist_ok=True, parents=True)
    Image.fromarray(encode_mask(mask)).save(path)

def load_sample(image_path, mask_path):
    image, mask = load_image(image_path), load_mask(mask_path)
    if image.shape[:2] != mask.shape:
        raise ShapeError(mask.shape, image.shape[:2], f'mask {mask_path}')
    return aljpy.dotdict(image=image, mask=mask)

def save_sample(sample, image_path, mask_path):
    save_image(sample.image, image_path)
    save_mask(sample.mask, mask_path)

def subsample_image(image, height, width):
    """Nearest-neighbour decimation to ``height`` x ``width``. There's no filtering, so expect aliasing.

    Works on masks as well as images.
    """
    H, W = image.shape[:2]
    if height > H or width > W:
        raise PreconditionError(f'Can only subsample, but asked to go from {H}x{W} to {height}x{width}')
    ys, xs = (np.arange(height)*H)//height, (np.arange(width)*W)//width
    return image[ys][:, xs]

def mask_to_targets(mask):
    """One channel per non-background class, in the order field, line, robot, ball, goal post."""
    return (mask[..., None] == np.arange(1, len(CLASSES))).astype(DTYPE)

def _segment_distance(xs, ys, p, q):
    d = q - p
    t = np.clip(((xs - p[0])*d[0] + (ys - p[1])*d[1])/max(d @ d, 1e-9), 0, 1)
    return np.hypot(xs - p[0] - t*d[0], ys - p[1] - t*d[1])

def generate_toy_scene(seed, height, width):
    """A procedural scene of a pitch: a gray background band above a green field, with white lines, goal posts,
    robots and balls on it. The mask is painted from the same geometry as the image."""
    if height < 32 or width < 32:
        raise PreconditionError(f'Toy scenes need to be at least 32x32, got {height}x{width}')
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[:height, :width] + .5

    image = np.empty((height, width, 3), DTYPE)
    mask = np.zeros((height, width), np.uint8)

    def paint(region, cls):
        image[region] = COLORS[cls]
        mask[region] = cls

    horizon = rng.integers(height//8, height//3)
    paint(np.ones_like(mask, dtype=bool), 0)
    # A darker stripe, so the background isn't flat
    image[ys[:, 0] < horizon//2] *= .8
    paint(ys >= horizon, 1)

    for _ in range(rng.integers(1, 4)):
        p = rng.uniform((0, horizon), (width, height))
        q = rng.uniform((0, horizon), (width, height))
        paint((_segment_distance(xs, ys, p, q) <= rng.uniform(.6, 1.5)) & (ys >= horizon), 2)

    for _ in range(rng.integers(0, 3)):
        x, thickness = rng.uniform(0, width), rng.uniform(1.5, 3.5)
        top, bottom = rng.uniform(0, horizon), horizon + rng.uniform(2, height//4)
        paint((abs(xs - x) <= thickness/2) & (top <= ys) & (ys <= bottom), 5)

    for _ in range(rng.integers(0, 3)):
        size = rng.uniform(height/6, height/3)
        x, feet = rng.uniform(0, width), rng.uniform(horizon + size/2, height)
        w = size/3
        body = (abs(xs - x) <= w/2) & (feet - .8*size <= ys) & (ys <= feet - .35*size)
        head = (abs(xs - x) <= w/4) & (feet - size <= ys) & (ys < feet - .8*size)
        legs = (abs(abs(xs - x) - w/4) <= w/6) & (feet - .35*size < ys) & (ys <= feet)
        paint(body | head | legs, 3)

    for _ in range(rng.integers(0, 3)):
        r = rng.uniform(2, max(3, height/12))
        cx, cy = rng.uniform(0, width), rng.uniform(horizon + r, height)
        paint(np.hypot(xs - cx, ys - cy) <= r, 4)

    return aljpy.dotdict(image=image, mask=mask)

def make_manifest(root, entries, splits={}, split_seed=None):
    return aljpy.dotdict(
        root=Path(root),
        entries=[aljpy.dotdict(image=str(e['image']), mask=str(e['mask'])) for e in entries],
        splits={k: [int(i) for i in v] for k, v in splits.items()},
        split_seed=split_seed)

def paths(manifest, i):
    entry = manifest.entries[i]
    return manifest.root / entry.image, manifest.root / entry.mask

def save_manifest(manifest, path):
    """Writes the manifest as JSON, with the entry paths relative to the manifest's directory."""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    rel = lambda p: Path(p).resolve().relative_to(path.parent.resolve()).as_posix()
    entries = [{'image': rel(i), 'mask': rel(m)} for i, m in (paths(manifest, j) for j in range(len(manifest.entries)))]
    doc = {
        'palette': {name: PALETTE[i].tolist() for i, name in enumerate(CLASSES)},
        'entries': entries,
        'splits': manifest.splits,
        'split_seed': manifest.split_seed}
    path.write_text(json.dumps(doc, indent=2))

def load_manifest(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    result = make_manifest(path.parent, doc['entries'], doc.get('splits', {}), doc.get('split_seed'))
    images = [e.image for e in result.entries]
    if len(set(images)) != len(images):
        raise ValueError(f'{path}: the manifest lists an image more than once')
    return result

def split_manifest(manifest, fractions, seed):
    """Shuffles the entries with ``seed`` and cuts them into contiguous splits of the given fractions.

    Two fractions give ``train`` and ``test`` splits; three give ``train``, ``val`` and ``test``.
    """
    n = len(manifest.entries)
    if n == 0:
        raise PreconditionError('Can\'t split an empty manifest')
    if len(fractions) not in (2, 3):
        raise PreconditionError(f'Expected two or three split fractions, got {len(fractions)}')
    if any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise PreconditionError(f'Split fractions must be positive and sum to at most 1, got {tuple(fractions)}')

    names = ('train', 'test') if len(fractions) == 2 else ('train', 'val', 'test')
    order = np.random.default_rng(seed).permutation(n)
    ends = np.minimum(np.round(np.cumsum(fractions)*n).astype(int), n)
    starts = np.concatenate([[0], ends[:-1]])
    splits = {name: sorted(order[s:e].tolist()) for name, s, e in zip(names, starts, ends)}
    return aljpy.dotdict({**manifest, 'splits': splits, 'split_seed': seed})

def write_toy_dataset(out, count, seed=0, height=240, width=320, fractions=(.7, .1, .2)):
    """Generates ``count`` toy scenes under ``out``, along with a split manifest at ``out/manifest.json``."""
    out = Path(out)
    entries = []
    for i in tqdm(range(count), desc='toy scenes', disable=None):
        entry = {'image': f'images/{i:05d}.png', 'mask': f'masks/{i:05d}.png'}
        save_sample(generate_toy_scene(seed + i, height, width), out / entry['image'], out / entry['mask'])
        entries.append(entry)
    result = split_manifest(make_manifest(out, entries), fractions, seed)
    save_manifest(result, out / 'manifest.json')
    log.info(f'Wrote {count} toy scenes to {out}')
    return result

def background_paths(directory):
    found = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not found:
        raise FileNotFoundError(f'No background images in {directory}')
    return found

def replace_backgrounds(manifest_, backgrounds, out, seed=0):
    """Writes a copy of the dataset to ``out`` in which each image's background pixels have been replaced by a
    background image drawn from ``backgrounds``, a directory of images. The draw is seeded per sample."""
    out = Path(out)
    pool = background_paths(backgrounds)
    entries = []
    for i in range(len(manifest_.entries)):
        image_path, mask_path = paths(manifest_, i)
        sample = load_sample(image_path, mask_path)
        background = load_image(pool[np.random.default_rng([seed, i]).integers(len(pool))])
        entry = {'image': f'images/{i:05d}.png', 'mask': f'masks/{i:05d}.png'}
        save_sample(A.replace_background(sample, background), out / entry['image'], out / entry['mask'])
        entries.append(entry)
    result = make_manifest(out, entries, manifest_.splits, manifest_.split_seed)
    save_manifest(result, out / 'manifest.json')
    log.info(f'Replaced the backgrounds of {len(entries)} samples into {out}')
    return result

def iterate_batches(manifest, split, batch_size, epoch_seed, augment=None, size=None, backgrounds=None, cache=None, workers=1):
    """Yields ``(inputs, targets)`` batches over one epoch of ``split``.

    The order is shuffled with ``epoch_seed`` and the last batch may be short. Each sample is loaded, has its
    background replaced if a pool of ``backgrounds`` arrays is given, is augmented if an ``augment`` config is given,
    and is subsampled to ``size`` = (height, width). Samples are prepared on ``workers`` threads but batches always
    come out in the seeded order.

    Pass a dict as ``cache`` to keep decoded samples between epochs.
    """
    if split not in manifest.splits:
        raise PreconditionError(f'The manifest has no "{split}" split; it has {sorted(manifest.splits)}')
    indices = np.random.default_rng(epoch_seed).permutation(manifest.splits[split])
    n = len(manifest.entries)

    def prepare(i):
        if cache is not None and i in cache:
            sample = cache[i]
        else:
            image_path, mask_path = paths(manifest, i)
            try:
                sample = load_sample(image_path, mask_path)
            except OSError as e:
                raise OSError(f'Failed to load sample {i} ({image_path}, {mask_path}): {e}') from e
            if cache is not None:
                cache[i] = sample
        if backgrounds:
            choice = np.random.default_rng([epoch_seed, i]).integers(len(backgrounds))
            sample = A.replace_background(sample, backgrounds[choice])
        if augment is not None:
            sample = A.apply_pipeline(sample, augment, epoch_seed*n + i)
        image, mask = sample.image, sample.mask
        if size is not None:
            image, mask = subsample_image(image, *size), subsample_image(mask, *size)
        return image, mask_to_targets(mask)

    with ThreadPoolExecutor(workers) as pool:
        for start in range(0, len(indices), batch_size):
            prepared = list(pool.map(prepare, indices[start:start+batch_size]))
            yield np.stack([p[0] for p in prepared]), np.stack([p[1] for p in prepared])

def test_palette():
    assert len({tuple(c) for c in PALETTE}) == len(CLASSES)
    assert len({tuple(c) for c in COLORS}) == len(CLASSES)
    np.testing.assert_array_equal(decode_mask(np.zeros((3, 4, 3), np.uint8)), 0)
    mask = np.random.default_rng(0).integers(0, 6, (7, 9))
    np.testing.assert_array_equal(decode_mask(encode_mask(mask)), mask)

def test_unknown_color():
    import pytest
    rgb = encode_mask(np.ones((4, 4), int))
    rgb[2, 1] = (10, 10, 10)
    rgb[3, 0] = (10, 10, 10)
    with pytest.raises(DecodeError, match=r'\(10, 10, 10\) at pixel \(y=2, x=1\)'):
        decode_mask(rgb)

def test_sample_round_trip(tmp_path):
    sample = generate_toy_scene(0, 32, 48)
    sample['image'] = np.random.default_rng(1).random((32, 48, 3)).astype(DTYPE)
    save_sample(sample, tmp_path / 'i.png', tmp_path / 'm.png')
    loaded = load_sample(tmp_path / 'i.png', tmp_path / 'm.png')
    assert np.abs(loaded.image - sample.image).max() <= 1/255
    assert loaded.mask.tobytes() == sample.mask.astype(np.uint8).tobytes()

def test_sample_mismatch(tmp_path):
    import pytest
    save_image(np.zeros((32, 32, 3)), tmp_path / 'i.png')
    save_mask(np.zeros((32, 48), np.uint8), tmp_path / 'm.png')
    with pytest.raises(ShapeError):
        load_sample(tmp_path / 'i.png', tmp_path / 'm.png')

def test_subsample():
    import pytest
    image = np.random.default_rng(0).random((240, 320, 3))
    small = subsample_image(image, 88, 120)
    assert small.shape == (88, 120, 3)
    assert subsample_image(small, 88, 120).tobytes() == small.tobytes()
    assert subsample_image(image, 240, 320).tobytes() == image.tobytes()

    grid = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(subsample_image(grid, 2, 2), [[0, 2], [8, 10]])

    with pytest.raises(PreconditionError):
        subsample_image(grid, 8, 4)

def test_mask_to_targets():
    assert not mask_to_targets(np.zeros((5, 5), np.uint8)).any()

    mask = np.zeros((5, 5), np.uint8)
    mask[2, 3] = 4
    targets = mask_to_targets(mask)
    assert targets.sum() == 1 and targets[2, 3, 3] == 1

    mask = np.random.default_rng(0).integers(0, 6, (16, 16))
    np.testing.assert_array_equal(mask_to_targets(mask).sum((0, 1)), np.bincount(mask.ravel(), minlength=6)[1:])

def test_toy_scenes():
    import pytest
    a, b = generate_toy_scene(5, 48, 64), generate_toy_scene(5, 48, 64)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert ((0 <= a.image) & (a.image <= 1)).all()

    seen = set()
    for seed in range(100):
        sample = generate_toy_scene(seed, 32, 40)
        seen.update(np.unique(sample.mask).tolist())
        for cls in range(1, len(CLASSES)):
            assert (sample.image[sample.mask == cls] == COLORS[cls]).all()
    assert seen == set(range(len(CLASSES)))

    with pytest.raises(PreconditionError):
        generate_toy_scene(0, 16, 64)

def test_split_manifest():
    import pytest
    m = make_manifest('.', [{'image': f'{i}.png', 'mask': f'{i}m.png'} for i in range(10)])
    split = split_manifest(m, (.8, .2), seed=3)
    assert len(split.splits['train']) == 8 and len(split.splits['test']) == 2
    assert not set(split.splits['train']) & set(split.splits['test'])
    assert split_manifest(m, (.8, .2), seed=3).splits == split.splits

    three = split_manifest(m, (.7, .1, .2), seed=3)
    assert [len(three.splits[k]) for k in ('train', 'val', 'test')] == [7, 1, 2]

    with pytest.raises(PreconditionError):
        split_manifest(m, (.5, .6), seed=0)
    with pytest.raises(PreconditionError):
        split_manifest(make_manifest('.', []), (.8, .2), seed=0)

def test_manifest_round_trip(tmp_path):
    written = write_toy_dataset(tmp_path / 'toy', 5, seed=1, height=32, width=32)
    loaded = load_manifest(tmp_path / 'toy' / 'manifest.json')
    assert loaded.splits == written.splits
    assert [e.image for e in loaded.entries] == [f'images/{i:05d}.png' for i in range(5)]
    sample = load_sample(*paths(loaded, 2))
    assert sample.mask.tobytes() == generate_toy_scene(3, 32, 32).mask.tobytes()

def test_replace_backgrounds(tmp_path):
    written = write_toy_dataset(tmp_path / 'toy', 3, seed=0, height=32, width=32)
    save_image(np.ones((40, 40, 3)), tmp_path / 'bg' / 'white.png')
    replaced = replace_backgrounds(written, tmp_path / 'bg', tmp_path / 'out')
    for i in range(3):
        before, after = load_sample(*paths(written, i)), load_sample(*paths(replaced, i))
        assert after.mask.tobytes() == before.mask.tobytes()
        assert (after.image[after.mask == 0] == 1).all()
        np.testing.assert_array_equal(after.image[after.mask > 0], before.image[before.mask > 0])

def test_iterate_batches(tmp_path):
    written = write_toy_dataset(tmp_path / 'toy', 10, seed=0, height=32, width=32, fractions=(.5, .5))
    written['splits'] = {'train': list(range(10))}

    batches = list(iterate_batches(written, 'train', 4, epoch_seed=1))
    assert [len(x) for x, _ in batches] == [4, 4, 2]
    assert batches[0][0].shape == (4, 32, 32, 3) and batches[0][1].shape == (4, 32, 32, 5)

    expected = sorted(load_sample(*paths(written, i)).image.tobytes() for i in range(10))
    seen = sorted(image.tobytes() for x, _ in batches for image in x)
    assert seen == expected

    again = list(iterate_batches(written, 'train', 4, epoch_seed=1, workers=3))
    assert all(a[0].tobytes() == b[0].tobytes() for a, b in zip(batches, again))

    from . import config as C
    augment = C.resolve().augment
    a = list(iterate_batches(written, 'train', 4, epoch_seed=2, augment=augment, size=(16, 16)))
    b = list(iterate_batches(written, 'train', 4, epoch_seed=2, augment=augment, size=(16, 16), cache={}))
    assert a[0][0].shape == (4, 16, 16, 3)
    assert all(x.tobytes() == y.tobytes() for (x, _), (y, _) in zip(a, b))
