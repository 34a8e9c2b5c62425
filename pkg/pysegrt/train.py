"""Adam, the plateau schedule, and the training loop."""
import logging
import time
import numpy as np
import pandas as pd
import aljpy
from tqdm.auto import tqdm
from . import layers as L, model as M, dataset as D
from .tensor import ShapeError, PreconditionError

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = .9, .999, 1e-8

def adam_init(params, beta1=BETA1, beta2=BETA2, eps=EPS):
    return aljpy.dotdict(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        t=0, beta1=beta1, beta2=beta2, eps=eps)

def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update. Returns new parameter and state dicts; the arguments aren't modified."""
    if not lr > 0:
        raise PreconditionError(f'The learning rate must be positive, got {lr}')
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(g.shape, p.shape, f'gradient of {k}')
        m[k] = b1*state.m[k] + (1 - b1)*g
        v[k] = b2*state.v[k] + (1 - b2)*g*g
        m_hat, v_hat = m[k]/(1 - b1**t), v[k]/(1 - b2**t)
        new_params[k] = (p - lr*m_hat/(np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return new_params, aljpy.dotdict({**state, 'm': m, 'v': v, 't': t})

def schedule_update(history, config):
    """Replays the validation losses in ``history`` and returns the learning rate for the next epoch and whether to
    stop.

    An epoch improves if its validation loss beats the best so far by more than ``config.tolerance``. After
    ``config.plateau_patience`` epochs without improvement the rate is multiplied by ``config.lr_decay_factor`` and the
    plateau count starts over; after ``config.early_stop_patience`` epochs without improvement, training stops.
    """
    if not len(history):
        raise PreconditionError('The schedule needs at least one epoch of history')
    lr, best, wait, plateau = config.initial_lr, np.inf, 0, 0
    for record in history:
        if record['val_loss'] < best - config.tolerance:
            best, wait, plateau = record['val_loss'], 0, 0
        else:
            wait, plateau = wait + 1, plateau + 1
            if plateau >= config.plateau_patience:
                lr, plateau = lr*config.lr_decay_factor, 0
    return lr, wait >= config.early_stop_patience

def _epoch_seed(seed, epoch):
    return int(np.random.default_rng([seed, epoch]).integers(2**31))

def split_loss(model, manifest, split, batch_size, cache=None):
    """The mean per-sample BCE of the model's predictions over a split, with batch norm in inference mode."""
    mode = model.mode
    M.with_mode(model, 'infer')
    total, count = 0., 0
    for x, y in D.iterate_batches(manifest, split, batch_size, 0, size=(model.height, model.width), cache=cache):
        total += L.bce_loss(L.sigmoid(M.forward(model, x)), y)[0]*len(x)
        count += len(x)
    M.with_mode(model, mode)
    return total/count

def train_epoch(model, batches, state, lr):
    """Runs one pass of forward, backward and Adam over ``batches``, updating ``model`` in place."""
    total, count = 0., 0
    for b, (x, y) in enumerate(batches):
        try:
            loss, g_logits = L.bce_with_logits(M.forward(model, x), y)
            grads = M.backward(model, g_logits)
            params, state = adam_step(M.parameters(model), grads, state, lr)
            M.assign(model, params)
        except (OSError, ValueError) as e:
            raise RuntimeError(f'Training failed on batch {b}: {e}') from e
        log.debug(f'Batch {b}: loss {loss:.4f}')
        total += loss*len(x)
        count += len(x)
    return total/max(count, 1), state

def fit(model, manifest, train, augment=None, backgrounds=None, checkpoint=None):
    """Trains a copy of ``model`` on the manifest's training split.

    :param train: a training config, as in :data:`pysegrt.config.TRAIN`.
    :param augment: an augmentation config, or None to train on the samples as they are.
    :param backgrounds: an optional list of background images to paste behind the training samples.
    :param checkpoint: a path to save the best weights to whenever they improve.
    :return: the weights with the best validation loss, in inference mode, and the per-epoch history.
    """
    for split in (train.train_split, train.val_split):
        if split not in manifest.splits:
            raise PreconditionError(f'The manifest has no "{split}" split')

    model = M.with_mode(M.copy(model), 'train')
    best = M.with_mode(M.copy(model), 'infer')
    if train.max_epochs == 0:
        return best, []

    lr, state = train.initial_lr, adam_init(M.parameters(model))
    best_loss, history, cache = np.inf, [], {}
    size = (model.height, model.width)
    for epoch in tqdm(range(train.max_epochs), desc='epochs', disable=None):
        start = time.perf_counter()
        batches = D.iterate_batches(
            manifest, train.train_split, train.batch_size, _epoch_seed(train.seed, epoch),
            augment=augment, size=size, backgrounds=backgrounds, cache=cache, workers=train.workers)
        try:
            train_loss, state = train_epoch(model, batches, state, lr)
        except RuntimeError as e:
            raise RuntimeError(f'Epoch {epoch}: {e}') from e
        val_loss = split_loss(model, manifest, train.val_split, train.batch_size, cache)

        history.append(aljpy.dotdict(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=lr, seconds=time.perf_counter() - start))
        log.info(f'Epoch {epoch}: train {train_loss:.4f}, val {val_loss:.4f}, lr {lr:.2g}')

        if val_loss < best_loss:
            best_loss, best = val_loss, M.with_mode(M.copy(model), 'infer')
            if checkpoint is not None:
                M.save_weights(best, checkpoint)
                log.info(f'Saved a checkpoint with val loss {val_loss:.4f} to {checkpoint}')

        lr, stop = schedule_update(history, train)
        if stop:
            log.info(f'Stopping after epoch {epoch}; no improvement in {train.early_stop_patience} epochs')
            break

    return best, history

def save_history(history, path):
    columns = ['epoch', 'train_loss', 'val_loss', 'lr', 'seconds']
    pd.DataFrame(history, columns=columns).to_csv(path, index=False)

def test_adam_first_step():
    params, grads = {'w': np.array([1.])}, {'w': np.array([.5])}
    state = adam_init(params)
    new, state = adam_step(params, grads, state, .1)
    assert np.isclose(new['w'][0], .9, atol=1e-6)
    assert state.t == 1
    assert params['w'][0] == 1.

def test_adam_zero_gradient():
    params = {'w': np.array([1., -2.])}
    new, state = adam_step(params, {'w': np.zeros(2)}, adam_init(params), .1)
    np.testing.assert_array_equal(new['w'], params['w'])
    assert state.t == 1

def test_adam_matches_scalar():
    from . import test
    params, state = {'w': np.array([1.])}, adam_init({'w': np.array([1.])})
    for _ in range(2):
        params, state = adam_step(params, {'w': np.array([.3])}, state, .1)
    assert abs(params['w'][0] - test.scalar_adam(1., [.3, .3], .1)) < 1e-7

def test_adam_shape_mismatch():
    import pytest
    params = {'w': np.zeros(3)}
    with pytest.raises(ShapeError):
        adam_step(params, {'w': np.zeros(4)}, adam_init(params), .1)

def test_schedule():
    from . import config as C
    train = C.TRAIN

    def history(losses):
        return [{'val_loss': l} for l in losses]

    assert schedule_update(history(np.linspace(1, .5, 30)), train) == (.1, False)
    assert schedule_update(history([1.] + [1.]*9), train) == (.1, False)
    assert schedule_update(history([1.] + [1.]*10), train) == (.05, False)
    assert schedule_update(history([1.] + [1.]*19), train) == (.05, False)
    assert schedule_update(history([1.] + [1.]*20), train) == (.025, True)
    # Improvements smaller than the tolerance don't count
    assert schedule_update(history([1.] + [1. - 1e-7]*10), train)[0] == .05

def test_schedule_lr_is_a_power_of_the_decay():
    from . import config as C
    rng = np.random.default_rng(0)
    losses = np.cumsum(rng.normal(0, 1, 100))
    lrs = [schedule_update([{'val_loss': l} for l in losses[:i]], C.TRAIN)[0] for i in range(1, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    ks = np.log(np.array(lrs)/.1)/np.log(.5)
    np.testing.assert_allclose(ks, np.round(ks), atol=1e-9)

def _toy(tmp_path, count):
    manifest = D.write_toy_dataset(tmp_path, count, seed=0, height=32, width=32, fractions=(.5, .5))
    manifest['splits'] = {'train': list(range(count)), 'val': list(range(count))}
    return manifest

def test_fit_no_epochs(tmp_path):
    from . import config as C
    model = M.build_model(32, 32)
    train = C.resolve({'train': {'max_epochs': 0, 'input_height': 32, 'input_width': 32}}).train
    best, history = fit(model, _toy(tmp_path, 2), train)
    assert history == []
    for a, b in zip(M.tensors(model), M.tensors(best)):
        assert a.tobytes() == b.tobytes()

def test_fit_is_deterministic(tmp_path):
    from . import config as C
    manifest = _toy(tmp_path, 4)
    train = C.resolve({'train': {'max_epochs': 3, 'batch_size': 2, 'initial_lr': .01}}).train

    runs = [fit(M.build_model(32, 32), manifest, train) for _ in range(2)]
    strip = lambda h: [(r.train_loss, r.val_loss, r.lr) for r in h]
    assert strip(runs[0][1]) == strip(runs[1][1])
    assert [r.epoch for r in runs[0][1]] == [0, 1, 2]

    best, history = runs[0]
    assert split_loss(best, manifest, 'val', 2) <= history[-1].val_loss + 1e-6

def test_save_history(tmp_path):
    history = [aljpy.dotdict(epoch=0, train_loss=.5, val_loss=.6, lr=.1, seconds=1.)]
    save_history(history, tmp_path / 'h.csv')
    assert (tmp_path / 'h.csv').read_text().splitlines()[0] == 'epoch,train_loss,val_loss,lr,seconds'

