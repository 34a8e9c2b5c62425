"""Inference latency across input resolutions."""
import logging
import platform
import time
from pathlib import Path
import numpy as np
import pandas as pd
import aljpy
from tqdm.auto import tqdm
from threadpoolctl import threadpool_limits
from . import model as M
from .tensor import DTYPE, PreconditionError

log = logging.getLogger(__name__)

# (width, height) of each rung, and what the reference robot's CPU takes on each
LADDER = ((40, 32), (80, 64), (108, 80), (120, 88), (160, 120), (320, 240))
REFERENCE_MS = {
    (40, 32): 1.6,
    (80, 64): 6.7,
    (108, 80): 11.2,
    (120, 88): 14.0,
    (160, 120): 27.3,
    (320, 240): 116.0}

COLUMNS = ['resolution', 'pixels', 'median_ms', 'mean_ms', 'p95_ms', 'reference_ms']

def host():
    return f'{platform.node()} {platform.platform()} {platform.processor() or platform.machine()} python {platform.python_version()} numpy {np.__version__}'

def time_inference(width, height, iterations=200, warmup=20, model=None, seed=0, timer=time.perf_counter):
    """Times single-image forward passes of a folded model on one thread.

    :param model: the model to time. If None, a freshly-built one for ``height`` x ``width`` inputs is used.
    :return: a dotdict with the per-iteration ``times`` in milliseconds and their median, mean and 95th percentile.
    """
    if iterations < 1:
        raise PreconditionError(f'Need at least one timed iteration, got {iterations}')
    model = M.prepare_inference(M.build_model(height, width) if model is None else model)
    x = np.random.default_rng(seed).random((1, height, width, 3)).astype(DTYPE)

    times = np.empty(iterations)
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            M.forward(model, x)

        for i in range(iterations):
            start = timer()
            M.forward(model, x)
            times[i] = 1000*(timer() - start)

    return aljpy.dotdict(
        width=width, height=height, pixels=width*height,
        iterations=iterations, times=times,
        median_ms=float(np.median(times)),
        mean_ms=float(np.mean(times)),
        p95_ms=float(np.percentile(times, 95)),
        host=host())

def scaling_report(resolutions=LADDER, iterations=200, warmup=20, measure=time_inference):
    """Times each (width, height) resolution and fits median milliseconds against pixel count by least squares.

    :param measure: the function that produces each resolution's result; swap it out to inject timings.
    :return: a dotdict with the fitted ``ms_per_kilopixel`` and ``intercept_ms``, the fit's ``r2``, and the ``table``
        of results.
    """
    if len(resolutions) < 3:
        raise PreconditionError(f'Need at least three resolutions to fit a line, got {len(resolutions)}')

    results = []
    for w, h in tqdm(resolutions, desc='resolutions', disable=None):
        result = measure(w, h, iterations=iterations, warmup=warmup)
        log.info(f'{w}x{h}: median {result.median_ms:.2f}ms over {result.iterations} iterations')
        results.append(result)

    table = pd.DataFrame({
        'resolution': [f'{r.width}x{r.height}' for r in results],
        'pixels': [r.pixels for r in results],
        'median_ms': [r.median_ms for r in results],
        'mean_ms': [r.mean_ms for r in results],
        'p95_ms': [r.p95_ms for r in results],
        'reference_ms': [REFERENCE_MS.get((r.width, r.height), np.nan) for r in results]}, columns=COLUMNS)

    kilopixels, ms = table.pixels.values/1000, table.median_ms.values
    slope, intercept = np.polyfit(kilopixels, ms, 1)
    residual = ms - (slope*kilopixels + intercept)
    total = ((ms - ms.mean())**2).sum()
    r2 = 1 - (residual**2).sum()/total if total > 0 else 1.

    return aljpy.dotdict(
        ms_per_kilopixel=float(slope), intercept_ms=float(intercept), r2=float(r2),
        table=table, host=results[0].host)

def save_results(report, path):
    """Writes the report's table as CSV, after a ``# host:`` comment line."""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with open(path, 'w', newline='') as f:
        f.write(f'# host: {report.host}\n')
        f.write(f'# fit: {report.ms_per_kilopixel:.6f} ms/kilopixel, intercept {report.intercept_ms:.6f} ms, r2 {report.r2:.6f}\n')
        report.table.to_csv(f, index=False, float_format='%.6f')

def _linear(width, height, iterations, warmup):
    ms = .5 + 1.3*width*height/1000
    return aljpy.dotdict(
        width=width, height=height, pixels=width*height, iterations=iterations,
        times=np.full(iterations, ms), median_ms=ms, mean_ms=ms, p95_ms=ms, host='test')

def test_time_inference():
    result = time_inference(16, 8, iterations=10, warmup=1)
    assert len(result.times) == 10
    assert result.median_ms <= result.p95_ms
    assert result.pixels == 128

def test_time_inference_preconditions():
    import pytest
    with pytest.raises(PreconditionError):
        time_inference(18, 8, iterations=1)
    with pytest.raises(PreconditionError):
        time_inference(16, 8, iterations=0)

def test_injected_timer():
    ticks = iter(np.arange(100)*.002)
    result = time_inference(8, 8, iterations=5, warmup=0, timer=lambda: next(ticks))
    np.testing.assert_allclose(result.times, 2.)

def test_timing_runs_on_one_thread():
    from threadpoolctl import threadpool_info
    before = [p['num_threads'] for p in threadpool_info()]
    seen = []

    def timer():
        seen.extend(p['num_threads'] for p in threadpool_info())
        return time.perf_counter()

    time_inference(8, 8, iterations=3, warmup=1, timer=timer)
    assert all(n == 1 for n in seen)
    assert [p['num_threads'] for p in threadpool_info()] == before

def test_scaling_report(tmp_path):
    import pytest
    report = scaling_report(measure=_linear, iterations=3)
    assert np.isclose(report.r2, 1.)
    assert np.isclose(report.ms_per_kilopixel, 1.3)
    assert np.isclose(report.intercept_ms, .5)
    assert list(report.table.reference_ms) == [REFERENCE_MS[r] for r in LADDER]

    save_results(report, tmp_path / 'bench.csv')
    lines = (tmp_path / 'bench.csv').read_text().splitlines()
    assert lines[0] == '# host: test'
    assert lines[2] == ','.join(COLUMNS)

    with pytest.raises(PreconditionError):
        scaling_report([(40, 32)], measure=_linear)

def test_reference_scaling():
    # The reference timings are close to linear in pixel count
    ratios = [REFERENCE_MS[(w, h)]/(w*h/1000) for w, h in LADDER]
    assert np.isclose(ratios[0], 1.25, atol=.01)
    assert np.isclose(ratios[-1], 1.51, atol=.01)
    assert all(1.2 < r < 1.6 for r in ratios)
