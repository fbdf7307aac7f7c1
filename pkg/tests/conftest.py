import time

import numpy as np
import pytest

from scorevc import tensor as T
from scorevc.evaluation import SyntheticSpec, synthetic_validation
from scorevc.langevin import LangevinConfig
from scorevc.noise import TrainConfig, geometric_schedule
from scorevc.score_net import ScoreNetConfig
from scorevc.tensor import Tensor


def numeric_grad(fn, arrays, index, h=1e-5):
    """Central finite differences of scalar ``fn(arrays)`` w.r.t. ``arrays[index]``."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = base[idx]
        base[idx] = old + h
        fp = fn(arrays)
        base[idx] = old - h
        fm = fn(arrays)
        base[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradcheck(op, arrays, rng, h=1e-5):
    """Compare autodiff against finite differences for every input of ``op``.

    The scalar objective is <op(inputs), W> for a fixed random W, so every
    output element contributes. Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    outs = probe if isinstance(probe, tuple) else (probe,)
    weights = [rng.standard_normal(o.shape) for o in outs]

    def objective(arrs):
        with T.no_grad():
            res = op(*[Tensor(a) for a in arrs])
        res = res if isinstance(res, tuple) else (res,)
        return sum(float((r.data * w).sum()) for r, w in zip(res, weights))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    res = op(*leaves)
    res = res if isinstance(res, tuple) else (res,)
    total = None
    for r, w in zip(res, weights):
        term = T.tsum(T.mul(r, w))
        total = term if total is None else T.add(total, term)
    T.backward(total)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(objective, arrays, i, h)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(ana, num))
    return worst


MIXTURE_STEPS = 20000


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_schedule():
    return geometric_schedule(1.0, 0.01, 11)


@pytest.fixture(scope="session")
def mixture_report(default_schedule):
    """Two Gaussian pseudo-speakers at (+-2, 0); trained once per session.

    The budget is set by the score-field check at the smallest sigma, where
    only about 1e-4 of the per-element loss carries signal.
    """
    spec = SyntheticSpec.two_mode_default(seed=0)
    net = ScoreNetConfig(feature_dim=2, noise_levels=11, speakers=2, base_channels=16, depth=2, max_channels=64)
    start = time.perf_counter()
    report = synthetic_validation(
        spec,
        default_schedule,
        TrainConfig(steps=MIXTURE_STEPS, crop_frames=16, seed=0),
        LangevinConfig(),
        net,
    )
    report.seconds = time.perf_counter() - start
    return report


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
