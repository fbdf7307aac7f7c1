"""Annealed Langevin dynamics for sampling and conversion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericalError, ValidationError
from .score_net import crop_time, pad_time, score_array


@dataclass(frozen=True)
class LangevinConfig:
    epsilon: float = 1e-5
    steps_per_level: int = 120
    start_level: int = 4
    noisy: bool = False
    seed: int = 0
    record_trajectory: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if self.steps_per_level < 1:
            raise ValidationError(f"steps_per_level must be >= 1, got {self.steps_per_level}")
        if self.start_level < 1:
            raise ValidationError("start_level must be >= 1")

    @classmethod
    def for_sampling(cls, **overrides):
        """Full schedule from level 1 with the noise term on."""
        return replace(cls(start_level=1, noisy=True), **overrides)


def step_size(epsilon, sigma_l, sigma_last):
    """alpha_l = epsilon * sigma_l**2 / sigma_L**2."""
    return epsilon * sigma_l**2 / sigma_last**2


@dataclass
class TrajectoryPoint:
    level: int
    step: int
    score_log_norm: np.ndarray  # per frame


@dataclass
class LangevinResult:
    x: np.ndarray
    evaluations: int
    trajectory: list = field(default_factory=list)


def _frame_log_norm(s):
    # norm over the feature axis (second to last), one value per frame
    norms = np.sqrt(np.sum(np.square(s), axis=-2)).reshape(-1)
    return np.log(np.maximum(norms, np.finfo(np.float64).tiny))


def annealed_langevin(score_fn, x0, schedule, config, k, rng=None):
    """Run levels ``start_level..L`` with ``steps_per_level`` updates each.

    ``score_fn(x, level, k)`` returns an array shaped like ``x``; levels are
    1-based. With ``config.noisy`` false the sqrt(2 alpha) z term is dropped.
    """
    if config.start_level > schedule.L:
        raise ValidationError(f"start_level {config.start_level} exceeds the {schedule.L} available levels")
    x = np.array(x0, copy=True)
    if not np.all(np.isfinite(x)):
        raise ValidationError("initial iterate contains non-finite values")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    T_ = config.steps_per_level
    decimate = max(1, T_ // 10)
    sigma_last = schedule.sigmas[-1]
    evals = 0
    trajectory = []
    for level in range(config.start_level, schedule.L + 1):
        alpha = step_size(config.epsilon, schedule.sigma(level), sigma_last)
        noise_scale = np.sqrt(2.0 * alpha)
        for t in range(1, T_ + 1):
            s = score_fn(x, level, k)
            evals += 1
            if config.record_trajectory and (t % decimate == 0 or t == 1):
                trajectory.append(TrajectoryPoint(level, t, _frame_log_norm(s)))
            x = x + alpha * s
            if config.noisy:
                x = x + noise_scale * rng.standard_normal(x.shape)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite iterate at level {level}, step {t}")
    return LangevinResult(x, evals, trajectory)


def network_score_fn(params):
    """Wrap trained parameters as ``score_fn(x, level, k)`` for [b, 1, D, M] arrays."""

    def fn(x, level, k):
        return score_array(params, x, level, k)

    return fn


def _check_speaker(params, k):
    K = params.config.speakers
    if not 1 <= int(k) <= K:
        raise ValidationError(f"target speaker {k} out of range 1..{K}")


def convert(params, features, k_target, schedule, config, score_fn=None):
    """Move a normalized D x M MCC matrix toward speaker ``k_target``.

    The whole utterance is processed at once: the time axis is padded to the
    network's multiple, Langevin dynamics starts from the input, and the result
    is cropped back to the input length.
    """
    _check_speaker(params, k_target)
    features = np.asarray(features, dtype=params.config.dtype)
    if features.ndim != 2 or features.shape[0] != params.config.feature_dim:
        raise ValidationError(
            f"expected a {params.config.feature_dim} x M matrix, got shape {features.shape}"
        )
    x0, m = pad_time(features[None, None], params.config.depth, params.config.time_stride)
    fn = score_fn if score_fn is not None else network_score_fn(params)
    result = annealed_langevin(fn, x0, schedule, config, k_target)
    out = crop_time(result.x, m)[0, 0]
    return out, result


def sample(params, shape, k, schedule, config=None, score_fn=None):
    """Draw from speaker ``k`` starting at standard normal noise.

    ``shape`` is (D, M) or (b, D, M); the result has the same shape.
    """
    _check_speaker(params, k)
    if config is None:
        config = LangevinConfig.for_sampling()
    shape = tuple(shape)
    if len(shape) == 2:
        full = (1, 1) + shape
    elif len(shape) == 3:
        full = (shape[0], 1) + shape[1:]
    else:
        raise ValidationError(f"sample shape must be (D, M) or (b, D, M), got {shape}")
    rng = np.random.default_rng(config.seed)
    x0 = rng.standard_normal(full).astype(params.config.dtype)
    x0, m = pad_time(x0, params.config.depth, params.config.time_stride)
    fn = score_fn if score_fn is not None else network_score_fn(params)
    result = annealed_langevin(fn, x0, schedule, config, k, rng=rng)
    return crop_time(result.x, m).reshape(shape)


def write_trajectory_csv(path, trajectory):
    """Rows of (level, step, frame, score_log_norm)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "step", "frame", "score_log_norm"])
        for p in trajectory:
            for j, v in enumerate(p.score_log_norm):
                w.writerow([p.level, p.step, j, repr(float(v))])
