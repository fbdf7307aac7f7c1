"""Noise schedule, weighted denoising score matching, and training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericalError, ValidationError
from .score_net import ScoreNetConfig, init_params, score_forward
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing geometric noise levels sigma_1 > ... > sigma_L > 0.

    Level indices are 1-based everywhere in the public API.
    """

    sigmas: tuple

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ValidationError("a noise schedule needs at least one level")
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValidationError("noise levels must be positive and finite")
        if np.any(np.diff(s) > 0):
            raise ValidationError("noise levels must be non-increasing")
        object.__setattr__(self, "sigmas", tuple(float(v) for v in s))

    @property
    def L(self):
        return len(self.sigmas)

    def sigma(self, level):
        if not 1 <= level <= self.L:
            raise ValidationError(f"noise level {level} out of range 1..{self.L}")
        return self.sigmas[level - 1]

    def as_array(self):
        return np.asarray(self.sigmas)

    def ratio(self):
        return self.sigmas[1] / self.sigmas[0] if self.L > 1 else 1.0


def geometric_schedule(sigma_first, sigma_last, levels):
    """sigma_l = sigma_first * r**(l-1) with r = (sigma_last/sigma_first)**(1/(L-1))."""
    if not (sigma_first > 0 and sigma_last > 0):
        raise ValidationError("noise levels must be positive")
    if sigma_first < sigma_last:
        raise ValidationError(f"sigma_first ({sigma_first}) must be >= sigma_last ({sigma_last})")
    if levels < 1:
        raise ValidationError("need at least one noise level")
    if levels == 1:
        if sigma_first != sigma_last:
            raise ValidationError("a single noise level requires sigma_first == sigma_last")
        return NoiseSchedule((float(sigma_first),))
    ratio = (sigma_last / sigma_first) ** (1.0 / (levels - 1))
    sigmas = [sigma_first * ratio**i for i in range(levels)]
    # pin the far end exactly
    sigmas[-1] = float(sigma_last)
    return NoiseSchedule(tuple(sigmas))


def perturb(x, sigma, rng):
    """x + sigma * z with z standard normal, drawn from ``rng``."""
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape).astype(x.dtype, copy=False)


def _per_item(values, shape, dtype):
    return np.broadcast_to(np.asarray(values, dtype=dtype).reshape((-1,) + (1,) * (len(shape) - 1)), shape)


def dsm_loss(params, x, speakers, schedule, rng, levels=None, score_fn=None):
    """Monte Carlo weighted DSM loss for a minibatch ``x`` of shape [b, 1, D, M].

    Per item: draw a level uniformly (unless ``levels`` is given), perturb with
    that level's sigma, and regress sigma * s(x~) onto (x - x~) / sigma.
    Squared errors are averaged over elements and batch.

    ``score_fn(x_tilde, levels, speakers) -> Tensor`` replaces the network
    (test hook). Returns (loss, levels) with 1-based levels.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValidationError("minibatch must be a non-empty [b, 1, D, M] array")
    b = x.shape[0]
    if levels is None:
        levels = rng.integers(1, schedule.L + 1, size=b)
    levels = np.asarray(levels)
    sig = _per_item(schedule.as_array()[levels - 1], x.shape, x.dtype)
    noise = rng.standard_normal(x.shape).astype(x.dtype, copy=False)
    x_tilde = x + sig * noise
    if score_fn is None:
        s = score_forward(params, x_tilde, levels, speakers)
    else:
        s = T.as_tensor(score_fn(x_tilde, levels, speakers))
    target = (x - x_tilde) / sig
    resid = T.sub(T.mul(s, np.ascontiguousarray(sig)), target)
    return T.square(resid).mean(), levels


class Adam:
    """Bias-corrected Adam over a list of tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = 0.0
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)


def adam_step(params, grads, state, lr):
    """Functional form: returns (new_params, new_state) for numpy arrays.

    ``state`` is ``None`` on the first call, afterwards the returned dict.
    """
    b1, b2, eps = 0.9, 0.999, 1e-8
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    t = state["t"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainingCorpus:
    """Normalized MCC matrices (D x M) grouped by speaker, in speaker order."""

    speakers: list
    utterances: list

    def __post_init__(self):
        if not self.speakers or len(self.speakers) != len(self.utterances):
            raise ValidationError("corpus needs one utterance list per speaker")
        dims = set()
        for name, utts in zip(self.speakers, self.utterances):
            if not utts:
                raise ValidationError(f"speaker {name!r} has no utterances")
            for u in utts:
                u = np.asarray(u)
                if u.ndim != 2 or u.shape[1] < 1:
                    raise ValidationError(f"utterance of speaker {name!r} is not a D x M matrix")
                dims.add(u.shape[0])
        if len(dims) != 1:
            raise ValidationError(f"utterances disagree on feature dimension: {sorted(dims)}")

    @property
    def K(self):
        return len(self.speakers)

    @property
    def feature_dim(self):
        return np.asarray(self.utterances[0][0]).shape[0]

    def total_utterances(self):
        return sum(len(u) for u in self.utterances)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 1
    steps: int | None = None
    crop_frames: int = 128
    level_sampling: str = "per_batch"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 1 and self.steps is None:
            raise ValidationError("epochs must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.crop_frames < 1:
            raise ValidationError("crop_frames must be >= 1")
        if self.level_sampling not in ("per_batch", "per_item"):
            raise ValidationError(f"level_sampling must be 'per_batch' or 'per_item', got {self.level_sampling!r}")

    def total_steps(self, corpus):
        if self.steps is not None:
            return self.steps
        per_epoch = max(1, math.ceil(corpus.total_utterances() / self.batch_size))
        return self.epochs * per_epoch


@dataclass
class StepRecord:
    step: int
    level_histogram: list
    loss: float


@dataclass
class TrainResult:
    params: object
    history: list = field(default_factory=list)

    def losses(self):
        return np.array([h.loss for h in self.history])


def draw_crops(corpus, batch_size, crop, rng, dtype=np.float64):
    """Draw a [b, 1, D, crop] minibatch and its 1-based speaker indices.

    Draw order per item: speaker, utterance, crop start. Utterances shorter
    than ``crop`` are right-padded by edge replication.
    """
    D = corpus.feature_dim
    out = np.empty((batch_size, 1, D, crop), dtype=dtype)
    spk = np.empty(batch_size, dtype=np.intp)
    for i in range(batch_size):
        k = int(rng.integers(corpus.K))
        utts = corpus.utterances[k]
        u = np.asarray(utts[int(rng.integers(len(utts)))])
        m = u.shape[1]
        start = int(rng.integers(max(m - crop, 0) + 1))
        seg = u[:, start : start + crop]
        if seg.shape[1] < crop:
            seg = np.pad(seg, ((0, 0), (0, crop - seg.shape[1])), mode="edge")
        out[i, 0] = seg
        spk[i] = k + 1
    return out, spk


def train(corpus, config, schedule, net_config=None, params=None, callback=None):
    """Fit the score network with Adam on the weighted DSM objective.

    All randomness comes from one generator seeded with ``config.seed``:
    parameter init first (when ``params`` is None), then per step the crop
    draws followed by level and noise draws.
    """
    rng = np.random.default_rng(config.seed)
    if params is None:
        if net_config is None:
            net_config = ScoreNetConfig(feature_dim=corpus.feature_dim, noise_levels=schedule.L, speakers=corpus.K)
        params = init_params(net_config, rng)
    cfg = params.config
    if cfg.noise_levels != schedule.L:
        raise ValidationError(f"network has {cfg.noise_levels} noise levels, schedule has {schedule.L}")
    if cfg.speakers != corpus.K:
        raise ValidationError(f"network has {cfg.speakers} speakers, corpus has {corpus.K}")
    if cfg.feature_dim != corpus.feature_dim:
        raise ValidationError(f"network feature_dim {cfg.feature_dim} != corpus {corpus.feature_dim}")
    crop = config.crop_frames
    if crop % cfg.time_multiple:
        raise ValidationError(f"crop_frames {crop} must be a multiple of {cfg.time_multiple}")

    dtype = np.dtype(cfg.dtype)
    opt = Adam(params.values(), lr=config.learning_rate, betas=config.betas, eps=config.adam_eps)
    history = []
    for step in range(1, config.total_steps(corpus) + 1):
        batch, spk = draw_crops(corpus, config.batch_size, crop, rng, dtype)
        levels = None
        if config.level_sampling == "per_batch":
            levels = np.full(config.batch_size, rng.integers(1, schedule.L + 1))
        loss, levels = dsm_loss(params, batch, spk, schedule, rng, levels=levels)
        value = float(loss.item())
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at training step {step}")
        T.backward(loss)
        opt.step()
        hist = np.bincount(levels - 1, minlength=schedule.L).tolist()
        history.append(StepRecord(step, hist, value))
        if callback is not None:
            callback(step, value)
        if step % 100 == 0:
            log.debug("step %d loss %.5f", step, value)
    return TrainResult(params, history)
