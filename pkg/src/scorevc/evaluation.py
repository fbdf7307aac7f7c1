"""DTW-aligned mel-cepstral distortion and the synthetic validation suite."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError
from .features import read_feature_file
from .langevin import LangevinConfig, convert, sample
from .noise import NoiseSchedule, TrainConfig, TrainingCorpus, train
from .score_net import ScoreNetConfig, score_array

log = logging.getLogger(__name__)

MCD_CONST = 10.0 / math.log(10.0)


# ---------------------------------------------------------------------------
# DTW


def euclidean_cost(a, b, first=0):
    """Pairwise Euclidean distance between columns of ``a`` and ``b`` using rows ``first:``."""
    a = np.asarray(a, dtype=np.float64)[first:]
    b = np.asarray(b, dtype=np.float64)[first:]
    return cdist(a.T, b.T)


@dataclass
class DtwPath:
    """Zero-based index pairs; the public convention in docs is 1-based."""

    pairs: list

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def one_based(self):
        return [(i + 1, j + 1) for i, j in self.pairs]

    def is_valid(self, ma, mb):
        if not self.pairs or self.pairs[0] != (0, 0) or self.pairs[-1] != (ma - 1, mb - 1):
            return False
        steps = {(1, 0), (0, 1), (1, 1)}
        return all((i2 - i1, j2 - j1) in steps for (i1, j1), (i2, j2) in zip(self.pairs, self.pairs[1:]))


def dtw_align(a, b, frame_cost=None):
    """Minimal cumulative-cost monotone alignment of columns of ``a`` and ``b``.

    Steps are (1,0), (0,1), (1,1) without slope weights. On ties the diagonal
    predecessor wins, then (1,0), then (0,1). ``frame_cost(a, b)`` returns the
    Ma x Mb cost matrix (Euclidean over all rows by default).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] < 1 or b.shape[1] < 1:
        raise ValidationError("both sequences need at least one frame")
    cost = euclidean_cost(a, b) if frame_cost is None else np.asarray(frame_cost(a, b), dtype=np.float64)
    ma, mb = cost.shape
    acc = np.full((ma + 1, mb + 1), np.inf)
    acc[0, 0] = 0.0
    c = cost.tolist()
    rows = acc.tolist()
    for i in range(1, ma + 1):
        prev, cur, ci = rows[i - 1], rows[i], c[i - 1]
        for j in range(1, mb + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = ci[j - 1] + best
    i, j = ma, mb
    pairs = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        cands = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
        i, j = min(cands, key=lambda ij: rows[ij[0]][ij[1]])  # min keeps the first on ties
        pairs.append((i - 1, j - 1))
    pairs.reverse()
    return DtwPath(pairs), rows[ma][mb]


# ---------------------------------------------------------------------------
# MCD


def mcd(a_frame, b_frame, first=1):
    """(10 / ln 10) * sqrt(2 * sum_{d >= first} (a_d - b_d)^2), in dB.

    ``first=1`` drops the 0th (energy) coefficient.
    """
    a = np.asarray(a_frame, dtype=np.float64)
    b = np.asarray(b_frame, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    d = a[first:] - b[first:]
    return MCD_CONST * math.sqrt(2.0 * float(np.dot(d, d)))


def utterance_mcd(converted, reference, first=1):
    """Mean frame MCD along the DTW path (frame cost uses the same coefficients)."""
    converted = np.asarray(converted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if converted.shape[0] != reference.shape[0]:
        raise ValidationError(f"feature dimensions differ: {converted.shape[0]} vs {reference.shape[0]}")
    path, _ = dtw_align(converted, reference, frame_cost=lambda x, y: euclidean_cost(x, y, first))
    idx_a = np.array([p[0] for p in path])
    idx_b = np.array([p[1] for p in path])
    diff = converted[first:, idx_a] - reference[first:, idx_b]
    per_frame = MCD_CONST * np.sqrt(2.0 * (diff * diff).sum(0))
    return float(per_frame.mean())


class UnmatchedFilesError(ValidationError):
    def __init__(self, only_converted, only_reference):
        self.only_converted = sorted(only_converted)
        self.only_reference = sorted(only_reference)
        lines = ["converted and reference file sets differ"]
        lines += [f"  only in converted: {n}" for n in self.only_converted]
        lines += [f"  only in reference: {n}" for n in self.only_reference]
        super().__init__("\n".join(lines))


@dataclass
class EvaluationReport:
    rows: list  # (utterance, mcd_db), sorted by utterance
    mean: float
    ci95: float

    def summary(self):
        return f"utterances {len(self.rows)}  mean {self.mean:.3f} dB  95% CI +/- {self.ci95:.3f} dB"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["utterance", "mcd_db"])
            for name, v in self.rows:
                w.writerow([name, repr(float(v))])


def summarize(values):
    """Mean and normal-approximation 95% half-width 1.96 * sd / sqrt(n)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    if n == 0:
        raise ValidationError("no values to summarize")
    mean = float(v.mean())
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return mean, half


def evaluate_mcd(pairs):
    """``pairs`` maps utterance name -> (converted D x M, reference D x M)."""
    rows = sorted((name, utterance_mcd(c, r)) for name, (c, r) in pairs.items())
    mean, half = summarize([v for _, v in rows])
    return EvaluationReport(rows, mean, half)


def evaluate_pairs(converted_dir, reference_dir, suffix=".vgf"):
    conv = {p.name: p for p in Path(converted_dir).iterdir() if p.name.endswith(suffix)}
    ref = {p.name: p for p in Path(reference_dir).iterdir() if p.name.endswith(suffix)}
    if set(conv) != set(ref):
        raise UnmatchedFilesError(set(conv) - set(ref), set(ref) - set(conv))
    if not conv:
        raise ValidationError(f"no *{suffix} files in {os.fspath(converted_dir)}")
    pairs = {name: (read_feature_file(conv[name]).mcc, read_feature_file(ref[name]).mcc) for name in conv}
    return evaluate_mcd(pairs)


# ---------------------------------------------------------------------------
# Synthetic Gaussian validation


@dataclass
class SyntheticSpec:
    """Gaussian components, one per pseudo-speaker."""

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray
    utterances_per_speaker: int = 64
    frames_per_utterance: int = 64
    eval_samples: int = 1000
    convert_points: int = 200
    grid_points: int = 21
    seed: int = 0

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        K, dim = self.means.shape
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if self.covs.shape != (K, dim, dim):
            raise ValidationError(f"covs must have shape {(K, dim, dim)}, got {self.covs.shape}")
        for k, c in enumerate(self.covs):
            if not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValidationError(f"covariance {k} is not symmetric positive-definite")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (K,) or np.any(self.weights <= 0) or not math.isclose(self.weights.sum(), 1.0):
            raise ValidationError("weights must be positive and sum to 1")

    @property
    def K(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def two_mode_default(cls, **kw):
        return cls(means=[[-2.0, 0.0], [2.0, 0.0]], covs=[np.eye(2), np.eye(2)], weights=[0.5, 0.5], **kw)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {
            "means": self.means.tolist(), "covs": self.covs.tolist(), "weights": self.weights.tolist(),
            "utterances_per_speaker": self.utterances_per_speaker,
            "frames_per_utterance": self.frames_per_utterance, "eval_samples": self.eval_samples,
            "convert_points": self.convert_points, "grid_points": self.grid_points, "seed": self.seed,
        }

    def draw(self, k, n, rng):
        """n frames from component k (1-based) as a dim x n matrix."""
        chol = np.linalg.cholesky(self.covs[k - 1])
        return self.means[k - 1][:, None] + chol @ rng.standard_normal((self.dim, n))


def gaussian_log_density(x, mean, cov):
    """Log N(x | mean, cov) for columns of x."""
    x = np.asarray(x, dtype=np.float64)
    d = x - np.asarray(mean)[:, None]
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    quad = np.einsum("im,ij,jm->m", d, prec, d)
    return -0.5 * (quad + logdet + x.shape[0] * math.log(2 * math.pi))


def gaussian_score(x, mean, cov, sigma=0.0):
    """Score of N(mean, cov + sigma^2 I) at the columns of x."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(cov) + sigma**2 * np.eye(len(mean))
    return -np.linalg.solve(c, x - np.asarray(mean)[:, None])


def mixture_score(x, means, covs, weights, sigma=0.0):
    """Score of the sigma-smoothed Gaussian mixture at the columns of x."""
    x = np.asarray(x, dtype=np.float64)
    logp = []
    scores = []
    for m, c, w in zip(means, covs, weights):
        cs = np.asarray(c) + sigma**2 * np.eye(len(m))
        logp.append(math.log(w) + gaussian_log_density(x, m, cs))
        scores.append(gaussian_score(x, m, c, sigma))
    logp = np.array(logp)
    post = np.exp(logp - logp.max(0))
    post /= post.sum(0)
    return np.einsum("km,kdm->dm", post, np.array(scores))


def frame_averaged_score(params, pts, level, k, rng, orderings=8):
    """Learned score of each column of ``pts``, averaged over random column orders.

    The network treats columns as a time axis, so each output frame sees its
    neighbours. For i.i.d. points that context carries no information, and
    averaging over orders removes the arbitrary dependence on it.
    """
    pts = np.asarray(pts)
    acc = np.zeros(pts.shape, dtype=np.float64)
    for _ in range(orderings):
        perm = rng.permutation(pts.shape[1])
        acc += score_array(params, pts[:, perm], level, k)[:, np.argsort(perm)]
    return acc / orderings


def _grid_in_region(spec, k, n, radius=2.0):
    """Grid points (columns) within Mahalanobis ``radius`` of component k."""
    mean, cov = spec.means[k - 1], spec.covs[k - 1]
    half = radius * np.sqrt(np.diag(cov))
    axes = [np.linspace(m - h, m + h, n) for m, h in zip(mean, half)]
    if spec.dim > 3:
        # dense grids are pointless beyond a few dimensions; fall back to draws
        pts = spec.draw(k, n * n, np.random.default_rng(spec.seed + k))
    else:
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh])
    d = pts - mean[:, None]
    maha = np.sqrt(np.einsum("im,ij,jm->m", d, np.linalg.inv(cov), d))
    return pts[:, maha <= radius + 1e-12]


@dataclass
class ValidationReport:
    failed: bool = False
    failure: str = ""
    losses: list = field(default_factory=list)
    score_rel_error: dict = field(default_factory=dict)  # (speaker, level) -> aggregate relative error
    score_cosine: dict = field(default_factory=dict)
    coverage: dict = field(default_factory=dict)  # speaker -> fraction within 3 std
    sample_mean_error: dict = field(default_factory=dict)
    sample_means: dict = field(default_factory=dict)
    logdensity_before: float = float("nan")
    logdensity_after: float = float("nan")
    grid_rows: list = field(default_factory=list)
    params: object = None

    score_error_limit: float = 0.3
    coverage_limit: float = 0.8

    @property
    def conversion_gain(self):
        return self.logdensity_after - self.logdensity_before

    def smallest_level_error(self):
        if not self.score_rel_error:
            return float("nan")
        last = max(level for _, level in self.score_rel_error)
        return max(v for (_, level), v in self.score_rel_error.items() if level == last)

    def checks(self):
        """Hard invariants as (name, passed, detail)."""
        if self.failed:
            return [("training", False, self.failure)]
        out = []
        err = self.smallest_level_error()
        out.append(("score_field_error", err < self.score_error_limit,
                    f"relative error at smallest sigma {err:.4f} (limit {self.score_error_limit})"))
        for k, frac in sorted(self.coverage.items()):
            out.append((f"coverage_speaker{k}", frac >= self.coverage_limit,
                        f"{frac:.3f} of samples within 3 std (limit {self.coverage_limit})"))
        out.append(("conversion_gain", self.conversion_gain > 0,
                    f"mean target log-density {self.logdensity_before:.4f} -> {self.logdensity_after:.4f}"))
        return out

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.checks())

    def write_grid_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dim = (len(self.grid_rows[0]) - 2) // 3 if self.grid_rows else 2
            coords = ["x", "y", "z"][:dim] if dim <= 3 else [f"x{i}" for i in range(dim)]
            w.writerow(["speaker", "level"] + coords
                       + [f"learned_score_{c}" for c in coords] + [f"analytic_score_{c}" for c in coords])
            for row in self.grid_rows:
                w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:]])


def synthetic_validation(spec, schedule, train_cfg, langevin_cfg, net_config=None, sample_cfg=None,
                         levels_to_grid=None, grid_orderings=8):
    """Train on Gaussian pseudo-speakers and check the learned model against closed forms.

    Reports (i) score-field error against the exact smoothed score on a grid
    within 2 std of each component, (ii) sampling coverage and moment errors,
    (iii) mean log-density gain under speaker 2 when converting draws of
    speaker 1 toward it. Grid scores are averaged over ``grid_orderings``
    random orders of the grid points (see ``frame_averaged_score``).
    """
    if not isinstance(schedule, NoiseSchedule):
        schedule = NoiseSchedule(tuple(schedule))
    rng = np.random.default_rng(spec.seed)
    utts = [[spec.draw(k, spec.frames_per_utterance, rng) for _ in range(spec.utterances_per_speaker)]
            for k in range(1, spec.K + 1)]
    corpus = TrainingCorpus([f"pseudo{k}" for k in range(1, spec.K + 1)], utts)
    if net_config is None:
        net_config = ScoreNetConfig(feature_dim=spec.dim, noise_levels=schedule.L, speakers=spec.K,
                                    base_channels=16, depth=2, max_channels=64)
    report = ValidationReport()
    try:
        result = train(corpus, train_cfg, schedule, net_config)
    except NumericalError as exc:
        report.failed = True
        report.failure = str(exc)
        return report
    params = result.params
    report.params = params
    report.losses = [h.loss for h in result.history]

    if levels_to_grid is None:
        levels_to_grid = sorted({max(1, schedule.L - 1), schedule.L})
    order_rng = np.random.default_rng(spec.seed + 1000)
    for k in range(1, spec.K + 1):
        pts = _grid_in_region(spec, k, spec.grid_points)
        for level in levels_to_grid:
            sigma = schedule.sigma(level)
            learned = frame_averaged_score(params, pts, level, k, order_rng, grid_orderings)
            exact = gaussian_score(pts, spec.means[k - 1], spec.covs[k - 1], sigma)
            report.score_rel_error[(k, level)] = float(np.linalg.norm(learned - exact) / np.linalg.norm(exact))
            nz = np.linalg.norm(exact, axis=0) > 1e-12
            cos = (learned * exact).sum(0)[nz] / (np.linalg.norm(learned, axis=0)[nz] * np.linalg.norm(exact, axis=0)[nz])
            report.score_cosine[(k, level)] = float(cos.mean())
            for j in range(pts.shape[1]):
                report.grid_rows.append([k, level, *pts[:, j], *learned[:, j], *exact[:, j]])

    if sample_cfg is None:
        sample_cfg = LangevinConfig.for_sampling(epsilon=langevin_cfg.epsilon,
                                                 steps_per_level=langevin_cfg.steps_per_level,
                                                 seed=langevin_cfg.seed)
    for k in range(1, spec.K + 1):
        cfg_k = LangevinConfig.for_sampling(epsilon=sample_cfg.epsilon, steps_per_level=sample_cfg.steps_per_level,
                                            seed=sample_cfg.seed + k)
        try:
            xs = sample(params, (spec.dim, spec.eval_samples), k, schedule, cfg_k)
        except NumericalError as exc:
            report.failed = True
            report.failure = f"sampling speaker {k}: {exc}"
            return report
        d = xs - spec.means[k - 1][:, None]
        maha = np.sqrt(np.einsum("im,ij,jm->m", d, np.linalg.inv(spec.covs[k - 1]), d))
        report.coverage[k] = float((maha <= 3.0).mean())
        report.sample_means[k] = xs.mean(1)
        report.sample_mean_error[k] = float(np.linalg.norm(xs.mean(1) - spec.means[k - 1]))

    if spec.K >= 2:
        src = spec.draw(1, spec.convert_points, rng)
        out, _ = convert(params, src, 2, schedule, langevin_cfg)
        report.logdensity_before = float(gaussian_log_density(src, spec.means[1], spec.covs[1]).mean())
        report.logdensity_after = float(gaussian_log_density(out, spec.means[1], spec.covs[1]).mean())
    return report
