"""Feature files, speaker statistics, normalization and F0 conversion.

VGFEAT01 layout (all little-endian)::

    magic    8 bytes  b"VGFEAT01"
    D, M     uint32 each
    mcc      D*M float32, row-major (dimension-major)
    log_f0   M float32 (NaN on unvoiced frames)
    voiced   M bytes (0 or 1)
    A        uint32, aperiodicity rows
    ap       A*M float32, row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParseError, ValidationError

FEATURE_MAGIC = b"VGFEAT01"
STATS_VERSION = "speaker-stats-v1"


@dataclass
class FeatureSequence:
    mcc: np.ndarray
    log_f0: np.ndarray
    voiced: np.ndarray
    ap: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mcc = np.asarray(self.mcc, dtype=np.float64)
        if self.mcc.ndim != 2:
            raise ValidationError(f"mcc must be D x M, got shape {self.mcc.shape}")
        m = self.mcc.shape[1]
        self.voiced = np.asarray(self.voiced, dtype=bool)
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float64)
        if self.voiced.shape != (m,) or self.log_f0.shape != (m,):
            raise ValidationError(f"log_f0 and voiced must have length M={m}")
        self.log_f0 = np.where(self.voiced, self.log_f0, np.nan)
        if np.any(~np.isfinite(self.log_f0[self.voiced])):
            raise ValidationError("voiced frames need a finite log-F0")
        if self.ap is None:
            self.ap = np.zeros((0, m))
        self.ap = np.asarray(self.ap, dtype=np.float64)
        if self.ap.ndim != 2 or self.ap.shape[1] != m:
            raise ValidationError(f"ap must be A x M with M={m}, got {self.ap.shape}")

    @property
    def D(self):
        return self.mcc.shape[0]

    @property
    def M(self):
        return self.mcc.shape[1]

    @classmethod
    def from_f0(cls, mcc, f0, ap=None):
        """Build from a linear F0 track; F0 > 0 marks voiced frames."""
        f0 = np.asarray(f0, dtype=np.float64)
        voiced = f0 > 0
        log_f0 = np.full(f0.shape, np.nan)
        log_f0[voiced] = np.log(f0[voiced])
        return cls(mcc, log_f0, voiced, ap)


def write_feature_file(path, seq):
    D, M = seq.mcc.shape
    parts = [
        FEATURE_MAGIC,
        struct.pack("<II", D, M),
        np.ascontiguousarray(seq.mcc, dtype="<f4").tobytes(),
        np.ascontiguousarray(seq.log_f0, dtype="<f4").tobytes(),
        seq.voiced.astype(np.uint8).tobytes(),
        struct.pack("<I", seq.ap.shape[0]),
        np.ascontiguousarray(seq.ap, dtype="<f4").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_feature_file(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_features(data)


def _consistent_row_counts(data, M):
    """Row counts r for which the file length matches a complete layout."""
    found = []
    r = 0
    while True:
        a_pos = 16 + 4 * r * M + 5 * M
        if a_pos + 4 > len(data):
            return found
        (A,) = struct.unpack_from("<I", data, a_pos)
        if a_pos + 4 + 4 * A * M == len(data):
            found.append(r)
        r += 1


def parse_features(data):
    """Decode VGFEAT01 bytes. Nothing is returned unless the whole file is valid."""
    if len(data) < 16:
        raise ParseError("file too short for a VGFEAT01 header", offset=len(data))
    if data[:8] != FEATURE_MAGIC:
        raise ParseError(f"bad magic {data[:8]!r}, expected {FEATURE_MAGIC!r}", offset=0)
    D, M = struct.unpack_from("<II", data, 8)
    pos = 16
    mcc_bytes = 4 * D * M
    if M > 0:
        rows = _consistent_row_counts(data, M)
        if rows and D not in rows:
            raise DimensionError(
                f"header declares D={D} MCC rows but the payload is laid out for {rows[0]}", offset=8
            )
    pos_end = pos + mcc_bytes
    if len(data) < pos_end:
        raise ParseError(f"truncated MCC block: need {mcc_bytes} bytes", offset=len(data))
    mcc = np.frombuffer(data, dtype="<f4", count=D * M, offset=pos).reshape(D, M)
    pos = pos_end
    if len(data) < pos + 4 * M:
        raise ParseError("truncated log-F0 block", offset=len(data))
    log_f0 = np.frombuffer(data, dtype="<f4", count=M, offset=pos)
    pos += 4 * M
    if len(data) < pos + M:
        raise ParseError("truncated voicing block", offset=len(data))
    voiced_raw = np.frombuffer(data, dtype=np.uint8, count=M, offset=pos)
    if np.any(voiced_raw > 1):
        bad = int(np.argmax(voiced_raw > 1))
        raise ParseError("voicing flags must be 0 or 1", offset=pos + bad)
    pos += M
    if len(data) < pos + 4:
        raise ParseError("truncated aperiodicity header", offset=len(data))
    (A,) = struct.unpack_from("<I", data, pos)
    pos += 4
    ap_bytes = 4 * A * M
    if len(data) < pos + ap_bytes:
        raise ParseError(f"truncated aperiodicity block: need {ap_bytes} bytes", offset=len(data))
    ap = np.frombuffer(data, dtype="<f4", count=A * M, offset=pos).reshape(A, M)
    pos += ap_bytes
    if pos != len(data):
        raise DimensionError(f"{len(data) - pos} unexpected trailing bytes after the declared payload", offset=pos)
    voiced = voiced_raw.astype(bool)
    log_f0 = log_f0.astype(np.float64)
    if np.any(~np.isfinite(log_f0[voiced])):
        raise ParseError("voiced frame with non-finite log-F0", offset=16 + mcc_bytes)
    return FeatureSequence(mcc.astype(np.float64), log_f0, voiced, ap.astype(np.float64))


# ---------------------------------------------------------------------------
# Speaker statistics


@dataclass
class SpeakerStats:
    mcc_mean: np.ndarray
    mcc_std: np.ndarray
    logf0_mean: float
    logf0_std: float
    frame_count: int
    name: str = ""

    def __post_init__(self):
        self.mcc_mean = np.asarray(self.mcc_mean, dtype=np.float64)
        self.mcc_std = np.asarray(self.mcc_std, dtype=np.float64)
        if self.mcc_mean.shape != self.mcc_std.shape or self.mcc_mean.ndim != 1:
            raise ValidationError("mcc_mean and mcc_std must be matching vectors")
        if np.any(~(self.mcc_std > 0)):
            d = int(np.argmax(~(self.mcc_std > 0)))
            raise ValidationError(f"MCC dimension {d} has zero standard deviation")

    @property
    def D(self):
        return self.mcc_mean.size


def _voiced_stats(mcc, log_f0):
    n = mcc.shape[1]
    if n < 2:
        raise ValidationError(f"need at least 2 voiced frames to estimate statistics, got {n}")
    mean = mcc.mean(axis=1)
    std = mcc.std(axis=1, ddof=1)
    zero = np.flatnonzero(~(std > 0))
    if zero.size:
        raise ValidationError(f"MCC dimension {int(zero[0])} has zero variance over voiced frames")
    f0_std = float(log_f0.std(ddof=1))
    return mean, std, float(log_f0.mean()), f0_std


def compute_speaker_stats(sequences, name=""):
    """Per-dimension MCC mean/sample-std and log-F0 mean/std over voiced frames."""
    sequences = list(sequences)
    if not sequences:
        raise ValidationError("no sequences given")
    dims = {s.D for s in sequences}
    if len(dims) != 1:
        raise ValidationError(f"sequences disagree on MCC dimension: {sorted(dims)}")
    mcc = np.concatenate([s.mcc[:, s.voiced] for s in sequences], axis=1)
    f0 = np.concatenate([s.log_f0[s.voiced] for s in sequences])
    mean, std, f0_mean, f0_std = _voiced_stats(mcc, f0)
    return SpeakerStats(mean, std, f0_mean, f0_std, int(mcc.shape[1]), name)


def utterance_stats(seq):
    """Statistics of a single utterance, used to normalize unseen source speakers."""
    return compute_speaker_stats([seq], name="utterance")


def normalize_mcc(mcc, stats):
    """(x - mean_d) / std_d on every frame."""
    mcc = np.asarray(mcc, dtype=np.float64)
    return (mcc - stats.mcc_mean[:, None]) / stats.mcc_std[:, None]


def denormalize_mcc(mcc, stats):
    mcc = np.asarray(mcc, dtype=np.float64)
    return mcc * stats.mcc_std[:, None] + stats.mcc_mean[:, None]


def adjust_mean_variance(converted, target_stats, voiced, source_stats=None):
    """Affinely map each dimension so its voiced-frame mean/std equal the target's.

    ``source_stats`` are (mean, std) of ``converted`` over ``voiced``; they are
    measured when omitted.
    """
    converted = np.asarray(converted, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    if source_stats is None:
        sub = converted[:, voiced]
        if sub.shape[1] < 2:
            raise ValidationError("need at least 2 voiced frames to measure the converted statistics")
        src_mean, src_std = sub.mean(axis=1), sub.std(axis=1, ddof=1)
    else:
        src_mean, src_std = (np.asarray(v, dtype=np.float64) for v in source_stats)
    bad = np.flatnonzero(~(src_std > 0))
    if bad.size:
        raise ValidationError(f"converted MCC dimension {int(bad[0])} has zero standard deviation")
    scale = target_stats.mcc_std / src_std
    return (converted - src_mean[:, None]) * scale[:, None] + target_stats.mcc_mean[:, None]


def convert_log_f0(log_f0, voiced, src, tgt):
    """Log-Gaussian normalized F0 transform; unvoiced frames stay NaN."""
    if not src.logf0_std > 0:
        raise ValidationError("source log-F0 standard deviation is zero")
    log_f0 = np.asarray(log_f0, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    out = np.full(log_f0.shape, np.nan)
    out[voiced] = (log_f0[voiced] - src.logf0_mean) * (tgt.logf0_std / src.logf0_std) + tgt.logf0_mean
    return out


# ---------------------------------------------------------------------------
# Stats persistence (plain text, key=value, 17 significant digits)


def _fmt(v):
    return format(float(v), ".17g")


def save_stats(path, stats):
    lines = [
        f"format={STATS_VERSION}",
        f"name={stats.name}",
        f"dim={stats.D}",
        f"frame_count={stats.frame_count}",
        f"logf0_mean={_fmt(stats.logf0_mean)}",
        f"logf0_std={_fmt(stats.logf0_std)}",
        "mcc_mean=" + ",".join(_fmt(v) for v in stats.mcc_mean),
        "mcc_std=" + ",".join(_fmt(v) for v in stats.mcc_std),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_stats(path):
    kv = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{os.fspath(path)}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            kv[key] = value
    if kv.get("format") != STATS_VERSION:
        raise ParseError(f"{os.fspath(path)}: unknown stats format {kv.get('format')!r}")
    try:
        mean = np.array([float(v) for v in kv["mcc_mean"].split(",")])
        std = np.array([float(v) for v in kv["mcc_std"].split(",")])
        stats = SpeakerStats(mean, std, float(kv["logf0_mean"]), float(kv["logf0_std"]),
                             int(kv["frame_count"]), kv.get("name", ""))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{os.fspath(path)}: malformed stats file ({exc})") from exc
    if stats.D != int(kv.get("dim", stats.D)):
        raise ParseError(f"{os.fspath(path)}: dim field disagrees with vector length")
    return stats
