"""Score-based any-to-many voice conversion on precomputed acoustic features."""

from .errors import DimensionError, NumericalError, ParseError, ScoreVCError, ShapeError, ValidationError
from .evaluation import SyntheticSpec, dtw_align, evaluate_pairs, mcd, synthetic_validation, utterance_mcd
from .features import (
    FeatureSequence,
    SpeakerStats,
    adjust_mean_variance,
    compute_speaker_stats,
    convert_log_f0,
    normalize_mcc,
    read_feature_file,
    write_feature_file,
)
from .langevin import LangevinConfig, annealed_langevin, convert, sample, step_size
from .noise import NoiseSchedule, TrainConfig, TrainingCorpus, dsm_loss, geometric_schedule, perturb, train
from .score_net import ScoreNetConfig, ScoreNetParams, init_params, score_forward
from .tensor import Tensor, backward

__version__ = "0.1.0"
