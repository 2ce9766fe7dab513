"""Self-supervised pretraining with relative patch-position prediction.

Core entry points are re-exported here; see the submodules for the full API.
"""

from .aggregation import aggregate, brute_force_pairs, build_provenance, total_pair_count
from .datasets import DatasetId, EvalTaskSpec, ImageSet, load_split, task_by_name
from .errors import ChecksumMismatch, ConfigurationError, IngestionError, TrainingAborted
from .evaluation import EvalResult, ProbeConfig, linear_probe, seed_sweep
from .model import Checkpoint, Encoder, RelationHead, SpatialReasoningModel, load_checkpoint, loss
from .patching import PatchMode, PatchSpec, overlaps, relative_distance, sample_patch_positions
from .representation import compose_representation, make_grid
from .training import RunConfig, pretrain

__version__ = "0.1.0"

__all__ = [
    "aggregate", "brute_force_pairs", "build_provenance", "total_pair_count",
    "DatasetId", "EvalTaskSpec", "ImageSet", "load_split", "task_by_name",
    "ChecksumMismatch", "ConfigurationError", "IngestionError", "TrainingAborted",
    "EvalResult", "ProbeConfig", "linear_probe", "seed_sweep",
    "Checkpoint", "Encoder", "RelationHead", "SpatialReasoningModel", "load_checkpoint", "loss",
    "PatchMode", "PatchSpec", "overlaps", "relative_distance", "sample_patch_positions",
    "compose_representation", "make_grid",
    "RunConfig", "pretrain",
]
