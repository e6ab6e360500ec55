"""Video dataset condensation at desk scale.

Selection (random, herding, realism-ranked) and distillation (trajectory
matching, statistical matching) of tiny video datasets, plus the shared
temporal-processing, labeling, and evaluation protocol that makes the
methods comparable. `vdc.pipeline.run_pipeline` ties it together; the
`vdc` console script wraps each stage.
"""

from .dataio import (
    CondensedSet,
    DatasetStats,
    VideoDataset,
    VideoItem,
    compute_stats,
    make_micro_dataset,
    read_dataset,
    write_dataset,
)
from .datm import TmConfig, run_datm
from .edc import DmConfig, collect_stat_targets, dm_loss, run_edc
from .errors import (
    CacheError,
    CompatibilityError,
    CondensationError,
    ConfigError,
    EvalError,
    FormatError,
    PlanError,
    SelectionError,
    StageError,
    StatsError,
    TrainingError,
)
from .evaluation import EvalConfig, EvalReport, cross_arch_evaluate, evaluate
from .models import ModelSpec, build_model
from .pipeline import render_table, run_pipeline
from .selection import select_herding, select_random, select_rded
from .temporal import (
    CompressionReport,
    SamplingPlan,
    compression_report,
    default_plan,
)
from .trajectory import (
    ExpertConfig,
    ExpertTrajectory,
    Teacher,
    load_trajectory,
    save_trajectory,
    train_expert,
)

__version__ = "0.1.0"

__all__ = [
    "CacheError",
    "CompatibilityError",
    "CompressionReport",
    "CondensationError",
    "CondensedSet",
    "ConfigError",
    "DatasetStats",
    "DmConfig",
    "EvalConfig",
    "EvalError",
    "EvalReport",
    "ExpertConfig",
    "ExpertTrajectory",
    "FormatError",
    "ModelSpec",
    "PlanError",
    "SamplingPlan",
    "SelectionError",
    "StageError",
    "StatsError",
    "Teacher",
    "TmConfig",
    "TrainingError",
    "VideoDataset",
    "VideoItem",
    "build_model",
    "collect_stat_targets",
    "compression_report",
    "compute_stats",
    "cross_arch_evaluate",
    "default_plan",
    "dm_loss",
    "evaluate",
    "load_trajectory",
    "make_micro_dataset",
    "read_dataset",
    "render_table",
    "run_datm",
    "run_edc",
    "run_pipeline",
    "save_trajectory",
    "select_herding",
    "select_random",
    "select_rded",
    "train_expert",
    "write_dataset",
    "__version__",
]
