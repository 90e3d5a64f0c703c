"""One-shot channel-width search for conv nets.

Train a weight-sharing supernet where each training batch is split across
several masked subnets evaluated in a single full-width pass, distill the loss
history into a budget-conditioned sampling prior, and run an evolutionary
search for the best width configuration under a FLOPs target.
"""

from .archdesc import (
    ArchDescription,
    load_description,
    narrow_description,
    save_description,
    space_hash,
)
from .datasets import ArrayDataset, DatasetBundle, DatasetSpec, build_dataset
from .errors import (
    CalibrationError,
    CheckpointError,
    ConstraintError,
    DivergenceError,
    NormalizationError,
    PartitionError,
    RecordError,
    SamplingExhausted,
    SlimsearchError,
    SpaceError,
)
from .evolution import Candidate, EvoConfig, search, write_ranked_csv
from .presets import available_presets, load_preset
from .prior import (
    PriorDistribution,
    ProxyLossTable,
    build_distribution,
    default_bucket_width,
    proxy_loss,
    sample_conditioned,
    top_records,
)
from .records import LossRecord, RecordWriter, iter_records, read_records, write_records
from .space import LayerSpec, SearchSpace, WidthConfig, min_grid_width
from .supernet import (
    BatchPartition,
    ChannelMask,
    SupernetHandle,
    SupernetModel,
    build_mask,
    build_supernet,
    load_checkpoint,
    parallel_forward,
    recalibrate_bn,
    sample_partition,
    save_checkpoint,
    serial_forward_oracle,
    serial_reference_step,
    supernet_train_step,
)
from .training import (
    OptimizerSpec,
    TrainRecipe,
    desk_recipe,
    retrain_subnet,
    train_supernet,
    uniform_width_config,
)

__version__ = "0.1.0"

__all__ = [
    "ArchDescription",
    "ArrayDataset",
    "available_presets",
    "BatchPartition",
    "build_dataset",
    "build_distribution",
    "build_mask",
    "build_supernet",
    "CalibrationError",
    "Candidate",
    "ChannelMask",
    "CheckpointError",
    "ConstraintError",
    "DatasetBundle",
    "DatasetSpec",
    "default_bucket_width",
    "desk_recipe",
    "DivergenceError",
    "EvoConfig",
    "iter_records",
    "LayerSpec",
    "load_checkpoint",
    "load_description",
    "load_preset",
    "LossRecord",
    "min_grid_width",
    "narrow_description",
    "NormalizationError",
    "OptimizerSpec",
    "parallel_forward",
    "PartitionError",
    "PriorDistribution",
    "proxy_loss",
    "ProxyLossTable",
    "read_records",
    "recalibrate_bn",
    "RecordError",
    "RecordWriter",
    "retrain_subnet",
    "sample_conditioned",
    "sample_partition",
    "SamplingExhausted",
    "save_checkpoint",
    "save_description",
    "search",
    "SearchSpace",
    "serial_forward_oracle",
    "serial_reference_step",
    "SlimsearchError",
    "space_hash",
    "SpaceError",
    "SupernetHandle",
    "SupernetModel",
    "supernet_train_step",
    "top_records",
    "TrainRecipe",
    "train_supernet",
    "uniform_width_config",
    "WidthConfig",
    "write_ranked_csv",
    "write_records",
    "__version__",
]
