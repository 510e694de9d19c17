"""Federated zero-shot learning simulator: federated conditional WGAN-GP feature generators."""
from .config import FedConfig, desk_config, load_config
from .data import ClientPartition, Dataset, SyntheticSpec, make_synthetic, partition_even, partition_skew, partition_uneven
from .errors import DigestMismatch, InvalidArgument, LoadError, NumericFailure
from .rng import RngStream, derive_rng

__version__ = "0.1.0"

__all__ = [
    "ClientPartition", "Dataset", "DigestMismatch", "FedConfig", "InvalidArgument", "LoadError",
    "NumericFailure", "RngStream", "SyntheticSpec", "derive_rng", "desk_config", "load_config",
    "make_synthetic", "partition_even", "partition_skew", "partition_uneven",
]
