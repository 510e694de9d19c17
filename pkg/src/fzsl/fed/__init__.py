"""Client training, server aggregation and round orchestration."""
from .client import ClientState, EpochLosses, local_train, make_client, pretrain_local_classifier
from .orchestrator import FederationResult, RoundMetrics, make_partitions, run_federation, train_centralized
from .server import aggregate, broadcast, payload_size, select_clients, transmitted_params

__all__ = [
    "ClientState", "EpochLosses", "FederationResult", "RoundMetrics", "aggregate", "broadcast",
    "local_train", "make_client", "make_partitions", "payload_size", "pretrain_local_classifier",
    "run_federation", "select_clients", "train_centralized", "transmitted_params",
]
