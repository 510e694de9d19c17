"""Round loop: select, train locally, aggregate, broadcast, optionally evaluate."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..checkpoint import Checkpoint, save_checkpoint
from ..config import FedConfig
from ..data import ClientPartition, Dataset, partition_even, partition_uneven
from ..errors import InvalidArgument
from ..gan import GanModel, gan_init
from ..numerics import MlpParams
from ..rng import SERVER_ID, derive_rng
from ..semantics import EmbeddingTable
from ..zsl_eval import condition_width, evaluate_unseen
from .client import ClientState, local_train, make_client
from .server import GENERATOR_ONLY, aggregate, broadcast, select_clients, transmitted_params


@dataclass
class RoundMetrics:
    round: int
    selected_clients: list
    mean_critic_loss: float
    mean_generator_loss: float
    mean_cls_loss: float
    transmitted_params: int
    unseen_top1: float | None = None
    wall_time_ms: int = 0

    def record(self) -> dict:
        """Deterministic fields only; wall time is left out."""
        return {
            "round": self.round,
            "selected": list(self.selected_clients),
            "critic_loss": self.mean_critic_loss,
            "generator_loss": self.mean_generator_loss,
            "cls_loss": self.mean_cls_loss,
            "transmitted_params": self.transmitted_params,
            "unseen_top1": self.unseen_top1,
        }


@dataclass
class FederationResult:
    global_generator: MlpParams
    global_discriminator: MlpParams | None
    metrics: list
    clients: list
    checkpoints: list = field(default_factory=list)

    def checkpoint(self, config: FedConfig) -> Checkpoint:
        return Checkpoint(
            config,
            self.metrics[-1].round if self.metrics else 0,
            [c.model for c in self.clients],
            self.global_generator,
            self.global_discriminator,
        )


def make_partitions(dataset: Dataset, config: FedConfig) -> list[ClientPartition]:
    rng = derive_rng(config.global_seed, 0, SERVER_ID, "partition")
    if config.partition == "uneven":
        return partition_uneven(dataset, config.num_clients, rng)
    return partition_even(dataset, config.num_clients, rng)


def _check_partitions(dataset: Dataset, partitions):
    claimed = []
    for i, p in enumerate(partitions):
        if p.client_id != i:
            raise InvalidArgument("partitions must be listed in client-id order starting at 0")
        claimed.extend(p.class_subset)
    if len(claimed) != len(set(claimed)):
        raise InvalidArgument("client class subsets overlap")
    if set(claimed) != set(dataset.seen_classes):
        raise InvalidArgument("client class subsets do not cover the seen classes")


def initial_model(dataset: Dataset, config: FedConfig, embeddings: EmbeddingTable | None) -> GanModel:
    m = dataset.attribute_dim
    return gan_init(
        dataset.feature_dim,
        m,
        condition_width(dataset, config.ska_config, embeddings),
        config.resolved_noise_dim(m),
        config.hidden_dim,
        derive_rng(config.global_seed, 0, SERVER_ID, "init"),
    )


def init_clients(dataset, partitions, config, embeddings, model: GanModel) -> list[ClientState]:
    return [
        make_client(p, dataset, model, config, embeddings, derive_rng(config.global_seed, 0, p.client_id, "pretrain"))
        for p in partitions
    ]


def _train_one(state: ClientState, config: FedConfig, t: int):
    rng = derive_rng(config.global_seed, t, state.client_id, "local")
    return local_train(replace(state, rng=rng), config, rng, round=t)


def run_federation(
    dataset: Dataset,
    partitions: list[ClientPartition],
    config: FedConfig,
    embeddings: EmbeddingTable | None = None,
    eval_every: int | None = None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    workers: int | None = None,
    on_round=None,
) -> FederationResult:
    """Train for ``config.rounds`` rounds and return the server generator.

    Evaluation (every ``eval_every`` rounds, 0 = never) scores the server
    generator right after aggregation. Selected clients may train on
    ``workers`` threads; results are consumed in client-id order, so the
    outcome does not depend on the thread count.
    """
    _check_partitions(dataset, partitions)
    if len(partitions) != config.num_clients:
        raise InvalidArgument(f"config expects {config.num_clients} clients, got {len(partitions)} partitions")
    eval_every = config.eval_every if eval_every is None else eval_every
    workers = config.workers if workers is None else workers
    mode = config.aggregation_mode
    model0 = initial_model(dataset, config, embeddings)
    clients = init_clients(dataset, partitions, config, embeddings, model0)
    global_g = model0.generator.copy()
    global_d = model0.discriminator.copy() if mode != GENERATOR_ONLY else None
    metrics, checkpoints = [], []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(1, config.rounds + 1):
            start = time.perf_counter()
            selected = select_clients(config.num_clients, config.client_fraction, t, config.global_seed)
            jobs = [clients[i] for i in selected]
            if pool is None:
                results = [_train_one(s, config, t) for s in jobs]
            else:
                results = list(pool.map(lambda s: _train_one(s, config, t), jobs))
            losses = []
            for i, (state, history) in zip(selected, results):
                clients[i] = state
                losses.append(history[-1])
            payload = aggregate([clients[i].model for i in selected], mode)
            if mode == GENERATOR_ONLY:
                global_g = payload
            else:
                global_g, global_d = payload.generator, payload.discriminator
            models = broadcast(payload, [c.model for c in clients], mode)
            clients = [replace(c, model=m) for c, m in zip(clients, models)]
            top1 = None
            if eval_every and t % eval_every == 0:
                rng = derive_rng(config.global_seed, t, SERVER_ID, "eval")
                top1 = evaluate_unseen(global_g, dataset, embeddings, config, rng).top1
            metrics.append(
                RoundMetrics(
                    round=t,
                    selected_clients=list(selected),
                    mean_critic_loss=float(np.mean([h.critic for h in losses])),
                    mean_generator_loss=float(np.mean([h.generator for h in losses])),
                    mean_cls_loss=float(np.mean([h.cls for h in losses])),
                    transmitted_params=transmitted_params(clients[0].model, mode, len(selected), len(clients)),
                    unseen_top1=top1,
                    wall_time_ms=int((time.perf_counter() - start) * 1000),
                )
            )
            if on_round is not None:
                on_round(metrics[-1])
            if checkpoint_dir is not None and checkpoint_every and t % checkpoint_every == 0:
                ckpt = Checkpoint(config, t, [c.model for c in clients], global_g, global_d)
                checkpoints.append(save_checkpoint(Path(checkpoint_dir) / f"round{t:04d}.ckpt", ckpt))
    finally:
        if pool is not None:
            pool.shutdown()
    return FederationResult(global_g, global_d, metrics, clients, checkpoints)


def train_centralized(dataset: Dataset, config: FedConfig, embeddings: EmbeddingTable | None = None) -> GanModel:
    """Single-site training over all seen classes with the federation's random streams.

    Replays exactly what one client holding every seen class would do over
    ``config.rounds`` rounds, with no server in the loop.
    """
    everything = ClientPartition(0, tuple(sorted(dataset.seen_classes)), dataset.rows_of(dataset.seen_classes))
    model = initial_model(dataset, config, embeddings)
    state = init_clients(dataset, [everything], config, embeddings, model)[0]
    for t in range(1, config.rounds + 1):
        state, _ = _train_one(state, config, t)
    return state.model
