"""Client state and local adversarial training.

Random draws inside :func:`local_train` happen in a fixed order, which the
replay tests rely on. Per epoch: a row permutation (or, for clients with
fewer rows than a batch, one resampled index vector). Per batch and critic
step: generator noise, augmentation noise when enabled, interpolation
weights. Per batch generator step: generator noise, augmentation noise.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..config import FedConfig
from ..data import ClientPartition, Dataset
from ..errors import InvalidArgument, NumericFailure
from ..gan import GanModel, critic_objective, generate, generator_objective
from ..numerics import AdamState, LinearParams, adam_init, adam_step, linear_init, softmax_cross_entropy
from ..rng import RngStream
from ..semantics import EmbeddingTable, augment_batch


@dataclass
class ClientState:
    partition: ClientPartition
    features: np.ndarray
    labels: np.ndarray  # index into the global seen-class list
    attributes: np.ndarray  # a_g for each row
    text: np.ndarray | None  # a_c for each row, when augmentation is on
    model: GanModel
    cls_head: LinearParams
    opt_g: AdamState
    opt_d: AdamState
    rng: RngStream | None = None

    @property
    def client_id(self) -> int:
        return self.partition.client_id


@dataclass
class EpochLosses:
    critic: float
    generator: float
    cls: float


def _freeze(params: LinearParams) -> LinearParams:
    for a in params.arrays():
        a.flags.writeable = False
    return params


def pretrain_local_classifier(
    features, labels, num_outputs: int, epochs: int, lr: float, rng: RngStream, batch_size: int = 64
) -> LinearParams:
    """Linear softmax classifier on the client's real features, returned read-only."""
    features = np.asarray(features, np.float32)
    labels = np.asarray(labels, np.int64)
    if features.shape[0] == 0:
        raise InvalidArgument("cannot pretrain a classifier on an empty partition")
    params = linear_init(features.shape[1], num_outputs)
    state = adam_init(params, lr, beta1=0.9, beta2=0.999)
    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            xb = features[idx]
            _, dlogits = softmax_cross_entropy(params.logits(xb), labels[idx])
            grads = (np.einsum("bc,bi->ci", dlogits, xb, optimize=False), dlogits.sum(axis=0))
            params, state = adam_step(params, grads, state)
    return _freeze(params)


def make_client(
    partition: ClientPartition,
    dataset: Dataset,
    model: GanModel,
    config: FedConfig,
    embeddings: EmbeddingTable | None,
    rng: RngStream,
) -> ClientState:
    """Copy out the client's own rows, pretrain its classifier head, set up optimizers."""
    rows = np.asarray(partition.row_indices)
    if rows.size == 0:
        raise InvalidArgument(f"client {partition.client_id} has no rows")
    seen_index = {c: i for i, c in enumerate(dataset.seen_classes)}
    class_ids = dataset.labels[rows]
    if not set(class_ids.tolist()) <= set(partition.class_subset):
        raise InvalidArgument(f"client {partition.client_id} holds rows outside its class subset")
    features = dataset.features[rows].copy()
    labels = np.array([seen_index[int(c)] for c in class_ids], dtype=np.int64)
    text = None
    if config.ska:
        if embeddings is None:
            raise InvalidArgument("augmentation enabled but no embedding table supplied")
        names = [dataset.class_names[c] for c in partition.class_subset]
        table = dict(zip(partition.class_subset, embeddings.lookup(names)))
        text = np.stack([table[int(c)] for c in class_ids])
    cls_head = pretrain_local_classifier(
        features, labels, len(dataset.seen_classes), config.cls_pretrain_epochs,
        config.cls_learning_rate, rng, config.batch_size,
    )
    return ClientState(
        partition=partition,
        features=features,
        labels=labels,
        attributes=dataset.attributes[class_ids].copy(),
        text=text,
        model=model.copy(),
        cls_head=cls_head,
        opt_g=adam_init(model.generator, config.learning_rate, config.adam_beta1, config.adam_beta2),
        opt_d=adam_init(model.discriminator, config.learning_rate, config.adam_beta1, config.adam_beta2),
    )


def _batches(n: int, batch_size: int, rng: RngStream):
    if n < batch_size:
        return [rng.integers(0, n, size=batch_size)]
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _condition(state: ClientState, idx, config: FedConfig, rng: RngStream):
    a_g = state.attributes[idx]
    if not config.ska:
        return a_g
    return augment_batch(state.text[idx], a_g, config.gamma, rng)


def _step(state: ClientState, idx, config: FedConfig, rng: RngStream):
    """One batch: ``n_critic`` critic updates, then one generator update."""
    model, opt_g, opt_d = state.model, state.opt_g, state.opt_d
    x_real = state.features[idx]
    a_g = state.attributes[idx]
    b = x_real.shape[0]
    critic_losses = []
    for _ in range(config.n_critic):
        z = rng.normal((b, model.noise_dim))
        fake = generate(model.generator, z, _condition(state, idx, config, rng))
        eps = rng.uniform((b, 1))
        loss, _, grads = critic_objective(model, x_real, fake, a_g, eps, config.gp_lambda)
        if not np.isfinite(loss):
            raise NumericFailure("non-finite critic loss", layer="discriminator")
        critic, opt_d = adam_step(model.discriminator, grads, opt_d)
        model = GanModel(model.generator, critic, model.noise_dim)
        critic_losses.append(loss)
    z = rng.normal((b, model.noise_dim))
    cond = _condition(state, idx, config, rng)
    loss, adv, cls_loss, grads = generator_objective(
        model, state.cls_head, z, cond, a_g, state.labels[idx], config.beta
    )
    if not np.isfinite(loss):
        raise NumericFailure("non-finite generator loss", layer="generator")
    generator, opt_g = adam_step(model.generator, grads, opt_g)
    new_state = replace(state, model=GanModel(generator, model.discriminator, model.noise_dim), opt_g=opt_g, opt_d=opt_d)
    return new_state, float(np.mean(critic_losses)), adv, cls_loss


def local_train(state: ClientState, config: FedConfig, rng: RngStream | None = None, round: int | None = None):
    """Run ``local_epochs`` epochs of critic/generator updates on the client's rows.

    Returns the updated state and one :class:`EpochLosses` per epoch. ``rng``
    defaults to ``state.rng``.
    """
    rng = rng or state.rng
    if rng is None:
        raise InvalidArgument("local_train needs a random stream")
    if state.model.condition_dim != (state.attributes.shape[1] + (state.text.shape[1] if config.ska else 0)):
        raise InvalidArgument("generator condition width does not match the client's conditions")
    n = state.features.shape[0]
    history = []
    try:
        for _ in range(config.local_epochs):
            sums = np.zeros(3)
            batches = _batches(n, config.batch_size, rng)
            for idx in batches:
                state, c, g, k = _step(state, idx, config, rng)
                sums += (c, g, k)
            history.append(EpochLosses(*(sums / len(batches))))
    except NumericFailure as exc:
        raise NumericFailure(exc.base_message, layer=exc.layer, round=round, client=state.client_id) from exc
    return state, history
