"""Server side of the protocol.

Everything here works on parameter bundles only; no function accepts a
dataset or feature rows.
"""
from __future__ import annotations

import builtins
from typing import Mapping, Sequence

import numpy as np

from ..errors import InvalidArgument
from ..gan import GanModel
from ..numerics import MlpParams
from ..rng import SERVER_ID, derive_rng

HOLISTIC = "holistic"
GENERATOR_ONLY = "generator_only"


def select_clients(num_clients: int, fraction: float, round: int, global_seed: int) -> list[int]:
    """Uniform random subset of ``max(1, round(N * S))`` client ids, ascending."""
    if not 0 < fraction <= 1:
        raise InvalidArgument("client fraction must lie in (0, 1]")
    k = max(1, builtins.round(num_clients * fraction))
    if k >= num_clients:
        return list(range(num_clients))
    rng = derive_rng(global_seed, round, SERVER_ID, "selection")
    return sorted(int(i) for i in rng.choice(num_clients, k, replace=False))


def _mean_params(bundles: Sequence[MlpParams]) -> MlpParams:
    first = bundles[0]
    for other in bundles[1:]:
        if other.dims != first.dims or other.hidden_activation != first.hidden_activation \
                or other.output_activation != first.output_activation:
            raise InvalidArgument("cannot aggregate models with different architectures")
    means = []
    for k, ref in enumerate(first.arrays()):
        acc = ref.astype(np.float64)
        for other in bundles[1:]:
            acc = acc + other.arrays()[k]
        means.append((acc / len(bundles)).astype(ref.dtype))
    return first.with_arrays(means)


def _ordered(models):
    if isinstance(models, Mapping):
        return [models[k] for k in sorted(models)]
    return list(models)


def aggregate(models, mode: str):
    """Unweighted coordinate-wise mean over the selected clients.

    ``models`` is a list already in ascending client-id order, or a mapping
    from client id to model. Holistic mode returns a :class:`GanModel`;
    generator-only mode returns just the averaged generator.
    """
    models = _ordered(models)
    if not models:
        raise InvalidArgument("no models to aggregate")
    if len({m.noise_dim for m in models}) != 1:
        raise InvalidArgument("cannot aggregate models with different noise widths")
    generator = _mean_params([m.generator for m in models])
    if mode == GENERATOR_ONLY:
        return generator
    if mode == HOLISTIC:
        return GanModel(generator, _mean_params([m.discriminator for m in models]), models[0].noise_dim)
    raise InvalidArgument(f"unknown aggregation mode {mode!r}")


def broadcast(global_payload, models, mode: str) -> list[GanModel]:
    """Reinitialize every client from the server payload.

    Holistic: the whole model is replaced. Generator-only: the generator is
    replaced and the client's own critic is kept as is.
    """
    models = _ordered(models)
    if mode == HOLISTIC:
        if not isinstance(global_payload, GanModel):
            raise InvalidArgument("holistic broadcast needs a full GanModel payload")
        return [global_payload.copy() for _ in models]
    if mode == GENERATOR_ONLY:
        if not isinstance(global_payload, MlpParams):
            raise InvalidArgument("generator-only broadcast needs a generator payload")
        out = []
        for m in models:
            if m.generator.dims != global_payload.dims:
                raise InvalidArgument("broadcast generator does not fit the client architecture")
            out.append(GanModel(global_payload.copy(), m.discriminator, m.noise_dim))
        return out
    raise InvalidArgument(f"unknown aggregation mode {mode!r}")


def payload_size(model: GanModel, mode: str) -> int:
    """Parameters one client sends per upload in the given mode."""
    if mode == HOLISTIC:
        return model.generator.n_params + model.discriminator.n_params
    if mode == GENERATOR_ONLY:
        return model.generator.n_params
    raise InvalidArgument(f"unknown aggregation mode {mode!r}")


def transmitted_params(model: GanModel, mode: str, num_selected: int, num_clients: int) -> int:
    """Uploads from the selected clients plus the broadcast to every client."""
    return payload_size(model, mode) * (num_selected + num_clients)
