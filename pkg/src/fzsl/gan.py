"""Conditional WGAN-GP feature generator and the two local objectives.

The generator maps ``[z, condition]`` to a feature vector; the critic scores
``[x, a_g]``. The critic is always conditioned on the ground-truth attribute
vector, while the generator condition may be the augmented one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .numerics import (
    LinearParams,
    MlpParams,
    interpolate,
    matmul_t,
    mlp_forward,
    mlp_init,
    mlp_vjp,
    penalty_at,
    softmax_cross_entropy,
)
from .rng import RngStream


@dataclass
class GanModel:
    generator: MlpParams
    discriminator: MlpParams
    noise_dim: int

    def __post_init__(self):
        g_in, _, feat = self.generator.dims
        d_in, _, d_out = self.discriminator.dims
        if self.noise_dim <= 0 or g_in <= self.noise_dim:
            raise InvalidArgument("generator input must hold noise plus a non-empty condition")
        if d_in <= feat or d_out != 1:
            raise InvalidArgument("critic must take [feature, attribute] and emit one score")

    @property
    def feature_dim(self) -> int:
        return self.generator.dims[2]

    @property
    def condition_dim(self) -> int:
        return self.generator.dims[0] - self.noise_dim

    @property
    def attribute_dim(self) -> int:
        return self.discriminator.dims[0] - self.feature_dim

    def copy(self) -> "GanModel":
        return GanModel(self.generator.copy(), self.discriminator.copy(), self.noise_dim)

    def equals(self, other: "GanModel") -> bool:
        return (
            self.noise_dim == other.noise_dim
            and self.generator.equals(other.generator)
            and self.discriminator.equals(other.discriminator)
        )


def gan_init(
    feature_dim: int,
    attribute_dim: int,
    condition_dim: int,
    noise_dim: int,
    hidden_dim: int,
    rng: RngStream,
    leaky_slope: float = 0.2,
    dtype=np.float32,
) -> GanModel:
    generator = mlp_init(
        (noise_dim + condition_dim, hidden_dim, feature_dim),
        rng.child("generator"),
        output_activation="relu",
        leaky_slope=leaky_slope,
        dtype=dtype,
    )
    critic = mlp_init(
        (feature_dim + attribute_dim, hidden_dim, 1),
        rng.child("discriminator"),
        leaky_slope=leaky_slope,
        dtype=dtype,
    )
    return GanModel(generator, critic, noise_dim)


def generate(generator: MlpParams, z, condition) -> np.ndarray:
    return mlp_forward(generator, np.concatenate([z, condition], axis=1))


def critic_objective(model: GanModel, x_real, x_fake, a_g, eps, gp_lambda):
    """Critic loss ``mean(D(fake)) - mean(D(real)) + gp_lambda * GP`` and its gradients.

    Returns ``(loss, penalty, grads)``; the fake batch is treated as a constant.
    """
    critic = model.discriminator
    dt = x_real.dtype.type
    b, b_fake = x_real.shape[0], x_fake.shape[0]
    both = np.concatenate([np.concatenate([x_real, a_g], axis=1), np.concatenate([x_fake, a_g], axis=1)])
    scores, pullback = mlp_vjp(critic, both)
    dout = np.concatenate([np.full((b, 1), -1 / dt(b), dt), np.full((b_fake, 1), 1 / dt(b_fake), dt)])
    g_adv, _ = pullback(dout)
    penalty, g_pen = penalty_at(critic, interpolate(x_real, x_fake, eps), a_g)
    loss = float(np.mean(scores[b:])) - float(np.mean(scores[:b])) + gp_lambda * penalty
    return loss, penalty, g_adv + g_pen.scale(gp_lambda)


def generator_objective(model: GanModel, cls_head: LinearParams, z, condition, a_g, labels, beta):
    """Generator loss ``-mean(D(G(z, c), a_g)) + beta * CE(cls_head(G(z, c)), labels)``.

    Returns ``(loss, adversarial_part, cls_part, grads)``. The critic and the
    classifier head are held fixed.
    """
    g_in = np.concatenate([z, condition], axis=1)
    fake, g_pullback = mlp_vjp(model.generator, g_in)
    b = fake.shape[0]
    dt = fake.dtype.type
    d_fake, d_pullback = mlp_vjp(model.discriminator, np.concatenate([fake, a_g], axis=1))
    _, d_input = d_pullback(np.full_like(d_fake, -1 / dt(b)))
    dfake = d_input[:, : model.feature_dim]
    adv = -float(np.mean(d_fake))
    cls_loss = 0.0
    if beta:
        logits = matmul_t(fake, cls_head.weights) + cls_head.bias
        cls_loss, dlogits = softmax_cross_entropy(logits, labels)
        dfake = dfake + dt(beta) * np.einsum("bc,ci->bi", dlogits, cls_head.weights, optimize=False)
    grads, _ = g_pullback(dfake)
    return adv + beta * cls_loss, adv, cls_loss, grads
