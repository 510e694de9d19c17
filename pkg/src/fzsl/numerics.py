"""Two-layer MLPs with hand-written reverse mode, Adam, and GAN losses.

All products go through ``einsum(..., optimize=False)`` rather than BLAS so a
batched forward pass is bit-identical to the same rows pushed through one at
a time. Arrays keep whatever float dtype the parameters carry; training uses
float32 and the gradient checks use float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .rng import RngStream

PARAM_NAMES = ("layer1_weights", "layer1_bias", "layer2_weights", "layer2_bias")
HIDDEN_ACTIVATIONS = ("leaky_relu", "relu", "none")
OUTPUT_ACTIVATIONS = ("none", "relu", "sigmoid")


def matmul_t(x, w):
    """``x @ w.T`` with a row-independent summation order."""
    return np.einsum("bi,oi->bo", x, w, optimize=False)


def _matmul(x, w):
    return np.einsum("bo,oi->bi", x, w, optimize=False)


def _outer_sum(dy, x):
    return np.einsum("bo,bi->oi", dy, x, optimize=False)


class MlpGrads(NamedTuple):
    layer1_weights: np.ndarray
    layer1_bias: np.ndarray
    layer2_weights: np.ndarray
    layer2_bias: np.ndarray

    def __add__(self, other):
        return MlpGrads(*(a + b for a, b in zip(self, other)))

    def scale(self, k):
        return MlpGrads(*(a * a.dtype.type(k) for a in self))


@dataclass
class MlpParams:
    """Weights of ``out = act2(W2 act1(W1 x + b1) + b2)``.

    ``layer1_weights`` is ``hidden x in`` and ``layer2_weights`` is ``out x hidden``.
    """

    layer1_weights: np.ndarray
    layer1_bias: np.ndarray
    layer2_weights: np.ndarray
    layer2_bias: np.ndarray
    hidden_activation: str = "leaky_relu"
    leaky_slope: float = 0.2
    output_activation: str = "none"

    def __post_init__(self):
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise InvalidArgument(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidArgument(f"unknown output activation {self.output_activation!r}")
        hidden, n_in = self.layer1_weights.shape
        n_out = self.layer2_weights.shape[0]
        if min(hidden, n_in, n_out) <= 0:
            raise InvalidArgument("MLP dimensions must be positive")
        if (
            self.layer1_bias.shape != (hidden,)
            or self.layer2_weights.shape != (n_out, hidden)
            or self.layer2_bias.shape != (n_out,)
        ):
            raise InvalidArgument("inconsistent MLP parameter shapes")

    @property
    def dims(self) -> tuple[int, int, int]:
        hidden, n_in = self.layer1_weights.shape
        return n_in, hidden, self.layer2_weights.shape[0]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.layer1_weights, self.layer1_bias, self.layer2_weights, self.layer2_bias)

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        return replace(self, **dict(zip(PARAM_NAMES, arrays)))

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def astype(self, dtype) -> "MlpParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def zeros_like(self) -> MlpGrads:
        return MlpGrads(*(np.zeros_like(a) for a in self.arrays()))

    def equals(self, other: "MlpParams") -> bool:
        """Bit-level equality of every array, plus matching activations."""
        return (
            self.hidden_activation == other.hidden_activation
            and self.leaky_slope == other.leaky_slope
            and self.output_activation == other.output_activation
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.arrays(), other.arrays())
            )
        )


@dataclass
class LinearParams:
    """A single affine map ``W x + b``; used for softmax classifier heads."""

    weights: np.ndarray
    bias: np.ndarray
    names: tuple = field(default=("weights", "bias"), repr=False)

    def arrays(self):
        return (self.weights, self.bias)

    def with_arrays(self, arrays):
        return replace(self, weights=arrays[0], bias=arrays[1])

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def logits(self, x):
        return matmul_t(x, self.weights) + self.bias

    def predict(self, x):
        # argmax returns the first maximum, i.e. ties go to the lowest index
        return np.argmax(self.logits(x), axis=1)


def linear_init(n_in: int, n_out: int, dtype=np.float32) -> LinearParams:
    if n_in <= 0 or n_out <= 0:
        raise InvalidArgument("linear dimensions must be positive")
    return LinearParams(np.zeros((n_out, n_in), dtype), np.zeros(n_out, dtype))


def mlp_init(
    dims: Sequence[int],
    rng: RngStream,
    hidden_activation: str = "leaky_relu",
    output_activation: str = "none",
    leaky_slope: float = 0.2,
    dtype=np.float32,
) -> MlpParams:
    """Gaussian weights with standard deviation ``1/sqrt(fan_in)``; zero biases."""
    if len(dims) != 3:
        raise InvalidArgument(f"expected (in, hidden, out) dims, got {tuple(dims)}")
    n_in, hidden, n_out = (int(d) for d in dims)
    if min(n_in, hidden, n_out) <= 0:
        raise InvalidArgument(f"MLP dimensions must be positive, got {tuple(dims)}")
    w1 = rng.normal((hidden, n_in), scale=1.0 / np.sqrt(n_in), dtype=dtype)
    w2 = rng.normal((n_out, hidden), scale=1.0 / np.sqrt(hidden), dtype=dtype)
    return MlpParams(
        w1,
        np.zeros(hidden, dtype),
        w2,
        np.zeros(n_out, dtype),
        hidden_activation=hidden_activation,
        leaky_slope=leaky_slope,
        output_activation=output_activation,
    )


def _hidden_act(params, h):
    if params.hidden_activation == "none":
        return h, np.ones_like(h)
    if params.hidden_activation == "relu":
        return np.maximum(h, 0), (h > 0).astype(h.dtype)
    slope = h.dtype.type(params.leaky_slope)
    deriv = np.where(h > 0, h.dtype.type(1), slope)
    return h * deriv, deriv


def _output_act(params, h):
    kind = params.output_activation
    if kind == "none":
        return h, None
    if kind == "relu":
        return np.maximum(h, 0), (h > 0).astype(h.dtype)
    out = 1 / (1 + np.exp(-h))
    return out, out * (1 - out)


def _check_input(params, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise InvalidArgument(f"input shape {x.shape} does not match MLP input width {params.dims[0]}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("non-finite MLP input")
    return x


def _forward(params, x):
    h1 = matmul_t(x, params.layer1_weights) + params.layer1_bias
    a1, d1 = _hidden_act(params, h1)
    h2 = matmul_t(a1, params.layer2_weights) + params.layer2_bias
    out, d2 = _output_act(params, h2)
    return out, (a1, d1, d2)


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    x = _check_input(params, x)
    return _forward(params, x)[0]


def _backward(params, x, cache, dout):
    a1, d1, d2 = cache
    dh2 = dout if d2 is None else dout * d2
    dh1 = _matmul(dh2, params.layer2_weights) * d1
    grads = MlpGrads(
        _outer_sum(dh1, x),
        dh1.sum(axis=0),
        _outer_sum(dh2, a1),
        dh2.sum(axis=0),
    )
    return grads, _matmul(dh1, params.layer1_weights)


def mlp_backward(params: MlpParams, x, output_gradient) -> tuple[MlpGrads, np.ndarray]:
    """Exact parameter and input gradients for ``sum(output * output_gradient)``."""
    out, pullback = mlp_vjp(params, x)
    return pullback(output_gradient)


def mlp_vjp(params: MlpParams, x):
    """Forward pass plus a pullback ``dout -> (param grads, input grad)`` reusing its activations."""
    x = _check_input(params, x)
    out, cache = _forward(params, x)

    def pullback(output_gradient):
        dout = np.asarray(output_gradient)
        if dout.shape != out.shape:
            raise InvalidArgument(f"output gradient shape {dout.shape} does not match {out.shape}")
        return _backward(params, x, cache, dout)

    return out, pullback


@dataclass
class AdamState:
    step_count: int
    first_moment: tuple
    second_moment: tuple
    learning_rate: float
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params, learning_rate, beta1=0.5, beta2=0.999, epsilon=1e-8) -> AdamState:
    if learning_rate <= 0:
        raise InvalidArgument("learning rate must be positive")
    if not (0 < beta1 < 1 and 0 < beta2 < 1):
        raise InvalidArgument("Adam betas must lie in (0, 1)")
    zeros = tuple(np.zeros_like(a) for a in params.arrays())
    return AdamState(0, zeros, tuple(z.copy() for z in zeros), learning_rate, beta1, beta2, epsilon)


def _layer_names(params):
    return getattr(params, "names", PARAM_NAMES)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise InvalidArgument("gradient bundle does not match parameters")
    for name, p, g in zip(_layer_names(params), arrays, grads):
        if p.shape != g.shape:
            raise InvalidArgument(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericFailure("non-finite gradient", layer=name)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1**t
    corr2 = 1 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(arrays, grads, state.first_moment, state.second_moment):
        dt = p.dtype.type
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        update = (m / dt(corr1)) / (np.sqrt(v / dt(corr2)) + dt(state.epsilon))
        new_params.append(p - dt(state.learning_rate) * update)
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_params), replace(
        state, step_count=t, first_moment=tuple(new_m), second_moment=tuple(new_v)
    )


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise InvalidArgument("labels must be a vector aligned with the logits")
    if n == 0:
        raise InvalidArgument("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidArgument(f"label out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1
    return loss, grad / logits.dtype.type(n)


def wasserstein_losses(d_real, d_fake) -> tuple[float, float]:
    """``(mean(d_fake) - mean(d_real), -mean(d_fake))``."""
    d_real = np.asarray(d_real).ravel()
    d_fake = np.asarray(d_fake).ravel()
    if d_real.size == 0 or d_fake.size == 0:
        raise InvalidArgument("critic outputs must be non-empty")
    fake = float(np.mean(d_fake))
    return fake - float(np.mean(d_real)), -fake


def penalty_at(critic: MlpParams, x_hat, a_g) -> tuple[float, MlpGrads]:
    """``mean((||grad_x D(x_hat, a_g)||_2 - 1)^2)`` and its gradient in the critic weights.

    The critic must have a single linear output. Activation derivatives are
    piecewise constant, so only the explicit weight dependence contributes.
    """
    n_in, _, n_out = critic.dims
    if n_out != 1 or critic.output_activation != "none":
        raise InvalidArgument("gradient penalty needs a critic with one linear output")
    x_hat = np.asarray(x_hat)
    a_g = np.asarray(a_g)
    if x_hat.ndim != 2 or a_g.ndim != 2 or x_hat.shape[0] != a_g.shape[0]:
        raise InvalidArgument("x_hat and a_g must be aligned matrices")
    d = x_hat.shape[1]
    if d + a_g.shape[1] != n_in:
        raise InvalidArgument(f"feature width {d} + condition width {a_g.shape[1]} != critic input {n_in}")
    u = _check_input(critic, np.concatenate([x_hat, a_g], axis=1))
    dt = u.dtype.type
    b = u.shape[0]
    h1 = matmul_t(u, critic.layer1_weights) + critic.layer1_bias
    _, slope = _hidden_act(critic, h1)
    w2 = critic.layer2_weights[0]
    r = slope * w2  # b x hidden
    w1x = critic.layer1_weights[:, :d]
    v = _matmul(r, w1x)  # gradient of D w.r.t. x_hat, b x d
    norm = np.sqrt((v * v).sum(axis=1))
    gap = norm - dt(1)
    penalty = float(np.mean(gap * gap))
    safe = np.where(norm > 0, norm, dt(1))
    q = (dt(2) / dt(b)) * (gap / safe)[:, None] * v
    q = np.where((norm > 0)[:, None], q, dt(0))
    dw1 = np.zeros_like(critic.layer1_weights)
    dw1[:, :d] = _outer_sum(r, q)
    dr = matmul_t(q, w1x)  # b x hidden
    dw2 = (dr * slope).sum(axis=0)[None, :]
    grads = MlpGrads(
        dw1,
        np.zeros_like(critic.layer1_bias),
        dw2.astype(critic.layer2_weights.dtype),
        np.zeros_like(critic.layer2_bias),
    )
    return penalty, grads


def interpolate(x_real, x_fake, eps):
    """Per-row ``eps * x_real + (1 - eps) * x_fake``."""
    eps = np.asarray(eps).reshape(-1, 1).astype(x_real.dtype)
    return eps * x_real + (1 - eps) * x_fake


def gradient_penalty(critic: MlpParams, x_real, x_fake, a_g, rng: RngStream) -> tuple[float, MlpGrads]:
    """WGAN-GP penalty at random interpolants; ``eps ~ U(0,1)`` drawn once per row."""
    x_real = np.asarray(x_real)
    x_fake = np.asarray(x_fake)
    if x_real.shape != x_fake.shape:
        raise InvalidArgument(f"real {x_real.shape} and fake {x_fake.shape} batches differ")
    eps = rng.uniform((x_real.shape[0], 1), dtype=x_real.dtype)
    return penalty_at(critic, interpolate(x_real, x_fake, eps), a_g)
