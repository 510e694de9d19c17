"""Gradient-matching (DLG) inversion against what a client would upload.

Two targets are supported. A softmax classifier head over features
(``FeatureAndLabel``) and the feature critic ``D([x, a_g])``
(``FeatureAndAttribute``). In both cases the attacker can at best recover a
feature vector plus a label or an attribute vector; models here never see
anything but features, so nothing else can come out.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericFailure
from .numerics import LinearParams, MlpParams, adam_init, adam_step, matmul_t, mlp_backward, softmax, softmax_cross_entropy
from .rng import RngStream

MAX_BATCH = 4
FEATURE_AND_LABEL = "FeatureAndLabel"
FEATURE_AND_ATTRIBUTE = "FeatureAndAttribute"


@dataclass
class GradientBundle:
    target_kind: str
    model: MlpParams | LinearParams
    grads: tuple
    batch_size: int
    feature_dim: int


@dataclass
class LeakageReport:
    target_kind: str
    cosines: dict
    residual_history: list
    iterations: int
    estimates: dict = field(repr=False)

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1]

    def record(self) -> dict:
        return {
            "target": self.target_kind,
            "iterations": self.iterations,
            "initial_residual": self.residual_history[0],
            "final_residual": self.final_residual,
            **{f"cosine_{k}": v for k, v in sorted(self.cosines.items())},
        }


class _Dummy:
    """Adam-compatible wrapper around the dummy input matrix."""

    names = ("dummy",)

    def __init__(self, x):
        self.x = x

    def arrays(self):
        return (self.x,)

    def with_arrays(self, arrays):
        return _Dummy(arrays[0])


def _check_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidArgument("batch must be a non-empty matrix")
    if x.shape[0] > MAX_BATCH:
        raise InvalidArgument(f"gradient capture limited to {MAX_BATCH} rows, got {x.shape[0]}")
    return x


def capture_gradients(model, batch) -> GradientBundle:
    """Gradients a client computes on ``batch`` in one local step.

    For a critic (:class:`MlpParams`) ``batch`` is ``(features, attributes)``
    and the loss is the real-data critic term ``-mean(D([x, a_g]))``. For a
    classifier head (:class:`LinearParams`) ``batch`` is ``(features, labels)``
    and the loss is softmax cross-entropy.
    """
    x, side = batch
    x = _check_batch(x)
    b = x.shape[0]
    if isinstance(model, MlpParams):
        side = np.asarray(side, dtype=np.float64)
        if side.shape[0] != b or x.shape[1] + side.shape[1] != model.dims[0] or model.dims[2] != 1:
            raise InvalidArgument("batch does not fit the critic")
        critic = model.astype(np.float64)
        grads, _ = mlp_backward(critic, np.concatenate([x, side], axis=1), np.full((b, 1), -1.0 / b))
        return GradientBundle(FEATURE_AND_ATTRIBUTE, critic, tuple(grads), b, x.shape[1])
    if isinstance(model, LinearParams):
        head = LinearParams(model.weights.astype(np.float64), model.bias.astype(np.float64))
        if x.shape[1] != head.weights.shape[1]:
            raise InvalidArgument("batch does not fit the classifier")
        _, dlogits = softmax_cross_entropy(head.logits(x), np.asarray(side))
        grads = (np.einsum("bc,bi->ci", dlogits, x, optimize=False), dlogits.sum(axis=0))
        return GradientBundle(FEATURE_AND_LABEL, head, grads, b, x.shape[1])
    raise InvalidArgument(f"cannot capture gradients for {type(model).__name__}")


def _critic_residual(critic: MlpParams, observed, u):
    """Squared gradient mismatch for dummy critic inputs ``u`` and its gradient in ``u``."""
    b = u.shape[0]
    w1, b1, w2 = critic.layer1_weights, critic.layer1_bias, critic.layer2_weights[0]
    h = matmul_t(u, w1) + b1
    slope = np.where(h > 0, 1.0, critic.leaky_slope)
    act = h * slope
    r = slope * w2  # dD/dh per row
    g_w1 = -np.einsum("bj,bk->jk", r, u) / b
    g_b1 = -r.sum(axis=0) / b
    g_w2 = -act.sum(axis=0) / b
    g_b2 = np.array([-1.0])
    e_w1 = g_w1 - observed[0]
    e_b1 = g_b1 - observed[1]
    e_w2 = g_w2 - observed[2][0]
    e_b2 = g_b2 - observed[3]
    residual = float((e_w1**2).sum() + (e_b1**2).sum() + (e_w2**2).sum() + (e_b2**2).sum())
    # slope is piecewise constant in u, so only the W1 and W2 terms carry gradient
    du = -(2.0 / b) * np.einsum("jk,bj->bk", e_w1, r)
    du += np.einsum("bj,jk->bk", -(2.0 / b) * e_w2[None, :] * slope, w1)
    return residual, du


def _head_residual(head: LinearParams, observed, x, onehot):
    b = x.shape[0]
    p = softmax(head.logits(x))
    e = (p - onehot) / b
    e_w = np.einsum("bc,bi->ci", e, x) - observed[0]
    e_b = e.sum(axis=0) - observed[1]
    residual = float((e_w**2).sum() + (e_b**2).sum())
    # d residual / d e_bc, then through the softmax Jacobian to the logits
    de = (2.0 / b) * (np.einsum("ci,bi->bc", e_w, x) + e_b[None, :])
    dz = p * (de - (de * p).sum(axis=1, keepdims=True))
    dx = (2.0 / b) * np.einsum("ci,bc->bi", e_w, p - onehot) + np.einsum("bc,ci->bi", dz, head.weights)
    return residual, dx


def _cosine(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0)) if denom > 0 else 0.0


def infer_labels(bundle: GradientBundle) -> np.ndarray:
    """Labels read off the bias gradient: true classes are its negative entries."""
    g_b = bundle.grads[1]
    order = np.argsort(g_b, kind="stable")
    return np.sort(order[: bundle.batch_size])


def dlg_invert(bundle: GradientBundle, steps: int, rng: RngStream, truth=None, lr: float = 0.05, log_every: int = 50) -> LeakageReport:
    """Recover inputs by matching gradients of dummy inputs to the observed ones.

    The residual history records the best value seen so far at every
    ``log_every`` iterations (plus the start and end), and the returned
    estimates are the best dummy inputs found. ``truth``, if given, is the
    ``(features, attributes_or_labels)`` batch used to score the recovery.
    """
    if steps < 0:
        raise InvalidArgument("steps must be non-negative")
    b, d = bundle.batch_size, bundle.feature_dim
    if bundle.target_kind == FEATURE_AND_ATTRIBUTE:
        width = bundle.model.dims[0]
        labels = None

        def objective(u):
            return _critic_residual(bundle.model, bundle.grads, u)
    else:
        width = d
        labels = infer_labels(bundle)
        onehot = np.eye(bundle.model.weights.shape[0])[labels]

        def objective(u):
            return _head_residual(bundle.model, bundle.grads, u, onehot)

    dummy = _Dummy(rng.normal((b, width), dtype=np.float64))
    state = adam_init(dummy, lr, beta1=0.9, beta2=0.999)
    residual, grad = objective(dummy.x)
    best, best_x = residual, dummy.x.copy()
    history = [best]
    for it in range(1, steps + 1):
        if not np.isfinite(residual) or not np.all(np.isfinite(grad)):
            raise NumericFailure("non-finite gradient-matching residual", layer="dummy")
        dummy, state = adam_step(dummy, (grad,), state)
        residual, grad = objective(dummy.x)
        if residual < best:
            best, best_x = residual, dummy.x.copy()
        if it % log_every == 0 or it == steps:
            history.append(best)
    if not np.isfinite(best):
        raise NumericFailure("non-finite gradient-matching residual", layer="dummy")

    estimates = {"feature": best_x[:, :d]}
    if bundle.target_kind == FEATURE_AND_ATTRIBUTE:
        estimates["attribute"] = best_x[:, d:]
    else:
        estimates["label"] = labels
    cosines = {}
    if truth is not None:
        true_x, true_side = truth
        if bundle.target_kind == FEATURE_AND_ATTRIBUTE:
            cosines["feature"] = _cosine(estimates["feature"], true_x)
            cosines["attribute"] = _cosine(estimates["attribute"], true_side)
        else:
            # estimates come out in sorted-label order
            order = np.argsort(np.asarray(true_side), kind="stable")
            cosines["feature"] = _cosine(estimates["feature"], np.asarray(true_x)[order])
            cosines["label"] = float(np.mean(np.asarray(true_side)[order] == labels))
    return LeakageReport(bundle.target_kind, cosines, history, steps, estimates)
