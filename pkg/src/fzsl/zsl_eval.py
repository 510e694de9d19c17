"""Unseen-class evaluation: synthesize pseudo-features, fit a softmax classifier, score it.

The classifier only ever sees a :class:`PseudoSet`; real unseen rows are
read by :func:`per_class_top1` alone.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import InvalidArgument
from .gan import generate
from .numerics import LinearParams, MlpParams, adam_init, adam_step, linear_init, softmax_cross_entropy
from .rng import RngStream
from .semantics import EmbeddingTable, SkaConfig, augment_batch


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class PseudoSet:
    features: np.ndarray
    labels: np.ndarray
    classes: tuple
    provenance: dict = field(default_factory=dict)

    def digest(self) -> str:
        return array_digest(self.features, self.labels)


@dataclass
class SoftmaxClassifier:
    params: LinearParams
    classes: tuple

    def predict(self, features) -> np.ndarray:
        return np.asarray(self.classes)[self.params.predict(np.asarray(features, np.float32))]


@dataclass
class EvalReport:
    top1: float
    per_class: tuple
    classes: tuple
    pseudo_digest: str

    def __iter__(self):
        # unpacks as (top1, digest)
        return iter((self.top1, self.pseudo_digest))


def condition_width(dataset: Dataset, ska: SkaConfig, embeddings: EmbeddingTable | None) -> int:
    if ska.enabled:
        if embeddings is None:
            raise InvalidArgument("augmentation enabled but no embedding table supplied")
        return embeddings.embed_dim + dataset.attribute_dim
    return dataset.attribute_dim


def synthesize_features(
    generator: MlpParams,
    dataset: Dataset,
    embeddings: EmbeddingTable | None,
    M: int,
    ska: SkaConfig,
    rng: RngStream,
) -> PseudoSet:
    """``M`` generated rows per unseen class, each with fresh generator noise.

    Every class draws from its own child stream, so classes can be produced
    in any order.
    """
    if M <= 0:
        raise InvalidArgument("M must be positive")
    cond_dim = condition_width(dataset, ska, embeddings)
    noise_dim = generator.dims[0] - cond_dim
    if noise_dim <= 0:
        raise InvalidArgument(f"generator input {generator.dims[0]} too narrow for condition width {cond_dim}")
    classes = dataset.unseen_classes
    if ska.enabled:
        names = [dataset.class_names[c] for c in classes]
        missing = [n for n in names if n not in embeddings]
        if missing:
            raise InvalidArgument(f"no embedding for unseen classes {missing}")
    feats = []
    for c in classes:
        r = rng.child("class", c)
        z = r.normal((M, noise_dim))
        a_g = np.repeat(dataset.attributes[c][None], M, axis=0)
        if ska.enabled:
            a_c = embeddings.entries[dataset.class_names[c]][None]
            if ska.resample_per_draw:
                cond = augment_batch(np.repeat(a_c, M, axis=0), a_g, ska.gamma, r)
            else:
                one = augment_batch(a_c, a_g[:1], ska.gamma, r)
                cond = np.repeat(one, M, axis=0)
        else:
            cond = a_g
        feats.append(generate(generator, z, cond))
    return PseudoSet(
        np.concatenate(feats).astype(np.float32),
        np.repeat(np.asarray(classes, dtype=np.int64), M),
        tuple(classes),
        {"ska": ska.enabled, "gamma": ska.gamma, "M": M, "stream": repr(rng)},
    )


def train_softmax_classifier(
    pseudo: PseudoSet, epochs: int = 100, lr: float = 1e-3, rng: RngStream | None = None, max_batch: int = 10_000
) -> SoftmaxClassifier:
    """Linear softmax classifier fitted with Adam on pseudo-features only.

    Full batch up to ``max_batch`` rows; larger sets are shuffled into
    minibatches with ``rng``.
    """
    if pseudo.features.shape[0] == 0:
        raise InvalidArgument("empty pseudo set")
    classes = tuple(pseudo.classes)
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[int(c)] for c in pseudo.labels], dtype=np.int64)
    x = pseudo.features
    params = linear_init(x.shape[1], len(classes))
    state = adam_init(params, lr, beta1=0.9, beta2=0.999)
    n = x.shape[0]
    for _ in range(epochs):
        if n <= max_batch:
            batches = [slice(None)]
        else:
            if rng is None:
                raise InvalidArgument("minibatch training needs an rng")
            order = rng.permutation(n)
            batches = [order[i:i + max_batch] for i in range(0, n, max_batch)]
        for idx in batches:
            xb, yb = x[idx], y[idx]
            _, dlogits = softmax_cross_entropy(params.logits(xb), yb)
            grads = (
                np.einsum("bc,bi->ci", dlogits, xb, optimize=False),
                dlogits.sum(axis=0),
            )
            params, state = adam_step(params, grads, state)
    return SoftmaxClassifier(params, classes)


def per_class_accuracy(classifier, features, labels, classes) -> np.ndarray:
    """Top-1 accuracy of each class in ``classes``, in that order."""
    labels = np.asarray(labels)
    classes = tuple(int(c) for c in classes)
    stray = set(np.unique(labels).tolist()) - set(classes)
    if stray:
        raise InvalidArgument(f"test labels {sorted(stray)} outside the evaluated class set")
    pred = classifier.predict(features)
    accs = []
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise InvalidArgument(f"class {c} has no test rows; per-class accuracy undefined")
        accs.append(np.count_nonzero(pred[mask] == c) / np.count_nonzero(mask))
    return np.array(accs)


def per_class_top1(classifier, features, labels, classes) -> float:
    """Unweighted mean over classes of within-class top-1 accuracy."""
    return float(np.mean(per_class_accuracy(classifier, features, labels, classes)))


def evaluate_unseen(generator, dataset: Dataset, embeddings, config, rng: RngStream) -> EvalReport:
    """Synthesize, train on pseudo-features, then score on the real unseen rows."""
    test = dataset if dataset.view == "test" else dataset.subset("test")
    if test.features.shape[0] == 0:
        raise InvalidArgument("dataset has no unseen rows to evaluate on")
    ska = config.ska_config
    pseudo = synthesize_features(
        generator, dataset, embeddings if ska.enabled else None, config.synth_per_class, ska, rng.child("synth")
    )
    clf = train_softmax_classifier(pseudo, config.eval_epochs, config.eval_learning_rate, rng.child("classifier"))
    accs = per_class_accuracy(clf, test.features, test.labels, test.unseen_classes)
    return EvalReport(float(np.mean(accs)), tuple(float(a) for a in accs), tuple(test.unseen_classes), pseudo.digest())
