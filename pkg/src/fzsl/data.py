"""Datasets, text-file ingestion, synthetic corpora and class-disjoint partitioning."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, LoadError
from .rng import RngStream

VIEWS = ("all", "train", "test")


@dataclass
class Dataset:
    """Feature rows with labels plus the per-class attribute table.

    ``view`` records which rows the dataset is allowed to hold: ``"train"``
    admits only seen labels, ``"test"`` only unseen ones.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: list
    attributes: np.ndarray
    seen_classes: tuple
    unseen_classes: tuple
    view: str = "all"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.attributes = np.asarray(self.attributes, dtype=np.float32)
        self.seen_classes = tuple(int(c) for c in self.seen_classes)
        self.unseen_classes = tuple(int(c) for c in self.unseen_classes)
        self.class_names = list(self.class_names)
        n_classes = len(self.class_names)
        if self.view not in VIEWS:
            raise InvalidArgument(f"unknown view {self.view!r}")
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InvalidArgument("features must be n x d with one label per row")
        if self.attributes.shape[0] != n_classes:
            raise InvalidArgument("attribute table needs one row per class")
        if not np.all(np.isfinite(self.attributes)):
            raise InvalidArgument("attribute rows must be finite")
        seen, unseen = set(self.seen_classes), set(self.unseen_classes)
        if seen & unseen:
            raise InvalidArgument(f"classes in both splits: {sorted(seen & unseen)}")
        for c in seen | unseen:
            if not 0 <= c < n_classes:
                raise InvalidArgument(f"split class {c} out of range")
        allowed = {"all": seen | unseen, "train": seen, "test": unseen}[self.view]
        bad = set(np.unique(self.labels).tolist()) - allowed
        if bad:
            raise InvalidArgument(f"labels {sorted(bad)} not allowed in the {self.view} view")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attribute_dim(self) -> int:
        return self.attributes.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def rows_of(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, list(classes)))

    def subset(self, view: str) -> "Dataset":
        """Rows restricted to a view (``train`` keeps seen, ``test`` keeps unseen)."""
        classes = {"all": self.seen_classes + self.unseen_classes, "train": self.seen_classes, "test": self.unseen_classes}[view]
        rows = self.rows_of(classes)
        return Dataset(
            self.features[rows], self.labels[rows], self.class_names, self.attributes,
            self.seen_classes, self.unseen_classes, view,
        )


@dataclass(frozen=True)
class ClientPartition:
    client_id: int
    class_subset: tuple
    row_indices: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class SyntheticSpec:
    seen_count: int = 20
    unseen_count: int = 5
    attr_dim: int = 16
    feature_dim: int = 32
    rows_per_class: int = 50
    noise_scale: float = 0.05

    def validate(self):
        for name in ("seen_count", "unseen_count", "attr_dim", "feature_dim", "rows_per_class"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.noise_scale < 0:
            raise InvalidArgument("noise_scale must be non-negative")


# ---------------------------------------------------------------- file formats

def _fmt(values) -> str:
    # numpy float32 str() is the shortest repr that round-trips
    return ",".join(str(v) for v in np.asarray(values, dtype=np.float32))


def _parse_header(path, line, pattern, extra_keys=("digest",)):
    m = re.fullmatch(pattern + r"((?: [a-z_]+=\S+)*)", line.rstrip("\r\n"))
    if not m:
        raise LoadError(path, 1, f"bad header {line.strip()!r}")
    extras = {}
    for tok in m.group(m.lastindex).split():
        key, _, value = tok.partition("=")
        if key not in extra_keys:
            raise LoadError(path, 1, f"unknown header field {key!r}")
        extras[key] = value
    return m, extras


def _read_lines(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(path, 0, f"cannot read: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise LoadError(path, 1, "empty file")
    return path, lines


def _parse_floats(path, lineno, fields, width):
    if len(fields) != width:
        raise LoadError(path, lineno, f"expected {width} values, got {len(fields)}")
    try:
        values = np.array([float(f) for f in fields], dtype=np.float32)
    except ValueError as exc:
        raise LoadError(path, lineno, f"malformed number: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise LoadError(path, lineno, "non-finite value")
    return values


def _check_body_length(path, lines, expected):
    if len(lines) - 1 < expected:
        raise LoadError(path, len(lines) + 1, f"expected {expected} rows, file ends early")
    if len(lines) - 1 > expected:
        raise LoadError(path, expected + 2, "trailing content after declared rows")


def read_features(path):
    """Parse a features file into ``(features, labels)``."""
    path, lines = _read_lines(path)
    m, _ = _parse_header(path, lines[0], r"fzsl\.features v1 n=(\d+) d=(\d+)")
    n, d = int(m.group(1)), int(m.group(2))
    if d <= 0:
        raise LoadError(path, 1, "feature width must be positive")
    _check_body_length(path, lines, n)
    features = np.empty((n, d), np.float32)
    labels = np.empty(n, np.int64)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        head, _, rest = line.partition(",")
        if not re.fullmatch(r"\d+", head):
            raise LoadError(path, lineno, f"malformed label {head!r}")
        labels[i] = int(head)
        features[i] = _parse_floats(path, lineno, rest.split(","), d)
    return features, labels


def read_attributes(path):
    """Parse an attributes file into ``(class_names, attributes)``."""
    path, lines = _read_lines(path)
    m, _ = _parse_header(path, lines[0], r"fzsl\.attrs v1 c=(\d+) m=(\d+)")
    c, width = int(m.group(1)), int(m.group(2))
    if width <= 0:
        raise LoadError(path, 1, "attribute width must be positive")
    _check_body_length(path, lines, c)
    names, rows = [], []
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        fields = line.split(",")
        name = fields[0].strip()
        if not name:
            raise LoadError(path, lineno, "empty class name")
        if name in names:
            raise LoadError(path, lineno, f"duplicate class name {name!r}")
        names.append(name)
        rows.append(_parse_floats(path, lineno, fields[1:], width))
    return names, np.stack(rows) if rows else np.empty((0, width), np.float32)


def read_split(path, n_classes=None):
    path, lines = _read_lines(path)
    _parse_header(path, lines[0], r"fzsl\.split v1")
    if len(lines) != 3:
        raise LoadError(path, min(len(lines), 3) + 1 if len(lines) < 3 else 4,
                        "expected exactly a seen: and an unseen: line")
    out = {}
    for lineno, key in ((2, "seen"), (3, "unseen")):
        line = lines[lineno - 1]
        if not line.startswith(key + ":"):
            raise LoadError(path, lineno, f"expected '{key}:' line")
        body = line[len(key) + 1:].strip()
        items = body.split(",") if body else []
        classes = []
        for item in items:
            if not re.fullmatch(r"\d+", item.strip()):
                raise LoadError(path, lineno, f"malformed class index {item!r}")
            c = int(item)
            if n_classes is not None and c >= n_classes:
                raise LoadError(path, lineno, f"class {c} out of range for {n_classes} classes")
            if c in classes:
                raise LoadError(path, lineno, f"class {c} listed twice")
            classes.append(c)
        out[key] = tuple(classes)
    both = set(out["seen"]) & set(out["unseen"])
    if both:
        raise LoadError(path, 3, f"classes in both splits: {sorted(both)}")
    return out["seen"], out["unseen"]


def load_dataset(features_path, attributes_path, split_path, view="all") -> Dataset:
    """Load and validate a dataset from the three text files."""
    if view not in VIEWS:
        raise InvalidArgument(f"unknown view {view!r}")
    features, labels = read_features(features_path)
    names, attributes = read_attributes(attributes_path)
    seen, unseen = read_split(split_path, len(names))
    allowed = {"all": set(seen) | set(unseen), "train": set(seen), "test": set(unseen)}[view]
    for i, y in enumerate(labels):
        if y >= len(names):
            raise LoadError(features_path, i + 2, f"label {y} out of range for {len(names)} classes")
        if y not in allowed:
            raise LoadError(features_path, i + 2, f"label {y} not permitted in the {view} view")
    return Dataset(features, labels, names, attributes, seen, unseen, view)


def write_features(path, features, labels, digest=None):
    features = np.asarray(features, dtype=np.float32)
    header = f"fzsl.features v1 n={features.shape[0]} d={features.shape[1]}"
    if digest:
        header += f" digest={digest}"
    lines = [header] + [f"{int(y)},{_fmt(row)}" for y, row in zip(labels, features)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_attributes(path, class_names, attributes, digest=None):
    attributes = np.asarray(attributes, dtype=np.float32)
    header = f"fzsl.attrs v1 c={attributes.shape[0]} m={attributes.shape[1]}"
    if digest:
        header += f" digest={digest}"
    lines = [header] + [f"{name},{_fmt(row)}" for name, row in zip(class_names, attributes)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_split(path, seen, unseen, digest=None):
    header = "fzsl.split v1" + (f" digest={digest}" if digest else "")
    body = [header, "seen:" + ",".join(map(str, seen)), "unseen:" + ",".join(map(str, unseen))]
    Path(path).write_text("\n".join(body) + "\n", encoding="utf-8")


def save_dataset(dataset: Dataset, features_path, attributes_path, split_path, digest=None):
    write_features(features_path, dataset.features, dataset.labels, digest)
    write_attributes(attributes_path, dataset.class_names, dataset.attributes, digest)
    write_split(split_path, dataset.seen_classes, dataset.unseen_classes, digest)


# ------------------------------------------------------------------ synthetic

def make_synthetic(spec: SyntheticSpec, rng: RngStream, return_projection=False):
    """Features that are a fixed linear image of the class attributes plus noise.

    Attributes are uniform on [0, 1) and the projection has non-negative
    entries, so class means are non-negative like pooled CNN activations.
    ``noise_scale`` is the noise standard deviation. Unseen classes are picked
    at random from the class pool.
    """
    spec.validate()
    n_classes = spec.seen_count + spec.unseen_count
    m, d = spec.attr_dim, spec.feature_dim
    projection = np.abs(rng.normal((d, m), dtype=np.float64)) / np.sqrt(m)
    attributes = rng.uniform((n_classes, m), dtype=np.float64)
    order = rng.permutation(n_classes)
    seen = tuple(sorted(int(c) for c in order[: spec.seen_count]))
    unseen = tuple(sorted(int(c) for c in order[spec.seen_count:]))
    means = attributes @ projection.T
    labels = np.repeat(np.arange(n_classes), spec.rows_per_class)
    noise = rng.normal((labels.size, d), dtype=np.float64) * spec.noise_scale
    features = means[labels] + noise
    dataset = Dataset(
        features.astype(np.float32),
        labels,
        [f"class{c:03d}" for c in range(n_classes)],
        attributes.astype(np.float32),
        seen,
        unseen,
    )
    if return_projection:
        return dataset, projection
    return dataset


# --------------------------------------------------------------- partitioning

def _build_partitions(dataset, subsets):
    parts = []
    for cid, classes in enumerate(subsets):
        classes = tuple(sorted(int(c) for c in classes))
        parts.append(ClientPartition(cid, classes, dataset.rows_of(classes)))
    return parts


def partition_even(dataset: Dataset, num_clients: int, rng: RngStream) -> list[ClientPartition]:
    """Shuffle the seen classes and deal them round-robin to ``num_clients`` clients."""
    seen = np.array(dataset.seen_classes)
    if num_clients <= 0 or num_clients > seen.size:
        raise InvalidArgument(f"cannot split {seen.size} seen classes across {num_clients} clients")
    shuffled = seen[rng.permutation(seen.size)]
    return _build_partitions(dataset, [shuffled[i::num_clients] for i in range(num_clients)])


def uneven_floor(num_seen: int) -> int:
    return math.ceil(num_seen / 8)


def partition_uneven(dataset: Dataset, num_clients: int, rng: RngStream) -> list[ClientPartition]:
    """Random class split where each client gets at least ``ceil(|seen| / 8)`` classes.

    Part sizes are a composition drawn uniformly among those meeting the floor:
    shift by ``floor - 1`` and cut a uniform positive composition with
    ``num_clients - 1`` random bars.
    """
    seen = np.array(dataset.seen_classes)
    floor = uneven_floor(seen.size)
    if num_clients <= 0 or num_clients * floor > seen.size:
        raise InvalidArgument(
            f"{num_clients} clients with at least {floor} classes each exceed {seen.size} seen classes"
        )
    free = seen.size - num_clients * (floor - 1)
    bars = np.sort(rng.choice(free - 1, num_clients - 1, replace=False) + 1) if num_clients > 1 else np.array([], int)
    sizes = np.diff(np.concatenate([[0], bars, [free]])) + floor - 1
    shuffled = seen[rng.permutation(seen.size)]
    cuts = np.cumsum(sizes)[:-1]
    return _build_partitions(dataset, np.split(shuffled, cuts))


def label_counts(partition: ClientPartition, dataset: Dataset) -> np.ndarray:
    """Client label counts over the seen classes in canonical order."""
    seen = np.array(dataset.seen_classes)
    labels = dataset.labels[partition.row_indices]
    counts = np.array([np.count_nonzero(labels == c) for c in seen], dtype=np.int64)
    if counts.sum() == 0:
        # no rows: treat the declared classes as equally weighted
        counts = np.isin(seen, partition.class_subset).astype(np.int64)
    return counts


def ks_statistic(p_counts, q_counts) -> float:
    """Two-sample KS gap between two discrete label distributions given as counts.

    Class labels have no natural order, so the classes are laid out with
    those where ``p`` outweighs ``q`` first; the resulting max CDF gap is the
    largest attainable over all orderings and does not depend on labelling.
    Integer arithmetic keeps the disjoint case at exactly 1.0.
    """
    p = np.asarray(p_counts, dtype=np.int64)
    q = np.asarray(q_counts, dtype=np.int64)
    n_p, n_q = int(p.sum()), int(q.sum())
    if n_p == 0 or n_q == 0:
        raise InvalidArgument("empty label distribution")
    diff = p * n_q - q * n_p
    order = np.argsort(-diff, kind="stable")
    gap = int(np.max(np.abs(np.cumsum(diff[order]))))
    return gap / (n_p * n_q)


def partition_skew(partitions, dataset: Dataset) -> float:
    """Mean pairwise KS statistic of client label distributions."""
    if len(partitions) < 2:
        raise InvalidArgument("label skew needs at least two partitions")
    counts = [label_counts(p, dataset) for p in partitions]
    stats = [ks_statistic(a, b) for a, b in combinations(counts, 2)]
    return math.fsum(stats) / len(stats)
