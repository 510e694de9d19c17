"""Class-name text embeddings and semantic knowledge augmentation.

The augmented condition is ``[a_c + z_c, a_g]``: a noisy class-name
embedding followed by the untouched ground-truth attribute vector. ``gamma``
is the standard deviation of ``z_c``.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import _fmt, _parse_floats, _read_lines
from .errors import InvalidArgument, LoadError
from .rng import RngStream


@dataclass
class EmbeddingTable:
    entries: dict
    embed_dim: int
    source_tag: str = "unknown"

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise InvalidArgument("embedding width must be positive")
        for name, vec in self.entries.items():
            vec = np.asarray(vec, dtype=np.float32)
            if vec.shape != (self.embed_dim,):
                raise InvalidArgument(f"embedding for {name!r} has shape {vec.shape}, expected ({self.embed_dim},)")
            if not np.all(np.isfinite(vec)):
                raise InvalidArgument(f"non-finite embedding for {name!r}")
            self.entries[name] = vec

    def __contains__(self, name):
        return name in self.entries

    def lookup(self, names) -> np.ndarray:
        missing = [n for n in names if n not in self.entries]
        if missing:
            raise InvalidArgument(f"no embedding for classes {missing}")
        return np.stack([self.entries[n] for n in names])


@dataclass(frozen=True)
class SkaConfig:
    enabled: bool = True
    gamma: float = 0.1
    resample_per_draw: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidArgument("gamma must be non-negative")


def load_embedding_table(path) -> EmbeddingTable:
    path, lines = _read_lines(path)
    m = re.fullmatch(r"fzsl\.embed v1 c=(\d+) d=(\d+) src=(\S+)(?: digest=\S+)?", lines[0].rstrip("\r"))
    if not m:
        raise LoadError(path, 1, f"bad header {lines[0].strip()!r}")
    c, width, tag = int(m.group(1)), int(m.group(2)), m.group(3)
    if width <= 0:
        raise LoadError(path, 1, "embedding width must be positive")
    if len(lines) - 1 != c:
        raise LoadError(path, min(len(lines), c + 1) + 1, f"expected {c} rows, found {len(lines) - 1}")
    entries = {}
    for i, line in enumerate(lines[1:]):
        fields = line.split(",")
        name = fields[0].strip()
        if not name:
            raise LoadError(path, i + 2, "empty class name")
        if name in entries:
            raise LoadError(path, i + 2, f"duplicate class name {name!r}")
        entries[name] = _parse_floats(path, i + 2, fields[1:], width)
    return EmbeddingTable(entries, width, tag)


def write_embedding_table(path, table: EmbeddingTable, digest=None):
    header = f"fzsl.embed v1 c={len(table.entries)} d={table.embed_dim} src={table.source_tag}"
    if digest:
        header += f" digest={digest}"
    lines = [header] + [f"{name},{_fmt(vec)}" for name, vec in table.entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def pseudo_embedding(class_name: str, embed_dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector standing in for an encoder's sentence embedding."""
    if not class_name:
        raise InvalidArgument("class name must be non-empty")
    if embed_dim <= 0:
        raise InvalidArgument("embedding width must be positive")
    digest = hashlib.sha256(f"{seed}\x00{class_name}".encode("utf-8")).digest()
    gen = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = gen.standard_normal(embed_dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


def pseudo_table(class_names, embed_dim: int, seed: int = 0) -> EmbeddingTable:
    return EmbeddingTable(
        {name: pseudo_embedding(name, embed_dim, seed) for name in class_names},
        embed_dim,
        "pseudo",
    )


def augment_batch(text_rows, attr_rows, gamma: float, rng: RngStream) -> np.ndarray:
    """Row-wise ``[a_c + z_c, a_g]`` with ``z_c ~ N(0, gamma^2 I)`` drawn per row.

    With ``gamma == 0`` nothing is drawn and the result is the plain concatenation.
    """
    text_rows = np.asarray(text_rows, dtype=np.float32)
    attr_rows = np.asarray(attr_rows, dtype=np.float32)
    if text_rows.ndim != 2 or attr_rows.ndim != 2 or text_rows.shape[0] != attr_rows.shape[0]:
        raise InvalidArgument("text and attribute rows must be aligned matrices")
    if gamma > 0:
        text_rows = text_rows + rng.normal(text_rows.shape, scale=gamma)
    return np.concatenate([text_rows, attr_rows], axis=1)


def augment_attribute(a_c, a_g, ska: SkaConfig, rng: RngStream, embed_dim=None, attr_dim=None) -> np.ndarray:
    """Augmented condition for one class; optional widths are checked when given."""
    if not ska.enabled:
        raise InvalidArgument("augmentation requested with SKA disabled")
    a_c = np.asarray(a_c, dtype=np.float32).ravel()
    a_g = np.asarray(a_g, dtype=np.float32).ravel()
    if embed_dim is not None and a_c.size != embed_dim:
        raise InvalidArgument(f"text embedding width {a_c.size} != table width {embed_dim}")
    if attr_dim is not None and a_g.size != attr_dim:
        raise InvalidArgument(f"attribute width {a_g.size} != dataset width {attr_dim}")
    return augment_batch(a_c[None], a_g[None], ska.gamma, rng)[0]
