"""Checkpoint files: a text metadata file plus a raw float32 blob.

Blob layout (little-endian float32, C order), for each client in id order:
generator layer1 W, layer1 b, layer2 W, layer2 b, then discriminator in the
same order; then the server generator; then the server discriminator when
aggregation is holistic.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FedConfig, config_from_pairs, parse_pairs
from .errors import DigestMismatch, LoadError
from .gan import GanModel
from .numerics import MlpParams

MAGIC = "fzsl.ckpt v1"


@dataclass
class Checkpoint:
    config: FedConfig
    round: int
    clients: list
    global_generator: MlpParams
    global_discriminator: MlpParams | None = None

    @property
    def noise_dim(self) -> int:
        return self.clients[0].noise_dim if self.clients else 0


def _shapes(dims):
    n_in, hidden, n_out = dims
    return [(hidden, n_in), (hidden,), (n_out, hidden), (n_out,)]


def _blob(ckpt: Checkpoint) -> bytes:
    arrays = []
    for model in ckpt.clients:
        arrays += model.generator.arrays() + model.discriminator.arrays()
    arrays += ckpt.global_generator.arrays()
    if ckpt.global_discriminator is not None:
        arrays += ckpt.global_discriminator.arrays()
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, ckpt: Checkpoint, extra: dict | None = None) -> Path:
    """Write ``<path>`` (metadata) and ``<path>.bin``; returns the metadata path.

    Both files go through a temp file and rename, so a failed write leaves
    any previous checkpoint at the same path intact.
    """
    path = Path(path)
    blob = _blob(ckpt)
    blob_path = path.with_name(path.name + ".bin")
    g = ckpt.global_generator
    d = ckpt.clients[0].discriminator if ckpt.clients else ckpt.global_discriminator
    lines = [
        f"{MAGIC} config_digest={ckpt.config.digest()}",
        f"round = {ckpt.round}",
        f"num_clients = {len(ckpt.clients)}",
        f"noise_dim = {ckpt.noise_dim}",
        f"generator_dims = {','.join(map(str, g.dims))}",
        f"discriminator_dims = {','.join(map(str, d.dims)) if d is not None else ''}",
        f"leaky_slope = {g.leaky_slope!r}",
        f"global_discriminator = {'on' if ckpt.global_discriminator is not None else 'off'}",
        f"blob = {blob_path.name}",
        f"blob_sha256 = {hashlib.sha256(blob).hexdigest()}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"extra.{key} = {value}")
    lines.append("[config]")
    meta = "\n".join(lines) + "\n" + ckpt.config.to_text()
    _atomic_write(blob_path, blob)
    _atomic_write(path, meta.encode("utf-8"))
    return path


def read_meta(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines[0].startswith(MAGIC + " config_digest="):
        raise LoadError(path, 1, "not a checkpoint metadata file")
    digest = lines[0].split("=", 1)[1].strip()
    meta, cfg_lines = {}, []
    in_config = False
    for lineno, line in enumerate(lines[1:], start=2):
        if line.strip() == "[config]":
            in_config = True
            continue
        if in_config:
            cfg_lines.append(line)
            continue
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise LoadError(path, lineno, f"expected 'key = value', got {line!r}")
        meta[key.strip()] = value.strip()
    config = config_from_pairs(parse_pairs("\n".join(cfg_lines), path), path)
    if config.digest() != digest:
        raise DigestMismatch(f"{path}: config echo does not match recorded digest {digest}")
    return meta, config


def load_checkpoint(path) -> tuple[Checkpoint, dict]:
    """Read a checkpoint back, refusing it if the blob digest does not match."""
    path = Path(path)
    meta, config = read_meta(path)
    blob_path = path.with_name(meta["blob"])
    blob = blob_path.read_bytes()
    actual = hashlib.sha256(blob).hexdigest()
    if actual != meta["blob_sha256"]:
        raise DigestMismatch(
            f"{blob_path}: sha256 {actual[:16]}... does not match {meta['blob_sha256'][:16]}... recorded in {path.name}; "
            "the parameter blob was modified or belongs to another checkpoint"
        )
    g_dims = tuple(int(x) for x in meta["generator_dims"].split(","))
    d_dims = tuple(int(x) for x in meta["discriminator_dims"].split(","))
    slope = float(meta["leaky_slope"])
    values = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    pos = 0

    def take(dims, out_act):
        nonlocal pos
        arrays = []
        for shape in _shapes(dims):
            size = int(np.prod(shape))
            if pos + size > values.size:
                raise DigestMismatch(f"{blob_path}: blob shorter than the declared architecture")
            arrays.append(values[pos:pos + size].reshape(shape).copy())
            pos += size
        return MlpParams(*arrays, leaky_slope=slope, output_activation=out_act)

    noise_dim = int(meta["noise_dim"])
    clients = []
    for _ in range(int(meta["num_clients"])):
        generator = take(g_dims, "relu")
        clients.append(GanModel(generator, take(d_dims, "none"), noise_dim))
    global_g = take(g_dims, "relu")
    global_d = take(d_dims, "none") if meta["global_discriminator"] == "on" else None
    if pos != values.size:
        raise DigestMismatch(f"{blob_path}: blob longer than the declared architecture")
    extra = {k[len("extra."):]: v for k, v in meta.items() if k.startswith("extra.")}
    return Checkpoint(config, int(meta["round"]), clients, global_g, global_d), extra
