"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import InvalidArgument, LoadError
from .semantics import SkaConfig

MODES = ("holistic", "generator_only")
PARTITIONS = ("even", "uneven")
KEY_ALIASES = {"mode": "aggregation_mode", "ska_enabled": "ska", "M": "synth_per_class"}


@dataclass(frozen=True)
class FedConfig:
    """Federation, GAN, augmentation and evaluation settings.

    Defaults follow the published setup where one exists (N=4, S=1, E=1,
    T=100, batch 64, gamma 0.1, generator-only aggregation with augmentation).
    ``noise_dim = 0`` means "use the attribute width".
    """

    num_clients: int = 4
    client_fraction: float = 1.0
    local_epochs: int = 1
    rounds: int = 100
    beta: float = 0.01
    cls_pretrain_epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    n_critic: int = 5
    gp_lambda: float = 10.0
    aggregation_mode: str = "generator_only"
    ska: bool = True
    gamma: float = 0.1
    resample_per_draw: bool = True
    synth_per_class: int = 300
    global_seed: int = 0
    hidden_dim: int = 4096
    noise_dim: int = 0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    cls_learning_rate: float = 1e-3
    eval_epochs: int = 100
    eval_learning_rate: float = 1e-3
    eval_every: int = 0
    partition: str = "even"
    embed_dim: int = 32
    workers: int = 1

    def __post_init__(self):
        positive = (
            "num_clients", "local_epochs", "cls_pretrain_epochs", "batch_size", "n_critic",
            "synth_per_class", "hidden_dim", "eval_epochs", "embed_dim", "workers",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        for name in ("learning_rate", "gp_lambda", "cls_learning_rate", "eval_learning_rate"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.rounds < 0 or self.eval_every < 0 or self.noise_dim < 0:
            raise InvalidArgument("rounds, eval_every and noise_dim must be non-negative")
        if not 0 < self.client_fraction <= 1:
            raise InvalidArgument("client_fraction must lie in (0, 1]")
        if self.beta < 0 or self.gamma < 0:
            raise InvalidArgument("beta and gamma must be non-negative")
        if self.aggregation_mode not in MODES:
            raise InvalidArgument(f"aggregation_mode must be one of {MODES}")
        if self.partition not in PARTITIONS:
            raise InvalidArgument(f"partition must be one of {PARTITIONS}")
        if self.selection_size > self.num_clients:
            raise InvalidArgument("selection size exceeds the number of clients")

    @property
    def selection_size(self) -> int:
        return max(1, round(self.num_clients * self.client_fraction))

    @property
    def ska_config(self) -> SkaConfig:
        return SkaConfig(self.ska, self.gamma, self.resample_per_draw)

    def resolved_noise_dim(self, attribute_dim: int) -> int:
        return self.noise_dim or attribute_dim

    def replace(self, **changes) -> "FedConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in fields(FedConfig)}


def parse_value(key: str, raw: str):
    kind = _TYPES[key]
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("on", "true", "yes", "1"):
            return True
        if lowered in ("off", "false", "no", "0"):
            return False
        raise ValueError(f"expected on/off, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def canonical_key(key: str) -> str:
    key = KEY_ALIASES.get(key, key)
    if key not in _TYPES:
        raise KeyError(key)
    return key


def parse_pairs(text: str, path="<config>", allowed_extra=()):
    """Split ``key = value`` lines into ``{key: (raw value, line number)}``."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise LoadError(path, lineno, f"expected 'key = value', got {line!r}")
        if key not in allowed_extra:
            try:
                key = canonical_key(key)
            except KeyError:
                raise LoadError(path, lineno, f"unknown key {key!r}") from None
        if key in pairs:
            raise LoadError(path, lineno, f"duplicate key {key!r}")
        pairs[key] = (value, lineno)
    return pairs


def config_from_pairs(pairs, path="<config>", base: FedConfig | None = None) -> FedConfig:
    values = {}
    for key, (raw, lineno) in pairs.items():
        try:
            values[key] = parse_value(key, raw)
        except ValueError as exc:
            raise LoadError(path, lineno, f"bad value for {key}: {exc}") from None
    try:
        return replace(base or FedConfig(), **values)
    except InvalidArgument as exc:
        raise LoadError(path, 0, str(exc)) from None


def parse_config(text: str, path="<config>", base: FedConfig | None = None) -> FedConfig:
    return config_from_pairs(parse_pairs(text, path), path, base)


def load_config(path) -> FedConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path)


PAPER_TEMPLATE = """\
# Published default setup. Learning rate: 1e-3 (CUB), 2e-4 (SUN), 1e-5 (others).
num_clients = 4
client_fraction = 1.0
local_epochs = 1
rounds = 100
batch_size = 64
gamma = 0.1
aggregation_mode = generator_only
ska = on
learning_rate = 1e-3
hidden_dim = 4096
"""

DESK_TEMPLATE = """\
# Desk-scale synthetic run for CI.
num_clients = 4
client_fraction = 1.0
local_epochs = 1
rounds = 30
batch_size = 32
aggregation_mode = generator_only
ska = off
hidden_dim = 64
beta = 1.0
learning_rate = 3e-3
eval_learning_rate = 1e-2
"""


def desk_config(**changes) -> FedConfig:
    return parse_config(DESK_TEMPLATE, "<desk>").replace(**changes)
