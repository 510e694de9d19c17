"""Train/evaluate pipelines and ablation sweeps, with their on-disk outputs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import FedConfig, config_from_pairs, parse_pairs
from .data import Dataset
from .errors import InvalidArgument, LoadError
from .fed import make_partitions, run_federation
from .report import (
    eval_records,
    plot_per_class,
    plot_sweep_summary,
    plot_training_curves,
    write_metrics,
    write_records,
    write_summary_table,
)
from .rng import SERVER_ID, derive_rng
from .semantics import EmbeddingTable, pseudo_table
from .zsl_eval import EvalReport, evaluate_unseen

log = logging.getLogger(__name__)

AXES = {
    "none": None,
    "client_number": "num_clients",
    "client_fraction": "client_fraction",
    "local_epochs": "local_epochs",
    "aggregation_mode": "aggregation_mode",
    "ska_mode": "ska",
}
PLAN_KEYS = ("axis", "values", "repeats", "data")


def resolve_embeddings(dataset: Dataset, config: FedConfig, embeddings: EmbeddingTable | None):
    if not config.ska:
        return None
    if embeddings is None:
        log.info("no embedding table supplied; using %d-d pseudo-embeddings", config.embed_dim)
        return pseudo_table(dataset.class_names, config.embed_dim, config.global_seed)
    return embeddings


def final_eval_rng(config: FedConfig, seed: int | None = None):
    return derive_rng(config.global_seed if seed is None else seed, config.rounds, SERVER_ID, "final-eval")


def run_training(dataset, embeddings, config: FedConfig, out_dir, fmt="jsonl", figures=True, workers=None):
    """Federated training; writes metrics, the final checkpoint and a loss-curve figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    embeddings = resolve_embeddings(dataset, config, embeddings)
    partitions = make_partitions(dataset, config)
    result = run_federation(dataset, partitions, config, embeddings, workers=workers)
    write_metrics(out_dir, result.metrics, fmt, config.digest())
    ckpt_path = save_checkpoint(out_dir / "final.ckpt", result.checkpoint(config))
    if figures:
        plot_training_curves(result.metrics, out_dir / "curves.png")
    return result, ckpt_path


def check_architecture(ckpt: Checkpoint, dataset: Dataset, embeddings):
    g_in, _, g_out = ckpt.global_generator.dims
    cond = dataset.attribute_dim + (embeddings.embed_dim if ckpt.config.ska else 0)
    if g_out != dataset.feature_dim or g_in != ckpt.noise_dim + cond:
        raise InvalidArgument(
            f"checkpoint generator {ckpt.global_generator.dims} does not fit dataset "
            f"(features {dataset.feature_dim}, condition {cond}, noise {ckpt.noise_dim})"
        )


def run_evaluation(ckpt_path, dataset, embeddings, out_dir, fmt="jsonl", seed=None, figures=True) -> EvalReport:
    """Score a checkpoint's server generator on the unseen classes."""
    ckpt, _ = load_checkpoint(ckpt_path)
    config = ckpt.config
    embeddings = resolve_embeddings(dataset, config, embeddings)
    check_architecture(ckpt, dataset, embeddings)
    report = evaluate_unseen(ckpt.global_generator, dataset, embeddings, config, final_eval_rng(config, seed))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = "eval.jsonl" if fmt == "jsonl" else "eval.txt"
    write_records(
        out_dir / name, "eval", eval_records(report), fmt, config.digest(),
        {"pseudo_digest": report.pseudo_digest, "round": ckpt.round},
    )
    if figures:
        plot_per_class(report, out_dir / "per_class.png")
    return report


@dataclass
class ExperimentPlan:
    base: FedConfig
    axis: str = "none"
    values: list = field(default_factory=list)
    repeats: int = 1
    data: str | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise InvalidArgument(f"unknown sweep axis {self.axis!r}; choose from {sorted(AXES)}")
        if self.repeats <= 0:
            raise InvalidArgument("repeats must be positive")
        if self.axis == "none":
            self.values = [None]
        elif not self.values:
            raise InvalidArgument(f"axis {self.axis} needs at least one value")
        for v in self.values:
            self.cell_config(v, 0)

    def cell_config(self, value, repeat: int) -> FedConfig:
        changes = {"global_seed": self.base.global_seed + repeat}
        key = AXES[self.axis]
        if key is not None:
            changes[key] = value
        try:
            return self.base.replace(**changes)
        except InvalidArgument as exc:
            raise InvalidArgument(f"sweep value {value!r} invalid for {self.axis}: {exc}") from None


def _parse_axis_value(axis, raw):
    key = AXES[axis]
    if key in ("num_clients", "local_epochs"):
        return int(raw)
    if key == "client_fraction":
        return float(raw)
    if key == "ska":
        return raw.lower() in ("on", "true", "1", "yes")
    return raw


def parse_plan(text: str, path="<plan>") -> ExperimentPlan:
    pairs = parse_pairs(text, path, allowed_extra=PLAN_KEYS)
    plan_items = {k: pairs.pop(k) for k in PLAN_KEYS if k in pairs}
    base = config_from_pairs(pairs, path)
    axis = plan_items.get("axis", ("none", 0))[0]
    try:
        values = [
            _parse_axis_value(axis, v.strip()) for v in plan_items.get("values", ("", 0))[0].split(",") if v.strip()
        ] if axis in AXES else []
        repeats = int(plan_items.get("repeats", ("1", 0))[0])
    except ValueError as exc:
        raise LoadError(path, 0, f"bad sweep value: {exc}") from None
    data = plan_items.get("data", (None, 0))[0]
    return ExperimentPlan(base, axis, values, repeats, data)


def run_sweep(plan: ExperimentPlan, dataset, embeddings, out_dir, fmt="jsonl", figures=True):
    """Train and evaluate every (value, repeat) cell; failures are recorded, not fatal.

    Returns ``(summary rows, number of failed cells)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, failures = [], 0
    for value in plan.values:
        scores, failed = [], 0
        for k in range(plan.repeats):
            cell = out_dir / f"cell_{value}_r{k}" if value is not None else out_dir / f"cell_r{k}"
            try:
                config = plan.cell_config(value, k)
                _, ckpt = run_training(dataset, embeddings, config, cell, fmt, figures=False)
                report = run_evaluation(ckpt, dataset, embeddings, cell, fmt, figures=False)
                scores.append(report.top1)
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                failed += 1
                cell.mkdir(parents=True, exist_ok=True)
                (cell / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
                log.error("cell %s repeat %d failed: %s", value, k, exc)
        failures += failed
        rows.append({
            "value": "-" if value is None else (("on" if value else "off") if isinstance(value, bool) else value),
            "mean": float(np.mean(scores)) if scores else None,
            "std": float(np.std(scores)) if scores else None,
            "repeats": len(scores),
            "failed": failed,
        })
    write_summary_table(out_dir / "summary.tsv", plan.axis, rows, plan.base.digest())
    if figures and any(r["mean"] is not None for r in rows):
        plot_sweep_summary(plan.axis, rows, out_dir / "summary.png")
    return rows, failures

