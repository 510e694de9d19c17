"""Delimited run outputs and the matplotlib figures rendered next to them.

Every file starts with a header naming its format version and the digest of
the configuration that produced it.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("text", "jsonl")

# fixed metadata keeps PNG bytes reproducible across runs
_PNG_META = {"Software": None}


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def write_records(path, kind: str, records, fmt: str, config_digest: str, extra_header: dict | None = None) -> Path:
    """Write ``records`` (a list of flat dicts) as key=value lines or JSON lines."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    path = Path(path)
    header = {"format": f"fzsl.{kind} v1", "config_digest": config_digest, **(extra_header or {})}
    if fmt == "jsonl":
        lines = [json.dumps(header)] + [json.dumps(r) for r in records]
    else:
        rest = {k: v for k, v in header.items() if k != "format"}
        lines = [f"# {header['format']} " + " ".join(f"{k}={_fmt(v)}" for k, v in rest.items())]
        lines += [" ".join(f"{k}={_fmt(v)}" for k, v in r.items()) for r in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_records(path):
    """Parse a file written by :func:`write_records`; returns ``(header, records)``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if lines and lines[0].startswith("{"):
        return json.loads(lines[0]), [json.loads(line) for line in lines[1:]]
    tokens = lines[0][2:].split()
    header = {"format": " ".join(tokens[:2]), **dict(tok.split("=", 1) for tok in tokens[2:])}
    return header, [dict(tok.split("=", 1) for tok in line.split()) for line in lines[1:]]


def metrics_filename(fmt: str) -> str:
    return "metrics.jsonl" if fmt == "jsonl" else "metrics.txt"


def write_metrics(out_dir, metrics, fmt, config_digest) -> Path:
    return write_records(Path(out_dir) / metrics_filename(fmt), "metrics", [m.record() for m in metrics], fmt, config_digest)


def eval_records(report) -> list:
    rows = [{"class": int(c), "top1": float(a)} for c, a in zip(report.classes, report.per_class)]
    rows.append({"class": "mean", "top1": float(report.top1)})
    return rows


def write_summary_table(path, axis: str, rows, config_digest: str) -> Path:
    """Tab-separated sweep summary: axis value, mean top-1, std over repeats, cell count."""
    lines = [f"# fzsl.summary v1 config_digest={config_digest} axis={axis}", "value\tmean_top1\tstd_top1\trepeats\tfailed"]
    for row in rows:
        mean = "nan" if row["mean"] is None else f"{row['mean']:.6f}"
        std = "nan" if row["std"] is None else f"{row['std']:.6f}"
        lines.append(f"{row['value']}\t{mean}\t{std}\t{row['repeats']}\t{row['failed']}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def _figure(width=6.0, height=None):
    height = height or width * 0.62
    fig, ax = plt.subplots(figsize=(width, height), dpi=100)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig, ax


def _save(fig, path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_training_curves(metrics, path) -> Path:
    fig, ax = _figure()
    rounds = [m.round for m in metrics]
    ax.plot(rounds, [m.mean_critic_loss for m in metrics], label="critic")
    ax.plot(rounds, [m.mean_generator_loss for m in metrics], label="generator (adversarial)")
    ax.plot(rounds, [m.mean_cls_loss for m in metrics], label="classification")
    evaluated = [(m.round, m.unseen_top1) for m in metrics if m.unseen_top1 is not None]
    if evaluated:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evaluated), "k--o", ms=3, label="unseen top-1")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("unseen top-1")
    ax.set_xlabel("round")
    ax.set_ylabel("mean client loss")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_per_class(report, path) -> Path:
    fig, ax = _figure()
    labels = [str(c) for c in report.classes]
    ax.bar(labels, report.per_class, color="0.6")
    ax.axhline(report.top1, color="k", lw=1, ls="--", label=f"mean {report.top1:.3f}")
    ax.set_ylim(0, 1)
    ax.set_xlabel("unseen class")
    ax.set_ylabel("top-1 accuracy")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_sweep_summary(axis: str, rows, path) -> Path:
    fig, ax = _figure()
    ok = [r for r in rows if r["mean"] is not None]
    xs = list(range(len(ok)))
    ax.errorbar(xs, [r["mean"] for r in ok], yerr=[r["std"] or 0.0 for r in ok], fmt="o-", capsize=3, color="k")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(r["value"]) for r in ok])
    ax.set_ylim(0, 1)
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel("mean unseen top-1")
    return _save(fig, path)


def plot_leakage(report, path) -> Path:
    fig, ax = _figure()
    history = np.maximum(np.asarray(report.residual_history, dtype=float), 1e-300)
    ax.semilogy(np.linspace(0, report.iterations, len(history)), history, color="k")
    ax.set_xlabel("inversion step")
    ax.set_ylabel("best gradient mismatch")
    title = ", ".join(f"{k} cos={v:.3f}" for k, v in sorted(report.cosines.items()))
    ax.set_title(title, fontsize=9)
    return _save(fig, path)
