"""``fzsl`` command-line tool: data generation, training, evaluation, sweeps, attacks."""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .attack import capture_gradients, dlg_invert
from .checkpoint import load_checkpoint
from .config import DESK_TEMPLATE, PAPER_TEMPLATE, FedConfig, load_config, parse_config
from .data import SyntheticSpec, label_counts, make_synthetic, partition_skew
from .errors import DigestMismatch, InvalidArgument, LoadError, NumericFailure
from .experiments import parse_plan, run_evaluation, run_sweep, run_training
from .fed import make_partitions
from .gan import gan_init
from .io import load_data_dir, write_data_dir
from .numerics import LinearParams
from .report import plot_leakage, write_records
from .rng import SERVER_ID, RngStream, derive_rng
from .semantics import pseudo_table

log = logging.getLogger("fzsl")

TEMPLATES = {"desk": DESK_TEMPLATE, "paper": PAPER_TEMPLATE}


def resolve_config(name_or_path: str, seed: int | None) -> FedConfig:
    """A template name (``desk``, ``paper``) or a config file, with ``--seed`` applied last."""
    if name_or_path in TEMPLATES:
        config = parse_config(TEMPLATES[name_or_path], f"<{name_or_path}>")
    else:
        config = load_config(name_or_path)
    return config if seed is None else config.replace(global_seed=seed)


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_gen_data(args) -> int:
    if args.unseen <= 0:
        raise InvalidArgument("--unseen must be positive: zero-shot evaluation needs unseen classes")
    spec = SyntheticSpec(args.seen, args.unseen, args.attr_dim, args.feature_dim, args.rows_per_class, args.noise_scale)
    seed = 0 if args.seed is None else args.seed
    dataset = make_synthetic(spec, RngStream(seed, ("gen-data",)))
    table = pseudo_table(dataset.class_names, args.embed_dim, seed)
    text = f"{spec!r} seed={seed} embed_dim={args.embed_dim}"
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
    out = write_data_dir(_out(args, "data"), dataset, table, digest)
    print(f"wrote {dataset.features.shape[0]} rows, {len(dataset.seen_classes)} seen / "
          f"{len(dataset.unseen_classes)} unseen classes to {out}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.seed)
    dataset, embeddings = load_data_dir(args.data)
    out = _out(args, "run")
    result, ckpt = run_training(
        dataset, embeddings, config, out, args.metrics_format, figures=not args.no_figures, workers=args.workers
    )
    last = result.metrics[-1] if result.metrics else None
    print(f"config {config.digest()}: {config.rounds} rounds, checkpoint {ckpt}")
    if last is not None:
        print(f"final round losses: critic {last.mean_critic_loss:.4f} generator {last.mean_generator_loss:.4f} "
              f"cls {last.mean_cls_loss:.4f}")
    return 0


def cmd_eval(args) -> int:
    dataset, embeddings = load_data_dir(args.data)
    out = _out(args, str(Path(args.checkpoint).parent))
    report = run_evaluation(
        args.checkpoint, dataset, embeddings, out, args.metrics_format, args.seed, figures=not args.no_figures
    )
    for c, acc in zip(report.classes, report.per_class):
        print(f"class {dataset.class_names[c]}\t{acc:.4f}")
    print(f"mean unseen top-1\t{report.top1:.4f}")
    return 0


def cmd_sweep(args) -> int:
    plan_path = Path(args.plan)
    plan = parse_plan(plan_path.read_text(encoding="utf-8"), plan_path)
    if args.seed is not None:
        plan.base = plan.base.replace(global_seed=args.seed)
    data_dir = args.data or plan.data
    if data_dir is None:
        raise InvalidArgument("no dataset: pass --data or set 'data = <dir>' in the plan")
    if args.data is None and not Path(data_dir).is_absolute():
        data_dir = plan_path.parent / data_dir
    dataset, embeddings = load_data_dir(data_dir)
    rows, failures = run_sweep(plan, dataset, embeddings, _out(args, "sweep"), args.metrics_format, not args.no_figures)
    for row in rows:
        mean = "nan" if row["mean"] is None else f"{row['mean']:.4f}"
        std = "nan" if row["std"] is None else f"{row['std']:.4f}"
        print(f"{plan.axis}={row['value']}\tmean {mean}\tstd {std}\tfailed {row['failed']}")
    if failures:
        print(f"{failures} sweep cell(s) failed; see FAILED files", file=sys.stderr)
        return 1
    return 0


def _attack_target(args, config: FedConfig, rng: RngStream):
    """The model under attack plus one private batch, as ``(model, batch, digest)``."""
    if args.checkpoint:
        ckpt, _ = load_checkpoint(args.checkpoint)
        critic = ckpt.clients[args.client].discriminator
        d = ckpt.global_generator.dims[2]
        m = critic.dims[0] - d
        digest = ckpt.config.digest()
    else:
        model = gan_init(args.feature_dim, args.attr_dim, args.attr_dim, args.attr_dim, args.hidden, rng.child("model"))
        critic, d, m = model.discriminator, args.feature_dim, args.attr_dim
        digest = config.replace(hidden_dim=args.hidden).digest()
    if args.data:
        dataset, _ = load_data_dir(args.data)
        if dataset.feature_dim != d or dataset.attribute_dim != m:
            raise InvalidArgument("dataset dims do not match the attacked model")
        rows = rng.child("rows").choice(len(dataset.labels), args.batch)
        x = dataset.features[rows].astype(np.float64)
        labels = dataset.labels[rows]
        a = dataset.attributes[labels].astype(np.float64)
    else:
        x = np.abs(rng.child("x").normal((args.batch, d), dtype=np.float64))
        a = rng.child("a").uniform((args.batch, m), dtype=np.float64)
        labels = rng.child("y").choice(args.classes, args.batch)
    if args.target == "critic":
        return critic, (x, a), digest
    head = LinearParams(rng.child("head").normal((args.classes, d), 0.1, np.float64), np.zeros(args.classes))
    return head, (x, labels % args.classes), digest


def cmd_attack(args) -> int:
    config = resolve_config(args.config, args.seed)
    seed = config.global_seed
    rng = derive_rng(seed, 0, SERVER_ID, "attack")
    model, batch, digest = _attack_target(args, config, rng)
    bundle = capture_gradients(model, batch)
    report = dlg_invert(bundle, args.steps, rng.child("dummy"), truth=batch)
    out = _out(args, "attack")
    out.mkdir(parents=True, exist_ok=True)
    name = "leakage.jsonl" if args.metrics_format == "jsonl" else "leakage.txt"
    history = [{"step": i * 50 if i * 50 < report.iterations else report.iterations, "best_residual": r}
               for i, r in enumerate(report.residual_history)]
    write_records(out / name, "leakage", [report.record()] + history, args.metrics_format, digest,
                  {"batch": bundle.batch_size, "seed": seed})
    if not args.no_figures:
        plot_leakage(report, out / "leakage.png")
    for key, value in report.record().items():
        print(f"{key}\t{value}")
    return 0


def cmd_stats(args) -> int:
    config = resolve_config(args.config, args.seed)
    dataset, _ = load_data_dir(args.data)
    partitions = make_partitions(dataset, config)
    records = [
        {"client": p.client_id, "classes": len(p.class_subset), "rows": int(label_counts(p, dataset).sum())}
        for p in partitions
    ]
    skew = partition_skew(partitions, dataset) if len(partitions) > 1 else None
    out = _out(args, "stats")
    out.mkdir(parents=True, exist_ok=True)
    name = "stats.jsonl" if args.metrics_format == "jsonl" else "stats.txt"
    write_records(out / name, "stats", records + [{"mean_ks": skew}], args.metrics_format, config.digest(),
                  {"partition": config.partition, "num_clients": config.num_clients})
    for r in records:
        print(f"client {r['client']}\t{r['classes']} classes\t{r['rows']} rows")
    print("mean KS label skew\t" + ("n/a (one client)" if skew is None else f"{skew:.6f}"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="config file or template name (desk, paper)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides global_seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--metrics-format", choices=("text", "jsonl"), default=argparse.SUPPRESS)
    common.add_argument("--no-figures", action="store_true", default=argparse.SUPPRESS, help="skip PNG rendering")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="fzsl", description=__doc__, parents=[common])
    parser.set_defaults(config="desk", seed=None, out=None, metrics_format="jsonl", no_figures=False, verbose=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset directory")
    p.add_argument("--seen", type=int, default=20)
    p.add_argument("--unseen", type=int, default=5)
    p.add_argument("--attr-dim", type=int, default=16)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--rows-per-class", type=int, default=50)
    p.add_argument("--noise-scale", type=float, default=0.05)
    p.add_argument("--embed-dim", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="federated training")
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=None, help="client threads (results do not depend on it)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="unseen-class top-1 of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="ablation sweep from a plan file")
    p.add_argument("--plan", required=True)
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack", parents=[common], help="gradient-matching inversion demo")
    p.add_argument("--checkpoint", default=None, help="attack a client critic from this checkpoint")
    p.add_argument("--client", type=int, default=0)
    p.add_argument("--data", default=None, help="draw the private batch from this dataset")
    p.add_argument("--target", choices=("critic", "head"), default="critic")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--attr-dim", type=int, default=8)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("stats", parents=[common], help="partition label-skew report")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericFailure as exc:
        print(f"fzsl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 1
    except (LoadError, InvalidArgument, DigestMismatch, OSError) as exc:
        print(f"fzsl {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
