"""Command-line entry point: ``dsgtf <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import DatasetSplit, SyntheticConfig, load_manifest, save_dataset, split_subjects, synthesize_dataset
from .model import ModelConfig, init_params, loss_fn
from .sensor_graph import build_adjacency, connectivity_report, read_layout, write_edge_list
from .training import (
    TrainConfig,
    evaluate,
    sweep_adjacency,
    train,
    write_eval_csv,
    write_metrics_csv,
    write_sweep_csv,
    save_checkpoint,
)

log = logging.getLogger("dsgtf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


TRAIN_FLAG_HELP = {
    "segment_length": "segment length d",
    "overlap": "fractional overlap between consecutive segments",
    "window": "window width w (must divide d)",
    "gamma": "RBF kernel bandwidth",
    "adjacency": "adjacency method: fc, thresh or topk",
    "k": "neighbours per node for topk",
    "tau": "RBF threshold for thresh",
    "lr": "Adam learning rate",
    "batch_size": "mini-batch size",
    "epochs": "training epochs",
    "seed": "random seed (init, shuffles, split)",
    "channels": "channel count (default: from the layout)",
    "gat_heads": "GAT heads per window",
    "gat_features": "GAT output features per head",
    "encoder_heads": "transformer attention heads",
    "head_dim": "transformer head width (default: d // heads)",
    "ff_hidden": "transformer feed-forward width",
    "token_dim": "per-channel embedding width p",
    "n_train": "number of training subjects",
    "n_test": "number of test subjects",
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields; flags override it")
    for f in fields(TrainConfig):
        default = getattr(defaults, f.name)
        kind = {"int": int, "float": float, "str": str}.get(type(default).__name__, int)
        if f.name in ("channels", "head_dim"):
            kind = int
        flag = "--" + f.name.replace("_", "-")
        extra = {"choices": ["fc", "thresh", "topk"]} if f.name == "adjacency" else {}
        shown = "auto" if default is None else default
        p.add_argument(flag, dest=f.name, type=kind, default=None,
                       help=f"{TRAIN_FLAG_HELP[f.name]} (default: {shown})", **extra)


def _train_config(args) -> TrainConfig:
    obj = {}
    if args.config is not None:
        obj = json.loads(Path(args.config).read_text())
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            obj[f.name] = value
    return TrainConfig.from_json(obj)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsgtf", description="Dual-stream graph/transformer fusion decoder")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-synthetic", help="write a synthetic labelled dataset")
    p.add_argument("--config", type=Path, help="JSON file with SyntheticConfig fields; flags override it")
    p.add_argument("--subjects", type=int, help="number of subjects (default: 18)")
    p.add_argument("--channels", type=int, help="number of channels (default: 16)")
    p.add_argument("--samples", type=int, help="samples per task recording (default: 2000)")
    p.add_argument("--noise", type=float, help="white-noise amplitude (default: 0.0)")
    p.add_argument("--seed", type=int, help="random seed (default: 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("adjacency", help="build an adjacency matrix and export its edge list")
    p.add_argument("--layout", type=Path, required=True, help="layout CSV (channel,x,y,z)")
    p.add_argument("--method", choices=["fc", "thresh", "topk"], default="topk", help="(default: topk)")
    p.add_argument("--k", type=int, default=3, help="neighbours per node for topk (default: 3)")
    p.add_argument("--tau", type=float, default=0.5, help="RBF threshold for thresh (default: 0.5)")
    p.add_argument("--gamma", type=float, default=100.0, help="RBF bandwidth (default: 100.0)")
    p.add_argument("--out", type=Path, required=True, help="edge-list output file")

    p = sub.add_parser("train", help="train a model on the training subjects")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest JSON")
    p.add_argument("--split", type=Path, help="split JSON {train: [...], test: [...]} (default: seeded shuffle)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="per-subject accuracy of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--split", type=Path, help="split JSON; its test subjects are evaluated")
    group.add_argument("--subjects", help="comma-separated subject ids")
    p.add_argument("--out", type=Path, required=True, help="eval CSV output")

    p = sub.add_parser("sweep", help="train/evaluate one model per adjacency variant")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", type=Path, help="split JSON (default: seeded shuffle)")
    p.add_argument("--variants", required=True,
                   help="comma-separated method:param list, e.g. topk:1,topk:3,thresh:0.5,fc")
    p.add_argument("--out", type=Path, required=True, help="sweep CSV output")
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the toy model's gradients")
    p.add_argument("--seed", type=int, default=1, help="random seed (default: 1)")
    p.add_argument("--tolerance", type=float, default=1e-3, help="max relative error (default: 0.001)")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default: 1e-05)")
    p.add_argument("--max-per-tensor", type=int, default=200,
                   help="coordinates probed per tensor, 0 for all (default: 200)")
    p.add_argument("--batch", type=int, default=4, help="toy batch size (default: 4)")
    p.add_argument("--out", type=Path, help="optional per-tensor report CSV")
    return parser


# toy dimensions for gradient checking
GRADCHECK_CONFIG = ModelConfig(channels=6, segment_length=20, window=4, gat_heads=3, gat_features=4,
                               encoder_heads=4, head_dim=5, ff_hidden=32, token_dim=4)


def run_gradcheck(seed: int = 1, tolerance: float = 1e-3, eps: float = 1e-5,
                  max_per_tensor: int | None = 200, batch: int = 4) -> nx.GradCheckReport:
    cfg = GRADCHECK_CONFIG
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    from .sensor_graph import SensorLayout
    layout = SensorLayout.from_coords(rng.uniform(size=(cfg.channels, 3)))
    adj = build_adjacency(layout, "topk", 10.0, k=2)
    x = rng.standard_normal((batch, cfg.channels, cfg.segment_length))
    y = rng.integers(0, cfg.n_classes, batch)
    return nx.finite_diff_check(lambda: loss_fn(x, y, adj, params, cfg), list(params.values()),
                                eps=eps, tolerance=tolerance, max_per_tensor=max_per_tensor,
                                seed=seed, names=list(params))


def _parse_variants(text: str):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        method, _, value = item.partition(":")
        method = method.lower()
        if method == "fc":
            out.append(("fc", None))
        elif method == "topk" and value:
            out.append(("topk", int(value)))
        elif method == "thresh" and value:
            out.append(("thresh", float(value)))
        else:
            raise UsageError(f"bad variant {item!r}; expected fc, topk:<k> or thresh:<tau>")
    if not out:
        raise UsageError("no variants given")
    return out


def _resolve_split(args, manifest, cfg: TrainConfig) -> DatasetSplit:
    if args.split is not None:
        return DatasetSplit.from_json(json.loads(Path(args.split).read_text()))
    return split_subjects(manifest.subjects, cfg.n_train, cfg.n_test, cfg.seed)


def cmd_gen_synthetic(args) -> None:
    obj = json.loads(args.config.read_text()) if args.config else {}
    for flag, name in (("subjects", "subjects"), ("channels", "channels"), ("samples", "samples_per_task"),
                       ("noise", "noise"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            obj[name] = getattr(args, flag)
    for key in ("frequencies", "gain_range"):
        if key in obj:
            obj[key] = tuple(obj[key])
    cfg = SyntheticConfig(**obj)
    recordings, layout = synthesize_dataset(cfg)
    path = save_dataset(args.out, layout, recordings)
    print(f"wrote {len(recordings)} recordings, layout and manifest to {path.parent}")


def cmd_adjacency(args) -> None:
    layout = read_layout(args.layout)
    adj = build_adjacency(layout, args.method, args.gamma, k=args.k, tau=args.tau)
    write_edge_list(adj, args.out)
    rep = connectivity_report(adj)
    print(f"method={adj.method} edges={rep.edges} isolated={rep.isolated}")


def cmd_train(args) -> None:
    cfg = _train_config(args)
    manifest = load_manifest(args.manifest)
    split = _resolve_split(args, manifest, cfg)
    result = train(manifest, split, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "checkpoint.bin", result.params, result.model_config, cfg)
    write_metrics_csv(result.metrics, args.out / "metrics.csv")
    (args.out / "split.json").write_text(json.dumps(split.to_json(), indent=2) + "\n")
    (args.out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"epoch {last.epoch}: train_loss={last.train_loss:.6f} train_acc={last.train_acc:.6f}")
    print(f"checkpoint written to {args.out / 'checkpoint.bin'}")


def cmd_eval(args) -> None:
    if args.split is not None:
        subjects = DatasetSplit.from_json(json.loads(args.split.read_text())).test_subjects
    else:
        subjects = [s.strip() for s in args.subjects.split(",") if s.strip()]
    report = evaluate(args.checkpoint, args.manifest, subjects)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(report, args.out)
    print(f"mean={report.mean:.6f} std={report.std:.6f}")


def cmd_sweep(args) -> None:
    variants = _parse_variants(args.variants)
    cfg = _train_config(args)
    manifest = load_manifest(args.manifest)
    split = _resolve_split(args, manifest, cfg)
    rows = sweep_adjacency(manifest, split, cfg, variants)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, args.out)
    failed = sum(r.error is not None for r in rows)
    print(f"{len(rows)} variants, {failed} failed; table written to {args.out}")


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed, args.tolerance, args.eps, args.max_per_tensor or None, args.batch)
    if args.out is not None:
        lines = ["tensor,max_rel_error"] + [f"{k},{v:.3e}" for k, v in report.per_tensor().items()]
        args.out.write_text("\n".join(lines) + "\n")
    worst = report.worst()
    where = f" at {worst.name}{list(worst.index)}" if worst else ""
    print(f"max relative error {report.max_rel_error:.3e}{where} over {len(report.entries)} coordinates "
          f"(tolerance {args.tolerance:g}): {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 2


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "adjacency": cmd_adjacency,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as err:
        print(str(err), file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or 0
    except UsageError as err:
        print(f"dsgtf {args.command}: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"dsgtf {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
