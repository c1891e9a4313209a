"""Command-line entry point: gen-data, train, eval, ablate-temperature, export-attention.

Exit codes: 0 success, 1 usage error, 2 runtime / I/O / configuration error.
Settings resolve as built-in defaults < ``--config`` JSON file < flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticConfig, generate_synthetic, read_manifest, split, write_dataset
from .errors import DQMILError
from .loss import LossWeights
from .metrics import (attention_entropy, attention_ranking, evaluate, predict, witness_recovery,
                      write_exports, AttentionExport)
from .model import VARIANTS, DQConfig, DQModel
from .optim import OptimConfig
from .train import TrainConfig, train, write_csv

log = logging.getLogger("dqmil")

TEMPERATURE_GRID = ("sqrt_dk", 1.0, 1.0 / 8, 1.0 / 16)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text):
    return tuple(float(x) for x in text.split(","))


def _ints(text):
    return tuple(int(x) for x in text.split(","))


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=VARIANTS, default="dq-sd", help="aggregator variant (default: dq-sd)")
    g.add_argument("--latents", type=int, default=16, help="latent rows M (default: 16)")
    g.add_argument("--dim", type=int, default=256, help="latent width D (default: 256)")
    g.add_argument("--d-k", type=int, default=64, help="per-head attention width d_k (default: 64)")
    g.add_argument("--depth", type=int, default=2, help="latent transformer depth J (default: 2)")
    g.add_argument("--heads", type=int, default=4, help="attention heads; heads * d_k must equal D (default: 4)")
    g.add_argument("--temperature", type=float, default=None, help="attention temperature tau (default: sqrt(d_k))")
    g.add_argument("--blend", type=float, default=0.5, help="inference blend weight b (default: 0.5)")
    g.add_argument("--source", default=None, help="train on a single named source instead of fusing all")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=30, help="training epochs (default: 30)")
    g.add_argument("--seed", type=int, default=7, help="initialisation and shuffling seed (default: 7)")
    g.add_argument("--lr", type=float, default=2e-4, help="learning rate (default: 2e-4)")
    g.add_argument("--weight-decay", type=float, default=1e-5, help="decoupled weight decay (default: 1e-5)")
    g.add_argument("--alpha", type=float, default=0.7, help="CE/KL balance alpha (default: 0.7)")
    g.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.03, help="hint weight lambda (default: 0.03)")
    g.add_argument("--no-detach-teacher", action="store_true", help="let KL and hint gradients reach the teacher head")
    g.add_argument("--lookahead-k", type=int, default=5, help="Lookahead sync period (default: 5)")
    g.add_argument("--lookahead-alpha", type=float, default=0.5, help="Lookahead slow step (default: 0.5)")
    g.add_argument("--clip-norm", type=float, default=None, help="global gradient-norm clip (default: off)")
    g.add_argument("--patience", type=int, default=None, help="early-stop patience in epochs (default: off)")
    g.add_argument("--precision", choices=("float32", "float64"), default="float32",
                   help="training precision (default: float32)")


def build_parser():
    p = _Parser(prog="dqmil", description="Dual-query Perceiver MIL: data, training, evaluation.")
    p.add_argument("--config", default=None, help="JSON file of flag defaults (keys are flag names, '-' or '_')")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic witness-bag dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--bags", type=int, default=200, help="number of bags (default: 200)")
    g.add_argument("--n-min", type=int, default=30, help="minimum instances per bag (default: 30)")
    g.add_argument("--n-max", type=int, default=80, help="maximum instances per bag (default: 80)")
    g.add_argument("--widths", type=_ints, default=None, help="comma-separated source widths (default: 32)")
    g.add_argument("--fusion", action="store_true", help="emit three sources of widths 32,32,16")
    g.add_argument("--d-proj", type=int, default=256, help="projection width per source (default: 256)")
    g.add_argument("--witness-rate", type=float, default=0.1, help="witness fraction in positive bags (default: 0.1)")
    g.add_argument("--separation", type=float, default=2.0, help="witness mean shift (default: 2.0)")
    g.add_argument("--noise", type=float, default=0.5, help="instance noise scale (default: 0.5)")
    g.add_argument("--classes", type=int, default=2, help="class count K (default: 2)")
    g.add_argument("--split", type=_floats, default=(0.8, 0.1, 0.1), help="train,val,test ratios (default: 0.8,0.1,0.1)")
    g.add_argument("--seed", type=int, default=7, help="generator seed (default: 7)")

    t = sub.add_parser("train", help="train a model on the train split")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="directory for checkpoints and logs")
    _add_model_flags(t)
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", default=None, help="write the report JSON here")
    e.add_argument("--workers", type=int, default=1, help="evaluation threads (default: 1)")

    a = sub.add_parser("ablate-temperature", help="train and evaluate over the temperature grid")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--taus", default=None, help="comma-separated temperatures (default: sqrt(d_k),1,1/8,1/16)")
    a.add_argument("--checkpoint", default=None, help="fixed model for the entropy sweep (default: the sqrt(d_k) run)")
    a.add_argument("--no-retrain", action="store_true", help="only sweep tau on the fixed --checkpoint model")
    _add_model_flags(a)
    _add_train_flags(a)

    x = sub.add_parser("export-attention", help="write per-bag attention CSVs (and PGM strips)")
    x.add_argument("--manifest", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--split", choices=("train", "val", "test"), default="test")
    x.add_argument("--out", required=True)
    x.add_argument("--pgm", action="store_true", help="also write greyscale PGM strips")
    return p


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DQMILError(f"cannot read config file {known.config}: {exc}") from exc
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        for action in parser._subparsers._group_actions:
            for subparser in action.choices.values():
                subparser.set_defaults(**cfg)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    widths = (32, 32, 16) if args.fusion else (args.widths or (32,))
    cfg = SyntheticConfig(n_bags=args.bags, n_min=args.n_min, n_max=args.n_max, source_widths=tuple(widths),
                          witness_rate=args.witness_rate, separation=args.separation, noise=args.noise,
                          num_classes=args.classes, seed=args.seed)
    ds = generate_synthetic(cfg, d_proj=args.d_proj)
    ds.splits = split([b.bag_id for b in ds.bags], ds.labels, args.split, seed=args.seed)
    manifest = write_dataset(ds, args.out)
    counts = {s: sum(1 for v in ds.splits.values() if v == s) for s in ("train", "val", "test")}
    sizes = [b.n_instances for b in ds.bags]
    print(f"wrote {len(ds.bags)} bags to {manifest}")
    print(f"split train/val/test: {counts['train']}/{counts['val']}/{counts['test']}")
    print(f"labels: {np.bincount(ds.labels).tolist()}  instances per bag: {min(sizes)}-{max(sizes)}")
    return 0


def _model_config(args, ds, temperature=None):
    return DQConfig(sources=ds.sources, num_latents=args.latents, dim=args.dim, d_k=args.d_k,
                    depth=args.depth, heads=args.heads, num_classes=len(ds.classes),
                    temperature=args.temperature if temperature is None else temperature,
                    blend=args.blend, variant=args.variant, select_source=args.source)


def _train_config(args):
    return TrainConfig(epochs=args.epochs, seed=args.seed, patience=args.patience,
                       loss=LossWeights(alpha=args.alpha, lam=args.lam, detach_teacher=not args.no_detach_teacher),
                       optim=OptimConfig(lr=args.lr, weight_decay=args.weight_decay,
                                         lookahead_k=args.lookahead_k, lookahead_alpha=args.lookahead_alpha,
                                         clip_norm=args.clip_norm))


def _fit(args, ds, out_dir, temperature=None):
    with nx.precision(args.precision):
        model = DQModel(_model_config(args, ds, temperature), seed=args.seed)
        start = time.perf_counter()
        result = train(model, ds.subset("train"), _train_config(args), ds.subset("val"), out_dir)
        save_checkpoint(model, Path(out_dir) / "model.dqml", {"epoch": args.epochs, "seed": args.seed})
    log.info("trained %s in %.1fs", model.config.variant, time.perf_counter() - start)
    return result


def cmd_train(args):
    ds = read_manifest(args.manifest)
    result = _fit(args, ds, args.out)
    report = evaluate(result.model, ds.subset("test")) if ds.subset("test") else None
    print(f"checkpoint: {Path(args.out) / 'model.dqml'}")
    if result.epochs:
        print(f"steps: {len(result.steps)}  final epoch loss: {result.epochs[-1]['mean_loss']:.4f}")
    else:
        print("steps: 0")
    if report is not None:
        print(report.table(ds.classes))
        (Path(args.out) / "test_report.json").write_text(report.to_json() + "\n")
    return 0


def cmd_eval(args):
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    ds = read_manifest(args.manifest)
    bags = ds.subset(args.split)
    if not bags:
        raise DQMILError(f"split {args.split!r} is empty")
    with nx.precision("float32"):
        model = load_checkpoint(args.checkpoint)
        report = evaluate(model, bags, workers=args.workers)
    print(report.to_json())
    print(report.table(ds.classes))
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


def _taus(args):
    if args.taus:
        return [float(x) for x in args.taus.split(",")]
    return [math.sqrt(args.d_k) if t == "sqrt_dk" else t for t in TEMPERATURE_GRID]


def temperature_sweep(model, bags, taus):
    """Mean attention entropy per tau, and whether instance rankings agree across all taus."""
    logits = [model.instance_logits(b.sources) for b in bags]
    entropies = [float(np.mean([attention_entropy(z, t) for z in logits])) for t in taus]
    rankings_agree = all(
        all(np.array_equal(attention_ranking(z, taus[0]), attention_ranking(z, t)) for t in taus[1:])
        for z in logits)
    return entropies, rankings_agree


def cmd_ablate_temperature(args):
    ds = read_manifest(args.manifest)
    taus = _taus(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    fixed = None
    if args.checkpoint:
        with nx.precision("float64"):
            fixed = load_checkpoint(args.checkpoint)
    elif args.no_retrain:
        raise UsageError("--no-retrain needs --checkpoint")
    test = ds.subset("test")
    if not args.no_retrain:
        for tau in taus:
            result = _fit(args, ds, out / f"tau_{tau:g}", temperature=tau)
            report = evaluate(result.model, test)
            rows.append({"tau": tau, "auc": report.auc, "accuracy": report.accuracy})
            if fixed is None:
                with nx.precision("float64"):
                    fixed = load_checkpoint(out / f"tau_{tau:g}" / "model.dqml")
    entropies, agree = temperature_sweep(fixed, test, taus)
    if not rows:
        rows = [{"tau": tau, "auc": float("nan"), "accuracy": float("nan")} for tau in taus]
    for row, h in zip(rows, entropies):
        row["fixed_model_entropy"] = h
    write_csv(out / "temperature_ablation.csv", ("tau", "auc", "accuracy", "fixed_model_entropy"), rows)
    print(f"{'tau':>10} {'AUC':>8} {'accuracy':>9} {'entropy':>9}")
    for r in rows:
        print(f"{r['tau']:>10.4g} {r['auc']:>8.4f} {r['accuracy']:>9.4f} {r['fixed_model_entropy']:>9.4f}")
    print(f"instance ranking identical across taus: {agree}")
    return 0


def cmd_export_attention(args):
    ds = read_manifest(args.manifest)
    bags = ds.subset(args.split)
    with nx.precision("float32"):
        model = load_checkpoint(args.checkpoint)
        _, attention = predict(model, bags)
    exports = [AttentionExport.from_scores(b.bag_id, a) for b, a in zip(bags, attention)]
    write_exports(exports, args.out, pgm=args.pgm)
    print(f"wrote {len(exports)} attention files to {args.out}")
    flags = [b.flags for b in bags]
    if any(f is not None and f.any() for f in flags):
        recovery, baseline = witness_recovery(attention, flags)
        print(f"witness recovery {recovery:.4f} (uniform baseline {baseline:.4f}, ratio {recovery / baseline:.2f})")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate-temperature": cmd_ablate_temperature, "export-attention": cmd_export_attention}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except DQMILError as exc:
        print(f"dqmil: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse: --help exits 0, usage errors exit 1
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dqmil: usage error: {exc}", file=sys.stderr)
        return 1
    except (DQMILError, OSError, KeyError) as exc:
        print(f"dqmil: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
