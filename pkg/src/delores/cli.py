"""Command-line entry point: ``delores {pretrain,probe,finetune,extract,inspect,synth}``.

Exit codes: 0 success, 1 configuration error, 2 data/checkpoint error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config, data, evaluation, trainer
from .augment import NormStats, normalize
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger("delores")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage errors count as configuration errors (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None, help="global seed (falls back to DELORES_SEED, then 0)")
    p.add_argument("--log-level", default="INFO", help="logging level")


def _init_flags(p):
    p.add_argument("--checkpoint", type=Path, default=None, help="pretraining checkpoint to start from")
    p.add_argument("--random-init", action="store_true", help="start from a randomly initialized encoder")


class _DefaultsFormatter(argparse.HelpFormatter):
    """Appends "(default: X)" unless the default is unset or already described."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default in (None, False, argparse.SUPPRESS) or "default" in text:
            return text
        return f"{text} (default: %(default)s)"


def build_parser():
    fmt = _DefaultsFormatter
    parser = _Parser(prog="delores", description="Self-supervised audio representations with a "
                     "redundancy-reduction objective.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="self-supervised pretraining", formatter_class=fmt)
    _common(p)
    p.add_argument("--manifest", type=Path, required=True, help="manifest CSV; its train split is used")
    p.add_argument("--out-dir", type=Path, required=True, help="directory for checkpoint and metrics")
    p.add_argument("--epochs", type=int, default=None, help="override trainer.epochs")
    p.add_argument("--batch-size", type=int, default=None, help="override trainer.batch_size")
    p.add_argument("--workers", type=int, default=None, help="audio decoding threads")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    for name, what in (("probe", "linear probe on frozen embeddings"),
                       ("finetune", "end-to-end finetuning")):
        p = sub.add_parser(name, help=what, formatter_class=fmt)
        _common(p)
        _init_flags(p)
        p.add_argument("--manifest", type=Path, required=True, help="labeled manifest CSV")
        p.add_argument("--out", type=Path, required=True, help="report JSON path")
        p.add_argument("--epochs", type=int, default=None, help="override eval.max_epochs")
        p.add_argument("--batch-size", type=int, default=None, help="override eval.batch_size")
        p.add_argument("--lr", type=float, default=None, help="override eval.lr")
        p.add_argument("--frames", type=int, default=None, help="crop width (default: from clip durations)")
        p.add_argument("--task-name", default=None, help="name shown in the report (default: manifest dir)")

    p = sub.add_parser("extract", help="write 2048-d embeddings per record", formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="pretraining checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="manifest CSV")
    p.add_argument("--out", type=Path, required=True, help="embedding file path")
    p.add_argument("--split", choices=data.SPLITS, default=None, help="only this split (default: all)")
    p.add_argument("--batch-size", type=int, default=64, help="encoder batch size")
    p.add_argument("--frames", type=int, default=None, help="crop width (default: from clip durations)")

    p = sub.add_parser("inspect", help="summarize a checkpoint", formatter_class=fmt)
    p.add_argument("checkpoint", type=Path, help="checkpoint file")
    p.add_argument("--json", action="store_true", help="print the summary as JSON")
    p.add_argument("--log-level", default="WARNING", help="logging level")

    p = sub.add_parser("synth", help="generate the synthetic tone-cluster dataset", formatter_class=fmt)
    p.add_argument("--classes", type=int, default=4, help="number of classes (>= 2)")
    p.add_argument("--per-class", type=int, default=50, help="clips per class")
    p.add_argument("--out-dir", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="generator seed (falls back to DELORES_SEED, then 0)")
    p.add_argument("--duration", type=float, default=1.0, help="clip length in seconds")
    p.add_argument("--splits", default=None,
                   help="per-class allocation, e.g. train=50,val=20,test=20 (default: all train)")
    p.add_argument("--log-level", default="INFO", help="logging level")
    return parser


# -- commands -----------------------------------------------------------------

def _run_config(args, **overrides):
    return config.resolve(args.config, {"seed": args.seed, **overrides})


def cmd_pretrain(args):
    rc = _run_config(args, **{"trainer.epochs": args.epochs, "trainer.batch_size": args.batch_size,
                              "trainer.workers": args.workers})
    cfg = rc.pretrain_config()
    manifest = data.load_manifest(args.manifest)
    rc.write_snapshot(args.out_dir)
    tr = trainer.run_pretraining(manifest, cfg, args.out_dir, resume=args.resume)
    last = tr.metrics[-1] if tr.metrics else {}
    print(f"pretraining finished: {tr.epoch} epochs, {tr.step} steps, final loss {last.get('total', float('nan')):.4f}")
    print(f"checkpoint: {Path(args.out_dir) / trainer.CHECKPOINT_NAME}")
    return EXIT_OK


def _encoder_for(args, rc):
    if args.checkpoint is not None and args.random_init:
        raise ConfigError("--checkpoint and --random-init are mutually exclusive")
    if args.checkpoint is None and not args.random_init:
        raise ConfigError("one of --checkpoint or --random-init is required")
    if args.random_init:
        return evaluation.random_encoder(rc.model, rc.seed), "random"
    enc, _, _ = trainer.load_encoder(args.checkpoint)
    return enc, "pretrained"


def _cmd_eval(args, protocol):
    rc = _run_config(args, **{"eval.max_epochs": args.epochs, "eval.batch_size": args.batch_size,
                              "eval.lr": args.lr, "eval.frames": args.frames})
    encoder, init = _encoder_for(args, rc)
    manifest = data.load_manifest(args.manifest)
    store = data.FeatureStore(manifest, rc.dsp)
    task = evaluation.prepare(manifest, rc.eval.frames, store, batch_size=rc.eval.batch_size)
    adam = rc.eval.adam()
    name = args.task_name or manifest.root.name or "task"
    run = evaluation.linear_probe if protocol == "linear" else evaluation.finetune
    report = run(encoder, task, adam, seed=rc.seed, name=name, init=init)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(args.out)
    rc.write_snapshot(args.out.parent, args.out.stem + ".config.yaml")
    print(report.table())
    return EXIT_OK


def cmd_probe(args):
    return _cmd_eval(args, "linear")


def cmd_finetune(args):
    return _cmd_eval(args, "finetune")


def cmd_extract(args):
    rc = _run_config(args, **{"eval.frames": args.frames})
    encoder, _, ckpt = trainer.load_encoder(args.checkpoint)
    manifest = data.load_manifest(args.manifest)
    store = data.FeatureStore(manifest, rc.dsp)
    records = manifest.split(args.split)
    if not records:
        raise DataError(f"split {args.split!r} is empty" if args.split else "manifest is empty")
    stats = extraction_stats(manifest, store, ckpt)
    frames = rc.eval.frames or data.downstream_frames(manifest, args.split, rc.dsp)
    x = np.concatenate([
        normalize(b.features, stats) for b in data.batch_iter(
            manifest, args.split, args.batch_size, frames, "supervised",
            np.random.default_rng(0), store, shuffle=False)
    ]).astype(np.float32)
    emb = evaluation.embed(encoder, x, args.batch_size)
    checkpoint.save_embeddings(args.out, emb)
    ids_path = args.out.with_name(args.out.name + ".ids")
    ids_path.write_text("".join(r.id + "\n" for r in records), encoding="utf-8")
    rc.write_snapshot(args.out.parent, args.out.stem + ".config.yaml")
    print(f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings to {args.out}")
    return EXIT_OK


def extraction_stats(manifest, store, ckpt):
    """Train-split statistics of the manifest, else the pretraining statistics."""
    train = manifest.split("train")
    if train:
        return NormStats.from_arrays(store.get_many(train))
    ns = ckpt.meta.get("norm_stats")
    if not ns:
        raise DataError("manifest has no train split and the checkpoint has no normalization stats")
    return NormStats(ns["mu"], ns["nu"])


def inspect_summary(path):
    ckpt = checkpoint.load_checkpoint(path)
    meta = ckpt.meta
    groups = {}
    for name, arr in ckpt.arrays.items():
        g = name.split("/", 1)[0]
        groups[g] = groups.get(g, 0) + int(arr.size)
    tail = meta.get("metrics_tail") or []
    return {
        "path": str(path),
        "format_version": checkpoint.VERSION,
        "kind": meta.get("kind"),
        "epoch": meta.get("epoch"),
        "step": meta.get("step"),
        "seed": meta.get("rng", {}).get("seed"),
        "arrays": len(ckpt.arrays),
        "values_per_group": groups,
        "model": meta.get("config", {}).get("model"),
        "last_metrics": tail[-1] if tail else None,
    }


def cmd_inspect(args):
    s = inspect_summary(args.checkpoint)
    if args.json:
        print(json.dumps(s, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"checkpoint   {s['path']} (format v{s['format_version']}, {s['kind']})")
    print(f"progress     epoch {s['epoch']}, step {s['step']}, seed {s['seed']}")
    print(f"arrays       {s['arrays']}")
    for g, n in sorted(s["values_per_group"].items()):
        print(f"  {g:<10} {n:>12,d} values")
    if s["model"]:
        print("model        " + ", ".join(f"{k}={v}" for k, v in s["model"].items()))
    if s["last_metrics"]:
        print("last step    " + json.dumps(s["last_metrics"], sort_keys=True))
    return EXIT_OK


def _parse_splits(text):
    if text is None:
        return None
    out = {}
    for part in text.split(","):
        name, sep, count = part.partition("=")
        if not sep:
            raise ConfigError(f"bad --splits entry {part!r} (expected name=count)")
        try:
            out[name.strip()] = int(count)
        except ValueError as exc:
            raise ConfigError(f"bad --splits count in {part!r}") from exc
    return out


def cmd_synth(args):
    seed = config.resolve(None, {"seed": args.seed}).seed
    manifest = data.synth_dataset(args.out_dir, args.classes, args.per_class, args.duration, seed,
                                  _parse_splits(args.splits))
    print(f"wrote {len(manifest.records)} clips and manifest.csv to {args.out_dir}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "extract": cmd_extract,
    "inspect": cmd_inspect,
    "synth": cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
