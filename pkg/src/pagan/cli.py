"""Command-line entry point: ``pagan train|metrics|verify|eval``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from pagan.errors import ConfigError, FormatError


def _flag_overrides(extra):
    """Turn leftover ``--key value`` / ``--key=value`` arguments into ``key=value`` items."""
    items, i = [], 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            items.append(key)
            i += 1
            continue
        if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
            raise ConfigError(f"flag --{key} needs a value", key.replace("-", "_"))
        items.append(f"{key}={extra[i + 1]}")
        i += 2
    return items


def cmd_train(args, extra):
    from pagan.config import parse_config
    from pagan.trainer import train

    config = parse_config(args.config, _flag_overrides(extra) + list(args.set or []))
    out = Path(args.out or f"runs/{config.dataset}_seed{config.seed}")
    run_dir = train(config, out, resume=args.resume)
    print((run_dir / "manifest.txt").read_text().strip())
    return 0


def _load_pnm_dir(path):
    from pagan.data import read_pnm

    files = sorted(p for p in Path(path).iterdir() if p.suffix in (".pgm", ".ppm"))
    if not files:
        raise FileNotFoundError(f"no .pgm/.ppm images in {path}")
    return np.stack([read_pnm(f).astype(np.float32) / np.float32(127.5) - np.float32(1.0)
                     for f in files])


def cmd_metrics(args, extra):
    from pagan.config import parse_config
    from pagan.data import load_dataset
    from pagan.metrics import ProbeConfig, evaluate, train_probe_classifier
    from pagan.trainer import Trainer, final_report

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ckpt:
        dataset = None
        if args.data:
            dataset = load_dataset(parse_config(overrides={"dataset": args.data}))
        report = final_report(Trainer.from_checkpoint(args.ckpt, dataset))
    else:
        if not (args.originals and args.reconstructions and args.data):
            raise ConfigError("metrics needs --ckpt, or --originals/--reconstructions with --data")
        dataset = load_dataset(parse_config(overrides={"dataset": args.data}))
        if dataset.labels is None or dataset.items.ndim != 4:
            raise ConfigError(f"dataset {args.data!r} has no labeled images for a probe", "data")
        probe = train_probe_classifier(dataset.items, dataset.labels, ProbeConfig())
        orig = _load_pnm_dir(args.originals)
        rec = _load_pnm_dir(args.reconstructions)
        samples = _load_pnm_dir(args.samples) if args.samples else rec
        splits = min(10, len(orig))
        report = evaluate(probe, orig, rec, samples, splits)
    report.write(out / "metrics.txt")
    print("\n".join(report.lines()))
    return 0


def cmd_verify(args, extra):
    from pagan.verify import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_eval(args, extra):
    from pagan.trainer import Trainer, final_report, write_snapshots

    trainer = Trainer.from_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshots(trainer, out)
    report = final_report(trainer)
    report.write(out / "metrics.txt")
    print("\n".join(report.lines()))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="pagan", description="Pairwise augmented GAN toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; unknown --key value flags override the config")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="run directory (default runs/<dataset>_seed<seed>)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train, allow_extra=True)

    p = sub.add_parser("metrics", help="compute a MetricReport")
    p.add_argument("--ckpt", help="checkpoint to evaluate")
    p.add_argument("--data", help="dataset id (ring, shapes, mnist)")
    p.add_argument("--originals", help="directory of original images (.pgm/.ppm)")
    p.add_argument("--reconstructions", help="directory of reconstructions, aligned by file name")
    p.add_argument("--samples", help="directory of generated samples (default: reconstructions)")
    p.add_argument("--out", default=".", help="where metrics.txt goes")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("verify", help="run the finite-support identity checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="write sample/reconstruction grids and metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and not getattr(args, "allow_extra", False):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except (ConfigError, FormatError, FileNotFoundError, OSError) as exc:
        print(f"pagan {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
