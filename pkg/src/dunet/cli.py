"""``dunet`` command line: synth, scatter, train, eval, compare.

Failures print one JSON line to stderr, ``{"error": <type>, "message": ...,
"exit": <code>}``, and exit nonzero: 2 for bad input (usage, config,
checkpoint, data), 3 for a diverged training run, 1 for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .experiments import ExperimentConfig, compare, load_summary, run_eval, run_train
from .pipeline import DatasetError, generate_synthetic_dataset, load_image, write_dataset
from .scattering import ScatteringConfig, build_filter_bank, save_sct, scattering_transform
from .training import ConfigError, TrainingError, limit_threads

INPUT_ERRORS = (ConfigError, CheckpointError, DatasetError, ValueError, OSError, KeyError)


class UsageError(Exception):
    pass


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_log(out_dir: Path | None):
    root = logging.getLogger("dunet")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out_dir / "train.log", mode="w")
        fh.setFormatter(logging.Formatter("%(name)s %(levelname)s %(message)s"))
        root.addHandler(fh)


# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    samples = generate_synthetic_dataset(args.n, args.seed, args.task, args.size)
    n_test = int(round(args.test_fraction * args.n))
    splits = ["train"] * (args.n - n_test) + ["test"] * n_test
    recs = write_dataset(samples, args.out, splits)
    print(f"wrote {len(recs)} samples to {args.out}")
    return 0


def cmd_scatter(args) -> int:
    img = load_image(args.input)
    x = img[None] if img.ndim == 2 else np.moveaxis(img, -1, 0)
    cfg = ScatteringConfig(J=args.J, L=args.L, order=args.order, input_size=x.shape[1:])
    cfg.validate()
    out = scattering_transform(x, build_filter_bank(cfg), cfg)
    save_sct(args.out, out)
    print(f"wrote {out.coeffs.shape} coefficients ({len(out.paths)} paths) to {args.out}")
    return 0


def _load_cfg(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, warm_start=getattr(args, "warm_start", None),
                              output_dir=args.out)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.validate()
    _setup_log(Path(cfg.output_dir))
    _, res = run_train(cfg)
    last = res.losses[-1] if res.losses else float("nan")
    print(f"trained {len(res.losses)} epochs, final loss {last:.6f}; checkpoint {res.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.eval_out) if args.eval_out else None
    rep = run_eval(cfg, ckpt=args.checkpoint, split=args.split, out_dir=out_dir)
    d = rep.aggregate.get("dice", {})
    print(f"evaluated {len(rep.per_sample)} samples, dice {d.get('mean', float('nan')):.4f}")
    return 0


def cmd_compare(args) -> int:
    entries = []
    for item in args.runs:
        p = Path(item)
        run_dir = p if p.is_dir() else Path(ExperimentConfig.load(p).output_dir)
        entries.append(load_summary(run_dir))
    table = compare(entries)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dunet", description="Scattering-augmented U-Net segmentation experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--task", choices=("fundus", "ultrasound"), default="fundus")
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=_positive, default=128)
    s.add_argument("--test-fraction", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("scatter", help="scattering coefficients of one image (SCT1 file)")
    s.add_argument("--input", required=True)
    s.add_argument("--J", type=_positive, default=3)
    s.add_argument("--L", type=_positive, default=8)
    s.add_argument("--order", type=int, choices=(0, 1, 2), default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scatter)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        s = sub.add_parser(name, help=f"{name} from a JSON experiment config")
        s.add_argument("config")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default=None, help="override output_dir")
        if name == "train":
            s.add_argument("--warm-start", default=None, help="SGW1 checkpoint to start from")
            s.add_argument("--epochs", type=int, default=None)
        else:
            s.add_argument("--checkpoint", default=None, help="default: <output_dir>/model.sgw")
            s.add_argument("--split", default=None, help="default: dataset.eval_split")
            s.add_argument("--eval-out", default=None, help="default: <output_dir>/eval")
        s.set_defaults(func=func)

    s = sub.add_parser("compare", help="table of finished runs, one row per model kind")
    s.add_argument("runs", nargs="+", help="run directories or their config files")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_compare)
    return p


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": msg, "exit": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with limit_threads():
            return args.func(args)
    except UsageError as exc:
        return _fail(exc, 2)
    except TrainingError as exc:
        return _fail(exc, 3)
    except INPUT_ERRORS as exc:
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
