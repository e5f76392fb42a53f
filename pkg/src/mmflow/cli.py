"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags, missing inputs, unknown
record), 2 runtime failure (I/O errors, non-finite training state).

Seeds: every random stream is a Philox generator keyed by
``sha256("<seed>/<subcommand scope>/<purpose>")`` (see :mod:`mmflow.rng`):
``synth/pair``, ``synth/event-counts``, ``train/init``, ``train/step``,
``train/order``, ``sample/noise``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import rng as rng_mod
from .arrays import ArrayFormatError, save_array
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, load_config
from .dataset import DatasetError, load_examples
from .flow import Trainer
from .frontend import FrontendError
from .manifest import ManifestError, read_manifest
from .model import FlowNetwork, NonFiniteError, set_state
from .synth import SynthError, envelope_lag, write_synthetic_dataset

log = logging.getLogger("mmflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("expected a non-negative integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmflow", description="multimodal flow-matching audio latent generator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-synthetic", help="write synthetic aligned pairs and a manifest")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--pairs", required=True, type=_positive_int)
    p.add_argument("--duration", type=float, default=8.0)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--config", type=Path, help="config supplying feature widths")

    p = sub.add_parser("train", help="train or resume training")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resume", type=Path)
    p.add_argument("--steps", required=True, type=_nonneg_int,
                   help="number of steps to run (in addition to a resumed checkpoint's)")
    p.add_argument("--log", type=Path, help="metrics log (default: <out>.metrics.log)")

    p = sub.add_parser("sample", help="generate latents for one manifest record")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--id", required=True, dest="record_id")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-video", action="store_true", help="drop video and sync features")
    p.add_argument("--no-text", action="store_true", help="drop the caption")
    p.add_argument("--no-lyrics", action="store_true")
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--t-start", type=float)
    p.add_argument("--seed", type=_nonneg_int, default=0)

    p = sub.add_parser("eval-alignment", help="per-record envelope lag of generated latents")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--steps", type=_positive_int)

    p = sub.add_parser("inspect", help="print checkpoint contents")
    p.add_argument("--ckpt", required=True, type=Path)
    return parser


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")


def _model_from_checkpoint(ckpt, use_ema: bool = True) -> FlowNetwork:
    model = FlowNetwork(ckpt.config)
    set_state(model, ckpt.ema if (use_ema and ckpt.ema) else ckpt.params)
    model.eval()
    return model


def cmd_make_synthetic(args) -> int:
    cfg = ModelConfig()
    if args.config:
        _require_file(args.config, "config")
        cfg = load_config(args.config)
    if args.duration < 1:
        raise UsageError("--duration must be at least 1 second")
    if np.ceil(args.duration - 1e-9) > cfg.max_seconds:
        raise UsageError(f"--duration exceeds max_seconds={cfg.max_seconds}")
    records = write_synthetic_dataset(args.out, args.pairs, args.duration, args.seed, cfg)
    print(f"wrote {len(records)} pairs to {args.out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    _require_file(args.config, "config")
    _require_file(args.manifest, "manifest")
    cfg = load_config(args.config)
    records = read_manifest(args.manifest, mode="train")
    if not records:
        raise UsageError("manifest is empty")
    if args.resume:
        _require_file(args.resume, "checkpoint")
        ckpt = load_checkpoint(args.resume)
        if ckpt.config != cfg:
            raise UsageError("--config differs from the resumed checkpoint's config")
        trainer = Trainer.from_checkpoint(ckpt, FlowNetwork(cfg))
    else:
        torch.manual_seed(rng_mod.derive_key(cfg.seed, "train", "init") % (2 ** 63))
        trainer = Trainer(FlowNetwork(cfg), cfg)
    examples = load_examples(records, cfg, args.manifest.parent)
    log_path = args.log or args.out.with_name(args.out.name + ".metrics.log")

    from .training import train_loop

    with open(log_path, "a", encoding="utf-8") as fh:
        def on_step(res):
            fh.write(res.log_line() + "\n")

        def on_checkpoint(tr):
            save_checkpoint(tr.to_checkpoint(), args.out)

        train_loop(trainer, examples, args.steps, on_step=on_step, on_checkpoint=on_checkpoint)
    save_checkpoint(trainer.to_checkpoint(), args.out)
    print(f"step={trainer.step} checkpoint={args.out}")
    return 0


def _load_for_inference(args):
    _require_file(args.ckpt, "checkpoint")
    _require_file(args.manifest, "manifest")
    ckpt = load_checkpoint(args.ckpt)
    records = read_manifest(args.manifest, mode="infer")
    if not records:
        raise UsageError("manifest is empty")
    return ckpt, records


def cmd_sample(args) -> int:
    from .training import generate

    ckpt, records = _load_for_inference(args)
    matches = [r for r in records if r.id == args.record_id]
    if not matches:
        raise UsageError(f"unknown record id {args.record_id!r}")
    cfg = ckpt.config
    example = load_examples(matches, cfg, args.manifest.parent, load_latents=False)[0]
    drop = []
    if args.no_video:
        drop += ["video", "sync"]
    if args.no_text:
        drop.append("caption")
    if args.no_lyrics:
        drop.append("lyrics")
    model = _model_from_checkpoint(ckpt)
    out = generate(model, [example], cfg, args.seed, drop=drop, steps=args.steps,
                   cfg_scale=args.cfg_scale, t_start=args.t_start)[0]
    save_array(args.out, out)
    print(f"wrote {out.shape[0]}x{out.shape[1]} latents to {args.out}")
    return 0


def cmd_eval_alignment(args) -> int:
    from .training import generate

    ckpt, records = _load_for_inference(args)
    cfg = ckpt.config
    examples = load_examples(records, cfg, args.manifest.parent)
    missing = [e.record.id for e in examples if e.latents is None]
    if missing:
        raise UsageError(f"records without reference latents: {missing}")
    model = _model_from_checkpoint(ckpt)
    outs = generate(model, examples, cfg, args.seed, drop=("caption",), steps=args.steps)
    lags = [envelope_lag(o, e.latents) for o, e in zip(outs, examples)]
    abs_lags = np.abs(lags)
    report = {
        "records": [{"id": e.record.id, "lag": int(k)} for e, k in zip(examples, lags)],
        "median_abs_lag": float(np.median(abs_lags)),
        "mean_abs_lag": float(abs_lags.mean()),
        "max_abs_lag": int(abs_lags.max()),
    }
    args.out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"median |lag| = {report['median_abs_lag']} frames over {len(lags)} records")
    return 0


def cmd_inspect(args) -> int:
    from .config import dump_config

    _require_file(args.ckpt, "checkpoint")
    ckpt = load_checkpoint(args.ckpt)
    print(dump_config(ckpt.config), end="")
    print(f"step = {ckpt.step}")
    print(f"parameters = {ckpt.parameter_count()}")
    for name in sorted(ckpt.params):
        print(f"{name}\t{'x'.join(map(str, ckpt.params[name].shape))}")
    return 0


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval-alignment": cmd_eval_alignment,
    "inspect": cmd_inspect,
}

# malformed inputs the operator has to fix are usage errors
USAGE_ERRORS = (UsageError, ConfigError, ManifestError, FrontendError, DatasetError,
                ArrayFormatError, SynthError)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, CheckpointError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
