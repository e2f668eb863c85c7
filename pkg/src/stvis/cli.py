"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import harness
from .config import ConfigError, RunConfig, load_config
from .gradcheck import run_gradcheck
from .synthclip import SCENARIOS, generate_clip, load_clip, save_clip
from .tensorio import FormatError

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    return cfg.replace(**overrides) if overrides else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    result = harness.train(cfg, out)
    m = result.metrics
    print(f"final loss {m.final_loss:.4f}  mean IoU {m.mean_iou:.3f}  "
          f"track consistency {m.track_consistency:.3f}  separation {m.separation:.3f}")
    print(f"wrote {out / 'loss_log.jsonl'}, {out / 'metrics.json'}, {out / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, saved = harness.load_checkpoint(args.checkpoint, cfg if args.config else None)
    eval_cfg = cfg if args.config else saved
    if args.clips:
        clips = harness.load_clips(args.clips)
    else:
        clips = harness.make_clips(eval_cfg, offset=eval_cfg.data.eval_seed_offset)
    out = _out(args)
    metrics, _ = harness.evaluate(model, clips, eval_cfg)
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics.as_dict(), fh, indent=1)
    doc = harness.write_predictions(model, clips, eval_cfg, out)
    jsonschema.validate(doc, harness.PREDICTION_SCHEMA)
    print(f"{metrics.n_clips} clips  loss {metrics.final_loss:.4f}  mean IoU {metrics.mean_iou:.3f}  "
          f"track consistency {metrics.track_consistency:.3f}  separation {metrics.separation:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed or 0)
    print(report.table())
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    path = out / f"ablate_{args.axis}.csv"
    rows = harness.ablate(cfg, args.axis, path)
    for row in rows:
        print(f"{row['variant']:<28} loss {row['final_loss']:.4f}  IoU {row['mean_iou']:.3f}  "
              f"consistency {row['track_consistency']:.3f}  separation {row['separation']:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_dump(args) -> int:
    model, cfg = harness.load_checkpoint(args.checkpoint)
    if args.clip:
        clip = load_clip(args.clip)
    else:
        d = cfg.data
        clip = generate_clip(cfg.seed if args.seed is None else args.seed, d.scenario, d.n_frames,
                             d.height, d.width, d.n_instances)
    out = _out(args)
    harness.dump_attention(model, clip, out)
    doc = harness.dump_embeddings(model, clip, cfg, out)
    print(f"wrote attention maps and {len(doc['entries'])} embeddings to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    cfg = _config(args)
    scenario = args.scenario or cfg.data.scenario
    d = cfg.data
    out = _out(args)
    for i in range(args.count):
        clip = generate_clip(cfg.seed + i, scenario, d.n_frames, d.height, d.width, d.n_instances)
        save_clip(clip, out)
    print(f"wrote {args.count} {scenario} clips to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stvis", description="Toy spatio-temporal video instance segmentation.")
    parser.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a fixed pool of synthetic clips")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="forward-only metrics and prediction dump")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clips", help="directory of clip_<seed> folders (default: held-out generated clips)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks on a tiny config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train each variant of one ablation axis")
    p.add_argument("--axis", required=True, choices=("components", "k_inter", "fusion"))
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump", help="attention maps and box-query embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", help="clip_<seed> directory (default: generate from the checkpoint config)")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("synth", help="write synthetic clips to disk")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, jsonschema.ValidationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
