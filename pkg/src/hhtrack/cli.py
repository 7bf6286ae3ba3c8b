"""Command-line entry point: ``hhtrack {synth,train,track,eval,gradcheck,selftest}``.

Exit status is 0 on success, 1 when inputs fail validation or a check fails,
and 2 on usage errors. Setting ``SEED`` overrides the seed in spec and config
files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checks import gradient_suite, selftest
from .dataio import (
    SequenceFormatError,
    SynthSpec,
    load_sequence,
    read_boxes,
    read_sequence,
    seed_from_env,
    synthesize,
    write_boxes,
    write_json,
)
from .metrics import evaluate_ope
from .model import ModelConfig, init_model
from .training import (
    PairConfig,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    make_pairs,
    save_checkpoint,
    train,
)
from .tracker import HHTracker, TrackerConfig, track_sequence

log = logging.getLogger("hhtrack")


class ValidationError(Exception):
    pass


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ValidationError(f"cannot read {path}: {err}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return data


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(_load_json(args.spec))
    spec.seed = seed_from_env(spec.seed)
    out = synthesize(spec, args.out)
    print(f"wrote {spec.frame_count} frames to {out}")
    return 0


def train_settings(config: dict) -> tuple[ModelConfig, TrainConfig, PairConfig, int, int]:
    """Split a training config document into its typed parts.

    Keys: ``model`` (model fields), ``train`` (optimizer, stages, seed),
    ``pairs`` (``count``, ``seed`` plus sampling fields). ``SEED`` overrides
    both seeds.
    """
    model_cfg = ModelConfig.from_dict(config.get("model", {}))
    train_doc = dict(config.get("train", {}))
    seed = seed_from_env(train_doc.get("seed", 0))
    train_doc["seed"] = seed
    train_cfg = TrainConfig.from_dict(train_doc)
    pairs_doc = dict(config.get("pairs", {}))
    count = int(pairs_doc.pop("count", 64))
    pair_seed = seed_from_env(int(pairs_doc.pop("seed", 0)))
    return model_cfg, train_cfg, PairConfig(**pairs_doc), count, pair_seed


def cmd_train(args) -> int:
    config = _load_json(args.config)
    model_cfg, train_cfg, pair_cfg, count, pair_seed = train_settings(config)
    meta, frames, boxes = load_sequence(args.data)
    if meta.channels != model_cfg.channels:
        raise ValidationError(f"sequence has {meta.channels} bands, model expects {model_cfg.channels}")
    pairs = make_pairs(frames, boxes, count, pair_seed, model_cfg, TrackerConfig(), pair_cfg)
    params = init_model(model_cfg, train_cfg.seed)
    extra = {"train": train_cfg.to_dict(), "pairs": {"count": count, "seed": pair_seed}}
    try:
        params, trace = train(params, pairs, train_cfg, model_cfg)
    except TrainingDiverged as err:
        save_checkpoint(args.out, err.last_good, model_cfg, {**extra, "trace": err.trace, "diverged": str(err)})
        print(f"error: {err}; last good parameters saved to {args.out}", file=sys.stderr)
        return 1
    save_checkpoint(args.out, params, model_cfg, {**extra, "trace": trace})
    print(f"final loss {trace[-1]['loss']:.5f}; checkpoint {args.out}" if trace else f"checkpoint {args.out}")
    return 0


def cmd_track(args) -> int:
    params, model_cfg, _ = load_checkpoint(args.ckpt)
    meta, frames, boxes = read_sequence(args.seq)
    if meta.channels != model_cfg.channels:
        raise ValidationError(f"sequence has {meta.channels} bands, model expects {model_cfg.channels}")
    tracker = HHTracker(params, model_cfg, TrackerConfig(update_interval=args.update_interval))
    pred = track_sequence(tracker, frames, boxes[0])
    write_boxes(args.out, pred)
    print(f"tracked {len(pred)} frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = read_boxes(args.pred)
    gt_path = Path(args.gt)
    gt = read_sequence(gt_path)[2] if gt_path.is_dir() else read_boxes(gt_path)
    if len(pred) != len(gt):
        raise ValidationError(f"{len(pred)} predicted boxes for {len(gt)} ground-truth boxes")
    report = evaluate_ope(pred, gt).to_report()
    write_json(args.report, report)
    print(f"DP@20px {report['dp']:.4f}  AUC {report['auc']:.4f}  mean IoU {report['mean_iou']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_suite(instances=args.instances, tol=args.tol, seed=args.seed)
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.op:<16} max_rel_err {r.max_rel_err:.3e}  "
              f"instances {r.instances}  redrawn {r.redrawn}  {r.seconds:.2f}s")
    if args.report:
        write_json(args.report, {"tol": args.tol, "ops": [r.to_dict() for r in results]})
    return 0 if all(r.passed for r in results) else 1


def cmd_selftest(args) -> int:
    checks = selftest()
    for c in checks:
        print(f"{'ok  ' if c.passed else 'FAIL'} [{c.suite}] {c.name}" + (f"  ({c.detail})" if c.detail else ""))
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hhtrack", description="Hyperspectral object tracker")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic hyperspectral sequence")
    p.add_argument("--spec", required=True, help="JSON synth spec")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a sequence directory")
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run one-pass tracking from the first ground-truth box")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True, help="predicted boxes, one 'x,y,w,h' line per frame")
    p.add_argument("--update-interval", type=int, default=TrackerConfig.update_interval)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="precision/success curves, DP and AUC")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True, help="sequence directory or ground-truth text file")
    p.add_argument("--report", required=True, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="optional JSON report path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the built-in invariant suites")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, SequenceFormatError, ValueError, KeyError, TypeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
