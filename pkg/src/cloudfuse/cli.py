"""Command line entry point: ``cloudfuse {synth,mask,train,eval,predict,ablate}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure
(including a non-finite training loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from cloudfuse import cloud_mask as cm
from cloudfuse import raster_store as rs
from cloudfuse.errors import CloudfuseError, ValidationError
from cloudfuse.harness import TrainConfig, ablation_pair, evaluate, load_checkpoint, load_config, train
from cloudfuse.reconstruction import export

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("cloudfuse")


def _write_json(path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _config(args, base: TrainConfig | None = None) -> TrainConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = base if base is not None else TrainConfig.micro()
    return cfg.update(
        learning_rate=args.lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed, alpha=args.alpha
    )


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    ids = []
    for k in range(args.count):
        t = rs.make_synthetic_triplet(args.seed + k, args.size, args.size, args.fraction)
        rs.save_triplet(out, t)
        ids.append(t.id)
    _write_json(None, {"written": ids, "directory": str(out)})
    return EXIT_OK


def cmd_mask(args) -> int:
    opt = rs.load_patch(args.input, "optical")
    mask = cm.refined_mask(opt, args.threshold)
    rs.save_patch(args.out, mask.values, kind="mask")
    summary = {"cloud_fraction": mask.fraction, "mask": str(args.out)}
    if args.weights:
        rs.save_patch(args.weights, cm.weight_map(mask, args.alpha).values, kind="weight")
        summary["weights"] = str(args.weights)
    _write_json(None, summary)
    return EXIT_OK


def cmd_train(args) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    cfg = _config(args, resume.config if resume else None)
    if resume:
        load_checkpoint(args.resume, expected=cfg)
    log.info("config %s", json.dumps(cfg.to_dict(), sort_keys=True))
    ckpt = train(cfg, args.data, resume=resume, out=args.out)
    _write_json(None, {"checkpoint": str(args.out), "step": ckpt.step, "final_loss": ckpt.history[-1], "config": cfg.to_dict()})
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    report = evaluate(ckpt, args.data)
    _write_json(args.report, {"config": ckpt.config.to_dict(), "step": ckpt.step, **report.to_dict()})
    return EXIT_OK


def cmd_predict(args) -> int:
    from cloudfuse.metrics import patch_metrics
    from cloudfuse.visualize import write_grid

    ckpt = load_checkpoint(args.ckpt)
    opt = rs.load_patch(args.opt, "optical")
    sar = rs.load_patch(args.sar, "sar")
    if opt.bands.shape[1:] != sar.channels.shape[1:]:
        raise ValidationError(f"optical {opt.bands.shape} and SAR {sar.channels.shape} sizes differ")
    ckpt.config.fusion().check_size(*opt.bands.shape[1:])
    model = ckpt.build_model()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        pred = model(torch.from_numpy(opt.bands[None]).to(dtype), torch.from_numpy(sar.channels[None]).to(dtype))
    out = export(pred[0])
    rs.save_patch(args.out, rs.OpticalPatch(out))
    summary = {"prediction": str(args.out)}
    truth = rs.load_patch(args.gt, "optical").bands if args.gt else None
    if truth is not None:
        row = patch_metrics(Path(args.opt).stem, truth, out, cm.refined_mask(opt))
        summary["metrics"] = row.to_dict()
    if args.grid:
        summary["grid"] = str(write_grid(args.grid, opt.bands, sar.channels, out, truth))
    _write_json(None, summary)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    report = ablation_pair(cfg, args.data, args.seeds, eval_data=args.eval_data)
    _write_json(args.report, report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cloudfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic (cloudy, clear, sar) triplets")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--fraction", type=float, default=0.5)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mask", help="refined cloud mask (and optional weight map) of an optical patch")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--weights")
    s.add_argument("--alpha", type=float, default=cm.DEFAULT_ALPHA)
    s.add_argument("--threshold", type=float, default=cm.CLOUD_THRESHOLD)
    s.set_defaults(func=cmd_mask)

    def training_flags(s):
        s.add_argument("--config", help="JSON config; defaults to the micro architecture")
        s.add_argument("--data", required=True)
        s.add_argument("--lr", type=float)
        s.add_argument("--steps", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--alpha", type=float)

    s = sub.add_parser("train", help="train and write a checkpoint")
    training_flags(s)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics report for a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", default="-")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="cloud-free prediction for one patch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--opt", required=True)
    s.add_argument("--sar", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--gt", help="clear reference; adds metrics and a ground-truth panel")
    s.add_argument("--grid", help="PNG with cloudy | SAR | prediction | ground truth panels")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ablate", help="weighted vs uniform loss over several seeds")
    training_flags(s)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--eval-data")
    s.add_argument("--report", default="-")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CloudfuseError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
