"""Command line entry points.

Exit codes: 0 success, 2 bad configuration or arguments, 3 missing inputs
(datasets, checkpoints, files), 4 training diverged to a non-finite loss.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import (ConfigError, DataError, MissingCheckpointError,
                     NonFiniteLossError)
from .metrics import evaluate_directory
from .synth import SynthConfig, synthesize_dataset
from .trainer import TrainConfig, export_pseudo_targets, predict, train_stage


def _cmd_synth_data(args):
    cfg = SynthConfig.from_config(load_config(args.config))
    out = synthesize_dataset(cfg, args.out)
    print(f"wrote {cfg.num_samples} samples to {out}")
    return 0


def _cmd_train(args):
    cfg = TrainConfig.from_config(load_config(args.config))
    result = train_stage(cfg, args.stage)
    print(f"stage {result.stage}: {result.steps} steps in {result.duration_s:.1f}s, "
          f"final loss {result.totals[-1]:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log: {result.loss_log_path}")
    return 0


def _cmd_pseudo_gt(args):
    out = export_pseudo_targets(load_config(args.config), args.out)
    print(f"wrote pseudo targets under {out}")
    return 0


def _cmd_predict(args):
    written = predict(args.checkpoint, args.input_dir, args.out)
    print(f"wrote {len(written)} saliency maps to {args.out}")
    return 0


def _cmd_eval(args):
    report = evaluate_directory(
        args.pred, args.gt, tags_path=args.tags, report_path=args.report)
    mean = report.mean
    print(f"samples: {report.num_samples}")
    print(f"MAE {mean.mae:.4f}  S {mean.s:.4f}  "
          f"Fadp {mean.f_adp:.4f}  Fmean {mean.f_mean:.4f}  Fmax {mean.f_max:.4f}  "
          f"Eadp {mean.e_adp:.4f}  Emean {mean.e_mean:.4f}  Emax {mean.e_max:.4f}")
    for tag, info in report.tags.items():
        tag_mean = info["mean"]
        print(f"[{tag}] n={info['count']}  MAE {tag_mean.mae:.4f}  S {tag_mean.s:.4f}  "
              f"Fmax {tag_mean.f_max:.4f}  Emax {tag_mean.e_max:.4f}")
    if args.report:
        print(f"report: {args.report}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vdtsal",
        description="Quality-aware selective fusion for visible-depth-thermal "
                    "salient object detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic three-modality dataset")
    p.add_argument("--config", required=True, help="synthesis config file")
    p.add_argument("--out", required=True, help="dataset root to write")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--config", required=True, help="training config file")
    p.add_argument("--stage", required=True, type=int, choices=(1, 2, 3))
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("pseudo-gt", help="export pseudo quality targets and "
                                         "predicted quality maps as PNGs")
    p.add_argument("--config", required=True, help="config file with data_root and checkpoint_in")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_pseudo_gt)

    p = sub.add_parser("predict", help="write saliency maps for a directory of samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input_dir", required=True,
                   help="directory with V/, D/ and T/ subdirectories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="score saliency maps against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted maps")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    p.add_argument("--tags", default=None, help="optional manifest.tsv for per-tag breakdown")
    p.add_argument("--report", default=None, help="write a JSON report (plus curves CSV) here")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MissingCheckpointError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
