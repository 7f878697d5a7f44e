"""Command-line entry point (``msedensenet``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as D
from . import metrics as M
from . import nn
from . import pipeline as P
from .checkpoint import CheckpointError


def _config(args) -> P.Config:
    overrides = {"seed": args.seed, "strict_determinism": True if args.strict_determinism else None}
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    if getattr(args, "data_dir", None):
        overrides["data_dir"] = args.data_dir
    if getattr(args, "cap_class", None):
        overrides["cap_class"] = args.cap_class
    return P.load_config(args.config, args.profile, **overrides)


def _print_report(cm: M.ConfusionMatrix, rep: M.MetricsReport) -> None:
    print("confusion matrix (rows = actual, columns = predicted):")
    for row in cm.counts.tolist():
        print("  " + " ".join(f"{v:6d}" for v in row))
    print(rep.format_table())
    for line in rep.json_lines():
        print(line)


def cmd_train_backbone(args, head: str) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    with P.determinism(cfg.strict_determinism):
        train, val = P.load_data(cfg)
        net, hist = P.train_backbone(cfg, head, train, val, out)
    name = "cls" if head == "classification" else "reg"
    (out / f"{name}_history.jsonl").write_text("\n".join(hist.json_lines()) + "\n", encoding="utf-8")
    best = hist.best
    print(f"{head}: best epoch {best.epoch}, validation {'accuracy' if hist.maximize else 'MSE'} {best.val_metric:.4f}")
    print(f"checkpoint: {out / f'{name}_best.msed'}")
    if head == "regression":
        sev = P.severity_by_stage(net, val)
        print("mean severity by stage 0..4: " + ", ".join(f"{s:.3f}" for s in sev))
    return 0


def cmd_train_fusion(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    cls_net = P.load_checkpoint(args.cls or out / "cls_best.msed")
    reg_net = P.load_checkpoint(args.reg or out / "reg_best.msed")
    if not isinstance(cls_net, nn.SEDenseNet) or not isinstance(reg_net, nn.SEDenseNet):
        raise CheckpointError("train-fusion needs two backbone checkpoints")
    with P.determinism(cfg.strict_determinism):
        train, val = P.load_data(cfg)
        model, hist = P.train_fusion(cfg, cls_net, reg_net, train, val, out)
        cm, rep = P.evaluate(model, val)
    (out / "fusion_history.jsonl").write_text("\n".join(hist.json_lines()) + "\n", encoding="utf-8")
    _print_report(cm, rep)
    return 0


def cmd_train_all(args) -> int:
    cfg = _config(args)
    result = P.train_multitask(cfg)
    print(result.summary())
    print(f"outputs written to {cfg.output_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model = P.load_checkpoint(args.checkpoint)
    _, val = P.load_data(cfg)
    cm, rep = P.evaluate(model, val)
    _print_report(cm, rep)
    return 0


def cmd_predict(args) -> int:
    model = P.load_checkpoint(args.checkpoint)
    if not isinstance(model, nn.FusionModel):
        raise CheckpointError("predict needs a fusion checkpoint (train-fusion or train-all output)")
    h, w, _ = model.cls.spec.input_size
    for path in args.images:
        raw = D.read_image(path).transpose(2, 0, 1)
        sample = D.resize_normalize(D.LabeledSample(Path(path).stem, raw, 0), (h, w))
        probs, severity = P.predict(model, sample.image)
        stage = int(np.argmax(probs))
        print(
            json.dumps(
                {
                    "image": str(path),
                    "stage": stage,
                    "stage_name": D.STAGE_NAMES[stage],
                    "probs": [round(float(p), 6) for p in probs],
                    "severity": float(severity),
                }
            )
        )
    return 0


def cmd_metrics(args) -> int:
    cm = M.ConfusionMatrix.from_csv(args.cm)
    names = D.STAGE_NAMES if cm.num_classes == D.NUM_STAGES else ()
    rep = M.report(cm, names)
    print(rep.format_table())
    for line in rep.json_lines():
        print(line)
    return 0


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    ds = D.synth_generate(args.per_class, args.size or cfg.image_size, P.derive_seed(cfg.seed, "synth-export"), args.prefix)
    path = D.export_dataset(ds, args.out)
    print(f"wrote {len(ds)} images and {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--profile", choices=sorted(P.PROFILES), default="desk")
    common.add_argument("--strict-determinism", action="store_true", help="single-threaded BLAS for bitwise reruns")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="msedensenet", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, data_args=True):
        p = sub.add_parser(name, help=help_text, parents=[common])
        if data_args:
            p.add_argument("--output-dir", help="directory for checkpoints and reports")
            p.add_argument("--data-dir", help="image folder with labels.csv (default: synthetic data)")
            p.add_argument("--cap-class", help="per-class cap such as 0:10000")
        return p

    add("train-cls", "train the classification backbone").set_defaults(func=lambda a: cmd_train_backbone(a, "classification"))
    add("train-reg", "train the regression backbone").set_defaults(func=lambda a: cmd_train_backbone(a, "regression"))
    p = add("train-fusion", "train the fusion MLP on two frozen backbone checkpoints")
    p.add_argument("--cls", help="classification checkpoint (default: <output-dir>/cls_best.msed)")
    p.add_argument("--reg", help="regression checkpoint (default: <output-dir>/reg_best.msed)")
    p.set_defaults(func=cmd_train_fusion)
    add("train-all", "run all three phases and write the validation report").set_defaults(func=cmd_train_all)
    p = add("evaluate", "confusion matrix and report for a checkpoint on the validation split")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_evaluate)
    p = add("predict", "stage probabilities and severity for PNG/PPM images", data_args=False)
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)
    p = add("metrics", "report for a confusion-matrix CSV (rows = actual)", data_args=False)
    p.add_argument("--cm", required=True, help="N x N integer CSV")
    p.set_defaults(func=cmd_metrics)
    p = add("synth-data", "write a synthetic labelled image folder", data_args=False)
    p.add_argument("out")
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, help="image side (default: config image_size)")
    p.add_argument("--prefix", default="synth")
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
