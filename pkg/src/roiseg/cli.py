"""Command-line entry point.

    roiseg synth          --config cfg.json --out data/
    roiseg train          --config cfg.json --data data/ --out run/
    roiseg infer          --weights run/model_rf64.wts --image data/case_000/image.vol --out pred/
    roiseg ensemble-infer --weights-rf64 a.wts --weights-rf88 b.wts --weights-rf112 c.wts ...
    roiseg eval           --pred pred/ --data data/ --out eval/
    roiseg crossval       --config cfg.json --data data/ --out cv/
    roiseg analyze        [--variant RF64] [--format table|json] [--golden]
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import analyze, analyze_standard_decoder, compare_to_golden, report
from .config import Config, config_hash, load_config
from .dataio import load_dataset, prep_case
from .inference import (
    InferenceResult,
    crossval,
    ensemble_infer_case,
    evaluate_cases,
    infer_case,
    load_network,
    make_report,
    write_report,
    write_timing,
)
from .metrics import summary_table
from .network import build_default_spec
from .phantom import make_dataset
from .roi import boxes_to_json
from .train import split_cases, train_model
from .volfile import load_volume, save_volume
from .volume import Volume


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.phantom.seed = args.seed
    return cfg


def _out_dir(args, default) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "data")
    names = make_dataset(out, cfg.phantom, cfg.n_cases)
    (out / "dataset.json").write_text(json.dumps(
        {"cases": names, "phantom": cfg.phantom.to_json(), "config_hash": config_hash(cfg)},
        indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(names)} cases to {out}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "run")
    cases = load_dataset(args.data, cfg.train.target_spacing)
    train_cases, val_cases = split_cases(cases, cfg.train)
    summary = train_model(train_cases, val_cases, cfg.train, out)
    doc = {"weights": summary.weights_path, "best_val_dice": summary.best_val_dice,
           "locator_val_dice": summary.locator_val_dice, "steps": summary.steps,
           "phase1_epochs": summary.phase1_epochs_run, "phase2_epochs": summary.phase2_epochs_run,
           "config_hash": config_hash(cfg)}
    (out / "train_summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _infer_one(args, runner):
    cfg = _load_cfg(args)
    out = _out_dir(args, "pred")
    image, _ = load_volume(args.image)
    region_path = Path(args.image).with_name("region.vol")
    if region_path.exists():
        region, _ = load_volume(region_path)
    else:
        # no label available: a zero region still lets prep compute the crop
        region = Volume(np.zeros(image.shape, np.float32), spacing=image.spacing)
    case = prep_case(Path(args.image).parent.name or "case", image, region,
                     cfg.train.target_spacing)
    prob, result = runner(cfg, case)
    name = case.name
    save_volume(out / f"{name}_prob.vol", prob, "image")
    mask = Volume((prob.data > cfg.train.threshold).astype(np.float32), spacing=prob.spacing)
    save_volume(out / f"{name}_mask.vol", mask, "mask")
    (out / f"{name}_boxes.json").write_text(boxes_to_json(result.pyramids))
    write_timing({name: {"loc_s": round(result.loc_seconds, 4),
                         "seg_s": round(result.seg_seconds, 4)}}, out, f"{name}_timing.json")
    print(f"{name}: {len(result.pyramids)} RoI(s), decoder calls {result.decoder_calls}, "
          f"detection_failed={result.detection_failed}")
    return 0


def cmd_infer(args):
    def runner(cfg, case):
        net = load_network(args.weights, cfg.train.rf_variant, seed=cfg.train.seed)
        res = infer_case(net, case, cfg.train)
        return res.prob, res

    return _infer_one(args, runner)


def cmd_ensemble_infer(args):
    def runner(cfg, case):
        nets = {}
        for variant, path in (("RF64", args.weights_rf64), ("RF88", args.weights_rf88),
                              ("RF112", args.weights_rf112)):
            if path:
                nets[variant] = load_network(path, variant, seed=cfg.train.seed)
        mean, members = ensemble_infer_case(nets, case, cfg.train)
        merged = InferenceResult(
            mean, [p for m in members.values() for p in m.pyramids],
            sum(m.decoder_calls for m in members.values()),
            all(m.detection_failed for m in members.values()),
            sum(m.loc_seconds for m in members.values()),
            sum(m.seg_seconds for m in members.values()))
        return mean, merged

    return _infer_one(args, runner)


def cmd_eval(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "eval")
    cases = load_dataset(args.data, cfg.train.target_spacing)
    pred_dir = Path(args.pred)
    results = {}
    for case in cases:
        path = pred_dir / f"{case.name}_prob.vol"
        if path.exists():
            results[case.name], _ = load_volume(path)
    if not results:
        print(f"no <case>_prob.vol files in {pred_dir}", file=sys.stderr)
        return 2
    scored_cases = [c for c in cases if c.name in results]
    scores, agg = evaluate_cases(results, scored_cases, cfg.train.target_spacing)
    report_doc = make_report(scores, agg, [cfg.train.rf_variant], cfg)
    write_report(report_doc, out)
    print(summary_table(scores, agg), end="")
    return 0


def cmd_crossval(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "cv")
    crossval(args.data, out, cfg, k=args.k)
    return 0


def cmd_analyze(args):
    if args.golden:
        problems = compare_to_golden()
        if problems:
            for p in problems:
                print(p, file=sys.stderr)
            return 1
        print("analysis matches golden tables")
        return 0
    spec = build_default_spec(args.variant)
    input_shape = tuple(args.input_shape)
    roi_shape = tuple(args.roi_shape)
    rows = analyze(spec, input_shape, roi_shape)
    rows += analyze_standard_decoder(spec, input_shape)
    text = report(rows, args.format,
                  header=f"{args.variant} input={input_shape} roi={roi_shape}"
                  if args.format == "table" else None)
    print(text, end="")
    if args.out:
        out = _out_dir(args, "analysis")
        ext = "txt" if args.format == "table" else "json"
        (out / f"analysis_{args.variant.lower()}.{ext}").write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roiseg",
                                     description="RoI-aware volumetric lesion segmentation")
    parser.add_argument("--config", help="JSON config path")
    parser.add_argument("--seed", type=int, default=None, help="override config seeds")
    parser.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic phantom dataset")

    p = sub.add_parser("train", help="two-phase training on a dataset")
    p.add_argument("--data", required=True)

    p = sub.add_parser("infer", help="single-model whole-volume inference")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("ensemble-infer", help="average the three RF variants")
    p.add_argument("--weights-rf64", required=True)
    p.add_argument("--weights-rf88", required=True)
    p.add_argument("--weights-rf112", required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("eval", help="score predictions against labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("crossval", help="k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("analyze", help="receptive-field / memory analysis")
    p.add_argument("--variant", default="RF64", choices=["RF64", "RF88", "RF112"])
    p.add_argument("--format", default="table", choices=["table", "json"])
    p.add_argument("--input-shape", type=int, nargs=3, default=[40, 180, 320])
    p.add_argument("--roi-shape", type=int, nargs=3, default=[24, 96, 96])
    p.add_argument("--golden", action="store_true")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "ensemble-infer": cmd_ensemble_infer,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
