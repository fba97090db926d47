"""Whole-volume inference, RF-variant ensembling, evaluation and cross-validation."""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config, TrainConfig, config_hash
from .dataio import PreppedCase, load_dataset
from .metrics import aggregate, score_case, summary_table
from .network import Network, build_default_spec
from .preprocess import uncrop
from .roi import build_pyramid, crop_pyramid, extract_boxes, paste_predictions
from .train import train_model
from .volume import Volume

VARIANT_ORDER = ("RF64", "RF88", "RF112")


@dataclass
class InferenceResult:
    prob: Volume                  # whole-volume probabilities, original extent
    pyramids: list                # one BBoxPyramid per detected RoI
    decoder_calls: int
    detection_failed: bool
    loc_seconds: float = 0.0
    seg_seconds: float = 0.0


def load_network(weights_path, rf_variant, seed=0) -> Network:
    net = Network(build_default_spec(rf_variant, seed=seed))
    net.load_weights(weights_path)
    return net


def infer_prepared(net: Network, x: Volume, tcfg: TrainConfig) -> InferenceResult:
    """Run the network on an already-preprocessed (cropped) volume."""
    t0 = time.perf_counter()
    f1, f2, f3 = net.encoder_forward(x)
    loc = net.locator_forward(f3)
    boxes = extract_boxes(loc, tcfg.threshold, tcfg.min_voxels)
    t1 = time.perf_counter()
    canvas = Volume(np.zeros(x.shape, np.float32), spacing=x.spacing)
    pyramids = []
    calls = 0
    for box in boxes:
        pyr = build_pyramid(box, margin=tcfg.roi_margin, extents=f3.spatial)
        seg1, _ = net.decoder_forward(crop_pyramid(f1, f2, f3, pyr))
        canvas = paste_predictions(canvas, pyr.box1, seg1)
        pyramids.append(pyr)
        calls += 1
    t2 = time.perf_counter()
    return InferenceResult(canvas, pyramids, calls, detection_failed=not boxes,
                           loc_seconds=t1 - t0, seg_seconds=t2 - t1)


def infer_case(net: Network, case: PreppedCase, tcfg: TrainConfig) -> InferenceResult:
    """Inference on a preprocessed case, un-cropped back to the case's
    original (pre-crop) extent."""
    res = infer_prepared(net, case.image, tcfg)
    res.prob = uncrop(res.prob, case.crop)
    return res


def ensemble_infer_case(nets: dict, case: PreppedCase, tcfg: TrainConfig):
    """Voxelwise mean of the member probability maps (float64 accumulation).

    Returns (mean_prob, {variant: InferenceResult}).
    """
    missing = [v for v in VARIANT_ORDER if v not in nets]
    if missing:
        raise ValueError(f"ensemble needs all three variants; missing {missing}")
    members = {}
    acc = None
    for variant in VARIANT_ORDER:
        res = infer_case(nets[variant], case, tcfg)
        members[variant] = res
        m = res.prob.data.astype(np.float64)
        acc = m if acc is None else acc + m
    mean = (acc / len(VARIANT_ORDER)).astype(np.float32)
    return Volume(mean, spacing=case.image.spacing), members


def evaluate_cases(results: dict, cases, spacing) -> tuple:
    """Score {case_name: prob Volume} against each case's region label."""
    by_name = {c.name: c for c in cases}
    scores = []
    for name in sorted(results):
        case = by_name[name]
        gt = uncrop(case.region, case.crop)
        scores.append(score_case(name, results[name], gt, spacing))
    return scores, aggregate(scores)


def make_report(scores, agg, variants, cfg: Config) -> dict:
    return {
        "cases": [s.to_json() for s in scores],
        "aggregate": agg,
        "variants": list(variants),
        "config_hash": config_hash(cfg),
    }


def write_report(report: dict, out_dir, name="report.json") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def write_timing(timings: dict, out_dir, name="timing.json") -> Path:
    """Wall-clock numbers live in their own file so reports stay deterministic."""
    path = Path(out_dir) / name
    path.write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return path


def crossval(data_dir, out_dir, cfg: Config, k=None):
    """Seeded-shuffle fold partition (fold i takes indices i, i+k, ...), one
    train/eval per fold, pooled case-weighted summary."""
    tcfg = cfg.train
    k = tcfg.k_folds if k is None else k
    cases = load_dataset(data_dir, tcfg.target_spacing)
    if len(cases) < k:
        raise ValueError(f"{len(cases)} cases cannot fill {k} folds")
    if k == 1:
        warnings.warn("k=1: training and evaluating on the same cases", stacklevel=2)
    rng = np.random.default_rng([tcfg.seed, 4])
    order = [int(i) for i in rng.permutation(len(cases))]
    folds = [order[i::k] for i in range(k)]
    out_dir = Path(out_dir)
    all_scores = []
    fold_reports = []
    timings = {}
    for fi, fold in enumerate(folds):
        val = [cases[i] for i in fold]
        train = [cases[i] for i in sorted(set(range(len(cases))) - set(fold))] or val
        fold_dir = out_dir / f"fold_{fi}"
        t0 = time.perf_counter()
        summary = train_model(train, val, tcfg, fold_dir)
        net = load_network(summary.weights_path, tcfg.rf_variant, seed=tcfg.seed)
        results = {}
        fold_timing = {}
        for case in val:
            res = infer_case(net, case, tcfg)
            results[case.name] = res.prob
            fold_timing[case.name] = {"loc_s": round(res.loc_seconds, 4),
                                      "seg_s": round(res.seg_seconds, 4)}
        scores, agg = evaluate_cases(results, val, tcfg.target_spacing)
        report = make_report(scores, agg, [tcfg.rf_variant], cfg)
        report["fold"] = fi
        report["val_cases"] = sorted(results)
        write_report(report, fold_dir)
        fold_reports.append(report)
        all_scores.extend(scores)
        timings[f"fold_{fi}"] = {"train_s": round(time.perf_counter() - t0, 2),
                                 "cases": fold_timing}
    pooled = aggregate(all_scores)
    summary_doc = {
        "config_hash": config_hash(cfg),
        "k": k,
        "folds": [{"fold": r["fold"], "aggregate": r["aggregate"],
                   "val_cases": r["val_cases"]} for r in fold_reports],
        "pooled": pooled,
        "pooled_cases": [s.to_json() for s in sorted(all_scores, key=lambda s: s.case)],
    }
    write_report(summary_doc, out_dir, "crossval_report.json")
    write_timing(timings, out_dir)
    print(summary_table(sorted(all_scores, key=lambda s: s.case), pooled), end="")
    return summary_doc
