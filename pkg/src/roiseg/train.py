"""Two-phase training: the coarse locator alone, then the joint objective.

Phase 1 optimizes only the localization Dice until validation loss stops
improving (patience-based early stop, best state restored).  Phase 2 adds
the per-RoI region and contour heads plus weight decay.  While the locator
is still weak (validation Dice at or below `teacher_dice`) the RoIs fed to
the decoder come from the downsampled ground truth instead of the locator
— otherwise the decoder would see no training signal at cold start.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .losses import (
    dice_loss,
    global_loss,
    make_contour_labels,
    downsample_labels,
    total_loss,
)
from .metrics import dsc
from .network import Network, build_default_spec
from .ops import s_add, s_affine
from .preprocess import AugmentationConfig, augment
from .roi import BBox3, build_pyramid, crop_pyramid, extract_boxes, paste_predictions
from .tape import Tape, backward
from .volume import Volume

# rng stream tags so every consumer gets an independent deterministic stream
_AUG_STREAM = 1
_SHIFT_STREAM = 2
_SPLIT_STREAM = 3


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {}

    def step(self, params: dict, grads: dict):
        """Update every parameter that received a gradient this step."""
        for name, p in params.items():
            g = grads.get(p.uid)
            if g is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data),
                                         "t": 0}
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.float32)


@dataclass
class TrainSummary:
    weights_path: str
    best_val_dice: float
    phase1_epochs_run: int
    phase2_epochs_run: int
    steps: int
    locator_val_dice: float


def _check_finite(value, where):
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite loss ({value}) at {where}; training aborted")


def _mean_scalar(terms):
    """Taped mean of a list of Scalars."""
    total = terms[0]
    for t in terms[1:]:
        total = s_add(total, t)
    return s_affine(total, 1.0 / len(terms), 0.0)


def _crop_label(label: Volume, box: BBox3) -> Volume:
    z, y, x = box.start
    d, h, w = box.size
    return Volume(np.ascontiguousarray(label.data[:, :, z:z + d, y:y + h, x:x + w]),
                  spacing=label.spacing)


def _jitter_box(box: BBox3, extent, shift, rng) -> BBox3:
    """Translate a level-III box by up to ±shift of its size per axis, clamped."""
    start = []
    for s, sz, e in zip(box.start, box.size, extent):
        delta = int(round(rng.uniform(-shift, shift) * sz))
        start.append(int(np.clip(s + delta, 0, max(0, e - sz))))
    return BBox3(tuple(start), box.size, box.level)


def training_boxes(loc_prob, gt_down, use_predicted, tcfg: TrainConfig, rng=None):
    """Level-III boxes for the decoder; falls back to ground-truth boxes when
    predictions are disabled or empty."""
    boxes = []
    if use_predicted:
        boxes = extract_boxes(loc_prob, tcfg.threshold, tcfg.min_voxels)
    if not boxes:
        boxes = extract_boxes(gt_down, 0.5, min_voxels=1)
    boxes = boxes[:tcfg.max_rois]
    if rng is not None and tcfg.roi_shift > 0:
        extent = gt_down.spatial
        boxes = [_jitter_box(b, extent, tcfg.roi_shift, rng) for b in boxes]
    return boxes


def _validate(net: Network, cases, tcfg: TrainConfig, with_seg=False) -> dict:
    """Tape-free validation pass; one encoder forward per case serves both the
    locator stats and (optionally) the predicted-box segmentation Dice."""
    losses, loc_dices, seg_dices = [], [], []
    for case in cases:
        f1, f2, f3 = net.encoder_forward(case.image)
        loc = net.locator_forward(f3)
        losses.append(global_loss(loc, case.gt_down).value)
        loc_dices.append(dsc(loc, case.gt_down))
        if with_seg:
            boxes = extract_boxes(loc, tcfg.threshold, tcfg.min_voxels)
            canvas = Volume(np.zeros(case.image.shape, np.float32), spacing=case.image.spacing)
            for box in boxes:
                pyr = build_pyramid(box, margin=tcfg.roi_margin, extents=f3.spatial)
                seg1, _ = net.decoder_forward(crop_pyramid(f1, f2, f3, pyr))
                canvas = paste_predictions(canvas, pyr.box1, seg1)
            seg_dices.append(dsc(canvas, case.region))
    out = {"l_global": float(np.mean(losses)), "locator_dice": float(np.mean(loc_dices))}
    if with_seg:
        out["seg_dice"] = float(np.mean(seg_dices))
    return out


def _augmented(case, tcfg: TrainConfig, epoch, case_idx):
    if not tcfg.augment:
        return case.image, case.region
    rng = np.random.default_rng([tcfg.seed, _AUG_STREAM, epoch, case_idx])
    return augment(case.image, case.region, AugmentationConfig(seed=tcfg.seed), rng)


def train_model(train_cases, val_cases, tcfg: TrainConfig, out_dir,
                log_name="train_log.jsonl") -> TrainSummary:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = Network(build_default_spec(tcfg.rf_variant, seed=tcfg.seed))
    adam = Adam(tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    log_path = out_dir / log_name
    step = 0

    with log_path.open("w") as log:
        def emit(doc):
            log.write(json.dumps(doc, sort_keys=True) + "\n")

        # ---- phase 1: locator only -----------------------------------
        best_loss, best_state, bad_evals, p1_epochs = np.inf, None, 0, 0
        for epoch in range(tcfg.phase1_epochs):
            p1_epochs = epoch + 1
            for ci, case in enumerate(train_cases):
                image, region = _augmented(case, tcfg, epoch, ci)
                gt_down = downsample_labels(region)
                with Tape() as tape:
                    _, _, f3 = net.encoder_forward(image)
                    loc = net.locator_forward(f3)
                    lg = global_loss(loc, gt_down, tcfg.dice_epsilon)
                _check_finite(lg.value, f"phase 1 epoch {epoch} case {case.name}")
                grads = backward(tape, lg)
                adam.step(net.params, grads)
                step += 1
                emit({"step": step, "phase": 1, "epoch": epoch, "case": case.name,
                      "l_global": float(lg.value), "l_total": float(lg.value),
                      "lr": tcfg.learning_rate})
            stats = _validate(net, val_cases, tcfg)
            val_loss = stats["l_global"]
            emit({"event": "val", "phase": 1, "epoch": epoch,
                  "val_l_global": val_loss, "val_locator_dice": stats["locator_dice"]})
            if val_loss < best_loss:
                best_loss, best_state, bad_evals = val_loss, net.state_copy(), 0
            else:
                bad_evals += 1
                if bad_evals >= tcfg.patience:
                    break
        if best_state is not None:
            net.load_state(best_state)

        # ---- phase 2: joint objective ---------------------------------
        locator_dice = _validate(net, val_cases, tcfg)["locator_dice"]
        conv_names = net.conv_weight_names()
        best_dice, best_state, p2_epochs = -1.0, net.state_copy(), 0
        for epoch in range(tcfg.phase2_epochs):
            p2_epochs = epoch + 1
            use_predicted = locator_dice > tcfg.teacher_dice
            for ci, case in enumerate(train_cases):
                image, region = _augmented(case, tcfg, epoch, ci)
                gt_down = downsample_labels(region)
                contour = make_contour_labels(region)
                shift_rng = np.random.default_rng([tcfg.seed, _SHIFT_STREAM, epoch, ci])
                with Tape() as tape:
                    f1, f2, f3 = net.encoder_forward(image)
                    loc = net.locator_forward(f3)
                    lg = global_loss(loc, gt_down, tcfg.dice_epsilon)
                    boxes = training_boxes(loc, gt_down, use_predicted, tcfg, shift_rng)
                    region_terms, contour_terms = [], []
                    for box in boxes:
                        pyr = build_pyramid(box, margin=tcfg.roi_margin, extents=f3.spatial)
                        seg1, seg2 = net.decoder_forward(crop_pyramid(f1, f2, f3, pyr))
                        region_terms.append(dice_loss(seg1, _crop_label(region, pyr.box1),
                                                      tcfg.dice_epsilon))
                        contour_terms.append(dice_loss(seg2, _crop_label(contour, pyr.box1),
                                                       tcfg.dice_epsilon))
                    l_region = _mean_scalar(region_terms)
                    l_contour = _mean_scalar(contour_terms)
                    loss, terms = total_loss(lg, l_region, l_contour,
                                             [net.params[n] for n in conv_names],
                                             lambda_c=tcfg.lambda_c, beta=tcfg.weight_decay,
                                             epsilon=tcfg.dice_epsilon)
                _check_finite(loss.value, f"phase 2 epoch {epoch} case {case.name}")
                grads = backward(tape, loss)
                adam.step(net.params, grads)
                step += 1
                doc = {"step": step, "phase": 2, "epoch": epoch, "case": case.name,
                       "n_rois": len(boxes), "teacher_forced": not use_predicted,
                       "lr": tcfg.learning_rate}
                doc.update(terms.to_json())
                emit(doc)
            stats = _validate(net, val_cases, tcfg, with_seg=True)
            locator_dice, seg_dice = stats["locator_dice"], stats["seg_dice"]
            emit({"event": "val", "phase": 2, "epoch": epoch,
                  "val_locator_dice": locator_dice, "val_seg_dice": seg_dice})
            if seg_dice > best_dice:
                best_dice, best_state = seg_dice, net.state_copy()
        net.load_state(best_state)

    weights_path = out_dir / f"model_{tcfg.rf_variant.lower()}.wts"
    net.save_weights(weights_path)
    locator_dice = _validate(net, val_cases, tcfg)["locator_dice"]
    return TrainSummary(str(weights_path), float(best_dice), p1_epochs, p2_epochs,
                        step, float(locator_dice))


def split_cases(cases, tcfg: TrainConfig):
    """Deterministic train/validation split by seeded shuffle."""
    rng = np.random.default_rng([tcfg.seed, _SPLIT_STREAM])
    order = rng.permutation(len(cases))
    n_val = max(1, int(round(len(cases) * tcfg.val_fraction)))
    if len(cases) < 2:
        raise ValueError("need at least 2 cases to split train/validation")
    val_idx = set(int(i) for i in order[:n_val])
    train = [c for i, c in enumerate(cases) if i not in val_idx]
    val = [c for i, c in enumerate(cases) if i in val_idx]
    return train, val
