"""Acceptance gate: one test per shipped guarantee, named so that a
`pytest -v` run shows a single pass/fail line for each.

 1. receptive-field table reproduced exactly for all three variants
 2. memory-footprint table reproduced to ±0.01 MiB
 3. autodiff gradients match finite differences (ops and the full network)
    and the closed-form Dice gradient
 4. fast implementations match brute-force oracles (conv, components, ASD,
    Otsu)
 5. RoI pyramid scaling is exactly invertible over random boxes
 6. end-to-end: 20 synthetic phantoms train in ≤ 30 minutes and reach
    held-out mean DSC ≥ 0.60, mean ASD ≤ 5 mm, recall > 0 on every case
 7. ensembling: identical members reproduce the single model bitwise, and a
    mixed-variant ensemble scores within the members' [min, max] Dice
 8. determinism: repeated cross-validation runs are byte-identical

The `xfail` in this file documents the one golden receptive-field cell
(RF112 / ResBlock2) that is internally inconsistent with its own column;
see tests/test_analysis.py for the derivation.
"""
import time

import numpy as np
import pytest

from roiseg.analysis import analyze, part_totals, round2
from roiseg.config import TrainConfig, config_from_dict
from roiseg.dataio import load_dataset
from roiseg.inference import (
    crossval,
    ensemble_infer_case,
    evaluate_cases,
    infer_case,
    load_network,
)
from roiseg.losses import (
    dice_grad,
    dice_loss,
    downsample_labels,
    make_contour_labels,
    total_loss,
)
from roiseg.metrics import asd
from roiseg.network import Network, build_default_spec
from roiseg.ops import (
    ConvParams,
    add,
    conv3d,
    crop3d,
    instance_norm,
    maxpool3d,
    mul,
    relu,
    same_padding,
    sigmoid,
    sum_all,
    sum_sq,
    upconv3d,
)
from roiseg.phantom import PhantomSpec, make_dataset
from roiseg.preprocess import otsu_threshold
from roiseg.roi import BBox3, build_pyramid, crop_pyramid, extract_boxes
from roiseg.tape import Tape, backward, grad_of
from roiseg.train import split_cases, train_model
from roiseg.volume import Volume

from .oracles import (
    asd_oracle,
    conv3d_oracle,
    flood_fill_components_oracle,
    numeric_grad,
    otsu_oracle,
)

INPUT_SHAPE = (40, 180, 320)
ROI_SHAPE = (24, 96, 96)

# Published receptive-field tables (z, y, x) per variant.  The RF112 /
# ResBlock2 golden row reads 7x34x34; the propagation rules (and the
# golden RF112 SegHeads row they lead to) give 7x32x32 — see the xfail.
RF_TABLE = {
    "RF64": {"ResBlock2": (7, 20, 20), "ResBlock3": (20, 46, 46),
             "Locator": (20, 46, 46), "ResBlock4": (26, 58, 58),
             "SegHead1": (26, 64, 64), "SegHead2": (26, 64, 64)},
    "RF88": {"ResBlock2": (7, 20, 20), "ResBlock3": (20, 70, 70),
             "Locator": (20, 70, 70), "ResBlock4": (26, 82, 82),
             "SegHead1": (26, 88, 88), "SegHead2": (26, 88, 88)},
    "RF112": {"ResBlock3": (20, 82, 82),
              "Locator": (20, 82, 82), "ResBlock4": (26, 106, 106),
              "SegHead1": (26, 112, 112), "SegHead2": (26, 112, 112)},
}

# Published memory-footprint rows (MiB) at input 40x180x320, RoI 24x96x96.
MEM_ROWS = {
    "ResBlock1": 3796.88,
    "Locator": 0.27,
    "RoITensorI": 40.50,
    "RoITensorII": 20.25,
    "RoITensorIII": 5.06,
}
LOCAL_DECODER_TOTAL = 669.93
STANDARD_DECODER_TOTAL = 6978.55

SEED = 2026


def max_rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def vol(arr, requires_grad=False, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(arr, np.float32), spacing=spacing,
                  requires_grad=requires_grad)


# =====================================================================
# 1. receptive-field table
# =====================================================================

def test_criterion_1_receptive_field_table_exact():
    t0 = time.perf_counter()
    for variant, expected in RF_TABLE.items():
        rows = {r.name: r for r in analyze(build_default_spec(variant), INPUT_SHAPE, ROI_SHAPE)}
        for layer, rf in expected.items():
            assert rows[layer].rf == rf, f"{variant}/{layer}: {rows[layer].rf} != {rf}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    print(f"PASS criterion 1: receptive fields exact for RF64/RF88/RF112 ({elapsed:.3f}s)")


@pytest.mark.xfail(strict=True, reason=(
    "golden RF112/ResBlock2 cell reads 7x34x34, but 34 is the value *after* "
    "the following pool (32 + (2-1)*2*1); the same table's RF112 SegHeads row "
    "(26x112x112) only follows from 7x32x32 here, so the golden cell is "
    "internally inconsistent and the analyzer reports 7x32x32"))
def test_criterion_1_rf112_resblock2_golden_cell():
    rows = {r.name: r for r in analyze(build_default_spec("RF112"), INPUT_SHAPE, ROI_SHAPE)}
    assert rows["ResBlock2"].rf == (7, 34, 34)


# =====================================================================
# 2. memory-footprint table
# =====================================================================

def test_criterion_2_memory_footprints():
    t0 = time.perf_counter()
    rows = analyze(build_default_spec("RF64"), INPUT_SHAPE, ROI_SHAPE)
    by_name = {r.name: r for r in rows}
    for name, expected in MEM_ROWS.items():
        got = round2(by_name[name].footprint_mib)
        assert abs(got - expected) <= 0.01 + 1e-9, f"{name}: {got} vs {expected}"
    totals = part_totals(rows)
    assert abs(totals["decoder"] - LOCAL_DECODER_TOTAL) <= 0.01 + 1e-9
    from roiseg.analysis import analyze_standard_decoder
    std_rows = analyze_standard_decoder(build_default_spec("RF64"), INPUT_SHAPE)
    std_total = round2(sum(round2(r.footprint_mib) for r in std_rows))
    assert abs(std_total - STANDARD_DECODER_TOTAL) <= 0.01 + 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    print(f"PASS criterion 2: footprints within ±0.01 MiB "
          f"(standard decoder {std_total} vs {STANDARD_DECODER_TOTAL}, {elapsed:.3f}s)")


# =====================================================================
# 3. gradient correctness
# =====================================================================

def _fd_check(build, x0, tol=1e-2, step=1e-3):
    """Autodiff dL/dx vs central differences for L = build(Volume(x))."""
    x = vol(x0, requires_grad=True)
    with Tape() as tape:
        loss = build(x)
    auto = grad_of(backward(tape, loss), x)

    def f(arr):
        return float(build(vol(arr)).value)

    num = numeric_grad(f, x0, step=step)
    err = max_rel_err(auto, num)
    assert err < tol, f"fd mismatch: {err:.3e}"
    return err


def test_criterion_3_gradients_every_op_and_full_network():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)

    # --- each differentiable op, small shapes, full finite differences ----
    x0 = rng.normal(size=(1, 2, 3, 6, 6))
    w_conv = vol(rng.normal(0, 0.4, (3, 2, 3, 3, 3)), requires_grad=True)
    b_conv = vol(np.zeros((1, 3, 1, 1, 1)), requires_grad=True)
    dil = (1, 2, 2)
    cp = ConvParams((3, 3, 3), (1, 1, 1), dil, same_padding((3, 3, 3), dil), 2, 3)
    _fd_check(lambda x: sum_sq(conv3d(x, w_conv, b_conv, cp)), x0)

    # pooled values spaced far apart so central differences never straddle
    # an argmax switch (max-pool is non-differentiable at ties)
    pool_in = (rng.permutation(2 * 3 * 6 * 6).reshape(1, 2, 3, 6, 6) * 0.07)
    _fd_check(lambda x: sum_sq(maxpool3d(x, (1, 2, 2), (1, 2, 2))[0]), pool_in)

    relu_in = rng.normal(size=(1, 2, 3, 6, 6))
    relu_in += np.sign(relu_in) * 0.05          # keep inputs away from the kink
    _fd_check(lambda x: sum_sq(relu(x)), relu_in)

    w_up = vol(rng.normal(0, 0.4, (2, 3, 2, 2, 2)), requires_grad=True)
    _fd_check(lambda x: sum_sq(upconv3d(x, w_up, (2, 2, 2))), rng.normal(size=(1, 2, 2, 3, 3)))

    gamma = vol(rng.normal(1.0, 0.2, (1, 2, 1, 1, 1)), requires_grad=True)
    beta = vol(rng.normal(0.0, 0.2, (1, 2, 1, 1, 1)), requires_grad=True)
    mix = vol(rng.normal(size=(1, 2, 3, 4, 4)))
    _fd_check(lambda x: sum_all(mul(instance_norm(x, gamma, beta), mix)),
              rng.normal(size=(1, 2, 3, 4, 4)))

    other = vol(rng.normal(size=(1, 2, 3, 4, 4)), requires_grad=True)
    _fd_check(lambda x: sum_all(mul(sigmoid(add(x, other)), other)),
              rng.normal(size=(1, 2, 3, 4, 4)))

    _fd_check(lambda x: sum_sq(crop3d(x, (1, 0, 2), (2, 3, 2))),
              rng.normal(size=(1, 2, 4, 4, 5)))

    g_fix = vol((rng.random((1, 1, 3, 4, 4)) > 0.7).astype(np.float32))
    _fd_check(lambda x: dice_loss(sigmoid(x), g_fix), rng.normal(size=(1, 1, 3, 4, 4)))

    # --- full network + combined loss on a 1x1x4x16x16 input -------------
    net = Network(build_default_spec("RF64", seed=3))
    conv_w = [net.params[n] for n in net.conv_weight_names()]
    region = (rng.random((1, 1, 4, 16, 16)) > 0.8).astype(np.float32)
    region_v = vol(region)
    contour_v = make_contour_labels(region_v)
    gt_down = downsample_labels(region_v)
    pyr = build_pyramid(BBox3((0, 1, 1), (1, 2, 2), "III"), margin=0, extents=(2, 4, 4))
    reg_crop = crop3d(region_v, pyr.box1.start, pyr.box1.size)
    con_crop = crop3d(contour_v, pyr.box1.start, pyr.box1.size)

    def full_loss(x):
        f1, f2, f3 = net.encoder_forward(x)
        loc = net.locator_forward(f3)
        lg = dice_loss(loc, gt_down)
        seg1, seg2 = net.decoder_forward(crop_pyramid(f1, f2, f3, pyr))
        lr = dice_loss(seg1, reg_crop)
        lc = dice_loss(seg2, con_crop)
        loss, _ = total_loss(lg, lr, lc, conv_w)
        return loss

    x = vol(rng.normal(0.0, 1.0, (1, 1, 4, 16, 16)), requires_grad=True)
    with Tape() as tape:
        loss = full_loss(x)
    grads = backward(tape, loss)
    base = float(full_loss(x).value)

    # Central differences estimate the derivative only where the function is
    # differentiable across [c - h, c + h].  With ~1.5e5 relu / max-pool
    # units a few probed coordinates inevitably straddle a kink; there the
    # two one-sided slopes disagree by the slope jump while a smooth
    # function keeps them within h * |f''| plus float32 evaluation noise.
    # Probes whose one-sided gap exceeds that smoothness budget are
    # therefore excluded as unmeasurable rather than counted as mismatches.
    def probe_target(target, n_probes, h=1e-3):
        auto = grad_of(grads, target).ravel()
        scale = float(np.abs(auto).max())
        gap_budget = max(3e-4, 0.02 * scale)
        flat = target.data.reshape(-1)
        kept, worst = 0, 0.0
        for k in np.argsort(-np.abs(auto))[:n_probes]:
            keep = flat[k]
            flat[k] = keep + h
            fp = float(full_loss(x).value)
            flat[k] = keep - h
            fm = float(full_loss(x).value)
            flat[k] = keep
            if abs((fp - base) / h - (base - fm) / h) > gap_budget:
                continue
            kept += 1
            worst = max(worst, abs(auto[k] - (fp - fm) / (2 * h)) / scale)
        assert kept >= n_probes // 2, f"only {kept}/{n_probes} smooth probes"
        return worst

    # the input gradient flows back through every layer; the probed weights
    # cover deep encoder, up-convolution and both sigmoid heads
    err = probe_target(x, 32)
    for name in ("ResBlock3.conv2.w", "UpConv1.w", "SegHead1.w", "Locator.w"):
        err = max(err, probe_target(net.params[name], 12))
    assert err < 1e-2, f"full-network fd mismatch: {err:.3e}"

    # --- closed-form Dice gradient vs the tape ---------------------------
    p0 = rng.random((1, 1, 6, 8, 8)).astype(np.float32)
    g0 = (rng.random((1, 1, 6, 8, 8)) > 0.6).astype(np.float32)
    p = vol(p0, requires_grad=True)
    with Tape() as tape:
        l = dice_loss(p, vol(g0))
    tape_grad = grad_of(backward(tape, l), p)
    closed = dice_grad(p, vol(g0)).data
    closed_err = float(np.abs(tape_grad - closed).max())
    assert closed_err < 1e-5

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"PASS criterion 3: op FDs ok, full-network fd err {err:.1e} < 1e-2, "
          f"closed-form Dice err {closed_err:.1e} < 1e-5 ({elapsed:.1f}s)")


# =====================================================================
# 4. oracle equivalences
# =====================================================================

def test_criterion_4_oracle_equivalences():
    rng = np.random.default_rng(44)

    # conv3d vs nested loops, with dilation and padding
    x0 = rng.normal(size=(1, 3, 4, 6, 6)).astype(np.float32)
    w0 = rng.normal(0, 0.3, (4, 3, 3, 3, 3)).astype(np.float32)
    b0 = rng.normal(size=(1, 4, 1, 1, 1)).astype(np.float32)
    dil = (1, 2, 2)
    pad = same_padding((3, 3, 3), dil)
    y = conv3d(vol(x0), vol(w0), vol(b0), ConvParams((3, 3, 3), (1, 1, 1), dil, pad, 3, 4))
    y_ref = conv3d_oracle(x0, w0, b0.ravel(), (1, 1, 1), dil, pad)
    conv_err = float(np.abs(y.data - y_ref).max())
    assert conv_err < 1e-5

    # connected components vs flood fill (exact), via box extraction
    for trial in range(5):
        prob = (rng.random((1, 1, 8, 10, 10)) > 0.72).astype(np.float32)
        boxes = extract_boxes(vol(prob), 0.5, min_voxels=1)
        labels, n = flood_fill_components_oracle(prob[0, 0] > 0.5)
        assert len(boxes) == n
        got = sorted((b.start, b.size) for b in boxes)
        want = []
        for lab in range(1, n + 1):
            zz, yy, xx = np.nonzero(labels == lab)
            start = (int(zz.min()), int(yy.min()), int(xx.min()))
            size = (int(zz.max()) - start[0] + 1, int(yy.max()) - start[1] + 1,
                    int(xx.max()) - start[2] + 1)
            want.append((start, size))
        assert got == sorted(want)

    # ASD vs all-pairs brute force on <= 16^3 volumes
    spacing = (2.0, 0.7, 0.7)
    max_asd_err = 0.0
    for trial in range(4):
        p = np.zeros((12, 14, 14), np.float32)
        g = np.zeros((12, 14, 14), np.float32)
        pz, py, px = rng.integers(1, 7, 3)
        gz, gy, gx = rng.integers(2, 8, 3)
        p[pz:pz + 5, py:py + 5, px:px + 5] = 1
        g[gz:gz + 4, gy:gy + 4, gx:gx + 4] = 1
        ours = asd(vol(p[None, None], spacing=spacing), vol(g[None, None], spacing=spacing),
                   spacing)
        ref = asd_oracle(p.astype(bool), g.astype(bool), spacing)
        max_asd_err = max(max_asd_err, abs(ours - ref))
    assert max_asd_err < 1e-6

    # Otsu vs exhaustive search (exact threshold, i.e. exact bin)
    for trial in range(5):
        values = np.concatenate([rng.normal(0.1, 0.05, 4000),
                                 rng.normal(0.9, 0.1, 1500)]).astype(np.float32)
        res = otsu_threshold(vol(values.reshape(1, 1, 10, 10, 55)))
        assert res.threshold == otsu_oracle(values)

    print(f"PASS criterion 4: conv err {conv_err:.1e}, components exact, "
          f"ASD err {max_asd_err:.1e}, Otsu bins exact")


# =====================================================================
# 5. pyramid scaling property
# =====================================================================

def test_criterion_5_pyramid_property_1000_boxes():
    rng = np.random.default_rng(55)
    cum = (2, 4, 4)  # cumulative level-III -> level-I stride
    for _ in range(1000):
        extent = tuple(int(e) for e in rng.integers(6, 40, 3))
        size = tuple(int(rng.integers(1, max(2, e // 2))) for e in extent)
        start = tuple(int(rng.integers(0, e - s + 1)) for e, s in zip(extent, size))
        pyr = build_pyramid(BBox3(start, size, "III"), margin=0, extents=extent)
        assert pyr.box1.size == tuple(s * c for s, c in zip(pyr.box3.size, cum))
        assert pyr.box1.start == tuple(s * c for s, c in zip(pyr.box3.start, cum))
        # integer division inverts the scaling exactly at both levels
        assert tuple(a // b for a, b in zip(pyr.box2.start, (2, 2, 2))) == pyr.box3.start
        assert tuple(a // b for a, b in zip(pyr.box2.size, (2, 2, 2))) == pyr.box3.size
        assert tuple(a // b for a, b in zip(pyr.box1.start, (1, 2, 2))) == pyr.box2.start
        assert tuple(a // b for a, b in zip(pyr.box1.size, (1, 2, 2))) == pyr.box2.size
    print("PASS criterion 5: 1000 random boxes scale and invert exactly")


# =====================================================================
# 6. end-to-end synthetic run
# =====================================================================

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """The 20-phantom training used by criteria 6 and 7 (RF64 member)."""
    root = tmp_path_factory.mktemp("accept_e2e")
    make_dataset(root / "data", PhantomSpec(seed=SEED), 20)
    tcfg = TrainConfig(seed=SEED)
    cases = load_dataset(root / "data", tcfg.target_spacing)
    train_cases, val_cases = split_cases(cases, tcfg)
    t0 = time.perf_counter()
    summary = train_model(train_cases, val_cases, tcfg, root / "run")
    train_minutes = (time.perf_counter() - t0) / 60.0
    return root, tcfg, cases, val_cases, summary, train_minutes


def test_criterion_6_end_to_end_synthetic_run(full_run):
    root, tcfg, cases, val_cases, summary, train_minutes = full_run
    assert train_minutes <= 30.0, f"training took {train_minutes:.1f} min"
    net = load_network(summary.weights_path, tcfg.rf_variant)
    results = {c.name: infer_case(net, c, tcfg).prob for c in val_cases}
    scores, agg = evaluate_cases(results, val_cases, tcfg.target_spacing)
    mean_dsc = agg["dsc"]["mean"]
    mean_asd = agg["asd"]["mean"]
    recalls = {s.case: s.recall for s in scores}
    assert mean_dsc >= 0.60, f"held-out mean DSC {mean_dsc:.3f}"
    assert mean_asd <= 5.0, f"held-out mean ASD {mean_asd:.2f} mm"
    assert all(r > 0 for r in recalls.values()), f"missed lesions: {recalls}"
    print(f"PASS criterion 6: {train_minutes:.1f} min train, "
          f"DSC {mean_dsc:.3f} >= 0.60, ASD {mean_asd:.2f} <= 5 mm, "
          f"recalls {sorted(round(r, 3) for r in recalls.values())} all > 0")


# =====================================================================
# 7. ensemble behavior
# =====================================================================

def test_criterion_7_ensemble_bitwise_and_bounded(full_run, tmp_path):
    root, tcfg, cases, val_cases, summary, _ = full_run

    # (a) three identical members reproduce the single model bit for bit
    net = load_network(summary.weights_path, tcfg.rf_variant)
    case = val_cases[0]
    single = infer_case(net, case, tcfg)
    mean, _ = ensemble_infer_case({"RF64": net, "RF88": net, "RF112": net}, case, tcfg)
    assert mean.data.tobytes() == single.prob.data.tobytes()

    # (b) mixed-variant ensemble scores within the members' [min, max] Dice
    train_cases = [c for c in cases if c.name not in {v.name for v in val_cases}]
    nets = {"RF64": net}
    for variant in ("RF88", "RF112"):
        vcfg = TrainConfig(seed=SEED, rf_variant=variant,
                           phase1_epochs=1, phase2_epochs=2)
        vsum = train_model(train_cases[:6], val_cases, vcfg, tmp_path / variant)
        nets[variant] = load_network(vsum.weights_path, variant)

    member_dice = {}
    ens_results = {}
    per_variant = {v: {} for v in nets}
    for c in val_cases:
        mean, members = ensemble_infer_case(nets, c, tcfg)
        ens_results[c.name] = mean
        for v, res in members.items():
            per_variant[v][c.name] = res.prob
    for v, results in per_variant.items():
        _, agg = evaluate_cases(results, val_cases, tcfg.target_spacing)
        member_dice[v] = agg["dsc"]["mean"]
    _, ens_agg = evaluate_cases(ens_results, val_cases, tcfg.target_spacing)
    ens = ens_agg["dsc"]["mean"]
    lo, hi = min(member_dice.values()), max(member_dice.values())
    assert lo <= ens <= hi, f"ensemble {ens:.3f} outside [{lo:.3f}, {hi:.3f}] {member_dice}"
    print(f"PASS criterion 7: identical ensemble bitwise equal; mixed ensemble "
          f"DSC {ens:.3f} within [{lo:.3f}, {hi:.3f}] of members {member_dice}")


# =====================================================================
# 8. determinism
# =====================================================================

def test_criterion_8_crossval_byte_identical(tmp_path):
    cfg = config_from_dict({
        "n_cases": 4,
        "phantom": {"extent": [12, 32, 32], "body_radii": [5.0, 13.0, 13.0],
                    "lesion_radii_range": [[1.5, 2.5], [2.5, 4.5], [2.5, 4.5]],
                    "second_lesion_prob": 0.0, "max_fraction": 0.2, "seed": 13},
        "train": {"phase1_epochs": 2, "phase2_epochs": 2, "seed": 13},
    })
    make_dataset(tmp_path / "data", cfg.phantom, cfg.n_cases)
    crossval(tmp_path / "data", tmp_path / "a", cfg, k=2)
    crossval(tmp_path / "data", tmp_path / "b", cfg, k=2)
    report_a = (tmp_path / "a" / "crossval_report.json").read_bytes()
    report_b = (tmp_path / "b" / "crossval_report.json").read_bytes()
    assert report_a == report_b
    for fold in ("fold_0", "fold_1"):
        wa = (tmp_path / "a" / fold / "model_rf64.wts").read_bytes()
        wb = (tmp_path / "b" / fold / "model_rf64.wts").read_bytes()
        assert wa == wb
    print("PASS criterion 8: crossval reports and weights byte-identical across runs")
