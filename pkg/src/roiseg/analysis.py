"""Static per-layer analysis: receptive field, jump, shape, activation memory.

Propagation rules per axis along the graph:
  conv (each of a ResBlock's three convs): rf += (k-1) * dilation * jump
  pooling:   rf += (k-1) * jump, then jump *= stride
  upconv:    jump //= stride (min 1); rf unchanged
  add:       componentwise max over inputs
  1x1x1 head / roi crop: unchanged (crops copy their source's rf/jump)

Memory accounting counts materialized activation tensors only, at 4 bytes
per value: a ResBlock materializes 9 tensors (3 conv + 3 norm + 3 relu);
pooling, upsampling, add and head layers one each.  Footprints are exact
floats in MiB (2^20 bytes); rendered tables round rows to 2 decimals and a
part's total is the sum of its *rounded* rows, which is how the reference
figures this reproduces were themselves tallied.

Encoder rows are evaluated at the full input extent, RoI and decoder rows
at the RoI extent; analyze_standard_decoder() re-evaluates the decoder at
full extent as the no-cropping counterfactual.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .network import LayerSpec, NetworkSpec

_ENCODER = ("ResBlock1", "MaxPooling1", "ResBlock2", "MaxPooling2", "ResBlock3", "Locator")
_DECODER = ("UpConv1", "Add1", "ResBlock4", "UpConv2", "Add2", "ResBlock5", "SegHead1", "SegHead2")


@dataclass
class LayerAnalysis:
    name: str
    part: str
    rf: tuple
    jump: tuple
    out_shape: tuple          # (n, c, d, h, w)
    node_count: int
    footprint_mib: float

    @property
    def footprint_recomputed(self) -> float:
        n, c, d, h, w = self.out_shape
        return self.node_count * n * c * d * h * w * 4 / 2**20


def _mib(node_count, c, spatial):
    d, h, w = spatial
    return node_count * c * d * h * w * 4 / 2**20


def _advance(layer: LayerSpec, rf, jump):
    """New (rf, jump) after a layer, given its input state."""
    if layer.kind == "resblock":
        for _ in range(3):
            rf = tuple(r + (k - 1) * dl * j
                       for r, k, dl, j in zip(rf, layer.kernel, layer.dilation, jump))
        return rf, jump
    if layer.kind == "maxpool":
        rf = tuple(r + (k - 1) * j for r, k, j in zip(rf, layer.kernel, jump))
        jump = tuple(j * s for j, s in zip(jump, layer.stride))
        return rf, jump
    if layer.kind == "upconv":
        jump = tuple(max(j // s, 1) for j, s in zip(jump, layer.stride))
        return rf, jump
    if layer.kind in ("head", "roi"):
        return rf, jump
    if layer.kind == "add":
        raise AssertionError("add handled by merge")
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def _out_spatial(layer: LayerSpec, spatial):
    if layer.kind == "maxpool":
        return tuple(sz // s for sz, s in zip(spatial, layer.stride))
    if layer.kind == "upconv":
        return tuple(sz * s for sz, s in zip(spatial, layer.stride))
    return tuple(spatial)


def analyze(spec: NetworkSpec, input_shape, roi_shape):
    """Rows for the encoder at input_shape plus RoI tensors and the decoder at roi_shape.

    input_shape and roi_shape are (d, h, w); roi_shape is the RoI extent at
    full (level-I) resolution and must divide by the cumulative pooling
    stride (2, 4, 4).
    """
    for ax, (r, s) in enumerate(zip(roi_shape, (2, 4, 4))):
        if r % s:
            raise ValueError(f"roi_shape axis {ax} ({r}) must divide by the cumulative stride {s}")
    # state per layer name: (rf, jump, spatial)
    state = {"Image": ((1, 1, 1), (1, 1, 1), tuple(input_shape))}
    rows = []
    for layer in spec.layers:
        if layer.kind == "roi":
            src = layer.inputs[-1]
            rf, jump, _ = state[src]
            # the source's jump is its cumulative stride, i.e. the crop's
            # downsampling factor relative to full (level-I) resolution
            spatial = tuple(r // s for r, s in zip(roi_shape, jump))
            state[layer.name] = (rf, jump, spatial)
            rows.append(LayerAnalysis(layer.name, "roi", rf, jump, (1, layer.out_channels) + spatial,
                                      1, _mib(1, layer.out_channels, spatial)))
            continue
        if layer.kind == "add":
            states = [state[i] for i in layer.inputs]
            rf = tuple(max(vals) for vals in zip(*[s[0] for s in states]))
            jump = tuple(max(vals) for vals in zip(*[s[1] for s in states]))
            spatial = states[0][2]
            if any(s[2] != spatial for s in states):
                raise ValueError(f"add layer {layer.name} merges different spatial sizes "
                                 f"{[s[2] for s in states]}")
        else:
            rf_in, jump_in, spatial_in = state[layer.inputs[0]]
            rf, jump = _advance(layer, rf_in, jump_in)
            spatial = _out_spatial(layer, spatial_in)
        state[layer.name] = (rf, jump, spatial)
        part = "encoder" if layer.name in _ENCODER else "decoder"
        nodes = 9 if layer.kind == "resblock" else 1
        rows.append(LayerAnalysis(layer.name, part, rf, jump, (1, layer.out_channels) + spatial,
                                  nodes, _mib(nodes, layer.out_channels, spatial)))
    return rows


def analyze_standard_decoder(spec: NetworkSpec, input_shape):
    """Decoder rows evaluated at full-volume scale (no RoI cropping)."""
    full = analyze(spec, input_shape, _divisible(input_shape))
    # recompute decoder shapes/footprints from the encoder's own scales
    by_name = {r.name: r for r in full}
    rows = []
    # at full volume, level I/II/III extents are the encoder map extents
    d, h, w = input_shape
    spatial = {"RoITensorI": (d, h, w), "RoITensorII": (d, h // 2, w // 2),
               "RoITensorIII": (d // 2, h // 4, w // 4)}
    for layer in spec.layers:
        if layer.name not in _DECODER:
            continue
        if layer.kind == "add":
            ins = [spatial[i] for i in layer.inputs]
            sp = ins[0]
        else:
            sp = _out_spatial(layer, spatial[layer.inputs[0]])
        spatial[layer.name] = sp
        nodes = 9 if layer.kind == "resblock" else 1
        src = by_name[layer.name]
        rows.append(LayerAnalysis(layer.name, "standard-decoder", src.rf, src.jump,
                                  (1, layer.out_channels) + sp, nodes,
                                  _mib(nodes, layer.out_channels, sp)))
    return rows


def _divisible(shape):
    return tuple(max(s, sz - sz % s) for sz, s in zip(shape, (2, 4, 4)))


def round2(x: float) -> float:
    return round(x, 2)


def part_totals(rows):
    """Per-part footprint totals as the sum of 2-decimal-rounded rows."""
    totals: dict[str, float] = {}
    for r in rows:
        totals[r.part] = totals.get(r.part, 0.0) + round2(r.footprint_mib)
    return {k: round2(v) for k, v in totals.items()}


def compare_to_golden(build_spec=None):
    """Recompute the reference tables and diff against the checked-in goldens.

    Returns a list of mismatch descriptions; empty means everything matches.
    """
    from importlib import resources

    from .network import build_default_spec

    build = build_spec or build_default_spec
    pkg = resources.files("roiseg").joinpath("golden")
    rf_gold = json.loads(pkg.joinpath("receptive_fields.json").read_text())
    mem_gold = json.loads(pkg.joinpath("memory_footprint.json").read_text())
    problems = []
    for variant, layers in sorted(rf_gold.items()):
        rows = analyze(build(variant), (40, 180, 320), (24, 96, 96))
        got = {r.name: list(r.rf) for r in rows}
        for name, rf in sorted(layers.items()):
            if got.get(name) != rf:
                problems.append(f"rf[{variant}][{name}] = {got.get(name)}, golden {rf}")
    spec = build("RF64")
    rows = analyze(spec, tuple(mem_gold["input_shape"]), tuple(mem_gold["roi_shape"]))
    got_mib = {r.name: round2(r.footprint_mib) for r in rows}
    for name, mib in sorted(mem_gold["rows"].items()):
        if got_mib.get(name) != mib:
            problems.append(f"footprint[{name}] = {got_mib.get(name)}, golden {mib}")
    got_totals = part_totals(rows)
    for part, tot in sorted(mem_gold["part_totals"].items()):
        if got_totals.get(part) != tot:
            problems.append(f"total[{part}] = {got_totals.get(part)}, golden {tot}")
    std = analyze_standard_decoder(spec, tuple(mem_gold["input_shape"]))
    got_std = {r.name: round2(r.footprint_mib) for r in std}
    for name, mib in sorted(mem_gold["standard_decoder_rows"].items()):
        if got_std.get(name) != mib:
            problems.append(f"standard[{name}] = {got_std.get(name)}, golden {mib}")
    std_total = part_totals(std)["standard-decoder"]
    if std_total != mem_gold["standard_decoder_total"]:
        problems.append(f"standard total = {std_total}, golden {mem_gold['standard_decoder_total']}")
    return problems


def report(rows, fmt="table", header=None):
    """Render analysis rows as an aligned text table or canonical JSON."""
    if fmt == "json":
        doc = {
            "rows": [{"name": r.name, "part": r.part, "rf": list(r.rf), "jump": list(r.jump),
                      "out_shape": list(r.out_shape), "node_count": r.node_count,
                      "footprint_mib": round2(r.footprint_mib)} for r in rows],
            "part_totals": part_totals(rows),
        }
        if header:
            doc["header"] = header
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = []
    if header:
        lines.append(str(header))
    cols = ("layer", "part", "out shape (c,d,h,w)", "rf (z,y,x)", "jump", "nodes", "MiB")
    body = []
    for r in rows:
        c, d, h, w = r.out_shape[1:]
        body.append((r.name, r.part, f"{c}x{d}x{h}x{w}",
                     "x".join(map(str, r.rf)), "x".join(map(str, r.jump)),
                     str(r.node_count), f"{round2(r.footprint_mib):.2f}"))
    widths = [max(len(cols[i]), *(len(b[i]) for b in body)) for i in range(len(cols))]
    fmt_row = "  ".join(f"{{:<{wd}}}" for wd in widths)
    lines.append(fmt_row.format(*cols))
    lines.append("  ".join("-" * wd for wd in widths))
    for b in body:
        lines.append(fmt_row.format(*b))
    for part, tot in part_totals(rows).items():
        lines.append(f"total[{part}] = {tot:.2f} MiB")
    return "\n".join(lines) + "\n"
