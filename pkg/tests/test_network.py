"""Network construction, forwards, init statistics and weight round-trips."""
import numpy as np
import pytest

from roiseg import Tape, Volume, ShapeError, backward, grad_of
from roiseg.network import Network, build_default_spec, RF_VARIANTS
from roiseg.ops import crop3d, sum_all

RNG = np.random.default_rng(7)


def small_image(d=8, h=32, w=32, seed=3):
    r = np.random.default_rng(seed)
    return Volume.from_array(r.standard_normal((d, h, w)).astype(np.float32))


def test_build_rejects_unknown_variant():
    with pytest.raises(ValueError, match="variant"):
        build_default_spec("RF100")


def test_encoder_shapes():
    net = Network(build_default_spec("RF64"))
    f1, f2, f3 = net.encoder_forward(small_image())
    assert f1.shape == (1, 48, 8, 32, 32)
    assert f2.shape == (1, 96, 8, 16, 16)
    assert f3.shape == (1, 192, 4, 8, 8)


def test_encoder_zero_input_finite():
    net = Network(build_default_spec("RF64"))
    z = Volume(np.zeros((1, 1, 4, 16, 16), np.float32))
    _, _, f3 = net.encoder_forward(z)
    assert np.isfinite(f3.data).all()


def test_encoder_deterministic_across_runs():
    img = small_image()
    a = Network(build_default_spec("RF64", seed=5)).encoder_forward(img)[2]
    b = Network(build_default_spec("RF64", seed=5)).encoder_forward(img)[2]
    assert np.array_equal(a.data, b.data)


def test_encoder_rejects_non_divisible_input():
    net = Network(build_default_spec("RF64"))
    with pytest.raises(ShapeError):
        net.encoder_forward(Volume(np.zeros((1, 1, 5, 32, 32), np.float32)))


def test_locator_range_and_shape():
    net = Network(build_default_spec("RF64"))
    _, _, f3 = net.encoder_forward(small_image())
    loc = net.locator_forward(f3)
    assert loc.shape == (1, 1) + f3.spatial
    assert (loc.data > 0).all() and (loc.data < 1).all()


def test_decoder_restores_roi_resolution():
    net = Network(build_default_spec("RF64"))
    f3 = Volume(RNG.standard_normal((1, 192, 4, 8, 8)).astype(np.float32))
    f2 = Volume(RNG.standard_normal((1, 96, 8, 16, 16)).astype(np.float32))
    f1 = Volume(RNG.standard_normal((1, 48, 8, 32, 32)).astype(np.float32))
    region, contour = net.decoder_forward((f1, f2, f3))
    assert region.shape == (1, 1, 8, 32, 32)
    assert contour.shape == (1, 1, 8, 32, 32)
    assert (region.data > 0).all() and (region.data < 1).all()


def test_decoder_weight_sharing_identical_outputs():
    net = Network(build_default_spec("RF64"))
    pyr = (Volume(RNG.standard_normal((1, 48, 4, 16, 16)).astype(np.float32)),
           Volume(RNG.standard_normal((1, 96, 4, 8, 8)).astype(np.float32)),
           Volume(RNG.standard_normal((1, 192, 2, 4, 4)).astype(np.float32)))
    r1, _ = net.decoder_forward(pyr)
    r2, _ = net.decoder_forward(pyr)
    assert np.array_equal(r1.data, r2.data)


def test_decoder_rejects_inconsistent_pyramid():
    net = Network(build_default_spec("RF64"))
    f3 = Volume(RNG.standard_normal((1, 192, 2, 4, 4)).astype(np.float32))
    f2 = Volume(RNG.standard_normal((1, 96, 4, 8, 8)).astype(np.float32))
    f1_bad = Volume(RNG.standard_normal((1, 48, 4, 20, 16)).astype(np.float32))
    with pytest.raises(ShapeError, match="pyramid"):
        net.decoder_forward((f1_bad, f2, f3))


def test_encoder_to_decoder_full_volume_is_lossless_in_size():
    # uncropped pyramid -> output matches the input's spatial extent
    net = Network(build_default_spec("RF64"))
    img = small_image(4, 16, 16)
    f1, f2, f3 = net.encoder_forward(img)
    region, _ = net.decoder_forward((f1, f2, f3))
    assert region.spatial == img.spatial


def test_gradient_reaches_first_block_through_decoder():
    net = Network(build_default_spec("RF64"))
    img = small_image(4, 16, 16)
    w_first = net.params["ResBlock1.conv1.w"]
    with Tape() as t:
        f1, f2, f3 = net.encoder_forward(img)
        c1 = crop3d(f1, (0, 0, 0), (2, 8, 8))
        c2 = crop3d(f2, (0, 0, 0), (2, 4, 4))
        c3 = crop3d(f3, (0, 0, 0), (1, 2, 2))
        region, _ = net.decoder_forward((c1, c2, c3))
        grads = backward(t, sum_all(region))
    g = grad_of(grads, w_first)
    assert np.abs(g).max() > 0


def test_count_parameters_closed_form():
    def resblock(ci, co, K, proj):
        n = (co * ci * K + co) + 2 * (co * co * K + co) + 3 * 2 * co
        if proj:
            n += co * ci + co
        return n

    expect = (resblock(1, 48, 9, True) + resblock(48, 96, 27, True)
              + resblock(96, 192, 27, True) + resblock(96, 96, 27, False)
              + resblock(48, 48, 9, False)
              + 192 * 96 * 8 + 96 * 48 * 4          # the two upsampling kernels
              + (192 + 1) + (48 + 1) + (48 + 1))    # locator + two seg heads
    net = Network(build_default_spec("RF64"))
    assert net.count_parameters() == expect


def test_variants_share_parameter_shapes():
    nets = {v: Network(build_default_spec(v)) for v in RF_VARIANTS}
    counts = {v: n.count_parameters() for v, n in nets.items()}
    assert len(set(counts.values())) == 1
    shapes = [{k: p.shape for k, p in n.params.items()} for n in nets.values()]
    assert shapes[0] == shapes[1] == shapes[2]


def test_he_init_variance():
    net = Network(build_default_spec("RF64", seed=11))
    for name in ("ResBlock2.conv2.w", "ResBlock3.conv2.w", "ResBlock4.conv3.w"):
        w = net.params[name].data
        fan_in = w.shape[1] * w.shape[2] * w.shape[3] * w.shape[4]
        assert w.size >= 1000
        assert abs(w.var() - 2.0 / fan_in) < 0.2 * 2.0 / fan_in


def test_weight_roundtrip_bitwise(tmp_path):
    net = Network(build_default_spec("RF88", seed=2))
    img = small_image(4, 16, 16)
    before = net.encoder_forward(img)[2].data.copy()
    path = tmp_path / "w.bin"
    net.save_weights(path)
    other = Network(build_default_spec("RF88", seed=99))
    other.load_weights(path)
    after = other.encoder_forward(img)[2].data
    assert np.array_equal(before, after)
    for n in net.params:
        assert np.array_equal(net.params[n].data, other.params[n].data)


def test_weights_transplant_across_variants(tmp_path):
    # dilation adds no parameters, so RF64 weights load into RF112
    src = Network(build_default_spec("RF64", seed=4))
    path = tmp_path / "w.bin"
    src.save_weights(path)
    dst = Network(build_default_spec("RF112", seed=5))
    dst.load_weights(path)
    assert np.array_equal(src.params["ResBlock3.conv2.w"].data,
                          dst.params["ResBlock3.conv2.w"].data)


def test_load_rejects_garbage_and_foreign_files(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTAFILE" + b"\x00" * 64)
    net = Network(build_default_spec("RF64"))
    with pytest.raises(ValueError, match="magic"):
        net.load_weights(p)


def test_conv_weight_names_exclude_norms_and_biases():
    net = Network(build_default_spec("RF64"))
    names = net.conv_weight_names()
    assert "ResBlock1.conv1.w" in names and "UpConv1.w" in names and "SegHead1.w" in names
    assert not any(n.endswith((".b", ".gamma", ".beta")) for n in names)
