from dataclasses import replace

import numpy as np
import pytest

from movnect import network as N
from movnect.weights import WeightFileError, load_tensors, pack_tensors, save_tensors, unpack_tensors

J = 15


def hand_count(a_widths, b_widths, upsampling):
    """Parameter count tallied layer by layer from the architecture table.

    Every conv without a bias is followed by batchnorm (4 vectors: gamma,
    beta, moving mean, moving variance); the two linear heads carry biases.
    """
    total = 0

    def conv(cin, cout, k):
        nonlocal total
        total += cin * cout * k * k + 4 * cout

    def dw(c):
        nonlocal total
        total += 9 * c + 4 * c

    conv(3, 32, 3)
    cin = 32
    for t, c, n, _ in ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1)):
        for _ in range(n):
            hidden = cin * t
            if t != 1:
                conv(cin, hidden, 1)
            dw(hidden)
            conv(hidden, c, 1)
            cin = c
    for w in a_widths:
        dw(cin)
        conv(cin, w, 1)
        cin = w
    total += cin * 3 * J + 3 * J
    cin = cin + 4 * J
    for w in b_widths:
        dw(cin)
        conv(cin, w, 1)
        cin = w
    conv(cin, cin, 3 if upsampling == "bilinear_conv" else 4)
    total += cin * 4 * J + 4 * J
    return total


@pytest.mark.parametrize("name", ["type-a", "type-b", "type-c"])
def test_param_count_matches_hand_tally(name):
    spec = N.profile(name)
    net = N.build(spec)
    assert N.count_params(net) == hand_count(spec.block13a_widths, spec.block13b_widths, spec.upsampling)


def test_variant_ordering_of_counts():
    nets = {v: N.build(N.profile(v)) for v in "abc"}
    p = {v: N.count_params(n) for v, n in nets.items()}
    m = {v: N.count_flops(n) for v, n in nets.items()}
    assert p["a"] < p["b"] < p["c"]
    assert m["b"] < m["a"] < m["c"]  # transposed conv runs at the input resolution of the stage


def test_flops_hand_check_for_one_layer():
    net = N.build(N.profile("a", input_size=64))
    stem = net.units["base.stem"]
    assert stem.macs(64) == 32 * 32 * 3 * 32 * 9
    dw = net.units["base.block1.dw"]  # stride 2, from 32x32 to 16x16
    assert dw.macs(64) == 16 * 16 * dw.cin * 9


def test_flops_scale_with_input_area():
    a = N.build(N.profile("a"))
    assert N.count_flops(a, 512) == 4 * N.count_flops(a, 256)


def test_outputs_shapes_and_shared_extent():
    net = N.build(N.profile("a", input_size=64))
    out = N.forward(net, np.zeros((1, 3, 64, 64), dtype=np.float32))
    for name in ("H", "X", "Y", "Z", "dX", "dY", "dZ", "BL"):
        assert getattr(out, name).shape == (J, 8, 8)
    assert out.H.dtype == np.float32
    with pytest.raises(ValueError):
        N.forward(net, np.zeros((1, 3, 32, 32), dtype=np.float32))


def test_bone_length_map_is_abs_sum():
    rng = np.random.default_rng(0)
    dx, dy, dz = (rng.normal(size=(2, J, 3, 3)) for _ in range(3))
    np.testing.assert_allclose(N.bone_length_features(dx, dy, dz), np.abs(dx) + np.abs(dy) + np.abs(dz))
    net = N.build(N.profile("b", input_size=32), seed=3)
    x = rng.uniform(-1, 1, size=(1, 3, 32, 32)).astype(np.float32)
    out = N.forward(net, x)
    # reported maps are resized to output resolution after the abs-sum, and
    # bilinear weights are nonnegative, so the triangle inequality bounds it
    assert np.all(out.BL >= np.abs(out.dX) + np.abs(out.dY) + np.abs(out.dZ) - 1e-5)


def test_seeded_init_is_deterministic_and_base_shared():
    a1 = N.build(N.profile("a"), seed=5)
    a2 = N.build(N.profile("a"), seed=5)
    c = N.build(N.profile("c"), seed=5)
    for k in a1.params:
        assert np.array_equal(a1.params[k], a2.params[k])
        if k.startswith("base."):
            assert np.array_equal(a1.params[k], c.params[k])
    other = N.build(N.profile("a"), seed=6)
    assert not np.array_equal(a1.params["head.w"], other.params["head.w"])


def test_golden_forward_values():
    """Frozen outputs of a seeded float64 forward pass at 32 px; guards silent drift."""
    net = N.build(N.profile("a", input_size=32), seed=11, dtype=np.float64)
    x = np.random.default_rng(2).uniform(-1, 1, size=(1, 3, 32, 32))
    out = N.forward(net, x)
    np.testing.assert_allclose(
        out.H[0, 0], [0.02228334996284052, -0.02702558318615341, 0.0235830753939964, 0.04550356692730975],
        rtol=1e-9,
    )
    np.testing.assert_allclose(
        out.X[3, 1], [16.74276005254195, 7.14366007474904, -1.1183214227882468, 7.439955656635272], rtol=1e-9
    )
    assert out.Z.sum() == pytest.approx(329.0992371527674, rel=1e-9)


def test_fold_network_matches_unfolded():
    net = N.build(N.profile("b", input_size=32), seed=1, dtype=np.float64)
    rng = np.random.default_rng(4)
    for k in net.params:
        if k.endswith("bn.mean"):
            net.params[k][...] = rng.normal(size=net.params[k].shape) * 0.1
        elif k.endswith("bn.var"):
            net.params[k][...] = rng.uniform(0.5, 2, size=net.params[k].shape)
    folded = N.fold_network(net)
    x = rng.uniform(-1, 1, size=(1, 3, 32, 32))
    a, b = N.forward(net, x), N.forward(folded, x)
    np.testing.assert_allclose(a.H, b.H, atol=1e-9)
    np.testing.assert_allclose(a.Z, b.Z, atol=1e-7)


def test_weights_round_trip_and_detect(tmp_path):
    net = N.build(N.profile("c", input_size=32), seed=2)
    path = tmp_path / "c.mvnw"
    N.save_weights(net, path)
    spec = N.detect_spec(str(path), input_size=32)
    assert spec.variant == "TypeC"
    again = N.build(spec, weights=str(path))
    for k in net.params:
        assert np.array_equal(net.params[k], again.params[k])


def test_weight_mismatch_is_named(tmp_path):
    net = N.build(N.profile("a", input_size=32))
    tensors = dict(net.params)
    tensors["head.w"] = tensors["head.w"][:, :10]
    with pytest.raises(N.WeightMismatch, match="head.w"):
        N.build(N.profile("a", input_size=32), weights=tensors)
    del tensors["head.w"]
    with pytest.raises(N.WeightMismatch):
        N.detect_spec(tensors)


def test_mvnw_container_validation(tmp_path):
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5])}
    blob = pack_tensors(t)
    back = unpack_tensors(blob)
    assert list(back) == ["a", "b"] and back["a"].dtype == np.float32 and back["b"].dtype == np.float64
    assert np.array_equal(back["a"], t["a"])
    with pytest.raises(WeightFileError):
        unpack_tensors(b"XXXX" + blob[4:])
    with pytest.raises(WeightFileError):
        unpack_tensors(blob[:-3])
    with pytest.raises(WeightFileError):
        unpack_tensors(blob + b"\0")
    with pytest.raises(WeightFileError):
        pack_tensors({"i": np.arange(3)})
    save_tensors(tmp_path / "t.mvnw", t)
    assert np.array_equal(load_tensors(tmp_path / "t.mvnw")["a"], t["a"])


def test_spec_config_round_trip_and_validation():
    spec = N.profile("c", input_size=128)
    assert N.spec_from_config(N.spec_to_config(spec)) == spec
    assert N.spec_from_config("profile = b\ninput_size = 64\n") == N.profile("b", input_size=64)
    with pytest.raises(ValueError):
        N.spec_from_config("bogus = 1")
    with pytest.raises(ValueError):
        replace(spec, input_size=100)
    with pytest.raises(ValueError):
        replace(spec, output_stride=4)
    with pytest.raises(KeyError):
        N.profile("type-z")


def test_normalize_image_range():
    img = np.array([[[0, 255, 127]]], dtype=np.uint8)
    x = N.normalize_image(img)
    assert x.shape == (1, 3, 1, 1)
    np.testing.assert_allclose(x.ravel(), [-1.0, 1.0, 127 / 127.5 - 1])


def test_per_cell_mflops_scales_out_resolution():
    net = N.build(N.profile("a"))
    assert N.per_cell_mflops(net) == pytest.approx(N.count_flops(net) / 32 ** 2 / 1e6)
    assert N.per_cell_mflops(net, 128) == pytest.approx(N.count_flops(net, 128) / 16 ** 2 / 1e6)
