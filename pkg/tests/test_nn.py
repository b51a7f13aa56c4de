"""NN engine: per-kernel oracles, shape law, weight-file round trips."""

import numpy as np
import pytest

import oracles
from cusense.nn import (
    ModelGraph,
    NNError,
    WeightFileError,
    adaptive_avg_pool,
    argmax_location,
    batchnorm_inference,
    conv1d,
    expected_lengths,
    l_out,
    linear,
    load_weights,
    maxpool1d,
    parameter_specs,
    random_model,
    relu,
    save_weights,
    softmax,
)

RNG = np.random.default_rng(77)


# -- kernels ------------------------------------------------------------------

def test_conv1d_identity_kernel():
    x = RNG.standard_normal((3, 10)).astype(np.float32)
    w = np.zeros((3, 3, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0] = 1.0
    out = conv1d(x, w, np.zeros(3, dtype=np.float32))
    assert np.allclose(out, x)


def test_conv1d_matches_loop_oracle():
    for _ in range(20):
        c_in, c_out = int(RNG.integers(1, 4)), int(RNG.integers(1, 5))
        k = int(RNG.integers(1, 5))
        stride = int(RNG.integers(1, 3))
        pad = int(RNG.integers(0, 3))
        length = int(RNG.integers(k, 16))
        x = RNG.standard_normal((c_in, length)).astype(np.float32)
        w = RNG.standard_normal((c_out, c_in, k)).astype(np.float32)
        b = RNG.standard_normal(c_out).astype(np.float32)
        got = conv1d(x, w, b, stride, pad)
        want = oracles.conv1d_loop(x.tolist(), w.tolist(), b.tolist(), stride, pad)
        assert got.shape == (c_out, len(want[0]))
        assert np.allclose(got, want, atol=1e-5)


def test_maxpool_basic():
    out = maxpool1d(np.array([[1.0, 2.0, 3.0, 4.0]], dtype=np.float32))
    assert out.tolist() == [[2.0, 4.0]]


def test_maxpool_matches_oracle():
    x = RNG.standard_normal((4, 13)).astype(np.float32)
    got = maxpool1d(x, 2, 2)
    want = oracles.maxpool1d_loop(x.tolist(), 2, 2)
    assert np.allclose(got, want)


def test_batchnorm_matches_oracle():
    c, length = 5, 9
    x = RNG.standard_normal((c, length)).astype(np.float32)
    gamma = RNG.standard_normal(c).astype(np.float32)
    beta = RNG.standard_normal(c).astype(np.float32)
    mean = RNG.standard_normal(c).astype(np.float32)
    var = RNG.random(c).astype(np.float32) + 0.1
    got = batchnorm_inference(x, gamma, beta, mean, var)
    want = oracles.batchnorm_loop(x.tolist(), gamma, beta, mean, var)
    assert np.allclose(got, want, atol=1e-5)


def test_linear_matches_oracle():
    x = RNG.standard_normal(8).astype(np.float32)
    w = RNG.standard_normal((5, 8)).astype(np.float32)
    b = RNG.standard_normal(5).astype(np.float32)
    assert np.allclose(linear(x, w, b), oracles.linear_loop(x, w.tolist(), b), atol=1e-5)


def test_relu():
    assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]


def test_adaptive_avg_pool_matches_oracle():
    x = RNG.standard_normal((6, 11)).astype(np.float32)
    assert np.allclose(adaptive_avg_pool(x), oracles.avgpool_all_loop(x.tolist()), atol=1e-5)


def test_softmax_matches_oracle_and_extremes():
    v = RNG.standard_normal(20).astype(np.float32) * 3
    assert np.allclose(softmax(v), oracles.softmax_loop(v.tolist()), atol=1e-7)
    for scale in (1e4, -1e4):
        v = np.array([scale, 0.0, -scale], dtype=np.float32)
        out = softmax(v)
        assert abs(out.sum() - 1.0) < 1e-5
        assert (out >= 0).all()


def test_argmax_location_rules():
    grid = np.zeros((8, 8))
    grid[3, 5] = 1.0
    assert argmax_location(grid) == (3, 5)
    assert argmax_location(np.full((4, 4), 0.25)) == (0, 0)
    for _ in range(20):
        g = RNG.random((6, 9))
        assert argmax_location(g) == oracles.argmax_scan(g.tolist())


# -- full graph ------------------------------------------------------------------

def test_zero_weights_give_uniform_grid():
    model = random_model(seed=0, grid_h=32, grid_w=32)
    for name in model.params:
        model.params[name] = np.zeros_like(model.params[name])
        if name.endswith("running_var"):
            model.params[name] += 1.0
    grid = model.forward(np.zeros((4, 128), dtype=np.float32))
    assert np.allclose(grid, 1.0 / 1024, atol=1e-9)


def test_forward_deterministic():
    model = random_model(seed=1)
    x = RNG.standard_normal((4, 408)).astype(np.float32)
    a = model.forward(x)
    b = model.forward(x)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("k_v", [132, 1596, 3276])
def test_forward_shape_law(k_v):
    model = random_model(seed=2)
    trace: list = []
    grid = model.forward(RNG.standard_normal((4, k_v)).astype(np.float32), trace=trace)
    assert grid.shape == (32, 32)
    assert (grid >= 0).all()
    assert abs(grid.sum() - 1.0) < 1e-5
    got = {tag: length for tag, length in trace}
    for tag, length in expected_lengths(k_v):
        assert got[tag] == length, f"{tag}: traced {got[tag]}, formula {length}"


def test_l_out_formula_property():
    rng = np.random.default_rng(3)
    for _ in range(200):
        length = int(rng.integers(1, 500))
        k = int(rng.integers(1, 8))
        s = int(rng.integers(1, 4))
        p = int(rng.integers(0, 4))
        if length + 2 * p < k:
            continue
        x = np.zeros((1, length), dtype=np.float32)
        w = np.zeros((1, 1, k), dtype=np.float32)
        out = conv1d(x, w, np.zeros(1, dtype=np.float32), s, p)
        assert out.shape[1] == l_out(length, k, s, p)


def test_input_too_short_rejected():
    model = random_model(seed=4)
    with pytest.raises(NNError, match="below minimum"):
        model.forward(np.zeros((4, 8), dtype=np.float32))


def test_wrong_channel_count_rejected():
    model = random_model(seed=4)
    with pytest.raises(NNError, match="input must be"):
        model.forward(np.zeros((3, 128), dtype=np.float32))


# -- weight file --------------------------------------------------------------------

def test_weight_roundtrip_bit_exact(tmp_path):
    model = random_model(seed=9)
    p1 = tmp_path / "w1.cusw"
    p2 = tmp_path / "w2.cusw"
    save_weights(model, p1)
    loaded = load_weights(p1)
    save_weights(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name in model.params:
        assert np.array_equal(model.params[name], loaded.params[name])
    x = RNG.standard_normal((4, 132)).astype(np.float32)
    assert np.array_equal(model.forward(x), loaded.forward(x))


def test_truncated_file_rejected(tmp_path):
    model = random_model(seed=9)
    path = tmp_path / "w.cusw"
    save_weights(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(WeightFileError, match="truncated"):
        load_weights(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.cusw"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(WeightFileError, match="magic"):
        load_weights(path)


def test_wrong_dims_names_offender(tmp_path):
    model = random_model(seed=9)
    bad = dict(model.params)
    bad["conv0.weight"] = np.zeros((64, 4, 5), dtype=np.float32)  # k=5 instead of 7
    path = tmp_path / "w.cusw"
    with pytest.raises(NNError, match="conv0.weight"):
        ModelGraph(4, 32, 32, bad)
    # A parseable file whose first record carries the wrong dims.
    from cusense.nn import WEIGHT_MAGIC, write_tensor_records

    records = [(name, bad[name]) for name, _ in parameter_specs(4, 32, 32)]
    write_tensor_records(path, WEIGHT_MAGIC, (32, 32), records)
    with pytest.raises(WeightFileError, match="conv0.weight"):
        load_weights(path)


def test_corrupted_dims_field_is_structured_error(tmp_path):
    model = random_model(seed=9)
    path = tmp_path / "w.cusw"
    save_weights(model, path)
    raw = bytearray(path.read_bytes())
    import struct

    # first record dims start after magic(8) + header(12) + name_len(2) + name(12) + meta(2)
    struct.pack_into("<I", raw, 8 + 12 + 2 + 12 + 2, 63)
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightFileError):
        load_weights(path)


def test_parameter_spec_count():
    specs = parameter_specs(4, 32, 32)
    # conv0+bn0 = 6, three blocks of 12, three fc pairs = 6
    assert len(specs) == 6 + 3 * 12 + 6
    names = [n for n, _ in specs]
    assert names[0] == "conv0.weight" and names[-1] == "fc3.bias"
