import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gptqlab import codec
from gptqlab.codec import (
    CodecError,
    Grid,
    QuantParams,
    base_levels,
    build_grid,
    compute_scales,
    from_index,
    make_params,
    quantize_dequantize,
    quantize_weight,
    round_index,
    soft_round,
    soft_round_grad,
    to_index,
)

SCHEMES = ("uniform", "log", "float", "power")
finite = st.floats(-50, 50, allow_nan=False)


def grid_for(scheme, bits, s=1.0):
    return build_grid(QuantParams(scheme, bits, np.array([s])))


# --- scales -------------------------------------------------------------------


def test_uniform_scale_4bit():
    s, zero = compute_scales(np.array([[7.0, -3.0]]), 4)
    assert s[0] == 1.0 and zero == ()


def test_uniform_scale_8bit():
    s, _ = compute_scales(np.array([[2.54, -1.0]]), 8)
    assert s[0] == pytest.approx(0.02, rel=1e-12)


def test_zero_channel_fallback_is_flagged():
    s, zero = compute_scales(np.array([[0.0, 0.0], [1.0, -2.0]]), 4)
    assert s[0] == 1.0 and zero == (0,)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_top_level_lands_on_maxabs(scheme, rng):
    W = rng.standard_normal((5, 7))
    p = make_params(W, scheme, 4)
    for c in range(5):
        assert build_grid(p, c).levels[-1] == pytest.approx(np.abs(W[c]).max(), rel=1e-12)


# --- grids --------------------------------------------------------------------


def test_uniform_2bit_grid():
    np.testing.assert_array_equal(grid_for("uniform", 2).levels, [-1, 0, 1])


def test_log_3bit_grid():
    np.testing.assert_array_equal(grid_for("log", 3).levels, [-1, -0.5, -0.25, 0, 0.25, 0.5, 1])


def test_float_e2m1_grid():
    # all 16 sign/exponent/mantissa codes; +0 and -0 coincide
    mags = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]
    expected = sorted({m * s for m in mags for s in (-1, 1)})
    np.testing.assert_array_equal(grid_for("float", 4).levels, expected)


def test_power_grid_shape():
    lv = base_levels("power", 4, 2.0)
    k = np.arange(-7, 8)
    np.testing.assert_allclose(lv / lv[-1], np.sign(k) * (np.abs(k) / 7) ** 2, atol=1e-15)


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("bits", range(2, 9))
def test_grid_invariants(scheme, bits):
    lv = grid_for(scheme, bits, 0.37).levels
    assert np.all(np.diff(lv) > 0)
    np.testing.assert_array_equal(lv, -lv[::-1])
    assert 0.0 in lv


def test_float_layout_must_fit_bits():
    with pytest.raises(CodecError):
        base_levels("float", 4, 2.0, (2, 2))


def test_float_layout_override():
    lv = base_levels("float", 4, 2.0, (3, 0))
    assert lv[-1] == 16.0  # exponent-only layout reaches 2**(7-3)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"scheme": "uniform", "bits": 1, "weight_scales": [1.0]},
        {"scheme": "uniform", "bits": 9, "weight_scales": [1.0]},
        {"scheme": "uniform", "bits": 4, "weight_scales": [0.0]},
        {"scheme": "cubic", "bits": 4, "weight_scales": [1.0]},
        {"scheme": "uniform", "bits": (4, 4), "weight_scales": [1.0]},
        {"scheme": "power", "bits": 4, "weight_scales": [1.0], "power_exponent": 0.0},
    ],
)
def test_invalid_params_rejected(kwargs):
    with pytest.raises(CodecError):
        QuantParams(**kwargs)


def test_grid_rejects_unsorted():
    with pytest.raises(CodecError):
        Grid(np.array([0.0, 0.0, 1.0]))


# --- index maps -----------------------------------------------------------------


def test_index_at_node_and_midpoint():
    g = grid_for("log", 3)
    assert to_index(g.levels[3], g) == 3.0
    assert to_index((g.levels[1] + g.levels[2]) / 2, g) == 1.5
    assert from_index(0, g) == g.levels[0]


def test_from_index_midpoint_uniform():
    g = grid_for("uniform", 4)
    assert from_index(2.5, g) == (g.levels[2] + g.levels[3]) / 2


def test_index_clamps_beyond_ends():
    g = grid_for("uniform", 3)
    assert to_index(100.0, g) == g.size - 1
    assert from_index(-5.0, g) == g.levels[0]


@pytest.mark.parametrize("scheme", SCHEMES)
@given(u=st.floats(0, 1))
@settings(max_examples=200, deadline=None)
def test_index_roundtrip(scheme, u):
    g = grid_for(scheme, 4, 0.8)
    x = g.levels[0] + u * (g.levels[-1] - g.levels[0])
    assert abs(from_index(to_index(x, g), g) - x) <= 1e-12
    k = u * (g.size - 1)
    assert abs(to_index(from_index(k, g), g) - k) <= 1e-12


@pytest.mark.parametrize("scheme", SCHEMES)
def test_from_index_of_rounded_is_level(scheme, rng):
    g = grid_for(scheme, 5, 1.3)
    k = rng.uniform(0, g.size - 1, 500)
    assert np.all(np.isin(from_index(np.round(k), g), g.levels))


def test_round_index_half_away_from_center():
    assert round_index(2.5, 3.0) == 2.0
    assert round_index(3.5, 3.0) == 4.0
    assert round_index(3.4, 3.0) == 3.0


# --- soft rounding ----------------------------------------------------------------


@given(n=st.integers(-20, 20), beta=st.floats(0.1, 2000))
def test_soft_round_fixed_points(n, beta):
    assert soft_round(float(n), beta) == n
    assert soft_round(n + 0.5, beta) == pytest.approx(n + 0.5, abs=1e-12)


@given(k=st.floats(-20, 20), beta=st.floats(0.1, 200))
def test_soft_round_periodicity(k, beta):
    assert soft_round(k + 1, beta) == pytest.approx(soft_round(k, beta) + 1, abs=1e-9)


@pytest.mark.parametrize("beta", [0.5, 5.0, 20.0, 50.0, 1000.0])
def test_soft_round_monotone(beta):
    k = np.linspace(-3, 3, 60001)
    assert np.all(np.diff(soft_round(k, beta)) >= 0)


@pytest.mark.parametrize("beta", [1.0, 20.0, 50.0])
def test_soft_round_grad_matches_fd(beta, rng):
    k = rng.uniform(-3, 3, 200)
    h = 1e-6
    num = (soft_round(k + h, beta) - soft_round(k - h, beta)) / (2 * h)
    np.testing.assert_allclose(soft_round_grad(k, beta), num, rtol=1e-5, atol=1e-8)


def test_soft_round_rejects_nonpositive_beta():
    with pytest.raises(CodecError):
        soft_round(0.3, 0.0)


# --- quantize_dequantize ----------------------------------------------------------


def test_nearest_uniform():
    assert quantize_dequantize(0.9, grid_for("uniform", 4)) == 1.0


def test_clamp_uniform():
    assert quantize_dequantize(10.0, grid_for("uniform", 4)) == 7.0


def test_log_rounds_in_index_space():
    # 0.7 sits at index 5.4 between 1/2 and 1
    g = grid_for("log", 3)
    assert to_index(0.7, g) == pytest.approx(5.4)
    assert quantize_dequantize(0.7, g) == 0.5


def test_soft_mode_converges_to_hard(rng):
    g = grid_for("power", 4, 0.5)
    x = rng.uniform(-5, 5, 1000)
    k = to_index(x, g)
    keep = np.abs(k - np.floor(k) - 0.5) > 0.02
    soft = quantize_dequantize(x, g, "soft", 5000.0)
    hard = quantize_dequantize(x, g)
    np.testing.assert_allclose(soft[keep], hard[keep], atol=1e-6)


@pytest.mark.parametrize("scheme", SCHEMES)
@given(x=finite)
@settings(max_examples=100, deadline=None)
def test_hard_output_on_grid_and_idempotent(scheme, x):
    g = grid_for(scheme, 4, 0.9)
    q = quantize_dequantize(x, g)
    assert q in g.levels
    assert quantize_dequantize(q, g) == q


@given(x=finite, s=st.floats(0.01, 5), bits=st.integers(2, 8))
def test_uniform_matches_direct_formula(x, s, bits):
    qmax = 2 ** (bits - 1) - 1
    v = x / s
    assume(abs(abs(v) - np.floor(abs(v)) - 0.5) > 1e-9)  # float noise at exact ties
    direct = np.clip(np.sign(v) * np.floor(abs(v) + 0.5), -qmax, qmax) * s
    g = grid_for("uniform", bits, s)
    assert quantize_dequantize(x, g) == pytest.approx(direct, abs=1e-12 * max(1, s * qmax))


# --- channel-wise helpers ---------------------------------------------------------


@pytest.mark.parametrize("scheme", SCHEMES)
def test_channelwise_matches_per_channel_grids(scheme, rng):
    W = rng.standard_normal((4, 3, 3, 3))
    p = make_params(W, scheme, (3, 4, 4, 6))
    Q = quantize_weight(W, p)
    for c in range(4):
        g = build_grid(p, c)
        np.testing.assert_allclose(Q[c], quantize_dequantize(W[c], g), rtol=0, atol=1e-15)
    assert codec.is_on_grid(Q, p)
    assert not codec.is_on_grid(W, p)


def test_dump_grid(tmp_path):
    p = QuantParams("log", 3, np.array([1.0, 2.0]))
    path = tmp_path / "grid.txt"
    codec.dump_grid(p, path)
    values = [float(ln) for ln in path.read_text().splitlines() if not ln.startswith("#")]
    assert values[:7] == [-1, -0.5, -0.25, 0, 0.25, 0.5, 1]
    assert len(values) == 14


# --- activations --------------------------------------------------------------------


def test_activation_rounds_half_up():
    codes = codec.activation_codes(np.array([0.5, -0.5, 1.5, -1.5, 100.0]), 1.0, 4)
    np.testing.assert_array_equal(codes, [1, 0, 2, -1, 7])


def test_activation_ste_mask():
    xq, inside = codec.quantize_activation(np.array([0.2, 8.0, -7.0]), 1.0, 4)
    np.testing.assert_array_equal(xq, [0.0, 7.0, -7.0])
    np.testing.assert_array_equal(inside, [True, False, True])
