import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from htquant.codec import decode_bits, encode_bits
from htquant.errors import (
    IndexOutOfRange,
    InputError,
    InvalidAlpha,
    LengthMismatch,
    OddSplit,
    OutOfRange,
    SupportMismatch,
)
from htquant.quantizer import (
    BISCALED,
    CUBEROOT,
    UNIFORM,
    Codebook,
    DensitySpec,
    build_codebook,
    dequantize,
    empirical_mse,
    mse_bound,
    stochastic_quantize,
    truncate,
)
from htquant.tail import BodyTailDensity, DensityHistogram, PowerLawTail


def triangular_hist(alpha=1.0, bins=1024):
    edges = np.linspace(-alpha, alpha, bins + 1)
    return DensityHistogram.from_cdf(edges, stats.triang(c=0.5, loc=-alpha, scale=2 * alpha).cdf, symmetric=True)


class TestTruncate:
    def test_example(self):
        assert np.array_equal(truncate([0.2, 0.7, -0.9], 0.5), [0.2, 0.5, -0.5])

    def test_infinite_alpha_is_identity(self):
        x = np.array([1e30, -3.0, 0.0])
        assert np.array_equal(truncate(x, math.inf), x)

    def test_boundary_kept(self):
        assert truncate([0.5, -0.5], 0.5).tolist() == [0.5, -0.5]

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_invalid_alpha(self, alpha):
        with pytest.raises(InvalidAlpha):
            truncate([1.0], alpha)

    @given(st.lists(st.floats(-1e6, 1e6), max_size=50), st.floats(1e-3, 1e3))
    def test_range_and_length(self, xs, alpha):
        y = truncate(xs, alpha)
        assert y.shape == (len(xs),)
        assert np.all(np.abs(y) <= alpha)


class TestBuildCodebook:
    def test_uniform_b2(self):
        cb = build_codebook(DensitySpec(UNIFORM, 1.0, 3))
        assert np.allclose(cb.levels, [-1, -1 / 3, 1 / 3, 1], atol=1e-15)
        assert cb.bits == 2 and cb.s == 3

    def test_cuberoot_uniform_density_matches_uniform(self):
        h = DensityHistogram.uniform(-1.0, 1.0)
        for s in (3, 7, 15, 255):
            a = build_codebook(DensitySpec(CUBEROOT, 1.0, s, histogram=h)).levels
            b = build_codebook(DensitySpec(UNIFORM, 1.0, s)).levels
            assert np.max(np.abs(a - b)) <= 1e-9

    def test_cuberoot_triangular_equal_point_mass(self):
        spec = DensitySpec(CUBEROOT, 1.0, 4, histogram=triangular_hist())
        lv = build_codebook(spec).levels
        # each interval must hold exactly one quantization point
        edges = spec.histogram.edges
        for lo, hi in zip(lv[:-1], lv[1:]):
            # lambda_s is piecewise constant, so integrate bin by bin
            cuts = np.concatenate(([lo], edges[(edges > lo) & (edges < hi)], [hi]))
            val = sum(integrate.quad(lambda g: float(spec.lambda_s(g)), a, b)[0] for a, b in zip(cuts[:-1], cuts[1:]))
            assert val == pytest.approx(1.0, abs=1e-9)
        # a peaked density puts finer steps near zero
        steps = np.diff(lv)
        assert steps[1] < steps[0]

    def test_density_integrates_to_s(self):
        h = triangular_hist()
        for spec in (
            DensitySpec(UNIFORM, 2.0, 7),
            DensitySpec(CUBEROOT, 1.0, 7, histogram=h),
            DensitySpec(BISCALED, 1.0, 7, k=0.3, s_alpha=2, s_beta=5),
        ):
            assert spec.total_points() == pytest.approx(spec.s, abs=1e-9)

    def test_symmetric_density_symmetric_codebook(self):
        h = BodyTailDensity(PowerLawTail(4.0, 0.3, 0.1)).histogram(1.0)
        for s in (3, 4, 7, 63):
            lv = build_codebook(DensitySpec(CUBEROOT, 1.0, s, histogram=h)).levels
            assert np.max(np.abs(lv + lv[::-1])) <= 1e-9

    def test_biscaled_layout(self):
        lv = build_codebook(DensitySpec(BISCALED, 1.0, 7, k=0.4, s_alpha=2, s_beta=5)).levels
        assert np.allclose(lv, [-1.0, -0.4, -0.24, -0.08, 0.08, 0.24, 0.4, 1.0])

    def test_biscaled_odd_outer_split(self):
        with pytest.raises(OddSplit):
            build_codebook(DensitySpec(BISCALED, 1.0, 7, k=0.4, s_alpha=3, s_beta=4))

    def test_biscaled_split_must_sum(self):
        with pytest.raises(InputError):
            DensitySpec(BISCALED, 1.0, 7, k=0.4, s_alpha=2, s_beta=4)

    def test_codebook_invariants(self):
        with pytest.raises(InputError):
            Codebook(np.array([0.0, 0.0, 1.0]))
        cb = build_codebook(DensitySpec(UNIFORM, 1.0, 7))
        with pytest.raises(ValueError):
            cb.levels[0] = 5.0


class TestStochasticQuantize:
    cb = build_codebook(DensitySpec(UNIFORM, 1.0, 7))

    def test_levels_map_exactly(self):
        lv = self.cb.levels
        idx = stochastic_quantize(np.repeat(lv, 100), self.cb, 3)
        assert np.array_equal(idx, np.repeat(np.arange(8), 100))

    def test_midpoint_frequency(self):
        lv = self.cb.levels
        g = 0.5 * (lv[2] + lv[3])
        idx = stochastic_quantize(np.full(10 ** 6, g), self.cb, 11)
        assert set(np.unique(idx)) == {2, 3}
        assert abs(np.mean(idx == 3) - 0.5) <= 0.002

    def test_unbiased_example(self):
        g = 0.37
        v = dequantize(stochastic_quantize(np.full(10 ** 6, g), self.cb, 5), self.cb)
        half_step = (2 / 7) / 2
        assert abs(v.mean() - g) <= 4 * half_step / 1e3

    def test_deterministic(self):
        x = np.random.default_rng(0).uniform(-1, 1, 1000)
        a = stochastic_quantize(x, self.cb, 42)
        b = stochastic_quantize(x, self.cb, 42)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, stochastic_quantize(x, self.cb, 43))

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            stochastic_quantize([1.5], self.cb, 0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=64))
    def test_truncate_then_quantize_never_fails(self, xs):
        for variant_cb in (self.cb, build_codebook(DensitySpec(BISCALED, 1.0, 7, k=0.5, s_alpha=4, s_beta=3))):
            idx = stochastic_quantize(truncate(xs, 1.0), variant_cb, 0)
            assert idx.min() >= 0 and idx.max() <= 7

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-1.0, 1.0), st.integers(0, 2 ** 32 - 1))
    def test_adjacent_levels_only(self, g, seed):
        idx = stochastic_quantize(np.full(200, g), self.cb, seed)
        lv = self.cb.levels
        v = lv[idx]
        step = 2 / 7
        assert np.all(np.abs(v - g) <= step + 1e-12)


class TestDequantize:
    cb = build_codebook(DensitySpec(UNIFORM, 0.75, 7))

    def test_endpoints(self):
        assert dequantize([0], self.cb)[0] == -0.75
        assert dequantize([7], self.cb)[0] == 0.75

    def test_levels_identity(self):
        idx = stochastic_quantize(self.cb.levels, self.cb, 0)
        assert np.array_equal(dequantize(idx, self.cb), self.cb.levels)

    def test_codec_roundtrip(self):
        idx = np.random.default_rng(2).integers(0, 8, 333)
        back = decode_bits(encode_bits(idx, 3), 3, idx.size)
        assert np.array_equal(dequantize(back, self.cb), dequantize(idx, self.cb))

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            dequantize([8], self.cb)
        with pytest.raises(IndexOutOfRange):
            dequantize([-1], self.cb)


class TestMseBound:
    def test_single_interval(self):
        alpha = 0.8
        cb = build_codebook(DensitySpec(UNIFORM, alpha, 1))
        q, six = mse_bound(cb, DensityHistogram.uniform(-alpha, alpha))
        assert q == pytest.approx(alpha ** 2)
        assert six == pytest.approx(2 * alpha ** 2 / 3)

    def test_uniform_s7(self):
        cb = build_codebook(DensitySpec(UNIFORM, 1.0, 7))
        q, six = mse_bound(cb, DensityHistogram.uniform(-1, 1))
        assert q == pytest.approx((2 / 7) ** 2 / 4, rel=1e-12)
        assert six == pytest.approx((2 / 7) ** 2 / 6, rel=1e-12)

    def test_support_mismatch(self):
        cb = build_codebook(DensitySpec(UNIFORM, 1.0, 7))
        with pytest.raises(SupportMismatch):
            mse_bound(cb, DensityHistogram.uniform(5.0, 6.0))

    @pytest.mark.parametrize("s", [7, 63, 127])
    def test_monte_carlo_powerlaw(self, s):
        tail = PowerLawTail(4.0, 0.2, 0.1)
        model = BodyTailDensity(tail)
        alpha = 0.6
        rng = np.random.default_rng(s)
        x = truncate(model.sample(10 ** 6, rng), alpha)
        cb = build_codebook(DensitySpec(UNIFORM, alpha, s))
        sq = (dequantize(stochastic_quantize(x, cb, rng), cb) - x) ** 2
        mse, se = sq.mean(), sq.std() / 1e3
        q, six = mse_bound(cb, model)
        assert mse - 3 * se <= q
        if s >= 63:
            assert abs(mse - six) / mse <= 0.05


class TestEmpiricalMse:
    def test_identical(self):
        x = np.arange(5.0)
        assert empirical_mse(x, x) == 0.0

    def test_offset(self):
        x = np.random.default_rng(0).standard_normal(100)
        assert empirical_mse(x, x + 0.3) == pytest.approx(0.09, rel=1e-12)

    def test_two_pass_reference(self):
        rng = np.random.default_rng(9)
        a, b = rng.standard_normal(1000), rng.standard_normal(1000)
        ref = sum((u - v) ** 2 for u, v in zip(a.tolist(), b.tolist())) / 1000
        assert abs(empirical_mse(a, b) - ref) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            empirical_mse([1.0], [1.0, 2.0])
