import numpy as np
import pytest

from neurodistill.errors import ConfigError, ContractError, FoldError
from neurodistill.quant import (ADC, DyadicScale, QuantSpec, accumulator_bound, alpha_grad, dyadic_approx,
                                fake_quant_weight, int_add, int_div, int_div_scaled, int_layernorm_float, isqrt,
                                pact_clip_forward, per_channel_weight_scales, quantize_sym, quantize_weight,
                                requantize, round_shift)


class TestQuantizeSym:
    def test_zero(self):
        assert quantize_sym(0.0, 8, 0.1) == 0

    def test_half_to_even(self):
        s = 0.01
        assert quantize_sym(5.5 * s, 8, s) == 6
        assert quantize_sym(np.array([4.5, -4.5, 2.5]), 8, 1.0).tolist() == [4, -4, 2]

    def test_saturates(self):
        assert quantize_sym(np.array([1e6, -1e6]), 8, 1.0).tolist() == [127, -127]

    def test_error_within_half_step(self):
        s = 0.037
        x = np.random.default_rng(0).uniform(-127 * s, 127 * s, 10000)
        assert np.abs(quantize_sym(x, 8, s) * s - x).max() <= s / 2 + 1e-15

    def test_scale_positive(self):
        with pytest.raises(ContractError):
            quantize_sym(1.0, 8, 0.0)

    def test_spec_bounds(self):
        with pytest.raises(ConfigError):
            QuantSpec(weight_bits=1)
        assert QuantSpec().div_shift == 12 and QuantSpec().adc_bits == 10


class TestWeightScales:
    def test_max_127(self):
        w = np.zeros((3, 2))
        w[1, 0] = -1.27
        w[2, 1] = 0.5
        np.testing.assert_allclose(per_channel_weight_scales(w), [0.01, 0.5 / 127], rtol=1e-15)

    def test_zero_channel(self):
        w = np.zeros((4, 2))
        w[:, 0] = [0.1, -0.2, 0.3, 0.0]
        codes, scales = quantize_weight(w)
        assert scales[1] == 1.0 and not codes[:, 1].any()

    def test_full_range_per_channel(self):
        codes, _ = quantize_weight(np.random.default_rng(1).standard_normal((32, 16)))
        np.testing.assert_array_equal(np.abs(codes).max(axis=0), 127)

    def test_fake_quant_error(self):
        w = np.random.default_rng(2).standard_normal((20, 5))
        s = per_channel_weight_scales(w)
        assert np.all(np.abs(fake_quant_weight(w) - w) <= s / 2 + 1e-15)


class TestPact:
    def test_in_range(self):
        alpha = 2.0
        x = np.random.default_rng(3).uniform(-1.9, 1.9, 1000)
        y, mask = pact_clip_forward(x, alpha)
        assert np.abs(y - x).max() <= alpha / 127 / 2 + 1e-15
        assert not mask.any()

    def test_clamped(self):
        y, mask = pact_clip_forward(np.array([4.0, -4.0]), 2.0)
        np.testing.assert_array_equal(y, [2.0, -2.0])
        assert mask.tolist() == [1, -1]

    def test_alpha_positive(self):
        with pytest.raises(ContractError):
            pact_clip_forward(np.ones(2), 0.0)

    def test_alpha_grad(self):
        assert alpha_grad(np.zeros(5, dtype=np.int8)) == 0.0
        assert alpha_grad(np.array([0, 1, 0]), np.array([9.0, 0.25, -3.0])) == 0.25
        assert alpha_grad(np.array([1, -1]), np.array([0.7, 0.7])) == 0.0

    def test_alpha_grad_one_sided_fd(self):
        # d/dalpha of sum(g * clamp(x, -alpha, alpha)) away from the clip boundaries
        rng = np.random.default_rng(4)
        x = rng.uniform(-3, 3, 200)
        g = rng.standard_normal(200)
        alpha, h = 1.3, 1e-6
        y0, mask = pact_clip_forward(x, alpha, quantize=False)
        y1, _ = pact_clip_forward(x, alpha + h, quantize=False)
        num = float(np.sum(g * (y1 - y0)) / h)
        assert abs(alpha_grad(mask, g) - num) < 1e-4


class TestDyadic:
    def test_exact(self):
        assert dyadic_approx(0.5) == DyadicScale(1 << 14, 15)
        assert dyadic_approx(1.0) == DyadicScale(1 << 14, 14)
        assert dyadic_approx(1.0).value == 1.0

    def test_third(self):
        d = dyadic_approx(1 / 3)
        assert abs(d.value - 1 / 3) / (1 / 3) <= 2.0**-15

    def test_log_sweep(self):
        for r in np.logspace(-10, 10, 2001, base=2.0)[1:-1]:
            d = dyadic_approx(r)
            assert abs(d.value - r) / r <= 2.0**-15
            assert (1 << 14) <= d.m <= (1 << 15)

    def test_out_of_range(self):
        for r in (0.0, -1.0, float("inf"), 2.0**20):
            with pytest.raises(FoldError):
                dyadic_approx(r)


class TestRequantize:
    def test_zero_and_half(self):
        d = dyadic_approx(0.5)
        assert requantize(0, d) == 0
        assert requantize(100, d) == 50

    def test_round_half_up(self):
        assert round_shift(np.array([5, -5, 3]), 1).tolist() == [3, -2, 2]
        assert round_shift(np.array([7]), 0).tolist() == [7]

    def test_sweep_within_one_lsb(self):
        rng = np.random.default_rng(5)
        for r in rng.uniform(1e-3, 2.0, 50):
            y = rng.integers(-(1 << 20), 1 << 20, 500)
            ref = np.clip(np.rint(y * r), -127, 127)
            assert np.abs(requantize(y, dyadic_approx(r)) - ref).max() <= 1

    def test_saturation(self):
        assert requantize(np.array([10**6, -10**6]), dyadic_approx(1.0)).tolist() == [127, -127]


class TestIntDiv:
    def test_ratio_one(self):
        s_o = 1 / 64
        a = np.array([7, 100, 2000])
        o = int_div_scaled(a, 0.3, a, 0.3, s_o)
        assert np.all(np.abs(o * s_o - 1.0) <= 2.0**-12 + s_o / 2)

    def test_zero_denominator(self):
        d = dyadic_approx(1.0)
        np.testing.assert_array_equal(int_div(np.array([5, 9]), np.array([0, 0]), d),
                                      int_div(np.array([5, 9]), np.array([1, 1]), d))

    def test_random_bound(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            s_a, s_b, s_o = rng.uniform(1e-3, 1.0, 3)
            a = rng.integers(0, 1 << 16, 400)
            b = rng.integers(1, 1 << 16, 400)
            o = int_div_scaled(a, s_a, b, s_b, s_o)
            ref = a * s_a / (b * s_b)
            assert np.all(np.abs(o * s_o - ref) <= ref * 2.0**-12 + s_o)

    def test_pre_shift_error(self):
        # the widened quotient floor(A*m*2^e / B) is within 1 unit of A*m*2^e/B, i.e. 2^-e after the shift
        rng = np.random.default_rng(7)
        a, b = rng.integers(0, 1 << 15, 1000), rng.integers(1, 1 << 15, 1000)
        t = (a << 12) // b
        assert np.all(np.abs(t / 2.0**12 - a / b) < 2.0**-12)


class TestIsqrt:
    def test_identities(self):
        assert isqrt(np.array([16, 17, 2**30, 0, 1, 3])).tolist() == [4, 4, 2**15, 0, 1, 1]

    def test_floor_sqrt(self):
        n = np.random.default_rng(8).integers(0, 2**62, 5000)
        r = isqrt(n)
        assert np.all(r * r <= n) and np.all((r + 1) * (r + 1) > n)

    def test_negative(self):
        with pytest.raises(ContractError):
            isqrt(np.array([-1]))


class TestIntLayerNorm:
    def test_constant_row(self):
        out = int_layernorm_float(np.full((1, 6), 17), 0.1, np.ones(6), np.full(6, 0.25), 0.05)
        np.testing.assert_array_equal(out, 5)

    def test_float_oracle(self):
        rng = np.random.default_rng(9)
        d, s_out = 32, 4.0 / 127
        gain, shift = rng.uniform(0.5, 1.5, d), rng.uniform(-0.3, 0.3, d)
        x = rng.integers(-2000, 2000, (300, d))
        out = int_layernorm_float(x, 0.01, gain, shift, s_out)
        xf = x.astype(np.float64)
        ln = (xf - xf.mean(1, keepdims=True)) / xf.std(1, keepdims=True) * gain + shift
        ref = np.clip(np.rint(ln / s_out), -127, 127)
        assert np.abs(out - ref).max() <= 2


class TestIntAdd:
    def test_matches_float(self):
        rng = np.random.default_rng(10)
        x, y = rng.integers(-127, 128, 500), rng.integers(-127, 128, 500)
        rx, ry = 0.37, 1.9
        out = int_add(x, dyadic_approx(rx), y, dyadic_approx(ry))
        assert np.abs(out - (x * rx + y * ry)).max() <= 1


class TestAccumulator:
    def test_fan_in_320(self):
        b = accumulator_bound(127, 320, 127)
        assert b == 127 * 127 * 320 and b < 2**23 < 2**31

    def test_single_input(self):
        assert accumulator_bound(127, 1, 127) == 127 * 127


class TestAdc:
    def test_mapping(self):
        adc = ADC(8.0)
        assert adc.convert(np.array([-8.0, 8.0, 0.0, 100.0])).tolist() == [0, 1023, 512, 1023]
        lut = adc.lookup_table()
        assert len(lut) == 1024 and lut[512] == 0 and lut.dtype == np.int64
