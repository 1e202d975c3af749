import math

import pytest

from neurodistill import model as M
from neurodistill.errors import ConfigError
from neurodistill.power import (MAIN_N_CHANNELS, MAIN_N_SAMPLES, REFERENCE_ROWS, EnergyTable, Resources,
                                breakdown, budget_check, count_resources, estimate, load_energy_table, main_config,
                                power_mw, preset)
from neurodistill.quant import QuantSpec


def sig3(x):
    return float(f"{x:.3g}")


def spreadsheet_macs():
    """Row-by-row MAC enumeration of the main config, written out by hand."""
    rows = [
        ("input projection 10x320 @ 320x32", 10 * 320 * 32),
        ("per layer: q, k, v, o projections 4 x (10x32 @ 32x32)", 2 * 4 * 10 * 32 * 32),
        ("per layer: phi(Q) phi(K)^T 10x32 @ 32x10", 2 * 10 * 32 * 10),
        ("per layer: scores @ V 10x10 @ 10x32", 2 * 10 * 10 * 32),
        ("per layer: ffn 10x32 @ 32x128 and 10x128 @ 128x32", 2 * 2 * 10 * 32 * 128),
        ("classifier 32 @ 32x6", 32 * 6),
    ]
    decoder = sum(n for _, n in rows)
    taps = 0
    for f in (10, 30, 50, 60, 70, 80, 90, 120, 150, 200):
        sigma = 7.0 / (2 * math.pi * f)
        taps += 2 * (2 * math.floor(4 * sigma * 500.0) + 1)  # real + imaginary
    return decoder, taps * 750 * 32


class TestArithmetic:
    @pytest.mark.parametrize("row,total,mw", [("fp", 1.142e-3, 22.84), ("w8a8", 2.830e-4, 5.66)])
    def test_reference_rows(self, row, total, mw):
        t = REFERENCE_ROWS[row]
        c = breakdown(t["op_j"], t["leak_j"], t["io_j"])
        assert c.total_j == t["op_j"] + t["leak_j"] + t["io_j"]
        assert sig3(c.total_j) == sig3(total)
        assert power_mw(total) == pytest.approx(mw, abs=1e-9)

    def test_zero(self):
        c = estimate(Resources(0, 0, 0), preset("table6-fp"))
        assert c.op_j == c.leak_j == c.io_j == c.total_j == c.power_mw == 0.0

    def test_cycle(self):
        assert power_mw(1e-3) == pytest.approx(20.0)
        assert power_mw(1e-3, 0.1) == pytest.approx(10.0)


class TestBudget:
    def test_quantized_passes(self):
        v = budget_check(breakdown(0.0, 5.66 * 0.05 / 1000, 0.0))
        assert v.passed and v.margin_mw == pytest.approx(9.34, abs=1e-9)

    def test_fp_fails(self):
        assert not budget_check(breakdown(0.0, 22.84 * 0.05 / 1000, 0.0)).passed

    def test_boundary(self):
        c = breakdown(0.0, 0.0, 0.0)
        c.power_mw = 15.0
        assert budget_check(c, 15.0).passed


class TestPresets:
    @pytest.mark.parametrize("name,prec,mw", [("table6-fp", None, 22.847), ("table6-w8a8", QuantSpec(), 5.66)])
    def test_reproduce_main_config(self, name, prec, mw):
        cfg, bank = main_config()
        c = estimate(count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS, prec), preset(name))
        assert c.power_mw == pytest.approx(mw, abs=5e-4)

    @pytest.mark.parametrize("name,prec", [("table6-fp", None), ("table6-w8a8", QuantSpec())])
    def test_leak_dominates(self, name, prec):
        cfg, bank = main_config()
        c = estimate(count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS, prec), preset(name))
        assert c.leak_j > c.op_j + c.io_j

    def test_op_ratio(self):
        t = preset("table6-fp")
        cfg, bank = main_config()
        fp = count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS)
        q = count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS, QuantSpec())
        ratio = (fp.macs * t.e_op_fp32) / (q.macs * t.e_op_int8)
        assert ratio == pytest.approx(1.682e-6 / 8.409e-8, rel=1e-12)
        assert 19.5 < ratio < 20.5

    def test_unknown(self):
        with pytest.raises(ConfigError):
            preset("table9")


class TestResources:
    def test_spreadsheet(self):
        cfg, bank = main_config()
        res = count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS)
        decoder, wavelet = spreadsheet_macs()
        assert res.macs_by_part["wavelet"] == wavelet
        assert res.macs - wavelet == decoder == 361152
        assert res.weight_bytes == 4 * (M.param_count(cfg) + sum(2 * len(k) for k in bank.kernels))

    def test_single_linear(self):
        cfg = M.DecoderConfig(input_dim=9, out_dim=1, embed_dim=1, ffn_dim=1, n_layers=0, n_tokens=1)
        res = count_resources(cfg)
        assert res.macs_by_part["input_layer"] == 9

    def test_attention_quadratic(self):
        a = count_resources(M.DecoderConfig(16, 2, n_tokens=5)).macs_by_part["attention_scores"]
        b = count_resources(M.DecoderConfig(16, 2, n_tokens=10)).macs_by_part["attention_scores"]
        assert b == 4 * a

    def test_int8_smaller(self):
        cfg, bank = main_config()
        fp = count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS)
        q = count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS, QuantSpec())
        assert q.macs == fp.macs and q.weight_bytes < fp.weight_bytes / 3 and q.io_bytes < fp.io_bytes


class TestEnergyFile:
    def test_load(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("# 45 nm\ne_op_fp32 = 4.6e-12\ne_op_int8=2e-13\nleak_j_per_byte_cycle = 1e-9\n"
                     "e_io_per_byte = 1e-11\ncycle_period_s = 0.1\n")
        t = load_energy_table(p)
        assert t == EnergyTable(4.6e-12, 2e-13, 1e-9, 1e-11, 0.1)

    def test_override(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("cycle_period_s = 0.1\n")
        base = preset("table6-w8a8")
        assert load_energy_table(p, base).cycle_period_s == 0.1
        assert load_energy_table(p, base).e_op_int8 == base.e_op_int8

    @pytest.mark.parametrize("text", ["e_op_fp32 = x\n", "bogus = 1\n", "e_op_fp32 1\n", "e_op_fp32 = 1\n"])
    def test_errors(self, tmp_path, text):
        p = tmp_path / "e.txt"
        p.write_text(text)
        with pytest.raises(ConfigError):
            load_energy_table(p)

    def test_positive(self):
        with pytest.raises(ConfigError):
            EnergyTable(0.0, 1.0, 1.0, 1.0)
