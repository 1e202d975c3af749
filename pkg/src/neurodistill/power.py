"""Per-window energy and power estimate: operations, leakage and I/O.

Energy per inference cycle is ``op + leak + io`` in joules; power is that
energy divided by the cycle period. The shipped energy tables are
back-solved from the published per-component energies of the main
two-layer configuration, so they reproduce those numbers exactly for that
configuration and scale linearly for others.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import model as M
from .errors import ConfigError
from .quant.primitives import QuantSpec
from .signal import MorletBank, build_morlet_bank, BANK_PRESETS

DEFAULT_CYCLE_S = 0.05
DEFAULT_LIMIT_MW = 15.0


@dataclass
class Resources:
    macs: int
    weight_bytes: int
    io_bytes: int
    precision: str = "fp32"  # fp32 | int8
    macs_by_part: dict = field(default_factory=dict)
    bytes_by_part: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def linear_macs(n_tokens: int, fan_in: int, fan_out: int) -> int:
    return n_tokens * fan_in * fan_out


def _bytes(bits: int) -> int:
    return (bits + 7) // 8


def count_resources(cfg: M.DecoderConfig, bank: Optional[MorletBank] = None, n_samples: int = 0,
                    n_channels: int = 0, spec: Optional[QuantSpec] = None) -> Resources:
    """MACs, on-chip weight bytes and I/O bytes for one window.

    ``spec=None`` counts a float32 deployment; otherwise tensors are counted at
    the QuantSpec bit-widths. MACs cover the complex wavelet convolutions (two
    real MACs per tap) and every matmul; weight bytes cover decoder
    parameters and wavelet kernels; I/O is the raw window in plus the logits
    out.
    """
    L, D, d, f, K = cfg.n_tokens, cfg.input_dim, cfg.embed_dim, cfg.ffn_dim, cfg.out_dim
    macs = {}
    if bank is not None and n_samples:
        macs["wavelet"] = sum(2 * len(k) for k in bank.kernels) * n_samples * n_channels
    macs["input_layer"] = linear_macs(L, D, d)
    macs["projections"] = cfg.n_layers * 4 * linear_macs(L, d, d)
    macs["attention_scores"] = cfg.n_layers * L * L * d
    macs["attention_values"] = cfg.n_layers * L * L * d
    macs["ffn"] = cfg.n_layers * 2 * linear_macs(L, d, f)
    macs["classifier"] = linear_macs(1, d, K)

    shapes = M.param_shapes(cfg)
    kernel_taps = sum(2 * len(k) for k in bank.kernels) if bank is not None else 0
    if spec is None:
        precision = "fp32"
        by = {"weights": 4 * sum(math.prod(s) for s in shapes.values()), "wavelet_kernels": 4 * kernel_taps}
        io = 4 * n_samples * n_channels + 4 * K
    else:
        precision = "int8"
        wb, layer_norm, bias = 0, 0, 0
        for name, s in shapes.items():
            n = math.prod(s)
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("ln"):
                # folded to a 16-bit mantissa (gain) or a 32-bit offset (shift)
                layer_norm += n * (_bytes(spec.dyadic_bits) if leaf.endswith("_g") else 4)
            elif leaf == "b_s":
                bias += n * _bytes(spec.bias_bits)
            else:
                wb += n * _bytes(spec.weight_bits)
        by = {"weights": wb, "layer_norm": layer_norm, "bias": bias,
              "wavelet_kernels": kernel_taps * _bytes(spec.wavelet_kernel_bits)}
        io = _bytes(spec.adc_bits) * n_samples * n_channels + _bytes(spec.act_bits) * K
    return Resources(int(sum(macs.values())), int(sum(by.values())), int(io), precision, macs, by)


@dataclass
class EnergyTable:
    e_op_fp32: float  # J per MAC
    e_op_int8: float
    leak_j_per_byte_cycle: float
    e_io_per_byte: float
    cycle_period_s: float = DEFAULT_CYCLE_S

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"energy table entry {f.name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostBreakdown:
    op_j: float
    leak_j: float
    io_j: float
    total_j: float
    power_mw: float
    cycle_period_s: float = DEFAULT_CYCLE_S

    def to_dict(self) -> dict:
        return asdict(self)


def power_mw(total_j: float, cycle_period_s: float = DEFAULT_CYCLE_S) -> float:
    return total_j / cycle_period_s * 1000.0


def breakdown(op_j: float, leak_j: float, io_j: float, cycle_period_s: float = DEFAULT_CYCLE_S) -> CostBreakdown:
    total = op_j + leak_j + io_j
    return CostBreakdown(op_j, leak_j, io_j, total, power_mw(total, cycle_period_s), cycle_period_s)


def estimate(res: Resources, table: EnergyTable) -> CostBreakdown:
    e_op = table.e_op_fp32 if res.precision == "fp32" else table.e_op_int8
    return breakdown(res.macs * e_op, res.weight_bytes * table.leak_j_per_byte_cycle,
                     res.io_bytes * table.e_io_per_byte, table.cycle_period_s)


@dataclass
class BudgetVerdict:
    passed: bool
    power_mw: float
    limit_mw: float
    margin_mw: float

    def to_dict(self) -> dict:
        return asdict(self)


def budget_check(cost: CostBreakdown, limit_mw: float = DEFAULT_LIMIT_MW) -> BudgetVerdict:
    """Pass when power is at or below the implant budget."""
    return BudgetVerdict(cost.power_mw <= limit_mw, cost.power_mw, limit_mw, limit_mw - cost.power_mw)


# -- presets ---------------------------------------------------------------

REFERENCE_ROWS = {
    "fp": {"op_j": 1.682e-6, "leak_j": 1.130e-3, "io_j": 1.069e-5, "total_j": 1.142e-3},
    "w8a8": {"op_j": 8.409e-8, "leak_j": 2.824e-4, "io_j": 5.347e-7, "total_j": 2.83e-4},
}

MAIN_N_SAMPLES = 750
MAIN_N_CHANNELS = 32


def main_config():
    """The 320-input, two-layer decoder with the 10-frequency bank on 32 channels at 500 Hz."""
    bank = build_morlet_bank(BANK_PRESETS["human_c"], 500.0)
    cfg = M.DecoderConfig(input_dim=MAIN_N_CHANNELS * bank.n_freqs, out_dim=6)
    return cfg, bank


def _solve_presets() -> dict:
    cfg, bank = main_config()
    fp = count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS)
    q = count_resources(cfg, bank, MAIN_N_SAMPLES, MAIN_N_CHANNELS, QuantSpec())
    e_fp = REFERENCE_ROWS["fp"]["op_j"] / fp.macs
    e_q = REFERENCE_ROWS["w8a8"]["op_j"] / q.macs
    return {
        "table6-fp": EnergyTable(e_fp, e_q, REFERENCE_ROWS["fp"]["leak_j"] / fp.weight_bytes,
                                 REFERENCE_ROWS["fp"]["io_j"] / fp.io_bytes),
        "table6-w8a8": EnergyTable(e_fp, e_q, REFERENCE_ROWS["w8a8"]["leak_j"] / q.weight_bytes,
                                   REFERENCE_ROWS["w8a8"]["io_j"] / q.io_bytes),
    }


PRESETS = _solve_presets()
PRESET_PRECISION = {"table6-fp": None, "table6-w8a8": QuantSpec()}


def preset(name: str) -> EnergyTable:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown energy preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_energy_table(path, base: Optional[EnergyTable] = None) -> EnergyTable:
    """Read ``key = value`` lines (``#`` comments allowed) over an optional base table."""
    values = asdict(base) if base is not None else {}
    names = {f.name for f in fields(EnergyTable)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = float(val)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: {val!r} is not a number") from None
    missing = names - set(values) - {"cycle_period_s"}
    if missing:
        raise ConfigError(f"energy table is missing {sorted(missing)}")
    return EnergyTable(**values)


def report_json(cost: CostBreakdown, verdict: BudgetVerdict) -> str:
    return json.dumps({"breakdown": cost.to_dict(), "budget": verdict.to_dict()}, indent=2, sort_keys=True)
