"""Analytic cost model: MACs, parameters, int8 footprint and duty-cycled energy.

Only multiply-accumulates are counted (softmax, layernorm and activations
are excluded). Deployment numbers scale MACs by one throughput constant
calibrated on the Bio1 / filter-10 deployment (3.3 MMAC in 2.72 ms).
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .model import BioformerConfig, FloatOps, forward_batch, init_params, param_shapes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TableRow:
    name: str
    heads: int | None
    depth: int | None
    filter: int | None
    memory_kB: float
    mmac: float
    latency_ms: float
    energy_mJ: float
    q_acc: float


# Reported deployment results (GAP8, 100 MHz, 51 mW); kB = 1000 bytes
TABLE_I = (
    TableRow("Bio1, wind=30", 8, 1, 30, 110.8, 1.2, 1.03, 0.052, 61.09),
    TableRow("Bio1, wind=20", 8, 1, 20, 102.1, 1.7, 1.37, 0.070, 63.14),
    TableRow("Bio1, wind=10", 8, 1, 10, 94.2, 3.3, 2.72, 0.139, 64.69),
    TableRow("Bio2, wind=30", 2, 2, 30, 92.2, 1.0, 1.55, 0.079, 60.19),
    TableRow("Bio2, wind=10", 2, 2, 10, 78.3, 2.5, 4.82, 0.246, 62.43),
)
TEMPONET = TableRow("TEMPONet", None, None, None, 461.0, 16.0, 21.82, 1.11, 61.00)

HEADS_GRID = (1, 2, 4, 8)
DEPTH_GRID = (1, 2, 3, 4)
FILTER_GRID = (1, 5, 10, 20, 30)


def table_row_config(row: TableRow) -> BioformerConfig:
    return BioformerConfig(heads=row.heads, depth=row.depth, filter=row.filter)


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------


def count_macs(cfg: BioformerConfig) -> int:
    N, S, C, F = cfg.n_tokens, cfg.seq_len, cfg.embed, cfg.filter
    H, P, HP, D = cfg.heads, cfg.head_dim, cfg.inner, cfg.ffn_dim
    conv = N * C * F * cfg.in_channels
    per_layer = (3 * S * C * HP          # query/key/value projections
                 + H * S * S * P         # scores
                 + H * S * S * P         # attention x values
                 + S * HP * D + S * D * C)
    head = C * cfg.num_classes
    return conv + cfg.depth * per_layer + head


def count_params(cfg: BioformerConfig) -> int:
    C, HP, D = cfg.embed, cfg.inner, cfg.ffn_dim
    conv = C * cfg.in_channels * cfg.filter + C
    tokens = C + (cfg.seq_len * C if cfg.use_pos_embedding else 0)
    norm = 2 * C if cfg.norm_residual else 0
    layer = norm + 3 * (C * HP + HP) + HP * D + D + D * C + C
    head = C * cfg.num_classes + cfg.num_classes
    return conv + tokens + cfg.depth * layer + norm + head


def count_bias_params(cfg: BioformerConfig) -> int:
    """Parameters stored as int32 after lowering (biases and layernorm shifts)."""
    C, HP, D = cfg.embed, cfg.inner, cfg.ffn_dim
    norm = C if cfg.norm_residual else 0
    return C + cfg.depth * (norm + 3 * HP + D + C) + norm + cfg.num_classes


def requant_metadata_bytes(cfg: BioformerConfig) -> int:
    linear = 2 * 4  # multiplier, shift (int32)
    add = 4 * 4
    softmax = 5 * 8
    ln = 3 * 8 + linear
    total = linear  # tokens
    if cfg.use_pos_embedding:
        total += add
    per_layer = 3 * linear + 2 * linear + 2 * linear + softmax  # qkv, scores+attn, proj1/proj2
    if cfg.norm_residual:
        per_layer += ln + add
        total += cfg.embed  # folded class row of the first block
        total += ln  # final norm
    return total + cfg.depth * per_layer + linear  # + logits


def int8_param_bytes(cfg: BioformerConfig) -> int:
    """Closed-form size of the lowered model: 1 B/weight, 4 B/bias, plus requant metadata."""
    n_bias = count_bias_params(cfg)
    return (count_params(cfg) - n_bias) + 4 * n_bias + requant_metadata_bytes(cfg)


class MacCountingOps(FloatOps):
    """fp32 forward that tallies every multiply performed by a matrix product."""

    def __init__(self):
        self.macs = 0
        self.by_site: dict[str, int] = {}

    def _count(self, site, a, b):
        n = int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1]
        self.macs += n
        self.by_site[site] = self.by_site.get(site, 0) + n

    def linear(self, out_site, x, in_site, wname, w, b):
        self._count(out_site, x, w)
        return super().linear(out_site, x, in_site, wname, w, b)

    def matmul(self, out_site, a, a_site, b, b_site, alpha=1.0):
        self._count(out_site, a, b)
        return super().matmul(out_site, a, a_site, b, b_site, alpha)


def traced_macs(cfg: BioformerConfig, params=None) -> int:
    """MACs of one window, counted during an instrumented forward pass."""
    ops = MacCountingOps()
    params = params if params is not None else init_params(cfg, 0)
    forward_batch(params, np.zeros((1, cfg.window_len, cfg.in_channels), np.float32), cfg, ops)
    return ops.macs


def enumerated_params(cfg: BioformerConfig) -> int:
    return int(sum(v.size for v in init_params(cfg, 0).values()))


def shape_params(cfg: BioformerConfig) -> int:
    return int(sum(math.prod(s) for s in param_shapes(cfg).values()))


# ---------------------------------------------------------------------------
# deployment estimate
# ---------------------------------------------------------------------------

CALIBRATION_ROW = TABLE_I[2]


@dataclass(frozen=True)
class DeployModel:
    active_power_mW: float = 51.0
    idle_power_mW: float = 10.0
    throughput_MMAC_per_ms: float = CALIBRATION_ROW.mmac / CALIBRATION_ROW.latency_ms
    period_ms: float = 15.0
    battery_Wh: float = 3.3  # 1000 mAh at 3.3 V

    def __post_init__(self):
        if not self.active_power_mW > self.idle_power_mW > 0:
            raise ValueError("need active_power_mW > idle_power_mW > 0")
        if not (self.throughput_MMAC_per_ms > 0 and self.period_ms > 0 and self.battery_Wh > 0):
            raise ValueError("throughput, period and battery must be positive")


@dataclass
class CostReport:
    name: str
    macs: int
    params: int
    param_bytes_int8: int
    est_latency_ms: float
    est_energy_mJ: float
    avg_power_mW: float
    battery_hours: float

    @property
    def mmac(self) -> float:
        return self.macs / 1e6


def duty_cycle_power(latency_ms: float, dm: DeployModel = DeployModel()) -> float:
    if latency_ms > dm.period_ms:
        log.warning("latency %.3f ms exceeds the %.1f ms period; duty cycle saturated",
                    latency_ms, dm.period_ms)
        return dm.active_power_mW
    return (latency_ms * dm.active_power_mW + (dm.period_ms - latency_ms) * dm.idle_power_mW) / dm.period_ms


def battery_hours(avg_power_mW: float, dm: DeployModel = DeployModel()) -> float:
    return dm.battery_Wh * 1000.0 / avg_power_mW


def estimate_deployment(macs: int, dm: DeployModel = DeployModel(), name: str = "",
                        params: int = 0, param_bytes: int = 0) -> CostReport:
    if macs <= 0:
        raise ValueError("macs must be positive")
    latency = macs / 1e6 / dm.throughput_MMAC_per_ms
    energy = latency * dm.active_power_mW / 1000.0  # mW * ms = uJ
    avg = duty_cycle_power(latency, dm)
    return CostReport(name, int(macs), int(params), int(param_bytes), latency, energy, avg, battery_hours(avg, dm))


def profile_config(cfg: BioformerConfig, dm: DeployModel = DeployModel(), name: str | None = None) -> CostReport:
    name = name or f"h={cfg.heads},d={cfg.depth},F={cfg.filter}"
    return estimate_deployment(count_macs(cfg), dm, name, count_params(cfg), int8_param_bytes(cfg))


def grid_configs(heads=HEADS_GRID, depths=DEPTH_GRID, filters=FILTER_GRID, **kw) -> list[BioformerConfig]:
    return [BioformerConfig(heads=h, depth=d, filter=f, **kw)
            for h, d, f in itertools.product(heads, depths, filters)]


def reference_row_for(cfg: BioformerConfig) -> TableRow | None:
    for row in TABLE_I:
        if (row.heads, row.depth, row.filter) == (cfg.heads, cfg.depth, cfg.filter):
            return row
    return None


# ---------------------------------------------------------------------------
# Pareto fronts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoPoint:
    name: str
    accuracy: float
    macs: int
    params: int


def _front(points: list[ParetoPoint], cost) -> list[ParetoPoint]:
    # sort by cost, then best accuracy first; a point survives if it beats every cheaper one
    ordered = sorted(points, key=lambda p: (cost(p), -p.accuracy, p.name))
    front, best = [], -math.inf
    for p in ordered:
        if p.accuracy > best:
            front.append(p)
            best = p.accuracy
    return front


def pareto_scan(points: list[ParetoPoint]) -> dict[str, list[ParetoPoint]]:
    """Non-dominated points for (max accuracy, min MACs) and (max accuracy, min params)."""
    if not points:
        raise ValueError("pareto_scan needs at least one point")
    return {"macs": _front(points, lambda p: p.macs), "params": _front(points, lambda p: p.params)}


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------

_COLUMNS = [f.name for f in fields(CostReport)]


def reports_to_csv(reports: list[CostReport], extra: list[dict] | None = None) -> str:
    out = io.StringIO()
    extra_keys = sorted({k for e in (extra or []) for k in e})
    w = csv.writer(out, lineterminator="\n")
    w.writerow(_COLUMNS + extra_keys)
    for i, r in enumerate(reports):
        d = asdict(r)
        e = extra[i] if extra else {}
        w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in _COLUMNS]
                   + [e.get(k, "") for k in extra_keys])
    return out.getvalue()


def reports_from_csv(text: str) -> list[CostReport]:
    rows = csv.DictReader(io.StringIO(text))
    types = {f.name: f.type for f in fields(CostReport)}
    out = []
    for row in rows:
        kw = {}
        for c in _COLUMNS:
            t = types[c]
            kw[c] = row[c] if t in ("str", str) else (int(row[c]) if t in ("int", int) else float(row[c]))
        out.append(CostReport(**kw))
    return out


def reports_to_table(reports: list[CostReport], ref: list[TableRow | None] | None = None) -> str:
    head = f"{'Network':<18} {'Memory':>10} {'MMAC':>7} {'Lat.[ms]':>9} {'E.[mJ]':>8} {'P.avg[mW]':>10} {'Batt.[h]':>9}"
    if ref:
        head += f" {'ref Mem':>10} {'ref MMAC':>10}"
    lines = [head, "-" * len(head)]
    for i, r in enumerate(reports):
        line = (f"{r.name:<18} {r.param_bytes_int8 / 1000:>7.1f} kB {r.mmac:>7.2f} {r.est_latency_ms:>9.2f} "
                f"{r.est_energy_mJ:>8.3f} {r.avg_power_mW:>10.2f} {r.battery_hours:>9.1f}")
        if ref:
            row = ref[i]
            line += (f" {row.memory_kB:>7.1f} kB {row.mmac:>10.1f}" if row else f" {'':>10} {'':>10}")
        lines.append(line)
    return "\n".join(lines) + "\n"
