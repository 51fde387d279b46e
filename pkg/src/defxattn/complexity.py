"""Analytic multiply-add counts for the three windowed attention mechanisms.

Counts are per window and per layer. Only multiply-adds are counted; softmax
exponentials, normalisation and the residual MLP are left out because they
are identical across mechanisms. Projections are computed once per token, so
each window is charged 3*N_b*C^2 for Q, K and V in every mechanism.
Expanded search windows are modelled as interior windows (no border
clamping); the instrumented check runs on real grids where clamped windows
repeat tokens but keep the same key count.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

MECHANISMS = ("fixed_window_sa", "expanded_window_ca", "dw_mca")


@dataclass(frozen=True)
class ComplexityConfig:
    name: str = "desk"
    window: tuple[int, int, int] = (2, 2, 2)
    factors: tuple[int, int, int] = (3, 3, 3)
    channels: int = 8
    n_heads: int = 2
    offset_kernel: int = 5
    grid: tuple[int, int, int] | None = None

    @property
    def n_b(self) -> int:
        h, w, d = self.window
        return h * w * d

    @property
    def n_s(self) -> int:
        a, b, g = self.factors
        return a * b * g * self.n_b


@dataclass(frozen=True)
class FlopReport:
    mechanism: str
    qkv: int
    scores: int
    av: int
    offset: int = 0
    sampling: int = 0

    @property
    def attention(self) -> int:
        return self.scores + self.av

    @property
    def total(self) -> int:
        return self.qkv + self.scores + self.av + self.offset + self.sampling


def attention_flops(mechanism: str, config: ComplexityConfig) -> FlopReport:
    C, nb = config.channels, config.n_b
    qkv = 3 * nb * C * C
    if mechanism == "fixed_window_sa":
        return FlopReport(mechanism, qkv, nb * nb * C, nb * nb * C)
    if mechanism == "expanded_window_ca":
        ns = config.n_s
        return FlopReport(mechanism, qkv, nb * ns * C, nb * ns * C)
    if mechanism == "dw_mca":
        m = config.offset_kernel
        offset = nb * m ** 3 * C + nb * C * 3 * config.n_heads
        sampling = 8 * nb * C
        return FlopReport(mechanism, qkv, nb * nb * C, nb * nb * C, offset, sampling)
    raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


REPORT_COLUMNS = ("config", "mechanism", "n_b", "n_s", "qkv", "scores", "av", "offset", "sampling",
                  "total", "attention_ratio", "total_ratio")


def complexity_report(configs) -> list[dict]:
    """One row per (config, mechanism), with ratios against fixed-window SA."""
    rows = []
    for cfg in configs:
        base = attention_flops("fixed_window_sa", cfg)
        for mech in MECHANISMS:
            r = attention_flops(mech, cfg)
            rows.append({
                "config": cfg.name, "mechanism": mech, "n_b": cfg.n_b,
                "n_s": cfg.n_s if mech == "expanded_window_ca" else cfg.n_b,
                "qkv": r.qkv, "scores": r.scores, "av": r.av, "offset": r.offset,
                "sampling": r.sampling, "total": r.total,
                "attention_ratio": r.attention / base.attention,
                "total_ratio": r.total / base.total,
            })
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


def format_table(rows) -> str:
    if not rows:
        return "(no configurations)"
    lines = [f"{'config':<10} {'mechanism':<20} {'N_b':>5} {'N_s':>6} {'total':>14} {'attn x':>8} {'total x':>8}"]
    for r in rows:
        lines.append(f"{r['config']:<10} {r['mechanism']:<20} {r['n_b']:>5} {r['n_s']:>6} "
                     f"{r['total']:>14,} {r['attention_ratio']:>8.3f} {r['total_ratio']:>8.3f}")
    return "\n".join(lines)


def default_configs() -> list[ComplexityConfig]:
    return [
        ComplexityConfig("desk", (2, 2, 2), (3, 3, 3), 8, 2, 5, (4, 4, 4)),
        ComplexityConfig("full", (5, 6, 7), (3, 3, 3), 96, 4, 5, None),
    ]


def instrumented_counts(config: ComplexityConfig, seed: int = 0) -> dict[str, dict]:
    """Run every mechanism once on ``config.grid`` and compare counted with analytic score/AV work."""
    from . import attention as attn
    from .core import ParameterStore, Tensor

    if config.grid is None:
        raise ValueError("instrumented counts need a concrete grid")
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    params = attn.init_attention_params(store, "bench", config.channels, config.n_heads, rng,
                                        offset_kernel=config.offset_kernel)
    layout = attn.make_layout(config.grid, config.window)
    shape = tuple(config.grid) + (config.channels,)
    xb, xr = Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))
    runs = {
        "fixed_window_sa": lambda: attn.fixed_window_ca_block(xb, xb, params, layout),
        "expanded_window_ca": lambda: attn.expanded_window_ca(xb, xr, params, layout, *config.factors),
        "dw_mca": lambda: attn.dw_mca_block(xb, xr, params, layout),
    }
    out = {}
    for mech, run in runs.items():
        with attn.count_attention_flops() as counted:
            run()
        analytic = attention_flops(mech, config)
        out[mech] = {
            "counted_scores": counted["scores"], "counted_av": counted["av"],
            "analytic_scores": analytic.scores * layout.n_windows,
            "analytic_av": analytic.av * layout.n_windows,
        }
        out[mech]["match"] = (out[mech]["counted_scores"] == out[mech]["analytic_scores"]
                              and out[mech]["counted_av"] == out[mech]["analytic_av"])
    return out
