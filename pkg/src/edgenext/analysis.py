"""Analytic parameter / MAdds accounting and the attention scaling probe.

Counting convention (tag ``CONVENTION``): one MAdd is one multiply-accumulate.
Convolutions cost ``k*k*(Cin/groups)*Cout*Hout*Wout``, linear maps
``Cin*Cout*positions``.  Biases, norms, activations, softmax, L2
normalization and residual adds are not counted.  Batch-norm running
statistics are not parameters.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from .model import ModelConfig, block_prefixes, pe_block

CONVENTION = "madds-v1:mac=1,excl=norm+act+softmax+l2norm+residual+bias"

CSV_COLUMNS = ("name", "params", "madds", "out_n", "out_h", "out_w", "out_c")


@dataclass(frozen=True)
class CostRow:
    name: str
    params: int
    madds: int
    out_shape: tuple[int, int, int, int]


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def madds(self) -> int:
        return sum(r.madds for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow((r.name, r.params, r.madds, *r.out_shape))
        return buf.getvalue()


# --- per-layer formulas ------------------------------------------------------


def conv_params(k: int, c_in: int, c_out: int, groups: int = 1, bias: bool = True) -> int:
    return k * k * (c_in // groups) * c_out + (c_out if bias else 0)


def conv_madds(k: int, c_in: int, c_out: int, h_out: int, w_out: int, groups: int = 1) -> int:
    return k * k * (c_in // groups) * c_out * h_out * w_out


def linear_params(c_in: int, c_out: int, bias: bool = True) -> int:
    return c_in * c_out + (c_out if bias else 0)


def xca_core_madds(c: int, heads: int, tokens: int) -> int:
    """QKV projections, per-head ``Q^T K`` and ``V @ scores``, output projection."""
    d = c // heads
    return 3 * c * c * tokens + 2 * heads * tokens * d * d + c * c * tokens


def mhsa_quadratic_madds(c: int, heads: int, tokens: int) -> int:
    """Token-by-token score and value products of spatial attention."""
    d = c // heads
    return 2 * heads * tokens * tokens * d


def mhsa_core_madds(c: int, heads: int, tokens: int) -> int:
    return 4 * c * c * tokens + mhsa_quadratic_madds(c, heads, tokens)


def _mlp(c, r, tokens):
    return linear_params(c, r * c) + linear_params(r * c, c), 2 * r * c * c * tokens


def _conv_encoder(c, k, r, tokens):
    p_mlp, m_mlp = _mlp(c, r, tokens)
    params = conv_params(k, c, c, groups=c) + 2 * c + p_mlp
    return params, k * k * c * tokens + m_mlp


def _sdta_encoder(c, s, heads, r, tokens, pe, temperature):
    params = madds = 0
    if pe:
        params += linear_params(2 * B.PE_DIM, c)
        madds += 2 * B.PE_DIM * c * tokens
    for w in B.split_widths(c, s)[1:]:
        params += conv_params(3, w, w, groups=w)
        madds += 9 * w * tokens
    params += 2 * c + 4 * linear_params(c, c) + (heads if temperature else 0)
    madds += xca_core_madds(c, heads, tokens)
    p_mlp, m_mlp = _mlp(c, r, tokens)
    return params + 2 * c + p_mlp, madds + m_mlp


def cost_report(config: ModelConfig, resolution: int | None = None) -> CostReport:
    """Per-layer rows: stem, each downsampler and encoder block, then the head."""
    config.validate()
    res = config.resolution if resolution is None else resolution
    if res % 32:
        raise ValueError(f"resolution must be divisible by 32, got {res}")
    r, widths = config.expansion_ratio, config.widths
    rows = []
    side = res // 4
    rows.append(CostRow(
        "stem",
        conv_params(4, 3, widths[0]) + 2 * widths[0],
        conv_madds(4, 3, widths[0], side, side),
        (1, side, side, widths[0]),
    ))
    pe_at = pe_block(config)
    blocks = block_prefixes(config)
    for i, s in enumerate(config.stages, start=1):
        c = s.width
        if i > 1:
            side //= 2
            c_in = widths[i - 2]
            rows.append(CostRow(
                f"stage{i}.downsample",
                2 * c_in + conv_params(2, c_in, c),
                conv_madds(2, c_in, c, side, side),
                (1, side, side, c),
            ))
        tokens = side * side
        for prefix, stage, kind in blocks:
            if stage != i:
                continue
            if kind == "conv":
                p, m = _conv_encoder(c, s.kernel, r, tokens)
            else:
                p, m = _sdta_encoder(
                    c, s.splits, config.heads, r, tokens, prefix == pe_at, config.temperature
                )
            rows.append(CostRow(prefix.rstrip(".") + f".{kind}", p, m, (1, side, side, c)))
    c4, k = widths[-1], config.num_classes
    rows.append(CostRow("head", 2 * c4 + linear_params(c4, k), c4 * k, (1, 1, 1, k)))
    return CostReport(rows)


def count_params(config: ModelConfig) -> CostReport:
    return cost_report(config)


def count_madds(config: ModelConfig, resolution: int | None = None) -> CostReport:
    return cost_report(config, resolution)


def _human(n: float) -> str:
    for unit, scale in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.3f}{unit}"
    return str(int(n))


def summarize(config: ModelConfig, resolution: int | None = None) -> str:
    """Fixed-width per-layer table with totals, deterministic for fixed inputs."""
    rep = cost_report(config, resolution)
    res = config.resolution if resolution is None else resolution
    lines = [
        f"# model={config.name or 'custom'} resolution={res} convention={rep.convention}",
        f"{'layer':<26}{'output':>16}{'params':>12}{'madds':>16}",
    ]
    for row in rep.rows:
        n, h, w, c = row.out_shape
        lines.append(f"{row.name:<26}{f'{h}x{w}x{c}':>16}{row.params:>12,}{row.madds:>16,}")
    lines.append(f"{'total':<26}{'':>16}{rep.params:>12,}{rep.madds:>16,}")
    lines.append(f"# params={_human(rep.params)} madds={_human(rep.madds)}")
    return "\n".join(lines) + "\n"


# --- attention scaling probe -------------------------------------------------


@dataclass(frozen=True)
class ProbeRow:
    resolution: int
    tokens: int
    xca_madds: int
    mhsa_madds: int
    mhsa_quadratic_madds: int
    xca_seconds: float | None = None
    mhsa_seconds: float | None = None


def spatial_attention(q, k, v, chunk: int = 1024):
    """Reference token-by-token attention on ``(heads, N, d)`` arrays.

    Query rows are processed in chunks so the ``N x N`` score matrix never
    has to exist in full.
    """
    d = q.shape[-1]
    out = np.empty_like(v)
    for a in range(0, q.shape[1], chunk):
        s = q[:, a : a + chunk] @ k.transpose(0, 2, 1) / np.sqrt(d)
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s /= s.sum(axis=-1, keepdims=True)
        out[:, a : a + chunk] = s @ v
    return out


def _time_pair(c, heads, side, rng, repeats):
    tokens, d = side * side, c // heads
    x = rng.standard_normal((tokens, c)).astype(np.float32)
    wq, wk, wv, wo = (rng.standard_normal((c, c)).astype(np.float32) * 0.05 for _ in range(4))

    def heads_of(t):
        return t.reshape(tokens, heads, d).transpose(1, 0, 2)

    def xca():
        q, k, v = heads_of(x @ wq)[None], heads_of(x @ wk)[None], heads_of(x @ wv)[None]
        out, _ = B.transposed_attention(q, k, v)
        return out[0].transpose(1, 0, 2).reshape(tokens, c) @ wo

    def mhsa():
        out = spatial_attention(heads_of(x @ wq), heads_of(x @ wk), heads_of(x @ wv))
        return out.transpose(1, 0, 2).reshape(tokens, c) @ wo

    def best(fn, n):
        fn()
        times = []
        for _ in range(n):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    # channel attention is cheap, so it gets extra repeats to steady the small-N timing
    return best(xca, max(repeats, 5)), best(mhsa, repeats)


def attention_scaling_probe(
    channels: int,
    heads: int,
    resolutions,
    timing: bool = False,
    repeats: int = 3,
    seed: int = 0,
) -> list[ProbeRow]:
    """Analytic (and optionally timed) cost of channel vs spatial attention.

    ``resolutions`` are square feature-map sides; the token count is the
    side squared.
    """
    resolutions = list(resolutions)
    if len(resolutions) < 2:
        raise ValueError("need at least two resolutions")
    if channels % heads:
        raise ValueError(f"{channels} channels not divisible by {heads} heads")
    rng = np.random.default_rng(seed)
    rows = []
    for side in resolutions:
        n = side * side
        t_x = t_m = None
        if timing:
            t_x, t_m = _time_pair(channels, heads, side, rng, repeats)
        rows.append(ProbeRow(
            side, n, xca_core_madds(channels, heads, n), mhsa_core_madds(channels, heads, n),
            mhsa_quadratic_madds(channels, heads, n), t_x, t_m,
        ))
    return rows


# Loose wall-clock sanity bands for a 4x token increase at 64->128 sides.
XCA_TIME_RATIO_MAX = 6.0
MHSA_TIME_RATIO_MIN = 10.0


def timing_ratios(rows: list[ProbeRow]) -> tuple[float, float]:
    """Last-over-first measured time ratios ``(xca, mhsa)`` of a timed probe."""
    first, last = rows[0], rows[-1]
    if first.xca_seconds is None or last.xca_seconds is None:
        raise ValueError("probe was run without timing")
    return last.xca_seconds / first.xca_seconds, last.mhsa_seconds / first.mhsa_seconds


def timing_within_bands(rows: list[ProbeRow]) -> bool:
    xca, mhsa = timing_ratios(rows)
    return xca < XCA_TIME_RATIO_MAX and mhsa > MHSA_TIME_RATIO_MIN


def format_probe(rows: list[ProbeRow], channels: int, heads: int) -> str:
    base = rows[0]
    lines = [
        f"# convention={CONVENTION} channels={channels} heads={heads}",
        "side,tokens,xca_madds,mhsa_madds,mhsa_quadratic_madds,xca_ratio,mhsa_quadratic_ratio,"
        "xca_seconds,mhsa_seconds",
    ]
    for r in rows:
        ts = [f"{t:.6f}" if t is not None else "" for t in (r.xca_seconds, r.mhsa_seconds)]
        lines.append(
            f"{r.resolution},{r.tokens},{r.xca_madds},{r.mhsa_madds},{r.mhsa_quadratic_madds},"
            f"{r.xca_madds / base.xca_madds:.2f},"
            f"{r.mhsa_quadratic_madds / base.mhsa_quadratic_madds:.2f},{ts[0]},{ts[1]}"
        )
    return "\n".join(lines) + "\n"
