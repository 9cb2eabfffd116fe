"""Finite-difference gradient-check suites at op, block and model scope."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from . import blocks as B
from .model import build_model, is_buffer, model_forward, tiny
from .tensor import ConvSpec

TOLERANCE = 1e-4
SCOPES = ("op", "block", "model")


@dataclass(frozen=True)
class Case:
    name: str
    op: str | None
    fn: Callable
    theta: dict[str, np.ndarray]


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    null_params: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _with_projection(fn, seed, salt):
    """Scalar loss ``sum(fn(t) * R)`` for a fixed random ``R`` drawn on first use."""
    state = {}

    def loss(t):
        out = fn(t)
        if "r" not in state:
            state["r"] = np.random.default_rng([seed, salt]).standard_normal(ag.value(out).shape)
        return ag.sum_(ag.mul(out, state["r"]))

    return loss


GELU_STATIONARY = -0.7517915241
HARD_SWISH_STATIONARY = -1.5


def _away_from(x, points, gap=1e-2):
    """Push samples off kinks and stationary points, where relative error is ill-conditioned."""
    for k in points:
        near = np.abs(x - k) < gap
        x = np.where(near, k + np.copysign(gap, x - k + 1e-30), x)
    return x


def op_cases(seed: int = 0) -> list[Case]:
    """One case per registered op; ``op_coverage`` asserts nothing is missing."""
    g = np.random.default_rng(seed)

    def rnd(*shape, scale=1.0):
        return g.standard_normal(shape) * scale

    cases = []

    def case(name, op, fn, **theta):
        cases.append(Case(name, op, _with_projection(fn, seed, len(cases)), theta))

    def scalar_case(name, op, fn, **theta):
        cases.append(Case(name, op, fn, theta))

    x4 = (2, 3, 4, 5)
    case("add", "add", lambda t: ag.add(t["x"], t["y"]), x=rnd(*x4), y=rnd(5))
    case("add_residual", "add_residual", lambda t: ag.add_residual(t["x"], t["y"]), x=rnd(*x4), y=rnd(*x4))
    case("mul", "mul", lambda t: ag.mul(t["x"], t["y"]), x=rnd(*x4), y=rnd(1, 1, 4, 1))
    case("scale", "scale", lambda t: ag.scale(t["x"], -1.7), x=rnd(*x4))
    scalar_case("sum", "sum", lambda t: ag.sum_(ag.mul(t["x"], t["x"])), x=rnd(3, 4))
    scalar_case("mean", "mean", lambda t: ag.mean(ag.mul(t["x"], t["x"])), x=rnd(3, 4))
    case("reshape", "reshape", lambda t: ag.reshape(t["x"], (6, 20)), x=rnd(*x4))
    case("transpose", "transpose", lambda t: ag.transpose(t["x"], (0, 2, 1, 3)), x=rnd(*x4))
    case("slice_channels", "slice_channels", lambda t: ag.slice_channels(t["x"], 1, 4), x=rnd(*x4))
    case(
        "concat_channels", "concat_channels",
        lambda t: ag.concat_channels([t["a"], t["b"], t["a"]]), a=rnd(1, 3, 3, 2), b=rnd(1, 3, 3, 3),
    )
    dense = ConvSpec(3, 4, 6, stride=2, padding=1)
    case(
        "conv2d[dense,stride2]", "conv2d", lambda t: ag.conv2d(t["x"], t["w"], t["b"], dense),
        x=rnd(2, 7, 7, 4), w=rnd(*dense.weight_shape, scale=0.3), b=rnd(6),
    )
    dw = ConvSpec.same(5, 4)
    case(
        "conv2d[depthwise]", "conv2d", lambda t: ag.conv2d(t["x"], t["w"], t["b"], dw),
        x=rnd(1, 6, 6, 4), w=rnd(*dw.weight_shape, scale=0.3), b=rnd(4),
    )
    grouped = ConvSpec(3, 4, 6, padding=(1, 0, 2, 1), groups=2)
    case(
        "conv2d[grouped,asym-pad]", "conv2d", lambda t: ag.conv2d(t["x"], t["w"], t["b"], grouped),
        x=rnd(1, 5, 5, 4), w=rnd(*grouped.weight_shape, scale=0.3), b=rnd(6),
    )
    case(
        "linear", "linear", lambda t: ag.linear(t["x"], t["w"], t["b"]),
        x=rnd(2, 3, 5), w=rnd(5, 4), b=rnd(4),
    )
    case(
        "layer_norm", "layer_norm", lambda t: ag.layer_norm(t["x"], t["g"], t["b"]),
        x=rnd(*x4), g=1 + rnd(5, scale=0.3), b=rnd(5),
    )
    case(
        "batch_norm[train]", "batch_norm", lambda t: ag.batch_norm(t["x"], t["g"], t["b"]),
        x=rnd(*x4), g=1 + rnd(5, scale=0.3), b=rnd(5),
    )
    mu, var = rnd(5), 0.5 + g.random(5)
    case(
        "batch_norm[eval]", "batch_norm", lambda t: ag.batch_norm(t["x"], t["g"], t["b"], mu, var),
        x=rnd(*x4), g=1 + rnd(5, scale=0.3), b=rnd(5),
    )
    case("gelu", "gelu", lambda t: ag.gelu(t["x"]), x=_away_from(np.clip(rnd(*x4, scale=2.0), -4, 4), [GELU_STATIONARY]))
    case(
        "hard_swish", "hard_swish", lambda t: ag.hard_swish(t["x"]),
        x=_away_from(rnd(*x4, scale=3.0), [-3.0, 3.0, HARD_SWISH_STATIONARY]),
    )
    case("softmax", "softmax", lambda t: ag.softmax(t["x"], axis=-1), x=rnd(*x4))
    case("softmax[axis1]", "softmax", lambda t: ag.softmax(t["x"], axis=1), x=rnd(*x4))
    case("l2_normalize", "l2_normalize", lambda t: ag.l2_normalize(t["x"], axis=2), x=rnd(*x4))
    case("matmul", "matmul", lambda t: ag.matmul(t["a"], t["b"]), a=rnd(2, 3, 4), b=rnd(2, 4, 5))
    case("global_avg_pool", "global_avg_pool", lambda t: ag.global_avg_pool(t["x"]), x=rnd(*x4))
    labels = np.array([0, 3, 2, 3])
    scalar_case("cross_entropy", "cross_entropy", lambda t: ag.cross_entropy(t["z"], labels), z=rnd(4, 5, scale=2.0))
    return cases


def op_coverage(cases: list[Case]) -> set[str]:
    """Registered ops with no case (empty when coverage is complete)."""
    return set(ag.OPS) - {c.op for c in cases if c.op}


def _block_params(shapes: dict[str, tuple], rng, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        if name.endswith("gamma"):
            out[prefix + name] = 1 + 0.2 * rng.standard_normal(shape)
        elif name.endswith("running_var"):
            out[prefix + name] = 0.5 + rng.random(shape)
        elif name.endswith("temperature"):
            out[prefix + name] = 0.5 + rng.random(shape)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 4
            out[prefix + name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    return out


def block_cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng([seed, 7])
    c, side = 16, 8
    x = rng.standard_normal((1, side, side, c))
    cases = []

    def add(name, fn, params):
        cases.append(Case(name, None, _with_projection(fn, seed, 100 + len(cases)), {"x": x.copy(), **params}))

    p = _block_params(B.conv_encoder_shapes(c, 7), rng)
    add("conv_encoder", lambda t: B.conv_encoder_forward(t["x"], t), p)

    bn = B.BlockOptions(norm="batch", act="hard_swish", stats={})
    p = _block_params(B.conv_encoder_shapes(c, 3, norm="batch"), rng)
    p = {k: v for k, v in p.items() if not is_buffer(k)}
    add("conv_encoder[bn,hard_swish,train]", lambda t: B.conv_encoder_forward(t["x"], t, opts=bn), p)

    p = _block_params(B.conv_encoder_shapes(c, 5, norm="batch"), rng)
    buffers = {k: v for k, v in p.items() if is_buffer(k)}
    p = {k: v for k, v in p.items() if not is_buffer(k)}
    bn_eval = B.BlockOptions(norm="batch", act="hard_swish")
    add("conv_encoder[bn,hard_swish,eval]", lambda t: B.conv_encoder_forward(t["x"], {**t, **buffers}, opts=bn_eval), p)

    for s in (2, 3):
        p = {f"k{i}": 0.3 * rng.standard_normal((3, 3, 1, w)) for i, w in enumerate(B.split_widths(c, s)[1:])}
        p.update({f"b{i}": 0.1 * rng.standard_normal(w) for i, w in enumerate(B.split_widths(c, s)[1:])})
        add(
            f"sdta_split[s={s}]",
            lambda t, s=s: B.sdta_split_forward(t["x"], [(t[f"k{i}"], t[f"b{i}"]) for i in range(s - 1)], s),
            p,
        )

    xca_shapes = {k: v for k, v in B.sdta_encoder_shapes(c, 1, temperature=True).items() if not k.startswith(("norm.", "pwconv"))}
    p = _block_params(xca_shapes, rng)
    plain = {k: v for k, v in p.items() if k != "temperature"}
    add("xca", lambda t: B.xca_forward(t["x"], t, heads=4), plain)
    add("xca[temperature]", lambda t: B.xca_forward(t["x"], t, heads=2, opts=B.BlockOptions(temperature=True)), {**p, "temperature": p["temperature"][:2]})

    p = _block_params(B.sdta_encoder_shapes(c, 2, pe=True), rng)
    add("sdta_encoder[pe,s=2]", lambda t: B.sdta_encoder_forward(t["x"], t, heads=4, splits=2), p)
    p = _block_params(B.sdta_encoder_shapes(c, 3), rng)
    add("sdta_encoder[s=3]", lambda t: B.sdta_encoder_forward(t["x"], t, heads=4, splits=3), p)

    p = _block_params(B.stem_shapes(c), rng, "stem.")
    img = rng.standard_normal((1, 16, 16, 3))
    cases.append(Case("stem", None, _with_projection(lambda t: B.stem_forward(t["x"], t), seed, 90), {"x": img, **p}))
    p = _block_params(B.downsample_shapes(c, 2 * c), rng, "ds.")
    cases.append(Case("downsample", None, _with_projection(lambda t: B.downsample_forward(t["x"], t, "ds."), seed, 91), {"x": x.copy(), **p}))
    return cases


def model_cases(seed: int = 0) -> list[Case]:
    """Tiny full model, ``8x32x32x3`` input, cross-entropy loss."""
    rng = np.random.default_rng([seed, 11])
    cases = []
    for label, cfg in (("tiny", tiny(resolution=32)), ("tiny[bn,hard_swish]", tiny(resolution=32, norm="batch", activation="hard_swish"))):
        w = build_model(cfg, seed, dtype=np.float64)
        # perturb away from the init so norms and biases carry signal
        theta = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in w.items() if not is_buffer(k)}
        buffers = {k: v for k, v in w.items() if is_buffer(k)}
        x = rng.standard_normal((8, 32, 32, 3))
        y = np.arange(8) % cfg.num_classes
        stats = {} if cfg.norm == "batch" else None

        def loss(t, cfg=cfg, buffers=buffers, x=x, y=y, stats=stats):
            return ag.cross_entropy(model_forward(cfg, {**t, **buffers}, x, stats=stats), y)

        cases.append(Case(label, None, loss, theta))
    return cases


def null_gradient_mask(case: Case, atol: float = 1e-12) -> dict[str, np.ndarray]:
    """Coordinates whose taped gradient is not identically zero.

    Some gradients vanish structurally: a bias feeding a training-mode batch
    norm is cancelled by the mean subtraction, pass-through split channels
    never see a positional bias, and token-axis L2 normalization over a
    single token is locally constant.  Central differences there are pure
    rounding noise, so relative error is meaningless and those coordinates
    are not sampled.
    """
    tape = ag.Tape()
    loss = case.fn({k: tape.param(k, np.asarray(v, dtype=np.float64)) for k, v in case.theta.items()})
    return {k: np.abs(g) > atol for k, g in tape.backward(loss).items()}


def check_case(case: Case, seed: int = 0, n_coords: int = 100, eps: float = 1e-5) -> CheckResult:
    mask = null_gradient_mask(case)
    null = tuple(k for k, m in mask.items() if not m.all())
    return CheckResult(case.name, ag.grad_check(case.fn, case.theta, eps, n_coords, seed, mask), null)


def run_suite(scope: str, seed: int = 0, n_coords: int = 100, eps: float = 1e-5) -> list[CheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {', '.join(SCOPES)}")
    cases = {"op": op_cases, "block": block_cases, "model": model_cases}[scope](seed)
    if scope == "op":
        missing = op_coverage(cases)
        if missing:
            raise AssertionError(f"ops without a gradient check: {sorted(missing)}")
    return [check_case(c, seed, n_coords, eps) for c in cases]


def iter_report(scope: str, results: list[CheckResult]) -> Iterator[str]:
    for r in results:
        line = f"{scope:<6}{r.name:<40}{r.error:.3e}  {'PASS' if r.passed else 'FAIL'}"
        if r.null_params:
            line += f"  zero-gradient coords skipped in: {', '.join(r.null_params)}"
        yield line
