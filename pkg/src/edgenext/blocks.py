"""Building blocks: patchify stem, downsampler, convolution encoder, SDTA encoder.

Blocks are functions of ``(x, params, prefix)`` where ``params`` maps dotted
names to arrays (or autograd variables) and ``prefix`` selects the block's
entries, e.g. ``"stage2.block1."``.  Passing ``prefix=""`` lets a block run on
a bare dict of its own local names.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .tensor import ConvSpec, DimensionError

PE_DIM = 16
PE_TEMPERATURE = 10000.0
SPLIT_KERNEL = 3


@dataclass(frozen=True)
class BlockOptions:
    """Normalization/activation choice shared by every block of a model.

    When ``stats`` is a dict, batch-norm layers normalize with the current
    batch's moments and write them to ``stats[name] = (mean, var)`` so the
    caller can update running statistics.  Otherwise running statistics
    stored in the parameters are used.
    """

    norm: str = "layer"
    act: str = "gelu"
    ln_eps: float = 1e-6
    bn_eps: float = 1e-5
    temperature: bool = False
    stats: dict | None = None


DEFAULT = BlockOptions()


def norm_forward(x, p: Mapping, name: str, opts: BlockOptions = DEFAULT):
    gamma, beta = p[name + ".gamma"], p[name + ".beta"]
    if opts.norm == "layer":
        return ag.layer_norm(x, gamma, beta, opts.ln_eps)
    if opts.norm != "batch":
        raise ValueError(f"unknown norm kind {opts.norm!r}")
    if opts.stats is None:
        return ag.batch_norm(
            x, gamma, beta, ag.value(p[name + ".running_mean"]),
            ag.value(p[name + ".running_var"]), opts.bn_eps,
        )
    xv = ag.value(x)
    axes = tuple(range(xv.ndim - 1))
    opts.stats[name] = (xv.mean(axis=axes), xv.var(axis=axes))
    return ag.batch_norm(x, gamma, beta, eps=opts.bn_eps)


def _dims(x):
    return ag.value(x).shape


def stem_forward(x, p: Mapping, prefix: str = "stem.", opts: BlockOptions = DEFAULT):
    """4x4 stride-4 patchify convolution followed by a norm."""
    n, h, w, c = _dims(x)
    if h % 4 or w % 4:
        raise DimensionError(f"stem needs extents divisible by 4, got {h}x{w}")
    wt = p[prefix + "conv.weight"]
    y = ag.conv2d(x, wt, p[prefix + "conv.bias"], ConvSpec(4, c, wt.shape[3], stride=4))
    return norm_forward(y, p, prefix + "norm", opts)


def downsample_forward(x, p: Mapping, prefix: str, opts: BlockOptions = DEFAULT):
    """Norm, then a 2x2 stride-2 convolution to the next stage width."""
    n, h, w, c = _dims(x)
    if h % 2 or w % 2:
        raise DimensionError(f"downsampling needs even extents, got {h}x{w}")
    y = norm_forward(x, p, prefix + "norm", opts)
    wt = p[prefix + "conv.weight"]
    return ag.conv2d(y, wt, p[prefix + "conv.bias"], ConvSpec(2, c, wt.shape[3], stride=2))


def _mlp(x, p, prefix, opts):
    y = ag.linear(x, p[prefix + "pwconv1.weight"], p[prefix + "pwconv1.bias"])
    y = ag.activation(opts.act, y)
    return ag.linear(y, p[prefix + "pwconv2.weight"], p[prefix + "pwconv2.bias"])


def conv_encoder_forward(x, p: Mapping, prefix: str = "", opts: BlockOptions = DEFAULT):
    """Depthwise kxk conv, norm, pointwise expand, activation, pointwise project, skip."""
    c = _dims(x)[3]
    wt = p[prefix + "dwconv.weight"]
    if wt.shape[2:] != (1, c):
        raise DimensionError(f"depthwise weight {wt.shape} does not fit {c} channels")
    y = ag.conv2d(x, wt, p[prefix + "dwconv.bias"], ConvSpec.same(wt.shape[0], c))
    y = norm_forward(y, p, prefix + "norm", opts)
    return ag.add_residual(x, _mlp(y, p, prefix, opts))


def split_widths(channels: int, s: int) -> list[int]:
    """Channel counts of the ``s`` subsets.

    Subsets 2..s all get ``ceil(C/s)`` channels so each can be added to its
    predecessor's output; the pass-through first subset takes the remainder.
    """
    if s < 1:
        raise ValueError("split count must be >= 1")
    if s == 1:
        return [channels]
    w = math.ceil(channels / s)
    first = channels - (s - 1) * w
    if first < 1:
        raise DimensionError(f"cannot split {channels} channels into {s} subsets")
    return [first] + [w] * (s - 1)


def sdta_split_forward(x, kernels: Sequence[tuple], s: int):
    """Hierarchical multi-scale depthwise mixing.

    ``kernels[i - 2]`` is the ``(weight, bias)`` pair of the 3x3 depthwise
    conv applied to subset ``i`` (1-based, ``i >= 2``).  Subset 1 passes
    through, subset 2 is convolved alone, and every later subset is added to
    the previous output before its convolution.
    """
    c = _dims(x)[3]
    widths = split_widths(c, s)
    if len(kernels) != s - 1:
        raise ValueError(f"{s} subsets need {s - 1} kernels, got {len(kernels)}")
    if s == 1:
        return x
    bounds = np.cumsum([0] + widths)
    outs = [ag.slice_channels(x, 0, int(bounds[1]))]
    prev = None
    for i in range(1, s):
        xi = ag.slice_channels(x, int(bounds[i]), int(bounds[i + 1]))
        if prev is not None:
            xi = ag.add(xi, prev)
        w, b = kernels[i - 1]
        prev = ag.conv2d(xi, w, b, ConvSpec.same(SPLIT_KERNEL, widths[i]))
        outs.append(prev)
    return ag.concat_channels(outs)


def transposed_attention(q, k, v, temperature=None):
    """Channel-to-channel attention on ``(n, heads, N, d)`` projections.

    Q and K are L2-normalized along the token axis, scores are the ``d x d``
    matrix ``Q^T K`` with a row softmax, and the output is ``V @ scores``.
    Returns ``(out, scores)``.
    """
    q = ag.l2_normalize(q, axis=2)
    k = ag.l2_normalize(k, axis=2)
    logits = ag.matmul(ag.transpose(q, (0, 1, 3, 2)), k)
    if temperature is not None:
        logits = ag.mul(logits, ag.reshape(temperature, (-1, 1, 1)))
    attn = ag.softmax(logits, axis=-1)
    return ag.matmul(v, attn), attn


def xca_forward(x, p: Mapping, prefix: str = "", heads: int = 4, opts: BlockOptions = DEFAULT):
    n, h, w, c = _dims(x)
    if c % heads:
        raise DimensionError(f"{c} channels not divisible by {heads} heads")
    d, tokens = c // heads, h * w
    y = ag.reshape(norm_forward(x, p, prefix + "norm_xca", opts), (n, tokens, c))

    def project(name):
        t = ag.linear(y, p[prefix + name + ".weight"], p[prefix + name + ".bias"])
        return ag.transpose(ag.reshape(t, (n, tokens, heads, d)), (0, 2, 1, 3))

    temp = p[prefix + "temperature"] if opts.temperature else None
    out, _ = transposed_attention(project("q"), project("k"), project("v"), temp)
    out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (n, tokens, c))
    out = ag.linear(out, p[prefix + "proj.weight"], p[prefix + "proj.bias"])
    return ag.add_residual(x, ag.reshape(out, (n, h, w, c)))


def sinusoidal_features(h: int, w: int, dim: int = PE_DIM, temperature: float = PE_TEMPERATURE):
    """Fixed ``(h, w, 2*dim)`` sine/cosine position features.

    Row and column coordinates are scaled to ``(0, 2*pi]``; each axis gets
    ``dim`` channels alternating sine and cosine over a geometric frequency
    ladder.  Row features come first.
    """
    if dim % 2:
        raise ValueError("feature dim per axis must be even")
    freqs = temperature ** (2 * (np.arange(dim) // 2) / dim)

    def axis(size):
        pos = (np.arange(1, size + 1) / size * 2 * np.pi)[:, None] / freqs
        out = np.empty_like(pos)
        out[:, 0::2] = np.sin(pos[:, 0::2])
        out[:, 1::2] = np.cos(pos[:, 1::2])
        return out

    rows, cols = axis(h), axis(w)
    return np.concatenate(
        [np.broadcast_to(rows[:, None, :], (h, w, dim)), np.broadcast_to(cols[None, :, :], (h, w, dim))],
        axis=-1,
    )


def positional_encoding(h: int, w: int, p: Mapping, prefix: str = "pe."):
    """Sinusoidal features projected to the block width, shape ``(1, h, w, C)``."""
    wt = p[prefix + "weight"]
    feats = sinusoidal_features(h, w, wt.shape[0] // 2).astype(ag.value(wt).dtype)
    return ag.linear(feats[None], wt, p[prefix + "bias"])


def sdta_encoder_forward(
    x,
    p: Mapping,
    prefix: str = "",
    heads: int = 4,
    splits: int = 1,
    opts: BlockOptions = DEFAULT,
):
    """Optional PE, split depthwise mixing, transposed attention, then pointwise MLP.

    The positional encoding is applied when ``prefix + "pe.weight"`` exists.
    """
    n, h, w, c = _dims(x)
    if prefix + "pe.weight" in p:
        x = ag.add(x, positional_encoding(h, w, p, prefix + "pe."))
    kernels = [(p[f"{prefix}split{i}.weight"], p[f"{prefix}split{i}.bias"]) for i in range(2, splits + 1)]
    x = sdta_split_forward(x, kernels, splits)
    x = xca_forward(x, p, prefix, heads, opts)
    y = norm_forward(x, p, prefix + "norm", opts)
    return ag.add_residual(x, _mlp(y, p, prefix, opts))


def _norm_shapes(name, c, norm):
    out = {f"{name}.gamma": (c,), f"{name}.beta": (c,)}
    if norm == "batch":
        out[f"{name}.running_mean"] = (c,)
        out[f"{name}.running_var"] = (c,)
    return out


def stem_shapes(c_out: int, norm: str = "layer") -> dict[str, tuple]:
    return {"conv.weight": (4, 4, 3, c_out), "conv.bias": (c_out,), **_norm_shapes("norm", c_out, norm)}


def downsample_shapes(c_in: int, c_out: int, norm: str = "layer") -> dict[str, tuple]:
    return {**_norm_shapes("norm", c_in, norm), "conv.weight": (2, 2, c_in, c_out), "conv.bias": (c_out,)}


def _mlp_shapes(c, ratio):
    return {
        "pwconv1.weight": (c, ratio * c),
        "pwconv1.bias": (ratio * c,),
        "pwconv2.weight": (ratio * c, c),
        "pwconv2.bias": (c,),
    }


def conv_encoder_shapes(c: int, kernel: int, ratio: int = 4, norm: str = "layer") -> dict[str, tuple]:
    return {
        "dwconv.weight": (kernel, kernel, 1, c),
        "dwconv.bias": (c,),
        **_norm_shapes("norm", c, norm),
        **_mlp_shapes(c, ratio),
    }


def sdta_encoder_shapes(
    c: int,
    splits: int,
    heads: int = 4,
    ratio: int = 4,
    norm: str = "layer",
    pe: bool = False,
    temperature: bool = False,
) -> dict[str, tuple]:
    """Ordered parameter shapes of one SDTA encoder, keyed by local name."""
    out: dict[str, tuple] = {}
    if pe:
        out["pe.weight"] = (2 * PE_DIM, c)
        out["pe.bias"] = (c,)
    for i, wi in enumerate(split_widths(c, splits)[1:], start=2):
        out[f"split{i}.weight"] = (SPLIT_KERNEL, SPLIT_KERNEL, 1, wi)
        out[f"split{i}.bias"] = (wi,)
    out.update(_norm_shapes("norm_xca", c, norm))
    for name in ("q", "k", "v"):
        out[f"{name}.weight"] = (c, c)
        out[f"{name}.bias"] = (c,)
    if temperature:
        out["temperature"] = (heads,)
    out["proj.weight"] = (c, c)
    out["proj.bias"] = (c,)
    out.update(_norm_shapes("norm", c, norm))
    out.update(_mlp_shapes(c, ratio))
    return out
