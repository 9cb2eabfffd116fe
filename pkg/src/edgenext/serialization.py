"""Weight files, JSON model configs, PPM ingestion and eval-time preprocessing.

Weight file layout (all integers little-endian)::

    b"EDGW" | version:u32 | count:u32
    count x ( name_len:u32 | name:utf-8 | dtype:u8 (0=f32, 1=f64) | rank:u8
              | extents:u64 * rank | raw little-endian elements )
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import jsonschema
import numpy as np

from .model import ConfigError, ModelConfig, StageConfig, preset, weight_shapes

MAGIC = b"EDGW"
VERSION = 1
HEADER_SIZE = 12
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
RESIZE_RATIO = 292 / 256


class WeightFileError(ValueError):
    """Base class for malformed or mismatched weight files."""


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class NameSetMismatchError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


class PPMError(ValueError):
    pass


# --- weights -----------------------------------------------------------------


def encode_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(weights))]
    for name, arr in weights.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} too large")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def save_weights(weights: Mapping[str, np.ndarray], path) -> None:
    data = encode_weights(weights)
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise OSError(f"cannot write weights to {path}: {e.strerror or e}") from e


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"file truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_weights(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a weight file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported weight file version {version}, expected {VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise WeightFileError(f"{name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q")
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(size * dtype.itemsize), dtype=dtype).reshape(shape)
        if name in out:
            raise WeightFileError(f"duplicate tensor name {name!r}")
        out[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise WeightFileError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return out


def load_weights(path, config: ModelConfig | None = None) -> dict[str, np.ndarray]:
    """Read a weight file; with ``config``, check names and shapes against it."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read weights from {path}: {e.strerror or e}") from e
    weights = decode_weights(buf)
    if config is not None:
        expected = weight_shapes(config)
        if set(expected) != set(weights):
            missing = sorted(set(expected) - set(weights))
            extra = sorted(set(weights) - set(expected))
            raise NameSetMismatchError(
                f"{path}: weight names do not match config {config.name or ''}: "
                f"{len(missing)} missing (e.g. {missing[:3]}), {len(extra)} unexpected (e.g. {extra[:3]})"
            )
        for name, shape in expected.items():
            if weights[name].shape != shape:
                raise ShapeMismatchError(f"{path}: {name} has shape {weights[name].shape}, expected {shape}")
        weights = {name: weights[name] for name in expected}
    return weights


def load_tensor(path) -> np.ndarray:
    """Single unnamed tensor stored in the weight container."""
    weights = load_weights(path)
    if len(weights) != 1:
        raise WeightFileError(f"{path}: expected exactly one tensor, found {len(weights)}")
    return next(iter(weights.values()))


def save_tensor(arr: np.ndarray, path) -> None:
    save_weights({"": arr}, path)


# --- config files ------------------------------------------------------------

_STAGE_SCHEMA = {
    "type": "object",
    "properties": {
        "conv_blocks": {"type": "integer", "minimum": 0},
        "sdta_blocks": {"type": "integer", "minimum": 0},
        "sdta_position": {"enum": ["start", "end"]},
        "width": {"type": "integer", "minimum": 1},
        "kernel": {"type": "integer", "minimum": 1},
        "splits": {"type": "integer", "minimum": 1},
    },
    "required": ["conv_blocks", "sdta_blocks", "width", "kernel", "splits"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "variant": {"enum": ["XXS", "XS", "S", "B"]},
        "stages": {"type": "array", "items": _STAGE_SCHEMA, "minItems": 4, "maxItems": 4},
        "heads": {"type": "integer", "minimum": 1},
        "expansion_ratio": {"type": "integer", "minimum": 1},
        "activation": {"enum": ["gelu", "hard_swish"]},
        "norm": {"enum": ["layer", "batch"]},
        "pe_stage": {"anyOf": [{"type": "null"}, {"type": "integer", "minimum": 1, "maximum": 4}]},
        "num_classes": {"type": "integer", "minimum": 1},
        "resolution": {"type": "integer", "minimum": 32, "multipleOf": 32},
        "temperature": {"type": "boolean"},
    },
    "anyOf": [{"required": ["variant"]}, {"required": ["stages"]}],
    "additionalProperties": False,
}

_GLOBALS = ("heads", "expansion_ratio", "activation", "norm", "pe_stage", "num_classes", "resolution", "temperature")


class ConfigFileError(ConfigError):
    pass


def config_from_dict(doc: dict) -> ModelConfig:
    """Validate a config document and build the config.

    A ``variant`` supplies the stage layout (any ``stages`` entry is ignored);
    global keys present in the document override the preset's values.
    """
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(doc), key=lambda e: [str(p) for p in e.path])
    if errors:
        msgs = []
        for e in errors:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{path}: {e.message}")
        raise ConfigFileError("invalid config: " + "; ".join(msgs))
    if "variant" in doc:
        cfg = preset(doc["variant"])
    else:
        cfg = ModelConfig(tuple(StageConfig(**s) for s in doc["stages"]))
    cfg = cfg.replace(**{k: doc[k] for k in _GLOBALS if k in doc})
    try:
        return cfg.validate()
    except ConfigError as e:
        raise ConfigFileError(str(e)) from None


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "stages": [
            {
                "conv_blocks": s.conv_blocks,
                "sdta_blocks": s.sdta_blocks,
                "sdta_position": s.sdta_position,
                "width": s.width,
                "kernel": s.kernel,
                "splits": s.splits,
            }
            for s in config.stages
        ],
        **{k: getattr(config, k) for k in _GLOBALS},
    }


def load_config(path) -> ModelConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"{path}: not valid JSON ({e})") from None
    cfg = config_from_dict(doc)
    return cfg if cfg.name else cfg.replace(name=Path(path).stem)


def save_config(config: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")


# --- images ------------------------------------------------------------------


def _ppm_tokens(buf: bytes, count: int):
    """First ``count`` header tokens and the offset just past the last one."""
    tokens, i = [], 0
    while len(tokens) < count:
        if i >= len(buf):
            raise PPMError("truncated PPM header")
        ch = buf[i : i + 1]
        if ch == b"#":
            nl = buf.find(b"\n", i)
            i = len(buf) if nl < 0 else nl + 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j : j + 1].isspace() and buf[j : j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    return tokens, i


def parse_ppm(buf: bytes) -> np.ndarray:
    """Binary (P6) PPM bytes to a ``(1, H, W, 3)`` float32 array in [0, 1]."""
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise PPMError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PPMError(f"malformed PPM header {tokens[1:]!r}") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise PPMError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PPMError("missing whitespace after PPM header")
    raster = buf[pos + 1 : pos + 1 + w * h * 3]
    if len(raster) != w * h * 3:
        raise PPMError(f"PPM raster truncated: {len(raster)} of {w * h * 3} bytes")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(1, h, w, 3)
    return img.astype(np.float32) / np.float32(maxval)


def load_image_ppm(path) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes())


def encode_ppm(img: np.ndarray) -> bytes:
    """``(H, W, 3)`` uint8 array to P6 bytes."""
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``(n, H, W, C)`` with half-pixel centers, edge-clamped."""
    n, h, w, c = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"degenerate output size {out_h}x{out_w}")

    def coords(size_in, size_out):
        src = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
        src = np.clip(src, 0, size_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, size_in - 1)
        return lo, hi, (src - lo).astype(x.dtype)

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fy, fx = fy[None, :, None, None], fx[None, None, :, None]
    top = x[:, y0][:, :, x0] * (1 - fx) + x[:, y0][:, :, x1] * fx
    bot = x[:, y1][:, :, x0] * (1 - fx) + x[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    n, h, w, c = x.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return x[:, top : top + size, left : left + size]


def preprocess(
    x: np.ndarray,
    target: int = 256,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
) -> np.ndarray:
    """Resize to ``round(target * 292/256)`` square, center-crop ``target``, normalize."""
    if x.ndim != 4 or x.shape[0] != 1 or x.shape[3] != 3:
        raise ValueError(f"expected a (1, H, W, 3) image, got {x.shape}")
    if target < 1 or min(x.shape[1:3]) < 1:
        raise ValueError("degenerate image or target size")
    size = round(target * RESIZE_RATIO)
    y = center_crop(resize_bilinear(x.astype(np.float32), size, size), target)
    return (y - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)


def read_image(path) -> np.ndarray:
    """PPM, or a raw tensor file holding one ``(1, H, W, 3)`` tensor."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MAGIC:
        return load_tensor(path).astype(np.float32)
    return load_image_ppm(path)
