"""Clip classifier model: variant configuration, parameter initialization,
forward pass with cached activations, and binary serialization.

Two layer stacks are supported. The deep stack applies five 3x3x3 conv
layers with spatial-only max pooling, an optional two-channel attention
layer softmaxed into a (t, h, w, 1) mask that can scale the mid-network
features, then four more conv layers with temporal-only pooling. The basic
stack applies five conv layers with one spatial pool followed by four joint
spatio-temporal pools. Both end in spatial global average pooling and three
independent two-filter 1x1x1 heads, one softmaxed (no-motion, motion) pair
per motion category, ordered (pv, people, vehicle).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_ops as T
from .tensor_ops import ConvKernel, ShapeError

MAGIC = b"RMNT"
FORMAT_VERSION = 1

HEAD_ORDER = ("pv", "people", "vehicle")

# Table-driven ablation variants: flags are (frame_diff, deep, sta, multiply,
# supervise). Suffix -H doubles input resolution, -32 doubles filters.
_VARIANTS = {
    "C3D": (False, False, False, False, False),
    "FD-C3D": (True, False, False, False, False),
    "FD-D": (True, True, False, False, False),
    "FD-D-MT": (True, True, True, False, True),
    "FD-D-STA-NT": (True, True, True, True, False),
    "FD-D-STA-T": (True, True, True, True, True),
}


class ModelFormatError(ValueError):
    """Model file is malformed, truncated, or inconsistent."""


@dataclass(frozen=True)
class ArchConfig:
    use_frame_diff: bool = True
    deep: bool = True
    use_sta_layer: bool = True
    multiply_attention: bool = True
    supervise_sta: bool = True
    filters_per_layer: int = 16
    input_resolution: tuple[int, int] = (90, 160)
    input_frames: int = 15
    num_heads: int = 3

    def __post_init__(self):
        if (self.multiply_attention or self.supervise_sta) and not self.use_sta_layer:
            raise ValueError(
                "multiply_attention/supervise_sta require use_sta_layer"
            )
        if self.use_sta_layer and not self.deep:
            raise ValueError("the attention layer exists only in the deep stack")
        if self.filters_per_layer < 1:
            raise ValueError("filters_per_layer must be >= 1")
        h, w = self.input_resolution
        if h < 1 or w < 1:
            raise ValueError(f"bad input resolution {self.input_resolution}")
        # four temporal halvings must reach t == 1 so each head emits one pair
        if not 1 <= self.input_frames <= 16:
            raise ValueError("input_frames must be in 1..16")
        if self.num_heads != len(HEAD_ORDER):
            raise ValueError(f"num_heads must be {len(HEAD_ORDER)}")
        object.__setattr__(self, "input_resolution", tuple(self.input_resolution))

    @classmethod
    def from_variant(cls, name: str, **overrides) -> "ArchConfig":
        """Build a config from an ablation-variant name, e.g. 'FD-D-STA-T-H-32'."""
        base = name
        filters = 16
        resolution = (90, 160)
        for _ in range(2):
            if base.endswith("-32"):
                base = base[:-3]
                filters = 32
            elif base.endswith("-H"):
                base = base[:-2]
                resolution = (180, 320)
        if base not in _VARIANTS:
            raise ValueError(f"unknown variant {name!r}; bases: {sorted(_VARIANTS)}")
        fd, deep, sta, mult, sup = _VARIANTS[base]
        cfg = cls(
            use_frame_diff=fd,
            deep=deep,
            use_sta_layer=sta,
            multiply_attention=mult,
            supervise_sta=sup,
            filters_per_layer=filters,
            input_resolution=resolution,
        )
        return replace(cfg, **overrides) if overrides else cfg


_BOOL_FIELDS = (
    "use_frame_diff", "deep", "use_sta_layer", "multiply_attention", "supervise_sta"
)
_INT_FIELDS = ("filters_per_layer", "input_frames", "num_heads")


def config_text(config: ArchConfig) -> str:
    """Canonical key=value rendering; the basis of the fingerprint."""
    items = {f: int(getattr(config, f)) for f in _BOOL_FIELDS + _INT_FIELDS}
    items["input_h"], items["input_w"] = config.input_resolution
    return "".join(f"{k}={items[k]}\n" for k in sorted(items))


def fingerprint(config: ArchConfig) -> str:
    return hashlib.sha256(config_text(config).encode()).hexdigest()[:16]


def _config_from_text(text: str) -> ArchConfig:
    kv = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise ModelFormatError(f"bad header line {line!r}")
        k, v = line.split("=", 1)
        kv[k] = v
    try:
        return ArchConfig(
            use_frame_diff=bool(int(kv["use_frame_diff"])),
            deep=bool(int(kv["deep"])),
            use_sta_layer=bool(int(kv["use_sta_layer"])),
            multiply_attention=bool(int(kv["multiply_attention"])),
            supervise_sta=bool(int(kv["supervise_sta"])),
            filters_per_layer=int(kv["filters_per_layer"]),
            input_resolution=(int(kv["input_h"]), int(kv["input_w"])),
            input_frames=int(kv["input_frames"]),
            num_heads=int(kv["num_heads"]),
        ), kv.get("fingerprint")
    except KeyError as e:
        raise ModelFormatError(f"model header missing field {e}") from None


def kernel_shapes(config: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, weight shape) pairs; also the serialization layout."""
    f = config.filters_per_layer
    shapes = [("conv1", (3, 3, 3, 3, f))]
    shapes += [(f"conv{i}", (3, 3, 3, f, f)) for i in range(2, 6)]
    if config.use_sta_layer:
        shapes.append(("sta", (3, 3, 3, f, 2)))
    if config.deep:
        shapes += [(f"conv{i}", (3, 3, 3, f, f)) for i in range(6, 10)]
    shapes += [(f"head_{name}", (1, 1, 1, f, 2)) for name in HEAD_ORDER]
    return shapes


def param_count(config: ArchConfig) -> int:
    """Total learnable parameter count, computed without allocation."""
    total = 0
    for _, shp in kernel_shapes(config):
        total += int(np.prod(shp)) + shp[-1]
    return total


def sta_dims(config: ArchConfig) -> tuple[int, int, int]:
    """(t', gh, gw) of the attention layer output: five spatial halvings."""
    h, w = config.input_resolution
    for _ in range(5):
        h, w = -(-h // 2), -(-w // 2)
    return config.input_frames, h, w


@dataclass
class ModelParams:
    config: ArchConfig
    kernels: dict[str, ConvKernel]
    fingerprint: str = ""

    def __post_init__(self):
        expected = kernel_shapes(self.config)
        if [n for n, _ in expected] != list(self.kernels):
            raise ShapeError("kernel set does not match the configuration")
        for name, shp in expected:
            if self.kernels[name].weights.shape != shp:
                raise ShapeError(
                    f"{name}: weights {self.kernels[name].weights.shape} != {shp}"
                )
        if not self.fingerprint:
            self.fingerprint = fingerprint(self.config)
        elif self.fingerprint != fingerprint(self.config):
            raise ModelFormatError("fingerprint does not match the configuration")

    def head_kernels(self) -> list[ConvKernel]:
        return [self.kernels[f"head_{n}"] for n in HEAD_ORDER]


def build(config: ArchConfig, seed: int) -> ModelParams:
    """Deterministic Glorot-uniform initialization, zero biases.

    Each kernel draws from its own counter-based stream keyed on
    (seed, layer index), so parameters do not depend on build order.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    kernels = {}
    for i, (name, shp) in enumerate(kernel_shapes(config)):
        kt, kh, kw, ci, co = shp
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, i], np.uint64)))
        fan_in = kt * kh * kw * ci
        fan_out = kt * kh * kw * co
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        kernels[name] = ConvKernel(
            weights=rng.uniform(-bound, bound, shp).astype(np.float32),
            bias=np.zeros(co, np.float32),
        )
    return ModelParams(config=config, kernels=kernels)


@dataclass
class LayerCache:
    conv_in: np.ndarray   # input fed to the conv
    act: np.ndarray       # post-ReLU activation (ReLU mask is act > 0)
    argmax: np.ndarray    # pooling winner indices
    out: np.ndarray       # pooled output


@dataclass
class ModelCache:
    x: np.ndarray
    trunk: list[LayerCache] = field(default_factory=list)
    features: np.ndarray | None = None
    sta_probs: np.ndarray | None = None
    attended: np.ndarray | None = None
    tail: list[LayerCache] = field(default_factory=list)
    gap_in: np.ndarray | None = None
    gap_out: np.ndarray | None = None
    fingerprint: str = ""


@dataclass
class ForwardOutputs:
    head_probs: np.ndarray                 # (num_heads, 2) as (no-motion, motion)
    attention_logits: np.ndarray | None    # (t', gh, gw, 2)
    attention_mask: np.ndarray | None      # (t', gh, gw, 1), in (0, 1)
    cache: ModelCache
    fingerprint: str


def _conv_relu_pool(h, kernel, pool_spec, caches):
    z = T.conv3d(h, kernel)
    a = T.relu(z)
    out, argmax = T.max_pool3d(a, pool_spec)
    caches.append(LayerCache(conv_in=h, act=a, argmax=argmax, out=out))
    return out


def forward(params: ModelParams, x) -> ForwardOutputs:
    """Single-clip forward pass; caches every intermediate for backward."""
    cfg = params.config
    x = T.as_tensor(x, "model input")
    expected = (cfg.input_frames,) + cfg.input_resolution + (3,)
    if x.shape != expected:
        raise ShapeError(f"input shape {x.shape} does not match model {expected}")

    cache = ModelCache(x=x, fingerprint=params.fingerprint)
    h = x
    trunk_pools = (
        [T.SPATIAL_POOL] * 5 if cfg.deep else [T.SPATIAL_POOL] + [T.JOINT_POOL] * 4
    )
    for i, spec in enumerate(trunk_pools):
        h = _conv_relu_pool(h, params.kernels[f"conv{i + 1}"], spec, cache.trunk)

    sta_logits = None
    mask = None
    if cfg.use_sta_layer:
        cache.features = h
        sta_logits = T.conv3d(h, params.kernels["sta"])
        probs = T.channel_softmax(sta_logits)
        cache.sta_probs = probs
        mask = np.ascontiguousarray(probs[:, :, :, 1:2])
        if cfg.multiply_attention:
            h = T.broadcast_mul(h, mask)
        cache.attended = h

    if cfg.deep:
        for i in range(6, 10):
            h = _conv_relu_pool(h, params.kernels[f"conv{i}"], T.TEMPORAL_POOL, cache.tail)

    if h.shape[0] != 1:
        raise ShapeError(f"temporal pooling left t={h.shape[0]} != 1 before GAP")
    cache.gap_in = h
    gap = T.global_avg_pool_spatial(h)
    cache.gap_out = gap

    head_probs = np.empty((cfg.num_heads, 2), np.float32)
    for j, k in enumerate(params.head_kernels()):
        logits = T.conv3d(gap, k)
        head_probs[j] = T.channel_softmax(logits).reshape(2)

    return ForwardOutputs(
        head_probs=head_probs,
        attention_logits=sta_logits,
        attention_mask=mask,
        cache=cache,
        fingerprint=params.fingerprint,
    )


# ------------------------------------------------------------- serialization

def save(params: ModelParams, path) -> None:
    header = config_text(params.config) + f"fingerprint={params.fingerprint}\n"
    header_bytes = header.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for name, _ in kernel_shapes(params.config):
            k = params.kernels[name]
            fh.write(np.ascontiguousarray(k.weights, "<f4").tobytes())
            fh.write(np.ascontiguousarray(k.bias, "<f4").tobytes())


def load(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not a model file")
    if len(blob) < 12:
        raise ModelFormatError(f"{path}: truncated header")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    if len(blob) < 12 + header_len:
        raise ModelFormatError(f"{path}: truncated header")
    config, stored_fp = _config_from_text(blob[12 : 12 + header_len].decode())
    if stored_fp != fingerprint(config):
        raise ModelFormatError(f"{path}: fingerprint mismatch")
    off = 12 + header_len
    kernels = {}
    for name, shp in kernel_shapes(config):
        nw = int(np.prod(shp))
        co = shp[-1]
        need = (nw + co) * 4
        if off + need > len(blob):
            raise ModelFormatError(f"{path}: truncated at kernel {name}")
        w = np.frombuffer(blob, "<f4", count=nw, offset=off).reshape(shp)
        b = np.frombuffer(blob, "<f4", count=co, offset=off + nw * 4)
        kernels[name] = ConvKernel(weights=w.copy(), bias=b.copy())
        off += need
    if off != len(blob):
        raise ModelFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return ModelParams(config=config, kernels=kernels, fingerprint=stored_fp)
