"""Rank-4 tensor kernels: 3D convolution, decoupled max pooling, ReLU,
channel softmax, spatial global average pooling, broadcast multiply.

Tensors are plain numpy float32 arrays laid out (t, h, w, c), C-contiguous,
so the channel vector at a fixed (t, h, w) is contiguous. Every kernel is a
pure function; each forward op has a matching explicit backward op.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg.blas import sgemm


class ShapeError(ValueError):
    """Operands have incompatible or degenerate shapes."""


class ConsistencyError(RuntimeError):
    """Internal invariant violated (e.g. pooling indices out of range)."""


Stride3 = tuple[int, int, int]

# Accumulator tile kept small enough to stay L2-resident during the
# shift-GEMM tap loop; measured sweet spot on commodity CPUs.
_CHUNK_BYTES = 256 * 1024
# Below this output volume the per-call BLAS overhead of the shift-GEMM
# path outweighs its cache advantage; use the single-GEMM im2col path.
_SHIFT_GEMM_MIN_VOLUME = 1 << 15


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Validate and return x as a (t, h, w, c) float32 array."""
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (t, h, w, c), got shape {a.shape}")
    if min(a.shape) < 1:
        raise ShapeError(f"{name} has a zero-sized dimension: {a.shape}")
    return a


@dataclass(frozen=True)
class ConvKernel:
    """Convolution weights (kt, kh, kw, c_in, c_out) plus per-filter bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if w.ndim != 5:
            raise ShapeError(f"kernel weights must be rank-5, got {w.shape}")
        kt, kh, kw, _, co = w.shape
        if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {(kt, kh, kw)}")
        if b.shape != (co,):
            raise ShapeError(f"bias shape {b.shape} does not match c_out={co}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def c_in(self) -> int:
        return self.weights.shape[3]

    @property
    def c_out(self) -> int:
        return self.weights.shape[4]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class PoolSpec:
    """Max-pooling window and stride, each (t, h, w)."""

    window: Stride3
    stride: Stride3

    def __post_init__(self):
        if min(self.window) < 1 or min(self.stride) < 1:
            raise ShapeError(
                f"pool window/stride must be >= 1, got {self.window}/{self.stride}"
            )


SPATIAL_POOL = PoolSpec(window=(1, 2, 2), stride=(1, 2, 2))
TEMPORAL_POOL = PoolSpec(window=(2, 1, 1), stride=(2, 1, 1))
JOINT_POOL = PoolSpec(window=(2, 2, 2), stride=(2, 2, 2))


def _gemm_acc(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    # c += a @ b without temporaries: BLAS sees the C-contiguous operands as
    # Fortran-order transposes, computing c.T = b.T @ a.T + c.T in place.
    sgemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=True)


def _pad_same(x: np.ndarray, kt: int, kh: int, kw: int) -> np.ndarray:
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    t, h, w, c = x.shape
    xp = np.zeros((t + 2 * pt, h + 2 * ph, w + 2 * pw, c), np.float32)
    xp[pt : pt + t, ph : ph + h, pw : pw + w] = x
    return xp


def _out_dims(dims, stride):
    return tuple(-(-d // s) for d, s in zip(dims, stride))


def _conv_args(x, kernel, stride):
    x = as_tensor(x, "conv input")
    if not isinstance(kernel, ConvKernel):
        raise TypeError("kernel must be a ConvKernel")
    if x.shape[3] != kernel.c_in:
        raise ShapeError(
            f"input has {x.shape[3]} channels but kernel expects {kernel.c_in}"
        )
    st, sh, sw = stride
    if min(stride) < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    return x, (st, sh, sw)


def _im2col(xp, out_dims, k_dims, stride):
    # Materialize SAME-padded patches as a (positions, taps*c_in) matrix.
    T, H, W = out_dims
    st, sh, sw = stride
    v = sliding_window_view(xp, k_dims, axis=(0, 1, 2))[::st, ::sh, ::sw]
    cols = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 6, 3))
    return cols.reshape(T * H * W, -1)


def conv3d(x, kernel: ConvKernel, stride: Stride3 = (1, 1, 1)) -> np.ndarray:
    """SAME-padded 3D correlation; output (ceil(t/st), ceil(h/sh), ceil(w/sw), c_out)."""
    x, stride = _conv_args(x, kernel, stride)
    w = kernel.weights
    kt, kh, kw, ci, co = w.shape
    t, h, wd, _ = x.shape
    T, H, W = _out_dims((t, h, wd), stride)

    if stride == (1, 1, 1) and t * h * wd * co >= _SHIFT_GEMM_MIN_VOLUME:
        return _conv3d_shift_gemm(x, kernel)

    xp = _pad_same(x, kt, kh, kw)
    cols = _im2col(xp, (T, H, W), (kt, kh, kw), stride)
    out = cols @ w.reshape(-1, co)
    out += kernel.bias
    return out.reshape(T, H, W, co)


def _conv3d_shift_gemm(x, kernel: ConvKernel) -> np.ndarray:
    # Stride-1 fast path. In the flattened padded volume, shifting the start
    # of the (rows, c_in) matrix by one tap offset aligns every window origin
    # with that tap, so the convolution is 27 accumulating GEMMs on views --
    # no im2col copy. Rows whose origin lies in the padding ring compute
    # garbage and are sliced away at the end. The accumulator is processed in
    # L2-sized row chunks so each output row is re-read from cache, not RAM.
    w = kernel.weights
    kt, kh, kw, ci, co = w.shape
    t, h, wd, _ = x.shape
    xp = _pad_same(x, kt, kh, kw)
    tp, hp, wp = xp.shape[:3]
    flat_in = xp.reshape(-1, ci)
    n_rows = t * hp * wp
    taps = [
        ((dt * hp + dh) * wp + dw, w[dt, dh, dw])
        for dt, dh, dw in itertools.product(range(kt), range(kh), range(kw))
    ]
    out_full = np.zeros((n_rows, co), np.float32)
    chunk = max(1, _CHUNK_BYTES // (co * 4))
    for r0 in range(0, n_rows, chunk):
        r1 = min(n_rows, r0 + chunk)
        for off, w_tap in taps:
            n = min(r1, flat_in.shape[0] - off) - r0
            if n > 0:
                _gemm_acc(flat_in[off + r0 : off + r0 + n], w_tap, out_full[r0 : r0 + n])
    out = np.ascontiguousarray(out_full.reshape(t, hp, wp, co)[:, :h, :wd])
    out += kernel.bias
    return out


def conv3d_backward(
    x, kernel: ConvKernel, grad_out, stride: Stride3 = (1, 1, 1),
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv3d(x, kernel, stride)).

    Returns (grad_input, grad_weights, grad_bias); grad_input is None when
    need_input_grad is False (first-layer convolutions discard it).
    """
    x, stride = _conv_args(x, kernel, stride)
    grad_out = as_tensor(grad_out, "grad_out")
    w = kernel.weights
    kt, kh, kw, ci, co = w.shape
    t, h, wd, _ = x.shape
    T, H, W = _out_dims((t, h, wd), stride)
    if grad_out.shape != (T, H, W, co):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output {(T, H, W, co)}"
        )

    if stride == (1, 1, 1) and t * h * wd * co >= _SHIFT_GEMM_MIN_VOLUME:
        return _conv3d_shift_gemm_backward(x, kernel, grad_out, need_input_grad)

    pt, ph, pw = kt // 2, kh // 2, kw // 2
    st, sh, sw = stride
    xp = _pad_same(x, kt, kh, kw)
    cols = _im2col(xp, (T, H, W), (kt, kh, kw), stride)
    g2 = grad_out.reshape(T * H * W, co)
    gw = (cols.T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    if not need_input_grad:
        return None, gw, gb
    gcols = (g2 @ w.reshape(-1, co).T).reshape(T, H, W, kt, kh, kw, ci)
    gxp = np.zeros_like(xp)
    for i, (dt, dh, dw) in enumerate(
        itertools.product(range(kt), range(kh), range(kw))
    ):
        gxp[
            dt : dt + st * T : st, dh : dh + sh * H : sh, dw : dw + sw * W : sw
        ] += gcols[:, :, :, dt, dh, dw, :]
    gx = np.ascontiguousarray(gxp[pt : pt + t, ph : ph + h, pw : pw + wd])
    return gx, gw, gb


def _conv3d_shift_gemm_backward(x, kernel, grad_out, need_input_grad=True):
    w = kernel.weights
    kt, kh, kw, ci, co = w.shape
    t, h, wd, _ = x.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xp = _pad_same(x, kt, kh, kw)
    tp, hp, wp = xp.shape[:3]
    flat_in = xp.reshape(-1, ci)
    n_rows = t * hp * wp
    # Zero rows in the padding ring so they contribute nothing to gw/gx.
    g_full = np.zeros((n_rows, co), np.float32)
    g_full.reshape(t, hp, wp, co)[:, :h, :wd] = grad_out

    n_taps = kt * kh * kw
    offsets = np.empty(n_taps, np.int64)
    w_t = np.ascontiguousarray(w.reshape(n_taps, ci, co).transpose(0, 2, 1))
    for i, (dt, dh, dw) in enumerate(
        itertools.product(range(kt), range(kh), range(kw))
    ):
        offsets[i] = (dt * hp + dh) * wp + dw
    gw = np.zeros((n_taps, ci, co), np.float32)
    gin_flat = np.zeros_like(flat_in) if need_input_grad else None
    chunk = max(1, _CHUNK_BYTES // (max(ci, co) * 4))
    for r0 in range(0, n_rows, chunk):
        r1 = min(n_rows, r0 + chunk)
        g_chunk = g_full[r0:r1]
        for i in range(n_taps):
            off = int(offsets[i])
            n = min(r1, flat_in.shape[0] - off) - r0
            if n <= 0:
                continue
            a = flat_in[off + r0 : off + r0 + n]
            g = g_chunk[:n]
            # gw[i] += a.T @ g (same F-order transpose trick as _gemm_acc)
            sgemm(1.0, g.T, a.T, trans_b=True, beta=1.0, c=gw[i].T, overwrite_c=True)
            if need_input_grad:
                _gemm_acc(g, w_t[i], gin_flat[off + r0 : off + r0 + n])
    gb = grad_out.sum(axis=(0, 1, 2))
    gx = None
    if need_input_grad:
        gx = np.ascontiguousarray(
            gin_flat.reshape(tp, hp, wp, ci)[pt : pt + t, ph : ph + h, pw : pw + wd]
        )
    return gx, gw.reshape(w.shape), gb


@functools.lru_cache(maxsize=64)
def _pool_index_tables(in_shape, window, stride):
    # argmax = base[out position] + tap_offset[winning tap], both in flat
    # input coordinates; shapes recur every forward pass, so cache them
    t, h, wd, c = in_shape
    wt, wh, ww = window
    st, sh, sw = stride
    T, H, W = _out_dims((t, h, wd), (st, sh, sw))
    it = np.arange(T, dtype=np.int64)[:, None, None, None] * st
    ih = np.arange(H, dtype=np.int64)[None, :, None, None] * sh
    iw = np.arange(W, dtype=np.int64)[None, None, :, None] * sw
    ic = np.arange(c, dtype=np.int64)[None, None, None, :]
    base = ((it * h + ih) * wd + iw) * c + ic
    offsets = np.array(
        [
            (dt * h + dh) * wd * c + dw * c
            for dt, dh, dw in itertools.product(range(wt), range(wh), range(ww))
        ],
        np.int64,
    )
    base.setflags(write=False)
    offsets.setflags(write=False)
    return base, offsets


def max_pool3d(x, spec: PoolSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ceil-mode max pooling with border-clipped windows.

    Returns (output, argmax) where argmax holds the flat input index of each
    window's winner; ties go to the lowest flat index.
    """
    x = as_tensor(x, "pool input")
    wt, wh, ww = spec.window
    st, sh, sw = spec.stride
    t, h, wd, c = x.shape
    T, H, W = _out_dims((t, h, wd), (st, sh, sw))
    # Pad with -inf so every window has full extent; padded taps never win
    # because each window starts on a real element. When stride exceeds the
    # window the tap grid may also end short of the input, so clip too.
    tp, hp, wp = (T - 1) * st + wt, (H - 1) * sh + wh, (W - 1) * sw + ww
    if (tp, hp, wp) == (t, h, wd):
        xp = x
    else:
        xp = np.full((tp, hp, wp, c), -np.inf, np.float32)
        xp[:t, :h, :wd] = x[:tp, :hp, :wp]
    best = None
    best_tap = None
    for i, (dt, dh, dw) in enumerate(
        itertools.product(range(wt), range(wh), range(ww))
    ):
        v = xp[dt : dt + (T - 1) * st + 1 : st,
               dh : dh + (H - 1) * sh + 1 : sh,
               dw : dw + (W - 1) * sw + 1 : sw]
        if i == 0:
            best = v.copy()  # must not alias the input: later taps write into it
            best_tap = np.zeros(best.shape, np.int64)
        else:
            better = v > best  # strict: earlier (lower-index) taps win ties
            np.copyto(best, v, where=better)
            best_tap[better] = i
    base, offsets = _pool_index_tables((t, h, wd, c), spec.window, spec.stride)
    argmax = offsets[best_tap]
    argmax += base
    return best, argmax


def max_pool3d_backward(argmax, grad_out, input_shape) -> np.ndarray:
    """Scatter grad_out to the recorded winner positions, summing collisions."""
    grad_out = as_tensor(grad_out, "grad_out")
    idx = np.asarray(argmax)
    if idx.shape != grad_out.shape:
        raise ShapeError(
            f"argmax shape {idx.shape} does not match grad_out {grad_out.shape}"
        )
    size = int(np.prod(input_shape))
    flat = idx.ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= size):
        raise ConsistencyError("pooling argmax index out of range for input shape")
    g = np.bincount(flat, weights=grad_out.ravel(), minlength=size)
    return g.astype(np.float32).reshape(input_shape)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x, "relu input"), np.float32(0.0))


def relu_backward(x, grad_out) -> np.ndarray:
    # Gradient at exactly 0 is defined as 0.
    x = as_tensor(x, "relu input")
    grad_out = as_tensor(grad_out, "grad_out")
    if x.shape != grad_out.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {grad_out.shape}")
    return np.where(x > 0, grad_out, np.float32(0.0))


def channel_softmax(x) -> np.ndarray:
    """Softmax over the channel axis at every (t, h, w), max-stabilized."""
    x = as_tensor(x, "softmax input")
    z = x - x.max(axis=3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=3, keepdims=True)


def channel_softmax_backward(probs, grad_out) -> np.ndarray:
    """Jacobian-transpose product of channel_softmax given its output probs."""
    probs = as_tensor(probs, "probs")
    grad_out = as_tensor(grad_out, "grad_out")
    if probs.shape != grad_out.shape:
        raise ShapeError(f"shape mismatch {probs.shape} vs {grad_out.shape}")
    inner = (grad_out * probs).sum(axis=3, keepdims=True)
    return probs * (grad_out - inner)


def global_avg_pool_spatial(x) -> np.ndarray:
    """Mean over (h, w); output (t, 1, 1, c)."""
    return as_tensor(x, "gap input").mean(axis=(1, 2), keepdims=True)


def global_avg_pool_spatial_backward(grad_out, input_shape) -> np.ndarray:
    grad_out = as_tensor(grad_out, "grad_out")
    t, h, w, c = input_shape
    if grad_out.shape != (t, 1, 1, c):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match GAP output {(t, 1, 1, c)}"
        )
    gx = np.empty(input_shape, np.float32)
    gx[:] = grad_out / np.float32(h * w)
    return gx


def _check_mask(features, mask):
    features = as_tensor(features, "features")
    mask = as_tensor(mask, "mask")
    if mask.shape != (features.shape[0], features.shape[1], features.shape[2], 1):
        raise ShapeError(
            f"mask shape {mask.shape} must be {features.shape[:3] + (1,)}"
        )
    return features, mask


def broadcast_mul(features, mask) -> np.ndarray:
    """Scale every feature channel by the (t, h, w, 1) mask."""
    features, mask = _check_mask(features, mask)
    return features * mask


def broadcast_mul_backward(features, mask, grad_out):
    """Returns (grad_features, grad_mask)."""
    features, mask = _check_mask(features, mask)
    grad_out = as_tensor(grad_out, "grad_out")
    if grad_out.shape != features.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {features.shape}")
    grad_features = grad_out * mask
    grad_mask = (grad_out * features).sum(axis=3, keepdims=True)
    return grad_features, grad_mask
