"""Joint training: weighted binary cross-entropy per motion category plus an
optional attention-supervision cross-entropy, full backpropagation through
the cached forward pass, Adam updates, and the minibatch loop.

The total loss over a batch of N samples is

    (1/N) * ( c1 * sum_n sum_i w_{n,i} * CE(g_{n,i}, y_{n,i})
              + (c2 / (T*H*W)) * sum_n sum_{t,h,w} CE(grid, attention) )

where the attention term is included only for samples that carry a
supervision grid. Probabilities are clamped to [1e-7, 1 - 1e-7] inside CE so
the loss stays finite; logit gradients use the exact softmax identity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor_ops as T
from .tensor_ops import ConsistencyError, ShapeError

CLAMP = 1e-7

OPT_MAGIC = b"RMOS"
OPT_VERSION = 1

# Philox stream namespaces: model.build uses (seed, layer_index); the batch
# scheduler must never collide with it.
_BATCH_STREAM = 1 << 32


class NumericError(ArithmeticError):
    """Loss or gradients became non-finite."""


@dataclass
class LossWeights:
    class_weights: np.ndarray  # (num_heads, 2) as (w_pos, w_neg)
    c1: float = 1.0
    c2: float = 0.5

    def __post_init__(self):
        cw = np.asarray(self.class_weights, np.float64)
        if cw.ndim != 2 or cw.shape[1] != 2:
            raise ShapeError(f"class_weights must be (num_heads, 2), got {cw.shape}")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("c1 and c2 must be >= 0")
        if np.any(cw <= 0):
            raise ValueError("class weights must be > 0")
        self.class_weights = cw


def uniform_weights(num_heads: int, c1: float = 1.0, c2: float = 0.5) -> LossWeights:
    return LossWeights(class_weights=np.ones((num_heads, 2)), c1=c1, c2=c2)


@dataclass
class BatchLabels:
    motion: np.ndarray                       # (N, num_heads) in {0, 1}
    sta_grids: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        m = np.asarray(self.motion)
        if m.ndim != 2:
            raise ShapeError(f"motion labels must be (N, num_heads), got {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("motion labels must be 0/1")
        self.motion = m.astype(np.int64)
        if not self.sta_grids:
            self.sta_grids = [None] * len(m)
        if len(self.sta_grids) != len(m):
            raise ShapeError("sta_grids length must equal the batch size")


@dataclass
class LossResult:
    total: float
    binary: float
    sta: float
    head_logit_grads: np.ndarray             # (N, num_heads, 2)
    sta_logit_grads: list[np.ndarray | None]


def _ce(p_true: np.ndarray) -> np.ndarray:
    return -np.log(np.clip(p_true.astype(np.float64), CLAMP, 1.0 - CLAMP))


def compute_loss(
    outputs: list[M.ForwardOutputs],
    labels: BatchLabels,
    weights: LossWeights,
    supervise_sta: bool = True,
) -> LossResult:
    n = len(outputs)
    if n < 1:
        raise ValueError("batch must contain at least one sample")
    if labels.motion.shape[0] != n:
        raise ShapeError("label batch size does not match outputs")
    num_heads = outputs[0].head_probs.shape[0]
    if labels.motion.shape[1] != num_heads:
        raise ShapeError("label head count does not match outputs")

    binary = 0.0
    sta = 0.0
    head_grads = np.zeros((n, num_heads, 2), np.float32)
    sta_grads: list[np.ndarray | None] = [None] * n
    for i, out in enumerate(outputs):
        g = labels.motion[i]
        probs = out.head_probs
        w = np.where(g == 1, weights.class_weights[:, 0], weights.class_weights[:, 1])
        binary += float(np.sum(w * _ce(probs[np.arange(num_heads), g])))
        onehot = np.zeros((num_heads, 2), np.float32)
        onehot[np.arange(num_heads), g] = 1.0
        head_grads[i] = (weights.c1 / n) * w[:, None].astype(np.float32) * (
            probs - onehot
        )

        grid = labels.sta_grids[i]
        if not supervise_sta or grid is None or out.attention_logits is None:
            continue
        q = out.cache.sta_probs
        if grid.shape != q.shape[:3]:
            raise ShapeError(
                f"supervision grid {grid.shape} does not match attention {q.shape[:3]}"
            )
        gm = grid.astype(np.float32)
        cells = grid.size
        attend = q[:, :, :, 1]
        sta += float(
            np.sum(gm * _ce(attend) + (1.0 - gm) * _ce(1.0 - attend)) / cells
        )
        target = np.stack([1.0 - gm, gm], axis=3)
        sta_grads[i] = (weights.c2 / (n * cells)) * (q - target)

    binary /= n
    sta /= n
    total = weights.c1 * binary + weights.c2 * sta
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss (binary={binary}, sta={sta})")
    return LossResult(
        total=total,
        binary=binary,
        sta=sta,
        head_logit_grads=head_grads,
        sta_logit_grads=sta_grads,
    )


def backward(
    params: M.ModelParams,
    cache: M.ModelCache,
    head_logit_grads: np.ndarray,
    sta_logit_grads: np.ndarray | None = None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Chain-rule composition of the kernel backward ops for one sample.

    head_logit_grads is (num_heads, 2); sta_logit_grads, when given, is the
    supervision-loss gradient at the attention logits. Returns per-kernel
    (grad_weights, grad_bias) for every kernel in the model.
    """
    cfg = params.config
    if cache.fingerprint != params.fingerprint:
        raise ConsistencyError("activation cache does not belong to these parameters")
    head_logit_grads = np.asarray(head_logit_grads, np.float32)
    if head_logit_grads.shape != (cfg.num_heads, 2):
        raise ShapeError(f"head gradient shape {head_logit_grads.shape}")
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    g_gap = np.zeros_like(cache.gap_out)
    for j, name in enumerate(M.HEAD_ORDER):
        kern = params.kernels[f"head_{name}"]
        gx, gw, gb = T.conv3d_backward(
            cache.gap_out, kern, head_logit_grads[j].reshape(1, 1, 1, 2)
        )
        grads[f"head_{name}"] = (gw, gb)
        g_gap += gx
    g = T.global_avg_pool_spatial_backward(g_gap, cache.gap_in.shape)

    for lc, idx in zip(reversed(cache.tail), range(9, 5, -1)):
        g = T.max_pool3d_backward(lc.argmax, g, lc.act.shape)
        g = T.relu_backward(lc.act, g)
        gx, gw, gb = T.conv3d_backward(lc.conv_in, params.kernels[f"conv{idx}"], g)
        grads[f"conv{idx}"] = (gw, gb)
        g = gx

    if cfg.use_sta_layer:
        if cfg.multiply_attention:
            mask = cache.sta_probs[:, :, :, 1:2]
            g_feat, g_mask = T.broadcast_mul_backward(cache.features, mask, g)
            g_probs = np.concatenate([np.zeros_like(g_mask), g_mask], axis=3)
            g_sta = T.channel_softmax_backward(cache.sta_probs, g_probs)
        else:
            g_feat = g
            g_sta = np.zeros_like(cache.sta_probs)
        if sta_logit_grads is not None:
            g_sta = g_sta + np.asarray(sta_logit_grads, np.float32)
        gx, gw, gb = T.conv3d_backward(cache.features, params.kernels["sta"], g_sta)
        grads["sta"] = (gw, gb)
        g = g_feat + gx

    for lc, idx in zip(reversed(cache.trunk), range(5, 0, -1)):
        g = T.max_pool3d_backward(lc.argmax, g, lc.act.shape)
        g = T.relu_backward(lc.act, g)
        # the first layer's input gradient has no consumer
        gx, gw, gb = T.conv3d_backward(
            lc.conv_in, params.kernels[f"conv{idx}"], g, need_input_grad=idx > 1
        )
        grads[f"conv{idx}"] = (gw, gb)
        g = gx

    return grads


def accumulate_grads(total, part):
    if total is None:
        return {k: (gw.copy(), gb.copy()) for k, (gw, gb) in part.items()}
    for k, (gw, gb) in part.items():
        tw, tb = total[k]
        tw += gw
        tb += gb
    return total


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    epsilon: float
    step: int
    m: dict[str, tuple[np.ndarray, np.ndarray]]
    v: dict[str, tuple[np.ndarray, np.ndarray]]

    @classmethod
    def init(cls, params: M.ModelParams, lr=0.001, beta1=0.9, beta2=0.999,
             epsilon=1e-8) -> "AdamState":
        zeros = lambda: {
            name: (np.zeros_like(k.weights), np.zeros_like(k.bias))
            for name, k in params.kernels.items()
        }
        return cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon, step=0,
                   m=zeros(), v=zeros())


def adam_step(state: AdamState, params: M.ModelParams, grads) -> None:
    """One bias-corrected Adam update, in place on params and state."""
    if set(grads) != set(params.kernels):
        raise ShapeError("gradient set does not mirror the parameters")
    state.step += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    bc1 = np.float32(1.0 - state.beta1 ** state.step)
    bc2 = np.float32(1.0 - state.beta2 ** state.step)
    lr = np.float32(state.lr)
    eps = np.float32(state.epsilon)
    for name, kern in params.kernels.items():
        for arr, g, m, v in zip(
            (kern.weights, kern.bias), grads[name], state.m[name], state.v[name]
        ):
            if g.shape != arr.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != {arr.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ----------------------------------------------------------- class weights

def estimate_class_weights(motion: np.ndarray) -> np.ndarray:
    """Balanced per-head (w_pos, w_neg); the pair always averages to 1."""
    m = np.asarray(motion)
    n = m.shape[0]
    out = np.zeros((m.shape[1], 2), np.float64)
    for i in range(m.shape[1]):
        pos = int(m[:, i].sum())
        if pos == 0 or pos == n:
            raise ValueError(
                f"head {i} has a single class in the dataset; "
                "pass explicit class weights instead"
            )
        out[i] = (2.0 * (n - pos) / n, 2.0 * pos / n)
    return out


# ------------------------------------------------------------ training loop

@dataclass
class TrainingSet:
    inputs: list[np.ndarray]
    motion: np.ndarray                        # (N, num_heads)
    sta_grids: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.sta_grids:
            self.sta_grids = [None] * len(self.inputs)
        if not (len(self.inputs) == len(self.motion) == len(self.sta_grids)):
            raise ShapeError("inputs, motion and sta_grids must align")

    def __len__(self):
        return len(self.inputs)


@dataclass
class TrainHyper:
    lr: float = 0.001
    batch_size: int = 40
    max_iters: int = 5000
    seed: int = 0
    c1: float = 1.0
    c2: float = 0.5
    checkpoint_every: int = 0


@dataclass
class TrainResult:
    params: M.ModelParams
    adam: AdamState
    trace: list[tuple[int, float, float, float]]
    skipped_grids: int = 0


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    """Deterministic batch for one iteration, independent of loop history."""
    key = np.array([seed, _BATCH_STREAM + iteration], np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.permutation(n)[: min(batch_size, n)]


def train_loop(
    config: M.ArchConfig,
    dataset: TrainingSet,
    hyper: TrainHyper,
    params: M.ModelParams | None = None,
    adam: AdamState | None = None,
    start_iter: int = 0,
    class_weights: np.ndarray | None = None,
    checkpoint_dir=None,
    progress=None,
) -> TrainResult:
    """Seeded minibatch training; resumable from (params, adam, start_iter)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if params is None:
        params = M.build(config, hyper.seed)
    if adam is None:
        adam = AdamState.init(params, lr=hyper.lr)
    if class_weights is None:
        class_weights = estimate_class_weights(dataset.motion)
    weights = LossWeights(class_weights=class_weights, c1=hyper.c1, c2=hyper.c2)

    skipped = 0
    if config.supervise_sta:
        skipped = sum(1 for g in dataset.sta_grids if g is None)

    trace = []
    for it in range(start_iter, hyper.max_iters):
        idx = batch_indices(hyper.seed, it, len(dataset), hyper.batch_size)
        outputs = [M.forward(params, dataset.inputs[i]) for i in idx]
        labels = BatchLabels(
            motion=dataset.motion[idx],
            sta_grids=[dataset.sta_grids[i] for i in idx],
        )
        try:
            loss = compute_loss(outputs, labels, weights, config.supervise_sta)
        except NumericError as e:
            raise NumericError(f"iteration {it}: {e}") from e
        total_grads = None
        for j, out in enumerate(outputs):
            part = backward(
                params, out.cache, loss.head_logit_grads[j], loss.sta_logit_grads[j]
            )
            total_grads = accumulate_grads(total_grads, part)
        adam_step(adam, params, total_grads)
        trace.append((it, loss.total, loss.binary, loss.sta))
        if progress is not None:
            progress(it, loss)
        if checkpoint_dir is not None and hyper.checkpoint_every > 0:
            if (it + 1) % hyper.checkpoint_every == 0:
                save_checkpoint(checkpoint_dir, it + 1, params, adam)
    return TrainResult(params=params, adam=adam, trace=trace, skipped_grids=skipped)


def write_loss_trace(path, trace) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,total_loss,binary_loss,sta_loss\n")
        for it, total, binary, sta in trace:
            fh.write(f"{it},{total:.8g},{binary:.8g},{sta:.8g}\n")


# -------------------------------------------------------------- checkpoints

def save_optimizer(state: AdamState, params: M.ModelParams, iteration: int, path):
    with open(path, "wb") as fh:
        fh.write(OPT_MAGIC)
        fh.write(struct.pack("<IIQ", OPT_VERSION, iteration, state.step))
        fh.write(struct.pack("<dddd", state.lr, state.beta1, state.beta2, state.epsilon))
        for name, _ in M.kernel_shapes(params.config):
            for moment in (state.m, state.v):
                mw, mb = moment[name]
                fh.write(np.ascontiguousarray(mw, "<f4").tobytes())
                fh.write(np.ascontiguousarray(mb, "<f4").tobytes())


def load_optimizer(path, params: M.ModelParams) -> tuple[AdamState, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != OPT_MAGIC:
        raise M.ModelFormatError(f"{path}: not an optimizer state file")
    version, iteration, step = struct.unpack_from("<IIQ", blob, 4)
    if version != OPT_VERSION:
        raise M.ModelFormatError(f"{path}: unsupported optimizer version {version}")
    lr, b1, b2, eps = struct.unpack_from("<dddd", blob, 20)
    off = 52
    m: dict = {}
    v: dict = {}
    for name, shp in M.kernel_shapes(params.config):
        nw, co = int(np.prod(shp)), shp[-1]
        pair = []
        for _ in range(2):
            need = (nw + co) * 4
            if off + need > len(blob):
                raise M.ModelFormatError(f"{path}: truncated at {name}")
            w = np.frombuffer(blob, "<f4", count=nw, offset=off).reshape(shp).copy()
            b = np.frombuffer(blob, "<f4", count=co, offset=off + nw * 4).copy()
            pair.append((w, b))
            off += need
        m[name], v[name] = pair
    if off != len(blob):
        raise M.ModelFormatError(f"{path}: trailing bytes")
    state = AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps, step=step, m=m, v=v)
    return state, iteration


def save_checkpoint(directory, iteration: int, params, adam) -> None:
    import os

    os.makedirs(directory, exist_ok=True)
    M.save(params, os.path.join(directory, f"ckpt_{iteration:06d}.rmnt"))
    save_optimizer(
        adam, params, iteration, os.path.join(directory, f"ckpt_{iteration:06d}.opt")
    )
