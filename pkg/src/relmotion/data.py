"""Clip ingestion and preprocessing (temporal sampling, box-filter spatial
downsampling, frame differencing) plus a deterministic synthetic
surveillance-clip generator used as desk-scale ground truth.

Preprocessing mirrors the capture setup the classifier assumes: clips are
nominally 15 s, sampled down to one frame per second and reduced by an
integer spatial factor before entering the network.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ArchConfig
from .tensor_ops import ShapeError

CLIP_MAGIC = b"RMCL"
CLIP_VERSION = 1

# Sampling rate of the network input, one frame per second of footage.
INPUT_FPS = 1.0


class ClipFormatError(ValueError):
    """Clip container or image sequence is malformed."""


@dataclass
class Clip:
    frames: np.ndarray          # (n, h, w, 3) uint8
    fps: float = 10.0
    source_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[3] != 3 or f.shape[0] < 1:
            raise ShapeError(f"clip frames must be (n, h, w, 3), got {f.shape}")
        if f.dtype != np.uint8:
            raise ShapeError("clip frames must be uint8")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        self.frames = f

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_hw(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class ClipLabels:
    motion: np.ndarray                      # (3,) as (pv, people, vehicle)
    sta_grids: np.ndarray | None = None     # (t', gh, gw) binary

    def __post_init__(self):
        m = np.asarray(self.motion, np.int8)
        if m.shape != (3,) or not np.isin(m, (0, 1)).all():
            raise ValueError(f"motion labels must be three 0/1 flags, got {m}")
        self.motion = m


# ----------------------------------------------------------- preprocessing

def sample_frame_indices(n_frames: int, fps: float, target_fps: float,
                         target_count: int) -> np.ndarray:
    """Indices of target_count frames at target_fps; clamped to the last
    frame, so short clips end in repeats of their final frame."""
    if target_fps <= 0 or target_count < 1:
        raise ValueError("target_fps and target_count must be positive")
    step = fps / target_fps
    idx = np.floor(np.arange(target_count) * step).astype(np.int64)
    return np.minimum(idx, n_frames - 1)


def sample_frames(clip: Clip, target_fps: float, target_count: int) -> Clip:
    idx = sample_frame_indices(clip.n_frames, clip.fps, target_fps, target_count)
    return Clip(frames=clip.frames[idx].copy(), fps=target_fps,
                source_id=clip.source_id)


def downsample(clip: Clip, factor: int) -> Clip:
    """Box-filter mean over factor x factor blocks, rounded to uint8.

    Partial edge blocks average over the pixels they actually cover.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return Clip(frames=clip.frames.copy(), fps=clip.fps,
                    source_id=clip.source_id)
    f = clip.frames.astype(np.float32)
    n, h, w, _ = f.shape
    hb = np.arange(0, h, factor)
    wb = np.arange(0, w, factor)
    sums = np.add.reduceat(np.add.reduceat(f, hb, axis=1), wb, axis=2)
    rows = np.minimum(hb + factor, h) - hb
    cols = np.minimum(wb + factor, w) - wb
    counts = np.outer(rows, cols).astype(np.float32)
    mean = sums / counts[None, :, :, None]
    out = np.floor(mean + 0.5).astype(np.uint8)
    return Clip(frames=out, fps=clip.fps, source_id=clip.source_id)


def frame_difference(clip: Clip, mode: str = "refl") -> np.ndarray:
    """Per-frame difference against a reference frame, scaled to [-1, 1].

    'refl' subtracts each frame's predecessor; 'refg' subtracts the first
    frame. The first output frame is zero either way, preserving the count.
    """
    mode = mode.lower()
    if mode not in ("refl", "refg"):
        raise ValueError(f"mode must be 'refl' or 'refg', got {mode!r}")
    f = clip.frames.astype(np.float32)
    out = np.zeros_like(f)
    ref = f[:-1] if mode == "refl" else f[0]
    out[1:] = (f[1:] - ref) / np.float32(255.0)
    return out


def to_input(clip: Clip, config: ArchConfig) -> np.ndarray:
    """Preprocess a raw clip into the model input tensor."""
    sampled = sample_frames(clip, INPUT_FPS, config.input_frames)
    src_h, src_w = sampled.frame_hw
    dst_h, dst_w = config.input_resolution
    if src_h % dst_h or src_w % dst_w or src_h // dst_h != src_w // dst_w:
        raise ShapeError(
            f"clip resolution {(src_h, src_w)} is not an integer multiple of "
            f"the model input {(dst_h, dst_w)}; re-preprocess the clip"
        )
    small = downsample(sampled, src_h // dst_h)
    if config.use_frame_diff:
        return frame_difference(small, "refl")
    return small.frames.astype(np.float32) / np.float32(255.0)


# ------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class ObjectScript:
    kind: str                    # "person" or "vehicle"
    appear_prob: float
    stationary_prob: float
    height_range: tuple[int, int]
    aspect_range: tuple[float, float]   # person: h/w; vehicle: w/h. Both > 1.
    speed_range: tuple[float, float]    # px per source frame

    def __post_init__(self):
        if self.kind not in ("person", "vehicle"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if min(self.height_range) < 1 or min(self.speed_range) <= 0:
            raise ValueError("sizes and speeds must be positive")
        if min(self.aspect_range) <= 1.0:
            raise ValueError(
                "aspect must exceed 1 (person taller than wide, vehicle wider)"
            )
        if not 0 <= self.appear_prob <= 1 or not 0 <= self.stationary_prob <= 1:
            raise ValueError("probabilities must be in [0, 1]")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_clips: int = 200
    scene_hw: tuple[int, int] = (180, 320)
    fps: float = 10.0
    duration_s: float = 15.0
    person: ObjectScript = ObjectScript(
        kind="person", appear_prob=0.45, stationary_prob=0.2,
        height_range=(56, 84), aspect_range=(2.4, 3.2), speed_range=(1.5, 3.0),
    )
    vehicle: ObjectScript = ObjectScript(
        kind="vehicle", appear_prob=0.45, stationary_prob=0.2,
        height_range=(56, 80), aspect_range=(2.2, 3.0), speed_range=(3.0, 5.5),
    )
    flicker_amplitude: float = 2.0
    speckle_density: float = 0.001
    static_distractors: int = 2

    def __post_init__(self):
        if self.num_clips < 0:
            raise ValueError("num_clips must be >= 0")
        if min(self.scene_hw) < 16:
            raise ValueError("scene too small")

    @property
    def n_frames(self) -> int:
        return max(1, int(round(self.fps * self.duration_s)))


# Minimum center displacement, as a fraction of frame width/height, for an
# object to count as relevant motion. Matches the tracklet gate.
DISPLACEMENT_THRESHOLD = 0.2

VEHICLE_NAMES = ("car", "bus", "truck")


@dataclass
class ObjectTrack:
    class_name: str
    boxes: list[tuple[int, tuple[float, float, float, float]]]


@dataclass
class SynthSample:
    clip: Clip
    labels: ClipLabels
    tracks: list[ObjectTrack] = field(default_factory=list)


def _object_geometry(rng, script: ObjectScript, scene_hw):
    H, W = scene_hw
    h = int(rng.integers(script.height_range[0], script.height_range[1] + 1))
    aspect = rng.uniform(*script.aspect_range)
    w = max(2, int(round(h / aspect if script.kind == "person" else h * aspect)))
    w = min(w, W // 3)
    h = min(h, H - 6)
    return h, w


def _plan_object(rng, script: ObjectScript, scene_hw, n_frames):
    """Returns (class_name, color, per-frame integer boxes) or None."""
    H, W = scene_hw
    if rng.random() >= script.appear_prob:
        return None
    h, w = _object_geometry(rng, script, scene_hw)
    name = "person" if script.kind == "person" else VEHICLE_NAMES[rng.integers(3)]
    # strong contrast against the midtone background so the differenced
    # signal stands well above flicker and speckle
    color = np.array(
        [rng.integers(3, 31) if rng.random() < 0.5 else rng.integers(225, 253)] * 3,
        np.int16,
    ) + rng.integers(-6, 7, 3)
    y0 = int(rng.integers(2, max(3, H - h - 2)))
    if rng.random() < script.stationary_prob:
        x0 = int(rng.integers(2, max(3, W - w - 2)))
        boxes = [(t, (x0, y0, x0 + w, y0 + h)) for t in range(n_frames)]
        return name, color, boxes
    # mover: horizontal travel covering well over the displacement threshold
    speed = rng.uniform(*script.speed_range)
    travel = min(speed * (n_frames - 1), W - w - 4)
    travel = max(travel, min(0.3 * W, W - w - 4))
    direction = 1 if rng.random() < 0.5 else -1
    max_start = W - w - 2 - travel
    x_start = 2 + rng.uniform(0, max(0.0, max_start))
    if direction < 0:
        x_start = W - w - 2 - x_start + 2  # mirror, keep inside
        x_start = min(max(x_start, 2 + travel), W - w - 2)
    boxes = []
    for t in range(n_frames):
        x = x_start + direction * travel * t / (n_frames - 1 if n_frames > 1 else 1)
        x = int(round(min(max(x, 0), W - w)))
        boxes.append((t, (x, y0, x + w, y0 + h)))
    return name, color, boxes


def _track_motion_flag(boxes, scene_hw) -> bool:
    H, W = scene_hw
    cx = np.array([(b[0] + b[2]) / 2.0 for _, b in boxes])
    cy = np.array([(b[1] + b[3]) / 2.0 for _, b in boxes])
    dx = (cx.max() - cx.min()) / W
    dy = (cy.max() - cy.min()) / H
    return max(dx, dy) > DISPLACEMENT_THRESHOLD


def synth_clip(config: SynthConfig, index: int) -> SynthSample:
    """Render one deterministic clip; independent of generation order."""
    rng = np.random.Generator(
        np.random.Philox(key=np.array([config.seed, index], np.uint64))
    )
    H, W = config.scene_hw
    n = config.n_frames

    # static textured background: coarse midtone blocks plus fine grain
    bh, bw = max(1, H // 30), max(1, W // 40)
    coarse = rng.integers(80, 171, (bh, bw))
    bg = np.kron(coarse, np.ones((-(-H // bh), -(-W // bw))))[:H, :W]
    bg = bg + rng.integers(-8, 9, (H, W))
    bg = np.repeat(bg[:, :, None], 3, axis=2) + rng.integers(-6, 7, 3)
    for _ in range(int(rng.integers(0, config.static_distractors + 1))):
        dh = int(rng.integers(10, 40))
        dw = int(rng.integers(10, 60))
        y = int(rng.integers(0, max(1, H - dh)))
        x = int(rng.integers(0, max(1, W - dw)))
        delta = int(rng.integers(-50, 51))
        bg[y : y + dh, x : x + dw] += delta
    bg = np.clip(bg, 0, 255).astype(np.int16)

    objects = []
    for script in (config.person, config.vehicle):
        planned = _plan_object(rng, script, config.scene_hw, n)
        if planned is not None:
            objects.append(planned)

    period = rng.uniform(8.0, 20.0) * config.fps
    phase = rng.uniform(0, 2 * np.pi)
    n_speckle = int(config.speckle_density * H * W)

    frames = np.empty((n, H, W, 3), np.uint8)
    for t in range(n):
        frame = bg.copy()
        for _, color, boxes in objects:
            x0, y0, x1, y1 = (int(v) for v in boxes[t][1])
            frame[y0:y1, x0:x1] = color
        flick = config.flicker_amplitude * np.sin(2 * np.pi * t / period + phase)
        frame += np.int16(round(flick))
        if n_speckle:
            ys = rng.integers(0, H, n_speckle)
            xs = rng.integers(0, W, n_speckle)
            frame[ys, xs] = rng.integers(0, 256, (n_speckle, 1))
        frames[t] = np.clip(frame, 0, 255)

    tracks = [ObjectTrack(class_name=name, boxes=boxes) for name, _, boxes in objects]
    people = any(
        tr.class_name == "person" and _track_motion_flag(tr.boxes, config.scene_hw)
        for tr in tracks
    )
    vehicle = any(
        tr.class_name in VEHICLE_NAMES and _track_motion_flag(tr.boxes, config.scene_hw)
        for tr in tracks
    )
    labels = ClipLabels(motion=np.array([people or vehicle, people, vehicle], np.int8))
    clip = Clip(frames=frames, fps=config.fps, source_id=f"clip{index:05d}")
    return SynthSample(clip=clip, labels=labels, tracks=tracks)


def synth_iter(config: SynthConfig):
    for i in range(config.num_clips):
        yield synth_clip(config, i)


def synth_generate(config: SynthConfig) -> list[SynthSample]:
    """Materialize the whole corpus; use synth_iter for large runs."""
    return list(synth_iter(config))


# --------------------------------------------------------------- clip files

def save_clip(clip: Clip, path) -> None:
    n, h, w = clip.n_frames, *clip.frame_hw
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<IIII", CLIP_VERSION, n, h, w))
        fh.write(np.ascontiguousarray(clip.frames).tobytes())


def load_clip(path, fps: float = 10.0) -> Clip:
    # the container does not carry a frame rate; callers supply it
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CLIP_MAGIC:
        raise ClipFormatError(f"{path}: bad magic, not a clip file")
    if len(blob) < 20:
        raise ClipFormatError(f"{path}: truncated header")
    version, n, h, w = struct.unpack_from("<IIII", blob, 4)
    if version != CLIP_VERSION:
        raise ClipFormatError(f"{path}: unsupported clip version {version}")
    need = n * h * w * 3
    if len(blob) != 20 + need:
        raise ClipFormatError(
            f"{path}: payload is {len(blob) - 20} bytes, expected {need}"
        )
    frames = np.frombuffer(blob, np.uint8, count=need, offset=20).reshape(n, h, w, 3)
    stem = os.path.splitext(os.path.basename(str(path)))[0]
    return Clip(frames=frames.copy(), fps=fps, source_id=stem)


# ------------------------------------------------------------ PPM ingestion

def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ClipFormatError(f"{path}: not a binary PPM (P6) file")
    # header tokens may be separated by whitespace and '#' comments
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ClipFormatError(f"{path}: truncated PPM header")
        tokens.append(blob[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ClipFormatError(f"{path}: unsupported maxval {maxval}")
    need = w * h * 3
    if len(blob) - i < need:
        raise ClipFormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(blob, np.uint8, count=need, offset=i).reshape(h, w, 3)


def _numeric_key(name: str):
    m = re.search(r"(\d+)", os.path.splitext(name)[0])
    return (int(m.group(1)) if m else float("inf"), name)


def load_image_sequence(directory, fps: float = 10.0) -> Clip:
    """Clip from a directory of numerically sorted P6 PPM frames."""
    names = sorted(
        (n for n in os.listdir(directory) if n.lower().endswith(".ppm")),
        key=_numeric_key,
    )
    if not names:
        raise ClipFormatError(f"{directory}: no .ppm files found")
    frames = []
    for name in names:
        img = _read_ppm(os.path.join(directory, name))
        if frames and img.shape != frames[0].shape:
            raise ClipFormatError(
                f"{name}: frame size {img.shape} differs from {frames[0].shape}"
            )
        frames.append(img)
    return Clip(
        frames=np.stack(frames),
        fps=fps,
        source_id=os.path.basename(os.path.normpath(str(directory))),
    )
