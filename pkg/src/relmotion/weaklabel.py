"""Weak supervision from per-frame object detections: greedy IoU
association into tracklets, validity gates that reject parked or
low-confidence objects, video-level motion labels, and rasterization of
detection boxes into the coarse binary attention grids used as attention
supervision. A simple running-average motion gate stands in for full
background subtraction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Clip

Box = tuple[float, float, float, float]  # x_min, y_min, x_max, y_max

GRID_MAGIC = b"RMGT"
GRID_VERSION = 1


class DetectionParseError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    frame_index: int
    box: Box
    class_name: str
    score: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if min(x0, y0) < 0:
            raise ValueError(f"box {self.box} has negative coordinates")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))


@dataclass
class Tracklet:
    track_id: int
    class_name: str
    entries: list[tuple[int, Box]] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    match_ious: list[float] = field(default_factory=list)

    def __post_init__(self):
        frames = [f for f, _ in self.entries]
        if frames and frames != sorted(set(frames)):
            raise ValueError("tracklet frame indices must be strictly increasing")

    @property
    def last_box(self) -> Box:
        return self.entries[-1][1]

    @property
    def last_frame(self) -> int:
        return self.entries[-1][0]


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def associate(
    detections: list[Detection],
    iou_threshold: float = 0.3,
    max_age: int = 3,
) -> list[Tracklet]:
    """Greedy frame-by-frame association of same-class detections.

    Each open tracklet is matched against the current frame's detections of
    its class by descending IoU with the tracklet's last box; pairs below
    iou_threshold start new tracklets instead. Tracklets unmatched for more
    than max_age frames are closed. Ties break on (track id, detection
    index), so the result is deterministic.
    """
    by_frame: dict[int, list[Detection]] = {}
    for det in detections:
        by_frame.setdefault(det.frame_index, []).append(det)

    done: list[Tracklet] = []
    open_tracks: list[Tracklet] = []
    next_id = 0
    for frame in sorted(by_frame):
        still_open = []
        for tr in open_tracks:
            (done if frame - tr.last_frame > max_age else still_open).append(tr)
        open_tracks = still_open

        dets = by_frame[frame]
        pairs = []
        for ti, tr in enumerate(open_tracks):
            for di, det in enumerate(dets):
                if det.class_name != tr.class_name:
                    continue
                v = iou(tr.last_box, det.box)
                if v >= iou_threshold:
                    pairs.append((-v, tr.track_id, di, ti))
        pairs.sort()
        used_tracks: set[int] = set()
        used_dets: set[int] = set()
        for _, _, di, ti in pairs:
            if ti in used_tracks or di in used_dets:
                continue
            used_tracks.add(ti)
            used_dets.add(di)
            tr = open_tracks[ti]
            det = dets[di]
            tr.entries.append((frame, det.box))
            tr.scores.append(det.score)
            # the tracklet adopts the detection box, so the stored overlap
            # between tracklet box and matched detection is exact
            tr.match_ious.append(1.0)
        for di, det in enumerate(dets):
            if di in used_dets:
                continue
            open_tracks.append(
                Tracklet(
                    track_id=next_id,
                    class_name=det.class_name,
                    entries=[(frame, det.box)],
                    scores=[det.score],
                    match_ious=[1.0],
                )
            )
            next_id += 1
    done.extend(open_tracks)
    done.sort(key=lambda tr: tr.track_id)
    return done


@dataclass(frozen=True)
class TrackletGate:
    min_overlap_frames: int = 2
    iou_min: float = 0.9
    mean_score_min: float = 0.8
    min_rel_displacement: float = 0.2


def relative_displacement(tracklet: Tracklet, frame_hw: tuple[int, int]) -> float:
    """Max center displacement between any two boxes, per axis, normalized
    by the frame dimension along that axis."""
    h, w = frame_hw
    cx = np.array([(b[0] + b[2]) / 2.0 for _, b in tracklet.entries])
    cy = np.array([(b[1] + b[3]) / 2.0 for _, b in tracklet.entries])
    return max((cx.max() - cx.min()) / w, (cy.max() - cy.min()) / h)


def valid_tracklet(
    tracklet: Tracklet,
    frame_hw: tuple[int, int],
    gate: TrackletGate = TrackletGate(),
) -> bool:
    overlaps = sum(1 for v in tracklet.match_ious if v > gate.iou_min)
    if overlaps < gate.min_overlap_frames:
        return False
    if not tracklet.scores or np.mean(tracklet.scores) <= gate.mean_score_min:
        return False
    return bool(relative_displacement(tracklet, frame_hw) > gate.min_rel_displacement)


@dataclass(frozen=True)
class RelevantClassMap:
    people: frozenset[str] = frozenset({"person"})
    vehicle: frozenset[str] = frozenset({"car", "bus", "truck"})

    @property
    def pv(self) -> frozenset[str]:
        return self.people | self.vehicle

    def category_sets(self) -> list[frozenset[str]]:
        # ordered like the model heads: (pv, people, vehicle)
        return [self.pv, self.people, self.vehicle]


DEFAULT_CLASS_MAP = RelevantClassMap()


def video_motion_labels(
    tracklets: list[Tracklet],
    frame_hw: tuple[int, int],
    class_map: RelevantClassMap = DEFAULT_CLASS_MAP,
    gate: TrackletGate = TrackletGate(),
) -> np.ndarray:
    """Per-category flags: 1 iff some valid tracklet's class is in the set."""
    valid_classes = {
        tr.class_name for tr in tracklets if valid_tracklet(tr, frame_hw, gate)
    }
    return np.array(
        [int(bool(valid_classes & s)) for s in class_map.category_sets()], np.int8
    )


# --------------------------------------------------------- attention grids

@dataclass
class StaTarget:
    grid: np.ndarray                 # (t', gh, gw) uint8 in {0, 1}
    frame_size: tuple[int, int]      # (W_px, H_px)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid.shape[1], self.grid.shape[2]


def cell_bounds(extent: int, cells: int) -> list[tuple[int, int]]:
    """Integer cell edges; the last cell absorbs the remainder pixels."""
    size = extent // cells
    edges = []
    for i in range(cells):
        lo = i * size
        hi = (i + 1) * size if i < cells - 1 else extent
        edges.append((lo, hi))
    return edges


def rasterize_sta_target(
    boxes_per_frame: list[list[tuple[Box, float]]],
    frame_size: tuple[int, int],
    grid_shape: tuple[int, int],
    score_min: float = 0.8,
) -> StaTarget:
    """Paint qualifying boxes into a pixel mask per frame, then mark each
    grid cell whose pixels are strictly more than half painted."""
    w_px, h_px = frame_size
    gh, gw = grid_shape
    if gh < 1 or gw < 1 or gh > h_px or gw > w_px:
        raise ValueError(f"grid {grid_shape} incompatible with frame {frame_size}")
    rows = cell_bounds(h_px, gh)
    cols = cell_bounds(w_px, gw)
    out = np.zeros((len(boxes_per_frame), gh, gw), np.uint8)
    for t, boxes in enumerate(boxes_per_frame):
        mask = np.zeros((h_px, w_px), bool)
        for box, score in boxes:
            if score <= score_min:
                continue
            x0 = max(0, int(np.floor(box[0])))
            y0 = max(0, int(np.floor(box[1])))
            x1 = min(w_px, int(np.ceil(box[2])))
            y1 = min(h_px, int(np.ceil(box[3])))
            if x0 < x1 and y0 < y1:
                mask[y0:y1, x0:x1] = True
        for r, (ry0, ry1) in enumerate(rows):
            for c, (cx0, cx1) in enumerate(cols):
                cell = mask[ry0:ry1, cx0:cx1]
                if 2 * int(cell.sum()) > cell.size:
                    out[t, r, c] = 1
    return StaTarget(grid=out, frame_size=(w_px, h_px))


# ------------------------------------------------------------- motion gate

def motion_gate(clip: Clip, threshold: float) -> np.ndarray:
    """Flag frames whose mean absolute difference from a decaying running
    average of earlier frames exceeds the threshold. Frame 0 is never
    flagged; the average updates as 0.9 * avg + 0.1 * frame."""
    frames = clip.frames.astype(np.float32)
    flags = np.zeros(clip.n_frames, bool)
    avg = frames[0].copy()
    for t in range(1, clip.n_frames):
        diff = float(np.mean(np.abs(frames[t] - avg))) / 255.0
        flags[t] = diff > threshold
        avg *= 0.9
        avg += 0.1 * frames[t]
    return flags


# ---------------------------------------------------------- detection files

def write_detection_file(detections: list[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            x0, y0, x1, y1 = d.box
            fh.write(
                f"{d.frame_index} {x0:g} {y0:g} {x1:g} {y1:g} "
                f"{d.class_name} {d.score:g}\n"
            )


def parse_detection_file(path) -> list[Detection]:
    """One detection per line: frame x0 y0 x1 y1 class score."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise DetectionParseError(
                    f"{path}:{lineno}: expected 7 fields, got {len(parts)}"
                )
            try:
                out.append(
                    Detection(
                        frame_index=int(parts[0]),
                        box=tuple(float(v) for v in parts[1:5]),
                        class_name=parts[5],
                        score=float(parts[6]),
                    )
                )
            except ValueError as e:
                raise DetectionParseError(f"{path}:{lineno}: {e}") from None
    return out


# ------------------------------------------------------------- grid files

def save_grid(grid: np.ndarray, path) -> None:
    g = np.asarray(grid)
    if g.ndim != 3 or not np.isin(g, (0, 1)).all():
        raise ValueError(f"grid must be a binary (t, gh, gw) array, got {g.shape}")
    t, gh, gw = g.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<IIII", GRID_VERSION, t, gh, gw))
        for i in range(t):
            fh.write(np.packbits(g[i].astype(np.uint8).ravel()).tobytes())


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GRID_MAGIC:
        raise DetectionParseError(f"{path}: bad magic, not a grid file")
    if len(blob) < 20:
        raise DetectionParseError(f"{path}: truncated header")
    version, t, gh, gw = struct.unpack_from("<IIII", blob, 4)
    if version != GRID_VERSION:
        raise DetectionParseError(f"{path}: unsupported grid version {version}")
    per_frame = -(-(gh * gw) // 8)
    if len(blob) != 20 + t * per_frame:
        raise DetectionParseError(f"{path}: wrong payload size")
    out = np.empty((t, gh, gw), np.uint8)
    for i in range(t):
        bits = np.unpackbits(
            np.frombuffer(blob, np.uint8, count=per_frame, offset=20 + i * per_frame)
        )
        out[i] = bits[: gh * gw].reshape(gh, gw)
    return out
