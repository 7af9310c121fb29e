"""Ranking metrics (average precision, PR curves, F-score) and the
runtime/model-size benchmark for the clip classifier.

AP is the non-interpolated area under the precision-recall stair; the
101-point interpolated variant is reported alongside it in CSV output since
detection toolkits disagree on the convention.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import model as M


class MetricError(ValueError):
    """Metric undefined for this input (e.g. no positive labels)."""


def _ranked(scores, labels):
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    if labels.sum() == 0:
        raise MetricError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")  # ties keep input order
    return scores[order], labels[order].astype(np.int64)


def average_precision(scores, labels) -> float:
    """Sum of precision at each positive hit times the recall step."""
    _, lab = _ranked(scores, labels)
    tp = np.cumsum(lab)
    k = np.arange(1, len(lab) + 1)
    precision = tp / k
    return float(precision[lab == 1].sum() / lab.sum())


def interpolated_ap_101(scores, labels) -> float:
    """101-point interpolated AP (mean of the precision envelope)."""
    _, lab = _ranked(scores, labels)
    tp = np.cumsum(lab)
    k = np.arange(1, len(lab) + 1)
    precision = tp / k
    recall = tp / lab.sum()
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / 101.0


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(precision, recall, threshold) at every distinct score, descending.

    Recall is non-decreasing as the threshold falls. Thresholds that retrieve
    no positives yet are omitted (the curve starts at the first positive), so
    precision stays in (0, 1].
    """
    sc, lab = _ranked(scores, labels)
    n_pos = int(lab.sum())
    points = []
    tp = 0
    for k in range(len(sc)):
        tp += int(lab[k])
        if k + 1 < len(sc) and sc[k + 1] == sc[k]:
            continue  # group ties: one point per distinct threshold
        if tp == 0:
            continue
        points.append((tp / (k + 1), tp / n_pos, float(sc[k])))
    return points


def f_score(precision: float, recall: float) -> float:
    """Harmonic mean; defined as 0 when both inputs are 0."""
    if not (0 <= precision <= 1 and 0 <= recall <= 1):
        raise MetricError(f"precision/recall outside [0,1]: {precision}, {recall}")
    if precision == 0 and recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------- benchmark

@dataclass
class BenchReport:
    mean_s: float
    p50_s: float
    p95_s: float
    clips_per_second: float
    model_size_bytes: int
    threads: int
    repetitions: int
    n_clips: int
    times_s: list[float]


def benchmark(
    params: M.ModelParams,
    clips: list[D.Clip],
    repetitions: int = 3,
    threads: int = 1,
    warmup: int = 1,
) -> BenchReport:
    """Time frame differencing plus the forward pass per clip.

    Sampling and downsampling are done up front and excluded, matching the
    accounting used for the published runtime numbers. Warmup runs are
    excluded from the statistics.
    """
    if not clips or repetitions < 1:
        raise ValueError("need at least one clip and one repetition")
    cfg = params.config
    prepared = []
    for clip in clips:
        sampled = D.sample_frames(clip, D.INPUT_FPS, cfg.input_frames)
        src_h, _ = sampled.frame_hw
        prepared.append(D.downsample(sampled, src_h // cfg.input_resolution[0]))

    def run(clip: D.Clip) -> float:
        t0 = time.perf_counter()
        if cfg.use_frame_diff:
            x = D.frame_difference(clip, "refl")
        else:
            x = clip.frames.astype(np.float32) / np.float32(255.0)
        M.forward(params, x)
        return time.perf_counter() - t0

    for clip in prepared[: max(warmup, 0)] or prepared[:1]:
        if warmup > 0:
            run(clip)

    jobs = [clip for _ in range(repetitions) for clip in prepared]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            times = list(pool.map(run, jobs))
    else:
        times = [run(clip) for clip in jobs]

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.rmnt")
        M.save(params, path)
        size = os.path.getsize(path)

    total = float(np.sum(times))
    return BenchReport(
        mean_s=float(np.mean(times)),
        p50_s=float(np.percentile(times, 50)),
        p95_s=float(np.percentile(times, 95)),
        clips_per_second=len(jobs) / total if total > 0 else float("inf"),
        model_size_bytes=size,
        threads=threads,
        repetitions=repetitions,
        n_clips=len(clips),
        times_s=[float(t) for t in times],
    )


# ---------------------------------------------------------------- reporting

def write_pr_csv(path, points) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall\n")
        for precision, recall, threshold in points:
            fh.write(f"{threshold:.8g},{precision:.8g},{recall:.8g}\n")


def write_bench_report(report: BenchReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"mean_s={report.mean_s:.6g}\n")
        fh.write(f"p50_s={report.p50_s:.6g}\n")
        fh.write(f"p95_s={report.p95_s:.6g}\n")
        fh.write(f"clips_per_second={report.clips_per_second:.6g}\n")
        fh.write(f"model_size_bytes={report.model_size_bytes}\n")
        fh.write(f"threads={report.threads}\n")
        fh.write(f"repetitions={report.repetitions}\n")
        fh.write(f"n_clips={report.n_clips}\n")
