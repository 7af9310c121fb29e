"""Operator surface: subcommands wiring the synthetic corpus, weak
labeling, training, prediction, evaluation and benchmarking into
reproducible runs driven by a flat key=value config file.

Every run is a pure function of (config file, flags, seed): there is no
hidden state, all diagnostics go to stderr, and data goes to files or
stdout. Flags override config-file values.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import data as D
from . import evaluation as E
from . import model as M
from . import train as TR
from . import weaklabel as W

CONFIG_VERSION = "1"
HEAD_COLUMNS = ("pv", "people", "vehicle")

# Philox stream tag for the train/test split, disjoint from the build and
# batch-scheduler namespaces.
_SPLIT_STREAM = 1 << 33


class ConfigError(ValueError):
    pass


def parse_config(path) -> dict[str, str]:
    cfg: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            cfg[k.strip()] = v.strip()
    version = cfg.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config_version {version}")
    return cfg


def _get(cfg: dict, key: str, cast, default=None, required=False):
    if key in cfg:
        try:
            return cast(cfg[key])
        except ValueError as e:
            raise ConfigError(f"config key {key}: {e}") from None
    if required and default is None:
        raise ConfigError(f"missing required config key {key}")
    return default


def arch_from_config(cfg: dict) -> M.ArchConfig:
    variant = cfg.get("variant", "FD-D-STA-T")
    overrides = {}
    if "input_h" in cfg or "input_w" in cfg:
        overrides["input_resolution"] = (
            _get(cfg, "input_h", int, required=True),
            _get(cfg, "input_w", int, required=True),
        )
    if "input_frames" in cfg:
        overrides["input_frames"] = int(cfg["input_frames"])
    if "filters" in cfg:
        overrides["filters_per_layer"] = int(cfg["filters"])
    return M.ArchConfig.from_variant(variant, **overrides)


@dataclass
class RunConfig:
    arch: M.ArchConfig
    seed: int
    lr: float = 0.001
    batch_size: int = 40
    max_iters: int = 5000
    c1: float = 1.0
    c2: float = 0.5
    checkpoint_every: int = 0
    clip_fps: float = 10.0
    clips_dir: str | None = None
    labels_file: str | None = None
    grids_dir: str | None = None
    detections_dir: str | None = None
    split_file: str | None = None
    subset: str | None = None
    out_dir: str = "out"

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = parse_config(path)
        if "seed" not in cfg:
            raise ConfigError(f"{path}: seed is mandatory")
        return cls(
            arch=arch_from_config(cfg),
            seed=_get(cfg, "seed", int, required=True),
            lr=_get(cfg, "lr", float, 0.001),
            batch_size=_get(cfg, "batch_size", int, 40),
            max_iters=_get(cfg, "max_iters", int, 5000),
            c1=_get(cfg, "c1", float, 1.0),
            c2=_get(cfg, "c2", float, 0.5),
            checkpoint_every=_get(cfg, "checkpoint_every", int, 0),
            clip_fps=_get(cfg, "clip_fps", float, 10.0),
            clips_dir=cfg.get("clips_dir"),
            labels_file=cfg.get("labels_file"),
            grids_dir=cfg.get("grids_dir"),
            detections_dir=cfg.get("detections_dir"),
            split_file=cfg.get("split_file"),
            subset=cfg.get("subset"),
            out_dir=cfg.get("out_dir", "out"),
        )

    def require_paths(self, *names):
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"config is missing {name}")
            if not os.path.exists(value):
                raise ConfigError(f"{name} does not exist: {value}")


# --------------------------------------------------------------- label files

def write_labels(path, labels: dict[str, np.ndarray]) -> None:
    with open(path, "w") as fh:
        fh.write("# clip_id pv people vehicle\n")
        for clip_id in sorted(labels):
            flags = labels[clip_id]
            fh.write(f"{clip_id} {flags[0]} {flags[1]} {flags[2]}\n")


def read_labels(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            out[parts[0]] = np.array([int(v) for v in parts[1:4]], np.int8)
    return out


def read_predictions(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            out[parts[0]] = np.array([float(v) for v in parts[1:4]])
    return out


def read_split(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            clip_id, subset = line.split()
            out[clip_id] = subset
    return out


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = parse_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else _get(cfg, "seed", int)
    if seed is None:
        raise ConfigError("seed is mandatory (flag --seed or config key seed)")
    synth = D.SynthConfig(
        seed=seed,
        num_clips=(
            args.num_clips
            if args.num_clips is not None
            else _get(cfg, "num_clips", int, 200)
        ),
        scene_hw=(
            _get(cfg, "scene_h", int, 90),
            _get(cfg, "scene_w", int, 160),
        ),
        fps=_get(cfg, "fps", float, 10.0),
        duration_s=_get(cfg, "duration_s", float, 15.0),
        flicker_amplitude=_get(cfg, "flicker_amplitude", float, 4.0),
        speckle_density=_get(cfg, "speckle_density", float, 0.004),
        static_distractors=_get(cfg, "static_distractors", int, 2),
    )
    out = args.out or cfg.get("out_dir", "synth_out")
    train_fraction = _get(cfg, "train_fraction", float, 0.75)
    clips_dir = os.path.join(out, "clips")
    det_dir = os.path.join(out, "detections")
    os.makedirs(clips_dir, exist_ok=True)
    os.makedirs(det_dir, exist_ok=True)

    labels: dict[str, np.ndarray] = {}
    counts = np.zeros(3, np.int64)
    for sample in D.synth_iter(synth):
        cid = sample.clip.source_id
        D.save_clip(sample.clip, os.path.join(clips_dir, f"{cid}.rmcl"))
        dets = [
            W.Detection(frame_index=f, box=b, class_name=tr.class_name, score=1.0)
            for tr in sample.tracks
            for f, b in tr.boxes
        ]
        W.write_detection_file(dets, os.path.join(det_dir, f"{cid}.txt"))
        labels[cid] = sample.labels.motion
        counts += sample.labels.motion
    write_labels(os.path.join(out, "labels.txt"), labels)

    ids = sorted(labels)
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed, _SPLIT_STREAM], np.uint64))
    )
    order = rng.permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    split = {ids[i]: ("train" if k < n_train else "test")
             for k, i in enumerate(order)}
    with open(os.path.join(out, "split.txt"), "w") as fh:
        for cid in ids:
            fh.write(f"{cid} {split[cid]}\n")
    with open(os.path.join(out, "meta.txt"), "w") as fh:
        fh.write(f"config_version={CONFIG_VERSION}\n")
        fh.write(f"seed={seed}\nnum_clips={synth.num_clips}\n")
        fh.write(f"scene_h={synth.scene_hw[0]}\nscene_w={synth.scene_hw[1]}\n")
        fh.write(f"fps={synth.fps:g}\nduration_s={synth.duration_s:g}\n")
    print(
        f"wrote {len(ids)} clips to {out} "
        f"({sum(1 for v in split.values() if v == 'train')} train / "
        f"{sum(1 for v in split.values() if v == 'test')} test); "
        f"positives pv={counts[0]} people={counts[1]} vehicle={counts[2]}"
    )
    return 0


def cmd_weak_label(args) -> int:
    cfg = parse_config(args.config) if args.config else {}
    arch = arch_from_config(cfg)
    clip_fps = _get(cfg, "clip_fps", float, 10.0)
    grids_dir = os.path.join(args.out, "grids")
    os.makedirs(grids_dir, exist_ok=True)
    t_dim, gh, gw = M.sta_dims(arch)
    gate = W.TrackletGate()

    labels: dict[str, np.ndarray] = {}
    det_files = sorted(
        f for f in os.listdir(args.detections) if f.endswith(".txt")
    )
    for fname in det_files:
        cid = os.path.splitext(fname)[0]
        clip_path = os.path.join(args.clips, f"{cid}.rmcl")
        if not os.path.exists(clip_path):
            print(f"warning: no clip for {fname}, skipped", file=sys.stderr)
            continue
        dets = W.parse_detection_file(os.path.join(args.detections, fname))
        clip = D.load_clip(clip_path, fps=clip_fps)
        frame_hw = clip.frame_hw
        tracks = W.associate(dets)
        labels[cid] = W.video_motion_labels(tracks, frame_hw, gate=gate)

        sampled = D.sample_frame_indices(
            clip.n_frames, clip.fps, D.INPUT_FPS, arch.input_frames
        )
        valid = [tr for tr in tracks if W.valid_tracklet(tr, frame_hw, gate)]
        boxes_per_frame: list[list[tuple[W.Box, float]]] = []
        for f in sampled:
            frame_boxes = []
            for tr in valid:
                for (fr, box), score in zip(tr.entries, tr.scores):
                    if fr == f:
                        frame_boxes.append((box, score))
            boxes_per_frame.append(frame_boxes)
        target = W.rasterize_sta_target(
            boxes_per_frame,
            frame_size=(frame_hw[1], frame_hw[0]),
            grid_shape=(gh, gw),
        )
        assert target.grid.shape == (t_dim, gh, gw)
        W.save_grid(target.grid, os.path.join(grids_dir, f"{cid}.rmgt"))
    write_labels(os.path.join(args.out, "labels.txt"), labels)
    print(f"labeled {len(labels)} clips into {args.out}")
    return 0


def _load_training_set(run: RunConfig):
    labels = read_labels(run.labels_file)
    ids = sorted(labels)
    if run.split_file and run.subset:
        split = read_split(run.split_file)
        ids = [i for i in ids if split.get(i) == run.subset]
    inputs, motion, grids = [], [], []
    for cid in ids:
        clip = D.load_clip(
            os.path.join(run.clips_dir, f"{cid}.rmcl"), fps=run.clip_fps
        )
        inputs.append(D.to_input(clip, run.arch))
        motion.append(labels[cid])
        grid = None
        if run.grids_dir:
            path = os.path.join(run.grids_dir, f"{cid}.rmgt")
            if os.path.exists(path):
                grid = W.load_grid(path)
        grids.append(grid)
    return ids, TR.TrainingSet(
        inputs=inputs, motion=np.array(motion), sta_grids=grids
    )


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    run.require_paths("clips_dir", "labels_file")
    os.makedirs(run.out_dir, exist_ok=True)
    _, dataset = _load_training_set(run)
    hyper = TR.TrainHyper(
        lr=run.lr, batch_size=run.batch_size, max_iters=run.max_iters,
        seed=run.seed, c1=run.c1, c2=run.c2,
        checkpoint_every=run.checkpoint_every,
    )
    params = adam = None
    start_iter = 0
    if args.resume:
        params = M.load(args.resume + ".rmnt")
        adam, start_iter = TR.load_optimizer(args.resume + ".opt", params)
    if run.arch.supervise_sta:
        missing = sum(1 for g in dataset.sta_grids if g is None)
        if missing:
            print(
                f"warning: {missing} of {len(dataset)} samples lack attention "
                "grids; their supervision term is skipped",
                file=sys.stderr,
            )
    result = TR.train_loop(
        run.arch, dataset, hyper,
        params=params, adam=adam, start_iter=start_iter,
        checkpoint_dir=os.path.join(run.out_dir, "checkpoints"),
    )
    M.save(result.params, os.path.join(run.out_dir, "model.rmnt"))
    TR.write_loss_trace(os.path.join(run.out_dir, "loss.csv"), result.trace)
    if result.trace:
        print(
            f"trained {len(result.trace)} iterations; "
            f"final loss {result.trace[-1][1]:.4f}"
        )
    else:
        print("trained 0 iterations; wrote initialized parameters")
    return 0


def _predict_clip(params, clip_path, fps):
    clip = D.load_clip(clip_path, fps=fps)
    x = D.to_input(clip, params.config)
    out = M.forward(params, x)
    return clip.source_id, out.head_probs[:, 1]


def cmd_predict(args) -> int:
    params = M.load(args.model)
    if os.path.isdir(args.clips):
        paths = sorted(
            os.path.join(args.clips, f)
            for f in os.listdir(args.clips)
            if f.endswith(".rmcl")
        )
    else:
        paths = [args.clips]
    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            rows = list(
                pool.map(lambda p: _predict_clip(params, p, args.fps), paths)
            )
    else:
        rows = [_predict_clip(params, p, args.fps) for p in paths]
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        sink.write(f"# threads={args.threads}\n")
        for cid, probs in rows:
            sink.write(f"{cid} {probs[0]:.6f} {probs[1]:.6f} {probs[2]:.6f}\n")
    finally:
        if args.out:
            sink.close()
    return 0


def cmd_eval(args) -> int:
    preds = read_predictions(args.predictions)
    labels = read_labels(args.labels)
    missing = sorted(set(preds) ^ set(labels))
    if missing:
        raise ConfigError(
            "clip ids do not match between predictions and labels: "
            + " ".join(missing[:20])
        )
    ids = sorted(preds)
    os.makedirs(args.out, exist_ok=True)
    lines = ["category,ap,ap_interpolated_101,precision,recall,f_score"]
    summary = []
    for j, cat in enumerate(HEAD_COLUMNS):
        scores = np.array([preds[i][j] for i in ids])
        truth = np.array([labels[i][j] for i in ids])
        ap = E.average_precision(scores, truth)
        ap101 = E.interpolated_ap_101(scores, truth)
        E.write_pr_csv(
            os.path.join(args.out, f"pr_{cat}.csv"), E.pr_curve(scores, truth)
        )
        decided = scores >= args.threshold
        tp = int(np.sum(decided & (truth == 1)))
        precision = tp / int(decided.sum()) if decided.any() else 0.0
        recall = tp / int(truth.sum())
        f = E.f_score(precision, recall)
        lines.append(
            f"{cat},{ap:.6f},{ap101:.6f},{precision:.6f},{recall:.6f},{f:.6f}"
        )
        summary.append(f"{cat}: AP {ap:.4f} F@{args.threshold:g} {f:.4f}")
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("; ".join(summary))
    return 0


def cmd_bench(args) -> int:
    params = M.load(args.model)
    paths = sorted(
        os.path.join(args.clips, f)
        for f in os.listdir(args.clips)
        if f.endswith(".rmcl")
    )
    if not paths:
        raise ConfigError(f"no .rmcl clips found in {args.clips}")
    clips = [D.load_clip(p, fps=args.fps) for p in paths]
    report = E.benchmark(
        params, clips, repetitions=args.reps, threads=args.threads
    )
    E.write_bench_report(report, args.out)
    print(
        f"mean {report.mean_s * 1e3:.1f} ms/clip, p95 {report.p95_s * 1e3:.1f} ms, "
        f"{report.clips_per_second:.2f} clips/s, model {report.model_size_bytes} "
        f"bytes, threads={report.threads}"
    )
    return 0


# --------------------------------------------------------------- entrypoint

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="relmotion",
        description="relevant-motion clip classification pipeline",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic corpus")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--num-clips", type=int, dest="num_clips")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("weak-label", help="labels and attention grids from detections")
    s.add_argument("--detections", required=True)
    s.add_argument("--clips", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_weak_label)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint path stem (without extension)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="per-clip motion probabilities")
    s.add_argument("--model", required=True)
    s.add_argument("--clips", required=True)
    s.add_argument("--out")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--fps", type=float, default=10.0)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="AP / PR / F-score report")
    s.add_argument("--predictions", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="runtime and model-size benchmark")
    s.add_argument("--model", required=True)
    s.add_argument("--clips", required=True)
    s.add_argument("--reps", type=int, default=3)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--fps", type=float, default=10.0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
