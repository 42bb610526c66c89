"""MPJPE / mAP metrics, model evaluation reports, feature export and throughput timing."""
from __future__ import annotations

import csv
import json
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import DatasetManifest, normalize_depth, normalize_rgb, resize_sample
from .geometry import Skeleton3D, SPDHConfig, decode_spdh, default_intrinsics, encode_spdh
from .model import Checkpoint, ConfigError, PoseNet

THRESHOLDS_CM = (6.0, 8.0, 10.0)


# -- metrics -------------------------------------------------------------------

def joint_errors(pred: Skeleton3D, gt: Skeleton3D) -> np.ndarray:
    """Distances (cm) for joints visible in the ground truth.

    Joints the prediction failed to decode get ``inf``.
    """
    if pred.num_joints != gt.num_joints:
        raise ValueError(f"joint count mismatch: {pred.num_joints} vs {gt.num_joints}")
    evaluated = gt.mask_uv & gt.mask_uz
    ok = pred.mask_uv & pred.mask_uz
    d = np.full(gt.num_joints, np.inf)
    both = evaluated & ok
    d[both] = np.linalg.norm(pred.joints[both] - gt.joints[both], axis=1)
    return d[evaluated]


def mpjpe(pred: Skeleton3D, gt: Skeleton3D) -> Optional[float]:
    d = joint_errors(pred, gt)
    d = d[np.isfinite(d)]
    return float(d.mean()) if len(d) else None


def map_at(pred: Skeleton3D, gt: Skeleton3D,
           thresholds: Sequence[float] = THRESHOLDS_CM) -> Optional[dict]:
    return accuracy_at(joint_errors(pred, gt), thresholds)


def accuracy_at(errors: np.ndarray, thresholds: Sequence[float] = THRESHOLDS_CM) -> Optional[dict]:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        return None
    return {float(t): float(np.mean(errors < t)) for t in thresholds}


@dataclass
class EvalReport:
    mpjpe_cm: Optional[float]
    mpjpe_per_joint: dict
    map: Optional[dict]
    thresholds_cm: tuple = THRESHOLDS_CM
    num_samples: int = 0
    num_evaluated_joints: int = 0
    failed_joints: int = 0
    throughput_fps: Optional[float] = None
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "mpjpe_cm": self.mpjpe_cm,
            "mpjpe_per_joint": self.mpjpe_per_joint,
            "map": None if self.map is None else {f"{t:g}": v for t, v in self.map.items()},
            "thresholds_cm": list(self.thresholds_cm),
            "num_samples": self.num_samples,
            "num_evaluated_joints": self.num_evaluated_joints,
            "failed_joints": self.failed_joints,
            "throughput_fps": self.throughput_fps,
        }


def aggregate(preds: Sequence[Skeleton3D], gts: Sequence[Skeleton3D],
              thresholds: Sequence[float] = THRESHOLDS_CM, label: str = "") -> EvalReport:
    """Micro-average over every (sample, joint) pair visible in the ground truth."""
    if not gts:
        return EvalReport(None, {}, None, tuple(thresholds), 0, 0, 0, label=label)
    names = gts[0].joint_names
    per_joint = {n: [] for n in names}
    all_err = []
    for p, g in zip(preds, gts):
        evaluated = g.mask_uv & g.mask_uz
        d = joint_errors(p, g)
        all_err.append(d)
        for name, e in zip(np.array(names)[evaluated], d):
            per_joint[name].append(e)
    err = np.concatenate(all_err) if all_err else np.zeros(0)
    finite = err[np.isfinite(err)]
    per = {}
    for n, v in per_joint.items():
        v = np.asarray(v)
        v = v[np.isfinite(v)]
        per[n] = float(v.mean()) if len(v) else None
    return EvalReport(
        mpjpe_cm=float(finite.mean()) if len(finite) else None,
        mpjpe_per_joint=per,
        map=accuracy_at(err, thresholds),
        thresholds_cm=tuple(float(t) for t in thresholds),
        num_samples=len(gts),
        num_evaluated_joints=int(err.size),
        failed_joints=int(np.sum(~np.isfinite(err))),
        label=label,
    )


# -- inference -----------------------------------------------------------------

def _input_size(ckpt: Checkpoint) -> int:
    return int(ckpt.config.get("input_size", ckpt.spdh.hm_width))


def model_inputs(sample, ckpt_stage: int, input_size: int, spdh: SPDHConfig, need_depth: bool):
    s = resize_sample(sample, input_size, input_size)
    rgb = normalize_rgb(s.rgb)
    depth = None
    if need_depth:
        if s.depth is None:
            raise ConfigError(f"sample {sample.sample_id} has no depth map")
        depth = normalize_depth(s.depth, spdh)
    return s, rgb, depth


@torch.no_grad()
def predict(model: PoseNet, rgb: Optional[np.ndarray], depth: Optional[np.ndarray]) -> dict:
    """Run a batch (``B x C x H x W`` arrays) through the model in eval mode."""
    model.eval()
    out = model(rgb=None if rgb is None else torch.from_numpy(rgb),
                depth=None if depth is None else torch.from_numpy(depth))
    return {k: v.numpy() for k, v in out.items()}


def infer(ckpt: Checkpoint, manifest: DatasetManifest, batch_size: int = 16,
          model: Optional[PoseNet] = None):
    """Yield ``(sample_at_input_res, predicted skeleton, uv, uz)`` for every sample."""
    model = model or ckpt.build_model()
    size = _input_size(ckpt)
    spdh = ckpt.spdh
    ids = list(manifest.sample_ids)
    for b in range(0, len(ids), batch_size):
        items = [model_inputs(manifest.load(sid), ckpt.stage, size, spdh, ckpt.stage == 1)
                 for sid in ids[b:b + batch_size]]
        rgb = np.stack([it[1] for it in items])
        depth = np.stack([it[2] for it in items]) if ckpt.stage == 1 else None
        out = predict(model, rgb if ckpt.stage == 2 else None, depth)
        for i, (s, _, _) in enumerate(items):
            skel = decode_spdh(out["uv"][i], out["uz"][i], s.intrinsics, spdh,
                               s.skeleton.joint_names)
            yield s, skel, out["uv"][i], out["uz"][i]


def evaluate_model(ckpt: Checkpoint, manifest: DatasetManifest, batch_size: int = 16,
                   label: str = "") -> EvalReport:
    if ckpt.stage == 1:
        missing = [sid for sid in manifest.sample_ids if not manifest.has_depth(sid)]
        if missing:
            raise ConfigError(f"stage-1 checkpoint needs depth input; missing for: "
                              f"{', '.join(missing)}")
    preds, gts = [], []
    for s, skel, _, _ in infer(ckpt, manifest, batch_size):
        preds.append(skel)
        gts.append(s.skeleton)
    return aggregate(preds, gts, label=label or f"stage{ckpt.stage}-{ckpt.variant}")


def codec_oracle(manifest: DatasetManifest, spdh: SPDHConfig, input_size: int) -> EvalReport:
    """Evaluate ground truth passed through encode and decode, with no network."""
    spdh = SPDHConfig(**{**spdh.to_dict(), "hm_width": input_size, "hm_height": input_size})
    preds, gts = [], []
    for sample in manifest:
        s = resize_sample(sample, input_size, input_size)
        t = encode_spdh(s.skeleton, s.intrinsics, spdh)
        preds.append(decode_spdh(t.uv, t.uz, s.intrinsics, spdh, s.skeleton.joint_names))
        gts.append(s.skeleton)
    return aggregate(preds, gts, label="codec-oracle")


# -- reports -------------------------------------------------------------------

def format_table(reports: Sequence[EvalReport]) -> str:
    ths = reports[0].thresholds_cm if reports else THRESHOLDS_CM
    head = ["Model"] + [f"mAP@{t:g}cm (%)" for t in ths] + ["MPJPE (cm)", "failed"]
    rows = []
    for r in reports:
        maps = [("-" if r.map is None else f"{100 * r.map[t]:.2f}") for t in r.thresholds_cm]
        mp = "-" if r.mpjpe_cm is None else f"{r.mpjpe_cm:.2f}"
        rows.append([r.label or "model"] + maps + [mp, str(r.failed_joints)])
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(head), sep] + [line(r) for r in rows]) + "\n"


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report") -> dict:
    """Write ``<stem>.json``, a plain-text table and a per-joint CSV; return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / f"{stem}.json", "table": out_dir / f"{stem}.txt",
             "csv": out_dir / f"{stem}_per_joint.csv"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    paths["table"].write_text(format_table([report]))
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["joint", "mpjpe_cm"])
        for name, v in report.mpjpe_per_joint.items():
            w.writerow([name, "" if v is None else f"{v:.6f}"])
    return paths


# -- feature proximity ---------------------------------------------------------

@dataclass
class FeatureStats:
    num_samples: int
    mean_hall_to_depth: float
    mean_rgb_to_depth: float
    win_rate: float
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"num_samples": self.num_samples,
                "mean_hall_to_depth": self.mean_hall_to_depth,
                "mean_rgb_to_depth": self.mean_rgb_to_depth,
                "win_rate": self.win_rate}


def feature_distances(f_depth: np.ndarray, f_rgb: np.ndarray, f_hall: np.ndarray) -> FeatureStats:
    """Per-sample L2 distances of flattened features to the depth features."""
    d_hall = np.linalg.norm(f_hall - f_depth, axis=1)
    d_rgb = np.linalg.norm(f_rgb - f_depth, axis=1)
    return FeatureStats(len(d_hall), float(d_hall.mean()), float(d_rgb.mean()),
                        float(np.mean(d_hall < d_rgb)),
                        [(float(a), float(b)) for a, b in zip(d_hall, d_rgb)])


def export_features(ckpt: Checkpoint, manifest: DatasetManifest, n: int,
                    out_dir: Optional[str | Path] = None, batch_size: int = 16) -> FeatureStats:
    """Extract depth, RGB and hallucinated embeddings for the first ``n`` samples."""
    if ckpt.stage != 2 or ckpt.variant != "full":
        raise ConfigError("feature export needs a full stage-2 checkpoint")
    ids = list(manifest.sample_ids)
    if n > len(ids):
        warnings.warn(f"requested {n} samples but the split has {len(ids)}; clamping",
                      stacklevel=2)
        n = len(ids)
    ids = ids[:n]
    model = ckpt.build_model()
    size = _input_size(ckpt)
    feats = {"f_depth": [], "f_rgb": [], "f_hall": []}
    for b in range(0, len(ids), batch_size):
        items = [model_inputs(manifest.load(sid), 2, size, ckpt.spdh, True)
                 for sid in ids[b:b + batch_size]]
        out = predict(model, np.stack([it[1] for it in items]), np.stack([it[2] for it in items]))
        for k in feats:
            feats[k].append(out[k].reshape(len(items), -1))
    if n == 0:
        stats = FeatureStats(0, float("nan"), float("nan"), float("nan"))
        arrays = {k: np.zeros((0, 0), np.float32) for k in feats}
    else:
        arrays = {k: np.concatenate(v) for k, v in feats.items()}
        stats = feature_distances(arrays["f_depth"], arrays["f_rgb"], arrays["f_hall"])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out_dir / "features.npz", sample_ids=np.array(ids), **arrays)
        (out_dir / "feature_stats.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    return stats


# -- throughput ----------------------------------------------------------------

def _median_seconds(fn, iterations: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def measure_throughput(model: PoseNet | Checkpoint, input_size: int, iterations: int = 20,
                       warmup: int = 3, seed: int = 0) -> dict:
    """Median frames per second of RGB -> features -> heatmaps -> 3D joints (batch size 1)."""
    if iterations < 10:
        raise ValueError("need at least 10 timed iterations")
    if isinstance(model, Checkpoint):
        spdh = model.spdh
        model = model.build_model()
    else:
        spdh = SPDHConfig(hm_width=input_size, hm_height=input_size)
    if model.stage != 2:
        raise ConfigError("throughput is measured on the stage-2 RGB inference path")
    spdh = SPDHConfig(**{**spdh.to_dict(), "hm_width": input_size, "hm_height": input_size})
    K = default_intrinsics(input_size)
    rng = np.random.default_rng(seed)
    rgb = torch.from_numpy(rng.standard_normal((1, 3, input_size, input_size)).astype(np.float32))
    model.eval()
    with torch.no_grad():
        ref = model(rgb=rgb)
    uv, uz = ref["uv"][0].numpy(), ref["uz"][0].numpy()

    def full():
        with torch.no_grad():
            out = model(rgb=rgb)
        decode_spdh(out["uv"][0].numpy(), out["uz"][0].numpy(), K, spdh)

    def decode_only():
        decode_spdh(uv, uz, K, spdh)

    t_full = _median_seconds(full, iterations, warmup)
    t_dec = _median_seconds(decode_only, iterations, warmup)
    return {"fps": 1.0 / t_full, "median_seconds": t_full, "decode_median_seconds": t_dec,
            "iterations": iterations, "input_size": input_size}
