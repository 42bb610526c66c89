"""Figure output: pose overlays, uz heatmaps, 3D skeletons and evaluation summaries."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import SKELETON_EDGES, CameraIntrinsics, Skeleton3D, project_points  # noqa: E402

# PNG metadata without the matplotlib version keeps files byte-stable
_PNG_META = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 100,
    "figure.dpi": 100,
    "image.interpolation": "nearest",
}

GT_COLOR = "#2ca02c"
PRED_COLOR = "#d62728"


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def overlay_points(skel: Skeleton3D, K: CameraIntrinsics) -> np.ndarray:
    """Pixel positions used for the 2D markers; NaN where the joint is not drawn."""
    uv = project_points(K, skel.joints)
    uv[~skel.mask_uv] = np.nan
    return uv


def _draw_edges(ax, uv, color):
    for a, b in SKELETON_EDGES:
        if a < len(uv) and b < len(uv) and np.all(np.isfinite(uv[[a, b]])):
            ax.plot(uv[[a, b], 0], uv[[a, b], 1], "-", color=color, lw=1.2)
    ax.plot(uv[:, 0], uv[:, 1], "o", color=color, ms=3)


def plot_pose(rgb: np.ndarray, K: CameraIntrinsics, pred: Skeleton3D, out_dir: str | Path,
              sample_id: str, heatmaps: Optional[tuple] = None,
              gt: Optional[Skeleton3D] = None, z_range: tuple = (0.0, 500.0)) -> list[Path]:
    """Write ``<id>_overlay.png``, ``<id>_uz.png`` and ``<id>_3d.png``.

    ``heatmaps`` is an optional ``(uv, uz)`` pair of J x H x W stacks drawn
    as channel-wise maxima.
    """
    out_dir = Path(out_dir)
    H, W = rgb.shape[:2]
    paths = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4 * H / W))
        ax.imshow(rgb)
        if heatmaps is not None:
            ax.imshow(np.clip(heatmaps[0].max(axis=0), 0, 1), cmap="inferno", alpha=0.5,
                      extent=(-0.5, W - 0.5, H - 0.5, -0.5), vmin=0, vmax=1)
        if gt is not None:
            _draw_edges(ax, overlay_points(gt, K), GT_COLOR)
        uv = overlay_points(pred, K)
        _draw_edges(ax, uv, PRED_COLOR)
        if not np.any(np.isfinite(uv)):
            ax.text(0.5, 0.05, "no joints decoded", transform=ax.transAxes, ha="center",
                    color="white", bbox={"facecolor": "black", "alpha": 0.6})
        ax.set_xlim(-0.5, W - 0.5)
        ax.set_ylim(H - 0.5, -0.5)
        ax.set_axis_off()
        paths.append(_save(fig, out_dir / f"{sample_id}_overlay.png"))

        fig, ax = plt.subplots(figsize=(3, 3))
        if heatmaps is not None:
            ax.imshow(np.clip(heatmaps[1].max(axis=0), 0, 1), cmap="viridis", vmin=0, vmax=1,
                      extent=(-0.5, W - 0.5, z_range[1], z_range[0]), aspect="auto")
        else:
            ax.set_xlim(-0.5, W - 0.5)
            ax.set_ylim(z_range[1], z_range[0])
        ok = pred.mask_uz & np.isfinite(uv[:, 0]) if len(uv) else np.zeros(0, bool)
        ax.plot(uv[ok, 0], pred.joints[ok, 2], "o", color=PRED_COLOR, ms=3)
        ax.set_xlabel("u (px)")
        ax.set_ylabel("Z (cm)")
        ax.set_title("uz")
        paths.append(_save(fig, out_dir / f"{sample_id}_uz.png"))

        fig = plt.figure(figsize=(4, 4))
        ax = fig.add_subplot(projection="3d")
        for skel, color in ((gt, GT_COLOR), (pred, PRED_COLOR)):
            if skel is None:
                continue
            P = np.where((skel.mask_uv & skel.mask_uz)[:, None], skel.joints, np.nan)
            for a, b in SKELETON_EDGES:
                if np.all(np.isfinite(P[[a, b]])):
                    # plot with Z as depth axis and -Y as up
                    ax.plot(P[[a, b], 0], P[[a, b], 2], -P[[a, b], 1], color=color, lw=1.5)
        ax.view_init(elev=15, azim=-70)
        ax.set_xlabel("X (cm)")
        ax.set_ylabel("Z (cm)")
        ax.set_zlabel("-Y (cm)")
        paths.append(_save(fig, out_dir / f"{sample_id}_3d.png"))
    return paths


def plot_report(report, out_dir: str | Path, stem: str = "report") -> list[Path]:
    """Per-joint MPJPE bars and accuracy-vs-threshold points for an EvalReport."""
    out_dir = Path(out_dir)
    paths = []
    with plt.rc_context(STYLE):
        names = list(report.mpjpe_per_joint)
        vals = [np.nan if v is None else v for v in report.mpjpe_per_joint.values()]
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(range(len(names)), vals, color="#4c72b0")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=60, ha="right")
        ax.set_ylabel("MPJPE (cm)")
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"{stem}_per_joint.png"))

        fig, ax = plt.subplots(figsize=(3.5, 3))
        if report.map:
            ts = sorted(report.map)
            ax.plot(ts, [100 * report.map[t] for t in ts], "o-", color="#4c72b0")
        ax.set_xlabel("threshold (cm)")
        ax.set_ylabel("mAP (%)")
        ax.set_ylim(0, 100)
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"{stem}_map.png"))
    return paths


def plot_losses(csv_path: str | Path, out_path: str | Path) -> Path:
    rows = list(csv.DictReader(open(csv_path)))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        if rows:
            step = [int(r["step"]) for r in rows]
            for key in ("l_pe", "l_pi", "l_total"):
                ax.semilogy(step, [max(float(r[key]), 1e-12) for r in rows], label=key, lw=1)
            ax.legend(frameon=False)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        fig.tight_layout()
        return _save(fig, Path(out_path))


def plot_feature_distances(per_sample: Sequence[tuple], out_path: str | Path) -> Path:
    """Scatter of per-sample distances to the depth features: hallucinated vs RGB."""
    d = np.asarray(per_sample, dtype=float).reshape(-1, 2)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.plot(d[:, 1], d[:, 0], ".", ms=3, color="#4c72b0")
        if len(d):
            hi = float(np.nanmax(d)) * 1.05
            ax.plot([0, hi], [0, hi], "--", color="0.5", lw=1)
        ax.set_xlabel("||f_rgb - f_depth||")
        ax.set_ylabel("||f_hall - f_depth||")
        fig.tight_layout()
        return _save(fig, Path(out_path))
