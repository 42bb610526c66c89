"""Pinhole camera math and the semi-perspective decoupled heatmap (SPDH) codec.

Coordinates follow the usual camera convention: X right, Y down, Z forward,
all in centimetres. Pixel coordinates ``(u, v)`` index heatmap cells directly,
so cell ``(row, col)`` is centred at ``u = col``, ``v = row``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

JOINT_NAMES: tuple[str, ...] = (
    "head",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
)

# index pairs into JOINT_NAMES; used for plotting and the synthetic renderer
SKELETON_EDGES: tuple[tuple[int, int], ...] = (
    (0, 1),
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (2, 8), (5, 11), (8, 11),
    (8, 9), (9, 10),
    (11, 12), (12, 13),
)


class GeometryError(ValueError):
    """Raised for invalid geometric input (non-positive depth, bad scale...)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass
class Skeleton3D:
    """Per-joint 3D positions (cm, camera frame) plus per-space visibility.

    Joints that could not be decoded carry NaN coordinates and zero masks.
    """

    joints: np.ndarray
    mask_uv: np.ndarray
    mask_uz: np.ndarray
    joint_names: tuple[str, ...] = JOINT_NAMES

    def __post_init__(self):
        # own copies, so editing one skeleton's masks never leaks into another
        self.joints = np.array(self.joints, dtype=np.float64).reshape(-1, 3)
        n = len(self.joints)
        self.mask_uv = np.array(self.mask_uv, dtype=bool).reshape(n)
        self.mask_uz = np.array(self.mask_uz, dtype=bool).reshape(n)
        self.joint_names = tuple(self.joint_names)
        if len(self.joint_names) != n:
            raise GeometryError(f"{n} joints but {len(self.joint_names)} joint names")
        vis = self.mask_uv | self.mask_uz
        if np.any(~(self.joints[vis, 2] > 0)):
            raise GeometryError("visible joints must have Z > 0")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def visible(self) -> np.ndarray:
        """Joints visible in both spaces."""
        return self.mask_uv & self.mask_uz

    def copy(self) -> "Skeleton3D":
        return Skeleton3D(self.joints.copy(), self.mask_uv.copy(), self.mask_uz.copy(),
                          self.joint_names)

    def to_dict(self) -> dict:
        joints = [[None if not np.isfinite(c) else float(c) for c in p] for p in self.joints]
        return {
            "joints": joints,
            "joint_names": list(self.joint_names),
            "mask_uv": [bool(m) for m in self.mask_uv],
            "mask_uz": [bool(m) for m in self.mask_uz],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton3D":
        joints = np.array([[np.nan if c is None else c for c in p] for p in d["joints"]],
                          dtype=np.float64)
        names = d.get("joint_names") or JOINT_NAMES[: len(joints)]
        return cls(joints, d["mask_uv"], d["mask_uz"], tuple(names))


def save_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class SPDHConfig:
    hm_width: int = 256
    hm_height: int = 256
    sigma_uv: float = 2.0
    sigma_uz: float = 2.0
    z_min: float = 0.0
    z_max: float = 500.0
    peak_threshold: float = 0.3

    def __post_init__(self):
        if not (self.z_max > self.z_min >= 0):
            raise GeometryError(f"need z_max > z_min >= 0, got [{self.z_min}, {self.z_max}]")
        if not (self.sigma_uv > 0 and self.sigma_uz > 0):
            raise GeometryError("Gaussian sigmas must be positive")
        if self.hm_width < 1 or self.hm_height < 1:
            raise GeometryError("heatmap size must be positive")

    @property
    def delta_z(self) -> float:
        return (self.z_max - self.z_min) / self.hm_height

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SPDHConfig":
        return cls(**d)


@dataclass
class SPDHTarget:
    uv: np.ndarray
    uz: np.ndarray
    mask_uv: np.ndarray
    mask_uz: np.ndarray


def project_point(K: CameraIntrinsics, p: Sequence[float]) -> tuple[float, float]:
    X, Y, Z = (float(c) for c in p)
    if not Z > 0:
        raise GeometryError(f"cannot project a point with Z={Z} <= 0")
    return K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy


def project_points(K: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Vectorised projection; rows with Z <= 0 come back as NaN."""
    pts = np.asarray(pts, dtype=np.float64)
    Z = pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(Z > 0, K.fx * pts[..., 0] / Z + K.cx, np.nan)
        v = np.where(Z > 0, K.fy * pts[..., 1] / Z + K.cy, np.nan)
    return np.stack([u, v], axis=-1)


def backproject_pixel(K: CameraIntrinsics, u: float, v: float, z: float) -> np.ndarray:
    if not z > 0:
        raise GeometryError(f"cannot backproject with depth z={z} <= 0")
    return np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, float(z)])


def backproject_pixels(K: CameraIntrinsics, uv: np.ndarray, z: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    X = (uv[..., 0] - K.cx) * z / K.fx
    Y = (uv[..., 1] - K.cy) * z / K.fy
    return np.stack([X, Y, z], axis=-1)


def scale_intrinsics(K: CameraIntrinsics, sx: float, sy: float) -> CameraIntrinsics:
    if not (sx > 0 and sy > 0):
        raise GeometryError(f"scale factors must be positive, got ({sx}, {sy})")
    return CameraIntrinsics(K.fx * sx, K.fy * sy, K.cx * sx, K.cy * sy,
                            int(round(K.width * sx)), int(round(K.height * sy)))


def gaussian_peak(center: tuple[float, float], sigma: float, H: int, W: int) -> np.ndarray:
    """Unnormalised Gaussian blob with unit height at ``center = (col, row)``."""
    if not sigma > 0:
        raise GeometryError("sigma must be positive")
    col, row = center
    cols = np.exp(-((np.arange(W) - col) ** 2) / (2 * sigma ** 2))
    rows = np.exp(-((np.arange(H) - row) ** 2) / (2 * sigma ** 2))
    return np.outer(rows, cols)


def depth_bin(z: np.ndarray | float, cfg: SPDHConfig):
    """Continuous row coordinate of depth ``z`` in the uz map."""
    return (np.asarray(z, dtype=np.float64) - cfg.z_min) / cfg.delta_z


def compute_visibility(skel: Skeleton3D, K: CameraIntrinsics,
                       cfg: SPDHConfig) -> tuple[np.ndarray, np.ndarray]:
    uv = project_points(K, skel.joints)
    Z = skel.joints[:, 2]
    with np.errstate(invalid="ignore"):
        in_u = (uv[:, 0] >= 0) & (uv[:, 0] < cfg.hm_width)
        in_v = (uv[:, 1] >= 0) & (uv[:, 1] < cfg.hm_height)
        front = Z > 0
        in_z = (Z >= cfg.z_min) & (Z < cfg.z_max)
    return in_u & in_v & front, in_u & in_z & front


def encode_from_pixels(uv: np.ndarray, Z: np.ndarray, mask_uv: np.ndarray, mask_uz: np.ndarray,
                       cfg: SPDHConfig, dtype=np.float32) -> SPDHTarget:
    """Build uv/uz heatmap stacks from per-joint pixel coordinates and depths."""
    J = len(uv)
    H, W = cfg.hm_height, cfg.hm_width
    hm_uv = np.zeros((J, H, W), dtype=dtype)
    hm_uz = np.zeros((J, H, W), dtype=dtype)
    zb = depth_bin(Z, cfg)
    for j in range(J):
        if mask_uv[j]:
            hm_uv[j] = gaussian_peak((uv[j, 0], uv[j, 1]), cfg.sigma_uv, H, W)
        if mask_uz[j]:
            hm_uz[j] = gaussian_peak((uv[j, 0], zb[j]), cfg.sigma_uz, H, W)
    return SPDHTarget(hm_uv, hm_uz, np.asarray(mask_uv, bool).copy(),
                      np.asarray(mask_uz, bool).copy())


def encode_spdh(skel: Skeleton3D, K: CameraIntrinsics, cfg: SPDHConfig,
                dtype=np.float32) -> SPDHTarget:
    """Encode a skeleton as uv and uz heatmaps.

    ``K`` must already be expressed at heatmap resolution. Joints outside the
    image or the depth range get all-zero channels and a zero mask bit.
    """
    mask_uv, mask_uz = compute_visibility(skel, K, cfg)
    uv = project_points(K, skel.joints)
    return encode_from_pixels(uv, skel.joints[:, 2], mask_uv, mask_uz, cfg, dtype)


def _argmax_2d(hm: np.ndarray) -> tuple[int, int]:
    # np.argmax returns the first maximum in row-major order, i.e. the
    # smallest (row, col) on ties
    r, c = np.unravel_index(int(np.argmax(hm)), hm.shape)
    return int(r), int(c)


def decode_spdh(uv: np.ndarray, uz: np.ndarray, K: CameraIntrinsics, cfg: SPDHConfig,
                joint_names: Sequence[str] | None = None, window: int = 2) -> Skeleton3D:
    """Recover metric 3D joints from a pair of heatmap stacks.

    The column comes from the uv map; the depth row is read from the uz map in a
    ``±window`` column band around it, falling back to the global uz maximum if
    that band is below ``cfg.peak_threshold``. Joints whose uv or uz peak is
    below the threshold are reported invisible with NaN coordinates.
    """
    uv = np.asarray(uv)
    uz = np.asarray(uz)
    if uv.shape != uz.shape or uv.ndim != 3:
        raise GeometryError(f"expected two J x H x W stacks, got {uv.shape} and {uz.shape}")
    J, H, W = uv.shape
    if (H, W) != (cfg.hm_height, cfg.hm_width):
        raise GeometryError(f"heatmap size {H}x{W} does not match config "
                            f"{cfg.hm_height}x{cfg.hm_width}")
    joints = np.full((J, 3), np.nan)
    ok = np.zeros(J, dtype=bool)
    for j in range(J):
        if uv[j].max() < cfg.peak_threshold or uz[j].max() < cfg.peak_threshold:
            continue
        v_star, u_star = _argmax_2d(uv[j])
        lo, hi = max(u_star - window, 0), min(u_star + window, W - 1)
        band = uz[j][:, lo:hi + 1]
        if band.max() >= cfg.peak_threshold:
            z_row, _ = _argmax_2d(band)
        else:
            z_row, _ = _argmax_2d(uz[j])
        Z = cfg.z_min + z_row * cfg.delta_z
        if not Z > 0:
            continue
        joints[j] = backproject_pixel(K, u_star, v_star, Z)
        ok[j] = True
    names = tuple(joint_names) if joint_names is not None else JOINT_NAMES[:J]
    if len(names) != J:
        names = tuple(f"joint_{i}" for i in range(J))
    return Skeleton3D(joints, ok, ok.copy(), names)


def pixel_error_cm(K: CameraIntrinsics, z: float, offset_px: float = 0.5) -> float:
    """Metric error of backprojecting with an ``offset_px`` error on both axes at depth ``z``."""
    return offset_px * z * math.hypot(1.0 / K.fx, 1.0 / K.fy)


def quantization_bound(K: CameraIntrinsics, cfg: SPDHConfig) -> float:
    """Ceiling on the codec round-trip MPJPE for fully visible skeletons."""
    half = cfg.delta_z / 2
    e_px = pixel_error_cm(K, cfg.z_max)
    return math.sqrt(half ** 2 + e_px ** 2) + half


def default_intrinsics(size: int = 256) -> CameraIntrinsics:
    """Square camera with roughly a 48 degree field of view."""
    f = 1.125 * size
    return CameraIntrinsics(f, f, size / 2, size / 2, size, size)
