"""Dataset ingestion, label-synchronised augmentation and network preprocessing.

On-disk layout::

    root/calib.json                 intrinsics shared by every sample
    root/samples/<id>/rgb.png       8-bit RGB
    root/samples/<id>/depth.png     16-bit depth in millimetres (0 = invalid)
    root/samples/<id>/pose.json     skeleton, cm, camera frame
    root/splits/<name>.txt          one sample id per line
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import cv2
import numpy as np
from PIL import Image

from .geometry import (
    JOINT_NAMES,
    CameraIntrinsics,
    Skeleton3D,
    SPDHConfig,
    SPDHTarget,
    backproject_pixels,
    compute_visibility,
    encode_spdh,
    project_points,
    save_json,
    scale_intrinsics,
)

RGB_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
RGB_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class DatasetError(RuntimeError):
    pass


@dataclass
class FrameSample:
    rgb: np.ndarray
    depth: Optional[np.ndarray]
    skeleton: Skeleton3D
    intrinsics_rgb: CameraIntrinsics
    intrinsics_depth: CameraIntrinsics
    sample_id: str = ""

    @property
    def intrinsics(self) -> CameraIntrinsics:
        # streams are registered to a single camera frame
        return self.intrinsics_depth


@dataclass
class DatasetManifest:
    root: Path
    split: str
    sample_ids: list
    intrinsics: CameraIntrinsics
    joint_names: tuple = JOINT_NAMES
    spdh: SPDHConfig = field(default_factory=SPDHConfig)

    def __len__(self):
        return len(self.sample_ids)

    def load(self, sample_id: str) -> FrameSample:
        return load_sample(self.root, sample_id, self.intrinsics)

    def __iter__(self) -> Iterator[FrameSample]:
        for sid in self.sample_ids:
            yield self.load(sid)

    def has_depth(self, sample_id: str) -> bool:
        return (self.root / "samples" / sample_id / "depth.png").is_file()


# -- disk I/O ------------------------------------------------------------------

def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc


def write_depth_png(depth_cm: np.ndarray, path: Path) -> None:
    mm = np.clip(np.round(np.nan_to_num(depth_cm) * 10.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png(path: Path) -> np.ndarray:
    mm = np.array(Image.open(path)).astype(np.float64)
    return mm / 10.0


def write_sample(root: str | Path, sample: FrameSample) -> None:
    d = Path(root) / "samples" / sample.sample_id
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(sample.rgb, dtype=np.uint8), mode="RGB").save(d / "rgb.png")
    if sample.depth is not None:
        write_depth_png(sample.depth, d / "depth.png")
    save_json(sample.skeleton.to_dict(), d / "pose.json")


def load_sample(root: str | Path, sample_id: str, K: CameraIntrinsics) -> FrameSample:
    d = Path(root) / "samples" / sample_id
    rgb = np.array(Image.open(d / "rgb.png").convert("RGB"))
    depth_path = d / "depth.png"
    depth = read_depth_png(depth_path) if depth_path.is_file() else None
    skel = Skeleton3D.from_dict(_read_json(d / "pose.json"))
    return FrameSample(rgb, depth, skel, K, K, sample_id)


def load_dataset(root: str | Path, split: str, spdh: Optional[SPDHConfig] = None) -> DatasetManifest:
    root = Path(root)
    calib = root / "calib.json"
    split_file = root / "splits" / f"{split}.txt"
    for required in (calib, root / "samples", split_file):
        if not required.exists():
            raise DatasetError(f"missing {required}")
    K = CameraIntrinsics.from_dict(_read_json(calib))
    ids = sorted({line.strip() for line in split_file.read_text().splitlines() if line.strip()})
    if not ids:
        warnings.warn(f"split {split!r} in {root} is empty", stacklevel=2)
    missing = [sid for sid in ids
               if not ((root / "samples" / sid / "rgb.png").is_file()
                       and (root / "samples" / sid / "pose.json").is_file())]
    if missing:
        raise DatasetError(f"split {split!r} lists {len(missing)} missing samples: "
                           + ", ".join(missing))
    names = JOINT_NAMES
    if ids:
        names = tuple(_read_json(root / "samples" / ids[0] / "pose.json").get("joint_names", names))
    return DatasetManifest(root, split, ids, K, names, spdh or SPDHConfig())


# -- augmentation --------------------------------------------------------------

ROT_RANGE_DEG = 5.0
TX_MAX_FRAC = 0.15
TY_MAX_FRAC = 0.02
Z_JITTER_MAX_CM = 30.0


@dataclass(frozen=True)
class AugmentParams:
    rot_deg: float = 0.0
    tx_frac: float = 0.0
    ty_frac: float = 0.0
    hflip: bool = False
    z_jitter_cm: float = 0.0

    def __post_init__(self):
        tol = 1e-12
        if abs(self.rot_deg) > ROT_RANGE_DEG + tol:
            raise ValueError(f"rotation {self.rot_deg} outside [-5, 5] degrees")
        if abs(self.tx_frac) > TX_MAX_FRAC + tol:
            raise ValueError(f"horizontal shift {self.tx_frac} exceeds 15% of the width")
        if abs(self.ty_frac) > TY_MAX_FRAC + tol:
            raise ValueError(f"vertical shift {self.ty_frac} exceeds 2% of the height")
        if abs(self.z_jitter_cm) > Z_JITTER_MAX_CM + tol:
            raise ValueError(f"depth shift {self.z_jitter_cm} outside [-30, 30] cm")

    @property
    def is_identity(self) -> bool:
        return (self.rot_deg == 0 and self.tx_frac == 0 and self.ty_frac == 0
                and not self.hflip and self.z_jitter_cm == 0)

    @classmethod
    def sample(cls, rng: np.random.Generator, stage: int) -> "AugmentParams":
        return cls(
            rot_deg=float(rng.uniform(-ROT_RANGE_DEG, ROT_RANGE_DEG)),
            tx_frac=float(rng.uniform(-TX_MAX_FRAC, TX_MAX_FRAC)),
            ty_frac=float(rng.uniform(-TY_MAX_FRAC, TY_MAX_FRAC)),
            hflip=bool(rng.random() < 0.5),
            z_jitter_cm=float(rng.uniform(-Z_JITTER_MAX_CM, Z_JITTER_MAX_CM)) if stage == 1 else 0.0,
        )


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Independent random stream per (seed, sample, epoch), stable across worker layouts."""
    key = int.from_bytes(hashlib.sha256(sample_id.encode()).digest()[:8], "little")
    return np.random.default_rng([seed, key, epoch])


def flip_permutation(joint_names) -> np.ndarray:
    idx = {n: i for i, n in enumerate(joint_names)}
    perm = np.arange(len(joint_names))
    for i, n in enumerate(joint_names):
        for a, b in (("left_", "right_"), ("right_", "left_")):
            if n.startswith(a) and b + n[len(a):] in idx:
                perm[i] = idx[b + n[len(a):]]
    return perm


def _affine(p: AugmentParams, W: int, H: int) -> np.ndarray:
    """2x3 pixel map: rotate about the image centre, then shift."""
    c = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    a = math.radians(p.rot_deg)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    t = c - R @ c + np.array([p.tx_frac * W, p.ty_frac * H])
    return np.hstack([R, t[:, None]])


def transform_pixels(uv: np.ndarray, p: AugmentParams, W: int, H: int) -> np.ndarray:
    """Apply the geometric part of ``p`` to pixel coordinates (flip last)."""
    A = _affine(p, W, H)
    out = uv @ A[:, :2].T + A[:, 2]
    if p.hflip:
        out[:, 0] = (W - 1) - out[:, 0]
    return out


def _warp(img: np.ndarray, p: AugmentParams, interp: int) -> np.ndarray:
    H, W = img.shape[:2]
    if p.rot_deg != 0 or p.tx_frac != 0 or p.ty_frac != 0:
        img = cv2.warpAffine(img, _affine(p, W, H), (W, H), flags=interp,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if p.hflip:
        img = np.ascontiguousarray(img[:, ::-1])
    return img


def augment_sample(s: FrameSample, p: AugmentParams, spdh: SPDHConfig,
                   stage: int = 1) -> tuple[FrameSample, SPDHTarget]:
    """Apply ``p`` to a sample already at network resolution and regenerate its targets.

    Images are warped; joints are moved analytically in pixel space, lifted
    back to 3D at their original depth and re-encoded. Flipping also swaps
    left/right joint identities. A non-zero ``z_jitter_cm`` is applied last.
    """
    K = s.intrinsics
    W, H = K.width, K.height
    if (spdh.hm_width, spdh.hm_height) != (W, H):
        raise ValueError(f"heatmaps ({spdh.hm_width}x{spdh.hm_height}) must match the "
                         f"network input ({W}x{H})")
    geom = replace(p, z_jitter_cm=0.0)
    if geom.is_identity:
        out = s
    else:
        rgb = _warp(s.rgb, geom, cv2.INTER_LINEAR)
        depth = None if s.depth is None else _warp(s.depth, geom, cv2.INTER_NEAREST)
        joints = s.skeleton.joints.copy()
        front = joints[:, 2] > 0
        uv = project_points(K, joints[front])
        joints[front] = backproject_pixels(K, transform_pixels(uv, geom, W, H), joints[front, 2])
        if geom.hflip:
            joints = joints[flip_permutation(s.skeleton.joint_names)]
        skel = Skeleton3D(joints, np.zeros(len(joints), bool), np.zeros(len(joints), bool),
                          s.skeleton.joint_names)
        skel.mask_uv, skel.mask_uz = compute_visibility(skel, K, spdh)
        out = FrameSample(rgb, depth, skel, s.intrinsics_rgb, s.intrinsics_depth, s.sample_id)
    target = encode_spdh(out.skeleton, K, spdh)
    if p.z_jitter_cm != 0:
        out, target = z_jitter(out, target, p.z_jitter_cm, spdh, stage=stage)
    return out, target


def z_jitter(s: FrameSample, target: SPDHTarget, delta_cm: float, spdh: SPDHConfig,
             stage: int = 1) -> tuple[FrameSample, SPDHTarget]:
    """Shift every valid depth pixel and the skeleton by ``delta_cm`` along the viewing rays.

    Joints keep their pixel positions, so the uv targets are left untouched and
    only the uz targets are re-encoded.
    """
    if stage != 1:
        raise ValueError("depth jitter is a stage-1 augmentation only")
    if abs(delta_cm) > Z_JITTER_MAX_CM:
        raise ValueError(f"depth shift {delta_cm} outside [-30, 30] cm")
    if delta_cm == 0:
        return s, target
    depth = None
    if s.depth is not None:
        depth = np.where(s.depth > 0, np.maximum(s.depth + delta_cm, 0.0), 0.0).astype(s.depth.dtype)
    joints = s.skeleton.joints.copy()
    front = joints[:, 2] > 0
    z_new = joints[front, 2] + delta_cm
    joints[front, :2] *= (z_new / joints[front, 2])[:, None]
    joints[front, 2] = z_new
    skel = Skeleton3D(joints, np.zeros(len(joints), bool), np.zeros(len(joints), bool),
                      s.skeleton.joint_names)
    _, skel.mask_uz = compute_visibility(skel, s.intrinsics, spdh)
    skel.mask_uv = target.mask_uv.copy()
    re = encode_spdh(skel, s.intrinsics, spdh)
    new_target = SPDHTarget(target.uv, re.uz, target.mask_uv.copy(), re.mask_uz)
    return FrameSample(s.rgb, depth, skel, s.intrinsics_rgb, s.intrinsics_depth,
                       s.sample_id), new_target


# -- preprocessing -------------------------------------------------------------

def resize_sample(s: FrameSample, width: int, height: int) -> FrameSample:
    """Resample images so that pixel ``u`` maps to ``u * width / W``, matching scale_intrinsics."""
    K = s.intrinsics
    if (K.width, K.height) == (width, height):
        return s
    sx, sy = width / K.width, height / K.height
    A = np.array([[sx, 0, 0], [0, sy, 0]], dtype=np.float64)
    rgb = s.rgb
    if sx < 1 or sy < 1:
        rgb = cv2.GaussianBlur(rgb, (0, 0), sigmaX=max(0.5 / sx - 0.5, 0.1),
                               sigmaY=max(0.5 / sy - 0.5, 0.1))
    rgb = cv2.warpAffine(rgb, A, (width, height), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_REPLICATE)
    depth = None
    if s.depth is not None:
        depth = cv2.warpAffine(s.depth.astype(np.float32), A, (width, height),
                               flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_REPLICATE)
        depth = depth.astype(np.float64)
    Kr = scale_intrinsics(s.intrinsics_rgb, sx, sy)
    Kd = scale_intrinsics(s.intrinsics_depth, sx, sy)
    return FrameSample(rgb, depth, s.skeleton, Kr, Kd, s.sample_id)


def normalize_rgb(rgb: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 -> 3 x H x W float32, standardised with fixed constants."""
    x = rgb.astype(np.float32) / 255.0
    x = (x - RGB_MEAN) / RGB_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def normalize_depth(depth_cm: np.ndarray, spdh: SPDHConfig) -> np.ndarray:
    """Depth in cm -> 1 x H x W float32 in [0, 1]; invalid (0) pixels stay 0."""
    d = np.asarray(depth_cm, dtype=np.float64)
    x = np.clip((d - spdh.z_min) / (spdh.z_max - spdh.z_min), 0.0, 1.0)
    x = np.where(d > 0, x, 0.0)
    return x[None].astype(np.float32)


@dataclass
class NetworkInput:
    rgb: np.ndarray
    depth: Optional[np.ndarray]
    intrinsics: CameraIntrinsics


def preprocess(s: FrameSample, input_size: int, spdh: SPDHConfig) -> NetworkInput:
    r = resize_sample(s, input_size, input_size)
    depth = None if r.depth is None else normalize_depth(r.depth, spdh)
    return NetworkInput(normalize_rgb(r.rgb), depth, r.intrinsics)
