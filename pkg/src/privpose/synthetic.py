"""Deterministic synthetic RGB-D frames of an articulated capsule figure.

Each sample is a 14-joint stick figure with bounded random joint angles,
dressed with capsules of random radius, placed 150-450 cm in front of a
registered RGB-D camera. Depth is ray-cast into a z-buffer; RGB is a
Lambert-shaded view of the same capsules over a procedural background.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import FrameSample, write_sample
from .geometry import (
    JOINT_NAMES,
    CameraIntrinsics,
    Skeleton3D,
    SPDHConfig,
    compute_visibility,
    save_json,
)

J = {n: i for i, n in enumerate(JOINT_NAMES)}

# (joint a, joint b or None for the pelvis centre, nominal radius cm, part)
CAPSULES = (
    ("head", "neck", 8.0, "head"),
    ("neck", None, 11.0, "shirt"),
    ("right_shoulder", "left_shoulder", 5.5, "shirt"),
    ("right_shoulder", "right_hip", 6.0, "shirt"),
    ("left_shoulder", "left_hip", 6.0, "shirt"),
    ("right_hip", "left_hip", 7.0, "pants"),
    ("right_shoulder", "right_elbow", 4.5, "shirt"),
    ("right_elbow", "right_wrist", 4.0, "skin"),
    ("left_shoulder", "left_elbow", 4.5, "shirt"),
    ("left_elbow", "left_wrist", 4.0, "skin"),
    ("right_hip", "right_knee", 7.0, "pants"),
    ("right_knee", "right_ankle", 5.0, "pants"),
    ("left_hip", "left_knee", 7.0, "pants"),
    ("left_knee", "left_ankle", 5.0, "pants"),
)


@dataclass(frozen=True)
class SyntheticConfig:
    width: int = 128
    height: int = 128
    focal_scale: float = 1.125
    root_z_min: float = 150.0
    root_z_max: float = 450.0
    z_min: float = 0.0
    z_max: float = 500.0
    wall_z_min: float = 520.0
    wall_z_max: float = 700.0
    invalid_fraction: float = 0.005

    @property
    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal_scale * self.width
        return CameraIntrinsics(f, f * 1.0, self.width / 2, self.height / 2,
                                self.width, self.height)

    @property
    def spdh(self) -> SPDHConfig:
        return SPDHConfig(hm_width=self.width, hm_height=self.height,
                          z_min=self.z_min, z_max=self.z_max)


def _unit(v):
    return v / np.linalg.norm(v)


def _cone(rng, axis, max_deg):
    """Random unit vector within ``max_deg`` of ``axis``."""
    axis = _unit(np.asarray(axis, float))
    helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = _unit(np.cross(axis, helper))
    e2 = np.cross(axis, e1)
    theta = math.radians(max_deg) * math.sqrt(rng.random())
    phi = rng.uniform(0, 2 * math.pi)
    return math.cos(theta) * axis + math.sin(theta) * (math.cos(phi) * e1 + math.sin(phi) * e2)


def random_pose(rng: np.random.Generator) -> np.ndarray:
    """Joints in a body frame: x = subject's left, y = up, z = subject's forward (cm)."""
    s = rng.uniform(0.9, 1.1)
    p = np.zeros((14, 3))
    pelvis = np.zeros(3)
    spine = _cone(rng, [0, 1, 0.1], 20)
    neck = pelvis + 52 * s * spine
    p[J["neck"]] = neck
    p[J["head"]] = neck + 22 * s * _cone(rng, spine, 25)
    lateral = _unit(np.cross(spine, [0, 0, 1.0]) * -1)
    for side, sign in (("left", 1.0), ("right", -1.0)):
        shoulder = neck + sign * 17 * s * lateral - 3 * s * spine
        hip = pelvis + sign * 9.5 * s * np.array([1.0, 0, 0])
        p[J[f"{side}_shoulder"]] = shoulder
        p[J[f"{side}_hip"]] = hip
        upper = _cone(rng, [0.45 * sign, -0.7, 0.35], 70)
        elbow = shoulder + 28 * s * upper
        fore = _cone(rng, upper + np.array([0, 0.3, 0.5]), 65)
        p[J[f"{side}_elbow"]] = elbow
        p[J[f"{side}_wrist"]] = elbow + 25 * s * fore
        thigh = _cone(rng, [0.12 * sign, -1, 0.2], 30)
        knee = hip + 43 * s * thigh
        shin = _cone(rng, [0.05 * sign, -1, -0.25], 25)
        p[J[f"{side}_knee"]] = knee
        p[J[f"{side}_ankle"]] = knee + 41 * s * shin
    return p


def place_pose(body: np.ndarray, rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    """Rotate the figure to face the camera (+-45 deg yaw) and position it in view."""
    yaw = math.radians(rng.uniform(-45, 45))
    c, s_ = math.cos(yaw), math.sin(yaw)
    # body -> camera axes: facing the camera, up is -Y, forward is -Z
    to_cam = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])
    R = np.array([[c, 0, s_], [0, 1.0, 0], [-s_, 0, c]]) @ to_cam
    K = cfg.intrinsics
    Z = rng.uniform(cfg.root_z_min, cfg.root_z_max)
    u = rng.uniform(0.35, 0.65) * cfg.width
    v = rng.uniform(0.45, 0.6) * cfg.height
    root = np.array([(u - K.cx) * Z / K.fx, (v - K.cy) * Z / K.fy, Z])
    return body @ R.T + root


def capsule_segments(joints: np.ndarray, radii_scale: np.ndarray):
    pelvis = 0.5 * (joints[J["left_hip"]] + joints[J["right_hip"]])
    segs = []
    for k, (a, b, r, part) in enumerate(CAPSULES):
        pa = joints[J[a]]
        pb = pelvis if b is None else joints[J[b]]
        segs.append((pa, pb, r * radii_scale[k], part))
    return segs


def ray_directions(K: CameraIntrinsics) -> np.ndarray:
    """Unit viewing ray through every pixel centre, H x W x 3."""
    u, v = np.meshgrid(np.arange(K.width, dtype=np.float64),
                       np.arange(K.height, dtype=np.float64))
    d = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def intersect_capsule(rd: np.ndarray, a: np.ndarray, b: np.ndarray, r: float):
    """Nearest ray-capsule hit for rays from the origin.

    Returns (t, normal) with t = inf where the ray misses.
    """
    ba = b - a
    oa = -a
    baba = ba @ ba
    bard = rd @ ba
    baoa = ba @ oa
    rdoa = rd @ oa
    oaoa = oa @ oa
    t = np.full(rd.shape[:-1], np.inf)
    if baba > 0:
        k2 = baba - bard * bard
        k1 = baba * rdoa - baoa * bard
        k0 = baba * oaoa - baoa * baoa - r * r * baba
        h = k1 * k1 - k2 * k0
        with np.errstate(invalid="ignore", divide="ignore"):
            tc = (-k1 - np.sqrt(h)) / k2
            y = baoa + tc * bard
            body = (h >= 0) & (k2 > 1e-12) & (y > 0) & (y < baba) & (tc > 0)
        t = np.where(body, tc, t)
    for cap in (a, b):
        oc = -cap
        bb = rd @ oc
        cc = oc @ oc - r * r
        h = bb * bb - cc
        with np.errstate(invalid="ignore"):
            ts = -bb - np.sqrt(h)
        hit = (h >= 0) & (ts > 0) & (ts < t)
        t = np.where(hit, ts, t)
    # normal from the closest point on the axis, valid for body and caps alike
    with np.errstate(invalid="ignore"):
        pos = rd * t[..., None]
        w = np.clip(((pos - a) @ ba) / baba, 0.0, 1.0) if baba > 0 else np.zeros(t.shape)
        normal = (pos - (a + w[..., None] * ba)) / r
    return t, normal


def render_depth(K: CameraIntrinsics, segments, background: float = 0.0):
    """Z-buffer of capsule hits: (depth cm, normal H x W x 3, segment index or -1)."""
    rd = ray_directions(K)
    zbuf = np.full(rd.shape[:-1], np.inf)
    normals = np.zeros(rd.shape)
    seg_id = np.full(rd.shape[:-1], -1, dtype=np.int64)
    for k, (a, b, r, _) in enumerate(segments):
        t, n = intersect_capsule(rd, a, b, r)
        z = t * rd[..., 2]
        closer = z < zbuf
        zbuf = np.where(closer, z, zbuf)
        normals = np.where(closer[..., None], n, normals)
        seg_id = np.where(closer, k, seg_id)
    depth = np.where(np.isfinite(zbuf), zbuf, background)
    return depth, normals, seg_id


def _background(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    img = np.zeros((H, W, 3))
    base = rng.uniform(0.2, 0.8, size=3)
    img += base
    for _ in range(4):
        f = rng.uniform(2, 12, size=2)
        ph = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.05, 0.2, size=3)
        img += amp * np.sin(2 * math.pi * (f[0] * xx + f[1] * yy) + ph)[..., None]
    checker = ((np.floor(xx * rng.integers(4, 12)) + np.floor(yy * rng.integers(4, 12))) % 2)
    img += rng.uniform(-0.1, 0.1, size=3) * checker[..., None]
    return img


def random_scene(rng: np.random.Generator, cfg: SyntheticConfig):
    """Joints (cm), capsule list and back-wall depth of one random frame."""
    joints = place_pose(random_pose(rng), rng, cfg)
    radii = rng.uniform(0.85, 1.15, size=len(CAPSULES))
    wall = rng.uniform(cfg.wall_z_min, cfg.wall_z_max)
    return joints, capsule_segments(joints, radii), wall


def render_sample(rng: np.random.Generator, cfg: SyntheticConfig, sample_id: str) -> FrameSample:
    K = cfg.intrinsics
    joints, segments, wall = random_scene(rng, cfg)
    depth, normals, seg_id = render_depth(K, segments, background=wall)

    colors = {"skin": rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6]),
              "head": None, "shirt": rng.uniform(0.05, 0.95, size=3),
              "pants": rng.uniform(0.05, 0.6, size=3)}
    colors["head"] = colors["skin"]
    light = _unit(np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.8, -0.2), -1.0]))
    shade = 0.25 + 0.75 * np.clip(normals @ light, 0.0, 1.0)
    albedo = np.zeros(depth.shape + (3,))
    for k, seg in enumerate(segments):
        albedo[seg_id == k] = colors[seg[3]]
    person = seg_id >= 0
    img = _background(rng, cfg.height, cfg.width)
    img[person] = albedo[person] * shade[person][:, None]
    img += rng.normal(0, 0.02, size=img.shape)
    rgb = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)

    depth = np.round(depth * 10.0) / 10.0  # millimetre grid, lossless in 16-bit PNG
    dropout = rng.random(depth.shape) < cfg.invalid_fraction
    depth[dropout] = 0.0

    skel = Skeleton3D(joints, np.zeros(14, bool), np.zeros(14, bool), JOINT_NAMES)
    skel.mask_uv, skel.mask_uz = compute_visibility(skel, K, cfg.spdh)
    return FrameSample(rgb, depth, skel, K, K, sample_id)


def sample_ids(n: int) -> list[str]:
    return [f"{i:06d}" for i in range(n)]


def generate_synthetic(root: str | Path, n: int, seed: int = 0,
                       cfg: SyntheticConfig = SyntheticConfig(),
                       splits: dict[str, int] | None = None) -> Path:
    """Write ``n`` synthetic samples under ``root``.

    ``splits`` maps split names to sample counts, taken in id order; an
    ``all`` split is always written.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(parents=True, exist_ok=True)
    save_json(cfg.intrinsics.to_dict(), root / "calib.json")
    save_json({"seed": seed, "n": n, **asdict(cfg)}, root / "synthetic.json")
    ids = sample_ids(n)
    for i, sid in enumerate(ids):
        rng = np.random.default_rng([seed, i])
        write_sample(root, render_sample(rng, cfg, sid))
    layout = {"all": n, **(splits or {})}
    start = 0
    for name, count in layout.items():
        chunk = ids if name == "all" else ids[start:start + count]
        if name != "all":
            start += count
        (root / "splits" / f"{name}.txt").write_text("".join(f"{s}\n" for s in chunk))
    return root
