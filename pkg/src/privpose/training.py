"""Two-stage training: depth pretraining, then RGB training against a frozen depth teacher."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import (
    AugmentParams,
    DatasetManifest,
    augment_sample,
    normalize_depth,
    normalize_rgb,
    resize_sample,
    sample_rng,
)
from .geometry import SPDHConfig, encode_spdh
from .losses import LossWeights, hallucination_loss, pose_loss, total_loss
from .model import (
    BackboneConfig,
    Checkpoint,
    ConfigError,
    PoseNet,
    assemble_model,
    head_config_for,
    state_digest,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "l_pi", "l_pe", "l_total")


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 30
    lr: float = 1e-3
    decay_milestones: tuple = (0.5, 0.75)
    decay_factor: float = 0.1
    batch_size: int = 16
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    input_size: int = 256
    variant: str = "full"
    augment: bool = True
    deterministic: bool = True
    head_width: int = 32
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    spdh: SPDHConfig = field(default_factory=SPDHConfig)
    dataset: str = ""
    split: str = "train"
    out_dir: str = "runs/train"
    keep_checkpoints: int = 2

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.spdh, dict):
            self.spdh = SPDHConfig(**self.spdh)
        self.decay_milestones = tuple(self.decay_milestones)
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        ms = self.decay_milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"decay milestones must be strictly increasing in (0, 1): {ms}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 32")
        # heatmaps live at full network-input resolution
        if (self.spdh.hm_width, self.spdh.hm_height) != (self.input_size, self.input_size):
            self.spdh = replace(self.spdh, hm_width=self.input_size, hm_height=self.input_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_milestones"] = list(self.decay_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# keys that must agree between a checkpoint and the config used to resume it
RESUME_KEYS = ("stage", "epochs", "lr", "decay_milestones", "decay_factor", "batch_size", "seed",
               "loss_weights", "input_size", "variant", "augment", "head_width", "backbone",
               "spdh", "split")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    milestones = [math.floor(m * cfg.epochs) for m in cfg.decay_milestones]
    k = sum(1 for m in milestones if m <= epoch)
    return cfg.lr * cfg.decay_factor ** k


def set_deterministic(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(enabled)


# -- batches -------------------------------------------------------------------

class SampleCache:
    """Samples resized to network resolution, loaded once."""

    def __init__(self, manifest: DatasetManifest, input_size: int):
        self.manifest = manifest
        self.input_size = input_size
        self._cache = {}

    def __getitem__(self, sample_id):
        if sample_id not in self._cache:
            s = self.manifest.load(sample_id)
            self._cache[sample_id] = resize_sample(s, self.input_size, self.input_size)
        return self._cache[sample_id]


def make_batch(cache: SampleCache, ids, epoch: int, cfg: TrainConfig, augment: bool,
               stage: int) -> dict:
    rgb, depth, uv, uz, m_uv, m_uz = [], [], [], [], [], []
    need_depth = stage == 1 or (cfg.variant != "rgb_only")
    for sid in ids:
        s = cache[sid]
        if augment:
            p = AugmentParams.sample(sample_rng(cfg.seed, sid, epoch), stage)
            s, target = augment_sample(s, p, cfg.spdh, stage=stage)
        else:
            target = encode_spdh(s.skeleton, s.intrinsics, cfg.spdh)
        rgb.append(normalize_rgb(s.rgb))
        if need_depth:
            if s.depth is None:
                raise ConfigError(f"sample {sid} has no depth map")
            depth.append(normalize_depth(s.depth, cfg.spdh))
        uv.append(target.uv)
        uz.append(target.uz)
        m_uv.append(target.mask_uv)
        m_uz.append(target.mask_uz)
    batch = {
        "rgb": torch.from_numpy(np.stack(rgb)),
        "uv": torch.from_numpy(np.stack(uv)),
        "uz": torch.from_numpy(np.stack(uz)),
        "mask_uv": torch.from_numpy(np.stack(m_uv)),
        "mask_uz": torch.from_numpy(np.stack(m_uz)),
    }
    batch["depth"] = torch.from_numpy(np.stack(depth)) if depth else None
    return batch


def compute_losses(model: PoseNet, batch: dict, w: LossWeights):
    out = model(rgb=batch["rgb"], depth=batch["depth"])
    l_pe = pose_loss(out["uv"], out["uz"], batch["uv"], batch["uz"],
                     batch["mask_uv"], batch["mask_uz"])
    if "f_hall" in out and "f_depth" in out:
        l_pi = hallucination_loss(out["f_depth"], out["f_hall"])
    else:
        l_pi = torch.zeros((), dtype=l_pe.dtype)
    return l_pi, l_pe, total_loss(l_pi, l_pe, w), out


# -- the loop ------------------------------------------------------------------

def _checkpoint(model: PoseNet, optimizer, epoch: int, cfg: TrainConfig,
                teacher_digest: str) -> Checkpoint:
    return Checkpoint(
        stage=model.stage, variant=cfg.variant if model.stage == 2 else "full", epoch=epoch,
        backbone=model.backbone_cfg, head=model.head.cfg, spdh=cfg.spdh,
        weights={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer=optimizer.state_dict(), config=cfg.to_dict(), digest=state_digest(model),
        teacher_digest=teacher_digest,
    )


def _check_depth(manifest: DatasetManifest):
    missing = [sid for sid in manifest.sample_ids if not manifest.has_depth(sid)]
    if missing:
        raise ConfigError(f"samples without depth: {', '.join(missing)}")


def _fit(model: PoseNet, manifest: DatasetManifest, cfg: TrainConfig, start_epoch: int,
         opt_state: Optional[dict], teacher_digest: str) -> Checkpoint:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)
    cache = SampleCache(manifest, cfg.input_size)
    ids = list(manifest.sample_ids)
    steps_per_epoch = math.ceil(len(ids) / cfg.batch_size)
    log_path = out_dir / "losses.csv"
    new_log = start_epoch == 0 or not log_path.exists()
    ckpt = _checkpoint(model, optimizer, start_epoch, cfg, teacher_digest)
    with open(log_path, "w" if new_log else "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new_log:
            writer.writerow(LOSS_COLUMNS)
        epoch = start_epoch
        try:
            for epoch in range(start_epoch, cfg.epochs):
                for group in optimizer.param_groups:
                    group["lr"] = lr_at(epoch, cfg)
                order = np.random.default_rng([cfg.seed, epoch]).permutation(len(ids))
                model.train()
                for b in range(steps_per_epoch):
                    batch_ids = [ids[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                    batch = make_batch(cache, batch_ids, epoch, cfg, cfg.augment, model.stage)
                    l_pi, l_pe, loss, _ = compute_losses(model, batch, cfg.loss_weights)
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    writer.writerow([epoch * steps_per_epoch + b, epoch, f"{l_pi.item():.10g}",
                                     f"{l_pe.item():.10g}", f"{loss.item():.10g}"])
                fh.flush()
                if model.teacher_frozen and state_digest(model.depth_net) != teacher_digest:
                    raise RuntimeError(f"frozen depth backbone changed during epoch {epoch}")
                ckpt = _checkpoint(model, optimizer, epoch + 1, cfg, teacher_digest)
                ckpt.save(out_dir / f"epoch_{epoch + 1:03d}.pt")
                ckpt.save(out_dir / "last.pt")
                stale = out_dir / f"epoch_{epoch + 1 - cfg.keep_checkpoints:03d}.pt"
                if cfg.keep_checkpoints > 0 and stale.exists():
                    stale.unlink()
                log.info("stage %d epoch %d/%d loss %.6g", model.stage, epoch + 1, cfg.epochs,
                         loss.item())
        except KeyboardInterrupt:
            _checkpoint(model, optimizer, epoch, cfg, teacher_digest).save(out_dir / "interrupted.pt")
            raise
    return ckpt


def train_stage1(manifest: DatasetManifest, cfg: TrainConfig) -> Checkpoint:
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs cfg.stage == 1")
    _check_depth(manifest)
    set_deterministic(cfg.seed, cfg.deterministic)
    head_cfg = head_config_for(1, cfg.backbone, len(manifest.joint_names), cfg.head_width)
    model = assemble_model(1, cfg.backbone, head_cfg)
    return _fit(model, manifest, cfg, 0, None, "")


def train_stage2(manifest: DatasetManifest, depth_ckpt: Optional[Checkpoint],
                 cfg: TrainConfig) -> Checkpoint:
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs cfg.stage == 2")
    if cfg.variant != "rgb_only":
        if depth_ckpt is None:
            raise ConfigError("stage 2 requires a stage-1 depth checkpoint")
        if depth_ckpt.stage != 1:
            raise ConfigError(f"depth checkpoint has stage {depth_ckpt.stage}, expected 1")
        if depth_ckpt.spdh != cfg.spdh:
            raise ConfigError(f"depth checkpoint SPDH config {depth_ckpt.spdh} differs from "
                              f"{cfg.spdh}")
        _check_depth(manifest)
    set_deterministic(cfg.seed, cfg.deterministic)
    head_cfg = head_config_for(2, cfg.backbone, len(manifest.joint_names), cfg.head_width,
                               cfg.variant)
    model = assemble_model(2, cfg.backbone, head_cfg, depth_ckpt, cfg.variant)
    teacher = state_digest(model.depth_net) if model.teacher_frozen else ""
    return _fit(model, manifest, cfg, 0, None, teacher)


def config_differences(a: dict, b: dict, keys=RESUME_KEYS) -> list[str]:
    return [k for k in keys if a.get(k) != b.get(k)]


def resume(ckpt: Checkpoint, manifest: DatasetManifest, cfg: TrainConfig) -> Checkpoint:
    """Continue training from ``ckpt`` to ``cfg.epochs``."""
    diff = config_differences(ckpt.config, cfg.to_dict())
    if diff:
        raise ConfigError("checkpoint config differs in: " + ", ".join(diff))
    if ckpt.epoch >= cfg.epochs:
        return ckpt
    set_deterministic(cfg.seed, cfg.deterministic)
    model = ckpt.build_model()
    return _fit(model, manifest, cfg, ckpt.epoch, ckpt.optimizer, ckpt.teacher_digest)
