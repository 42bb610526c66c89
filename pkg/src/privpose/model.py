"""Multi-resolution backbone, dual-branch SPDH head and the two-stage composite model."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import SPDHConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    base_width: int = 16
    num_stages: int = 3
    out_channels: int = 64
    in_channels: int = 3
    stem_width: int = 64
    blocks_per_branch: int = 7

    def __post_init__(self):
        if self.base_width < 4:
            raise ConfigError(f"base_width must be >= 4, got {self.base_width}")
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if self.out_channels < 8:
            raise ConfigError("out_channels must be >= 8")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 (depth) or 3 (RGB), got {self.in_channels}")


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int = 128
    num_joints: int = 14
    width: int = 32
    resolutions: tuple = (0.25, 0.5, 1.0)

    def __post_init__(self):
        if tuple(self.resolutions) != (0.25, 0.5, 1.0):
            raise ConfigError("the head uses the fixed resolution ladder (1/4, 1/2, 1)")


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(conv3x3(cin, cout, stride), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class BasicBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = conv3x3(width, width)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = conv3x3(width, width)
        self.bn2 = nn.BatchNorm2d(width)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class FusionStage(nn.Module):
    """Parallel residual branches followed by all-to-all cross-resolution fusion."""

    def __init__(self, widths, num_blocks):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(*[BasicBlock(w) for _ in range(num_blocks)]) for w in widths
        )
        n = len(widths)
        self.fuse = nn.ModuleList()
        for i in range(n):
            row = nn.ModuleList()
            for j in range(n):
                if j == i:
                    row.append(nn.Identity())
                elif j > i:
                    row.append(nn.Sequential(nn.Conv2d(widths[j], widths[i], 1, bias=False),
                                             nn.BatchNorm2d(widths[i])))
                else:
                    steps = []
                    for k in range(i - j):
                        last = k == i - j - 1
                        cout = widths[i] if last else widths[j]
                        steps += [conv3x3(widths[j], cout, stride=2), nn.BatchNorm2d(cout)]
                        if not last:
                            steps.append(nn.ReLU(inplace=True))
                    row.append(nn.Sequential(*steps))
            self.fuse.append(row)

    def forward(self, xs):
        xs = [branch(x) for branch, x in zip(self.branches, xs)]
        out = []
        for i, row in enumerate(self.fuse):
            acc = xs[i]
            for j, layer in enumerate(row):
                if j == i:
                    continue
                y = layer(xs[j])
                if j > i:
                    y = F.interpolate(y, size=xs[i].shape[-2:], mode="nearest")
                acc = acc + y
            out.append(F.relu(acc))
        return out


class Backbone(nn.Module):
    """Light HRNet-style encoder emitting a single feature map at 1/4 resolution.

    Branch ``k`` runs at ``1/2**(k+2)`` of the input with ``base_width * 2**k``
    channels; stage ``s`` adds one branch until all four are active.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(conv_bn_relu(cfg.in_channels, cfg.stem_width, 2),
                                  conv_bn_relu(cfg.stem_width, cfg.stem_width, 2),
                                  conv_bn_relu(cfg.stem_width, cfg.base_width))
        self.transitions = nn.ModuleList()
        self.stages = nn.ModuleList()
        widths = [cfg.base_width]
        for s in range(cfg.num_stages):
            n_branches = min(s + 2, 4)
            if n_branches > len(widths):
                new_w = cfg.base_width * 2 ** len(widths)
                self.transitions.append(conv_bn_relu(widths[-1], new_w, stride=2))
                widths.append(new_w)
            else:
                self.transitions.append(nn.Identity())
            self.stages.append(FusionStage(list(widths), cfg.blocks_per_branch))
        self.widths = widths
        self.project = nn.Sequential(nn.Conv2d(sum(widths), cfg.out_channels, 1, bias=False),
                                     nn.BatchNorm2d(cfg.out_channels), nn.ReLU(inplace=True))

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % 32 or W % 32:
            raise ConfigError(f"input size {H}x{W} must be divisible by 32")
        xs = [self.stem(x)]
        for trans, stage in zip(self.transitions, self.stages):
            if not isinstance(trans, nn.Identity):
                xs.append(trans(xs[-1]))
            xs = stage(xs)
        size = xs[0].shape[-2:]
        feats = [xs[0]] + [F.interpolate(y, size=size, mode="bilinear", align_corners=False)
                           for y in xs[1:]]
        return self.project(torch.cat(feats, dim=1))


class UpBlock(nn.Module):
    """x2 residual upsampling: transpose-conv main path, interpolated 1x1 shortcut."""

    def __init__(self, cin, cout):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.deconv(x)))
        out = self.bn2(self.conv(out))
        skip = self.shortcut(F.interpolate(x, scale_factor=2, mode="nearest"))
        return F.relu(out + skip)


class HeatmapBranch(nn.Module):
    def __init__(self, in_channels, num_joints, width):
        super().__init__()
        half = max(width // 2, 4)
        self.trunk = conv_bn_relu(in_channels, width)
        self.up1 = UpBlock(width, width)
        self.up2 = UpBlock(width, half)
        self.preds = nn.ModuleList([
            nn.Conv2d(width, num_joints, 3, padding=1),
            nn.Conv2d(width, num_joints, 3, padding=1),
            nn.Conv2d(half, num_joints, 3, padding=1),
        ])

    def forward(self, x, return_scales=False):
        x0 = self.trunk(x)
        x1 = self.up1(x0)
        x2 = self.up2(x1)
        scales = [pred(t) for pred, t in zip(self.preds, (x0, x1, x2))]
        size = scales[-1].shape[-2:]
        up = [F.interpolate(h, size=size, mode="bilinear", align_corners=False)
              for h in scales[:-1]] + [scales[-1]]
        out = up[0] + up[1] + up[2]
        if return_scales:
            return out, scales
        return out


class PoseHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.uv = HeatmapBranch(cfg.in_channels, cfg.num_joints, cfg.width)
        self.uz = HeatmapBranch(cfg.in_channels, cfg.num_joints, cfg.width)

    def forward(self, feats):
        if feats.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"head expects {self.cfg.in_channels} channels, got {feats.shape[1]}")
        return self.uv(feats), self.uz(feats)


VARIANTS = ("full", "hall_only", "rgb_only")


class PoseNet(nn.Module):
    """Composite model for either training stage.

    Stage 1 is ``F_depth -> head``. Stage 2 runs ``F_rgb`` and ``F_hall`` on the
    RGB frame, concatenates their features for the head, and keeps a frozen
    ``F_depth`` that only produces hallucination targets. The ``hall_only`` and
    ``rgb_only`` variants drop one of the RGB backbones.
    """

    def __init__(self, stage: int, backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
                 variant: str = "full"):
        super().__init__()
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        self.stage = stage
        self.variant = variant if stage == 2 else "depth"
        self.backbone_cfg = backbone_cfg
        C = backbone_cfg.out_channels
        rgb_cfg = replace(backbone_cfg, in_channels=3)
        depth_cfg = replace(backbone_cfg, in_channels=1)
        self.depth_net: Optional[Backbone] = None
        self.rgb_net: Optional[Backbone] = None
        self.hall_net: Optional[Backbone] = None
        if stage == 1:
            self.depth_net = Backbone(depth_cfg)
            n_feat = 1
        else:
            if variant in ("full", "hall_only"):
                self.depth_net = Backbone(depth_cfg)
                self.hall_net = Backbone(rgb_cfg)
            if variant in ("full", "rgb_only"):
                self.rgb_net = Backbone(rgb_cfg)
            n_feat = 2 if variant == "full" else 1
        if head_cfg.in_channels != n_feat * C:
            raise ConfigError(f"head in_channels={head_cfg.in_channels} but the embedding has "
                              f"{n_feat * C} channels")
        self.head = PoseHead(head_cfg)

    @property
    def teacher_frozen(self) -> bool:
        return self.stage == 2 and self.depth_net is not None

    def freeze_teacher(self):
        if self.teacher_frozen:
            self.depth_net.requires_grad_(False)
            self.depth_net.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.teacher_frozen:
            # running statistics of the teacher must never move
            self.depth_net.eval()
        return self

    def forward(self, rgb=None, depth=None, detach_hall=False):
        out = {}
        if self.stage == 1:
            if depth is None:
                raise ConfigError("stage-1 model needs a depth input")
            f = self.depth_net(depth)
            out["f_depth"] = f
            out["uv"], out["uz"] = self.head(f)
            return out
        if rgb is None:
            raise ConfigError("stage-2 model needs an RGB input")
        feats = []
        if self.rgb_net is not None:
            out["f_rgb"] = self.rgb_net(rgb)
            feats.append(out["f_rgb"])
        if self.hall_net is not None:
            out["f_hall"] = self.hall_net(rgb)
            feats.append(out["f_hall"].detach() if detach_hall else out["f_hall"])
        if depth is not None and self.depth_net is not None:
            with torch.no_grad():
                out["f_depth"] = self.depth_net(depth)
        emb = torch.cat(feats, dim=1) if len(feats) > 1 else feats[0]
        out["uv"], out["uz"] = self.head(emb)
        return out


def init_weights(module: nn.Module, std: float = 0.001):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def state_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in sorted key order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def head_config_for(stage: int, backbone_cfg: BackboneConfig, num_joints: int = 14,
                    width: int = 32, variant: str = "full") -> HeadConfig:
    n_feat = 2 if stage == 2 and variant == "full" else 1
    return HeadConfig(in_channels=n_feat * backbone_cfg.out_channels, num_joints=num_joints,
                      width=width)


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: int
    variant: str
    epoch: int
    backbone: BackboneConfig
    head: HeadConfig
    spdh: SPDHConfig
    weights: dict
    optimizer: Optional[dict] = None
    config: dict = field(default_factory=dict)
    digest: str = ""
    teacher_digest: str = ""

    def build_model(self) -> PoseNet:
        model = PoseNet(self.stage, self.backbone, self.head,
                        self.variant if self.stage == 2 else "full")
        model.load_state_dict(self.weights)
        model.freeze_teacher()
        return model

    def save(self, path: str | Path) -> None:
        payload = {
            "stage": self.stage,
            "variant": self.variant,
            "epoch": self.epoch,
            "backbone": asdict(self.backbone),
            "head": {**asdict(self.head), "resolutions": list(self.head.resolutions)},
            "spdh": self.spdh.to_dict(),
            "weights": self.weights,
            "optimizer": self.optimizer,
            "config": self.config,
            "digest": self.digest,
            "teacher_digest": self.teacher_digest,
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        d = torch.load(path, map_location="cpu", weights_only=False)
        head = dict(d["head"])
        head["resolutions"] = tuple(head["resolutions"])
        return cls(stage=d["stage"], variant=d["variant"], epoch=d["epoch"],
                   backbone=BackboneConfig(**d["backbone"]), head=HeadConfig(**head),
                   spdh=SPDHConfig.from_dict(d["spdh"]), weights=d["weights"],
                   optimizer=d.get("optimizer"), config=d.get("config", {}),
                   digest=d.get("digest", ""), teacher_digest=d.get("teacher_digest", ""))


def assemble_model(stage: int, backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
                   depth_checkpoint: Optional[Checkpoint] = None,
                   variant: str = "full") -> PoseNet:
    """Build a fresh model for ``stage``; stage 2 loads and freezes the depth teacher."""
    if stage == 2 and variant != "rgb_only":
        if depth_checkpoint is None:
            raise ConfigError("stage 2 requires a stage-1 depth checkpoint")
        if depth_checkpoint.stage != 1:
            raise ConfigError(f"depth checkpoint has stage {depth_checkpoint.stage}, expected 1")
        backbone_cfg = replace(backbone_cfg, **{
            k: getattr(depth_checkpoint.backbone, k)
            for k in ("base_width", "num_stages", "out_channels", "stem_width", "blocks_per_branch")
        })
    model = PoseNet(stage, backbone_cfg, head_cfg, variant)
    init_weights(model)
    if model.teacher_frozen:
        teacher = {k[len("depth_net."):]: v for k, v in depth_checkpoint.weights.items()
                   if k.startswith("depth_net.")}
        model.depth_net.load_state_dict(teacher)
        model.freeze_teacher()
    return model
