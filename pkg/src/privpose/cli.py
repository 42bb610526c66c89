"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure (one ``error: ...`` line on stderr),
2 usage error. The default output root comes from ``PRIVPOSE_OUTPUT_ROOT``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import DatasetError, load_dataset
from .geometry import GeometryError, Skeleton3D, save_json
from .model import Checkpoint, ConfigError
from .training import TrainConfig

log = logging.getLogger("privpose")

COMMANDS = ("generate-synthetic", "train-depth", "train-rgb", "evaluate", "infer",
            "export-features", "plot-pose", "throughput")


class CommandError(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``key.sub=value`` overrides; every key must already exist."""
    config = json.loads(json.dumps(config))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return config


def read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc


def resolve_train_config(args, stage: int) -> TrainConfig:
    base = TrainConfig(stage=stage).to_dict()
    file_cfg = read_config(args.config)
    merged = apply_overrides(base, [f"{k}={json.dumps(v)}" for k, v in _flatten(file_cfg)])
    merged = apply_overrides(merged, args.set)
    merged["stage"] = stage
    if args.dataset:
        merged["dataset"] = str(args.dataset)
    if getattr(args, "split", None):
        merged["split"] = args.split
    merged["out_dir"] = str(args.out)
    if getattr(args, "variant", None):
        merged["variant"] = args.variant
    return TrainConfig.from_dict(merged)


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v:
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _snapshot(args, out: Path, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    record = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k != "func"}
    if extra:
        record["resolved"] = extra
    save_json(record, out / "config.resolved.json")


# -- commands ------------------------------------------------------------------

def cmd_generate(args):
    from .synthetic import SyntheticConfig, generate_synthetic

    cfg = SyntheticConfig(width=args.width, height=args.height)
    splits = {}
    if args.train or args.test:
        splits = {"train": args.train, "test": args.test}
    _snapshot(args, Path(args.out))
    generate_synthetic(args.root, args.n, args.seed, cfg, splits)
    print(f"wrote {args.n} samples to {args.root}")


def cmd_train(args, stage: int):
    from .training import resume, train_stage1, train_stage2

    cfg = resolve_train_config(args, stage)
    out = Path(args.out)
    _snapshot(args, out, cfg.to_dict())
    if not cfg.dataset:
        raise CommandError("--dataset is required")
    depth_ckpt = None
    if stage == 2 and cfg.variant != "rgb_only":
        if not args.depth_checkpoint:
            raise CommandError("train-rgb requires --depth-checkpoint (a stage-1 depth model)")
        depth_ckpt = Checkpoint.load(args.depth_checkpoint)
    manifest = load_dataset(cfg.dataset, cfg.split, cfg.spdh)
    if args.resume:
        ckpt = resume(Checkpoint.load(args.resume), manifest, cfg)
    elif stage == 1:
        ckpt = train_stage1(manifest, cfg)
    else:
        ckpt = train_stage2(manifest, depth_ckpt, cfg)
    from .plotting import plot_losses

    if (out / "losses.csv").exists():
        plot_losses(out / "losses.csv", out / "losses.png")
    print(f"stage {stage} finished at epoch {ckpt.epoch}; checkpoint {out / 'last.pt'}")


def _load_ckpt_and_data(args):
    ckpt = Checkpoint.load(args.checkpoint)
    manifest = load_dataset(args.dataset, args.split, ckpt.spdh)
    return ckpt, manifest


def cmd_evaluate(args):
    from .evaluation import evaluate_model, format_table, write_report
    from .plotting import plot_report

    read_config(args.config)
    out = Path(args.out)
    _snapshot(args, out)
    ckpt, manifest = _load_ckpt_and_data(args)
    report = evaluate_model(ckpt, manifest, label=args.label)
    write_report(report, out)
    plot_report(report, out)
    sys.stdout.write(format_table([report]))


def cmd_infer(args):
    from .evaluation import infer
    from .plotting import plot_pose

    out = Path(args.out)
    _snapshot(args, out)
    ckpt, manifest = _load_ckpt_and_data(args)
    if args.sample_id:
        manifest.sample_ids = [s for s in manifest.sample_ids if s in set(args.sample_id)]
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    for s, skel, uv, uz in infer(ckpt, manifest):
        save_json(skel.to_dict(), out / "predictions" / f"{s.sample_id}.json")
        if args.plots:
            plot_pose(s.rgb, s.intrinsics, skel, out / "figures", s.sample_id, (uv, uz),
                      gt=s.skeleton, z_range=(ckpt.spdh.z_min, ckpt.spdh.z_max))
    print(f"wrote {len(manifest)} predictions to {out / 'predictions'}")


def cmd_export(args):
    from .evaluation import export_features
    from .plotting import plot_feature_distances

    out = Path(args.out)
    _snapshot(args, out)
    ckpt, manifest = _load_ckpt_and_data(args)
    stats = export_features(ckpt, manifest, args.n, out)
    plot_feature_distances(stats.per_sample, out / "feature_distances.png")
    print(json.dumps(stats.to_dict()))


def cmd_plot_pose(args):
    from .data import resize_sample
    from .geometry import encode_spdh
    from .plotting import plot_pose

    out = Path(args.out)
    _snapshot(args, out)
    manifest = load_dataset(args.dataset, args.split)
    sample = manifest.load(args.sample_id)
    if args.size:
        sample = resize_sample(sample, args.size, args.size)
    spdh = manifest.spdh.__class__(**{**manifest.spdh.to_dict(),
                                      "hm_width": sample.intrinsics.width,
                                      "hm_height": sample.intrinsics.height})
    pred = sample.skeleton
    if args.prediction:
        pred = Skeleton3D.from_dict(read_config(args.prediction))
    t = encode_spdh(pred, sample.intrinsics, spdh)
    paths = plot_pose(sample.rgb, sample.intrinsics, pred, out, sample.sample_id, (t.uv, t.uz),
                      gt=sample.skeleton if args.prediction else None,
                      z_range=(spdh.z_min, spdh.z_max))
    for p in paths:
        print(p)


def cmd_throughput(args):
    from .evaluation import measure_throughput
    from .model import BackboneConfig, PoseNet, head_config_for, init_weights

    out = Path(args.out)
    _snapshot(args, out)
    if args.checkpoint:
        target = Checkpoint.load(args.checkpoint)
        size = args.input_size or int(target.config.get("input_size", target.spdh.hm_width))
    else:
        bb = BackboneConfig()
        target = PoseNet(2, bb, head_config_for(2, bb))
        init_weights(target)
        size = args.input_size or 256
    res = measure_throughput(target, size, args.iterations)
    save_json(res, out / "throughput.json")
    print(f"{res['fps']:.2f} FPS (median of {res['iterations']} at {size}x{size})")


# -- parser --------------------------------------------------------------------

def _default_out(name: str) -> Path:
    return Path(os.environ.get("PRIVPOSE_OUTPUT_ROOT", "runs")) / name


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="privpose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, name):
        sp.add_argument("--config", type=Path, default=None, help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted for nested keys)")
        sp.add_argument("--out", type=Path, default=_default_out(name))
        sp.add_argument("-v", "--verbose", action="count", default=0)

    g = sub.add_parser("generate-synthetic", help="render a synthetic RGB-D dataset")
    common(g, "synthetic")
    g.add_argument("--root", type=Path, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--train", type=int, default=0, help="size of the train split")
    g.add_argument("--test", type=int, default=0, help="size of the test split")
    g.set_defaults(func=cmd_generate)

    for name, stage in (("train-depth", 1), ("train-rgb", 2)):
        t = sub.add_parser(name, help=f"stage-{stage} training")
        common(t, name)
        t.add_argument("--dataset", type=Path)
        t.add_argument("--split", default=None)
        t.add_argument("--resume", type=Path, default=None)
        if stage == 2:
            t.add_argument("--depth-checkpoint", type=Path, default=None)
            t.add_argument("--variant", choices=("full", "hall_only", "rgb_only"), default=None)
        t.set_defaults(func=lambda a, s=stage: cmd_train(a, s))

    def ckpt_data(sp):
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--dataset", type=Path, required=True)
        sp.add_argument("--split", default="test")

    e = sub.add_parser("evaluate", help="MPJPE / mAP report for a checkpoint")
    common(e, "evaluate")
    ckpt_data(e)
    e.add_argument("--label", default="")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("infer", help="predict 3D skeletons")
    common(i, "infer")
    ckpt_data(i)
    i.add_argument("--sample-id", action="append", default=[])
    i.add_argument("--plots", action="store_true")
    i.set_defaults(func=cmd_infer)

    x = sub.add_parser("export-features", help="dump depth/RGB/hallucinated features")
    common(x, "features")
    ckpt_data(x)
    x.add_argument("--n", type=int, default=500)
    x.set_defaults(func=cmd_export)

    pp = sub.add_parser("plot-pose", help="render overlay, uz and 3D figures for one sample")
    common(pp, "plots")
    pp.add_argument("--dataset", type=Path, required=True)
    pp.add_argument("--split", default="all")
    pp.add_argument("--sample-id", required=True)
    pp.add_argument("--prediction", type=Path, default=None, help="skeleton JSON to plot")
    pp.add_argument("--size", type=int, default=0, help="resize to this square size first")
    pp.set_defaults(func=cmd_plot_pose)

    th = sub.add_parser("throughput", help="frames per second of the RGB inference path")
    common(th, "throughput")
    th.add_argument("--checkpoint", type=Path, default=None)
    th.add_argument("--input-size", type=int, default=0)
    th.add_argument("--iterations", type=int, default=20)
    th.set_defaults(func=cmd_throughput)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "config", None) is not None and not Path(args.config).is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted; last state saved to interrupted.pt", file=sys.stderr)
        return 1
    except (CommandError, ConfigError, DatasetError, GeometryError, FileNotFoundError,
            ValueError, RuntimeError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
