import json

import numpy as np
import pytest

from conftest import SMALL_BB
from privpose.cli import apply_overrides, run
from privpose.data import load_dataset
from privpose.geometry import Skeleton3D, encode_spdh
from privpose.model import ConfigError
from privpose.plotting import overlay_points, plot_losses, plot_pose


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return err[-1] if err else ""


def small_train_config(path):
    from dataclasses import asdict
    cfg = {"epochs": 1, "batch_size": 3, "input_size": 64, "head_width": 8,
           "backbone": asdict(SMALL_BB)}
    path.write_text(json.dumps(cfg))
    return path


def test_missing_config_exit_1(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    code = run(["evaluate", "--config", str(missing), "--checkpoint", "x.pt", "--dataset", "d",
                "--out", str(tmp_path / "o")])
    assert code == 1
    line = last_error(capsys)
    assert line.startswith("error: ") and str(missing) in line


def test_usage_errors_exit_2(capsys):
    assert run(["bogus"]) == 2
    assert run(["evaluate", "--no-such-flag"]) == 2
    assert run([]) == 2


def test_generate_twice_identical(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        root = tmp_path / name
        code = run(["generate-synthetic", "--n", "3", "--seed", "0", "--width", "64",
                    "--height", "64", "--root", str(root), "--out", str(tmp_path / f"log{name}")])
        assert code == 0
        outs.append(sorted((p.relative_to(root), p.read_bytes())
                           for p in root.rglob("*") if p.is_file()))
        assert (tmp_path / f"log{name}" / "config.resolved.json").is_file()
    assert outs[0] == outs[1]


def test_train_rgb_needs_depth_checkpoint(synth_root, tmp_path, capsys):
    cfg = small_train_config(tmp_path / "c.json")
    code = run(["train-rgb", "--config", str(cfg), "--dataset", str(synth_root),
                "--out", str(tmp_path / "o")])
    assert code == 1
    assert "--depth-checkpoint" in last_error(capsys)
    # the snapshot is written before any work starts
    snap = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert snap["resolved"]["stage"] == 2 and snap["resolved"]["epochs"] == 1


def test_overrides_must_exist():
    cfg = {"a": 1, "b": {"c": 2}}
    assert apply_overrides(cfg, ["b.c=5", "a=\"x\""]) == {"a": "x", "b": {"c": 5}}
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["b.d=1"])
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["novalue"])


def test_unknown_override_exit_1(synth_root, tmp_path, capsys):
    code = run(["train-depth", "--dataset", str(synth_root), "--set", "learning_rate=0.1",
                "--out", str(tmp_path / "o")])
    assert code == 1 and "learning_rate" in last_error(capsys)


def test_end_to_end_commands(synth_root, tmp_path, capsys):
    cfg = small_train_config(tmp_path / "c.json")
    s1, s2 = tmp_path / "s1", tmp_path / "s2"
    assert run(["train-depth", "--config", str(cfg), "--dataset", str(synth_root),
                "--split", "train", "--out", str(s1)]) == 0
    assert (s1 / "losses.png").is_file()
    assert run(["train-rgb", "--config", str(cfg), "--dataset", str(synth_root),
                "--split", "train", "--depth-checkpoint", str(s1 / "last.pt"),
                "--set", "loss_weights.w_pi=0.5", "--out", str(s2)]) == 0
    snap = json.loads((s2 / "config.resolved.json").read_text())
    assert snap["resolved"]["loss_weights"]["w_pi"] == 0.5

    ev = tmp_path / "ev"
    assert run(["evaluate", "--checkpoint", str(s2 / "last.pt"), "--dataset", str(synth_root),
                "--out", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["num_samples"] == 2
    assert (ev / "report_per_joint.png").is_file() and (ev / "report.txt").is_file()

    inf = tmp_path / "inf"
    assert run(["infer", "--checkpoint", str(s2 / "last.pt"), "--dataset", str(synth_root),
                "--sample-id", "000007", "--plots", "--out", str(inf)]) == 0
    assert sorted(p.name for p in (inf / "predictions").iterdir()) == ["000007.json"]
    assert (inf / "figures" / "000007_overlay.png").is_file()

    fx = tmp_path / "fx"
    assert run(["export-features", "--checkpoint", str(s2 / "last.pt"), "--dataset",
                str(synth_root), "--n", "2", "--out", str(fx)]) == 0
    assert (fx / "features.npz").is_file() and (fx / "feature_distances.png").is_file()

    th = tmp_path / "th"
    assert run(["throughput", "--checkpoint", str(s2 / "last.pt"), "--iterations", "10",
                "--out", str(th)]) == 0
    assert json.loads((th / "throughput.json").read_text())["fps"] > 0

    assert run(["evaluate", "--checkpoint", str(tmp_path / "none.pt"), "--dataset",
                str(synth_root), "--out", str(tmp_path / "x")]) == 1


# -- figures -----------------------------------------------------------------

def test_plot_pose_byte_stable(synth_root, tmp_path, capsys):
    args = ["plot-pose", "--dataset", str(synth_root), "--sample-id", "000001"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    names = ["000001_overlay.png", "000001_uz.png", "000001_3d.png"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_markers_on_heatmap_peaks(synth_root):
    m = load_dataset(synth_root, "all")
    for s in m:
        spdh = m.spdh.__class__(**{**m.spdh.to_dict(), "hm_width": 64, "hm_height": 64})
        t = encode_spdh(s.skeleton, s.intrinsics, spdh)
        uv = overlay_points(s.skeleton, s.intrinsics)
        for j in np.flatnonzero(t.mask_uv):
            r, c = np.unravel_index(t.uv[j].argmax(), t.uv[j].shape)
            assert (c, r) == tuple(np.round(uv[j]).astype(int))


def test_plot_empty_pose(synth_root, tmp_path):
    s = load_dataset(synth_root, "all").load("000000")
    empty = Skeleton3D(np.full((14, 3), np.nan), np.zeros(14), np.zeros(14))
    paths = plot_pose(s.rgb, s.intrinsics, empty, tmp_path, "e")
    assert [p.name for p in paths] == ["e_overlay.png", "e_uz.png", "e_3d.png"]
    assert all(p.stat().st_size > 0 for p in paths)


def test_plot_losses(tmp_path):
    csv_path = tmp_path / "l.csv"
    csv_path.write_text("step,epoch,l_pi,l_pe,l_total\n0,0,0.1,0.2,0.3\n1,0,0.05,0.1,0.15\n")
    assert plot_losses(csv_path, tmp_path / "l.png").stat().st_size > 0
