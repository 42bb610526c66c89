import json
import math
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SMALL_BB, random_skeleton
from privpose.data import load_dataset
from privpose.geometry import Skeleton3D
from privpose.evaluation import (
    aggregate, codec_oracle, evaluate_model, export_features, feature_distances, format_table,
    map_at, measure_throughput, mpjpe, write_report,
)
from privpose.model import ConfigError, assemble_model, head_config_for
from privpose.training import TrainConfig, train_stage1, train_stage2


def offset(skel, d):
    return Skeleton3D(skel.joints + np.asarray(d), skel.mask_uv, skel.mask_uz, skel.joint_names)


def brute_force(pred, gt, thresholds):
    """Plain loops over joints, written independently of the library."""
    dists = []
    for j in range(len(gt.joints)):
        if not (gt.mask_uv[j] and gt.mask_uz[j]):
            continue
        if pred.mask_uv[j] and pred.mask_uz[j]:
            dx, dy, dz = (pred.joints[j][k] - gt.joints[j][k] for k in range(3))
            dists.append(math.sqrt(dx * dx + dy * dy + dz * dz))
        else:
            dists.append(float("inf"))
    finite = [d for d in dists if d != float("inf")]
    m = sum(finite) / len(finite) if finite else None
    acc = {t: sum(1 for d in dists if d < t) / len(dists) for t in thresholds} if dists else None
    return m, acc


GT = Skeleton3D(np.column_stack([np.arange(14.0), np.zeros(14), np.full(14, 300.0)]),
                np.ones(14), np.ones(14))


def test_metric_examples():
    assert mpjpe(GT, GT) == 0
    assert mpjpe(offset(GT, (3, 0, 0)), GT) == pytest.approx(3.0)
    assert map_at(offset(GT, (3, 0, 0)), GT) == {6.0: 1.0, 8.0: 1.0, 10.0: 1.0}
    assert map_at(offset(GT, (7, 0, 0)), GT) == {6.0: 0.0, 8.0: 1.0, 10.0: 1.0}


def test_strict_threshold_boundary():
    # 6 = sqrt(36) is exact in floating point
    assert map_at(offset(GT, (0, 6, 0)), GT)[6.0] == 0.0
    assert map_at(offset(GT, (0, np.nextafter(6, 0), 0)), GT)[6.0] == 1.0


def test_no_evaluated_joints_is_absent():
    hidden = Skeleton3D(GT.joints, np.zeros(14), np.zeros(14))
    assert mpjpe(GT, hidden) is None and map_at(GT, hidden) is None


def test_failed_joints_are_misses_not_averaged():
    pred = offset(GT, (1, 0, 0))
    pred.mask_uv[:4] = False
    assert mpjpe(pred, GT) == pytest.approx(1.0)
    assert map_at(pred, GT)[10.0] == pytest.approx(10 / 14)
    r = aggregate([pred], [GT])
    assert r.failed_joints == 4 and r.num_evaluated_joints == 14


def test_brute_force_oracle_1000_pairs():
    rng = np.random.default_rng(2024)
    ths = (6.0, 8.0, 10.0)
    preds, gts = [], []
    for _ in range(1000):
        g = Skeleton3D(random_skeleton(rng), rng.random(14) < 0.9, rng.random(14) < 0.9)
        p = Skeleton3D(g.joints + rng.normal(0, 6, (14, 3)), rng.random(14) < 0.95,
                       np.ones(14, bool))
        m, acc = brute_force(p, g, ths)
        got_m, got_acc = mpjpe(p, g), map_at(p, g, ths)
        if m is None:
            assert got_m is None
        else:
            assert got_m == pytest.approx(m, rel=1e-9)
        if acc is None:
            assert got_acc is None
        else:
            for t in ths:
                assert got_acc[t] == pytest.approx(acc[t], rel=1e-9, abs=0)
        preds.append(p)
        gts.append(g)
    # the report is a micro-average over all pairs
    all_d = []
    for p, g in zip(preds, gts):
        for j in range(14):
            if g.mask_uv[j] and g.mask_uz[j]:
                ok = p.mask_uv[j] and p.mask_uz[j]
                all_d.append(np.linalg.norm(p.joints[j] - g.joints[j]) if ok else np.inf)
    all_d = np.array(all_d)
    r = aggregate(preds, gts, ths)
    assert r.mpjpe_cm == pytest.approx(all_d[np.isfinite(all_d)].mean(), rel=1e-9)
    for t in ths:
        assert r.map[t] == pytest.approx(np.mean(all_d < t), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.lists(st.floats(0.1, 100), min_size=2, max_size=6))
def test_map_monotone_in_threshold(seed, ths):
    rng = np.random.default_rng(seed)
    g = Skeleton3D(random_skeleton(rng), np.ones(14), np.ones(14))
    p = Skeleton3D(g.joints + rng.normal(0, 8, (14, 3)), rng.random(14) < 0.9, np.ones(14))
    ths = sorted(set(ths))
    acc = map_at(p, g, ths)
    vals = [acc[t] for t in ths]
    assert all(0 <= v <= 1 for v in vals)
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    ok = p.mask_uv & p.mask_uz
    if ok.all():
        assert map_at(p, g, [1e12])[1e12] == 1.0


def test_report_files(tmp_path):
    r = aggregate([offset(GT, (3, 0, 0))], [GT], label="demo")
    paths = write_report(r, tmp_path)
    d = json.loads(paths["json"].read_text())
    assert {"mpjpe_cm", "mpjpe_per_joint", "map", "thresholds_cm", "num_samples",
            "failed_joints"} <= set(d)
    assert d["map"] == {"6": 1.0, "8": 1.0, "10": 1.0}
    assert "MPJPE (cm)" in paths["table"].read_text()
    assert paths["csv"].read_text().startswith("joint,mpjpe_cm\n")
    empty = aggregate([], [])
    assert empty.num_samples == 0 and empty.mpjpe_cm is None and empty.map is None
    assert "-" in format_table([empty])


def test_codec_oracle_below_bound(synth_root):
    m = load_dataset(synth_root, "all")
    r = codec_oracle(m, m.spdh, 64)
    assert r.failed_joints == 0 and r.mpjpe_cm < 5.0


# -- model evaluation --------------------------------------------------------

@pytest.fixture(scope="module")
def trained(synth_root, tmp_path_factory):
    base = tmp_path_factory.mktemp("eval")
    m = load_dataset(synth_root, "train")
    kw = dict(epochs=1, batch_size=3, input_size=64, backbone=SMALL_BB, head_width=8)
    s1 = train_stage1(m, TrainConfig(stage=1, out_dir=str(base / "s1"), **kw))
    s2 = train_stage2(m, s1, TrainConfig(stage=2, out_dir=str(base / "s2"), **kw))
    return s1, s2


def test_evaluate_idempotent(synth_root, trained):
    m = load_dataset(synth_root, "test")
    for ck in trained:
        a = evaluate_model(ck, m).to_dict()
        b = evaluate_model(ck, m).to_dict()
        assert a == b and a["num_samples"] == 2


def test_evaluate_empty_split(synth_root, trained, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(synth_root, root)
    (root / "splits" / "none.txt").write_text("")
    with pytest.warns(UserWarning):
        m = load_dataset(root, "none")
    r = evaluate_model(trained[1], m)
    assert r.num_samples == 0 and r.mpjpe_cm is None and r.map is None


def test_stage1_needs_depth(synth_root, trained, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(synth_root, root)
    (root / "samples" / "000006" / "depth.png").unlink()
    m = load_dataset(root, "test")
    with pytest.raises(ConfigError, match="000006"):
        evaluate_model(trained[0], m)
    # the RGB model does not need depth at test time
    assert evaluate_model(trained[1], m).num_samples == 2


def test_export_features(synth_root, trained, tmp_path):
    m = load_dataset(synth_root, "test")
    with pytest.warns(UserWarning, match="clamp"):
        st_ = export_features(trained[1], m, 50, tmp_path)
    assert st_.num_samples == 2 and 0 <= st_.win_rate <= 1
    npz = np.load(tmp_path / "features.npz")
    assert npz["f_depth"].shape == npz["f_rgb"].shape == npz["f_hall"].shape
    assert npz["f_depth"].shape[0] == 2
    assert json.loads((tmp_path / "feature_stats.json").read_text())["num_samples"] == 2
    with pytest.raises(ConfigError):
        export_features(trained[0], m, 2)


def test_feature_distances_ordering():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(20, 30))
    st_ = feature_distances(d, d + rng.normal(0, 1, d.shape), d + rng.normal(0, 0.1, d.shape))
    assert st_.mean_hall_to_depth < st_.mean_rgb_to_depth and st_.win_rate == 1.0


def test_throughput_sane():
    model = assemble_model(2, SMALL_BB, head_config_for(2, SMALL_BB, width=8, variant="rgb_only"),
                           variant="rgb_only")
    r = measure_throughput(model, 64, iterations=10, warmup=2)
    assert math.isfinite(r["fps"]) and r["fps"] > 0
    assert r["decode_median_seconds"] < r["median_seconds"]
    with pytest.raises(ValueError):
        measure_throughput(model, 64, iterations=5)
