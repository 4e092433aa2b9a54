"""Acceptance gate: one test per criterion, each recording a pass/fail line
that is printed in the terminal summary."""

import json

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_RESULTS, ABLATION_SEEDS, DESK_PROFILE
from sparsefocus.ablation import variant_curve, variant_mean
from sparsefocus.cli import main
from sparsefocus.imaging import list_sample_dirs, read_plane, write_planes
from sparsefocus.losses import (
    LossWeights,
    composite_loss,
    dice_loss,
    loss_gradients,
    regional_mae,
    weighted_mae,
)
from sparsefocus.network import ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from sparsefocus.phantom import generate_phantom
from sparsefocus.variants import VARIANT_ORDER
from test_losses import central_fd, oracle_dice_loss, oracle_regional_mae, oracle_weighted_mae, rel_err
from test_network import test_end_to_end_parameter_gradients_match_finite_differences as tiny_model_fd


def record(n, ok, detail):
    ACCEPTANCE_RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def run_cli(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


def tree_bytes(root, skip=("manifest.json", "timing.json")):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


# 1 ---------------------------------------------------------------------------


def test_c1_loss_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        y = rng.uniform(-1000, 3000, (8, 8))
        yhat = y + rng.normal(0, 150, (8, 8))
        region = rng.random((8, 8)) < rng.uniform(0.05, 0.7)
        x = (rng.random((8, 8)) < 0.3).astype(float)
        xhat = rng.random((8, 8))
        worst = max(
            worst,
            rel_err(regional_mae(y, yhat, region), oracle_regional_mae(y, yhat, region)),
            rel_err(weighted_mae(y, yhat, region), oracle_weighted_mae(y, yhat, region)),
            rel_err(dice_loss(x, xhat, 1.0), oracle_dice_loss(x, xhat, 1.0)),
        )
    record(1, worst <= 1e-6, f"max relative error {worst:.2e} over 100 instances (bound 1e-6)")


# 2 ---------------------------------------------------------------------------


def test_c2_gradient_correctness():
    rng = np.random.default_rng(7)
    w = LossWeights(1.0, 1.5, 1.3)
    worst = 0.0
    for _ in range(10):
        ct = rng.uniform(-1, 3, (6, 6))
        body = np.zeros((6, 6), bool)
        body[1:, :5] = True
        bone = body & (ct >= 0.25)
        outputs = {"sct": ct + rng.normal(0, 0.3, (6, 6)), "bone": ct + rng.normal(0, 0.3, (6, 6)),
                   "mask": rng.uniform(0.05, 0.95, (6, 6))}
        _, grads = loss_gradients(outputs, ct, body, bone, w)
        for head in ("sct", "bone", "mask"):
            fd = central_fd(lambda p: composite_loss({**outputs, head: p}, ct, body, bone, w).total,
                            outputs[head])
            check = np.ones_like(ct, bool) if head == "mask" else np.abs(ct - outputs[head]) > 1e-2
            a, b = grads[head][check], fd[check]
            nz = np.abs(b) > 0
            worst = max(worst, float(np.max(np.abs(a[nz] - b[nz]) / np.abs(b[nz]), initial=0.0)))
            assert np.all(a[~nz] == 0)
    loss_ok = worst <= 1e-4
    model_ok = True
    try:
        tiny_model_fd()
    except AssertionError:
        model_ok = False
    record(2, loss_ok and model_ok,
           f"composite max rel err {worst:.2e} (bound 1e-4); 1-level 2-channel model FD "
           f"{'within' if model_ok else 'outside'} 1e-3")


# 3 ---------------------------------------------------------------------------


def test_c3_wmae_identities():
    rng = np.random.default_rng(3)
    failures = []
    for _ in range(200):
        shape = (int(rng.integers(2, 9)), 8)
        y = rng.normal(0, 100, shape)
        yhat = y + rng.normal(0, 20, shape)
        m = rng.random(shape) < rng.uniform(0.1, 0.9)
        if not m.any() or m.all():
            continue
        # equal volumes -> arithmetic mean of the regional MAEs
        half = np.zeros(shape, bool)
        half.ravel()[: half.size // 2] = True
        mean_regional = 0.5 * (regional_mae(y, yhat, half) + regional_mae(y, yhat, ~half))
        if abs(weighted_mae(y, yhat, half) - mean_regional) > 1e-9 * max(1.0, mean_regional):
            failures.append("equal-volume")
        a, b = weighted_mae(y, yhat, m), weighted_mae(y, yhat, ~m)
        if abs(a - b) > 1e-9 * max(1.0, a):
            failures.append("swap")
        s = float(rng.uniform(0.01, 100))
        if abs(weighted_mae(s * y, s * yhat, m) - s * a) > 1e-9 * max(1.0, s * a):
            failures.append("homogeneity")
        if weighted_mae(y, y, m) != 0.0 or a <= 0.0:
            failures.append("zero-iff-perfect")
    record(3, not failures, f"{len(failures)} identity violations on randomized instances (tolerance 1e-9)")


# 4 ---------------------------------------------------------------------------


def test_c4_network_contracts(tmp_path):
    problems = []
    model = build_model(ModelConfig(), "3tn", seed=0)
    rng = np.random.default_rng(0)
    forward(model, rng.normal(size=(2, 1, 32, 32)).astype(np.float32), train=True)
    for size in (16, 32, 64, 96):
        x = rng.normal(size=(2, 1, size, size)).astype(np.float32) * 3
        out = forward(model, x, train=False)
        if any(tuple(t.shape) != (2, 1, size, size) for _, t in out.items()):
            problems.append(f"dims at {size}")
        if not (torch.all(out.mask > 0) and torch.all(out.mask < 1)):
            problems.append(f"sigmoid range at {size}")
        if not torch.all(out.bone >= 0):
            problems.append(f"relu range at {size}")
        again = forward(model, x, train=False)
        if any(a.numpy().tobytes() != b.numpy().tobytes() for (_, a), (_, b) in zip(out.items(), again.items())):
            problems.append(f"eval determinism at {size}")
    save_checkpoint(model, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    sa, sb = model.state_dict(), loaded.state_dict()
    if any(sa[k].numpy().tobytes() != sb[k].numpy().tobytes() for k in sa if "num_batches" not in k):
        problems.append("checkpoint round-trip")
    record(4, not problems, "dims/ranges/determinism/round-trip ok" if not problems else ", ".join(problems))


# 5-7: desk-scale ablation sweep ----------------------------------------------


def _profile():
    m = DESK_PROFILE.model
    return (f"profile: {DESK_PROFILE.epochs} epochs, batch {DESK_PROFILE.batch_size}, "
            f"{m.levels} levels, base {m.base_channels}, seeds {list(ABLATION_SEEDS)}")


@pytest.mark.slow
def test_c5_ablation_trend(ablation_report):
    assert not [r for r in ablation_report.runs if r["status"] != "ok"], ablation_report.runs
    bone_3tn = variant_mean(ablation_report, "3tn", "mae", "bone")
    bone_gl = variant_mean(ablation_report, "1tn-gl", "mae", "bone")
    dice_3tn = variant_curve(ablation_report, "3tn")[600.0]
    dice_gl = variant_curve(ablation_report, "1tn-gl")[600.0]
    ok = bone_3tn <= 0.9 * bone_gl and dice_3tn > dice_gl
    record(5, ok, f"MAE_bone 3tn {bone_3tn:.1f} vs 1tn-gl {bone_gl:.1f} HU "
                  f"(ratio {bone_3tn / bone_gl:.3f}, bound 0.9); Dice@600 3tn {dice_3tn:.3f} "
                  f"vs 1tn-gl {dice_gl:.3f}; {_profile()}")


@pytest.mark.slow
def test_c6_tissue_easier_than_bone(ablation_report):
    rows = {v.value: (variant_mean(ablation_report, v, "mae", "tissue"),
                      variant_mean(ablation_report, v, "mae", "bone")) for v in VARIANT_ORDER}
    ok = all(t < b for t, b in rows.values())
    record(6, ok, "; ".join(f"{k} tissue {t:.1f} < bone {b:.1f}" for k, (t, b) in rows.items()))


@pytest.mark.slow
def test_c7_dice_decreases_with_threshold(ablation_report):
    rows = {v.value: variant_curve(ablation_report, v) for v in VARIANT_ORDER}
    ok = all(c[250.0] >= c[1200.0] for c in rows.values())
    record(7, ok, "; ".join(f"{k} D250 {c[250.0]:.3f} >= D1200 {c[1200.0]:.3f}" for k, c in rows.items()))


# 8 ---------------------------------------------------------------------------


def test_c8_phantom_calibration():
    f250, f900 = [], []
    for seed in range(100):
        s = generate_phantom(seed=seed)
        n = s.body.sum()
        f250.append(((s.ct >= 250) & s.body).sum() / n)
        f900.append(((s.ct >= 900) & s.body).sum() / n)
    a, b = float(np.mean(f250)), float(np.mean(f900))
    ok = 0.08 <= a <= 0.20 and 0.02 <= b <= 0.09
    record(8, ok, f"bone fraction at 250 HU {a:.2%} (8-20%), at 900 HU {b:.2%} (2-9%), 100 seeds")


# 9 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance-cli")
    assert run_cli("phantom", "--out", root / "data", "--train", 6, "--val", 2, "--test", 4,
                   "--size", 48, "--seed", 11) == 0
    return root


def test_c9_self_evaluation_exact(cli_data, tmp_path):
    pred = tmp_path / "pred"
    for case in list_sample_dirs(cli_data / "data" / "test"):
        write_planes(pred / case.name, {"sct": read_plane(case, "ct")})
    code = run_cli("eval", "--pred", pred, "--ref", cli_data / "data" / "test",
                   "--out", tmp_path / "ev" / "report.json")
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    maes = [v for c in report["cases"] for v in c["mae"].values()]
    dices = [v for c in report["cases"] for v in c["dice"].values()]
    dices += [v for c in report["cases"] for v in c["dice_curve"]["values"]]
    ok = code == 0 and all(v == 0.0 for v in maes) and all(v == 1.0 for v in dices)
    record(9, ok, f"{len(maes)} MAE values all 0, {len(dices)} Dice values all 1")


# 10 --------------------------------------------------------------------------


def test_c10_determinism(cli_data, tmp_path):
    cfg = {"epochs": 2, "batch_size": 3,
           "model": {"levels": 2, "blocks_per_level": 1, "base_channels": 4, "dilation_schedule": [1, 2]}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    same = {}
    for tag in ("a", "b"):
        d = tmp_path / tag
        assert run_cli("phantom", "--out", d / "data", "--train", 6, "--val", 2, "--test", 4,
                       "--size", 48, "--seed", 11) == 0
        assert run_cli("train", "--data", d / "data", "--out", d / "run", "--variant", "3tn",
                       "--config", tmp_path / "cfg.json", "--seed", 5) == 0
        assert run_cli("predict", "--model", d / "run", "--input", d / "data" / "test",
                       "--out", d / "pred") == 0
        assert run_cli("eval", "--pred", d / "pred", "--ref", d / "data" / "test",
                       "--out", d / "eval" / "report.json") == 0
    for part in ("data", "run", "pred", "eval"):
        same[part] = tree_bytes(tmp_path / "a" / part) == tree_bytes(tmp_path / "b" / part)
    same["data vs first dataset"] = tree_bytes(tmp_path / "a" / "data") == tree_bytes(cli_data / "data")
    ok = all(same.values())
    record(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items())
           + " (manifest.json and timing.json hold wall-clock and are excluded)")
