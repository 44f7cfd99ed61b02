"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 5-7 share one benchmark run (data generation, training and a
512-scene evaluation sweep), timed end to end.
"""
import json
import time

import numpy as np
import pytest
from conftest import make_chain_asset, record
from scipy.spatial.transform import Rotation

from muc.body_model import ParamSet, lbs_forward, make_toy_asset
from muc.cli import main
from muc.config import RunConfig
from muc.jrn import fuse_weighted, jrn_loss
from muc.metrics import mean_position_error, pa_error
from muc.pipeline import GRADCHECK_TOL, make_asset, run_eval_sweep, run_gradcheck, run_training
from muc.synth import NoiseConfig, generate_dataset

BENCHMARK_EPOCHS = 8
BENCHMARK_BUDGET_S = 600.0


def benchmark_config() -> RunConfig:
    return RunConfig().replace(optimizer={"epochs": BENCHMARK_EPOCHS})


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    cfg = benchmark_config()
    t0 = time.perf_counter()
    asset = make_asset(cfg)
    d = cfg.data
    train = generate_dataset(asset, d.train_scenes, d.n_cameras, cfg.noise, d.seed, "train")
    val = generate_dataset(asset, d.val_scenes, d.n_cameras, cfg.noise, d.seed + 100_000, "val")
    test = generate_dataset(asset, d.test_scenes, d.n_cameras, cfg.noise, d.seed + 200_000, "test")
    res = run_training(cfg, train, val, asset, tmp_path_factory.mktemp("bench"))
    rows = run_eval_sweep(res.model, test, [1, 2, 3, 4])
    return {"model": res.model, "rows": rows, "seconds": time.perf_counter() - t0, "asset": asset,
            "best_epoch": res.best_epoch}


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    entries = run_gradcheck(RunConfig(), seed=0)
    secs = time.perf_counter() - t0
    worst = max(entries, key=lambda e: e.max_rel_error)
    ok = all(e.passed for e in entries) and secs < 120
    record(1, ok, f"{len(entries)} blocks, worst {worst.block} {worst.max_rel_error:.2e} "
                  f"(tol {GRADCHECK_TOL:g}), {secs:.1f} s")
    assert ok, [(e.block, e.max_rel_error) for e in entries]


def brute_force(stack, scores, group):
    out = np.empty(stack.shape[1])
    for j in range(stack.shape[1]):
        w = [scores[c, group[j]] for c in range(stack.shape[0])]
        out[j] = sum(wc * stack[c, j] for c, wc in enumerate(w)) / sum(w)
    return out


def test_criterion_2_fusion_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(10_000):
        n = int(rng.integers(1, 9))
        if i % 2:
            group = np.repeat(np.arange(21), 3)           # body layout
        else:
            group = rng.integers(0, 4, size=int(rng.integers(1, 13)))
        g = int(group.max()) + 1
        stack = rng.normal(0, 1, (n, len(group)))
        scores = rng.uniform(1e-3, 10, (n, g))
        worst = max(worst, float(np.abs(fuse_weighted(stack, scores, group) - brute_force(stack, scores, group)).max()))
    ok = worst < 1e-9
    record(2, ok, f"10000 draws, max |diff| {worst:.2e} (tol 1e-9)")
    assert ok


def test_criterion_3_kl_loss():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 21))
    p = np.exp(z) / np.exp(z).sum(0)
    self_kl = abs(jrn_loss(z, p))
    neg = 0
    for _ in range(1000):
        n = int(rng.integers(2, 7))
        q = rng.dirichlet(np.ones(n), size=21).T
        neg += jrn_loss(rng.normal(0, 2, (n, 21)), q) < 0
    closed = jrn_loss(np.zeros((2, 1)), np.array([[0.25], [0.75]]))
    ok = self_kl <= 1e-12 and neg == 0 and abs(closed - 0.14384) <= 1e-5
    record(3, ok, f"KL(p,p) {self_kl:.1e}, negatives {neg}/1000, closed form {closed:.6f} vs 0.14384")
    assert ok


def test_criterion_4_procrustes():
    rng = np.random.default_rng(4)
    worst_pa, violations = 0.0, 0
    for _ in range(1000):
        gt = rng.normal(0, 0.5, (50, 3))
        pred = rng.uniform(0.3, 3) * gt @ Rotation.random(random_state=rng).as_matrix().T + rng.normal(0, 2, 3)
        worst_pa = max(worst_pa, pa_error(pred, gt))
        violations += pa_error(pred, gt) > mean_position_error(pred, gt)
        noisy = pred + rng.normal(0, rng.uniform(1e-3, 0.2), pred.shape)
        violations += pa_error(noisy, gt) > mean_position_error(noisy, gt)
    ok = worst_pa <= 1e-6 and violations == 0
    record(4, ok, f"max PA error {worst_pa:.2e} mm over 1000 similarity trials, PA > raw in {violations}/2000")
    assert ok


def test_criterion_5_camera_count_trend(benchmark):
    pa = [r.full.pa_mpjpe for r in benchmark["rows"]]
    steps = -np.diff(pa)
    rel12 = steps[0] / pa[0]
    ok = (np.all(steps > 0) and steps[0] == steps.max() and rel12 >= 0.10
          and benchmark["seconds"] < BENCHMARK_BUDGET_S)
    record(5, ok, "PA-MPJPE k=1..4: " + " -> ".join(f"{v:.2f}" for v in pa)
           + f" mm, 1->2 drop {100 * rel12:.1f}%, end to end {benchmark['seconds']:.0f} s")
    assert ok


def test_criterion_6_ablation_direction(benchmark):
    r = benchmark["rows"][-1]
    gain = (r.uniform.pa_mpjpe - r.jrn_only.pa_mpjpe) / r.uniform.pa_mpjpe
    ok = gain >= 0.05 and r.full.pa_mpvpe <= r.jrn_only.pa_mpvpe
    record(6, ok, f"k=4 PA-MPJPE uniform {r.uniform.pa_mpjpe:.2f} vs JRN {r.jrn_only.pa_mpjpe:.2f} "
                  f"({100 * gain:.1f}% better); PA-MPVPE JRN+SRN {r.full.pa_mpvpe:.3f} vs JRN-only "
                  f"{r.jrn_only.pa_mpvpe:.3f}")
    assert ok


def test_criterion_7_zero_noise(benchmark):
    model, asset = benchmark["model"], benchmark["asset"]
    scenes = generate_dataset(asset, 16, 4, NoiseConfig.zero(), 777, "test")
    rows = run_eval_sweep(model, scenes, [1, 2, 3, 4])
    worst = max(max(m.pa_mpjpe, m.pa_mpvpe) for r in rows for m in (r.full, r.uniform, r.jrn_only))
    ok = worst <= 1e-6
    record(7, ok, f"max PA-MPJPE/PA-MPVPE over k=1..4 and all fusion modes {worst:.2e} mm")
    assert ok


def test_criterion_8_lbs():
    a = make_chain_asset()
    pose = np.zeros((2, 3))
    pose[1] = [0.0, 0.0, 0.7]
    body = lbs_forward(a, ParamSet(pose, np.zeros((0, 3)), np.zeros(10), np.zeros(10)))
    j = a.joint_regressor @ a.template_vertices
    R = Rotation.from_rotvec(pose[1]).as_matrix()
    child = a.skin_weights[:, 1] == 1
    oracle = a.template_vertices.copy()
    oracle[child] = (a.template_vertices[child] - j[1]) @ R.T + j[1]
    rigid = float(np.abs(body.vertices - oracle).max())

    toy = make_toy_asset(200, 25, 0)
    rng = np.random.default_rng(8)
    pose = ParamSet(rng.uniform(-.4, .4, (21, 3)), rng.uniform(-.4, .4, (4, 3)), np.zeros(10), np.zeros(10))
    f = lambda s, e: lbs_forward(toy, pose.replace(p_shape=s, p_face=e)).vertices
    x, y = rng.normal(size=(2, 10)), rng.normal(size=(2, 10))
    lin = float(np.abs(f(*(x + y)) - f(*x) - f(*y) + f(np.zeros(10), np.zeros(10))).max())
    ok = rigid <= 1e-9 and lin <= 1e-9
    record(8, ok, f"chain rotation vs rigid oracle {rigid:.1e} m, blendshape linearity {lin:.1e}")
    assert ok


def test_criterion_9_determinism(tmp_path):
    cfg = {"data": {"n_cameras": 3, "train_scenes": 16, "val_scenes": 4, "test_scenes": 6},
           "srn": {"shape_res": [16, 16], "face_res": [8, 8], "base_channels": 4, "attn_dim": 4,
                   "reducer_hidden": [16]},
           "jrn": {"hidden": [16]}, "optimizer": {"epochs": 2}, "seed": 5}
    outputs = []
    for run in ("a", "b"):
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps({**cfg, "out_dir": str(tmp_path / run)}))
        for cmd in ("gen-data", "train", "eval"):
            assert main([cmd, "--config", str(path)]) == 0
        outputs.append({n: (tmp_path / run / n).read_bytes() for n in
                        ("checkpoint.mucw", "loss_log.csv", "eval_sweep.csv", "eval_scenes.csv", "test.jsonl")})
    same = [n for n in outputs[0] if outputs[0][n] == outputs[1][n]]
    ok = len(same) == len(outputs[0])
    record(9, ok, f"bit-identical across two runs: {', '.join(same)}")
    assert ok
