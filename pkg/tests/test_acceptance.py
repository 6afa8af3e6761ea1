"""Acceptance criteria. Each test prints one PASS/FAIL line and asserts the stated threshold."""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import record_criterion
from oracles import full_window_oracle, sequence_run, shape_recovery
from test_objectives import single_joint_model
from test_optim import fd_gradient, random_problem
from seqfit.bodies import toy_model
from seqfit.energy import FitProblem, Temporal
from seqfit.metrics import (
    TriMesh, build_aabb_tree, closest_point, closest_point_brute_force, icosphere, icp_align, jitter_statistic,
    mean_joint_error, mesh_volume, unit_cube, vertex_to_surface_error,
)
from seqfit.model import PoseParams, forward_kinematics, rest_vertices
from seqfit.objectives import FrameParams, Stage, StageSchedule, temporal_loss
from seqfit.rotation import rodrigues

SEEDS = range(10)


def _volume(spec, beta):
    return mesh_volume(TriMesh(rest_vertices(spec, beta), spec.faces))


def test_criterion_1_gradient():
    t0 = time.perf_counter()
    spec = toy_model(6)
    rng = np.random.default_rng(2024)
    sched = StageSchedule()
    worst = 0.0
    for _ in range(100):
        prob, block = random_problem(spec, rng, frames=3, context=True)
        f = prob.objective(sched.stages[int(rng.integers(0, 5))])
        _, g = f(block.x)
        free = prob.layout.free_mask()
        num = fd_gradient(f, block.x)
        worst = max(worst, np.linalg.norm(g[free] - num[free]) / np.linalg.norm(num[free]))
    seconds = time.perf_counter() - t0
    ok = worst < 1e-4 and seconds < 60
    record_criterion(1, ok, f"max relative gradient error {worst:.2e} over 100 configs, {seconds:.1f} s")
    assert ok


def test_criterion_2_window_oracle():
    o = full_window_oracle()
    rel = abs(o.window_objective - o.direct_objective) / abs(o.direct_objective)
    ok = rel < 1e-4 and o.seconds < 300
    record_criterion(2, ok, f"window {o.window_objective:.6f} vs direct {o.direct_objective:.6f}, "
                            f"relative difference {rel:.2e}, {o.seconds:.1f} s")
    assert ok


@pytest.mark.slow
def test_criterion_3_temporal_consistency(body):
    reductions, seconds = [], 0.0
    for seed in SEEDS:
        run = sequence_run("wave", seed)
        seconds += run.seconds
        j1 = jitter_statistic(run.phase1.joints(body))
        j3 = jitter_statistic(run.final.joints(body))
        reductions.append(1.0 - j3 / j1)
    wins = sum(r > 0 for r in reductions)
    median = float(np.median(reductions))
    ok = wins >= 9 and median >= 0.30 and seconds < 1800
    record_criterion(3, ok, f"jitter reduced in {wins}/10 seeds, median reduction {median:.1%}, {seconds:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_4_shape_consistency(body):
    identical, wins, detail = True, 0, []
    for seed in SEEDS:
        run = sequence_run("wave", seed)
        identical &= all(np.array_equal(f.beta, run.final.shared_shape) for f in run.final.frames)
        v_true = _volume(body, run.beta)
        err_shared = abs(_volume(body, run.final.shared_shape) - v_true)
        err_frames = float(np.median([abs(_volume(body, f.beta) - v_true) for f in run.phase1.frames]))
        wins += err_shared <= err_frames
        detail.append(f"{err_shared * 1000:.2f}/{err_frames * 1000:.2f}")
    ok = identical and wins >= 8
    record_criterion(4, ok, f"shapes bit-identical: {identical}; shared volume error <= median per-frame "
                            f"error in {wins}/10 seeds (dm^3 shared/per-frame: {', '.join(detail)})")
    assert ok


@pytest.mark.slow
def test_criterion_5_shape_recovery():
    errors, seconds = [], 0.0
    for seed in SEEDS:
        r = shape_recovery(seed)
        seconds += r.seconds
        errors.append(float(np.abs(r.estimate - r.truth).max()))
    hits = sum(e < 0.1 for e in errors)
    ok = hits >= 9 and seconds < 600
    record_criterion(5, ok, f"max-norm error < 0.1 in {hits}/10 seeds (errors {', '.join(f'{e:.2f}' for e in errors)}), "
                            f"{seconds:.0f} s")
    assert ok


def test_criterion_6_temporal_facts():
    spec = toy_model(6)
    rng = np.random.default_rng(6)
    poses = [PoseParams.from_rotvecs(rng.normal(size=(6, 3))) for _ in range(3)]
    beta = rng.normal(size=3)
    boundary = max(temporal_loss(spec, beta, poses, 100.0, 0, 8), temporal_loss(spec, beta, poses, 100.0, 7, 8))
    # exactly linear joint trajectory around the middle frame
    mid = forward_kinematics(spec, beta, poses[1]).positions
    d = rng.normal(scale=0.05, size=3)
    zero = Stage(0, 0, 0, 0, (0, 0, 0), 0, 0, 0, 0, 0, 0)
    prob = FitProblem(spec, [None], 5000.0, (0, 0), scale=1.0,
                      temporal=Temporal(np.array([[1, 0, 2]]), np.stack([mid - d, mid + d]), 100.0))
    linear = prob.evaluate(prob.pack([FrameParams(beta, poses[1], (0, 0, 3))]).x, zero, with_grad=False)[0]
    hand_spec = single_joint_model([1.0, 0.0, 0.0])
    hp = FitProblem(hand_spec, [None], 5000.0, (0, 0), scale=1.0,
                    temporal=Temporal(np.array([[1, 0, 2]]), np.zeros((2, 1, 3)), 100.0))
    hand = hp.evaluate(hp.pack([FrameParams(np.zeros(1), PoseParams.rest(hand_spec), (0, 0, 3))]).x, zero,
                       with_grad=False)[0]
    ok = boundary == 0.0 and linear < 1e-12 and abs(hand - 400.0 / 9.0) < 1e-9
    record_criterion(6, ok, f"boundary {boundary}, linear {linear:.1e}, hand case {hand:.12f}")
    assert ok


def test_criterion_7_schedule_table():
    d = StageSchedule().to_dict()
    got = (d["body_pose"][0], d["bending"][2], d["joints_hand"][4])
    ok = got == (404.0, 13.5, 2.0)
    record_criterion(7, ok, f"body pose stage 1 = {got[0]}, bending stage 3 = {got[1]}, hand joints stage 5 = {got[2]}")
    assert ok


def test_criterion_8_metrics(body):
    cube = mesh_volume(unit_cube())
    sphere = mesh_volume(icosphere(3))
    sphere_rel = abs(sphere - 4.0 / 3.0 * math.pi) / (4.0 / 3.0 * math.pi)
    mesh = TriMesh(body.template_vertices, body.faces)
    rng = np.random.default_rng(8)
    q = rng.uniform(mesh.vertices.min(0) - 0.2, mesh.vertices.max(0) + 0.2, (1000, 3))
    brute_gap = float(np.abs(closest_point(build_aabb_tree(mesh), q)[1] - closest_point_brute_force(mesh, q)[1]).max())
    target = TriMesh(icosphere(2, 0.5).vertices @ np.diag([1.0, 0.7, 1.3]), icosphere(2).faces)
    source = target.transformed(rodrigues(np.array([0.1, -0.25, 0.3])), [0.2, -0.1, 0.05])
    icp_rms = icp_align(source, target).rms
    self_v2s = vertex_to_surface_error(mesh, mesh)
    ok = cube == 1.0 and sphere_rel < 0.02 and brute_gap <= 1e-12 and icp_rms < 1e-6 and self_v2s < 1e-9
    record_criterion(8, ok, f"cube {cube}, sphere off by {sphere_rel:.2%}, tree vs brute force {brute_gap:.1e}, "
                            f"ICP RMS {icp_rms:.1e} m, self v2s {self_v2s:.1e} cm")
    assert ok


@pytest.mark.slow
def test_criterion_9_crouch(body):
    wins, detail = 0, []
    for seed in SEEDS:
        run = sequence_run("crouch", seed)
        e1 = mean_joint_error(run.phase1.joints(body), run.truth_joints)
        e3 = mean_joint_error(run.final.joints(body), run.truth_joints)
        wins += e3 < e1
        detail.append(f"{e1 * 100:.2f}->{e3 * 100:.2f}")
    ok = wins >= 8
    record_criterion(9, ok, f"phase-3 joint error below phase-1 in {wins}/10 seeds (cm: {', '.join(detail)})")
    assert ok


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    env = dict(os.environ, SEQFIT_THREADS="1")
    cmd = [sys.executable, "-m", "seqfit.cli"]
    kp = tmp_path / "kp.json"
    subprocess.run(cmd + ["synth", "--frames", "8", "--noise", "3", "--seed", "5", "--out", str(kp)],
                   check=True, env=env)
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        subprocess.run(cmd + ["fit", "--keypoints", str(kp), "--out", str(out / "fit.json"), "--no-timings",
                              "--checkpoint-dir", str(out)], check=True, env=env)
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    ok = outputs[0] == outputs[1] and len(outputs[0]) == 4
    record_criterion(10, ok, f"{len(outputs[0])} output files compared, identical: {outputs[0] == outputs[1]}")
    assert ok
