import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from structvo.evaluation import (
    Sim3Aligner,
    Similarity,
    Trajectory,
    align_sim3,
    associate,
    ate_rmse,
    evaluate,
    format_tum,
    parse_tum,
    read_tum,
    rpe,
    svg_plot,
    write_csv,
    write_svg,
    write_tum,
)
from structvo.exceptions import CorruptInput, DegenerateConfiguration, NoOverlap

from conftest import random_rotation


def random_trajectory(rng, n=50, dt=1 / 30):
    ts = np.arange(n) * dt
    p = np.cumsum(rng.normal(scale=0.05, size=(n, 3)), axis=0)
    q = Rotation.from_rotvec(np.cumsum(rng.normal(scale=0.02, size=(n, 3)), axis=0)).as_quat()
    return Trajectory(ts, p, q)


def shifted(traj, dt):
    return Trajectory(traj.timestamps + dt, traj.positions, traj.quaternions)


# ---------------------------------------------------------------- association


def test_associate_identity_and_offset(rng):
    t = random_trajectory(rng)
    np.testing.assert_array_equal(associate(t, t), np.c_[np.arange(50), np.arange(50)])
    np.testing.assert_array_equal(associate(shifted(t, 0.005), t), np.c_[np.arange(50), np.arange(50)])
    with pytest.raises(NoOverlap):
        associate(shifted(t, 100.0), t)


def test_associate_uses_each_pose_once():
    a = Trajectory([0.0, 0.01, 0.02], np.zeros((3, 3)), np.tile([0, 0, 0, 1.0], (3, 1)))
    b = Trajectory([0.011], np.zeros((1, 3)), [[0, 0, 0, 1.0]])
    np.testing.assert_array_equal(associate(a, b), [[1, 0]])


# ---------------------------------------------------------------- alignment


def test_align_identity(rng):
    X = rng.normal(size=(20, 3))
    sim = align_sim3(X, X)
    assert sim.s == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(sim.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(sim.t, 0.0, atol=1e-12)


def test_align_exact_inverse(rng):
    for _ in range(20):
        R0, t0 = random_rotation(rng), rng.normal(size=3)
        gt = rng.normal(size=(30, 3)) * 3
        est = 0.5 * (gt - t0) @ R0  # (1/2) R0^T (gt - t0)
        sim = align_sim3(est, gt)
        assert sim.s == pytest.approx(2.0, abs=1e-9)
        np.testing.assert_allclose(sim.R, R0, atol=1e-9)
        np.testing.assert_allclose(sim.t, t0, atol=1e-9)


def test_align_matches_nonlinear_minimization(rng):
    def residual(x, X, Y):
        s, R, t = np.exp(x[0]), Rotation.from_rotvec(x[1:4]).as_matrix(), x[4:]
        return np.sum((Y - (s * X @ R.T + t)) ** 2)

    for _ in range(10):
        R0, t0 = random_rotation(rng), rng.normal(size=3)
        X = rng.normal(size=(10, 3))
        Y = 1.7 * X @ R0.T + t0 + rng.normal(scale=0.1, size=(10, 3))
        sim = align_sim3(X, Y)
        closed = np.sqrt(np.mean(np.sum((Y - sim.apply(X)) ** 2, axis=1)))
        best = np.inf
        for start in range(8):
            x0 = np.r_[0.0, Rotation.from_matrix(random_rotation(rng)).as_rotvec(), 0, 0, 0]
            r = minimize(residual, x0, args=(X, Y), method="BFGS", options={"gtol": 1e-12})
            best = min(best, np.sqrt(r.fun / len(X)))
        assert closed == pytest.approx(best, abs=1e-6)
        assert closed <= best + 1e-12


def test_align_rejects_collinear_points():
    X = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        align_sim3(X, X)
    with pytest.raises(DegenerateConfiguration):
        align_sim3(np.ones((5, 3)), np.ones((5, 3)))


def test_rigid_alignment_fixes_scale(rng):
    X = rng.normal(size=(20, 3))
    assert align_sim3(2 * X, X, with_scale=False).s == 1.0


def test_aligner_estimator(rng):
    X = rng.normal(size=(20, 3))
    R0 = random_rotation(rng)
    Y = 3.0 * X @ R0.T + 1.0
    np.testing.assert_allclose(Sim3Aligner().fit(X, Y).transform(X), Y, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_alignment_never_worse_than_identity(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(8, 3))
    Y = X + rng.normal(scale=rng.uniform(0.01, 2), size=(8, 3))
    assert ate_rmse(X, Y, align_sim3(X, Y)) <= ate_rmse(X, Y) + 1e-12


# ---------------------------------------------------------------- ATE and RPE


def test_ate_hand_case():
    gt = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    est = gt.copy()
    est[0, 0] += 0.1
    assert ate_rmse(est, gt, Similarity.identity()) == pytest.approx(0.05, abs=1e-15)
    assert ate_rmse(gt, gt) == 0.0


def test_ate_matches_brute_force(rng):
    gt = rng.normal(size=(30, 3))
    est = gt + rng.normal(scale=0.05, size=(30, 3))
    sim = align_sim3(est, gt)
    ref = np.sqrt(sum(sum((g[k] - (sim.s * sum(sim.R[k, m] * e[m] for m in range(3)) + sim.t[k])) ** 2
                          for k in range(3)) for e, g in zip(est, gt)) / len(gt))
    assert ate_rmse(est, gt, sim) == pytest.approx(ref, rel=1e-12)


def test_ate_invariant_to_similarity_of_estimate(rng):
    gt = random_trajectory(rng)
    est = Trajectory(gt.timestamps, gt.positions + rng.normal(scale=0.02, size=gt.positions.shape), gt.quaternions)
    a = evaluate(est, gt).ate_rmse
    b = evaluate(est.transformed(4.2, random_rotation(rng), rng.normal(size=3)), gt).ate_rmse
    assert a == pytest.approx(b, abs=1e-9)


def test_rpe_zero_and_global_invariance(rng):
    gt = random_trajectory(rng)
    assert rpe(gt, gt) == pytest.approx((0.0, 0.0), abs=1e-12)
    moved = gt.transformed(1.0, random_rotation(rng), rng.normal(size=3))
    assert rpe(moved, gt) == pytest.approx((0.0, 0.0), abs=1e-9)
    est = Trajectory(gt.timestamps, gt.positions + rng.normal(scale=0.01, size=gt.positions.shape), gt.quaternions)
    a = rpe(est, gt)
    b = rpe(est.transformed(1.0, random_rotation(rng), rng.normal(size=3)), gt)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_rpe_recovers_injected_rotation_noise():
    """Isotropic per-step rotation noise with 0.1 deg RMS gives rot-RPE near 0.1 deg."""
    rng = np.random.default_rng(5)
    gt = random_trajectory(rng, 2000)
    G = Rotation.from_quat(gt.quaternions)
    noise = Rotation.from_rotvec(rng.normal(scale=np.deg2rad(0.1) / np.sqrt(3), size=(1999, 3)))
    est = [G[0]]
    for i in range(1999):
        est.append(est[-1] * (G[i].inv() * G[i + 1]) * noise[i])
    q = Rotation.concatenate(est).as_quat()
    _, rot = rpe(Trajectory(gt.timestamps, gt.positions, q), gt)
    assert rot == pytest.approx(0.1, rel=0.05)


def test_evaluate_report(rng):
    gt = random_trajectory(rng, 120)
    rep = evaluate(gt, gt)
    assert rep.ate_rmse == pytest.approx(0.0, abs=1e-9) and rep.n_pairs == 120
    assert rep.alignment.s == pytest.approx(1.0)
    assert rep.table_row("x").startswith("| x | 120 | 0.000 |")
    assert np.isfinite(rep.rpe_trans_1s)


# ---------------------------------------------------------------- files


def test_tum_round_trip_is_bit_stable(tmp_path, rng):
    t = random_trajectory(rng)
    write_tum(tmp_path / "a.txt", t, "header")
    a = read_tum(tmp_path / "a.txt")
    write_tum(tmp_path / "b.txt", a, "header")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert read_tum(tmp_path / "b.txt").equals(a)
    np.testing.assert_allclose(a.positions, t.positions, atol=5e-10)


def test_tum_quaternion_tolerances(caplog):
    ok = parse_tum("0 1 2 3 0 0 0 1.0000005\n")
    assert ok.quaternions[0, 3] == 1.0000005
    warned = parse_tum("0 1 2 3 0 0 0 1.0005\n")
    assert np.linalg.norm(warned.quaternions[0]) == pytest.approx(1.0, abs=1e-15)
    assert "renormalizing" in caplog.text
    with pytest.raises(CorruptInput):
        parse_tum("0 1 2 3 0 0 0 1.01\n")


@pytest.mark.parametrize("text", ["0 1 2 3 0 0 0\n", "0 1 2 x 0 0 0 1\n", "1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n",
                                  "0 nan 0 0 0 0 0 1\n"])
def test_tum_rejects_garbage(text):
    with pytest.raises(CorruptInput):
        parse_tum(text)


def test_tum_comments_and_blank_lines():
    t = parse_tum("# header\n\n0.5 1 2 3 0 0 0 1 # trailing\n")
    assert len(t) == 1 and t.timestamps[0] == 0.5
    assert format_tum(t).splitlines()[-1] == "0.500000 1.000000000 2.000000000 3.000000000 " \
                                             "0.000000000 0.000000000 0.000000000 1.000000000"


def test_csv_and_svg(tmp_path, rng):
    gt = random_trajectory(rng)
    est = gt.transformed(0.5, random_rotation(rng), [1, 2, 3])
    rep = evaluate(est, gt)
    write_csv(tmp_path / "e.csv", rep)
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "timestamp,ate_error_m" and len(rows) == 51
    write_svg(tmp_path / "p.svg", est, gt, rep)
    root = ET.parse(tmp_path / "p.svg").getroot()
    polylines = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert [p.get("id") for p in polylines] == ["estimate", "ground_truth"]
    assert ET.fromstring(svg_plot({"a&b": np.zeros((2, 3))}, "x<y")) is not None
