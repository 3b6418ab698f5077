import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from impulse_assist.decomp import analyze
from impulse_assist.metrics import (
    evaluate, impulse_statistics, jitter, points_rmse, pose_error, velocity_error)
from impulse_assist.model import MotionParams, make_chain3, make_free_body, neutral_q, random_q, synthesize_exaggerated
from impulse_assist.rotations import quat_exp, quat_mul, quat_to_matrix
from impulse_assist.sim import SimConfig, beta_one_controller, default_gains, feedback_controller


def test_pose_error_examples(rng):
    m = make_chain3()
    q = random_q(m, rng)
    assert pose_error(m, q, q) == 0.0
    moved = q.copy()
    moved[:3] += [1.0, 0, 0]
    assert pose_error(m, moved, q) == pytest.approx(0.0, abs=1e-14)
    assert points_rmse(np.zeros((3, 3)), [[0.3, 0, 0], [0, 0, 0], [0, 0, 0]]) == pytest.approx(np.sqrt(0.09 / 3))
    with pytest.raises(ValueError):
        pose_error(m, q[:-1], q)


@given(st.integers(0, 10_000))
def test_pose_error_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    m = make_chain3()
    q, ref = random_q(m, rng), random_q(m, rng)
    rot = quat_exp(rng.normal(size=3))
    moved = q.copy()
    moved[:3] = quat_to_matrix(rot) @ q[:3] + rng.normal(size=3)
    moved[3:7] = quat_mul(rot, q[3:7])
    assert pose_error(m, moved, ref) == pytest.approx(pose_error(m, q, ref), abs=1e-12)


def test_pose_error_joint_angle_variant():
    m = make_chain3()
    q = neutral_q(m)
    ref = q.copy()
    ref[7:] = [0.3, -0.3]
    assert pose_error(m, q, ref, kind="joints") == pytest.approx(0.3)
    with pytest.raises(ValueError):
        pose_error(m, q, ref, kind="angles")


def test_velocity_error_examples():
    z = np.zeros(10)
    one = z.copy()
    one[6] = 0.6
    assert velocity_error(z, z) == 0.0
    assert velocity_error(one, z) == pytest.approx(0.3)
    const = z.copy()
    const[6:] = 0.25
    assert velocity_error(const, z) == pytest.approx(0.25)
    assert velocity_error(np.ones(6), np.zeros(6)) == 0.0
    with pytest.raises(ValueError):
        velocity_error(z, z[:-1])


def test_impulse_statistics_examples():
    s = impulse_statistics(np.zeros((4, 6)))
    assert s["total_lin"] == 0 and s["ref_lin"] is None
    s = impulse_statistics(np.tile([3.0, 4, 0, 0, 0, 0], (5, 1)))
    assert s["total_lin"] == pytest.approx(5.0)
    with pytest.raises(ValueError):
        impulse_statistics(np.zeros((0, 6)))


@given(arrays(float, (6, 6), elements=st.floats(-100, 100)), arrays(float, (6, 6), elements=st.floats(-100, 100)))
def test_impulse_triangle_inequality(ref, res):
    s = impulse_statistics(ref + res, ref, res)
    assert s["total_lin"] <= s["ref_lin"] + s["res_lin"] + 1e-9
    assert s["total_ang"] <= s["ref_ang"] + s["res_ang"] + 1e-9


def test_jitter_examples():
    assert jitter(np.ones((10, 6))) == 0.0
    ramp = np.outer(np.arange(10.0), np.arange(6.0))
    assert jitter(ramp) == pytest.approx(0.0, abs=1e-12)
    alt = np.zeros((9, 6))
    alt[:, 0] = [(-1) ** i for i in range(9)]
    assert jitter(alt) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        jitter(np.zeros((2, 6)))


@pytest.fixture(scope="module")
def dash():
    m = make_free_body(5.0)
    traj = synthesize_exaggerated("ground_dash", MotionParams(), m)
    return m, traj, analyze(m, traj).profile


def test_evaluate_beta_one_has_zero_residual(dash):
    m, traj, base = dash
    r = evaluate(m, traj, base, beta_one_controller, default_gains(m), n_episodes=2)
    assert r.impulse["res_lin"] == 0 and r.impulse["res_ang"] == 0
    assert r.impulse["total_lin"] == pytest.approx(r.impulse["ref_lin"])
    assert r.success_rate == 0.0
    assert "N/A" not in r.to_csv()


def test_evaluate_standing_succeeds_and_is_deterministic():
    m = make_free_body(5.0)
    traj = synthesize_exaggerated("ground_dash", MotionParams(peak_speed=0.0), m)
    base = analyze(m, traj).profile
    a = evaluate(m, traj, base, feedback_controller(), default_gains(m), n_episodes=2, seed=4)
    b = evaluate(m, traj, base, feedback_controller(), default_gains(m), n_episodes=2, seed=4)
    assert a.success_rate == 1.0
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()


def test_success_monotone_in_threshold(dash):
    m, traj, base = dash
    rates = [evaluate(m, traj, base, feedback_controller(), default_gains(m), 2,
                      config=SimConfig(max_root_error=t)).success_rate for t in (0.5, 0.1, 0.02, 0.005)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_report_csv_marks_missing_columns(dash):
    m, traj, base = dash
    r = evaluate(m, traj, base, feedback_controller(), default_gains(m), 1, decomposes=False)
    header, row = r.to_csv().strip().splitlines()
    cols = dict(zip(header.split(","), row.split(",")))
    assert cols["ref_lin"] == "N/A" and cols["res_ang"] == "N/A" and cols["beta_lin_mean"] == "N/A"
    assert header.split(",")[:4] == ["pos_mean", "pos_std", "vel_mean", "vel_std"]
