import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import nnls

from _instances import base_jacobian, objective, random_instance, stacked_lsq
from impulse_assist.decomp import (
    ContactPoint, QPWeights, analyze, build_qp, friction_pyramid, impulse_baseline, kkt_check, profile_csv,
    qp_solve, read_profile_csv)
from impulse_assist.model import MotionParams, make_chain3, make_free_body, synthesize_exaggerated

MG = 5.0 * 9.81


@given(st.floats(0.1, 2.0), st.integers(3, 8))
def test_pyramid_edges_lie_on_cone(mu, k):
    n = np.array([0.1, -0.2, 1.0])
    n /= np.linalg.norm(n)
    E = friction_pyramid(n, mu, k)
    np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-12)
    fn = E @ n
    ft = np.linalg.norm(E - fn[:, None] * n, axis=1)
    np.testing.assert_allclose(ft, mu * fn, atol=1e-12)


def test_single_contact_closed_form():
    # one contact straight below the origin carrying the weight:
    # min 10 W_z^2 + lam f_z^2 with W_z = mg - f_z  =>  f_z = 10 mg / (10 + lam)
    lam = 1e-4
    x = np.array([0, 0, -0.15])
    prob = build_qp([0, 0, MG, 0, 0, 0], [ContactPoint(0, x, x)], [base_jacobian(x)], QPWeights(lam=lam))
    res = qp_solve(prob)
    f_z = 10 * MG / (10 + lam)
    np.testing.assert_allclose(res.contact_forces[0], [0, 0, f_z], atol=1e-9)
    np.testing.assert_allclose(res.assist_wrench.vector, [0, 0, MG - f_z, 0, 0, 0], atol=1e-9)
    assert np.linalg.norm(res.assist_wrench.vector) <= 1e-3 * MG


def test_no_contacts_assist_equals_demand():
    d = np.array([1.0, -2.0, 50.0, 0.3, 0.0, -4.0])
    res = qp_solve(build_qp(d, [], []))
    np.testing.assert_allclose(res.assist_wrench.vector, d, atol=1e-12)


def test_pull_demand_cannot_use_contact():
    # contacts only push; a downward demand must come entirely from the assist
    x = np.array([0.1, 0, -0.15])
    res = qp_solve(build_qp([0, 0, -30.0, 0, 0, 0], [ContactPoint(0, x, x)], [base_jacobian(x)]))
    np.testing.assert_allclose(res.contact_forces, 0, atol=1e-12)
    np.testing.assert_allclose(res.assist_wrench.force, [0, 0, -30], atol=1e-12)


def test_friction_limit_brute_force_grid():
    # one contact below the origin, horizontal demand beyond the friction cone
    mu, lam = 0.5, 1e-4
    x = np.array([0, 0, -0.15])
    d = np.array([80.0, 0, MG, 0, 0, 0])
    cp = ContactPoint(0, x, x, mu=mu)
    prob = build_qp(d, [cp], [base_jacobian(x)], QPWeights(lam=lam))
    res = qp_solve(prob)
    J = base_jacobian(x)
    best = np.inf
    for fz in np.linspace(0, 2 * MG, 401):
        for fx in np.linspace(-mu * fz, mu * fz, 201):
            f = np.array([fx, 0, fz])
            W = d - J.T @ f
            best = min(best, W @ prob.Q @ W + lam * f @ f)
    assert res.objective <= best + 1e-9
    assert res.objective >= best - 0.05 * best


def test_matches_nnls_oracle(rng):
    for _ in range(200):
        prob, _, _ = random_instance(rng, n_contacts=int(rng.integers(1, 5)))
        res = qp_solve(prob)
        A, y = stacked_lsq(prob)
        c_ref, _ = nnls(A, y, maxiter=2000)
        ref = objective(prob, c_ref)
        assert res.objective <= ref + 1e-8 * max(1.0, ref)
        assert abs(res.objective - ref) <= 1e-7 * max(1.0, ref)


@given(st.integers(0, 100_000))
def test_kkt_residuals_small(seed):
    prob, _, _ = random_instance(np.random.default_rng(seed))
    res = qp_solve(prob)
    kkt = kkt_check(prob, res, tol=1e-6)
    assert kkt["passed"], kkt
    assert res.converged


def test_warm_start_reaches_same_forces(rng):
    prob, _, _ = random_instance(rng, n_contacts=3)
    cold = qp_solve(prob)
    warm = qp_solve(prob, warm_start=cold.coefficients + 0.1)
    np.testing.assert_allclose(warm.contact_forces, cold.contact_forces, atol=1e-6)


def test_weight_validation():
    with pytest.raises(ValueError, match="symmetric"):
        build_qp(np.zeros(6), [], [], QPWeights(Q=np.triu(np.ones((6, 6)))))
    with pytest.raises(ValueError, match="semi-definite"):
        build_qp(np.zeros(6), [], [], QPWeights(Q=-np.eye(6)))
    with pytest.raises(ValueError, match="lambda"):
        build_qp(np.zeros(6), [], [], QPWeights(lam=0.0))


def test_impulse_baseline_is_wrench_times_dt():
    W = np.arange(12.0).reshape(2, 6)
    prof = impulse_baseline(W, 0.5)
    np.testing.assert_array_equal(prof.I_base, W * 0.5)
    with pytest.raises(ValueError):
        impulse_baseline(W, 0.0)


def test_standing_needs_no_assist():
    m = make_free_body(5.0)
    traj = synthesize_exaggerated("ground_dash", MotionParams(peak_speed=0.0), m)
    an = analyze(m, traj)
    assert np.abs(an.profile.I_base).max() <= 1e-3
    total = sum(f[:, 2].sum() for f in an.contact_forces[:1])
    assert total == pytest.approx(MG, rel=1e-4)


def test_ground_dash_impulse_concentrated_in_dash_window():
    m = make_free_body(5.0)
    traj = synthesize_exaggerated("ground_dash", MotionParams(), m)
    an = analyze(m, traj)
    I = an.profile.I_base
    onset = traj.frames_labelled("dash-onset")
    rest = traj.frames_labelled("rest")
    assert I[onset, 0].sum() > 10.0
    assert np.abs(I[rest, 0]).max() < 1e-6
    assert an.nonconverged_frames == []


def test_chain3_standing_profile_and_csv_roundtrip():
    m = make_chain3()
    traj = synthesize_exaggerated("ground_dash", MotionParams(peak_speed=3.0), m)
    an = analyze(m, traj)
    text = profile_csv(m, an)
    header = text.splitlines()[0].split(",")
    assert header[:13] == ["t", "Wx", "Wy", "Wz", "Wtx", "Wty", "Wtz", "Ix", "Iy", "Iz", "Itx", "Ity", "Itz"]
    assert header[-1] == "kkt_stationarity" and "c3_ft" in header
    back = read_profile_csv(text)
    np.testing.assert_array_equal(back.I_base, an.profile.I_base)
    np.testing.assert_array_equal(back.W_assist, an.profile.W_assist)
