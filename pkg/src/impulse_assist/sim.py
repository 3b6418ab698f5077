"""Floating-base simulator with PD actuation, penalty ground contact and root wrench injection.

The control loop runs once per reference frame (dt_control = traj.dt); each
control step spans ``decimation`` simulator steps, and each simulator step is
integrated with ``substeps`` semi-implicit Euler sub-steps so the penalty
contact stays stable for light bodies.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .decomp import ImpulseProfile
from .dynamics import SpatialWrench, kernel
from .model import CharacterModel, ReferenceTrajectory
from .policy import clamp_norm, compose_impulse
from .rotations import quat_conj, quat_exp, quat_log, quat_mul
from . import _kernels_py

SIGMA_LIN = 25.0  # N·s
SIGMA_ANG = 8.0  # N·m·s


@dataclass
class SimState:
    q: np.ndarray
    v: np.ndarray
    time: float = 0.0
    pd_torques: Optional[np.ndarray] = None
    root_wrench: np.ndarray = field(default_factory=lambda: np.zeros(6))
    contact_forces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def copy(self) -> "SimState":
        return SimState(self.q.copy(), self.v.copy(), self.time,
                        None if self.pd_torques is None else self.pd_torques.copy(),
                        self.root_wrench.copy(), self.contact_forces.copy())


@dataclass(frozen=True)
class PDGains:
    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.kp) < 0) or np.any(np.asarray(self.kd) < 0):
            raise ValueError("PD gains must be non-negative")

    @classmethod
    def uniform(cls, n, kp, kd) -> "PDGains":
        return cls(np.full(n, float(kp)), np.full(n, float(kd)))


@dataclass(frozen=True)
class ContactParams:
    k_n: float = 2.0e4
    d_n: float = 200.0
    mu: float = 0.8
    k_t: float = 200.0

    def __post_init__(self):
        if min(self.k_n, self.d_n, self.mu, self.k_t) <= 0:
            raise ValueError("contact parameters must be positive")

    @property
    def tuple(self):
        return (self.k_n, self.d_n, self.mu, self.k_t)


@dataclass(frozen=True)
class TerminationParams:
    max_root_error: float = 0.5
    min_root_height: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    decimation: int = 2
    substeps: int = 4
    contact: ContactParams = ContactParams()
    max_root_error: float = 0.5
    min_height_fraction: float = 0.3
    implicit_damping: bool = True
    init_pos_noise: float = 0.01
    init_vel_noise: float = 0.05
    init_joint_noise: float = 0.02


def pd_torques(q_joints, v_joints, target, gains: PDGains, implicit: bool = False,
               dt: float = 0.0, inertia=None) -> np.ndarray:
    """kp (target - q) - kd v; the implicit variant damps the post-step velocity

    v+ = v + dt tau / I, which for a diagonal inertia estimate gives
    tau = (kp e - kd v) / (1 + dt kd / I).
    """
    q_joints = np.asarray(q_joints, dtype=float)
    v_joints = np.asarray(v_joints, dtype=float)
    target = np.asarray(target, dtype=float)
    n = len(q_joints)
    if v_joints.shape != (n,) or target.shape != (n,) or np.shape(gains.kp) != (n,):
        raise ValueError("PD dimension mismatch")
    tau = gains.kp * (target - q_joints) - gains.kd * v_joints
    if implicit:
        if inertia is None or not dt > 0:
            raise ValueError("implicit damping needs dt and a joint inertia estimate")
        tau = tau / (1.0 + dt * gains.kd / np.asarray(inertia, dtype=float))
    return tau


def _sites(model: CharacterModel):
    links = np.array([c.link for c in model.contacts], dtype=np.intp)
    local = np.array([c.point for c in model.contacts], dtype=float).reshape(-1, 3)
    return links, local


def ground_contact_forces(model: CharacterModel, state: SimState,
                          params: ContactParams = ContactParams()) -> np.ndarray:
    """Per-site penalty forces (n_sites, 3) at the current state."""
    links, local = _sites(model)
    if not len(links):
        return np.zeros((0, 3))
    pos, vel = kernel(model).points_state(state.q, state.v, links, local)
    return _kernels_py.contact_law(pos, vel, *params.tuple)


def link_wrench_generalized(model: CharacterModel, q, link: int, force, torque) -> np.ndarray:
    """Generalized force of a force at the link COM plus a pure torque on the link."""
    k = kernel(model)
    R, p, z = k.frames(q)
    com = p[link] + R[link] @ model.kernel.com[link]
    gen = k.points_generalized_force(q, np.array([link], dtype=np.intp), com[None], np.asarray(force)[None])
    torque = np.asarray(torque, dtype=float)
    gen[3:6] += torque
    kk = model.kernel
    l = link
    while kk.link_joint[l] >= 0:
        j = kk.link_joint[l]
        gen[6 + j] += z[j] @ torque
        l = kk.j_parent[j]
    return gen


def step(model: CharacterModel, state: SimState, joint_torques, root_wrench, dt: float,
         contact: ContactParams = ContactParams(), extra_generalized=None) -> SimState:
    """One semi-implicit Euler step of M a = S^T tau + J_c^T f + W - bias."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    tau = np.asarray(joint_torques, dtype=float)
    if tau.shape != (model.n_joints,):
        raise ValueError(f"joint torques have shape {tau.shape}, expected ({model.n_joints},)")
    W = root_wrench.vector if isinstance(root_wrench, SpatialWrench) else np.asarray(root_wrench, dtype=float)
    if W.shape != (6,):
        raise ValueError("root wrench must be a 6-vector")
    Wk, tk = W, tau
    if extra_generalized is not None:
        Wk = W + extra_generalized[:6]
        tk = tau + extra_generalized[6:]
    links, local = _sites(model)
    try:
        q, v, fc = kernel(model).step(state.q, state.v, tk, Wk, model.gravity, links, local,
                                      contact.tuple, dt)
    except np.linalg.LinAlgError as exc:
        M = kernel(model).mass_matrix(state.q)
        raise np.linalg.LinAlgError(f"singular mass matrix (condition number {np.linalg.cond(M):.3g})") from exc
    return SimState(np.asarray(q), np.asarray(v), state.time + dt, tau.copy(), W.copy(), np.asarray(fc))


# ---------------------------------------------------------------------------
# perturbations

@dataclass(frozen=True)
class PerturbationEvent:
    start_step: int
    duration_steps: int
    force: np.ndarray
    torque: np.ndarray
    target_link: int = 0


@dataclass(frozen=True)
class PerturbationRanges:
    gap: tuple = (20, 80)
    duration: tuple = (3, 12)
    force: tuple = (100.0, 500.0)
    torque: tuple = (20.0, 50.0)


@dataclass(frozen=True)
class PerturbationSchedule:
    events: tuple = ()

    def active(self, sim_step: int):
        return [e for e in self.events if e.start_step <= sim_step < e.start_step + e.duration_steps]

    def to_json(self) -> str:
        return json.dumps({"events": [
            {"start_step": e.start_step, "duration_steps": e.duration_steps,
             "force": list(map(float, e.force)), "torque": list(map(float, e.torque)),
             "target_link": e.target_link} for e in self.events]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PerturbationSchedule":
        doc = json.loads(text)
        return cls(tuple(PerturbationEvent(int(e["start_step"]), int(e["duration_steps"]),
                                           np.array(e["force"], float), np.array(e["torque"], float),
                                           int(e.get("target_link", 0))) for e in doc["events"]))


def _random_direction(rng):
    d = rng.normal(size=3)
    return d / np.linalg.norm(d)


def sample_perturbations(rng_seed: int, horizon_steps: int,
                         ranges: PerturbationRanges = PerturbationRanges(),
                         target_link: int = 0) -> PerturbationSchedule:
    """Events separated by uniform gaps, each with a uniformly sampled duration,
    force magnitude and torque magnitude along random directions."""
    if horizon_steps < 0:
        raise ValueError("horizon must be non-negative")
    rng = np.random.default_rng(rng_seed)
    events = []
    t = 0
    while True:
        t += int(rng.integers(ranges.gap[0], ranges.gap[1] + 1))
        if t >= horizon_steps:
            break
        dur = int(rng.integers(ranges.duration[0], ranges.duration[1] + 1))
        f = _random_direction(rng) * rng.uniform(*ranges.force)
        tq = _random_direction(rng) * rng.uniform(*ranges.torque)
        events.append(PerturbationEvent(t, dur, f, tq, target_link))
        t += dur
    return PerturbationSchedule(tuple(events))


def termination_check(state: SimState, ref_q, params: TerminationParams) -> bool:
    err = np.linalg.norm(state.q[:3] - np.asarray(ref_q)[:3])
    return bool(err > params.max_root_error or state.q[2] < params.min_root_height)


# ---------------------------------------------------------------------------
# episodes

def interpolate_q(q0, q1, s):
    """Linear in positions/joints, geodesic in the base rotation."""
    q = q0 + s * (q1 - q0)
    rel = quat_log(quat_mul(q1[3:7], quat_conj(q0[3:7])))
    q[3:7] = quat_mul(quat_exp(s * rel), q0[3:7])
    return q


class ControlOutput(NamedTuple):
    joint_targets: np.ndarray
    I_res: np.ndarray
    beta_lin: float
    beta_ang: float
    I_total: Optional[np.ndarray] = None  # set to bypass the fusion law


class Episode:
    """One tracking episode advanced a control step at a time."""

    def __init__(self, model: CharacterModel, traj: ReferenceTrajectory, baseline: ImpulseProfile,
                 gains: PDGains, config: SimConfig = SimConfig(), seed: int = 0,
                 perturbations: Optional[PerturbationSchedule] = None, noise: bool = True):
        if traj.derived_vel is None:
            raise ValueError("trajectory has no derived velocities")
        if baseline.n_frames != traj.n_frames:
            raise ValueError("baseline and trajectory frame counts differ")
        self.model = model
        self.traj = traj
        self.baseline = baseline
        self.gains = gains
        self.config = config
        self.perturbations = perturbations or PerturbationSchedule()
        self.dt_control = traj.dt
        self.dt_sim = traj.dt / config.decimation
        self.term = TerminationParams(config.max_root_error,
                                      config.min_height_fraction * model.standing_height())
        self._kernel = kernel(model)
        self._ref_com = np.array([self._com(q) for q in traj.frames])
        q0 = traj.frames[0].copy()
        v0 = traj.derived_vel[0].copy()
        if noise:
            rng = np.random.default_rng(seed)
            q0[:3] += rng.normal(scale=config.init_pos_noise, size=3)
            q0[7:] += rng.normal(scale=config.init_joint_noise, size=model.n_joints)
            v0[:3] += rng.normal(scale=config.init_vel_noise, size=3)
        self.state = SimState(q0, v0, 0.0, np.zeros(model.n_joints))
        self.frame = 0
        self.sim_step = 0
        self.terminated_at: Optional[int] = None
        self.history = np.zeros((0, 6))
        self.log_t, self.log_root, self.log_body, self.log_wrench, self.log_fc = [], [], [], [], []
        self.log_q, self.log_v = [q0.copy()], [v0.copy()]
        self.applied = []  # (I_base, I_res, I_total, beta_lin, beta_ang) per control step
        self._body_sum = 0.0

    def _com(self, q):
        R, p, _ = self._kernel.frames(q)
        return p + np.einsum("lij,lj->li", R, self.model.kernel.com)

    @property
    def n_control_steps(self) -> int:
        return self.traj.n_frames - 1

    @property
    def done(self) -> bool:
        return self.terminated_at is not None or self.frame >= self.n_control_steps

    @property
    def success(self) -> bool:
        return self.terminated_at is None and self.frame >= self.n_control_steps

    def joint_inertia(self):
        # inertia seen by each joint with the floating base free to react
        M = self._kernel.mass_matrix(self.state.q)
        return 1.0 / np.diag(np.linalg.inv(M))[6:]

    def apply(self, control: ControlOutput) -> bool:
        """Advance one control step; returns True when the episode has ended."""
        if self.done:
            raise RuntimeError("episode already finished")
        k = self.frame
        I_base = self.baseline.I_base[k]
        if control.I_total is not None:
            I_total = np.asarray(control.I_total, dtype=float)
        else:
            for b in (control.beta_lin, control.beta_ang):
                if not 0.0 <= b <= 1.0:
                    raise ValueError("gates must lie in [0, 1]")
            I_total = compose_impulse(I_base, control.I_res, control.beta_lin, control.beta_ang)
        W = I_total / self.dt_control
        self.applied.append((I_base.copy(), np.asarray(control.I_res, dtype=float).copy(), I_total.copy(),
                             float(control.beta_lin), float(control.beta_ang)))
        self.history = np.vstack([self.history, I_total])
        cfg = self.config
        h = self.dt_sim / cfg.substeps
        traj = self.traj
        joint_inertia = self.joint_inertia() if (cfg.implicit_damping and self.model.n_joints) else None
        for s in range(cfg.decimation):
            extra = None
            active = self.perturbations.active(self.sim_step)
            if active:
                extra = sum(link_wrench_generalized(self.model, self.state.q, e.target_link, e.force, e.torque)
                            for e in active)
            for _ in range(cfg.substeps):
                st = self.state
                tau = pd_torques(st.q[7:], st.v[6:], control.joint_targets, self.gains,
                                 implicit=cfg.implicit_damping and self.model.n_joints > 0,
                                 dt=h, inertia=joint_inertia)
                self.state = step(self.model, st, tau, W, h, cfg.contact, extra)
            self.sim_step += 1
            sfrac = (s + 1) / cfg.decimation
            ref_q = interpolate_q(traj.frames[k], traj.frames[k + 1], sfrac)
            ref_com = self._ref_com[k] + sfrac * (self._ref_com[k + 1] - self._ref_com[k])
            self._record(ref_q, ref_com)
            if termination_check(self.state, ref_q, self.term):
                self.terminated_at = self.sim_step
                break
        self.frame += 1
        return self.done

    def _record(self, ref_q, ref_com):
        st = self.state
        root = float(np.linalg.norm(st.q[:3] - ref_q[:3]))
        body = float(np.mean(np.linalg.norm(self._com(st.q) - ref_com, axis=1)))
        self._body_sum += body
        self.log_t.append(st.time)
        self.log_root.append(root)
        self.log_body.append(body)
        self.log_wrench.append(st.root_wrench.copy())
        fc = st.contact_forces
        self.log_fc.append(fc.sum(axis=0) if len(fc) else np.zeros(3))
        self.log_q.append(st.q.copy())
        self.log_v.append(st.v.copy())

    def result(self) -> "RolloutResult":
        body = np.array(self.log_body)
        cum = np.cumsum(body) / np.arange(1, len(body) + 1) if len(body) else body
        ap = self.applied
        stack = lambda i: np.array([a[i] for a in ap]).reshape(-1, 6)
        return RolloutResult(
            t=np.array(self.log_t), root_error=np.array(self.log_root), body_error=body,
            cumulative_error=cum, wrench=np.array(self.log_wrench).reshape(-1, 6),
            contact_sum=np.array(self.log_fc).reshape(-1, 3), q=np.array(self.log_q),
            v=np.array(self.log_v), terminated_at=self.terminated_at,
            n_sim_steps=self.n_control_steps * self.config.decimation,
            I_base=stack(0), I_res=stack(1), I_total=stack(2),
            beta=np.array([[a[3], a[4]] for a in ap]).reshape(-1, 2),
            dt_control=self.dt_control)


@dataclass
class RolloutResult:
    t: np.ndarray
    root_error: np.ndarray
    body_error: np.ndarray
    cumulative_error: np.ndarray
    wrench: np.ndarray
    contact_sum: np.ndarray
    q: np.ndarray
    v: np.ndarray
    terminated_at: Optional[int]
    n_sim_steps: int
    I_base: np.ndarray
    I_res: np.ndarray
    I_total: np.ndarray
    beta: np.ndarray
    dt_control: float

    @property
    def success(self) -> bool:
        return self.terminated_at is None

    @property
    def final_cumulative_error(self) -> float:
        return float(self.cumulative_error[-1]) if len(self.cumulative_error) else 0.0

    @property
    def applied_profile(self) -> ImpulseProfile:
        return ImpulseProfile(self.I_total, self.I_total / self.dt_control, self.dt_control)

    def telemetry_csv(self) -> str:
        out = io.StringIO()
        out.write("t,root_error,cum_mean_body_error,Wx,Wy,Wz,Wtx,Wty,Wtz,fc_x,fc_y,fc_z,terminated\n")
        n = len(self.t)
        for i in range(n):
            term = int(self.terminated_at is not None and i == n - 1)
            row = [self.t[i], self.root_error[i], self.cumulative_error[i], *self.wrench[i],
                   *self.contact_sum[i]]
            out.write(",".join(repr(float(x)) for x in row) + f",{term}\n")
        return out.getvalue()


Controller = Callable[[Episode], ControlOutput]


def open_loop_controller(ep: Episode) -> ControlOutput:
    """PD toward the next reference pose plus the blind baseline replay."""
    return ControlOutput(ep.traj.frames[ep.frame + 1, 7:], np.zeros(6), 1.0, 1.0)


@dataclass(frozen=True)
class FeedbackGains:
    kp_lin: float = 150.0  # 1/s^2
    kd_lin: float = 24.0  # 1/s
    kp_ang: float = 150.0
    kd_ang: float = 24.0
    beta: float = 0.5
    sigma_lin: float = SIGMA_LIN
    sigma_ang: float = SIGMA_ANG


def feedback_controller(gains: FeedbackGains = FeedbackGains()) -> Controller:
    """Momentum-space PD residual on the root, fused with the baseline at a fixed gate.

    Linear: I_res = clamp(m (kp dp + kd dv) dt, sigma_lin); angular uses the
    rotational inertia block about the base origin and the rotation-vector error.
    """

    def control(ep: Episode) -> ControlOutput:
        k = ep.frame
        st = ep.state
        ref_q = ep.traj.frames[k + 1]
        ref_v = ep.traj.derived_vel[k + 1]
        m = ep.model.total_mass
        dt = ep.dt_control
        lin = m * (gains.kp_lin * (ref_q[:3] - st.q[:3]) + gains.kd_lin * (ref_v[:3] - st.v[:3])) * dt
        M = ep._kernel.mass_matrix(st.q)
        rot_err = quat_log(quat_mul(ref_q[3:7], quat_conj(st.q[3:7])))
        ang = M[3:6, 3:6] @ (gains.kp_ang * rot_err + gains.kd_ang * (ref_v[3:6] - st.v[3:6])) * dt
        I_res = np.concatenate([clamp_norm(lin, gains.sigma_lin), clamp_norm(ang, gains.sigma_ang)])
        return ControlOutput(ref_q[7:], I_res, gains.beta, gains.beta)

    return control


def beta_one_controller(ep: Episode) -> ControlOutput:
    return ControlOutput(ep.traj.frames[ep.frame + 1, 7:], np.zeros(6), 1.0, 1.0)


def run_episode(ep: Episode, controller: Controller) -> RolloutResult:
    while not ep.done:
        ep.apply(controller(ep))
    return ep.result()


def rollout_open_loop(model, traj, baseline, gains, config: SimConfig = SimConfig(), seed: int = 0,
                      perturbations=None, noise: bool = True) -> RolloutResult:
    ep = Episode(model, traj, baseline, gains, config, seed, perturbations, noise)
    return run_episode(ep, open_loop_controller)


def rollout_closed_loop(model, traj, baseline, controller: Controller, gains,
                        config: SimConfig = SimConfig(), seed: int = 0, perturbations=None,
                        noise: bool = True) -> RolloutResult:
    ep = Episode(model, traj, baseline, gains, config, seed, perturbations, noise)
    return run_episode(ep, controller)


def default_gains(model: CharacterModel) -> PDGains:
    """Joint PD gains scaled by the total mass."""
    scale = model.total_mass / 48.0
    return PDGains.uniform(model.n_joints, 1500.0 * scale, 100.0 * scale)
