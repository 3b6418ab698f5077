"""Tracking metrics: pose/velocity errors, impulse statistics, jitter and episode evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .decomp import ImpulseProfile
from .dynamics import kernel
from .model import CharacterModel, ReferenceTrajectory
from .sim import (Controller, Episode, PDGains, SimConfig, run_episode,
                  sample_perturbations)


def root_relative_points(model: CharacterModel, q) -> np.ndarray:
    """Link COM positions expressed in the root frame."""
    R, p, _ = kernel(model).frames(np.asarray(q, dtype=float))
    b = model.kernel.base
    com = p + np.einsum("lij,lj->li", R, model.kernel.com)
    return (com - p[b]) @ R[b]


def points_rmse(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def pose_error(model: CharacterModel, q, ref_q, kind: str = "links") -> float:
    """Root-relative RMSE over link COM positions, or over joint angles with ``kind="joints"``."""
    q = np.asarray(q, dtype=float)
    ref_q = np.asarray(ref_q, dtype=float)
    if q.shape != (model.nq,) or ref_q.shape != (model.nq,):
        raise ValueError("pose does not match the model")
    if kind == "joints":
        d = q[7:] - ref_q[7:]
        return float(np.sqrt(np.mean(d * d))) if d.size else 0.0
    if kind != "links":
        raise ValueError(f"unknown pose error kind {kind!r}")
    return points_rmse(root_relative_points(model, q), root_relative_points(model, ref_q))


def velocity_error(v, ref_v) -> float:
    """RMSE over the articulated joint velocities (0 for a single body)."""
    v = np.asarray(v, dtype=float)
    ref_v = np.asarray(ref_v, dtype=float)
    if v.shape != ref_v.shape:
        raise ValueError("velocity dimension mismatch")
    d = v[6:] - ref_v[6:]
    return float(np.sqrt(np.mean(d * d))) if d.size else 0.0


def _block_means(I):
    I = np.asarray(I, dtype=float).reshape(-1, 6)
    return float(np.linalg.norm(I[:, :3], axis=1).mean()), float(np.linalg.norm(I[:, 3:], axis=1).mean())


def impulse_statistics(I_total, I_ref=None, I_res=None) -> dict:
    """Mean per-block impulse magnitudes; ref/res are None when the controller does not decompose."""
    I_total = np.asarray(I_total, dtype=float).reshape(-1, 6)
    if len(I_total) == 0:
        raise ValueError("empty impulse profile")
    out = {}
    for name, I in (("total", I_total), ("ref", I_ref), ("res", I_res)):
        lin, ang = _block_means(I) if I is not None else (None, None)
        out[f"{name}_lin"] = lin
        out[f"{name}_ang"] = ang
    return out


def jitter(wrenches) -> float:
    """RMS over time of the second difference of the applied 6-D wrench."""
    W = np.asarray(wrenches, dtype=float).reshape(-1, 6)
    if len(W) < 3:
        raise ValueError("jitter needs at least 3 control steps")
    d2 = W[2:] - 2.0 * W[1:-1] + W[:-2]
    return float(np.sqrt(np.mean(np.sum(d2 * d2, axis=1))))


@dataclass
class EvalReport:
    e_pose_mean: float
    e_pose_std: float
    e_vel_mean: float
    e_vel_std: float
    impulse: dict
    jitter: float
    success_rate: float
    gate_stats: Optional[dict]
    episodes: int
    terminated_at: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        cols = ["pos_mean", "pos_std", "vel_mean", "vel_std", "total_lin", "total_ang", "ref_lin",
                "ref_ang", "res_lin", "res_ang", "jitter", "success_rate", "beta_lin_mean", "beta_ang_mean"]
        fmt = lambda x: "N/A" if x is None else repr(float(x))
        g = self.gate_stats or {}
        vals = [self.e_pose_mean, self.e_pose_std, self.e_vel_mean, self.e_vel_std,
                self.impulse["total_lin"], self.impulse["total_ang"], self.impulse["ref_lin"],
                self.impulse["ref_ang"], self.impulse["res_lin"], self.impulse["res_ang"],
                self.jitter, self.success_rate, g.get("beta_lin_mean"), g.get("beta_ang_mean")]
        return ",".join(cols) + "\n" + ",".join(fmt(v) for v in vals) + "\n"


def summarize(model: CharacterModel, traj: ReferenceTrajectory, results, decimation: int,
              decomposes: bool = True) -> EvalReport:
    """Aggregate finished rollouts; errors are sampled at control-step boundaries."""
    results = list(results)
    if not results:
        raise ValueError("need at least one rollout")
    pose, vel = [], []
    for res in results:
        for i in range(decimation - 1, len(res.q) - 1, decimation):
            k = (i + 1) // decimation
            pose.append(pose_error(model, res.q[i + 1], traj.frames[k]))
            vel.append(velocity_error(res.v[i + 1], traj.derived_vel[k]))
    I_tot = np.concatenate([r.I_total for r in results])
    stats = impulse_statistics(I_tot, np.concatenate([_gated_ref(r) for r in results]) if decomposes else None,
                               np.concatenate([_gated_res(r) for r in results]) if decomposes else None)
    B = np.concatenate([r.beta for r in results])
    gate = None
    if decomposes:
        gate = {"beta_lin_mean": float(B[:, 0].mean()), "beta_lin_min": float(B[:, 0].min()),
                "beta_lin_max": float(B[:, 0].max()), "beta_ang_mean": float(B[:, 1].mean()),
                "beta_ang_min": float(B[:, 1].min()), "beta_ang_max": float(B[:, 1].max())}
    W = [r.I_total / r.dt_control for r in results]
    jit = [jitter(w) for w in W if len(w) >= 3]
    pose = np.array(pose) if pose else np.zeros(1)
    vel = np.array(vel) if vel else np.zeros(1)
    return EvalReport(float(pose.mean()), float(pose.std()), float(vel.mean()), float(vel.std()),
                      stats, float(np.mean(jit)) if jit else 0.0,
                      float(np.mean([r.success for r in results])), gate, len(results),
                      [r.terminated_at for r in results])


def evaluate(model: CharacterModel, traj: ReferenceTrajectory, baseline: ImpulseProfile,
             controller: Controller, gains: PDGains, n_episodes: int = 8, seed: int = 0,
             perturb: bool = False, config: SimConfig = SimConfig(), decomposes: bool = True) -> EvalReport:
    """Run ``n_episodes`` seeded episodes and aggregate the tracking metrics."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    horizon = (traj.n_frames - 1) * config.decimation
    results = []
    for e in range(n_episodes):
        ep_seed = seed * 1000 + e
        pert = sample_perturbations(ep_seed, horizon) if perturb else None
        results.append(run_episode(Episode(model, traj, baseline, gains, config, ep_seed, pert), controller))
    return summarize(model, traj, results, config.decimation, decomposes)


def _gated_ref(res):
    """The baseline share actually applied: beta * I_base per block."""
    b = res.beta
    return np.concatenate([b[:, :1] * res.I_base[:, :3], b[:, 1:] * res.I_base[:, 3:]], axis=1)


def _gated_res(res):
    b = res.beta
    return np.concatenate([(1 - b[:, :1]) * res.I_res[:, :3], (1 - b[:, 1:]) * res.I_res[:, 3:]], axis=1)
