"""Floating-base inverse dynamics: RNEA demand, mass matrix and bias forces.

Generalized forces are conjugate to the velocity layout
[base linear (world), base angular (world), joints]; the base rows are the
force and the torque about the base origin, both in world coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import backend
from .model import CharacterModel, ReferenceTrajectory


@dataclass(frozen=True)
class SpatialWrench:
    force: np.ndarray
    torque: np.ndarray  # about the base origin, world frame

    def __post_init__(self):
        if not (np.all(np.isfinite(self.force)) and np.all(np.isfinite(self.torque))):
            raise ValueError("wrench has non-finite entries")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    @classmethod
    def from_vector(cls, w) -> "SpatialWrench":
        w = np.asarray(w, dtype=float)
        return cls(w[:3].copy(), w[3:6].copy())


@dataclass(frozen=True)
class WrenchDemand:
    tau_req: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.tau_req)):
            raise ValueError(f"frame {self.frame_index}: non-finite demand")

    @property
    def base_part(self) -> np.ndarray:
        return self.tau_req[:6]


@lru_cache(maxsize=64)
def _kernel_for(model: CharacterModel, name: str):
    return backend.kernel_class(name)(model.kernel)


def kernel(model: CharacterModel, name: str | None = None):
    """Backend kernel object bound to ``model`` (cached per model)."""
    return _kernel_for(model, name or backend.NAME)


def _checked(model, q, v=None, a=None):
    q = np.asarray(q, dtype=float)
    if q.shape != (model.nq,):
        raise ValueError(f"q has shape {q.shape}, expected ({model.nq},)")
    out = [q]
    for name, x in (("v", v), ("a", a)):
        if x is None:
            continue
        x = np.asarray(x, dtype=float)
        if x.shape != (model.nv,):
            raise ValueError(f"{name} has shape {x.shape}, expected ({model.nv},)")
        out.append(x)
    for x in out:
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input to dynamics")
    return out


def rnea(model: CharacterModel, q, v, a, frame_index: int = 0) -> WrenchDemand:
    """Generalized force needed to realise acceleration ``a`` at (q, v): M a + C."""
    q, v, a = _checked(model, q, v, a)
    return WrenchDemand(kernel(model).rnea(q, v, a, model.gravity), frame_index)


def mass_matrix(model: CharacterModel, q) -> np.ndarray:
    """Joint-space inertia by unit-acceleration column extraction (gravity cancelled)."""
    (q,) = _checked(model, q)
    return kernel(model).mass_matrix(q)


def bias_forces(model: CharacterModel, q, v) -> np.ndarray:
    q, v = _checked(model, q, v)
    return kernel(model).rnea(q, v, np.zeros(model.nv), model.gravity)


def demand_trajectory(model: CharacterModel, traj: ReferenceTrajectory) -> list:
    if traj.derived_vel is None or traj.derived_acc is None:
        raise ValueError("trajectory has no derived velocities/accelerations")
    k = kernel(model)
    out = []
    for t in range(traj.n_frames):
        q, v, a = _checked(model, traj.frames[t], traj.derived_vel[t], traj.derived_acc[t])
        out.append(WrenchDemand(k.rnea(q, v, a, model.gravity), t))
    return out
