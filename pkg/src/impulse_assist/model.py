"""Character/trajectory data model, document I/O, kinematics and motion synthesis.

Generalized position layout (one trajectory frame):
    [px, py, pz, qw, qx, qy, qz, theta_1 .. theta_n]
Generalized velocity layout:
    [base linear (world), base angular (world), joint rates]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .rotations import (axis_angle_matrix, quat_log, quat_mul,
                        quat_conj, quat_to_matrix, skew)

GRAVITY = np.array([0.0, 0.0, -9.81])
UNIT_TOL = 1e-9
RENORM_TOL = 1e-6


class ModelError(ValueError):
    pass


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    name: str
    mass: float
    inertia: np.ndarray  # about COM, body frame
    com: np.ndarray  # body frame


@dataclass(frozen=True)
class Joint:
    """Revolute joint. ``axis`` is expressed in the joint frame (parent frame
    rotated by ``origin_quat``), which coincides with the child link frame."""
    name: str
    parent: int
    child: int
    axis: np.ndarray
    origin_pos: np.ndarray
    origin_quat: np.ndarray


class ContactSite(NamedTuple):
    link: int
    point: np.ndarray  # link frame


class KernelArrays(NamedTuple):
    """Flat, contiguous model description consumed by the dynamics kernels."""
    order: np.ndarray  # joint indices, parents before children
    j_parent: np.ndarray
    j_child: np.ndarray
    link_joint: np.ndarray  # inbound joint of each link, -1 for the base
    origin_pos: np.ndarray
    origin_rot: np.ndarray
    axis: np.ndarray
    mass: np.ndarray
    com: np.ndarray
    inertia: np.ndarray
    base: int


@dataclass(frozen=True, eq=False)
class CharacterModel:
    links: tuple
    joints: tuple
    base_link: int
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    contacts: tuple = ()
    name: str = "character"

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def nq(self) -> int:
        return 7 + self.n_joints

    @property
    def nv(self) -> int:
        return 6 + self.n_joints

    @property
    def total_mass(self) -> float:
        return float(sum(l.mass for l in self.links))

    @cached_property
    def kernel(self) -> KernelArrays:
        n = self.n_joints
        L = len(self.links)
        link_joint = -np.ones(L, dtype=np.int64)
        for j, jt in enumerate(self.joints):
            link_joint[jt.child] = j
        order = []
        frontier = [self.base_link]
        while frontier:
            link = frontier.pop(0)
            for j, jt in enumerate(self.joints):
                if jt.parent == link:
                    order.append(j)
                    frontier.append(jt.child)
        return KernelArrays(
            order=np.array(order, dtype=np.int64),
            j_parent=np.array([jt.parent for jt in self.joints], dtype=np.int64),
            j_child=np.array([jt.child for jt in self.joints], dtype=np.int64),
            link_joint=link_joint,
            origin_pos=np.array([jt.origin_pos for jt in self.joints], dtype=float).reshape(n, 3),
            origin_rot=np.array([quat_to_matrix(jt.origin_quat) for jt in self.joints],
                                dtype=float).reshape(n, 3, 3),
            axis=np.array([jt.axis for jt in self.joints], dtype=float).reshape(n, 3),
            mass=np.array([l.mass for l in self.links], dtype=float),
            com=np.array([l.com for l in self.links], dtype=float).reshape(L, 3),
            inertia=np.array([l.inertia for l in self.links], dtype=float).reshape(L, 3, 3),
            base=self.base_link,
        )

    def depth(self) -> int:
        depth = {self.base_link: 1}
        for j in self.kernel.order:
            jt = self.joints[j]
            depth[jt.child] = depth[jt.parent] + 1
        return max(depth.values())

    def ancestors(self, link: int) -> list:
        """Joint indices on the path from the base to ``link``."""
        lj = self.kernel.link_joint
        path = []
        while lj[link] >= 0:
            j = int(lj[link])
            path.append(j)
            link = self.joints[j].parent
        return path[::-1]

    def standing_height(self) -> float:
        """Base height that puts the lowest contact site on the ground at the zero pose."""
        if not self.contacts:
            return 1.0
        q = neutral_q(self)
        q[2] = 0.0
        R, p = forward_kinematics(self, q)
        heights = [(p[c.link] + R[c.link] @ c.point)[2] for c in self.contacts]
        return -float(min(heights))

    def link_index(self, name: str) -> int:
        for i, l in enumerate(self.links):
            if l.name == name:
                return i
        raise ModelError(f"unknown link {name!r}")


@dataclass(frozen=True)
class GeneralizedState:
    base_pos: np.ndarray
    base_quat: np.ndarray
    joint_pos: np.ndarray
    base_lin_vel: np.ndarray
    base_ang_vel: np.ndarray
    joint_vel: np.ndarray

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.base_pos, self.base_quat, self.joint_pos])

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.base_lin_vel, self.base_ang_vel, self.joint_vel])

    @classmethod
    def from_qv(cls, q, v) -> "GeneralizedState":
        q = np.asarray(q, dtype=float)
        v = np.asarray(v, dtype=float)
        return cls(q[:3].copy(), q[3:7].copy(), q[7:].copy(),
                   v[:3].copy(), v[3:6].copy(), v[6:].copy())


@dataclass(frozen=True)
class ReferenceTrajectory:
    frames: np.ndarray  # (F, 7 + n)
    dt: float
    derived_vel: Optional[np.ndarray] = None  # (F, 6 + n)
    derived_acc: Optional[np.ndarray] = None
    labels: Optional[tuple] = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1] - 7

    def phase(self, frame: int) -> float:
        return frame / self.n_frames

    def frames_labelled(self, label: str) -> np.ndarray:
        if self.labels is None:
            return np.zeros(0, dtype=int)
        return np.array([i for i, lab in enumerate(self.labels) if lab == label], dtype=int)

    def state(self, frame: int) -> GeneralizedState:
        v = self.derived_vel[frame] if self.derived_vel is not None else np.zeros(6 + self.n_joints)
        return GeneralizedState.from_qv(self.frames[frame], v)


# ---------------------------------------------------------------------------
# document I/O

def _vec(obj, n, what):
    try:
        arr = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise ModelError(f"{what}: expected {n} numbers")
    if arr.shape != (n,):
        raise ModelError(f"{what}: expected {n} numbers, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{what}: non-finite value")
    return arr


def _check_inertia(I, what):
    scale = max(1.0, float(np.max(np.abs(I))))
    if np.max(np.abs(I - I.T)) > 1e-9 * scale:
        raise ModelError(f"{what}: inertia is not symmetric")
    eig = np.linalg.eigvalsh(I)
    if eig[0] <= 0:
        raise ModelError(f"{what}: inertia is not positive definite")
    a, b, c = eig
    if a + b < c - 1e-9 * scale:
        raise ModelError(f"{what}: inertia violates the triangle inequality")


def build_model(links: Sequence[Link], joints: Sequence[Joint], gravity=GRAVITY,
                contacts: Sequence[ContactSite] = (), name: str = "character") -> CharacterModel:
    """Validate and assemble a model; raises ModelError naming the offender."""
    links = tuple(links)
    joints = tuple(joints)
    if not links:
        raise ModelError("model has no links")
    for link in links:
        if not (link.mass > 0):
            raise ModelError(f"link {link.name!r}: mass must be > 0")
        _check_inertia(np.asarray(link.inertia), f"link {link.name!r}")
    children = {}
    for jt in joints:
        for idx in (jt.parent, jt.child):
            if not 0 <= idx < len(links):
                raise ModelError(f"joint {jt.name!r}: link index {idx} out of range")
        if jt.parent == jt.child:
            raise ModelError(f"joint {jt.name!r}: cycle detected (self-loop)")
        if jt.child in children:
            raise ModelError(f"joint {jt.name!r}: link {links[jt.child].name!r} has two parents")
        children[jt.child] = jt
        if abs(np.linalg.norm(jt.axis) - 1.0) > UNIT_TOL:
            raise ModelError(f"joint {jt.name!r}: axis is not unit norm")
        if abs(np.linalg.norm(jt.origin_quat) - 1.0) > UNIT_TOL:
            raise ModelError(f"joint {jt.name!r}: origin quaternion is not unit norm")
    roots = [i for i in range(len(links)) if i not in children]
    if len(roots) != 1:
        # every link having a parent means the parent chain loops somewhere
        if not roots:
            raise ModelError("cycle detected: no root link")
        raise ModelError(f"multiple root links: {[links[i].name for i in roots]}")
    base = roots[0]
    seen = {base}
    frontier = [base]
    while frontier:
        link = frontier.pop()
        for jt in joints:
            if jt.parent == link and jt.child not in seen:
                seen.add(jt.child)
                frontier.append(jt.child)
    if len(seen) != len(links):
        bad = sorted(set(range(len(links))) - seen)
        raise ModelError(f"cycle detected among links {[links[i].name for i in bad]}")
    for c in contacts:
        if not 0 <= c.link < len(links):
            raise ModelError(f"contact site on invalid link {c.link}")
    return CharacterModel(links=links, joints=joints, base_link=base,
                          gravity=np.asarray(gravity, dtype=float), contacts=tuple(contacts),
                          name=name)


def load_model(document: str) -> CharacterModel:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ModelError(f"model document is not valid JSON: {exc}")
    if not isinstance(doc, dict) or "links" not in doc:
        raise ModelError("model document needs a 'links' list")
    gravity = _vec(doc.get("gravity", GRAVITY.tolist()), 3, "gravity")
    links = []
    names = {}
    for i, ld in enumerate(doc["links"]):
        if not isinstance(ld, dict):
            raise ModelError(f"link #{i}: expected an object")
        name = str(ld.get("name", f"link{i}"))
        for key in ("mass", "inertia"):
            if key not in ld:
                raise ModelError(f"link {name!r}: missing field {key!r}")
        if not isinstance(ld["mass"], (int, float)) or isinstance(ld["mass"], bool):
            raise ModelError(f"link {name!r}: mass must be a number")
        inertia = _vec(ld["inertia"], 9, f"link {name!r} inertia").reshape(3, 3)
        com = _vec(ld.get("com", [0, 0, 0]), 3, f"link {name!r} com")
        names[name] = i
        links.append(Link(name, float(ld["mass"]), inertia, com))

    def ref(value, what):
        if isinstance(value, str):
            if value not in names:
                raise ModelError(f"{what}: unknown link {value!r}")
            return names[value]
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ModelError(f"{what}: link reference must be a name or index")

    joints = []
    for i, jd in enumerate(doc.get("joints", [])):
        name = str(jd.get("name", f"joint{i}"))
        for key in ("parent", "child", "axis"):
            if key not in jd:
                raise ModelError(f"joint {name!r}: missing field {key!r}")
        kind = jd.get("kind", "revolute")
        if kind != "revolute":
            raise ModelError(f"joint {name!r}: unsupported kind {kind!r}")
        joints.append(Joint(
            name=name,
            parent=ref(jd["parent"], f"joint {name!r} parent"),
            child=ref(jd["child"], f"joint {name!r} child"),
            axis=_vec(jd["axis"], 3, f"joint {name!r} axis"),
            origin_pos=_vec(jd.get("origin_pos", [0, 0, 0]), 3, f"joint {name!r} origin_pos"),
            origin_quat=_vec(jd.get("origin_quat", [1, 0, 0, 0]), 4, f"joint {name!r} origin_quat"),
        ))
    contacts = []
    for i, cd in enumerate(doc.get("contacts", [])):
        contacts.append(ContactSite(ref(cd["link"], f"contact #{i}"),
                                    _vec(cd["point"], 3, f"contact #{i} point")))
    return build_model(links, joints, gravity, contacts, name=str(doc.get("name", "character")))


def dump_model(model: CharacterModel) -> str:
    doc = {
        "name": model.name,
        "gravity": model.gravity.tolist(),
        "links": [{"name": l.name, "mass": l.mass, "inertia": np.asarray(l.inertia).ravel().tolist(),
                   "com": np.asarray(l.com).tolist()} for l in model.links],
        "joints": [{"name": j.name, "parent": model.links[j.parent].name,
                    "child": model.links[j.child].name, "axis": np.asarray(j.axis).tolist(),
                    "origin_pos": np.asarray(j.origin_pos).tolist(),
                    "origin_quat": np.asarray(j.origin_quat).tolist()} for j in model.joints],
        "contacts": [{"link": model.links[c.link].name, "point": np.asarray(c.point).tolist()}
                     for c in model.contacts],
    }
    return json.dumps(doc, indent=1)


def _normalize_frames(frames: np.ndarray) -> np.ndarray:
    frames = frames.copy()
    norms = np.linalg.norm(frames[:, 3:7], axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > RENORM_TOL)[0]
    if bad.size:
        raise TrajectoryError(f"frame {int(bad[0])}: quaternion norm {norms[bad[0]]:.9g} is not unit")
    frames[:, 3:7] /= norms[:, None]
    return frames


def load_trajectory(document: str, model: CharacterModel) -> ReferenceTrajectory:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise TrajectoryError(f"trajectory document is not valid JSON: {exc}")
    if not isinstance(doc, dict) or "dt" not in doc or "frames" not in doc:
        raise TrajectoryError("trajectory document needs 'dt' and 'frames'")
    dt = doc["dt"]
    if not isinstance(dt, (int, float)) or not dt > 0:
        raise TrajectoryError("dt must be > 0")
    width = 7 + model.n_joints
    rows = doc["frames"]
    if not rows:
        raise TrajectoryError("trajectory has no frames")
    for i, row in enumerate(rows):
        if len(row) != width:
            raise TrajectoryError(f"frame {i}: frame width {len(row)} != {width} (7 + n_joints)")
    frames = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(frames)):
        raise TrajectoryError("non-finite value in frames")
    labels = doc.get("labels")
    if labels is not None:
        if len(labels) != len(rows):
            raise TrajectoryError("labels length does not match frame count")
        labels = tuple(labels)
    return ReferenceTrajectory(_normalize_frames(frames), float(dt), labels=labels)


def dump_trajectory(traj: ReferenceTrajectory) -> str:
    doc = {"dt": traj.dt, "frames": traj.frames.tolist()}
    if traj.labels is not None:
        doc["labels"] = list(traj.labels)
    return json.dumps(doc)


# ---------------------------------------------------------------------------
# kinematics

def neutral_q(model: CharacterModel) -> np.ndarray:
    q = np.zeros(model.nq)
    q[3] = 1.0
    return q


def _check_q(model, q):
    q = np.asarray(q, dtype=float)
    if q.shape != (model.nq,):
        raise ValueError(f"generalized position has shape {q.shape}, expected ({model.nq},)")
    return q


def forward_kinematics(model: CharacterModel, q):
    """World rotation (L, 3, 3) and origin (L, 3) of every link frame."""
    q = _check_q(model, q)
    k = model.kernel
    L = len(model.links)
    R = np.zeros((L, 3, 3))
    p = np.zeros((L, 3))
    R[k.base] = quat_to_matrix(q[3:7])
    p[k.base] = q[:3]
    for j in k.order:
        par, ch = k.j_parent[j], k.j_child[j]
        R[ch] = R[par] @ k.origin_rot[j] @ axis_angle_matrix(k.axis[j], q[7 + j])
        p[ch] = p[par] + R[par] @ k.origin_pos[j]
    return R, p


def point_position(model, q, link, local_point):
    R, p = forward_kinematics(model, q)
    return p[link] + R[link] @ np.asarray(local_point, dtype=float)


def point_jacobian(model: CharacterModel, q, link: int, local_point) -> np.ndarray:
    """3 x (6 + n) map from generalized velocity to the world velocity of a point."""
    if not 0 <= link < len(model.links):
        raise ValueError(f"invalid link index {link}")
    q = _check_q(model, q)
    R, p = forward_kinematics(model, q)
    x = p[link] + R[link] @ np.asarray(local_point, dtype=float)
    J = np.zeros((3, model.nv))
    J[:, :3] = np.eye(3)
    J[:, 3:6] = -skew(x - q[:3])
    k = model.kernel
    for j in model.ancestors(link):
        ch = k.j_child[j]
        axis_w = R[ch] @ k.axis[j]
        J[:, 6 + j] = np.cross(axis_w, x - p[ch])
    return J


def link_com_positions(model, q) -> np.ndarray:
    R, p = forward_kinematics(model, q)
    com = model.kernel.com
    return p + np.einsum("lij,lj->li", R, com)


# ---------------------------------------------------------------------------
# derivatives

def _diff(x, dt):
    """Central differences inside, one-sided first order at the ends."""
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    d[0] = (x[1] - x[0]) / dt
    d[-1] = (x[-1] - x[-2]) / dt
    return d


def finite_difference_derivatives(traj: ReferenceTrajectory) -> ReferenceTrajectory:
    """Fill ``derived_vel``/``derived_acc``.

    Base angular velocity uses the log map of the relative rotation between the
    neighbouring frames, so it is exact for constant-rate rotation. Accelerations
    are differences of the derived velocities; they are exact for quadratic
    signals at frames two or more away from either end.
    """
    F = traj.n_frames
    if F < 3:
        raise TrajectoryError("finite differences need at least 3 frames")
    dt = traj.dt
    fr = traj.frames
    n = fr.shape[1] - 7
    vel = np.zeros((F, 6 + n))
    vel[:, :3] = _diff(fr[:, :3], dt)
    vel[:, 6:] = _diff(fr[:, 7:], dt)
    quats = fr[:, 3:7]
    for i in range(F):
        lo, hi = max(i - 1, 0), min(i + 1, F - 1)
        rel = quat_mul(quats[hi], quat_conj(quats[lo]))
        vel[i, 3:6] = quat_log(rel) / ((hi - lo) * dt)
    acc = _diff(vel, dt)
    return replace(traj, derived_vel=vel, derived_acc=acc)


# ---------------------------------------------------------------------------
# model builders

def box_inertia(mass, size):
    x, y, z = size
    return np.diag([mass * (y * y + z * z), mass * (x * x + z * z), mass * (x * x + y * y)]) / 12.0


def make_free_body(mass: float = 5.0, size=(0.4, 0.3, 0.3)) -> CharacterModel:
    """Single box with its COM at the base origin and four bottom-corner contact sites."""
    sx, sy, sz = size
    contacts = [ContactSite(0, np.array([x * sx / 2, y * sy / 2, -sz / 2]))
                for x in (-1, 1) for y in (-1, 1)]
    link = Link("body", mass, box_inertia(mass, size), np.zeros(3))
    return build_model([link], [], contacts=contacts, name="free-body")


def make_chain3(masses=(30.0, 10.0, 8.0), seg=0.45, foot=(0.24, 0.14)) -> CharacterModel:
    """Torso + thigh + shank-with-foot, hinged about y (a planar chain living in 3D).

    The foot carries four contact sites; the torso is the floating base.
    """
    torso = Link("torso", masses[0], box_inertia(masses[0], (0.3, 0.35, 0.5)), np.array([0, 0, 0.15]))
    thigh = Link("thigh", masses[1], box_inertia(masses[1], (0.12, 0.12, seg)), np.array([0, 0, -seg / 2]))
    shank = Link("shank", masses[2], box_inertia(masses[2], (0.1, 0.1, seg)), np.array([0, 0, -seg / 2]))
    ey = np.array([0.0, 1.0, 0.0])
    qid = np.array([1.0, 0, 0, 0])
    joints = [Joint("hip", 0, 1, ey, np.array([0, 0, -0.1]), qid),
              Joint("knee", 1, 2, ey, np.array([0, 0, -seg]), qid)]
    fx, fy = foot
    contacts = [ContactSite(2, np.array([x * fx / 2, y * fy / 2, -seg]))
                for x in (-1, 1) for y in (-1, 1)]
    return build_model([torso, thigh, shank], joints, contacts=contacts, name="chain3")


def random_chain(n_links: int, rng: np.random.Generator, branching: bool = False) -> CharacterModel:
    """Random serial (or branched) chain with random axes, offsets and inertias."""
    links = []
    for i in range(n_links):
        mass = rng.uniform(0.5, 5.0)
        dims = rng.uniform(0.05, 0.5, size=3)
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        I = Q @ box_inertia(mass, dims) @ Q.T
        links.append(Link(f"l{i}", mass, 0.5 * (I + I.T), rng.uniform(-0.2, 0.2, size=3)))
    joints = []
    for i in range(1, n_links):
        parent = int(rng.integers(0, i)) if branching else i - 1
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        oq = rng.normal(size=4)
        oq /= np.linalg.norm(oq)
        joints.append(Joint(f"j{i}", parent, i, axis, rng.uniform(-0.4, 0.4, size=3), oq))
    return build_model(links, joints, name=f"random{n_links}")


def random_q(model: CharacterModel, rng: np.random.Generator) -> np.ndarray:
    q = np.zeros(model.nq)
    q[:3] = rng.uniform(-1, 1, size=3)
    quat = rng.normal(size=4)
    q[3:7] = quat / np.linalg.norm(quat)
    q[7:] = rng.uniform(-np.pi, np.pi, size=model.n_joints)
    return q


BUILTIN_MODELS = {"free-body": make_free_body, "chain3": make_chain3}


# ---------------------------------------------------------------------------
# exaggerated motion synthesis

MOTION_KINDS = ("ground_dash", "aerial_dash", "gravity_defying_descent", "double_jump")


@dataclass(frozen=True)
class MotionParams:
    duration: float = 3.0
    peak_speed: float = 6.0
    dash_window: float = 1.0  # time spent at peak speed
    apex_height: float = 1.0
    onset: float = 0.5
    descent_acc: float = -4.0
    boost_speed: float = 3.0
    joint_amplitude: float = 0.05
    joint_period: float = 2.0


def _kink_labels(times, t_kink, dt, tag):
    # frames whose finite-difference acceleration stencil reaches the kink
    return [i for i, t in enumerate(times) if abs(t - t_kink) < 2.0 * dt - 1e-9]


def synthesize_exaggerated(kind: str, params: MotionParams, model: CharacterModel,
                           dt: float = 1.0 / 30.0) -> ReferenceTrajectory:
    """Procedural stand-ins for exaggerated motion primitives.

    Velocity discontinuities are placed exactly on frame times so the finite
    difference spike is reproducible across frame rates.
    """
    kind = kind.replace("-", "_")
    if kind not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {kind!r}")
    P = params
    if not (dt > 0 and P.duration > P.dash_window > 0):
        raise ValueError("need duration > dash_window > 0 and dt > 0")
    if P.apex_height < 0 or P.peak_speed < 0:
        raise ValueError("apex_height and peak_speed must be non-negative")
    F = int(round(P.duration / dt))
    t = np.arange(F) * dt
    h0 = model.standing_height()
    g = -model.gravity[2]
    snap = lambda s: round(s / dt) * dt
    x = np.zeros(F)
    z = np.full(F, h0)
    labels = ["rest"] * F

    if kind in ("ground_dash", "aerial_dash"):
        t_on = snap(P.onset)
        t_off = snap(P.onset + P.dash_window)
        if t_off >= P.duration:
            raise ValueError("dash does not fit inside the duration")
        x = P.peak_speed * (np.clip(t, t_on, t_off) - t_on)
        if kind == "aerial_dash":
            z[:] = h0 + P.apex_height
        for i in range(F):
            if t_on < t[i] < t_off:
                labels[i] = "dash"
        for i in _kink_labels(t, t_on, dt, "dash-onset"):
            labels[i] = "dash-onset"
        for i in _kink_labels(t, t_off, dt, "dash-stop"):
            labels[i] = "dash-stop"
    elif kind == "gravity_defying_descent":
        a = P.descent_acc
        if not (-g < a < 0):
            raise ValueError("descent_acc must lie strictly between -g and 0")
        t_land = np.sqrt(2.0 * P.apex_height / -a)
        z = np.where(t < t_land, h0 + P.apex_height + 0.5 * a * t * t, h0)
        for i in range(F):
            if t[i] + 2.0 * dt < t_land:
                labels[i] = "airborne"
            elif t[i] - 2.0 * dt < t_land:
                labels[i] = "landing"
    else:  # double_jump
        t_on = snap(P.onset)
        t_rise = max(snap(np.sqrt(2.0 * P.apex_height / g)), dt)
        v0 = g * t_rise
        t_apex = t_on + t_rise
        apex = h0 + 0.5 * g * t_rise ** 2
        vb = P.boost_speed
        t_fall = (vb + np.sqrt(vb * vb + 2.0 * g * (apex - h0))) / g
        t_land = t_apex + t_fall
        if t_land >= P.duration:
            raise ValueError("double jump does not fit inside the duration")
        s = t - t_on
        up = h0 + v0 * s - 0.5 * g * s * s
        s2 = t - t_apex
        down = apex + vb * s2 - 0.5 * g * s2 * s2
        z = np.where(t <= t_on, h0, np.where(t <= t_apex, up, np.where(t < t_land, down, h0)))
        for i in range(F):
            if t_on < t[i] < t_land:
                labels[i] = "airborne"
        for i in _kink_labels(t, t_on, dt, "takeoff"):
            labels[i] = "takeoff"
        for i in _kink_labels(t, t_apex, dt, "boost"):
            labels[i] = "boost"
        for i in range(F):
            if abs(t[i] - t_land) < 2.0 * dt:
                labels[i] = "landing"

    frames = np.zeros((F, model.nq))
    frames[:, 0] = x
    frames[:, 2] = z
    frames[:, 3] = 1.0
    n = model.n_joints
    if n:
        phase = 2.0 * np.pi * np.arange(n) / max(n, 1)
        frames[:, 7:] = P.joint_amplitude * np.sin(2.0 * np.pi * t[:, None] / P.joint_period
                                                   + phase[None, :])
    traj = ReferenceTrajectory(frames, dt, labels=tuple(labels))
    return finite_difference_derivatives(traj)
