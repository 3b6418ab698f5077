"""Dual-head residual impulse policy.

The actor emits a Gaussian over joint targets (kinematic head) and over raw
residual logits; the residual logits decode into unit directions, magnitudes
in [0, 1] and per-block gates that blend the analytical baseline impulse with
the learned residual. Everything is plain numpy with hand-written backprop.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import SpatialWrench, kernel
from .model import CharacterModel, ReferenceTrajectory
from .rotations import quat_conj, quat_log, quat_mul

SIGMA_LIN = 25.0  # N·s
SIGMA_ANG = 8.0  # N·m·s
UP = np.array([0.0, 0.0, 1.0])
FALLBACK_EPS = 1e-6
LOG_STD_RANGE = (-4.0, 1.0)
CHECKPOINT_VERSION = 1

# residual head layout (12 raw outputs)
DIR_LIN = slice(0, 3)
DIR_ANG = slice(3, 6)
MAG = slice(6, 8)
GATE = slice(8, 10)
N_RESIDUAL = 12
N_RESIDUAL_SAMPLED = 10  # the last two outputs are spare


def signed_log(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.log1p(np.abs(x))


def signed_log_inverse(y):
    y = np.asarray(y, dtype=float)
    return np.sign(y) * np.expm1(np.abs(y))


# ---------------------------------------------------------------------------
# observations

@dataclass(frozen=True)
class ObservationSpec:
    n_joints: int
    n_links: int
    history: int = 4

    @property
    def proprio_width(self) -> int:
        # height, 6-D orientation, lin/ang velocity, per-link pose in root frame, joint velocities
        return 1 + 6 + 6 + 9 * (self.n_links - 1) + self.n_joints

    @property
    def task_width(self) -> int:
        return 1 + 12

    @property
    def width(self) -> int:
        return self.proprio_width + self.task_width + 6 * self.history

    @property
    def digest(self) -> str:
        text = f"obs-v1:{self.n_joints}:{self.n_links}:{self.history}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def for_model(cls, model: CharacterModel, history: int = 4) -> "ObservationSpec":
        return cls(model.n_joints, len(model.links), history)


def _six_d(R):
    return R[..., :, :2].swapaxes(-1, -2).reshape(*R.shape[:-2], 6)


def build_observation(model: CharacterModel, q, v, traj: ReferenceTrajectory, frame: int,
                      impulse_history, spec: Optional[ObservationSpec] = None) -> np.ndarray:
    """s = [proprio, task, T(history)] for the state (q, v) at reference frame ``frame``."""
    spec = spec or ObservationSpec.for_model(model)
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    if q.shape != (model.nq,) or v.shape != (model.nv,):
        raise ValueError("state dimensions do not match the model")
    hist = np.asarray(impulse_history, dtype=float).reshape(-1, 6)
    if hist.shape[0] != spec.history:
        raise ValueError(f"impulse history must have {spec.history} rows")
    R, p, _ = kernel(model).frames(q)
    b = model.kernel.base
    Rb = R[b]
    others = [l for l in range(len(model.links)) if l != b]
    rel_pos = np.einsum("ji,lj->li", Rb, p[others] - p[b]) if others else np.zeros((0, 3))
    rel_rot = _six_d(np.einsum("ji,ljk->lik", Rb, R[others])) if others else np.zeros((0, 6))
    proprio = np.concatenate([[q[2]], _six_d(Rb), v[:3], v[3:6], rel_pos.ravel(), rel_rot.ravel(), v[6:]])
    nxt = min(frame + 1, traj.n_frames - 1)
    ref_q = traj.frames[nxt]
    ref_v = traj.derived_vel[nxt]
    rot = quat_log(quat_mul(ref_q[3:7], quat_conj(q[3:7])))
    task = np.concatenate([[traj.phase(frame)], ref_q[:3] - q[:3], rot, ref_v[:3] - v[:3], ref_v[3:6] - v[3:6]])
    obs = np.concatenate([proprio, task, signed_log(hist).ravel()])
    if obs.shape != (spec.width,):
        raise ValueError("observation layout mismatch")
    return obs


# ---------------------------------------------------------------------------
# network

@dataclass(frozen=True)
class PolicyConfig:
    hidden: tuple = (128, 64)
    sigma_lin: float = SIGMA_LIN
    sigma_ang: float = SIGMA_ANG
    magnitude_bias: float = -1.0  # m starts near 0.12
    gate_bias: float = 1.0  # beta starts near 0.88, i.e. mostly the analytical baseline
    init_log_std: float = -1.0
    joint_scale: float = 0.5  # rad per unit of the kinematic head
    g_anchor: float = 1.0
    value_scale: float = 100.0  # critic output is in units of 1/(1 - gamma) returns


def _init_mlp(sizes, rng, last_scale=0.01):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = last_scale if i == len(sizes) - 2 else np.sqrt(1.0 / a)
        layers.append([rng.normal(scale=scale, size=(a, b)), np.zeros(b)])
    return layers


@dataclass
class PolicyParams:
    actor: list
    critic: list
    log_std: np.ndarray
    spec: ObservationSpec
    config: PolicyConfig
    obs_mean: np.ndarray = None
    obs_std: np.ndarray = None

    @property
    def n_joints(self) -> int:
        return self.spec.n_joints

    def arrays(self) -> list:
        """Trainable arrays in a fixed order (shared by the optimizer and checkpoints)."""
        out = [a for layer in self.actor for a in layer]
        out += [a for layer in self.critic for a in layer]
        out.append(self.log_std)
        return out

    def copy(self) -> "PolicyParams":
        return PolicyParams([[w.copy(), b.copy()] for w, b in self.actor],
                            [[w.copy(), b.copy()] for w, b in self.critic],
                            self.log_std.copy(), self.spec, self.config,
                            self.obs_mean.copy(), self.obs_std.copy())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_policy(spec: ObservationSpec, config: PolicyConfig = PolicyConfig(), seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    n_out = spec.n_joints + N_RESIDUAL
    actor = _init_mlp([spec.width, *config.hidden, n_out], rng)
    n = spec.n_joints
    actor[-1][1][n + MAG.start:n + MAG.stop] = config.magnitude_bias
    actor[-1][1][n + GATE.start:n + GATE.stop] = config.gate_bias
    critic = _init_mlp([spec.width, *config.hidden, 1], rng, last_scale=1.0 / np.sqrt(config.hidden[-1]))
    log_std = np.full(spec.n_joints + N_RESIDUAL_SAMPLED, config.init_log_std)
    return PolicyParams(actor, critic, log_std, spec, config,
                        np.zeros(spec.width), np.ones(spec.width))


def mlp_forward(layers, x):
    """tanh hidden layers, linear output; returns (output, cache)."""
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite activation at layer {i}")
        acts.append(h)
    return h, acts


def mlp_backward(layers, acts, grad_out):
    grads = []
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        x = acts[i]
        grads.append([x.T @ g, g.sum(axis=0)])
        if i > 0:
            g = (g @ W.T) * (1.0 - acts[i] ** 2)
    return grads[::-1]


def normalize_obs(params: PolicyParams, obs):
    return (np.asarray(obs, dtype=float) - params.obs_mean) / params.obs_std


# ---------------------------------------------------------------------------
# action decoding

@dataclass
class ResidualAction:
    u_lin: np.ndarray
    u_ang: np.ndarray
    m_lin: np.ndarray
    m_ang: np.ndarray
    beta_lin: np.ndarray
    beta_ang: np.ndarray
    sigma_lin: float = SIGMA_LIN
    sigma_ang: float = SIGMA_ANG


def _direction(raw):
    """tanh then normalize, with the upward fallback when the norm collapses."""
    t = np.tanh(raw)
    norm = np.linalg.norm(t, axis=-1, keepdims=True)
    small = norm < FALLBACK_EPS
    u = np.where(small, UP, t / np.where(small, 1.0, norm))
    return u, t, norm, small[..., 0]


def unit_interval(raw):
    return 0.5 * (np.tanh(raw) + 1.0)


def decode_residual(raw, sigma_lin=SIGMA_LIN, sigma_ang=SIGMA_ANG) -> ResidualAction:
    raw = np.asarray(raw, dtype=float)
    u_lin = _direction(raw[..., DIR_LIN])[0]
    u_ang = _direction(raw[..., DIR_ANG])[0]
    m = unit_interval(raw[..., MAG])
    g = unit_interval(raw[..., GATE])
    return ResidualAction(u_lin, u_ang, m[..., 0], m[..., 1], g[..., 0], g[..., 1], sigma_lin, sigma_ang)


def policy_forward(params: PolicyParams, obs) -> dict:
    """Joint-target mean, log-std, raw residual mean and the decoded residual action."""
    x = normalize_obs(params, obs)
    out, _ = mlp_forward(params.actor, np.atleast_2d(x))
    n = params.n_joints
    if np.ndim(obs) == 1:
        out = out[0]
    raw = out[..., n:]
    c = params.config
    return {
        "joint_target_mean": out[..., :n],
        "joint_log_std": np.clip(params.log_std[:n], *LOG_STD_RANGE),
        "raw_residual": raw,
        "residual_log_std": np.clip(params.log_std[n:], *LOG_STD_RANGE),
        "action": decode_residual(raw, c.sigma_lin, c.sigma_ang),
    }


def value_forward(params: PolicyParams, obs) -> np.ndarray:
    out, _ = mlp_forward(params.critic, np.atleast_2d(normalize_obs(params, obs)))
    return out[:, 0] * params.config.value_scale


def clamp_norm(x, limit: float) -> np.ndarray:
    """Rescale rows of ``x`` so that ||row|| <= limit holds in floating point, not just in exact arithmetic."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    x = np.where(n > limit, x * (limit / np.where(n > 0, n, 1.0)), x)
    # rounding can leave the rescaled norm an ulp above the limit
    while np.any(np.linalg.norm(x, axis=-1) > limit):
        over = (np.linalg.norm(x, axis=-1) > limit)[..., None]
        x = np.where(over, x * (1.0 - 2.0 ** -52), x)
    return x


def residual_impulse(action: ResidualAction) -> np.ndarray:
    lin = action.sigma_lin * np.asarray(action.m_lin)[..., None] * action.u_lin
    ang = action.sigma_ang * np.asarray(action.m_ang)[..., None] * action.u_ang
    return np.concatenate([clamp_norm(lin, action.sigma_lin), clamp_norm(ang, action.sigma_ang)], axis=-1)


def compose_impulse(I_base, I_res, beta_lin, beta_ang) -> np.ndarray:
    """Per-block convex blend: beta I_base + (1 - beta) I_res."""
    bl = np.asarray(beta_lin, dtype=float)
    ba = np.asarray(beta_ang, dtype=float)
    if np.any((bl < 0) | (bl > 1)) or np.any((ba < 0) | (ba > 1)):
        raise ValueError("gates must lie in [0, 1]")
    I_base = np.asarray(I_base, dtype=float)
    I_res = np.asarray(I_res, dtype=float)
    lin = bl[..., None] * I_base[..., :3] + (1.0 - bl[..., None]) * I_res[..., :3]
    ang = ba[..., None] * I_base[..., 3:] + (1.0 - ba[..., None]) * I_res[..., 3:]
    return np.concatenate([lin, ang], axis=-1)


def compose_additive(I_base, I_res) -> np.ndarray:
    """The ungated sum, kept for comparison with the gated law."""
    return np.asarray(I_base, dtype=float) + np.asarray(I_res, dtype=float)


def impulse_to_wrench(I_total, dt_control: float) -> SpatialWrench:
    if not dt_control > 0:
        raise ValueError("dt must be > 0")
    return SpatialWrench.from_vector(np.asarray(I_total, dtype=float) / dt_control)


# ---------------------------------------------------------------------------
# auxiliary losses

def compass_target(F_ref, epsilon):
    F_ref = np.asarray(F_ref, dtype=float)
    norm = np.linalg.norm(F_ref, axis=-1, keepdims=True)
    big = norm > epsilon
    return np.where(big, F_ref / np.where(big, norm, 1.0), UP)


def compass_loss(u, F_ref, epsilon: float):
    """1 - cos(u, d) with d the reference direction, or straight up when the reference is weak."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    u = np.asarray(u, dtype=float)
    d = compass_target(F_ref, epsilon)
    cos = np.sum(u * d, axis=-1) / np.linalg.norm(u, axis=-1)
    return 1.0 - cos


def compass_loss_grad(raw_dir, F_ref, epsilon: float):
    """Loss and its gradient w.r.t. the raw direction logits (target held fixed)."""
    u, t, norm, small = _direction(raw_dir)
    d = compass_target(F_ref, epsilon)
    loss = 1.0 - np.sum(u * d, axis=-1)
    # dL/dt = -(I - u u^T) d / |t|, then through tanh
    proj = d - np.sum(u * d, axis=-1, keepdims=True) * u
    gt = -proj / np.where(small[..., None], 1.0, norm)
    grad = np.where(small[..., None], 0.0, gt * (1.0 - t * t))
    return loss, grad


def sparsity_loss(m_lin, m_ang, beta_lin, beta_ang, lambda_m: float, lambda_g: float,
                  g_anchor: float = 1.0):
    if lambda_m < 0 or lambda_g < 0:
        raise ValueError("sparsity weights must be non-negative")
    return (lambda_m * (np.square(m_lin) + np.square(m_ang))
            + lambda_g * (np.square(g_anchor - beta_lin) + np.square(g_anchor - beta_ang)))


def sparsity_loss_grad(raw, lambda_m, lambda_g, g_anchor=1.0, gates: bool = True):
    """Loss and gradient w.r.t. the raw (..., 12) residual logits."""
    raw = np.asarray(raw, dtype=float)
    grad = np.zeros_like(raw)
    tm = np.tanh(raw[..., MAG])
    m = 0.5 * (tm + 1.0)
    loss = lambda_m * np.sum(m * m, axis=-1)
    grad[..., MAG] = lambda_m * 2.0 * m * 0.5 * (1.0 - tm * tm)
    if gates:
        tg = np.tanh(raw[..., GATE])
        g = 0.5 * (tg + 1.0)
        loss = loss + lambda_g * np.sum((g_anchor - g) ** 2, axis=-1)
        grad[..., GATE] = -lambda_g * 2.0 * (g_anchor - g) * 0.5 * (1.0 - tg * tg)
    return loss, grad


def gaussian_log_prob(a, mean, log_std):
    a = np.asarray(a, dtype=float)
    z = (a - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std, axis=-1) - 0.5 * a.shape[-1] * np.log(2 * np.pi)


def gaussian_log_prob_grad(a, mean, log_std):
    """(logp, d/dmean, d/dlog_std)."""
    inv_var = np.exp(-2.0 * log_std)
    diff = np.asarray(a, dtype=float) - mean
    logp = gaussian_log_prob(a, mean, log_std)
    return logp, diff * inv_var, diff * diff * inv_var - 1.0


@dataclass
class GradReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray
    passed: bool

    def __str__(self):
        status = "ok" if self.passed else "FAILED"
        return f"gradient check {status}: rel error {self.max_rel_error:.3g} (worst parameter {self.worst_index})"


def grad_check(loss_fn: Callable, params, tol: float = 1e-5, h: float = 1e-5) -> GradReport:
    """Compare ``loss_fn(x) -> (value, grad)`` against central differences.

    The relative error is ||g_analytic - g_fd||_inf / max(||g_fd||_inf, 1e-12).
    """
    x = np.array(params, dtype=float)
    _, g = loss_fn(x)
    g = np.asarray(g, dtype=float).reshape(x.shape)
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(np.sum(loss_fn(x)[0]))
        flat[i] = old - h
        fm = float(np.sum(loss_fn(x)[0]))
        flat[i] = old
        nflat[i] = (fp - fm) / (2.0 * h)
    diff = np.abs(g - num).reshape(-1)
    scale = max(float(np.abs(num).max()) if num.size else 0.0, 1e-12)
    worst = int(np.argmax(diff)) if diff.size else 0
    err = float(diff.max() / scale) if diff.size else 0.0
    return GradReport(err, worst, g, num, err <= tol)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: PolicyParams) -> bytes:
    header = {
        "format": "impulse-assist-policy", "version": CHECKPOINT_VERSION,
        "obs_digest": params.spec.digest,
        "spec": {"n_joints": params.spec.n_joints, "n_links": params.spec.n_links,
                 "history": params.spec.history},
        "config": {"hidden": list(params.config.hidden), "sigma_lin": params.config.sigma_lin,
                   "sigma_ang": params.config.sigma_ang, "magnitude_bias": params.config.magnitude_bias,
                   "gate_bias": params.config.gate_bias,
                   "init_log_std": params.config.init_log_std, "joint_scale": params.config.joint_scale,
                   "g_anchor": params.config.g_anchor, "value_scale": params.config.value_scale},
        "shapes": [list(a.shape) for a in params.arrays()],
    }
    arrays = {f"a{i}": a for i, a in enumerate(params.arrays())}
    arrays["obs_mean"] = params.obs_mean
    arrays["obs_std"] = params.obs_std
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    # fixed zip timestamps keep the bytes reproducible; np.savez stamps the wall clock
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, a in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(a), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    return buf.getvalue()


def load_checkpoint(data: bytes) -> PolicyParams:
    with np.load(io.BytesIO(data)) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != "impulse-assist-policy":
            raise ValueError("not a policy checkpoint")
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        spec = ObservationSpec(**header["spec"])
        if spec.digest != header["obs_digest"]:
            raise ValueError("observation layout digest mismatch")
        cfg = dict(header["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        config = PolicyConfig(**cfg)
        arrays = [z[f"a{i}"] for i in range(len(header["shapes"]))]
        obs_mean, obs_std = z["obs_mean"], z["obs_std"]
    for a, shape in zip(arrays, header["shapes"]):
        if list(a.shape) != shape:
            raise ValueError("checkpoint array shape mismatch")
    n_layers = len(config.hidden) + 1
    actor = [[arrays[2 * i], arrays[2 * i + 1]] for i in range(n_layers)]
    off = 2 * n_layers
    critic = [[arrays[off + 2 * i], arrays[off + 2 * i + 1]] for i in range(n_layers)]
    return PolicyParams(actor, critic, arrays[-1], spec, config, obs_mean, obs_std)
