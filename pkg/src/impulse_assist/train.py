"""Desk-scale PPO training of the residual impulse policy on toy tracking tasks."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import policy as pol
from .decomp import ImpulseProfile, analyze
from .model import (CharacterModel, MotionParams, ReferenceTrajectory, make_chain3, make_free_body,
                    synthesize_exaggerated)
from .sim import ControlOutput, Episode, PDGains, SimConfig, default_gains

CURVE_COLUMNS = ["iteration", "success_rate", "mean_body_pos_error", "ppo_loss", "compass_loss",
                 "sparsity_loss", "mean_beta_lin", "mean_beta_ang", "mean_m"]


@dataclass(frozen=True)
class RewardWeights:
    w_pose: float = 0.4
    w_vel: float = 0.2
    w_root: float = 0.3
    w_impulse: float = 0.1
    a_pose: float = 2.0
    a_vel: float = 0.1
    a_root: float = 10.0


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs: int = 10
    minibatch: int = 128
    grad_clip: float = 1.0
    value_coef: float = 0.5
    w_c: float = 0.5
    w_s: float = 0.1
    lambda_m: float = 1.0
    lambda_g: float = 0.1
    compass_eps: float = 1e-3  # N (or N·m) below which the target turns vertical
    disable_compass: bool = False
    disable_sparsity: bool = False
    naive_mode: bool = False
    seed: int = 0
    env_count: int = 16
    iterations: int = 500
    target_success: float = 0.9
    patience: int = 20
    reward: RewardWeights = RewardWeights()

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be > 0")

    @classmethod
    def ablation(cls, name: Optional[str], **kw) -> "TrainConfig":
        flags = {None: {}, "none": {}, "compass": {"disable_compass": True},
                 "sparsity": {"disable_sparsity": True},
                 "both": {"disable_compass": True, "disable_sparsity": True},
                 "naive": {"naive_mode": True}}
        if name not in flags:
            raise ValueError(f"unknown ablation {name!r}")
        return cls(**{**flags[name], **kw})


def tracking_reward(pose_err: float, vel_err: float, root_err: float, applied_residual,
                    weights: RewardWeights = RewardWeights()) -> float:
    """Exponential tracking terms minus a quadratic penalty on the applied residual impulse."""
    w = weights
    pen = float(np.sum(np.square(applied_residual)))
    return (w.w_pose * math.exp(-w.a_pose * pose_err) + w.w_vel * math.exp(-w.a_vel * vel_err)
            + w.w_root * math.exp(-w.a_root * root_err ** 2) - w.w_impulse * pen)


def gae(rewards, values, dones, gamma: float, lam: float, bootstrap: float = 0.0):
    """Advantages and value targets; ``bootstrap`` is V(s_T) for a non-terminal batch end."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if not (len(r) == len(v) == len(d)):
        raise ValueError("rewards, values and dones must have equal length")
    adv = np.zeros(len(r))
    nxt_v, nxt_a = bootstrap, 0.0
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * nxt_v * live - v[t]
        nxt_a = delta + gamma * lam * live * nxt_a
        adv[t] = nxt_a
        nxt_v = v[t]
    return adv, adv + v


class Adam:
    def __init__(self, arrays, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# tasks

@dataclass
class Task:
    name: str
    model: CharacterModel
    traj: ReferenceTrajectory
    baseline: ImpulseProfile
    wrench_ref: np.ndarray  # per-frame analytical wrench, the compass reference
    gains: PDGains
    sim: SimConfig = SimConfig()


def _task_from(name, model, traj):
    an = analyze(model, traj)
    return Task(name, model, traj, an.profile, an.profile.W_assist, default_gains(model))


# heavy enough that one control step of the full residual range (25 N·s)
# changes the velocity by about 1 m/s rather than 5
TRAIN_BODY = dict(mass=20.0, size=(0.5, 0.4, 0.4))


def make_task(name: str) -> Task:
    if name == "free-body-dash":
        m = make_free_body(**TRAIN_BODY)
        return _task_from(name, m, synthesize_exaggerated("ground_dash", MotionParams(), m))
    if name == "free-body-double-jump":
        m = make_free_body(**TRAIN_BODY)
        return _task_from(name, m, synthesize_exaggerated("double_jump", MotionParams(), m))
    if name == "chain3-dash":
        m = make_chain3()
        return _task_from(name, m, synthesize_exaggerated("ground_dash", MotionParams(peak_speed=3.0), m))
    raise ValueError(f"unknown task {name!r}")


TASKS = ("free-body-dash", "free-body-double-jump", "chain3-dash")


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    F_ref: np.ndarray
    I_base: np.ndarray
    advantages: np.ndarray = None
    returns: np.ndarray = None

    def __len__(self):
        return len(self.rewards)


def observation_stats(task: Task, spec: pol.ObservationSpec):
    """Fixed normalization from the reference states (zero velocity error, baseline history)."""
    traj = task.traj
    rows = []
    hist = np.zeros((spec.history, 6))
    for k in range(traj.n_frames - 1):
        rows.append(pol.build_observation(task.model, traj.frames[k], traj.derived_vel[k], traj, k, hist, spec))
        hist = np.vstack([hist[1:], task.baseline.I_base[k]])
    X = np.array(rows)
    return X.mean(axis=0), np.maximum(X.std(axis=0), 1.0)


def _control(params: pol.PolicyParams, task: Task, ep: Episode, a, naive: bool):
    """Map a sampled action row onto the simulator control and the applied residual."""
    n = params.n_joints
    c = params.config
    ref_joints = task.traj.frames[ep.frame + 1, 7:]
    targets = ref_joints + c.joint_scale * a[:n]
    raw = np.concatenate([a[n:], np.zeros(pol.N_RESIDUAL - pol.N_RESIDUAL_SAMPLED)])
    act = pol.decode_residual(raw, c.sigma_lin, c.sigma_ang)
    I_res = pol.residual_impulse(act)
    scale = np.array([c.sigma_lin] * 3 + [c.sigma_ang] * 3)
    if naive:
        return ControlOutput(targets, I_res, 0.0, 0.0, I_total=I_res), I_res / scale, act
    bl, ba = float(act.beta_lin), float(act.beta_ang)
    applied = np.concatenate([(1 - bl) * I_res[:3], (1 - ba) * I_res[3:]]) / scale
    return ControlOutput(targets, I_res, bl, ba), applied, act


def _history(ep: Episode, H: int):
    h = ep.history[-H:] if len(ep.history) else np.zeros((0, 6))
    return np.vstack([np.zeros((H - len(h), 6)), h])


def collect(params: pol.PolicyParams, task: Task, config: TrainConfig, seeds, rng,
            deterministic: bool = False, perturbations=None):
    """Run one episode per seed in lockstep; returns (Batch, episode results)."""
    from .metrics import pose_error, velocity_error

    spec = params.spec
    eps = [Episode(task.model, task.traj, task.baseline, task.gains, task.sim, int(s),
                   None if perturbations is None else perturbations[i]) for i, s in enumerate(seeds)]
    per_env = [dict(obs=[], act=[], logp=[], rew=[], val=[], done=[], F=[], Ib=[]) for _ in eps]
    while True:
        alive = [i for i, e in enumerate(eps) if not e.done]
        if not alive:
            break
        obs = np.array([pol.build_observation(task.model, eps[i].state.q, eps[i].state.v, task.traj,
                                              eps[i].frame, _history(eps[i], spec.history), spec)
                        for i in alive])
        out = pol.policy_forward(params, obs)
        mean = np.concatenate([out["joint_target_mean"], out["raw_residual"][:, :pol.N_RESIDUAL_SAMPLED]], axis=1)
        log_std = np.concatenate([out["joint_log_std"], out["residual_log_std"]])
        if deterministic:
            actions = mean
        else:
            actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        logp = pol.gaussian_log_prob(actions, mean, log_std)
        values = pol.value_forward(params, obs)
        for row, i in enumerate(alive):
            ep = eps[i]
            k = ep.frame
            ctrl, applied, _ = _control(params, task, ep, actions[row], config.naive_mode)
            ep.apply(ctrl)
            ref_q = task.traj.frames[k + 1]
            ref_v = task.traj.derived_vel[k + 1]
            st = ep.state
            r = tracking_reward(pose_error(task.model, st.q, ref_q), velocity_error(st.v, ref_v),
                                float(np.linalg.norm(st.q[:3] - ref_q[:3])), applied, config.reward)
            d = per_env[i]
            d["obs"].append(obs[row]); d["act"].append(actions[row]); d["logp"].append(logp[row])
            d["rew"].append(r); d["val"].append(values[row]); d["done"].append(ep.done)
            d["F"].append(task.wrench_ref[k]); d["Ib"].append(task.baseline.I_base[k])
    advs, rets = [], []
    for d in per_env:
        a, ret = gae(d["rew"], d["val"], d["done"], config.gamma, config.gae_lambda)
        advs.append(a); rets.append(ret)
    cat = lambda key: np.concatenate([np.asarray(d[key], dtype=float).reshape(len(d[key]), -1) for d in per_env])
    batch = Batch(cat("obs"), cat("act"), cat("logp")[:, 0], cat("rew")[:, 0], cat("val")[:, 0],
                  cat("done")[:, 0], cat("F"), cat("Ib"), np.concatenate(advs), np.concatenate(rets))
    return batch, [e.result() for e in eps]


# ---------------------------------------------------------------------------
# update

def _loss_and_grads(params: pol.PolicyParams, mb: Batch, adv, config: TrainConfig):
    n = params.n_joints
    ns = pol.N_RESIDUAL_SAMPLED
    x = pol.normalize_obs(params, mb.obs)
    out, acts = pol.mlp_forward(params.actor, x)
    B = len(mb)
    mean = out[:, :n + ns]
    raw_log_std = params.log_std
    log_std = np.clip(raw_log_std, *pol.LOG_STD_RANGE)
    logp, dmean, dlogstd = pol.gaussian_log_prob_grad(mb.actions, mean, log_std)
    ratio = np.exp(logp - mb.logp)
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    policy_loss = -float(surr.mean())
    active = (ratio * adv) <= (clipped * adv)
    dl_dlogp = np.where(active, -ratio * adv, 0.0) / B
    g_out = np.zeros_like(out)
    g_out[:, :n + ns] = dl_dlogp[:, None] * dmean
    in_range = (raw_log_std >= pol.LOG_STD_RANGE[0]) & (raw_log_std <= pol.LOG_STD_RANGE[1])
    g_logstd = (dl_dlogp[:, None] * dlogstd).sum(axis=0) * in_range

    raw = out[:, n:]
    compass = 0.0
    sparsity = 0.0
    use_compass = config.w_c > 0 and not config.disable_compass and not config.naive_mode
    if use_compass:
        l1, g1 = pol.compass_loss_grad(raw[:, pol.DIR_LIN], mb.F_ref[:, :3], config.compass_eps)
        l2, g2 = pol.compass_loss_grad(raw[:, pol.DIR_ANG], mb.F_ref[:, 3:], config.compass_eps)
        compass = float(np.mean(l1 + l2))
        g_out[:, n + pol.DIR_LIN.start:n + pol.DIR_LIN.stop] += config.w_c * g1 / B
        g_out[:, n + pol.DIR_ANG.start:n + pol.DIR_ANG.stop] += config.w_c * g2 / B
    if config.w_s > 0 and not config.disable_sparsity:
        ls, gs = pol.sparsity_loss_grad(raw, config.lambda_m, config.lambda_g, params.config.g_anchor,
                                        gates=not config.naive_mode)
        sparsity = float(np.mean(ls))
        g_out[:, n:] += config.w_s * gs / B

    v_out, v_acts = pol.mlp_forward(params.critic, x)
    v = v_out[:, 0]
    target = mb.returns / params.config.value_scale
    value_loss = float(0.5 * np.mean((v - target) ** 2))
    g_v = (config.value_coef * (v - target) / B)[:, None]

    grads_actor = pol.mlp_backward(params.actor, acts, g_out)
    grads_critic = pol.mlp_backward(params.critic, v_acts, g_v)
    grads = [g for layer in grads_actor for g in layer] + [g for layer in grads_critic for g in layer]
    grads.append(g_logstd)
    total = (policy_loss + config.value_coef * value_loss + config.w_c * compass * use_compass
             + config.w_s * sparsity)
    approx_kl = float(np.mean(mb.logp - logp))
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > config.clip_eps))
    stats = dict(loss=total, policy_loss=policy_loss, value_loss=value_loss, compass_loss=compass,
                 sparsity_loss=sparsity, clip_fraction=clip_frac, kl=approx_kl)
    return stats, grads


def _subset(batch: Batch, idx) -> Batch:
    return Batch(batch.obs[idx], batch.actions[idx], batch.logp[idx], batch.rewards[idx],
                 batch.values[idx], batch.dones[idx], batch.F_ref[idx], batch.I_base[idx],
                 batch.advantages[idx], batch.returns[idx])


class TrainingDiverged(RuntimeError):
    pass


def ppo_update(params: pol.PolicyParams, batch: Batch, config: TrainConfig, optimizer: Adam,
               rng: np.random.Generator) -> dict:
    """In-place PPO epochs over shuffled minibatches; returns stats averaged over steps."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    adv = batch.advantages
    adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    arrays = params.arrays()
    acc = {}
    steps = 0
    for _ in range(config.epochs):
        perm = rng.permutation(len(batch))
        for s in range(0, len(batch), config.minibatch):
            idx = perm[s:s + config.minibatch]
            stats, grads = _loss_and_grads(params, _subset(batch, idx), adv[idx], config)
            if not all(np.isfinite(v) for v in stats.values()):
                raise TrainingDiverged(f"non-finite loss: {stats}")
            # actor and critic are clipped separately so value errors cannot starve the policy
            n_actor = 2 * len(params.actor)
            groups = [list(range(n_actor)) + [len(grads) - 1], list(range(n_actor, len(grads) - 1))]
            for group in groups:
                norm = math.sqrt(sum(float(np.sum(grads[i] * grads[i])) for i in group))
                if norm > config.grad_clip:
                    for i in group:
                        grads[i] = grads[i] * (config.grad_clip / norm)
            optimizer.step(arrays, grads)
            for k, v in stats.items():
                acc[k] = acc.get(k, 0.0) + v
            steps += 1
    return {k: v / steps for k, v in acc.items()}


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    params: pol.PolicyParams
    curves: list
    diverged: bool = False
    message: str = ""

    def iterations_to(self, success: float) -> Optional[int]:
        for row in self.curves:
            if row["success_rate"] >= success:
                return int(row["iteration"])
        return None

    def curves_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(CURVE_COLUMNS) + "\n")
        for row in self.curves:
            out.write(",".join(str(int(row[c])) if c == "iteration" else repr(float(row[c]))
                               for c in CURVE_COLUMNS) + "\n")
        return out.getvalue()


def train_loop(task: Task, config: TrainConfig = TrainConfig(), env_count: Optional[int] = None,
               stop_at_success: Optional[float] = None, early_stop: bool = True,
               callback: Optional[Callable] = None) -> TrainResult:
    """PPO iterations of ``env_count`` lockstep episodes each.

    Stops early once the success rate has been at or above the target for
    ``patience`` consecutive iterations, or (if given) as soon as it first
    reaches ``stop_at_success``.
    """
    env_count = env_count or config.env_count
    spec = pol.ObservationSpec.for_model(task.model)
    params = pol.init_policy(spec, pol.PolicyConfig(), seed=config.seed)
    params.obs_mean, params.obs_std = observation_stats(task, spec)
    optimizer = Adam(params.arrays(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 7919)
    curves = []
    streak = 0
    last_good = params.copy()
    for it in range(config.iterations):
        seeds = [config.seed * 1_000_003 + it * env_count + e for e in range(env_count)]
        batch, results = collect(params, task, config, seeds, rng)
        try:
            stats = ppo_update(params, batch, config, optimizer, rng)
        except TrainingDiverged as exc:
            return TrainResult(last_good, curves, True, str(exc))
        if not params.is_finite():
            return TrainResult(last_good, curves, True, "non-finite parameters")
        last_good = params.copy()
        succ = float(np.mean([r.success for r in results]))
        beta = np.concatenate([r.beta for r in results])
        mags = pol.unit_interval(batch.actions[:, spec.n_joints + pol.MAG.start:spec.n_joints + pol.MAG.stop])
        row = dict(iteration=it, success_rate=succ,
                   mean_body_pos_error=float(np.mean([r.final_cumulative_error for r in results])),
                   ppo_loss=stats["policy_loss"],
                   compass_loss=stats.get("compass_loss", 0.0), sparsity_loss=stats.get("sparsity_loss", 0.0),
                   mean_beta_lin=float(beta[:, 0].mean()), mean_beta_ang=float(beta[:, 1].mean()),
                   mean_m=float(mags.mean()))
        curves.append(row)
        if callback:
            callback(row)
        streak = streak + 1 if succ >= config.target_success else 0
        if stop_at_success is not None and succ >= stop_at_success:
            break
        if early_stop and streak >= config.patience:
            break
    return TrainResult(params, curves)


def policy_controller(params: pol.PolicyParams, task: Task, naive: bool = False):
    """Deterministic controller (mean action) usable with the simulator rollouts."""
    spec = params.spec

    def control(ep: Episode) -> ControlOutput:
        obs = pol.build_observation(task.model, ep.state.q, ep.state.v, ep.traj, ep.frame,
                                    _history(ep, spec.history), spec)
        out = pol.policy_forward(params, obs)
        a = np.concatenate([out["joint_target_mean"], out["raw_residual"][:pol.N_RESIDUAL_SAMPLED]])
        return _control(params, task, ep, a, naive)[0]

    return control
