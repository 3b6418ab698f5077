"""Split the base demand into friction-cone contact forces and a minimal assist wrench.

Per frame we solve

    min  ||W||_Q^2 + lam ||f||^2
    s.t. J_base^T f + W = tau_base,   f_i in linearized friction cone

with each contact force parameterized by non-negative coefficients on the edges
of a friction pyramid, f_i = G_i c_i, c_i >= 0. The assist wrench W is free, so
the equality is always feasible.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import SpatialWrench, demand_trajectory, kernel
from .model import CharacterModel, ReferenceTrajectory, point_jacobian

DEFAULT_Q = np.diag([1.0, 1.0, 10.0, 1.0, 1.0, 1.0])


@dataclass(frozen=True)
class ContactPoint:
    link: int
    local_point: np.ndarray
    world_point: np.ndarray
    mu: float = 0.8
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    n_edges: int = 4
    site: int = -1  # index into model.contacts

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("friction coefficient must be > 0")

    @property
    def pyramid_edges(self) -> np.ndarray:
        return friction_pyramid(self.normal, self.mu, self.n_edges)


def friction_pyramid(normal, mu, k=4) -> np.ndarray:
    """(k, 3) unit edge generators lying on the Coulomb cone boundary."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    ang = 2.0 * np.pi * np.arange(k) / k
    tang = np.cos(ang)[:, None] * t1 + np.sin(ang)[:, None] * t2
    return (n[None, :] + mu * tang) / np.sqrt(1.0 + mu * mu)


@dataclass(frozen=True)
class ContactParams:
    height_threshold: float = 0.03
    speed_threshold: float = 0.5
    mu: float = 0.8
    contact_links: Optional[tuple] = None  # restrict to sites on these links


@dataclass(frozen=True)
class QPWeights:
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())
    lam: float = 1e-4


@dataclass
class QPProblem:
    P: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    cone_blocks: list  # (slice into x, (k, 3) edge basis)
    n_coef: int
    Q: np.ndarray
    lam: float

    @property
    def n_vars(self) -> int:
        return self.P.shape[0]


@dataclass
class DecompositionResult:
    coefficients: np.ndarray
    contact_forces: np.ndarray  # (n_contacts, 3)
    assist_wrench: SpatialWrench
    kkt_residuals: dict
    objective: float
    iterations: int = 0
    converged: bool = True

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.coefficients, self.assist_wrench.vector])


@dataclass
class ImpulseProfile:
    I_base: np.ndarray  # (F, 6)
    W_assist: np.ndarray  # (F, 6)
    dt: float

    @property
    def n_frames(self) -> int:
        return self.I_base.shape[0]


# ---------------------------------------------------------------------------

def detect_contacts(model: CharacterModel, traj: ReferenceTrajectory,
                    params: ContactParams = ContactParams()) -> list:
    """Per-frame active contact points from reference height and speed."""
    if traj.derived_vel is None:
        raise ValueError("trajectory has no derived velocities")
    sites = list(enumerate(model.contacts))
    if params.contact_links is not None:
        for link in params.contact_links:
            if not 0 <= link < len(model.links):
                raise ValueError(f"invalid contact link {link}")
        sites = [(i, s) for i, s in sites if s.link in params.contact_links]
    if not sites:
        return [[] for _ in range(traj.n_frames)]
    links = np.array([s.link for _, s in sites])
    local = np.array([s.point for _, s in sites])
    k = kernel(model)
    schedule = []
    for t in range(traj.n_frames):
        pos, vel = k.points_state(traj.frames[t], traj.derived_vel[t], links, local)
        active = []
        for (idx, site), x, xd in zip(sites, pos, vel):
            if x[2] <= params.height_threshold and np.linalg.norm(xd) <= params.speed_threshold:
                active.append(ContactPoint(site.link, np.asarray(site.point), x, params.mu, site=idx))
        schedule.append(active)
    return schedule


def base_jacobians(model: CharacterModel, q, contacts) -> list:
    """3 x 6 base block of each contact point Jacobian."""
    return [point_jacobian(model, q, c.link, c.local_point)[:, :6] for c in contacts]


def build_qp(demand_base, contacts, jacobians, weights: QPWeights = QPWeights()) -> QPProblem:
    Q = np.asarray(weights.Q, dtype=float)
    if Q.shape != (6, 6) or np.max(np.abs(Q - Q.T)) > 1e-10 * max(1.0, np.abs(Q).max()):
        raise ValueError("Q must be a symmetric 6x6 matrix")
    if np.linalg.eigvalsh(Q)[0] < -1e-12:
        raise ValueError("Q must be positive semi-definite")
    if not weights.lam > 0:
        raise ValueError("lambda must be > 0")
    b = np.asarray(demand_base, dtype=float)
    blocks = []
    cols = []
    off = 0
    for cp, J in zip(contacts, jacobians):
        G = cp.pyramid_edges  # (k, 3)
        blocks.append((slice(off, off + G.shape[0]), G))
        cols.append(J.T @ G.T)  # (6, k)
        off += G.shape[0]
    n_coef = off
    B = np.hstack(cols) if cols else np.zeros((6, 0))
    nx = n_coef + 6
    P = np.zeros((nx, nx))
    for sl, G in blocks:
        P[sl, sl] = 2.0 * weights.lam * (G @ G.T)
    P[n_coef:, n_coef:] = 2.0 * Q
    A = np.hstack([B, np.eye(6)])
    return QPProblem(P=P, c=np.zeros(nx), A_eq=A, b_eq=b, cone_blocks=blocks, n_coef=n_coef,
                     Q=Q, lam=float(weights.lam))


def _reduced(problem: QPProblem):
    """Objective in the coefficients alone after eliminating W = b - B c."""
    nc = problem.n_coef
    B = problem.A_eq[:, :nc]
    Pw = problem.P[nc:, nc:]
    H = problem.P[:nc, :nc] + B.T @ Pw @ B
    g = problem.c[:nc] - B.T @ Pw @ problem.b_eq + B.T @ problem.c[nc:]
    return H, g, B


def _active_set_polish(H, g, c0, tol, max_iter=200):
    """Lawson-Hanson style refinement of a feasible starting point for
    min 0.5 c'Hc + g'c, c >= 0. Returns (c, iterations)."""
    n = len(g)
    scale = max(1.0, np.abs(g).max(), np.abs(H).max())
    c = np.maximum(c0, 0.0)
    free = c > 0.0
    it = 0
    for it in range(1, max_iter + 1):
        # solve on the free set, stepping back whenever the solution leaves the orthant
        for _ in range(n + 1):
            y = np.zeros(n)
            if free.any():
                idx = np.nonzero(free)[0]
                y[idx] = np.linalg.lstsq(H[np.ix_(idx, idx)], -g[idx], rcond=None)[0]
            bad = free & (y <= 0.0)
            if not bad.any():
                c = y
                break
            ratio = c[bad] / (c[bad] - y[bad])
            alpha = ratio.min()
            c = c + alpha * (y - c)
            free = free & (c > 1e-14 * scale)
            c[~free] = 0.0
        grad = H @ c + g
        cand = ~free & (grad < -tol * scale)
        if not cand.any():
            break
        free[np.argmin(np.where(cand, grad, np.inf))] = True
    return np.maximum(c, 0.0), it


def qp_solve(problem: QPProblem, tol: float = 1e-8, max_iter: int = 5000,
             warm_start: Optional[np.ndarray] = None, rho: float = 1.0,
             alpha: float = 1.6) -> DecompositionResult:
    """ADMM on the non-negative coefficient problem, finished by an active-set polish."""
    nc = problem.n_coef
    b = problem.b_eq
    iters = 0
    converged = True
    if nc == 0:
        c = np.zeros(0)
    else:
        H, g, B = _reduced(problem)
        scale = max(1.0, np.abs(H).max())
        rho_s = rho * scale
        K = np.linalg.cholesky(H + rho_s * np.eye(nc))
        z = np.maximum(warm_start, 0.0) if warm_start is not None and len(warm_start) == nc \
            else np.zeros(nc)
        u = np.zeros(nc)
        gscale = max(1.0, np.abs(g).max())
        converged = False
        for iters in range(1, max_iter + 1):
            rhs = rho_s * (z - u) - g
            x = np.linalg.solve(K.T, np.linalg.solve(K, rhs))
            xr = alpha * x + (1.0 - alpha) * z
            z_old = z
            z = np.maximum(xr + u, 0.0)
            u = u + xr - z
            r_prim = np.abs(x - z).max()
            r_dual = rho_s * np.abs(z - z_old).max()
            if r_prim <= tol * max(1.0, np.abs(z).max()) and r_dual <= tol * gscale:
                converged = True
                break
            if iters % 25 == 0:
                # cheap exit once the support has settled
                cp, _ = _active_set_polish(H, g, z, tol)
                if _natural_residual(H, g, cp) <= tol * gscale:
                    z = cp
                    converged = True
                    break
        c, _ = _active_set_polish(H, g, z, tol)
        if _natural_residual(H, g, c) <= tol * gscale:
            converged = True
    W = b - problem.A_eq[:, :nc] @ c
    forces = np.array([G.T @ c[sl] for sl, G in problem.cone_blocks]).reshape(-1, 3)
    objective = float(W @ problem.Q @ W + problem.lam * np.sum(forces * forces))
    result = DecompositionResult(c, forces, SpatialWrench.from_vector(W), {}, objective,
                                 iters, converged)
    result.kkt_residuals = kkt_check(problem, result)
    return result


def _natural_residual(H, g, c):
    grad = H @ c + g
    return float(np.abs(c - np.maximum(c - grad, 0.0)).max()) if len(c) else 0.0


def kkt_check(problem: QPProblem, result: DecompositionResult, tol: Optional[float] = None) -> dict:
    """KKT residuals of the pyramid-parameterized QP at ``result``.

    Equality multipliers come from the (unconstrained) W block, y = P_WW W + c_W;
    the bound multipliers are the remaining gradient on the coefficients.
    """
    nc = problem.n_coef
    x = result.x
    c = x[:nc]
    grad = problem.P @ x + problem.c
    y = grad[nc:]
    nu = grad[:nc] - problem.A_eq[:, :nc].T @ y
    res = {
        "stationarity": float(np.abs(np.minimum(nu, 0.0)).max()) if nc else 0.0,
        "primal_eq": float(np.abs(problem.A_eq @ x - problem.b_eq).max()),
        "complementarity": float(np.abs(c * np.maximum(nu, 0.0)).max()) if nc else 0.0,
        "cone_violation": float(np.maximum(-c, 0.0).max()) if nc else 0.0,
    }
    if tol is not None:
        res["passed"] = all(v <= tol for v in res.values())
    return res


def impulse_baseline(wrenches, dt: float) -> ImpulseProfile:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    W = np.asarray(wrenches, dtype=float).reshape(-1, 6)
    return ImpulseProfile(W * dt, W.copy(), float(dt))


@dataclass(frozen=True)
class AnalysisParams:
    contact: ContactParams = ContactParams()
    weights: QPWeights = QPWeights()
    tol: float = 1e-8
    max_iter: int = 5000


@dataclass
class Analysis:
    profile: ImpulseProfile
    contact_forces: list  # per frame (n_active, 3)
    demands: list
    schedule: list
    results: list

    @property
    def nonconverged_frames(self) -> list:
        return [i for i, r in enumerate(self.results) if not r.converged]


class FrameError(RuntimeError):
    def __init__(self, frame, msg):
        super().__init__(f"frame {frame}: {msg}")
        self.frame = frame


def analyze(model: CharacterModel, traj: ReferenceTrajectory,
            params: AnalysisParams = AnalysisParams()) -> Analysis:
    """Derivatives -> RNEA demand -> contacts -> per-frame QP -> impulse baseline."""
    from .model import finite_difference_derivatives

    if traj.derived_vel is None or traj.derived_acc is None:
        traj = finite_difference_derivatives(traj)
    demands = demand_trajectory(model, traj)
    schedule = detect_contacts(model, traj, params.contact)
    results = []
    prev_key, prev_c = None, None
    for t, (dem, contacts) in enumerate(zip(demands, schedule)):
        try:
            jac = base_jacobians(model, traj.frames[t], contacts)
            prob = build_qp(dem.base_part, contacts, jac, params.weights)
            key = tuple(c.site for c in contacts)
            warm = prev_c if key == prev_key else None
            res = qp_solve(prob, params.tol, params.max_iter, warm_start=warm)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise FrameError(t, str(exc)) from exc
        prev_key, prev_c = key, res.coefficients
        results.append(res)
    W = np.array([r.assist_wrench.vector for r in results])
    return Analysis(impulse_baseline(W, traj.dt), [r.contact_forces for r in results],
                    demands, schedule, results)


PROFILE_COLUMNS = ["t", "Wx", "Wy", "Wz", "Wtx", "Wty", "Wtz", "Ix", "Iy", "Iz", "Itx", "Ity", "Itz"]


def profile_csv(model: CharacterModel, analysis: Analysis) -> str:
    """Per-frame impulse profile: wrench, impulse, per-site normal/tangential force, KKT."""
    n_sites = len(model.contacts)
    header = list(PROFILE_COLUMNS)
    for i in range(n_sites):
        header += [f"c{i}_fn", f"c{i}_ft"]
    header.append("kkt_stationarity")
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    prof = analysis.profile
    for t in range(prof.n_frames):
        row = [t * prof.dt, *prof.W_assist[t], *prof.I_base[t]]
        per_site = np.zeros((n_sites, 2))
        for cp, f in zip(analysis.schedule[t], analysis.contact_forces[t]):
            fn = float(f @ cp.normal)
            per_site[cp.site] = (fn, float(np.linalg.norm(f - fn * cp.normal)))
        row += per_site.ravel().tolist()
        row.append(analysis.results[t].kkt_residuals["stationarity"])
        out.write(",".join(repr(float(x)) for x in row) + "\n")
    return out.getvalue()


def read_profile_csv(text: str) -> ImpulseProfile:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    wi = [header.index(c) for c in PROFILE_COLUMNS[1:7]]
    ii = [header.index(c) for c in PROFILE_COLUMNS[7:13]]
    t = data[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    return ImpulseProfile(data[:, ii], data[:, wi], dt)
