"""Time the compiled dynamics core against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints per-call timings for RNEA, the mass matrix and one contact simulation
step on each builtin model, the speedup, and the largest output difference
between the two backends.
"""

import argparse
import timeit

import numpy as np

from impulse_assist import backend
from impulse_assist.dynamics import kernel
from impulse_assist.model import BUILTIN_MODELS, GRAVITY, random_chain, random_q
from impulse_assist.sim import ContactParams


def _cases(model, rng):
    q = random_q(model, rng)
    q[2] = 0.5
    v = rng.normal(size=model.nv)
    a = rng.normal(size=model.nv)
    links = np.array([c.link for c in model.contacts], dtype=int)
    local = np.array([c.point for c in model.contacts], dtype=float).reshape(-1, 3)
    tau = rng.normal(size=model.n_joints)
    wrench = rng.normal(size=6)
    cp = ContactParams().tuple
    return {
        "rnea": lambda k: k.rnea(q, v, a, GRAVITY),
        "mass_matrix": lambda k: k.mass_matrix(q),
        "step": lambda k: k.step(q, v, tau, wrench, GRAVITY, links, local, cp, 1.0 / 240.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args(argv)
    if "cython" not in backend.available():
        print("compiled kernels not built; only the Python fallback is available")
        return 1
    rng = np.random.default_rng(0)
    models = {name: make() for name, make in BUILTIN_MODELS.items()}
    models["chain8"] = random_chain(8, rng)
    print(f"{'model':<10}{'op':<13}{'python us':>11}{'cython us':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, model in models.items():
        kp, kc = kernel(model, "python"), kernel(model, "cython")
        for op, fn in _cases(model, rng).items():
            tp = min(timeit.repeat(lambda: fn(kp), number=args.repeat, repeat=3)) / args.repeat
            tc = min(timeit.repeat(lambda: fn(kc), number=args.repeat, repeat=3)) / args.repeat
            rp, rc = fn(kp), fn(kc)
            rp = rp if isinstance(rp, tuple) else (rp,)
            rc = rc if isinstance(rc, tuple) else (rc,)
            diff = max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)), initial=0.0)) for x, y in zip(rp, rc))
            print(f"{name:<10}{op:<13}{tp * 1e6:>11.1f}{tc * 1e6:>11.1f}{tp / tc:>9.1f}{diff:>12.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
