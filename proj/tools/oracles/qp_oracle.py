#!/usr/bin/env python3
"""Brute-force dual QP reference for the RBF C-SVC.

Generates random small problems, solves

    max_a  sum(a) - 1/2 a^T Q a,   Q_ij = y_i y_j exp(-gamma ||x_i - x_j||^2)
    s.t.   0 <= a_i <= C,  y^T a = 0

by accelerated projected gradient ascent, polishes the free set with an
equality-constrained Newton solve, and checks the KKT residual before
writing the decision values on probe points. Output is consumed by the
C++ acceptance suite and checked in, so the build never runs this script.

    python3 tools/oracles/qp_oracle.py --out tests/data/qp_oracle_cases.json
"""

import argparse
import json
import sys

import numpy as np

KKT_TOL = 1e-8


def rbf_matrix(A, B, gamma):
    d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-gamma * d2)


def project(v, y, C):
    """Euclidean projection onto {0 <= a <= C, y.a = 0} via bisection on the
    multiplier of the equality constraint."""
    def s(lam):
        return float(y @ np.clip(v - lam * y, 0.0, C))

    lo, hi = -1.0, 1.0
    while s(lo) < 0:
        lo *= 2
    while s(hi) > 0:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if s(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-16 * max(1.0, abs(mid)):
            break
    return np.clip(v - 0.5 * (lo + hi) * y, 0.0, C)


def kkt_residual(a, Q, y, C):
    """Largest violation of the optimality conditions, using the best
    multiplier for y.a = 0 (same quantity SMO drives below tol)."""
    G = Q @ a - 1.0  # gradient of the minimization form
    yg = -y * G
    up = ((y > 0) & (a < C)) | ((y < 0) & (a > 0))
    low = ((y > 0) & (a > 0)) | ((y < 0) & (a < C))
    m = yg[up].max() if up.any() else -np.inf
    M = yg[low].min() if low.any() else np.inf
    return max(0.0, m - M)


def polish(a, Q, y, C, bound_tol):
    """Fix near-bound alphas at their bounds and solve the KKT system for the
    rest exactly."""
    a = a.copy()
    at0 = a <= bound_tol * C
    atC = a >= C * (1 - bound_tol)
    a[at0] = 0.0
    a[atC] = C
    F = ~(at0 | atC)
    if not F.any():
        return a
    nf = int(F.sum())
    K = np.zeros((nf + 1, nf + 1))
    K[:nf, :nf] = Q[np.ix_(F, F)]
    K[:nf, nf] = y[F]
    K[nf, :nf] = y[F]
    rhs = np.zeros(nf + 1)
    rhs[:nf] = 1.0 - Q[np.ix_(F, ~F)] @ a[~F]
    rhs[nf] = -(y[~F] @ a[~F])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    a[F] = sol[:nf]
    if (a[F] < 0).any() or (a[F] > C).any():
        return None
    return a


def solve_dual(Q, y, C, max_iter=400_000):
    n = len(y)
    L = float(np.linalg.eigvalsh(Q).max())
    a = np.zeros(n)
    z = a.copy()
    t = 1.0
    best = None
    for it in range(max_iter):
        g = 1.0 - Q @ z
        a_next = project(z + g / L, y, C)
        # Gradient-mapping restart keeps FISTA monotone enough on tiny problems.
        if (a_next - a) @ (z - a_next) > 0:
            t = 1.0
            z = a.copy()
            continue
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = a_next + ((t - 1) / t_next) * (a_next - a)
        a, t = a_next, t_next
        if it % 200 == 0:
            for bound_tol in (1e-6, 1e-8, 1e-10):
                p = polish(a, Q, y, C, bound_tol)
                if p is not None and kkt_residual(p, Q, y, C) <= KKT_TOL:
                    return p, it
            if kkt_residual(a, Q, y, C) <= KKT_TOL:
                best = a
                return best, it
    raise RuntimeError("dual QP did not reach KKT tolerance")


def bias(a, Q, y, C):
    """b = -rho with rho averaged over free vectors, or the midpoint of the
    feasible interval when every alpha is at a bound."""
    G = Q @ a - 1.0
    yg = y * G
    free = (a > 0) & (a < C)
    if free.any():
        return -float(yg[free].mean())
    ub, lb = np.inf, -np.inf
    for i in range(len(a)):
        upper = a[i] >= C
        if upper:
            if y[i] < 0:
                ub = min(ub, yg[i])
            else:
                lb = max(lb, yg[i])
        else:
            if y[i] > 0:
                ub = min(ub, yg[i])
            else:
                lb = max(lb, yg[i])
    return -0.5 * (ub + lb)


def make_case(rng, idx):
    while True:
        n = int(rng.integers(2, 13))
        d = int(rng.integers(1, 5))
        X = rng.normal(size=(n, d))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            continue
        # Overlapping classes in half the cases so box constraints bind.
        if rng.random() < 0.5:
            X[labels == 1, 0] += rng.uniform(0.5, 3.0)
        C = float(rng.choice([0.1, 0.5, 1.0, 10.0, 100.0]))
        gamma = float(rng.uniform(0.05, 2.0))
        y = np.where(labels == 1, 1.0, -1.0)
        Q = np.outer(y, y) * rbf_matrix(X, X, gamma)
        a, iters = solve_dual(Q, y, C)
        b = bias(a, Q, y, C)
        probes = np.vstack([X, rng.normal(size=(8, d)) * 1.5])
        f = rbf_matrix(probes, X, gamma) @ (a * y) + b
        # Probes whose sign is numerically ambiguous cannot check labels.
        if np.abs(f).min() < 1e-3:
            continue
        return {
            "case": idx,
            "n": n,
            "d": d,
            "C": C,
            "gamma": gamma,
            "X": X.tolist(),
            "y": labels.tolist(),
            "alpha": a.tolist(),
            "bias": b,
            "probes": probes.tolist(),
            "decision": f.tolist(),
            "kkt_residual": kkt_residual(a, Q, y, C),
            "iterations": iters,
        }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--cases", type=int, default=200)
    ap.add_argument("--seed", type=int, default=20240611)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    cases = [make_case(rng, i) for i in range(args.cases)]
    doc = {
        "generator": "tools/oracles/qp_oracle.py",
        "seed": args.seed,
        "kkt_tolerance": KKT_TOL,
        "cases": cases,
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    worst = max(c["kkt_residual"] for c in cases)
    print(f"wrote {len(cases)} cases, worst KKT residual {worst:.2e}", file=sys.stderr)


if __name__ == "__main__":
    main()
