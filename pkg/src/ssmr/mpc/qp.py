"""Dense convex QP solver.

Solves ``min 1/2 x'Px + q'x  s.t.  Ax = b, Gx <= h`` with a Mehrotra
predictor-corrector interior-point method, then polishes the result by
solving the equality-constrained KKT system on the identified active set.
Infeasibility is confirmed with a bounded phase-1 LP before it is reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"


class InfeasibleError(RuntimeError):
    """The constraint set of a QP is empty."""


@dataclass
class QPProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    constant: float = 0.0
    # free-form layout information for whoever assembled the problem
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        nv = self.q.shape[0]
        if self.P.shape != (nv, nv):
            raise ValueError(f"P has shape {self.P.shape}, expected {(nv, nv)}")
        self.A = np.zeros((0, nv)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, nv)
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).ravel()
        self.G = np.zeros((0, nv)) if self.G is None else np.asarray(self.G, dtype=float).reshape(-1, nv)
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=float).ravel()
        if self.A.shape[0] != self.b.shape[0] or self.G.shape[0] != self.h.shape[0]:
            raise ValueError("constraint matrices and right-hand sides disagree")

    @property
    def nv(self) -> int:
        return self.q.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x + self.constant)


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    iterations: int
    kkt: dict
    objective: float


def kkt_residuals(prob: QPProblem, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> dict:
    """Max-norm stationarity, primal/dual feasibility and complementarity residuals."""
    stat = prob.P @ x + prob.q + prob.A.T @ y + prob.G.T @ z
    eq = prob.A @ x - prob.b
    slack = prob.G @ x - prob.h
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal": float(max(np.max(np.abs(eq), initial=0.0), np.max(slack, initial=0.0))),
        "dual": float(max(0.0, -np.min(z, initial=0.0))),
        "complementarity": float(np.max(np.abs(z * slack), initial=0.0)),
    }


def _kkt_solve(H, A, r1, r2, reg=1e-11):
    """Solve ``[[H, A'], [A, 0]] [dx; dy] = [r1; r2]`` with regularization and refinement."""
    nv, ne = H.shape[0], A.shape[0]
    K = np.zeros((nv + ne, nv + ne))
    K[:nv, :nv] = H
    K[:nv, nv:] = A.T
    K[nv:, :nv] = A
    Kreg = K.copy()
    Kreg[:nv, :nv] += reg * np.eye(nv)
    Kreg[nv:, nv:] -= reg * np.eye(ne)
    rhs = np.concatenate([r1, r2])
    try:
        lu = linalg.lu_factor(Kreg, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        return sol[:nv], sol[nv:]
    sol = linalg.lu_solve(lu, rhs, check_finite=False)
    for _ in range(3):
        res = rhs - K @ sol
        if np.max(np.abs(res)) <= 1e-14 * (1 + np.max(np.abs(rhs))):
            break
        sol = sol + linalg.lu_solve(lu, res, check_finite=False)
    return sol[:nv], sol[nv:]


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _ipm(prob: QPProblem, tol: float, max_iter: int, loose: float = 1e-8, patience: int = 10):
    """Mehrotra predictor-corrector.

    Near the solution the scaling ``z / s`` can grow so large that the KKT
    solves lose accuracy and the residuals climb back up. The best iterate is
    therefore tracked; when the tight tolerance is not met, it is accepted if
    it satisfies ``loose`` (polishing then recovers the accuracy).
    """
    P, q, A, b, G, h = prob.P, prob.q, prob.A, prob.b, prob.G, prob.h
    nv, ni = prob.nv, G.shape[0]
    # symmetric start: primal residual and its negative, shifted into the positive orthant
    x, y = _kkt_solve(P + G.T @ G + np.eye(nv) * 1e-8, A, -q + G.T @ h, b)
    s = h - G @ x
    z = -s.copy()
    if ni:
        for v in (s, z):
            shift = -np.min(v)
            if shift >= 0:
                v += 1.0 + shift
    scale_q = 1 + np.max(np.abs(q), initial=0.0)
    scale_b = 1 + np.max(np.abs(b), initial=0.0)
    scale_h = 1 + np.max(np.abs(h), initial=0.0)
    it = 0
    converged = False
    best, best_merit, best_it = None, np.inf, 0
    for it in range(1, max_iter + 1):
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))) or np.max(np.abs(z), initial=0) > 1e14 or np.max(np.abs(x)) > 1e14:
            break
        rd = P @ x + q + A.T @ y + G.T @ z
        rp = A @ x - b
        ri = G @ x + s - h
        mu = float(s @ z / ni) if ni else 0.0
        merit = max(
            np.max(np.abs(rd), initial=0) / scale_q,
            np.max(np.abs(rp), initial=0) / scale_b,
            np.max(np.abs(ri), initial=0) / scale_h,
            mu,
        )
        if merit <= tol:
            converged = True
            break
        if merit < best_merit:
            best, best_merit, best_it = (x, y, z, s), merit, it
        elif it - best_it >= patience and best_merit <= loose:
            # stalled with an acceptable fallback in hand
            break
        Wd = z / s if ni else np.zeros(0)
        H = P + (G.T * Wd) @ G
        if ni == 0:
            dx, dy = _kkt_solve(H, A, -rd, -rp)
            x, y = x + dx, y + dy
            continue

        def direction(rc):
            r1 = -rd - G.T @ ((z * ri - rc) / s)
            dx, dy = _kkt_solve(H, A, r1, -rp)
            dz = (z * ri - rc) / s + Wd * (G @ dx)
            ds = -ri - G @ dx
            return dx, dy, dz, ds

        # predictor
        rc = s * z
        dx, dy, dz, ds = direction(rc)
        a = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a * ds) @ (z + a * dz) / ni)
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        rc = s * z + ds * dz - sigma * mu
        dx, dy, dz, ds = direction(rc)
        a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x, y, z, s = x + a * dx, y + a * dy, z + a * dz, s + a * ds
    if not converged and best is not None and best_merit <= loose:
        (x, y, z, s), converged = best, True
    return x, y, z, s, it, converged


def _polish(prob: QPProblem, x, z, s):
    """Re-solve on the active set guessed from the interior-point solution."""
    G, h = prob.G, prob.h
    if G.shape[0] == 0:
        return None
    active = np.flatnonzero(z > s)
    Aa = np.vstack([prob.A, G[active]])
    ba = np.concatenate([prob.b, h[active]])
    try:
        xp, lam = _kkt_solve(prob.P, Aa, -prob.q, ba, reg=1e-13)
    except (np.linalg.LinAlgError, ValueError):
        return None
    ne = prob.A.shape[0]
    zp = np.zeros(G.shape[0])
    zp[active] = lam[ne:]
    yp = lam[:ne]
    return xp, yp, zp


def _phase1_infeasible(prob: QPProblem, tol: float) -> bool:
    """Bounded LP ``min t s.t. Ax = b, Gx - t <= h, t >= -1, |x| <= big``; infeasible iff ``t* > tol``."""
    nv, ni = prob.nv, prob.G.shape[0]
    if ni == 0:
        res = np.linalg.lstsq(prob.A, prob.b, rcond=None)[0] if prob.A.shape[0] else None
        return res is not None and np.max(np.abs(prob.A @ res - prob.b)) > 1e-8 * (1 + np.max(np.abs(prob.b)))
    big = 1e6 * (1 + np.max(np.abs(prob.h)) + np.max(np.abs(prob.b), initial=0))
    G1 = np.block([
        [prob.G, -np.ones((ni, 1))],
        [np.zeros((1, nv)), -np.ones((1, 1))],
        [np.eye(nv), np.zeros((nv, 1))],
        [-np.eye(nv), np.zeros((nv, 1))],
    ])
    h1 = np.concatenate([prob.h, [1.0], np.full(2 * nv, big)])
    A1 = np.hstack([prob.A, np.zeros((prob.A.shape[0], 1))])
    q1 = np.zeros(nv + 1)
    q1[-1] = 1.0
    lp = QPProblem(np.zeros((nv + 1, nv + 1)), q1, A1, prob.b, G1, h1)
    x, _, _, _, _, ok = _ipm(lp, 1e-10, 200)
    if np.max(np.abs(A1 @ x - prob.b), initial=0) > 1e-6 * (1 + np.max(np.abs(prob.b), initial=0)):
        return True
    return bool(x[-1] > max(tol, 1e-7) * (1 + np.max(np.abs(prob.h))))


def solve_qp(prob: QPProblem, tol: float = 1e-10, max_iter: int = 100, polish: bool = True) -> QPResult:
    """Solve a convex QP; the status is ``optimal``, ``max-iter`` or ``infeasible``.

    An infeasible problem is never returned as optimal: when the interior
    point method fails to converge, a phase-1 LP decides between the two.
    """
    x, y, z, s, it, converged = _ipm(prob, tol, max_iter)
    if not converged:
        status = INFEASIBLE if _phase1_infeasible(prob, 1e-7) else MAX_ITER
        return QPResult(x, y, z, status, it, kkt_residuals(prob, x, y, z), prob.objective(x))
    z = np.maximum(z, 0.0)
    best = (x, y, z)
    best_kkt = kkt_residuals(prob, x, y, z)
    if polish:
        cand = _polish(prob, x, z, s)
        if cand is not None and np.all(np.isfinite(cand[0])):
            k = kkt_residuals(prob, *cand)
            if max(k.values()) < max(best_kkt.values()):
                best, best_kkt = cand, k
    x, y, z = best
    return QPResult(x, y, z, OPTIMAL, it, best_kkt, prob.objective(x))
