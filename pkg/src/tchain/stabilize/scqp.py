"""Quadratic minimization over a residual ball.

Solves ``min tr(X Q X')  s.t.  ||W .* (Yu - X Z')||_F^2 <= delta^2`` for a
symmetric positive (semi)definite ``Q``. Stationary points satisfy
``X Q + lam (X Z'Z - Yu Z) = 0`` (row-wise with masked Gram matrices when a
mask is given). Simultaneous diagonalization of ``(Z'Z, Q)`` turns the
residual into an explicit, decreasing function of ``lam`` that is solved by a
safeguarded Newton iteration in ``log(lam)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg


class InfeasibleBoundError(ValueError):
    def __init__(self, ls_residual: float, delta: float):
        super().__init__(
            f"no X satisfies the bound: least-squares residual {math.sqrt(ls_residual):.6g} > delta {delta:.6g}"
        )
        self.ls_residual = ls_residual
        self.delta = delta


@dataclass
class ScqpProblem:
    Q: np.ndarray
    Yu: np.ndarray
    Z: np.ndarray
    delta: float
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.Yu = np.atleast_2d(np.asarray(self.Yu, dtype=np.float64))
        self.Z = np.asarray(self.Z, dtype=np.float64)
        K = self.Q.shape[0]
        if self.Q.shape != (K, K) or self.Z.shape[1] != K or self.Yu.shape[1] != self.Z.shape[0]:
            raise ValueError(f"shape mismatch: Q {self.Q.shape}, Yu {self.Yu.shape}, Z {self.Z.shape}")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.mask.shape != self.Yu.shape:
                raise ValueError("mask must match Yu")

    def residual(self, X: np.ndarray) -> float:
        R = self.Yu - X @ self.Z.T
        if self.mask is not None:
            R = R * self.mask
        return float(np.sum(R * R))

    def objective(self, X: np.ndarray) -> float:
        return float(np.sum((X @ self.Q) * X))


@dataclass
class ScqpResult:
    X: np.ndarray
    lam: float
    residual: float
    objective: float
    iterations: int


class _Group:
    """Rows sharing one Gram matrix ``Z' diag(w) Z``, diagonalized against Q."""

    def __init__(self, rows, G, P_rhs, Qfac, yy):
        # V' Q V = I, V' G V = diag(e)
        e, V = scipy.linalg.eigh(G, Qfac, check_finite=False)
        e = np.clip(e, 0.0, None)
        self.rows = rows
        self.V = V
        self.e = e
        self.P = P_rhs @ V                       # (rows, K)
        self.c = self.P * self.P                 # per-row, per-direction weights
        tol = 1e-13 * max(e.max(initial=0.0), np.finfo(float).tiny)
        self.active = e > tol
        self.yy = yy
        self.G, self.P_rhs = G, P_rhs

    def x_at(self, lam):
        if np.isinf(lam):
            if self.active.all():
                # full-rank Gram: a direct solve is more accurate than the Q-metric basis
                try:
                    return scipy.linalg.solve(self.G, self.P_rhs.T, assume_a="pos", check_finite=False).T
                except np.linalg.LinAlgError:
                    pass
            w = np.where(self.active, 1.0 / np.where(self.active, self.e, 1.0), 0.0)
        else:
            w = lam / (1.0 + lam * self.e)
        return (self.P * w) @ self.V.T

    def excess(self, lam):
        """``residual(lam) - residual(inf)`` and its lam-derivative."""
        if lam == 0.0:
            d = 1.0
        else:
            d = 1.0 + lam * self.e
        ea = np.where(self.active, self.e, 1.0)
        term = np.where(self.active, self.c / ea / (d * d), 0.0)
        dterm = np.where(self.active, -2.0 * self.c / (d * d * d), 0.0)
        return float(term.sum()), float(dterm.sum())


def scqp_solve(p: ScqpProblem, lambda_tol: float = 1e-10, max_iter: int = 200) -> ScqpResult:
    Q = 0.5 * (p.Q + p.Q.T)
    K = Q.shape[0]
    # strictly positive definite metric for the simultaneous diagonalization
    qscale = max(np.trace(Q) / K, np.finfo(float).tiny)
    qmin = np.linalg.eigvalsh(Q)[0]
    if qmin < -1e-10 * np.linalg.norm(Q):
        raise ValueError("Q must be positive semidefinite")
    if qmin <= 1e-13 * qscale:
        Q = Q + (1e-13 * qscale - min(qmin, 0.0)) * np.eye(K)

    delta2 = float(p.delta) ** 2
    Yu, Z = p.Yu, p.Z
    if p.mask is None:
        Yw = Yu
        yy = float(np.sum(Yu * Yu))
        groups = [_Group(np.arange(Yu.shape[0]), Z.T @ Z, Yu @ Z, Q, yy)]
    else:
        Yw = Yu * p.mask
        yy = float(np.sum(Yw * Yw))
        groups = []
        for i in range(Yu.shape[0]):
            w = p.mask[i]
            G = (Z.T * w) @ Z
            groups.append(_Group(np.array([i]), G, (Yw[i] @ Z)[None, :], Q, None))

    def assemble(lam):
        X = np.zeros((Yu.shape[0], K))
        for g in groups:
            X[g.rows] = g.x_at(lam)
        return X

    if yy <= delta2:
        X = np.zeros((Yu.shape[0], K))
        return ScqpResult(X, 0.0, yy, 0.0, 0)

    X_inf = assemble(np.inf)
    rho_ls = p.residual(X_inf)
    # residuals within round-off of ||Yu||^2 count as feasible
    if rho_ls > delta2 * (1.0 + 1e-8) + 1e-13 * yy:
        raise InfeasibleBoundError(rho_ls, p.delta)
    gap = delta2 - rho_ls
    if gap <= lambda_tol * delta2:
        return ScqpResult(X_inf, np.inf, rho_ls, p.objective(X_inf), 0)

    def h(lam):
        tot = dtot = 0.0
        for g in groups:
            t, dt = g.excess(lam)
            tot += t
            dtot += dt
        return tot - gap, dtot

    # bracket in t = log(lam): h decreases from yy - delta2 > 0 to -gap < 0
    emax = max(g.e.max(initial=0.0) for g in groups)
    t = -math.log(max(emax, np.finfo(float).tiny))
    hv, dh = h(math.exp(t))
    t_lo, t_hi = -np.inf, np.inf
    step = 2.0
    while True:
        if hv > 0:
            t_lo = t
            if np.isfinite(t_hi):
                break
            t += step
        else:
            t_hi = t
            if np.isfinite(t_lo):
                break
            t -= step
        step *= 2.0
        if abs(t) > 1400:
            break
        hv, dh = h(math.exp(t))
    if not np.isfinite(t_hi):
        return ScqpResult(X_inf, np.inf, rho_ls, p.objective(X_inf), 0)
    if not np.isfinite(t_lo):
        t_lo = t_hi - 1400.0

    it = 0
    t = t_hi
    hv, dh = h(math.exp(t))
    while it < max_iter:
        it += 1
        if abs(hv) <= lambda_tol * delta2 and hv <= 0:
            break
        lam = math.exp(t)
        slope = lam * dh                          # dh/dt
        t_new = t - hv / slope if slope < 0 else np.nan
        if not (t_lo < t_new < t_hi):
            t_new = 0.5 * (t_lo + t_hi)
        t = t_new
        hv, dh = h(math.exp(t))
        if hv > 0:
            t_lo = t
        else:
            t_hi = t
        if t_hi - t_lo < 1e-15 * max(1.0, abs(t_hi)):
            break
    # return the feasible end of the bracket
    if hv > 0:
        t = t_hi
    lam = math.exp(t)
    X = assemble(lam)
    return ScqpResult(X, lam, p.residual(X), p.objective(X), it)


def kkt_residual(p: ScqpProblem, res: ScqpResult) -> float:
    """Norm of ``X Q + lam (X Z'Z - Yu Z)`` (row-wise masked Gram when masked)."""
    X, lam = res.X, res.lam
    if np.isinf(lam):
        raise ValueError("KKT residual undefined at the least-squares limit")
    if p.mask is None:
        grad = X @ (p.Z.T @ p.Z) - p.Yu @ p.Z
    else:
        Rm = (X @ p.Z.T - p.Yu) * p.mask
        grad = Rm @ p.Z
    return float(np.linalg.norm(X @ p.Q + lam * grad))
