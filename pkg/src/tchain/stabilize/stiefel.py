"""Curvilinear descent on the orthogonal group for the rotation subproblem.

Minimizes ``f(U) = sum_r sqrt((u_r' T1 u_r)(u_r' T2 u_r))`` over square
orthonormal ``U`` with the Cayley-transform retraction, Barzilai-Borwein step
sizes and a monotone Armijo backtracking line search.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL = 1e-14
EPS_SMOOTH = 1e-12


@dataclass
class StiefelResult:
    U: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool


def _quad_forms(U, T1, T2):
    T1U = T1 @ U
    T2U = T2 @ U
    a = np.einsum("ir,ir->r", U, T1U)
    b = np.einsum("ir,ir->r", U, T2U)
    return a, b, T1U, T2U


def _terms(a, b):
    prod = np.clip(a, 0.0, None) * np.clip(b, 0.0, None)
    guarded = (a < SMALL) | (b < SMALL)
    return np.where(guarded, np.sqrt(prod + EPS_SMOOTH**2), np.sqrt(prod)), guarded


def objective(U: np.ndarray, T1: np.ndarray, T2: np.ndarray) -> float:
    a, b, _, _ = _quad_forms(U, T1, T2)
    return float(np.sum(_terms(a, b)[0]))


def euclidean_gradient(U: np.ndarray, T1: np.ndarray, T2: np.ndarray) -> np.ndarray:
    """Column r: ``sqrt(b_r/a_r) T1 u_r + sqrt(a_r/b_r) T2 u_r`` (smoothed near zero)."""
    a, b, T1U, T2U = _quad_forms(U, T1, T2)
    f, guarded = _terms(a, b)
    a = np.clip(a, 0.0, None)
    b = np.clip(b, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        wa = np.where(guarded, b / f, np.sqrt(b / np.where(a > 0, a, 1.0)))
        wb = np.where(guarded, a / f, np.sqrt(a / np.where(b > 0, b, 1.0)))
    return T1U * wa + T2U * wb


def _cayley(U, W, tau):
    n = U.shape[0]
    eye = np.eye(n)
    return np.linalg.solve(eye + 0.5 * tau * W, (eye - 0.5 * tau * W) @ U)


def check_orthonormal(U: np.ndarray, tol: float = 1e-9) -> None:
    U = np.asarray(U)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError(f"U must be square, got shape {U.shape}")
    if np.linalg.norm(U.T @ U - np.eye(U.shape[1])) > tol:
        raise ValueError("U0 is not orthonormal")


def eigen_init(T1: np.ndarray, T2: np.ndarray) -> np.ndarray:
    """Eigenvectors of ``T1 + T2``, eigenvalues descending."""
    w, V = np.linalg.eigh(T1 + T2)
    order = np.argsort(-w, kind="stable")
    return V[:, order]


def stiefel_minimize(T1, T2, U0=None, max_iters: int = 500, grad_tol: float = 1e-10,
                     armijo: float = 1e-4, backtrack: float = 0.2) -> StiefelResult:
    """Minimize the rotation objective from ``U0`` (default: :func:`eigen_init`).

    Stops when the Riemannian gradient norm falls below
    ``grad_tol * ||grad_euclid||`` or after ``max_iters`` iterations. Every
    accepted step decreases the objective.
    """
    T1 = np.asarray(T1, dtype=np.float64)
    T2 = np.asarray(T2, dtype=np.float64)
    U = eigen_init(T1, T2) if U0 is None else np.array(U0, dtype=np.float64)
    check_orthonormal(U)

    f = objective(U, T1, T2)
    G = euclidean_gradient(U, T1, T2)
    W = G @ U.T - U @ G.T
    rgrad = W @ U
    gnorm = np.linalg.norm(rgrad)
    scale = max(np.linalg.norm(G), np.finfo(float).tiny)
    tau = 1.0 / max(np.linalg.norm(W), np.finfo(float).tiny)
    it = 0
    converged = gnorm <= grad_tol * scale
    while not converged and it < max_iters:
        it += 1
        slope = 0.5 * np.sum(W * W)
        step = tau
        accepted = False
        for _ in range(60):
            U_new = _cayley(U, W, step)
            f_new = objective(U_new, T1, T2)
            if f_new <= f - armijo * step * slope:
                accepted = True
                break
            step *= backtrack
        if not accepted or f_new > f:
            break
        G_new = euclidean_gradient(U_new, T1, T2)
        W_new = G_new @ U_new.T - U_new @ G_new.T
        rgrad_new = W_new @ U_new
        S = U_new - U
        Yd = rgrad_new - rgrad
        sy = abs(np.sum(S * Yd))
        if sy > 0:
            tau = np.sum(S * S) / sy if it % 2 else sy / np.sum(Yd * Yd)
        else:
            tau = step * 2.0
        tau = float(np.clip(tau, 1e-20, 1e20))
        rel_drop = (f - f_new) / max(abs(f), np.finfo(float).tiny)
        U, f, W, rgrad = U_new, f_new, W_new, rgrad_new
        gnorm = np.linalg.norm(rgrad)
        scale = max(np.linalg.norm(G_new), np.finfo(float).tiny)
        converged = gnorm <= grad_tol * scale or rel_drop < 1e-15
    return StiefelResult(U, f, float(gnorm), it, bool(converged))
