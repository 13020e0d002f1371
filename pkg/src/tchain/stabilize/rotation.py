"""Bond rotations that minimize sensitivity without changing the tensor."""
from __future__ import annotations

import numpy as np

from ..model import DegenerateModelError, TCModel, sensitivity, transfer_matrix
from .config import CorrectionConfig
from .stiefel import stiefel_minimize


class DegenerateRotationError(DegenerateModelError):
    def __init__(self, r: int, msg: str):
        super().__init__(msg)
        self.r = r


def _boundary_grams(rest):
    """``X1`` (first bond) and ``X2`` (last bond) self-contractions of the train ``rest``.

    ``vec(X1) = B_3 ... B_N vec(I)`` and ``vec(X2) = B_N' ... B_3' vec(I)``.
    """
    B = [transfer_matrix(c) for c in rest]
    r_first = rest[0].shape[0]
    r_last = rest[-1].shape[2]
    v1 = np.eye(r_last).ravel()
    for b in reversed(B):
        v1 = b @ v1
    v2 = np.eye(r_first).ravel()
    for b in B:
        v2 = b.T @ v2
    return v1.reshape(r_first, r_first), v2.reshape(r_last, r_last)


def rotation_matrices(m: TCModel, n: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``T1``, ``T2`` for the bond between core ``n`` and core ``n+1``.

    ``T1 = sum_i A_{n+1}[:, i, :] X1 A_{n+1}[:, i, :]'`` and
    ``T2 = sum_i A_n[:, i, :]' X2 A_n[:, i, :]`` where X1, X2 are the boundary
    self-contractions of the remaining cores.
    """
    N = m.order
    a1 = m.cores[n % N]
    a2 = m.cores[(n + 1) % N]
    rest = [m.cores[(n + k) % N] for k in range(2, N)]
    X1, X2 = _boundary_grams(rest)
    T1 = np.einsum("aib,bc,dic->ad", a2, X1, a2, optimize=True)
    T2 = np.einsum("aib,ac,cid->bd", a1, X2, a1, optimize=True)
    return 0.5 * (T1 + T1.T), 0.5 * (T2 + T2.T)


def optimal_eigenvalues(U, T1, T2, i1: int, i2: int) -> np.ndarray:
    a = np.einsum("ir,ij,jr->r", U, T1, U)
    b = np.einsum("ir,ij,jr->r", U, T2, U)
    # zero up to round-off relative to the matrix scale
    tol1 = 1e-13 * max(np.trace(T1), np.finfo(float).tiny)
    tol2 = 1e-13 * max(np.trace(T2), np.finfo(float).tiny)
    for r in range(len(a)):
        if not (a[r] > tol1 and b[r] > tol2):
            raise DegenerateRotationError(r, f"optimal rotation undefined: u_{r}' T{1 if a[r] <= tol1 else 2} u_{r} = 0")
    return np.sqrt(i1 * a / (i2 * b))


def rotate_pair(m: TCModel, n: int = 0, cfg: CorrectionConfig | None = None) -> TCModel:
    """Rotate the bond between cores ``n`` and ``n+1`` to minimize sensitivity."""
    cfg = cfg or CorrectionConfig()
    N = m.order
    T1, T2 = rotation_matrices(m, n)
    res = stiefel_minimize(T1, T2, max_iters=cfg.stiefel_max_iters, grad_tol=cfg.stiefel_grad_tol)
    U = res.U
    s = optimal_eigenvalues(U, T1, T2, m.mode_dims[n % N], m.mode_dims[(n + 1) % N])
    root = np.sqrt(s)
    Q = (U * root) @ U.T
    Qinv = (U / root) @ U.T
    a1 = np.tensordot(m.cores[n % N], Q, axes=(2, 0))
    a2 = np.tensordot(Qinv, m.cores[(n + 1) % N], axes=(1, 0))
    cores = list(m.cores)
    cores[n % N] = a1
    cores[(n + 1) % N] = a2
    return TCModel(cores)


def rotation_sweep(m: TCModel, cfg: CorrectionConfig | None = None) -> TCModel:
    for n in range(m.order):
        m = rotate_pair(m, n, cfg)
    return m


def rotation_correct(m: TCModel, cfg: CorrectionConfig | None = None) -> tuple[TCModel, list[float]]:
    """Sweep :func:`rotate_pair` over all bonds until the sensitivity settles.

    Returns the model and the sensitivity after each sweep (index 0 is the input).
    """
    cfg = cfg or CorrectionConfig()
    history = [sensitivity(m).sensitivity]
    for _ in range(cfg.max_sweeps):
        m_new = rotation_sweep(m, cfg)
        ss = sensitivity(m_new).sensitivity
        if ss > history[-1]:
            break
        m = m_new
        history.append(ss)
        if history[-2] - ss <= cfg.sweep_ss_rel_tol * history[-2]:
            break
    return m, history
