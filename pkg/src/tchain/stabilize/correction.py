"""Alternating sensitivity and intensity correction under an error bound."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import (
    DegenerateModelError,
    TCModel,
    balanced_normalize,
    core_from_matrix,
    core_matrix,
    data_unfolding,
    first_gram,
    intensity,
    last_gram,
    sensitivity,
    subchain_unfolding,
)
from ..tensor import as_mask
from .config import CorrectionConfig
from .rotation import rotation_sweep
from .scqp import InfeasibleBoundError, ScqpProblem, scqp_solve

FEASIBILITY_SLACK = 1e-9


@dataclass
class CorrectionReport:
    delta: float
    sensitivity: list[float] = field(default_factory=list)
    error: list[float] = field(default_factory=list)
    intensity: list[float] = field(default_factory=list)
    rejected_updates: int = 0
    sweeps: int = 0


def sensitivity_weight(m: TCModel, n: int) -> np.ndarray:
    """Matrix Q with ``ss = I_n ||A_{-n}||^2 + tr(A_(2) Q A_(2)')``.

    ``Q = sum_{k != n} I_k (G_right ⊗ G_left)`` where ``G_left`` (size R_n) is the
    last-bond Gram of the cores between k and n and ``G_right`` (size R_{n+1})
    the first-bond Gram of the cores between n and k.
    """
    N = m.order
    rn, _, rn1 = m.cores[n].shape
    Q = np.zeros((rn * rn1, rn * rn1))
    for j in range(1, N):
        k = (n + j) % N
        right = [m.cores[(n + t) % N] for t in range(1, j)]
        left = [m.cores[(n + t) % N] for t in range(j + 1, N)]
        g_right = first_gram(right, rn1)
        g_left = last_gram(left, rn)
        Q += m.mode_dims[k] * np.kron(g_right, g_left)
    return 0.5 * (Q + Q.T)


def _error_sq(y, m, mask):
    from ..model import reconstruct
    r = y - reconstruct(m)
    if mask is not None:
        r = r * mask
    return float(np.sum(r * r))


def _core_update(y_unf, mask_unf, m: TCModel, n: int, Q, delta, cfg, objective):
    """One constrained core update; returns the new model or ``m`` if rejected."""
    Z = subchain_unfolding(m, n)
    prob = ScqpProblem(Q, y_unf, Z, delta, mask_unf)
    x_old = core_matrix(m.cores[n])
    try:
        res = scqp_solve(prob, lambda_tol=cfg.scqp_lambda_tol)
    except InfeasibleBoundError:
        return m, False
    rn, _, rn1 = m.cores[n].shape
    bound = delta * delta * (1.0 + FEASIBILITY_SLACK)
    old_obj = objective(x_old)
    if prob.residual(res.X) > bound or objective(res.X) > old_obj * (1.0 + 1e-12):
        return m, False
    return m.replace(n, core_from_matrix(res.X, rn, rn1)), True


def _prepare(y, m0, delta, mask):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != m0.mode_dims:
        raise ValueError(f"tensor dims {y.shape} do not match model dims {m0.mode_dims}")
    if mask is not None:
        mask = as_mask(mask, y.shape)
    err = np.sqrt(_error_sq(y, m0, mask))
    yw = y if mask is None else y * mask
    # round-off floor so that exact fits do not make the bound unsatisfiable
    floor = 64 * np.finfo(float).eps * np.linalg.norm(yw)
    if delta is None or delta == "auto":
        delta = err
    delta = max(float(delta), floor)
    if err > delta * (1.0 + FEASIBILITY_SLACK):
        raise ValueError(f"initial model violates the bound: error {err:.6g} > delta {delta:.6g}")
    unf = [data_unfolding(y, n) for n in range(y.ndim)]
    munf = None if mask is None else [data_unfolding(mask, n) for n in range(y.ndim)]
    return y, mask, delta, unf, munf


def _log(report, y, m, mask):
    st = sensitivity(m)
    report.sensitivity.append(st.sensitivity)
    report.intensity.append(st.intensity)
    report.error.append(float(np.sqrt(_error_sq(y, m, mask))))


def ssc_correct(y, m0: TCModel, delta=None, cfg: CorrectionConfig | None = None,
                mask=None) -> tuple[TCModel, CorrectionReport]:
    """Minimize sensitivity subject to ``||W .* (y - reconstruct(m))||_F <= delta``.

    Each sweep balances the core norms, rotates every bond, then updates each
    core in turn by the constrained quadratic program. ``delta`` defaults to
    the current error of ``m0``.
    """
    cfg = cfg or CorrectionConfig()
    y, mask, delta, unf, munf = _prepare(y, m0, delta, mask)
    m = m0
    report = CorrectionReport(delta=delta)
    if cfg.apply_intensity_first:
        m, _ = intensity_correct(y, m, delta, cfg, mask)
    _log(report, y, m, mask)
    for _ in range(cfg.max_sweeps):
        ss_start = report.sensitivity[-1]
        m = _reparametrize(y, m, mask, delta, cfg)
        for n in range(m.order):
            Q = sensitivity_weight(m, n)
            m, ok = _core_update(unf[n], None if munf is None else munf[n], m, n, Q, delta, cfg,
                                 lambda x, Q=Q: float(np.sum((x @ Q) * x)))
            report.rejected_updates += not ok
        _log(report, y, m, mask)
        report.sweeps += 1
        if ss_start - report.sensitivity[-1] <= cfg.sweep_ss_rel_tol * ss_start:
            break
    return m, report


def _reparametrize(y, m, mask, delta, cfg, measure=None):
    """Balanced scaling and rotations; kept only if feasible and ``measure`` does not grow."""
    measure = measure or (lambda mm: sensitivity(mm).sensitivity)
    cand = m
    try:
        if cfg.apply_balanced_norm_first:
            cand = balanced_normalize(cand)
        for _ in range(cfg.rotation_sweeps):
            cand = rotation_sweep(cand, cfg)
    except DegenerateModelError:
        return m
    if not np.all(np.isfinite(np.concatenate([c.ravel() for c in cand.cores]))):
        return m
    if _error_sq(y, cand, mask) > delta * delta * (1.0 + FEASIBILITY_SLACK):
        return m
    if measure(cand) > measure(m):
        return m
    return cand


def intensity_correct(y, m0: TCModel, delta=None, cfg: CorrectionConfig | None = None,
                      mask=None) -> tuple[TCModel, CorrectionReport]:
    """Shrink core norms one at a time subject to the same error bound (Q = identity)."""
    cfg = cfg or CorrectionConfig()
    y, mask, delta, unf, munf = _prepare(y, m0, delta, mask)
    m = m0
    report = CorrectionReport(delta=delta)
    _log(report, y, m, mask)
    for _ in range(cfg.max_sweeps):
        start = report.intensity[-1]
        m = _reparametrize(y, m, mask, delta, cfg, intensity)
        for n in range(m.order):
            K = m.cores[n].shape[0] * m.cores[n].shape[2]
            m, ok = _core_update(unf[n], None if munf is None else munf[n], m, n, np.eye(K), delta, cfg,
                                 lambda x: float(np.sum(x * x)))
            report.rejected_updates += not ok
        _log(report, y, m, mask)
        report.sweeps += 1
        if start - report.intensity[-1] <= cfg.sweep_ss_rel_tol * start:
            break
    return m, report
