"""ALS fitting for Tensor Chains and the sensitivity-controlled driver."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import scipy.linalg

from .model import (
    TCModel,
    balanced_normalize,
    core_from_matrix,
    core_matrix,
    data_unfolding,
    reconstruct,
    sensitivity,
    transfer_matrix,
)
from .stabilize import CorrectionConfig, intensity_correct, ssc_correct
from .tensor import as_mask, unfold_matrix

log = logging.getLogger(__name__)

SUCCESS_TOL = 1e-6
INIT_SCHEMES = ("gaussian", "scaled", "balanced")


@dataclass
class FitConfig:
    max_iters: int = 5000
    rel_err_tol: float = 1e-8
    stall_tol: float = 1e-8
    stall_window: int = 100
    ss_max: float = 1e7
    seed: int = 0
    init_scheme: str = "gaussian"
    masked: bool = False
    # list of iterations, "trigger" (ss >= ss_max or stall), or None for plain ALS
    correction_schedule: list[int] | str | None = "trigger"
    correction_cooldown: int = 10
    max_corrections: int = 20
    log_every: int = 1

    def __post_init__(self):
        if self.rel_err_tol <= 0 or self.stall_tol <= 0 or self.ss_max <= 0:
            raise ValueError("tolerances and ss_max must be positive")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}")
        if isinstance(self.correction_schedule, str) and self.correction_schedule != "trigger":
            raise ValueError("correction_schedule must be a list of iterations or 'trigger'")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorrectionEvent:
    iteration: int
    kind: str
    ss_before: float
    ss_after: float
    error_before: float
    error_after: float


@dataclass
class DecompositionReport:
    relative_error: list[float] = field(default_factory=list)
    sensitivity: list[float] = field(default_factory=list)
    intensity: list[float] = field(default_factory=list)
    correction_events: list[CorrectionEvent] = field(default_factory=list)
    termination: str = "max_iters"
    wall_time: float = 0.0
    ridge_used: int = 0

    @property
    def iterations(self) -> int:
        return len(self.relative_error)

    @property
    def final_error(self) -> float:
        return self.relative_error[-1] if self.relative_error else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iterations"] = self.iterations
        return d


# --- initialization -----------------------------------------------------------

def init_model(dims: Sequence[int], bonds: Sequence[int], seed: int = 0, scheme: str = "gaussian",
               y: np.ndarray | None = None) -> TCModel:
    """Random model: ``gaussian`` N(0,1) cores, ``scaled`` to match ``||y||``, or ``balanced``."""
    if len(dims) != len(bonds) or len(dims) < 3:
        raise ValueError("need matching dims and bonds of length >= 3")
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    N = len(dims)
    cores = [rng.standard_normal((bonds[n], dims[n], bonds[(n + 1) % N])) for n in range(N)]
    m = TCModel(cores)
    if scheme == "scaled":
        if y is None:
            raise ValueError("the scaled scheme needs the data tensor")
        ratio = np.linalg.norm(y) / np.linalg.norm(reconstruct(m))
        m = m.scaled([ratio ** (1.0 / N)] * N)
    elif scheme == "balanced":
        m = balanced_normalize(m)
    return m


# --- ALS ----------------------------------------------------------------------

def _design(cores, n):
    """Z for core n from a plain list of cores (see ``model.subchain_unfolding``)."""
    N = len(cores)
    sub = cores[(n + 1) % N]
    for k in range(2, N):
        sub = np.tensordot(sub, cores[(n + k) % N], axes=(sub.ndim - 1, 0))
    last = sub.ndim - 1
    return unfold_matrix(sub, list(range(1, last)), [last, 0])


def _solve_normal(G, rhs):
    """``X = rhs G^{-1}``; falls back to a trace-scaled ridge when G is singular."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            c = scipy.linalg.cho_factor(G, check_finite=False)
            return scipy.linalg.cho_solve(c, rhs.T, check_finite=False).T, False
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
        ridge = 1e-10 * np.trace(G) / G.shape[0] + np.finfo(float).tiny
        Gr = G + ridge * np.eye(G.shape[0])
        return scipy.linalg.solve(Gr, rhs.T, assume_a="sym", check_finite=False).T, True


def _masked_solve(Z, Yw, W):
    """Row-wise weighted least squares ``x_i = (y_i w_i) Z (Z' diag(w_i) Z)^{-1}``."""
    G = np.einsum("ck,ic,cl->ikl", Z, W, Z, optimize=True)
    rhs = Yw @ Z
    try:
        L = np.linalg.cholesky(G)
        X = np.linalg.solve(G, rhs[..., None])[..., 0]
        if not np.all(np.isfinite(X)) or np.any(np.diagonal(L, axis1=1, axis2=2) <= 0):
            raise np.linalg.LinAlgError
        return X, False
    except np.linalg.LinAlgError:
        tr = np.trace(G, axis1=1, axis2=2) / G.shape[1]
        ridge = 1e-10 * np.where(tr > 0, tr, 1.0)
        G = G + ridge[:, None, None] * np.eye(G.shape[1])
        return np.linalg.solve(G, rhs[..., None])[..., 0], True


class _ALSState:
    """Mutable working copy of a fit (cores as a plain list)."""

    def __init__(self, y, m0, mask=None):
        self.y = np.asarray(y, dtype=np.float64)
        if self.y.shape != m0.mode_dims:
            raise ValueError(f"tensor dims {self.y.shape} do not match model dims {m0.mode_dims}")
        self.N = self.y.ndim
        self.cores = [np.array(c) for c in m0.cores]
        self.mask = None if mask is None else as_mask(mask, self.y.shape)
        self.unf = [data_unfolding(self.y, n) for n in range(self.N)]
        if self.mask is None:
            self.norm_y = float(np.linalg.norm(self.y))
        else:
            if not self.mask.any():
                raise ValueError("mask has no observed entries")
            self.munf = [data_unfolding(self.mask, n) for n in range(self.N)]
            self.wunf = [u * w for u, w in zip(self.unf, self.munf)]
            self.norm_y = float(np.linalg.norm(self.y * self.mask))
            self._check_mask_support()
        if self.norm_y == 0.0:
            raise ValueError("cannot fit a zero tensor")

    def _check_mask_support(self):
        for n in range(self.N):
            need = self.cores[n].shape[0] * self.cores[n].shape[2]
            counts = self.munf[n].sum(axis=1)
            if np.any(counts < need):
                log.warning("mode %d has slices with fewer than %d observed entries", n, need)

    def update(self, n) -> tuple[float, bool]:
        """Least-squares update of core n; returns the squared residual after it."""
        Z = _design(self.cores, n)
        rn, _, rn1 = self.cores[n].shape
        if self.mask is None:
            X, ridged = _solve_normal(Z.T @ Z, self.unf[n] @ Z)
            R = self.unf[n] - X @ Z.T
        else:
            X, ridged = _masked_solve(Z, self.wunf[n], self.munf[n])
            R = (self.unf[n] - X @ Z.T) * self.munf[n]
        self.cores[n] = core_from_matrix(X, rn, rn1)
        return float(np.sum(R * R)), ridged

    def sweep(self) -> tuple[float, int]:
        ridged = 0
        for n in range(self.N):
            res, r = self.update(n)
            ridged += r
        return np.sqrt(res) / self.norm_y, ridged

    def model(self) -> TCModel:
        return TCModel(self.cores)

    def rel_error(self) -> float:
        r = self.y - reconstruct(self.model())
        if self.mask is not None:
            r = r * self.mask
        return float(np.linalg.norm(r)) / self.norm_y

    def measures(self) -> tuple[float, float]:
        """(sensitivity, intensity) via transfer matrices on the working cores."""
        N = self.N
        B = [transfer_matrix(c) for c in self.cores]
        ss = 0.0
        for n in range(N):
            v = np.eye(self.cores[(n + 1) % N].shape[0]).ravel()
            for k in range(1, N):
                v = v @ B[(n + k) % N]
            ss += self.y.shape[n] * float(v @ np.eye(self.cores[n].shape[0]).ravel())
        inten = float(np.prod([np.linalg.norm(c) for c in self.cores]))
        return ss, inten


def als_step(y, m: TCModel, n: int) -> TCModel:
    """Replace core ``n`` by its least-squares optimum with the others fixed."""
    st = _ALSState(y, m)
    st.update(n)
    return st.model()


def _stalled(errors, start, window, tol):
    if len(errors) - start <= window:
        return False
    old = errors[-window - 1]
    return old - errors[-1] < tol * old


def _run(y, m0, cfg: FitConfig, mask=None, ccfg: CorrectionConfig | None = None,
         control: bool = False) -> tuple[TCModel, DecompositionReport]:
    t0 = time.perf_counter()
    st = _ALSState(y, m0, mask)
    rep = DecompositionReport()
    schedule = cfg.correction_schedule if control else None
    scheduled = set(schedule) if isinstance(schedule, (list, tuple)) else set()
    trigger_mode = schedule == "trigger"
    ccfg = ccfg or CorrectionConfig(apply_intensity_first=True)
    window_start = 0
    last_corr = -10**9
    for it in range(1, cfg.max_iters + 1):
        err, ridged = st.sweep()
        rep.ridge_used += ridged
        if cfg.log_every == 1 or it % cfg.log_every == 0 or it == cfg.max_iters:
            ss, inten = st.measures()
        rep.relative_error.append(err)
        rep.sensitivity.append(ss)
        rep.intensity.append(inten)
        if err <= cfg.rel_err_tol:
            rep.termination = "converged"
            break
        stalled = _stalled(rep.relative_error, window_start, cfg.stall_window, cfg.stall_tol)
        if not control:
            if stalled:
                rep.termination = "stalled"
                break
            continue
        fire = it in scheduled
        if trigger_mode and it - last_corr >= cfg.correction_cooldown:
            fire = fire or ss >= cfg.ss_max or stalled
        if fire and len(rep.correction_events) < cfg.max_corrections:
            _correct(st, rep, it, ccfg, ss, err)
            last_corr = it
            window_start = len(rep.relative_error)
        elif stalled and len(rep.correction_events) >= cfg.max_corrections:
            rep.termination = "stalled"
            break
    rep.wall_time = time.perf_counter() - t0
    return st.model(), rep


def _correct(st: _ALSState, rep: DecompositionReport, it: int, ccfg: CorrectionConfig, ss, err):
    m = st.model()
    kind = "ssc"
    if ccfg.apply_intensity_first:
        m, _ = intensity_correct(st.y, m, None, ccfg, st.mask)
        kind = "intensity+ssc"
    m, crep = ssc_correct(st.y, m, None, _no_intensity(ccfg), st.mask)
    st.cores = [np.array(c) for c in m.cores]
    ss_after, _ = st.measures()
    err_after = crep.error[-1] / st.norm_y
    rep.correction_events.append(CorrectionEvent(it, kind, ss, ss_after, err, err_after))
    log.debug("correction at iter %d: ss %.3g -> %.3g, err %.3g -> %.3g", it, ss, ss_after, err, err_after)


def _no_intensity(ccfg: CorrectionConfig) -> CorrectionConfig:
    if not ccfg.apply_intensity_first:
        return ccfg
    d = ccfg.to_dict()
    d["apply_intensity_first"] = False
    return CorrectionConfig(**d)


def als_fit(y, m0: TCModel, cfg: FitConfig | None = None) -> tuple[TCModel, DecompositionReport]:
    return _run(y, m0, cfg or FitConfig())


def masked_als_fit(y, mask, m0: TCModel, cfg: FitConfig | None = None) -> tuple[TCModel, DecompositionReport]:
    """ALS on the observed entries only; errors are relative to ``||W .* y||``."""
    return _run(y, m0, cfg or FitConfig(), mask=mask)


def fit_with_ss_control(y, m0: TCModel, cfg: FitConfig | None = None, ccfg: CorrectionConfig | None = None,
                        mask=None) -> tuple[TCModel, DecompositionReport]:
    """ALS interleaved with sensitivity correction.

    A correction (with ``delta`` = current error) fires at the scheduled
    iterations, or in ``"trigger"`` mode whenever the sensitivity reaches
    ``ss_max`` or the error stalls, at most once per ``correction_cooldown``
    iterations.
    """
    if ccfg is None:
        ccfg = CorrectionConfig(apply_intensity_first=True)
    return _run(y, m0, cfg or FitConfig(), mask=mask, ccfg=ccfg, control=True)


def is_success(rel_err: float, tol: float = SUCCESS_TOL, squared: bool = False) -> bool:
    return (rel_err * rel_err if squared else rel_err) <= tol
