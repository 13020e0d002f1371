"""Seeded experiment harness: synthetic, collinear, masked and image fits."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decompose import SUCCESS_TOL, DecompositionReport, FitConfig, als_fit, fit_with_ss_control, \
    init_model, masked_als_fit
from .model import TCModel, reconstruct
from .stabilize import CorrectionConfig
from .tensor import relative_error

log = logging.getLogger(__name__)

FAMILIES = ("synthetic", "collinear", "masked")
SOLVERS = ("als", "ss_control")


class GenerationFailure(RuntimeError):
    pass


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# --- generators ---------------------------------------------------------------

def gen_synthetic(dims: Sequence[int], bonds: Sequence[int], seed=0) -> tuple[np.ndarray, TCModel]:
    """Tensor built from i.i.d. standard Gaussian cores; core n is ``bonds[n] x dims[n] x bonds[n+1]``."""
    rng = _rng(seed)
    N = len(dims)
    truth = TCModel([rng.standard_normal((bonds[n], dims[n], bonds[(n + 1) % N])) for n in range(N)])
    return reconstruct(truth), truth


def collinear_matrix(rows: int, cols: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """``rows x cols`` matrix whose pairwise column cosines lie in ``[lo, hi]``.

    Columns are ``g + t_r h_r`` for orthonormal ``g, h_1, ..., h_cols``; with
    ``c_r = 1/(1 + t_r^2)`` drawn from ``[lo, hi]`` every cosine equals
    ``sqrt(c_r c_s)`` and so stays in the range. Columns have unit norm.
    """
    if not 0.0 <= lo <= hi < 1.0:
        raise ValueError("coherence range must satisfy 0 <= lo <= hi < 1")
    if cols + 1 > rows:
        raise GenerationFailure(f"{cols} collinear columns need at least {cols + 1} rows, got {rows}")
    basis, _ = np.linalg.qr(rng.standard_normal((rows, cols + 1)))
    c = rng.uniform(max(lo, np.finfo(float).tiny), hi, size=cols)
    t = np.sqrt(1.0 / c - 1.0)
    return (basis[:, :1] + basis[:, 1:] * t) / np.sqrt(1.0 + t * t)


def column_cosines(mat: np.ndarray) -> np.ndarray:
    """Off-diagonal cosines between the columns of ``mat``."""
    u = mat / np.linalg.norm(mat, axis=0)
    g = u.T @ u
    return g[~np.eye(g.shape[0], dtype=bool)]


def gen_collinear(dims: Sequence[int], bonds: Sequence[int], coherence=(0.97, 0.99), seed=0,
                  max_retries: int = 10, normalize: bool = True) -> tuple[np.ndarray, TCModel]:
    """Tensor whose cores have highly collinear mode-2 unfolding columns.

    With ``normalize`` the cores are rescaled equally so that ``||y||_F = 1``.
    """
    lo, hi = coherence
    if not 0.0 < hi < 1.0 or not 0.0 <= lo <= hi:
        raise ValueError("coherence range must lie in (0, 1)")
    rng = _rng(seed)
    N = len(dims)
    for _ in range(max_retries):
        cores = []
        for n in range(N):
            rl, rr = bonds[n], bonds[(n + 1) % N]
            mat = collinear_matrix(dims[n], rl * rr, lo, hi, rng)
            cores.append(mat.reshape(dims[n], rl, rr, order="F").transpose(1, 0, 2))
        truth = TCModel(cores)
        slack = 1e-12
        if all(np.all((cs >= lo - slack) & (cs <= hi + slack))
               for cs in (column_cosines(c.transpose(1, 0, 2).reshape(c.shape[1], -1, order="F"))
                          for c in truth.cores)):
            y = reconstruct(truth)
            if normalize:
                scale = np.linalg.norm(y) ** (-1.0 / N)
                truth = truth.scaled([scale] * N)
                y = reconstruct(truth)
            return y, truth
    raise GenerationFailure(f"could not meet coherence range {coherence} after {max_retries} attempts")


def random_mask(dims: Sequence[int], missing_fraction: float, seed=0) -> np.ndarray:
    """Boolean mask with exactly ``floor(missing_fraction * size)`` entries unobserved."""
    if not 0.0 <= missing_fraction < 1.0:
        raise ValueError("missing_fraction must lie in [0, 1)")
    rng = _rng(seed)
    size = int(np.prod(dims))
    mask = np.ones(size, dtype=bool)
    mask[rng.permutation(size)[: int(missing_fraction * size)]] = False
    return mask.reshape(dims)


def gen_masked(dims, bonds, missing_fraction=0.5, seed=0) -> tuple[np.ndarray, TCModel, np.ndarray]:
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    s_data, s_mask = ss.spawn(2)
    y, truth = gen_synthetic(dims, bonds, s_data)
    return y, truth, random_mask(dims, missing_fraction, s_mask)


# --- experiments --------------------------------------------------------------

@dataclass
class ExperimentSpec:
    family: str = "synthetic"
    dims: tuple = (7, 7, 7)
    bonds: tuple = (3, 3, 3)
    n_instances: int = 1
    n_inits: int = 1
    solver: str = "als"
    coherence: tuple = (0.97, 0.99)
    missing_fraction: float = 0.5
    fit: FitConfig = field(default_factory=FitConfig)
    correction: CorrectionConfig = field(default_factory=lambda: CorrectionConfig(apply_intensity_first=True))
    seed: int = 0
    start_at_truth: bool = False
    trajectories: bool = False
    name: str = ""

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.bonds = tuple(int(b) for b in self.bonds)
        self.coherence = tuple(float(c) for c in self.coherence)
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.n_instances < 1 or self.n_inits < 1:
            raise ValueError("n_instances and n_inits must be positive")
        if len(self.dims) != len(self.bonds) or len(self.dims) < 3:
            raise ValueError("dims and bonds must have equal length >= 3")
        lo, hi = self.coherence
        if not (0.0 <= lo <= hi < 1.0 and hi > 0.0):
            raise ValueError("coherence range must lie in (0, 1)")
        if isinstance(self.fit, dict):
            self.fit = FitConfig.from_dict(self.fit)
        if isinstance(self.correction, dict):
            self.correction = CorrectionConfig.from_dict(self.correction)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"], d["bonds"], d["coherence"] = list(self.dims), list(self.bonds), list(self.coherence)
        return d


@dataclass
class RunRecord:
    instance: int
    init: int
    final_err: float = math.nan
    full_err: float = math.nan
    ss: float = math.nan
    intensity: float = math.nan
    iters: int = 0
    events: int = 0
    termination: str = ""
    wall_time: float = 0.0
    failure: str = ""

    @property
    def success(self) -> bool:
        return not self.failure and self.final_err <= SUCCESS_TOL


@dataclass
class SuccessSummary:
    success_rate: float
    error_quantiles: dict
    ss_quantiles: dict
    intensity_quantiles: dict
    records: list
    n_failed: int = 0

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.records)

    @property
    def final_errors(self) -> np.ndarray:
        return np.array([r.final_err for r in self.records])

    @property
    def final_ss(self) -> np.ndarray:
        return np.array([r.ss for r in self.records])

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "successes": self.successes,
            "runs": len(self.records),
            "n_failed": self.n_failed,
            "error_quantiles": self.error_quantiles,
            "ss_quantiles": self.ss_quantiles,
            "intensity_quantiles": self.intensity_quantiles,
        }


QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def _quantiles(values) -> dict:
    v = np.asarray([x for x in values if np.isfinite(x)])
    if v.size == 0:
        return {str(q): math.nan for q in QUANTILES}
    return {str(q): float(np.quantile(v, q)) for q in QUANTILES}


def summarize(records: Sequence[RunRecord]) -> SuccessSummary:
    n = len(records)
    return SuccessSummary(
        success_rate=sum(r.success for r in records) / n if n else 0.0,
        error_quantiles=_quantiles(r.final_err for r in records),
        ss_quantiles=_quantiles(r.ss for r in records),
        intensity_quantiles=_quantiles(r.intensity for r in records),
        records=list(records),
        n_failed=sum(bool(r.failure) for r in records),
    )


def run_seeds(seed: int, index: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """(data, init) seed streams for run ``index``; independent of worker scheduling."""
    return np.random.SeedSequence([seed, index, 0]), np.random.SeedSequence([seed, index, 1])


def instance_data(spec: ExperimentSpec, instance: int):
    """``(y, truth, mask)`` for one instance; shared by every init of that instance."""
    s = np.random.SeedSequence([spec.seed, instance, 0])
    if spec.family == "synthetic":
        y, truth = gen_synthetic(spec.dims, spec.bonds, s)
        return y, truth, None
    if spec.family == "collinear":
        y, truth = gen_collinear(spec.dims, spec.bonds, spec.coherence, s)
        return y, truth, None
    return gen_masked(spec.dims, spec.bonds, spec.missing_fraction, s)


def _check_events(rep: DecompositionReport) -> None:
    for e in rep.correction_events:
        if e.error_after > e.error_before * (1.0 + 1e-9) + 1e-15:
            raise AssertionError(f"correction at iteration {e.iteration} increased the error")


def run_single(spec: ExperimentSpec, instance: int, init: int) -> tuple[RunRecord, DecompositionReport | None]:
    rec = RunRecord(instance, init)
    t0 = time.perf_counter()
    try:
        y, truth, mask = instance_data(spec, instance)
        if spec.start_at_truth:
            m0 = truth
        else:
            seed = np.random.SeedSequence([spec.seed, instance, init, 1])
            m0 = init_model(spec.dims, spec.bonds, seed=seed, scheme=spec.fit.init_scheme, y=y)
        if spec.solver == "als":
            m, rep = (als_fit(y, m0, spec.fit) if mask is None else masked_als_fit(y, mask, m0, spec.fit))
        else:
            m, rep = fit_with_ss_control(y, m0, spec.fit, spec.correction, mask=mask)
        _check_events(rep)
        yhat = reconstruct(m)
        rec.final_err = (relative_error(y, yhat) if mask is None
                         else float(np.linalg.norm((y - yhat) * mask) / np.linalg.norm(y * mask)))
        rec.full_err = relative_error(y, yhat)
        rec.ss = rep.sensitivity[-1]
        rec.intensity = rep.intensity[-1]
        rec.iters = rep.iterations
        rec.events = len(rep.correction_events)
        rec.termination = rep.termination
    except Exception as exc:  # a failed run is recorded, never fatal to the suite
        rec.failure = f"{type(exc).__name__}: {exc}"
        log.debug("run (%d, %d) failed\n%s", instance, init, traceback.format_exc())
        rep = None
    rec.wall_time = time.perf_counter() - t0
    return rec, rep


def _job(args):
    spec, instance, init = args
    rec, rep = run_single(spec, instance, init)
    traj = None
    if rep is not None and spec.trajectories:
        traj = (rep.relative_error, rep.sensitivity, rep.intensity)
    return rec, traj


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("TC_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring invalid TC_THREADS=%r", cap)
    return max(1, min(n, n_jobs))


RECORD_FIELDS = ["instance", "init", "final_err", "full_err", "ss", "intensity", "iters", "events",
                 "termination", "success", "failure", "wall_time"]


def run_experiment(spec: ExperimentSpec, out_dir=None, workers: int | None = None) -> SuccessSummary:
    """Run ``n_instances x n_inits`` fits and aggregate; optionally write CSV/JSON into ``out_dir``."""
    jobs = [(spec, i, j) for i in range(spec.n_instances) for j in range(spec.n_inits)]
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    summary = summarize([r for r, _ in results])
    if out_dir is not None:
        write_experiment(spec, summary, [t for _, t in results], out_dir)
    return summary


def write_experiment(spec: ExperimentSpec, summary: SuccessSummary, trajectories, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = spec.name or f"{spec.family}_{spec.solver}"
    with open(out / f"{stem}_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        w.writeheader()
        for r in summary.records:
            row = asdict(r)
            row["success"] = int(r.success)
            w.writerow(row)
    with open(out / f"{stem}_summary.json", "w") as fh:
        json.dump({"spec": spec.to_dict(), "summary": summary.to_dict()}, fh, indent=2)
    if spec.trajectories:
        tdir = out / f"{stem}_trajectories"
        tdir.mkdir(exist_ok=True)
        for r, traj in zip(summary.records, trajectories):
            if traj is None:
                continue
            with open(tdir / f"run_{r.instance}_{r.init}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["iteration", "rel_err", "ss", "intensity"])
                for k, row in enumerate(zip(*traj), start=1):
                    w.writerow([k, *row])


def load_suite(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        cfg = path_or_dict
    else:
        with open(path_or_dict) as fh:
            cfg = json.load(fh)
    if not isinstance(cfg, dict) or not isinstance(cfg.get("experiments"), list):
        raise ValueError("suite config needs an 'experiments' list")
    return cfg


def run_suite(config, out_dir, workers: int | None = None) -> dict[str, SuccessSummary]:
    """Run every experiment of a suite config (``{"seed": s, "experiments": [...]}``)."""
    cfg = load_suite(config)
    base_seed = int(cfg.get("seed", 0))
    specs = []
    for k, e in enumerate(cfg["experiments"]):
        e = dict(e)
        e.setdefault("seed", base_seed + k)
        e.setdefault("name", f"exp{k}_{e.get('family', 'synthetic')}_{e.get('solver', 'als')}")
        specs.append(ExperimentSpec.from_dict(e))
    results = {}
    for spec in specs:
        log.info("running %s", spec.name)
        results[spec.name] = run_experiment(spec, out_dir, workers)
    with open(Path(out_dir) / "suite_summary.json", "w") as fh:
        json.dump({k: v.to_dict() for k, v in results.items()}, fh, indent=2)
    return results


# --- images -------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) as an ``H x W x 3`` float array scaled to ``[0, 1]``."""
    data = Path(path).read_bytes()
    pos = 0
    header = []
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if m is None:
            raise ValueError("truncated PPM header")
        header.append(m.group(1))
        pos = m.end()
    if header[0] != b"P6":
        raise ValueError("only binary PPM (P6) is supported")
    width, height, maxval = (int(h) for h in header[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"invalid PPM maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = width * height * 3
    raster = np.frombuffer(data, dtype=dtype, count=n, offset=pos) if len(data) - pos >= n * dtype.itemsize \
        else None
    if raster is None:
        raise ValueError("truncated PPM raster")
    return raster.reshape(height, width, 3).astype(np.float64) / maxval


def write_ppm(path, img: np.ndarray) -> None:
    """Write an ``H x W x 3`` array in ``[0, 1]`` as 8-bit P6."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.round(img * 255).astype(np.uint8).tobytes())


def image_params(r1: int, r2: int, h: int = 128, w: int = 128, c: int = 3) -> int:
    """Parameters of a chain with bonds ``(R1, R2, R1)`` over an ``h x w x c`` image."""
    return h * r1 * r2 + w * r2 * r1 + c * r1 * r1


def image_fit_experiment(img: np.ndarray, grid: Sequence[Sequence[int]], seed: int = 0,
                         cfg: FitConfig | None = None, ccfg: CorrectionConfig | None = None) -> list[dict]:
    """Fit ``img`` with bonds ``(R1, R2, R1)`` by ALS and by SS control from a shared start."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError("image must be H x W x C")
    h, w, c = img.shape
    cfg = cfg or FitConfig(max_iters=300, seed=seed)
    limit = img.size
    rows = []
    for r1, r2 in grid:
        p = image_params(r1, r2, h, w, c)
        if p > limit:
            log.info("skipping bonds (%d, %d): %d parameters exceed %d", r1, r2, p, limit)
            continue
        m0 = init_model(img.shape, (r1, r2, r1), seed=seed, scheme="scaled", y=img)
        m_als, _ = als_fit(img, m0, cfg)
        m_ssc, _ = fit_with_ss_control(img, m0, cfg, ccfg)
        rows.append({"R1": r1, "R2": r2, "rel_err_als": relative_error(img, reconstruct(m_als)),
                     "rel_err_ssc": relative_error(img, reconstruct(m_ssc)), "params": p})
    return rows


def write_rows_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
