"""Tensor Chain convolution block: kernel reshaping, factor layout and forward pass.

The order-4 kernel ``C_out x C_in x D x D`` is viewed as an order-3 tensor over
``(C_out, C_in, D*D)``. A chain model over those modes with bond dimensions
``(R3, R1, R2)`` has cores

    A_out : R3 x C_out x R1
    A_in  : R1 x C_in  x R2
    A_sp  : R2 x D*D   x R3

and maps onto three layers: a 1x1 conv ``W1`` (C_in -> R1*R2), a spatial conv
``W2`` (R2 -> R3, shared by the R1 replicas) and a 1x1 conv ``W3`` (R1*R3 -> C_out).
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .decompose import FitConfig, fit_with_ss_control, init_model
from .model import TCModel, reconstruct
from .stabilize import CorrectionConfig
from .tensor import relative_error

log = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 2, 3, 4, 6, 8, 12, 16)


@dataclass(eq=False)
class ConvKernel:
    weights: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError(f"kernel must be C_out x C_in x D x D, got {self.weights.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.shape[2]


@dataclass(eq=False)
class TcBlockFactors:
    W1: np.ndarray      # C_in x (R1*R2), column r1*R2 + r2
    W2: np.ndarray      # R2 x R3 x D x D
    W3: np.ndarray      # (R1*R3) x C_out, row r1*R3 + r3
    ranks: tuple[int, int, int]

    def __post_init__(self):
        r1, r2, r3 = self.ranks
        d = self.W2.shape[-1]
        if (self.W1.shape[1] != r1 * r2 or self.W2.shape != (r2, r3, d, d)
                or self.W3.shape[0] != r1 * r3):
            raise ValueError("factor shapes do not match ranks")

    @property
    def n_params(self) -> int:
        return self.W1.size + self.W2.size + self.W3.size


def kernel_to_order3(k: ConvKernel | np.ndarray) -> np.ndarray:
    """``(C_out, C_in, D, D) -> (C_out, C_in, D*D)`` with spatial index ``kh*D + kw``."""
    w = k.weights if isinstance(k, ConvKernel) else np.asarray(k, dtype=np.float64)
    return w.reshape(w.shape[0], w.shape[1], -1)


def order3_to_kernel(t: np.ndarray, stride: int = 1, padding: int = 0) -> ConvKernel:
    d = math.isqrt(t.shape[2])
    if d * d != t.shape[2]:
        raise ValueError(f"third mode {t.shape[2]} is not a square")
    return ConvKernel(t.reshape(t.shape[0], t.shape[1], d, d), stride, padding)


def build_tc_block(m: TCModel, kernel_shape: Sequence[int] | None = None) -> TcBlockFactors:
    """Rearrange an order-3 chain over ``(C_out, C_in, D*D)`` into block factors."""
    if m.order != 3:
        raise ValueError("the convolution block needs an order-3 model")
    a_out, a_in, a_sp = m.cores
    c_out, c_in, dd = m.mode_dims
    d = math.isqrt(dd)
    if d * d != dd:
        raise ValueError(f"spatial mode {dd} is not a square")
    if kernel_shape is not None and tuple(kernel_shape) != (c_out, c_in, d, d):
        raise ValueError(f"model modes {m.mode_dims} do not match kernel {tuple(kernel_shape)}")
    r3, r1, r2 = m.bond_dims
    W1 = a_in.transpose(1, 0, 2).reshape(c_in, r1 * r2)
    W2 = a_sp.reshape(r2, d, d, r3).transpose(0, 3, 1, 2)
    W3 = a_out.transpose(2, 0, 1).reshape(r1 * r3, c_out)
    return TcBlockFactors(np.ascontiguousarray(W1), np.ascontiguousarray(W2), np.ascontiguousarray(W3),
                          (r1, r2, r3))


def block_kernel(f: TcBlockFactors) -> np.ndarray:
    """Dense kernel realized by composing the three factors."""
    r1, r2, r3 = f.ranks
    w1 = f.W1.reshape(-1, r1, r2)
    w3 = f.W3.reshape(r1, r3, -1)
    return np.einsum("cab,bzhw,azo->ochw", w1, f.W2, w3, optimize=True)


def _output_size(n, d, stride, padding):
    span = n + 2 * padding - d
    if span < 0 or span % stride:
        raise ValueError(f"input {n} with kernel {d}, stride {stride}, padding {padding} "
                         "does not give an integral output size")
    return span // stride + 1


def _windows(x, d, stride, padding):
    """Strided ``d x d`` patches of the zero-padded last two axes."""
    ho = _output_size(x.shape[-2], d, stride, padding)
    wo = _output_size(x.shape[-1], d, stride, padding)
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding)] * 2
    xp = np.pad(x, pad)
    win = sliding_window_view(xp, (d, d), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :][..., :ho, :wo, :, :]


def conv2d_reference(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Cross-correlation of ``x`` (C_in x H x W) with zero padding."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != k.c_in:
        raise ValueError(f"input must be {k.c_in} x H x W, got {x.shape}")
    win = _windows(x, k.size, k.stride, k.padding)
    return np.einsum("chwij,ocij->ohw", win, k.weights, optimize=True)


def tc_block_forward(x: np.ndarray, f: TcBlockFactors, stride: int = 1, padding: int = 0) -> np.ndarray:
    """W1, T1, W2, T2, W3 applied to ``x`` (C_in x H x W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != f.W1.shape[0]:
        raise ValueError(f"input must be {f.W1.shape[0]} x H x W, got {x.shape}")
    r1, r2, r3 = f.ranks
    h, w = x.shape[1:]
    z = np.tensordot(f.W1, x, axes=(0, 0))                 # (R1*R2, H, W)
    z = z.reshape(r1, r2, h, w)                            # T1: grouped by r1
    win = _windows(z, f.W2.shape[-1], stride, padding)     # (R1, R2, H', W', D, D)
    u = np.einsum("abhwij,bcij->achw", win, f.W2, optimize=True)
    u = u.reshape(r1 * r3, *u.shape[2:])                   # T2
    return np.tensordot(f.W3, u, axes=(0, 0))


def flops(ranks: Sequence[int], c_in: int, c_out: int, d: int) -> int:
    """Multiply-accumulates per output position summed over the three layers."""
    r1, r2, r3 = ranks
    return c_in * r1 * r2 + r1 * r2 * r3 * d * d + r1 * r3 * c_out


def params(ranks: Sequence[int], c_in: int, c_out: int, d: int) -> int:
    r1, r2, r3 = ranks
    return c_in * r1 * r2 + r2 * r3 * d * d + r1 * r3 * c_out


def conv_flops(c_in: int, c_out: int, d: int) -> int:
    return c_in * c_out * d * d


@dataclass
class GridEntry:
    ranks: tuple[int, int, int]
    rel_err: float
    flops: int
    params: int

    def row(self) -> dict:
        r1, r2, r3 = self.ranks
        return {"R1": r1, "R2": r2, "R3": r3, "rel_err": self.rel_err, "flops": self.flops, "params": self.params}


def default_grid(k: ConvKernel, ranks: Iterable[int] = DEFAULT_RANKS) -> list[tuple[int, int, int]]:
    """All ``(R1, R2, R3)`` from ``ranks`` whose parameter count does not exceed the kernel's."""
    full = k.weights.size
    grid = []
    for r in itertools.product(ranks, repeat=3):
        if params(r, k.c_in, k.c_out, k.size) <= full:
            grid.append(tuple(r))
    return grid


def fit_kernel(k: ConvKernel, ranks: Sequence[int], cfg: FitConfig | None = None,
               ccfg: CorrectionConfig | None = None, seed: int = 0, n_starts: int = 1) -> tuple[TCModel, float]:
    """Best of ``n_starts`` SS-controlled fits, started from seeds ``seed, seed + 1, ...``."""
    if n_starts < 1:
        raise ValueError("n_starts must be positive")
    r1, r2, r3 = ranks
    y = kernel_to_order3(k)
    cfg = cfg or FitConfig(max_iters=500, seed=seed)
    best = None
    for s in range(seed, seed + n_starts):
        m0 = init_model(y.shape, (r3, r1, r2), seed=s, scheme="scaled", y=y)
        m, _ = fit_with_ss_control(y, m0, cfg, ccfg)
        err = relative_error(y, reconstruct(m))
        if best is None or err < best[1]:
            best = (m, err)
    return best


def rank_grid_search(k: ConvKernel, flops_budget: float = math.inf, err_threshold: float = math.inf,
                     grid: Iterable[Sequence[int]] | None = None, cfg: FitConfig | None = None,
                     ccfg: CorrectionConfig | None = None, seed: int = 0, n_starts: int = 1) -> list[GridEntry]:
    """Fit every grid point within the FLOPs budget; keep those under the error threshold.

    Returns entries sorted by relative error (ties broken by FLOPs). An empty
    result is logged, not raised.
    """
    if not flops_budget > 0:
        raise ValueError("flops_budget must be positive")
    grid = default_grid(k) if grid is None else [tuple(int(v) for v in g) for g in grid]
    out = []
    for ranks in grid:
        fl = flops(ranks, k.c_in, k.c_out, k.size)
        if fl > flops_budget:
            continue
        _, err = fit_kernel(k, ranks, cfg, ccfg, seed, n_starts)
        if err <= err_threshold:
            out.append(GridEntry(ranks, err, fl, params(ranks, k.c_in, k.c_out, k.size)))
    if not out:
        log.warning("no grid point satisfies flops <= %g and rel_err <= %g", flops_budget, err_threshold)
    out.sort(key=lambda e: (e.rel_err, e.flops))
    return out


def write_grid_csv(entries: Sequence[GridEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["R1", "R2", "R3", "rel_err", "flops", "params"])
        w.writeheader()
        for e in entries:
            w.writerow(e.row())
