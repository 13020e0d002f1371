"""Tensor Chain model, reconstruction and stability measures.

A Tensor Chain (tensor ring) of order N is a cyclic list of cores
``A_n`` of shape ``(R_n, I_n, R_{n+1})`` with ``R_{N+1} = R_1``;
entry ``y[i_1, ..., i_N] = tr(A_1[:, i_1, :] @ ... @ A_N[:, i_N, :])``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes, train_contract, unfold_matrix

TCM_MAGIC = b"TCM1"


class DegenerateModelError(ValueError):
    """A model quantity is undefined because some core or subchain vanishes."""


class UnsupportedOrderError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TCModel:
    cores: tuple[np.ndarray, ...]

    def __init__(self, cores: Sequence[np.ndarray]):
        cores = tuple(np.array(c, dtype=np.float64) for c in cores)
        if len(cores) < 3:
            raise ValueError(f"a tensor chain needs at least 3 cores, got {len(cores)}")
        for n, c in enumerate(cores):
            if c.ndim != 3:
                raise ValueError(f"core {n} must be order-3, got shape {c.shape}")
            nxt = cores[(n + 1) % len(cores)]
            if c.shape[2] != nxt.shape[0]:
                raise ValueError(
                    f"bond mismatch between core {n} {c.shape} and core {(n + 1) % len(cores)} {nxt.shape}"
                )
        for c in cores:
            c.setflags(write=False)
        object.__setattr__(self, "cores", cores)

    @property
    def order(self) -> int:
        return len(self.cores)

    @property
    def bond_dims(self) -> tuple[int, ...]:
        return tuple(c.shape[0] for c in self.cores)

    @property
    def mode_dims(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def n_params(self) -> int:
        return int(sum(c.size for c in self.cores))

    def replace(self, n: int, core: np.ndarray) -> "TCModel":
        cores = list(self.cores)
        cores[n] = core
        return TCModel(cores)

    def shifted(self, k: int = 1) -> "TCModel":
        """The same tensor with modes cyclically shifted so core ``k`` comes first."""
        k %= self.order
        return TCModel(self.cores[k:] + self.cores[:k])

    def scaled(self, factors: Sequence[float]) -> "TCModel":
        return TCModel([a * c for a, c in zip(factors, self.cores)])


@dataclass(frozen=True, eq=False)
class BTDSharedModel:
    """Sum of Tucker-2 terms sharing one middle core.

    ``y = sum_t shared_core x_1 A_t x_3 C_t`` with ``A_t`` of shape
    ``(I_1, R_2)`` and ``C_t`` of shape ``(I_3, R_3)``.
    """

    A: tuple[np.ndarray, ...]
    shared_core: np.ndarray
    C: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.A) != len(self.C) or not self.A:
            raise ValueError("need the same positive number of A_t and C_t factors")
        if len({a.shape for a in self.A}) != 1 or len({c.shape for c in self.C}) != 1:
            raise ValueError("all A_t (and all C_t) must share one shape")
        r2, _, r3 = self.shared_core.shape
        if self.A[0].shape[1] != r2 or self.C[0].shape[1] != r3:
            raise ValueError("factor widths must match the shared core's bond sizes")

    def reconstruct(self) -> np.ndarray:
        y = 0.0
        for a, c in zip(self.A, self.C):
            y = y + np.einsum("ir,rjs,ks->ijk", a, self.shared_core, c)
        return y


@dataclass(frozen=True)
class StabilityMeasures:
    intensity: float
    sensitivity: float
    per_mode_terms: tuple[float, ...] = field(default=())


# --- contraction helpers ------------------------------------------------------

def chain(cores: Sequence[np.ndarray]) -> np.ndarray:
    """Train contraction ``cores[0] • cores[1] • ...``."""
    out = cores[0]
    for c in cores[1:]:
        out = train_contract(out, c)
    return out


def subchain(m: TCModel, n: int) -> np.ndarray:
    """Dense ``A_{-n} = A_{n+1} • ... • A_N • A_1 • ... • A_{n-1}``.

    Shape ``(R_{n+1}, I_{n+1}, ..., I_{n-1}, R_n)``.
    """
    N = m.order
    return chain([m.cores[(n + k) % N] for k in range(1, N)])


def subchain_unfolding(m: TCModel, n: int) -> np.ndarray:
    """The design matrix Z for core ``n``.

    Rows run over the remaining physical modes in cyclic order (first fastest),
    columns over ``(r_n, r_{n+1})`` with ``r_n`` fastest, so that
    ``unfold(shift(Y, n), 0) == A_(2) @ Z.T``.
    """
    sub = subchain(m, n)
    last = sub.ndim - 1
    return unfold_matrix(sub, list(range(1, last)), [last, 0])


def core_matrix(core: np.ndarray) -> np.ndarray:
    """Mode-2 unfolding ``I_n x (R_n R_{n+1})`` with ``r_n`` fastest."""
    return unfold_matrix(core, [1], [0, 2])


def core_from_matrix(mat: np.ndarray, r_left: int, r_right: int) -> np.ndarray:
    return np.reshape(mat, (mat.shape[0], r_left, r_right), order="F").transpose(1, 0, 2).copy()


def data_unfolding(y: np.ndarray, n: int) -> np.ndarray:
    """Mode-n unfolding of ``y`` with the other modes in cyclic order ``n+1, ..., n-1``."""
    N = y.ndim
    return unfold_matrix(y, [n], [(n + k) % N for k in range(1, N)])


def first_gram(cores: Sequence[np.ndarray], size: int | None = None) -> np.ndarray:
    """Self-contraction of a train over all modes but its first bond.

    For an empty train returns the identity of ``size``.
    """
    if not cores:
        return np.eye(size)
    g = np.eye(cores[-1].shape[2])
    for c in reversed(cores):
        g = np.einsum("aib,bc,dic->ad", c, g, c, optimize=True)
    return g


def last_gram(cores: Sequence[np.ndarray], size: int | None = None) -> np.ndarray:
    """Self-contraction of a train over all modes but its last bond."""
    if not cores:
        return np.eye(size)
    g = np.eye(cores[0].shape[0])
    for c in cores:
        g = np.einsum("aib,ac,cid->bd", c, g, c, optimize=True)
    return g


def transfer_matrix(core: np.ndarray) -> np.ndarray:
    """``B = sum_i A[:, i, :] ⊗ A[:, i, :]`` of size ``R_n^2 x R_{n+1}^2``."""
    r0, _, r1 = core.shape
    return np.einsum("aib,cid->acbd", core, core).reshape(r0 * r0, r1 * r1)


# --- operations ---------------------------------------------------------------

def reconstruct(m: TCModel) -> np.ndarray:
    full = chain(m.cores)
    return np.trace(full, axis1=0, axis2=full.ndim - 1)


def reconstruct_from_matrix(m: TCModel) -> np.ndarray:
    """Same as :func:`reconstruct` via ``A_(2) Z^T``; cheaper for large chains."""
    y0 = core_matrix(m.cores[0]) @ subchain_unfolding(m, 0).T
    return np.reshape(y0, m.mode_dims, order="F")


def btd_to_tc(b: BTDSharedModel) -> TCModel:
    A = np.stack(b.A, axis=0)           # (R1, I1, R2): A[t] = A_t
    C = np.stack(b.C, axis=2)           # (I3, R3, R1)
    C = C.transpose(1, 0, 2)            # (R3, I3, R1): C[:, :, t] = C_t^T layout
    return TCModel([A, b.shared_core, C])


def tc_to_btd(m: TCModel) -> BTDSharedModel:
    if m.order != 3:
        raise UnsupportedOrderError(f"BTD conversion needs an order-3 chain, got order {m.order}")
    A, B, C = m.cores
    As = tuple(A[t].copy() for t in range(A.shape[0]))
    Cs = tuple(C[:, :, t].T.copy() for t in range(A.shape[0]))
    return BTDSharedModel(As, B.copy(), Cs)


def core_norms(m: TCModel) -> np.ndarray:
    return np.array([np.linalg.norm(c) for c in m.cores])


def intensity(m: TCModel) -> float:
    """Product of the core Frobenius norms."""
    norms = core_norms(m)
    if np.any(norms == 0.0):
        raise DegenerateModelError("intensity undefined: model has a zero core")
    return float(np.prod(norms))


def subchain_sq_norms(m: TCModel, method: str = "auto") -> np.ndarray:
    """``||A_{-n}||_F^2`` for every n.

    ``method="gram"`` chains the transfer matrices of each core and closes the
    open bonds with vectorized identities; ``"dense"`` contracts the subchain
    explicitly. ``"auto"`` is dense for N == 3 and gram otherwise.
    """
    N = m.order
    if method == "auto":
        method = "dense" if N == 3 else "gram"
    if method == "dense":
        return np.array([np.sum(subchain(m, n) ** 2) for n in range(N)])
    if method != "gram":
        raise ValueError(f"unknown method {method!r}")
    B = [transfer_matrix(c) for c in m.cores]
    out = np.empty(N)
    for n in range(N):
        start = m.cores[(n + 1) % N].shape[0]
        v = np.eye(start).ravel()
        for k in range(1, N):
            v = v @ B[(n + k) % N]
        out[n] = v @ np.eye(m.cores[n].shape[0]).ravel()
    return out


def sensitivity(m: TCModel, method: str = "auto") -> StabilityMeasures:
    terms = np.asarray(m.mode_dims, dtype=np.float64) * subchain_sq_norms(m, method)
    norms = core_norms(m)
    return StabilityMeasures(
        intensity=float(np.prod(norms)),
        sensitivity=float(np.sum(terms)),
        per_mode_terms=tuple(float(t) for t in terms),
    )


def intensity_bound(m: TCModel) -> float:
    """Upper bound ``sum_n I_n prod_{k != n} ||A_k||^2`` on the sensitivity."""
    sq = core_norms(m) ** 2
    total = 0.0
    for n, i_n in enumerate(m.mode_dims):
        total += i_n * np.prod(np.delete(sq, n))
    return float(total)


def balance_scalings(m: TCModel) -> np.ndarray:
    """Scalings ``alpha_n = beta_n / beta`` that minimize sensitivity."""
    terms = np.asarray(sensitivity(m).per_mode_terms)
    if np.any(terms <= 0.0):
        raise DegenerateModelError("balanced normalization undefined: a subchain has zero norm")
    beta_n = np.sqrt(terms)
    log_beta = np.mean(np.log(beta_n))
    return np.exp(np.log(beta_n) - log_beta)


def balanced_normalize(m: TCModel) -> TCModel:
    return m.scaled(balance_scalings(m))


def degeneracy_sequence(m: TCModel, x: float) -> TCModel:
    """An equivalent order-3 model whose intensity diverges as ``x -> 1``.

    ``A • B`` is split by a thin SVD into ``U • S • V`` and the middle bond is
    mixed by ``Q = I + x (e_1 e_2^T + e_2 e_1^T)``.
    """
    if m.order != 3:
        raise UnsupportedOrderError("degeneracy construction is defined for order-3 chains")
    if not 0.0 <= x < 1.0:
        raise ValueError(f"x must lie in [0, 1), got {x}")
    A, B, C = m.cores
    r1, i1, r2 = A.shape
    _, i2, r3 = B.shape
    if r2 < 2:
        raise UnsupportedOrderError("degeneracy construction needs R_2 >= 2")
    ab = unfold_matrix(train_contract(A, B), [0, 1], [2, 3])
    u, s, vt = np.linalg.svd(ab, full_matrices=False)
    u, s, vt = u[:, :r2], s[:r2], vt[:r2]
    U = np.reshape(u, (r1, i1, r2), order="F")
    SV = np.reshape(s[:, None] * vt, (r2, i2, r3), order="F")
    Q = np.eye(r2)
    Q[0, 1] = Q[1, 0] = x
    A_new = train_contract(U, Q)
    B_new = train_contract(np.linalg.inv(Q), SV)
    return TCModel([A_new, B_new, C])


def degeneracy_intensity(s1: float, s2: float, x: float, c_norm: float) -> float:
    """Closed-form intensity of :func:`degeneracy_sequence` for ``R_2 = 2``."""
    return (1 + x * x) * np.sqrt(2 * (s1 * s1 + s2 * s2)) / abs(1 - x * x) * c_norm


# --- TCM1 format --------------------------------------------------------------

def model_to_bytes(m: TCModel) -> bytes:
    out = [TCM_MAGIC, struct.pack("<I", m.order)]
    for r, i in zip(m.bond_dims, m.mode_dims):
        out.append(struct.pack("<QQ", r, i))
    out.extend(tensor_to_bytes(c) for c in m.cores)
    return b"".join(out)


def model_from_bytes(buf: bytes) -> TCModel:
    if buf[:4] != TCM_MAGIC:
        raise ValueError("bad TCM1 magic")
    (N,) = struct.unpack_from("<I", buf, 4)
    off = 8
    header = []
    for _ in range(N):
        header.append(struct.unpack_from("<QQ", buf, off))
        off += 16
    cores = []
    for _ in range(N):
        c, off = tensor_from_bytes(buf, off)
        cores.append(c)
    if off != len(buf):
        raise ValueError("trailing bytes after TCM1 payload")
    m = TCModel(cores)
    if [tuple(h) for h in header] != list(zip(m.bond_dims, m.mode_dims)):
        raise ValueError("TCM1 header does not match the stored cores")
    return m


def write_tcm(path, m: TCModel) -> None:
    Path(path).write_bytes(model_to_bytes(m))


def read_tcm(path) -> TCModel:
    return model_from_bytes(Path(path).read_bytes())
