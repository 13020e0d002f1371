"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Whenever a
tensor is flattened (unfoldings, the TCT1 file format) the first index varies
fastest, i.e. Fortran order. Modes are numbered from 0.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TCT_MAGIC = b"TCT1"


def as_tensor(data) -> np.ndarray:
    t = np.asarray(data, dtype=np.float64)
    if t.ndim == 0 or any(d < 1 for d in t.shape):
        raise ValueError(f"tensor must have at least one mode and positive dims, got shape {t.shape}")
    return t


@dataclass(frozen=True)
class Unfolding:
    """Matrix view of a tensor for a given row/column mode split.

    ``matrix[r, c]`` holds the entry whose multi-index is the mixed-radix
    decoding of ``r`` over ``row_modes`` and ``c`` over ``col_modes``,
    first listed mode fastest.
    """

    matrix: np.ndarray
    row_modes: tuple[int, ...]
    col_modes: tuple[int, ...]
    dims: tuple[int, ...]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    def fold(self) -> np.ndarray:
        return fold(self.matrix, self.row_modes, self.col_modes, self.dims)


def _check_modes(ndim: int, row_modes: Sequence[int], col_modes: Sequence[int]) -> list[int]:
    perm = list(row_modes) + list(col_modes)
    if sorted(perm) != list(range(ndim)):
        raise ValueError(
            f"row_modes {list(row_modes)} and col_modes {list(col_modes)} "
            f"must partition the modes 0..{ndim - 1}"
        )
    return perm


def unfold_matrix(t: np.ndarray, row_modes: Sequence[int], col_modes: Sequence[int]) -> np.ndarray:
    perm = _check_modes(t.ndim, row_modes, col_modes)
    rows = int(np.prod([t.shape[m] for m in row_modes], dtype=np.int64))
    cols = int(np.prod([t.shape[m] for m in col_modes], dtype=np.int64))
    return np.transpose(t, perm).reshape(rows, cols, order="F")


def unfold(t: np.ndarray, row_modes: Sequence[int], col_modes: Sequence[int]) -> Unfolding:
    t = np.asarray(t)
    mat = unfold_matrix(t, row_modes, col_modes)
    return Unfolding(mat, tuple(row_modes), tuple(col_modes), tuple(t.shape))


def fold(matrix: np.ndarray, row_modes: Sequence[int], col_modes: Sequence[int],
         dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold_matrix`."""
    perm = _check_modes(len(dims), row_modes, col_modes)
    permuted_shape = [dims[m] for m in perm]
    t = np.reshape(matrix, permuted_shape, order="F")
    return np.transpose(t, np.argsort(perm))


def mode_unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding: rows indexed by ``mode``, columns by the rest in increasing order."""
    rest = [m for m in range(t.ndim) if m != mode]
    return unfold_matrix(t, [mode], rest)


def train_contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Contract the last mode of ``a`` with the first mode of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"train contraction needs a.shape[-1] == b.shape[0], got {a.shape} and {b.shape}")
    return np.tensordot(a, b, axes=(a.ndim - 1, 0))


def cyclic_shift(t: np.ndarray, times: int = 1) -> np.ndarray:
    """Move mode 0 to the end ``times`` times: mode order (0,1,..,N-1) -> (1,..,N-1,0)."""
    t = np.asarray(t)
    if t.ndim < 2:
        return t
    k = times % t.ndim
    return np.transpose(t, list(range(k, t.ndim)) + list(range(k)))


def frobenius_norm(t) -> float:
    return float(np.linalg.norm(np.ravel(t)))


def relative_error(y, yhat, squared: bool = False) -> float:
    """``||y - yhat||_F / ||y||_F``, or its square when ``squared``."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    ny = frobenius_norm(y)
    if ny == 0.0:
        raise ValueError("relative error undefined for a zero reference tensor")
    r = frobenius_norm(y - yhat) / ny
    return r * r if squared else r


def as_mask(mask, dims: Sequence[int] | None = None) -> np.ndarray:
    """Validate a {0,1} indicator tensor and return it as float64."""
    m = np.asarray(mask)
    if m.dtype == bool:
        m = m.astype(np.float64)
    else:
        m = m.astype(np.float64)
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
    if dims is not None and tuple(m.shape) != tuple(dims):
        raise ValueError(f"mask dims {m.shape} do not match tensor dims {tuple(dims)}")
    return m


# --- TCT1 binary format -------------------------------------------------------

def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = as_tensor(t)
    head = TCT_MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + np.ravel(t, order="F").astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TCT1 block at ``offset``; returns the tensor and the offset past it."""
    if buf[offset:offset + 4] != TCT_MAGIC:
        raise ValueError("bad TCT1 magic")
    offset += 4
    if len(buf) < offset + 4:
        raise ValueError("truncated TCT1 header")
    (order,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if order < 1 or len(buf) < offset + 8 * order:
        raise ValueError("truncated or invalid TCT1 header")
    dims = struct.unpack_from(f"<{order}Q", buf, offset)
    offset += 8 * order
    if any(d < 1 for d in dims):
        raise ValueError(f"invalid TCT1 dims {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    end = offset + 8 * count
    if len(buf) < end:
        raise ValueError("truncated TCT1 payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return data.reshape(dims, order="F"), end


def write_tct(path, t: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tct(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after TCT1 payload")
    return t
