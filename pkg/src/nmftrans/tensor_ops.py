"""Third-order tensor algebra.

Unfoldings follow the row-major convention: the mode-n unfolding puts index
``i_n`` on the rows and enumerates the remaining indices in their original order,
the last one varying fastest.  ``vec`` uses the matching row-major stacking, under
which ``vec(A X B) = kron(A, B.T) vec(X)`` and, for diagonal ``X``,
``vec(A X B) = khatri_rao(A, B.T) diag(X)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CpFactors:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        ranks = {self.A.shape[1], self.B.shape[1], self.C.shape[1]}
        if len(ranks) != 1:
            raise ValueError(f"factor column counts differ: {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return self.A.shape[1]


def _check_mode(mode):
    if mode not in (0, 1, 2):
        raise ValueError(f"invalid mode {mode!r}; expected 0, 1 or 2")


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    _check_mode(mode)
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError("expected a third-order tensor")
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1))


def fold(m: np.ndarray, mode: int, dims) -> np.ndarray:
    _check_mode(mode)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError("dims must have three entries")
    rest = [d for i, d in enumerate(dims) if i != mode]
    m = np.asarray(m)
    if m.shape != (dims[mode], rest[0] * rest[1]):
        raise ValueError(f"shape mismatch: {m.shape} cannot fold to {dims} along mode {mode}")
    return np.moveaxis(m.reshape(dims[mode], *rest), 0, mode)


def kronecker(A, B) -> np.ndarray:
    return np.kron(np.asarray(A), np.asarray(B))


def khatri_rao(A, B) -> np.ndarray:
    """Columnwise Kronecker product, ``(I*J) x R``."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"khatri_rao needs equal column counts, got {A.shape} and {B.shape}")
    return (A[:, None, :] * B[None, :, :]).reshape(-1, A.shape[1])


def cp_compose(f: CpFactors) -> np.ndarray:
    return np.einsum("ir,jr,kr->ijk", f.A, f.B, f.C)


def vec(m, order: str = "C") -> np.ndarray:
    """Stack a matrix into a column vector.

    ``order="C"`` stacks rows (the convention the product identities above need);
    ``order="F"`` stacks columns top to bottom.
    """
    m = np.asarray(m)
    if m.ndim == 1:
        return m.reshape(-1, 1)
    return m.reshape(-1, 1, order=order)
