"""Nonnegative matrix factorization by (accelerated) HALS.

All solvers minimize ``||X - W H||_F^2`` over ``W >= 0`` and ``H >= 0``, optionally
with one of three sparsity schemes:

* ``l0``  -- keep the ``n`` largest entries of every column (hard thresholding),
* ``l1``  -- add ``2 * alpha * ||.||_1`` to the objective, folded into the column update,
* ``l2``  -- keep the fewest largest entries carrying a fraction ``beta`` of the l2 norm.

``l0`` and ``l2`` are applied after a full sweep, so they break monotonicity.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MU_EPS = 1e-12


@dataclass(frozen=True)
class Sparsity:
    kind: str = "none"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "l0", "l1", "l2"):
            raise ValueError(f"unknown sparsity scheme {self.kind!r}")
        if self.kind == "l0" and (self.value < 1 or int(self.value) != self.value):
            raise ValueError("l0 sparsity needs an integer n >= 1")
        if self.kind == "l1" and self.value < 0:
            raise ValueError("l1 penalty must be >= 0")
        if self.kind == "l2" and not 0 < self.value <= 1:
            raise ValueError("l2 power fraction must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> Sparsity:
        """Parse ``none``, ``l0:N``, ``l1:ALPHA`` or ``l2:BETA``."""
        text = text.strip().lower()
        if text in ("", "none"):
            return cls()
        kind, _, value = text.partition(":")
        defaults = {"l0": 20, "l1": 1e-5, "l2": 0.95}
        if kind not in defaults:
            raise ValueError(f"unknown sparsity scheme {text!r}")
        return cls(kind, float(value) if value else defaults[kind])

    def __str__(self):
        if self.kind == "none":
            return "none"
        if self.kind == "l0":
            return f"l0:{int(self.value)}"
        return f"{self.kind}:{self.value:g}"


@dataclass
class NmfConfig:
    rank: int
    max_outer_iters: int = 500
    outer_tol: float = 1e-6
    accel_alpha: float = 0.5
    accel_eps: float = 0.01
    sparsity: Sparsity = field(default_factory=Sparsity)
    sparsity_target: str = "H"
    init: str = "nndsvd"
    seed: int = 0
    # Fixed inner-loop cost ratio. None measures it with a wall clock, which makes
    # the number of inner passes (and so the result) timing dependent.
    rho: float | None = None
    deterministic: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 0 < self.accel_eps < 1:
            raise ValueError("accel_eps must lie in (0, 1)")
        self.sparsity_target = {"w": "W", "h": "H"}.get(self.sparsity_target, self.sparsity_target)
        if self.sparsity_target not in ("W", "H", "both"):
            raise ValueError(f"sparsity_target must be W, H or both, got {self.sparsity_target!r}")
        if self.init not in ("nndsvd", "random"):
            raise ValueError(f"unknown init {self.init!r}")

    def targets(self, factor: str) -> bool:
        return self.sparsity.kind != "none" and self.sparsity_target in (factor, "both")

    def l1_for(self, factor: str) -> float:
        return self.sparsity.value if self.targets(factor) and self.sparsity.kind == "l1" else 0.0


@dataclass
class NmfResult:
    W: np.ndarray
    H: np.ndarray
    objective_trace: list[float]
    inner_passes: list[int] = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.objective_trace)


def _check_input(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    if np.any(X < 0):
        raise ValueError("input must be nonnegative")
    return X


# --------------------------------------------------------------------------- init

def nndsvd_init(X, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """NNDSVD initialization (Boutsidis & Gallopoulos, 2008).

    The leading pair comes from the dominant singular triplet; every later pair
    keeps the dominant sign section (positive or negative parts) of the singular
    vectors.  A zero matrix gives zero factors.
    """
    X = _check_input(X)
    K, N = X.shape
    if rank > min(K, N):
        raise ValueError(f"rank {rank} exceeds min dimension {min(K, N)}")
    W = np.zeros((K, rank))
    H = np.zeros((rank, N))
    if not np.any(X):
        return W, H
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    W[:, 0] = math.sqrt(S[0]) * np.abs(U[:, 0])
    H[0, :] = math.sqrt(S[0]) * np.abs(Vt[0, :])
    for j in range(1, rank):
        x, y = U[:, j], Vt[j, :]
        xp, xn = np.maximum(x, 0), np.maximum(-x, 0)
        yp, yn = np.maximum(y, 0), np.maximum(-y, 0)
        nxp, nyp = np.linalg.norm(xp), np.linalg.norm(yp)
        nxn, nyn = np.linalg.norm(xn), np.linalg.norm(yn)
        mp, mn = nxp * nyp, nxn * nyn
        if mp >= mn:
            u, v, sigma = xp, yp, mp
            nu, nv = nxp, nyp
        else:
            u, v, sigma = xn, yn, mn
            nu, nv = nxn, nyn
        if sigma == 0:
            continue
        scale = math.sqrt(S[j] * sigma)
        W[:, j] = scale * u / nu
        H[j, :] = scale * v / nv
    return W, H


def random_init(X, rank: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Uniform entries in (0, 1], scaled to the data's mean level."""
    X = _check_input(X)
    rng = np.random.default_rng(seed)
    K, N = X.shape
    W = 1.0 - rng.random((K, rank))
    H = 1.0 - rng.random((rank, N))
    level = math.sqrt(X.mean() / rank) if np.any(X) else 1.0
    return W * level, H * level


def initialize(X, cfg: NmfConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.init == "random":
        return random_init(X, cfg.rank, cfg.seed)
    return nndsvd_init(X, cfg.rank)


# ---------------------------------------------------------------------- sparsity

def apply_sparsity(column, scheme: Sparsity) -> np.ndarray:
    """Zero the small entries of a nonnegative vector per ``l0`` or ``l2`` scheme.

    Ties are broken in favour of the lower index.
    """
    x = np.asarray(column, dtype=np.float64)
    if scheme.kind in ("none", "l1"):
        return x.copy()
    order = np.argsort(-x, kind="stable")
    out = np.zeros_like(x)
    if scheme.kind == "l0":
        keep = order[: int(scheme.value)]
    else:
        energy = np.cumsum(x[order] ** 2)
        total = energy[-1] if len(energy) else 0.0
        if total == 0:
            return x.copy()
        target = scheme.value**2 * total * (1 - 1e-12)
        count = int(np.searchsorted(energy, target, side="left")) + 1
        keep = order[:count]
    out[keep] = x[keep]
    return out


def _sparsify_columns(M: np.ndarray, scheme: Sparsity) -> None:
    for j in range(M.shape[1]):
        M[:, j] = apply_sparsity(M[:, j], scheme)


# -------------------------------------------------------------------- HALS core

def hals_pass(A: np.ndarray, B: np.ndarray, W: np.ndarray, l1: float = 0.0,
              M: np.ndarray | None = None, mu: float = 0.0) -> None:
    """One in-place HALS sweep over the columns of ``W``.

    Minimizes ``||X - W H||^2 + 2*l1*||W||_1 + mu*||W - M||^2`` column by column
    given ``A = X H^T`` and ``B = H H^T``.  Columns with a zero denominator are
    left alone.
    """
    coupled = M is not None and mu > 0
    for k in range(W.shape[1]):
        bkk = B[k, k]
        denom = bkk + mu if coupled else bkk
        if denom <= 0:
            continue
        num = A[:, k] - W @ B[:, k] + bkk * W[:, k]
        if l1:
            num = num - l1
        if coupled:
            num = num + mu * M[:, k]
        W[:, k] = np.maximum(0.0, num / denom)


def hals_update_l1(A, B, W, alpha_sp: float) -> np.ndarray:
    """Single penalized HALS sweep returning a new ``W``."""
    if alpha_sp < 0:
        raise ValueError("alpha_sp must be >= 0")
    W = np.array(W, dtype=np.float64)
    hals_pass(A, B, W, alpha_sp)
    return W


def flop_rho(n_rows: int, n_cols: int, rank: int) -> float:
    """Deterministic stand-in for the timed cost ratio of the first inner pass."""
    pass_cost = n_rows * rank * rank
    precompute = n_rows * n_cols * rank + n_cols * rank * rank
    return (precompute + pass_cost) / pass_cost


def accelerated_update(A, B, W, alpha: float, eps: float, rho: float | None = None,
                       precompute_seconds: float = 0.0, l1: float = 0.0,
                       M: np.ndarray | None = None, mu: float = 0.0) -> int:
    """Accelerated HALS on ``W`` (in place); returns the number of sweeps done.

    After the first sweep, up to ``floor(1 + alpha*rho)`` further sweeps run while
    the update is still moving more than ``eps`` times the first one.
    """
    W0 = W.copy()
    t0 = time.perf_counter()
    hals_pass(A, B, W, l1, M, mu)
    sweep_seconds = time.perf_counter() - t0
    first = np.linalg.norm(W - W0)
    if rho is None:
        rho = (precompute_seconds + sweep_seconds) / max(sweep_seconds, 1e-9)
    n_inner = int(math.floor(1 + alpha * rho))
    passes = 1
    if first == 0:
        return passes
    for _ in range(n_inner):
        prev = W.copy()
        hals_pass(A, B, W, l1, M, mu)
        passes += 1
        if np.linalg.norm(W - prev) <= eps * first:
            break
    return passes


def _update_factor(X, fixed, target, cfg: NmfConfig, l1: float) -> int:
    """Update ``target`` (n x R) in place for ``X ~ target @ fixed`` (fixed: R x m)."""
    t0 = time.perf_counter()
    A = X @ fixed.T
    B = fixed @ fixed.T
    pre = time.perf_counter() - t0
    rho = cfg.rho
    if rho is None and cfg.deterministic:
        rho = flop_rho(X.shape[0], X.shape[1], target.shape[1])
    return accelerated_update(A, B, target, cfg.accel_alpha, cfg.accel_eps, rho, pre, l1)


def penalized_objective(X, W, H, cfg: NmfConfig) -> float:
    """Square root of the (possibly l1-penalized) objective."""
    fit = np.linalg.norm(X - W @ H) ** 2
    fit += 2 * cfg.l1_for("W") * W.sum() + 2 * cfg.l1_for("H") * H.sum()
    return math.sqrt(fit)


def _converged(trace: list[float], tol: float) -> bool:
    if trace[-1] == 0:
        return True
    if len(trace) < 2 or trace[-2] == 0:
        return False
    return (trace[-2] - trace[-1]) / trace[-2] < tol


def hals_nmf(X, cfg: NmfConfig, W0=None, H0=None) -> NmfResult:
    """Blind NMF by alternating accelerated HALS on ``W`` then ``H``."""
    X = _check_input(X)
    if W0 is None or H0 is None:
        W, H = initialize(X, cfg)
    else:
        W, H = np.array(W0, dtype=np.float64), np.array(H0, dtype=np.float64)
    Ht = H.T.copy()
    trace: list[float] = []
    passes: list[int] = []
    XT = X.T
    for _ in range(cfg.max_outer_iters):
        p = _update_factor(X, Ht.T, W, cfg, cfg.l1_for("W"))
        if cfg.targets("W") and cfg.sparsity.kind in ("l0", "l2"):
            _sparsify_columns(W, cfg.sparsity)
        p += _update_factor(XT, W.T, Ht, cfg, cfg.l1_for("H"))
        if cfg.targets("H") and cfg.sparsity.kind in ("l0", "l2"):
            _sparsify_columns(Ht.T, cfg.sparsity)
        passes.append(p)
        trace.append(penalized_objective(X, W, Ht.T, cfg))
        if _converged(trace, cfg.outer_tol):
            break
    return NmfResult(W, np.ascontiguousarray(Ht.T), trace, passes)


def nnls_fixed_dictionary(X, W, cfg: NmfConfig, H0=None) -> np.ndarray:
    """Solve ``min_{H >= 0} ||X - W H||_F^2`` with ``W`` held fixed.

    Rows of ``H`` whose dictionary column is all zero come back as zero.
    """
    X = _check_input(X)
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] != cfg.rank:
        raise ValueError(f"dictionary has {W.shape[1]} columns, config rank is {cfg.rank}")
    if W.shape[0] != X.shape[0]:
        raise ValueError(f"dictionary has {W.shape[0]} rows, data has {X.shape[0]}")
    live = np.any(W > 0, axis=0)
    if H0 is None:
        Ht = np.zeros((X.shape[1], W.shape[1]))
        if np.any(live):
            sol, *_ = np.linalg.lstsq(W[:, live], X, rcond=None)
            Ht[:, live] = np.maximum(sol, 0).T
    else:
        Ht = np.array(H0, dtype=np.float64).T.copy()
    Ht[:, ~live] = 0
    A = X.T @ W
    B = W.T @ W
    l1 = cfg.l1_for("H")
    rho = cfg.rho
    if rho is None and cfg.deterministic:
        rho = flop_rho(X.shape[1], X.shape[0], W.shape[1])
    trace: list[float] = []
    for _ in range(cfg.max_outer_iters):
        accelerated_update(A, B, Ht, cfg.accel_alpha, cfg.accel_eps, rho, 0.0, l1)
        if cfg.targets("H") and cfg.sparsity.kind in ("l0", "l2"):
            _sparsify_columns(Ht.T, cfg.sparsity)
        trace.append(penalized_objective(X, W, Ht.T, cfg))
        if _converged(trace, cfg.outer_tol):
            break
    return np.ascontiguousarray(Ht.T)


# ----------------------------------------------------------- multiplicative update

def multiplicative_step(X, W, H) -> tuple[np.ndarray, np.ndarray]:
    """One Lee-Seung update of ``W`` then ``H``."""
    W = W * (X @ H.T) / np.maximum(W @ (H @ H.T), MU_EPS)
    H = H * (W.T @ X) / np.maximum((W.T @ W) @ H, MU_EPS)
    return W, H


def multiplicative_update_nmf(X, cfg: NmfConfig, W0=None, H0=None) -> NmfResult:
    """Baseline Lee-Seung NMF.

    Multiplicative updates cannot leave zero, so exact zeros of an NNDSVD start are
    filled with the mean of ``X``.
    """
    X = _check_input(X)
    if W0 is None or H0 is None:
        W, H = initialize(X, cfg)
        if cfg.init == "nndsvd":
            fill = X.mean() if np.any(X) else 1.0
            W[W == 0] = fill
            H[H == 0] = fill
    else:
        W, H = np.array(W0, dtype=np.float64), np.array(H0, dtype=np.float64)
    trace: list[float] = []
    for _ in range(cfg.max_outer_iters):
        W, H = multiplicative_step(X, W, H)
        trace.append(float(np.linalg.norm(X - W @ H)))
        if _converged(trace, cfg.outer_tol):
            break
    return NmfResult(W, H, trace)


# ------------------------------------------------------------------------- CSV io

def save_factor_csv(path, M) -> None:
    np.savetxt(path, np.atleast_2d(M), delimiter=",", fmt="%.17g")


def load_factor_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", comments="#", ndmin=2))
