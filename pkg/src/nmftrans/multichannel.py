"""Multi-channel factorizations of an F x T x C spectrogram tensor.

* simultaneous NMF: channels stacked vertically, one shared activation matrix;
* NTF: nonnegative CP model ``X ~ sum_r w_r o h_r o q_r``;
* flexible PARAFAC2: per-channel templates ``W_k`` softly coupled as
  ``W_k ~ P_k W*`` with orthonormal ``P_k``, ``X_k ~ W_k D_k H``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nnfac
from .nnfac import NmfConfig, accelerated_update, flop_rho, hals_nmf, nndsvd_init, nnls_fixed_dictionary
from .signal import AudioClip, Spectrogram, StftConfig, stft_magnitude
from .tensor_ops import CpFactors, cp_compose, khatri_rao, unfold

log = logging.getLogger(__name__)


@dataclass
class SpectroTensor:
    data: np.ndarray  # F x T x C
    hop_seconds: float
    freq_resolution_hz: float
    sample_rate: int = 0
    frame_len: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("spectrogram tensor must be F x T x C")
        if np.any(self.data < 0):
            raise ValueError("spectrogram tensor must be nonnegative")

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    def channel(self, k: int) -> np.ndarray:
        return self.data[:, :, k]

    @classmethod
    def from_spectrograms(cls, specs: list[Spectrogram]) -> SpectroTensor:
        shapes = {s.data.shape for s in specs}
        if len(shapes) != 1:
            raise ValueError(f"channel spectrograms differ in shape: {sorted(shapes)}")
        s0 = specs[0]
        return cls(np.stack([s.data for s in specs], axis=2), s0.hop_seconds,
                   s0.freq_resolution_hz, s0.sample_rate, s0.frame_len)

    @classmethod
    def from_clip(cls, clip: AudioClip, cfg: StftConfig = StftConfig()) -> SpectroTensor:
        return cls.from_spectrograms([stft_magnitude(c, clip.sample_rate, cfg) for c in clip.channels])


def _check_finite(data):
    if not np.all(np.isfinite(data)):
        raise ValueError("input contains non-finite values")


# ----------------------------------------------------------- simultaneous NMF

@dataclass
class SimultaneousResult:
    W_blocks: list[np.ndarray]
    H: np.ndarray
    objective_trace: list[float] = field(default_factory=list)

    @property
    def W_stacked(self) -> np.ndarray:
        return np.vstack(self.W_blocks)


def stack_channels(channels, normalize: bool = True) -> np.ndarray:
    mats = [c.data if isinstance(c, Spectrogram) else np.asarray(c, dtype=np.float64) for c in channels]
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise ValueError(f"channels differ in shape: {sorted(shapes)}")
    if normalize:
        mats = [m / n if (n := np.linalg.norm(m)) > 0 else m for m in mats]
    return np.vstack(mats)


def simultaneous_nmf(channels, cfg: NmfConfig, codebook: np.ndarray | None = None,
                     normalize: bool = True) -> SimultaneousResult:
    """NMF of the vertically stacked (Frobenius-normalized) channel spectrograms.

    ``codebook`` is the stacked ``(C*F) x R`` dictionary; when given only ``H``
    is estimated.
    """
    X = stack_channels(channels, normalize)
    _check_finite(X)
    F = X.shape[0] // len(channels)
    if codebook is None:
        res = hals_nmf(X, cfg)
        W, H, trace = res.W, res.H, res.objective_trace
    else:
        W = np.asarray(codebook, dtype=np.float64)
        if W.shape[0] != X.shape[0]:
            raise ValueError(f"stacked codebook has {W.shape[0]} rows, data has {X.shape[0]}")
        H = nnls_fixed_dictionary(X, W, cfg)
        trace = [float(np.linalg.norm(X - W @ H))]
    blocks = [W[k * F:(k + 1) * F] for k in range(len(channels))]
    return SimultaneousResult(blocks, H, trace)


# ---------------------------------------------------------------------- NTF

@dataclass
class NtfResult:
    W: np.ndarray  # F x R
    H: np.ndarray  # T x R
    Q: np.ndarray  # C x R
    objective_trace: list[float]
    unfolding_residuals: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def factors(self) -> CpFactors:
        return CpFactors(self.W, self.H, self.Q)

    @property
    def activations(self) -> np.ndarray:
        """R x T activations weighted by the total channel gain of each component."""
        return (self.H * self.Q.sum(axis=0)).T


def _energy_share_q(X: np.ndarray, rank: int) -> np.ndarray:
    C = X.shape[2]
    norms = np.array([np.linalg.norm(X[:, :, k]) for k in range(C)])
    share = norms / norms.sum() if norms.sum() > 0 else np.full(C, 1.0 / C)
    return np.tile((C * share)[:, None], (1, rank))


def ntf(t: SpectroTensor | np.ndarray, cfg: NmfConfig, W_fixed: np.ndarray | None = None,
        fix_q: bool = False, Q0: np.ndarray | None = None,
        track_unfoldings: bool = False) -> NtfResult:
    """Nonnegative CP decomposition by cyclic accelerated HALS on W, H and Q.

    ``W_fixed`` holds the spectral factor to a codebook (semi-supervised mode);
    ``fix_q`` keeps the channel gains at their initial value.
    """
    X = t.data if isinstance(t, SpectroTensor) else np.asarray(t, dtype=np.float64)
    _check_finite(X)
    if np.any(X < 0):
        raise ValueError("tensor must be nonnegative")
    F, T, C = X.shape
    R = cfg.rank
    X0, X1, X2 = unfold(X, 0), unfold(X, 1), unfold(X, 2)
    mean = X.mean(axis=2)
    if W_fixed is not None:
        W = np.array(W_fixed, dtype=np.float64)
        if W.shape != (F, R):
            raise ValueError(f"fixed W must be {F}x{R}, got {W.shape}")
        H = nnls_fixed_dictionary(mean, W, NmfConfig(rank=R, max_outer_iters=20, deterministic=True)).T.copy()
    else:
        W, Ht = nndsvd_init(mean, R)
        H = Ht.T.copy()
    Q = np.array(Q0, dtype=np.float64) if Q0 is not None else _energy_share_q(X, R)

    def rho_for(Xn):
        if cfg.rho is not None:
            return cfg.rho
        return flop_rho(Xn.shape[0], Xn.shape[1], R) if cfg.deterministic else None

    def update(Xn, target, other):
        A = Xn @ other
        B = other.T @ other
        accelerated_update(A, B, target, cfg.accel_alpha, cfg.accel_eps, rho_for(Xn), 0.0,
                           cfg.l1_for("W") if target is W else cfg.l1_for("H") if target is H else 0.0)

    trace: list[float] = []
    residuals: list[tuple[float, float, float]] = []
    for _ in range(cfg.max_outer_iters):
        if W_fixed is None:
            update(X0, W, khatri_rao(H, Q))
            if cfg.targets("W") and cfg.sparsity.kind in ("l0", "l2"):
                nnfac._sparsify_columns(W, cfg.sparsity)
        update(X1, H, khatri_rao(W, Q))
        if cfg.targets("H") and cfg.sparsity.kind in ("l0", "l2"):
            nnfac._sparsify_columns(H.T, cfg.sparsity)
        if not fix_q:
            update(X2, Q, khatri_rao(W, H))
        err = float(np.linalg.norm(X - cp_compose(CpFactors(W, H, Q))))
        trace.append(err)
        if track_unfoldings:
            residuals.append((
                float(np.linalg.norm(X0 - W @ khatri_rao(H, Q).T)),
                float(np.linalg.norm(X1 - H @ khatri_rao(W, Q).T)),
                float(np.linalg.norm(X2 - Q @ khatri_rao(W, H).T)),
            ))
        if not np.isfinite(err):
            raise FloatingPointError("NTF diverged")
        if nnfac._converged(trace, cfg.outer_tol):
            break
    return NtfResult(W, H, Q, trace, residuals)


# ---------------------------------------------------------------- PARAFAC2

@dataclass(frozen=True)
class Coupling:
    """Penalty schedule: ``mu`` starts at ``mu0`` (auto when None) and grows geometrically."""

    mu0: float | None = None
    growth: float = 1.05
    mu_max: float | None = None
    auto_scale: float = 0.01
    max_factor: float = 1e2


@dataclass
class Parafac2Result:
    W: list[np.ndarray]  # C matrices F x R
    D: list[np.ndarray]  # C diagonal R x R
    H: np.ndarray  # R x T
    P: list[np.ndarray]  # C matrices F x R, orthonormal columns
    W_star: np.ndarray  # R x R
    penalized_objective_trace: list[float]
    mu_trace: list[float] = field(default_factory=list)
    fit_trace: list[float] = field(default_factory=list)
    orthonormality_errors: list[float] = field(default_factory=list)
    substep_traces: list[list[float]] = field(default_factory=list)

    @property
    def activations(self) -> np.ndarray:
        """H weighted by the mean channel gain of each component."""
        gains = np.mean([np.diag(d) for d in self.D], axis=0)
        return self.H * gains[:, None]

    def fit_residuals(self, X: np.ndarray) -> list[float]:
        return [float(np.linalg.norm(X[:, :, k] - self.W[k] @ self.D[k] @ self.H) /
                      max(np.linalg.norm(X[:, :, k]), 1e-300)) for k in range(len(self.W))]

    def coupling_residuals(self) -> list[float]:
        return [float(np.linalg.norm(Wk - Pk @ self.W_star) / max(np.linalg.norm(Wk), 1e-300))
                for Wk, Pk in zip(self.W, self.P)]


def procrustes(Wk: np.ndarray, W_star: np.ndarray) -> np.ndarray:
    """Orthonormal ``P`` (F x R) minimizing ``||Wk - P W*||_F``."""
    U, _, Vt = np.linalg.svd(Wk @ W_star.T, full_matrices=False)
    return U @ Vt


def diagonal_nnls(Xk, Wk, H, d0=None, max_passes: int = 5000, tol: float = 1e-14) -> np.ndarray:
    """``argmin_{d >= 0} ||vec(Xk) - khatri_rao(Wk, H^T) d||`` by coordinate descent.

    The Gram matrix of the Khatri-Rao system is ``(Wk^T Wk) * (H H^T)`` and its
    right-hand side ``diag(Wk^T Xk H^T)``, so the Kronecker-sized matrix is never built.
    """
    G = (Wk.T @ Wk) * (H @ H.T)
    b = np.einsum("fr,fr->r", Wk, Xk @ H.T)
    R = len(b)
    d = np.zeros(R) if d0 is None else np.array(d0, dtype=np.float64)
    for _ in range(max_passes):
        moved = 0.0
        for r in range(R):
            if G[r, r] <= 0:
                d[r] = 0.0
                continue
            new = max(0.0, d[r] + (b[r] - G[r] @ d) / G[r, r])
            moved = max(moved, abs(new - d[r]))
            d[r] = new
        if moved <= tol * max(1.0, np.abs(d).max()):
            break
    return d


def _pf2_parts(X, W, D, H, P, W_star, mu):
    fit = sum(np.linalg.norm(X[:, :, k] - W[k] @ D[k] @ H) ** 2 for k in range(len(W)))
    coup = sum(np.linalg.norm(W[k] - P[k] @ W_star) ** 2 for k in range(len(W)))
    return fit, coup, fit + mu * coup


def flexible_parafac2(t: SpectroTensor | np.ndarray, cfg: NmfConfig,
                      coupling: Coupling = Coupling(), codebooks: list[np.ndarray] | None = None,
                      track_substeps: bool = False, d_passes: int = 100) -> Parafac2Result:
    """Flexible (penalty-coupled) nonnegative PARAFAC2.

    Each outer iteration updates, in order: the latent ``W*``, the orthonormal
    ``P_k`` (Procrustes), the coupled ``W_k``, the diagonal gains ``D_k``, and the
    shared ``H``; then ``W_k`` columns are scaled to unit norm with ``D_k``
    absorbing the scale, and the penalty weight grows.
    """
    X = t.data if isinstance(t, SpectroTensor) else np.asarray(t, dtype=np.float64)
    _check_finite(X)
    if np.any(X < 0):
        raise ValueError("tensor must be nonnegative")
    F, T, C = X.shape
    R = cfg.rank
    if C < 2:
        raise ValueError("PARAFAC2 needs at least 2 channels")
    if R > F:
        raise ValueError(f"rank {R} exceeds the {F} frequency bins; orthonormal P_k impossible")

    if codebooks is not None:
        if len(codebooks) != C:
            raise ValueError(f"{len(codebooks)} codebooks for {C} channels")
        W = [np.array(cb, dtype=np.float64) for cb in codebooks]
    else:
        W = [nndsvd_init(X[:, :, k], R)[0] for k in range(C)]
    D = [np.eye(R) for _ in range(C)]
    H = nnls_fixed_dictionary(X[:, :, 0], W[0], NmfConfig(rank=R, max_outer_iters=50, deterministic=True))
    P = []
    for Wk in W:
        U, _, Vt = np.linalg.svd(Wk, full_matrices=False)
        P.append(U @ Vt)
    W_star = np.mean([Pk.T @ Wk for Pk, Wk in zip(P, W)], axis=0)

    def rho_for(n_rows, n_cols):
        if cfg.rho is not None:
            return cfg.rho
        return flop_rho(n_rows, n_cols, R) if cfg.deterministic else None

    def iterate(mu, substeps):
        nonlocal W_star, H

        def note():
            if substeps is not None:
                substeps.append(_pf2_parts(X, W, D, H, P, W_star, mu)[2])

        note()
        W_star = np.mean([Pk.T @ Wk for Pk, Wk in zip(P, W)], axis=0)
        note()
        for k in range(C):
            P[k] = procrustes(W[k], W_star)
        note()
        for k in range(C):
            DH = D[k] @ H
            A = X[:, :, k] @ DH.T
            B = DH @ DH.T
            accelerated_update(A, B, W[k], cfg.accel_alpha, cfg.accel_eps, rho_for(F, T), 0.0,
                               cfg.l1_for("W"), P[k] @ W_star, mu)
        note()
        for k in range(C):
            D[k] = np.diag(diagonal_nnls(X[:, :, k], W[k], H, np.diag(D[k]), max_passes=d_passes))
        note()
        WD = [W[k] @ D[k] for k in range(C)]
        A = sum(X[:, :, k].T @ WD[k] for k in range(C))
        B = sum(WD[k].T @ WD[k] for k in range(C))
        Ht = H.T.copy()
        accelerated_update(A, B, Ht, cfg.accel_alpha, cfg.accel_eps, rho_for(T, F * C), 0.0,
                           cfg.l1_for("H"))
        if cfg.targets("H") and cfg.sparsity.kind in ("l0", "l2"):
            nnfac._sparsify_columns(Ht.T, cfg.sparsity)
        H = np.ascontiguousarray(Ht.T)
        note()
        for k in range(C):
            norms = np.linalg.norm(W[k], axis=0)
            nz = norms > 0
            W[k][:, nz] /= norms[nz]
            D[k] = D[k] @ np.diag(np.where(nz, norms, 1.0))

    # uncoupled warm-up sets the initial penalty weight
    iterate(0.0, None)
    W_star = np.mean([Pk.T @ Wk for Pk, Wk in zip(P, W)], axis=0)
    for k in range(C):
        P[k] = procrustes(W[k], W_star)
    fit, coup, _ = _pf2_parts(X, W, D, H, P, W_star, 0.0)
    if coupling.mu0 is not None:
        mu = coupling.mu0
    else:
        mu = coupling.auto_scale * fit / coup if coup > 0 else coupling.auto_scale
    mu_max = coupling.mu_max if coupling.mu_max is not None else coupling.max_factor * mu

    trace, mus, fits, ortho, subs = [], [], [], [], []
    for it in range(cfg.max_outer_iters):
        substeps = [] if track_substeps else None
        iterate(mu, substeps)
        if substeps is not None:
            subs.append(substeps)
        ortho.append(max(float(np.abs(Pk.T @ Pk - np.eye(R)).max()) for Pk in P))
        fit, coup, total = _pf2_parts(X, W, D, H, P, W_star, mu)
        if not math.isfinite(total):
            raise FloatingPointError("PARAFAC2 diverged")
        trace.append(total)
        fits.append(math.sqrt(fit))
        mus.append(mu)
        at_cap = mu >= mu_max
        if at_cap and len(trace) > 1 and trace[-2] > 0 and abs(trace[-2] - trace[-1]) / trace[-2] < cfg.outer_tol:
            break
        mu = min(mu * coupling.growth, mu_max) if mu > 0 else 0.0
    return Parafac2Result(W, D, H, P, W_star, trace, mus, fits, ortho, subs)
