"""End-to-end transcription: audio to spectrograms, factorization, labels, events."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import Codebook, learn_note_template, normalize_columns
from .evalx import DEFAULT_TOL, Metrics, score
from .multichannel import Coupling, SpectroTensor, flexible_parafac2, ntf, simultaneous_nmf
from .nnfac import NmfConfig, Sparsity, hals_nmf, nnls_fixed_dictionary
from .notes import DetectorConfig, NoteEvent, detect_notes, merge_rows
from .pitch import DEFAULT_SALIENCE_THRESHOLD, estimate_f0
from .signal import AudioClip, StftConfig, midi_to_freq, stft_magnitude, synth_note

log = logging.getLogger(__name__)

METHODS = ("blind_nmf", "semi_nmf", "simul_nmf", "ntf", "parafac2")
MULTICHANNEL = ("simul_nmf", "ntf", "parafac2")


def delta_grid(lo: float = 10.0, hi: float = 25.0, step: float = 0.5) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 6) for i in range(n + 1)]


@dataclass
class RunConfig:
    method: str = "semi_nmf"
    rank: int | None = None
    sparsity: Sparsity = field(default_factory=Sparsity)
    sparsity_target: str = "H"
    delta_db: float | None = None
    delta_sweep: tuple[float, float, float] = (10.0, 25.0, 0.5)
    detector_mode: str = "fixed"
    stft: StftConfig = field(default_factory=StftConfig)
    codebook: str | None = None
    seed: int = 0
    max_iters: int = 200
    truncate_seconds: float | None = None
    test_mode: bool = False
    salience_threshold: float = DEFAULT_SALIENCE_THRESHOLD

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.method == "semi_nmf" and not self.codebook:
            raise ValueError("semi_nmf requires a codebook")
        if self.method == "blind_nmf" and not self.rank:
            raise ValueError("blind_nmf requires a rank")
        if self.method in MULTICHANNEL and not self.codebook and not self.rank:
            raise ValueError(f"{self.method} needs either a codebook or a rank")

    @property
    def supervised(self) -> bool:
        return bool(self.codebook)

    def deltas(self) -> list[float]:
        if self.delta_db is not None:
            return [self.delta_db]
        return delta_grid(*self.delta_sweep)

    def nmf_config(self, rank: int) -> NmfConfig:
        return NmfConfig(rank=rank, max_outer_iters=self.max_iters, sparsity=self.sparsity,
                         sparsity_target=self.sparsity_target, seed=self.seed,
                         deterministic=self.test_mode)


@dataclass
class Factorization:
    activations: np.ndarray  # rows x frames
    labels: list[int]
    hop_seconds: float
    objective_trace: list[float]
    templates: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def label_templates(W: np.ndarray, sample_rate: int, frame_len: int,
                    salience_threshold: float = DEFAULT_SALIENCE_THRESHOLD) -> list[int | None]:
    """MIDI label per template column, ``None`` for unpitched or empty columns."""
    labels = []
    for j in range(W.shape[1]):
        if not np.any(W[:, j]):
            labels.append(None)
            continue
        est = estimate_f0(W[:, j], sample_rate, frame_len, salience_threshold)
        labels.append(est.midi if est.is_note and 21 <= est.midi <= 108 else None)
    return labels


def factorize(clip: AudioClip, cfg: RunConfig, codebook: Codebook | None = None) -> Factorization:
    """Run the configured factorization and return labelled activations."""
    if cfg.truncate_seconds:
        clip = clip.truncate(cfg.truncate_seconds)
    if cfg.method in MULTICHANNEL and clip.n_channels < 2:
        raise ValueError(f"{cfg.method} needs a multi-channel recording")
    sr = clip.sample_rate

    if cfg.method in ("blind_nmf", "semi_nmf"):
        spec = stft_magnitude(clip.mono(), sr, cfg.stft)
        if codebook is not None and cfg.method == "semi_nmf":
            _check_codebook(codebook, spec.n_bins)
            H = nnls_fixed_dictionary(spec.data, codebook.W, cfg.nmf_config(codebook.rank))
            trace = [float(np.linalg.norm(spec.data - codebook.W @ H))]
            return Factorization(H, list(codebook.labels), spec.hop_seconds, trace, codebook.W)
        res = hals_nmf(spec.data, cfg.nmf_config(cfg.rank))
        labels = label_templates(res.W, sr, spec.frame_len, cfg.salience_threshold)
        H, merged = merge_rows(res.H, labels)
        return Factorization(H, merged, spec.hop_seconds, res.objective_trace, res.W,
                             {"raw_labels": labels})

    tensor = SpectroTensor.from_clip(clip, cfg.stft)
    C = tensor.n_channels
    if codebook is not None:
        _check_codebook(codebook, tensor.data.shape[0])

    if cfg.method == "simul_nmf":
        channels = [tensor.channel(k) for k in range(C)]
        if codebook is not None:
            res = simultaneous_nmf(channels, cfg.nmf_config(codebook.rank), codebook.stacked(C))
            return Factorization(res.H, list(codebook.labels), tensor.hop_seconds, res.objective_trace,
                                 codebook.W)
        res = simultaneous_nmf(channels, cfg.nmf_config(cfg.rank))
        W = np.mean(res.W_blocks, axis=0)
        labels = label_templates(W, sr, tensor.frame_len, cfg.salience_threshold)
        H, merged = merge_rows(res.H, labels)
        return Factorization(H, merged, tensor.hop_seconds, res.objective_trace, W)

    if cfg.method == "ntf":
        rank = codebook.rank if codebook is not None else cfg.rank
        res = ntf(tensor, cfg.nmf_config(rank), W_fixed=None if codebook is None else codebook.W)
        extra = {"Q": res.Q}
        if codebook is not None:
            return Factorization(res.activations, list(codebook.labels), tensor.hop_seconds,
                                 res.objective_trace, res.W, extra)
        labels = label_templates(res.W, sr, tensor.frame_len, cfg.salience_threshold)
        H, merged = merge_rows(res.activations, labels)
        return Factorization(H, merged, tensor.hop_seconds, res.objective_trace, res.W, extra)

    rank = codebook.rank if codebook is not None else cfg.rank
    books = None if codebook is None else [codebook.W] * C
    res = flexible_parafac2(tensor, cfg.nmf_config(rank), Coupling(), codebooks=books)
    W = normalize_columns(np.mean(res.W, axis=0))
    extra = {"W_k": res.W, "D_k": res.D}
    if codebook is not None:
        return Factorization(res.activations, list(codebook.labels), tensor.hop_seconds,
                             res.penalized_objective_trace, W, extra)
    labels = label_templates(W, sr, tensor.frame_len, cfg.salience_threshold)
    H, merged = merge_rows(res.activations, labels)
    return Factorization(H, merged, tensor.hop_seconds, res.penalized_objective_trace, W, extra)


def _check_codebook(codebook: Codebook, n_bins: int) -> None:
    if codebook.W.shape[0] != n_bins:
        raise ValueError(f"codebook has {codebook.W.shape[0]} frequency bins, the STFT gives {n_bins}; "
                         "use the same frame length and sample rate as for learning")
    if not codebook.labels:
        raise ValueError("codebook columns carry no MIDI labels")


def events_at(fact: Factorization, delta_db: float, mode: str = "fixed") -> list[NoteEvent]:
    return detect_notes(fact.activations, fact.labels, DetectorConfig(mode=mode, delta_db=delta_db),
                        fact.hop_seconds)


@dataclass
class SweepRow:
    delta_db: float
    metrics: Metrics
    n_events: int


def sweep(fact: Factorization, truth: list[NoteEvent], deltas, tol: float = DEFAULT_TOL,
          mode: str = "fixed") -> list[SweepRow]:
    rows = []
    for d in deltas:
        ev = events_at(fact, d, mode)
        rows.append(SweepRow(d, score(ev, truth, tol), len(ev)))
    return rows


def best_row(rows: list[SweepRow]) -> SweepRow:
    """Highest F-measure; ties go to the smallest reduction level."""
    return max(rows, key=lambda r: (r.metrics.f_measure, -r.delta_db))


# ------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthParams:
    sample_rate: int = 44100
    n_partials: int = 8
    decay_rate: float = 1.0


def render_score(events, params: SynthParams = SynthParams(), stereo: str = "mono",
                 gains=(1.0, 0.5), duration_s: float | None = None,
                 normalize: bool = True) -> AudioClip:
    """Sum of synthetic notes placed at their onsets.

    ``stereo`` is ``mono``, ``gains`` (each channel a scaled copy) or ``filters``
    (second channel low-passed by a short FIR filter).
    """
    sr = params.sample_rate
    end = max((e.offset_s for e in events), default=0.0)
    total = duration_s if duration_s is not None else end + 0.5
    y = np.zeros(int(round(total * sr)))
    for e in events:
        note = synth_note(e.midi, e.offset_s - e.onset_s, sr, params.n_partials, params.decay_rate)
        start = int(round(e.onset_s * sr))
        if start >= len(y):
            continue
        stop = min(len(y), start + len(note))
        y[start:stop] += note[: stop - start]
    if normalize and np.any(y):
        y *= 0.9 / np.max(np.abs(y))
    if stereo == "mono":
        return AudioClip([y], sr)
    if stereo == "gains":
        return AudioClip([g * y for g in gains], sr)
    if stereo == "filters":
        return AudioClip([y, lowpass_fir(y)], sr)
    raise ValueError(f"unknown stereo model {stereo!r}")


def lowpass_fir(y: np.ndarray) -> np.ndarray:
    """Three-tap binomial low-pass, ``[1, 2, 1] / 4``."""
    return np.convolve(y, np.array([0.25, 0.5, 0.25]), mode="same")


def synthetic_codebook(midis=range(21, 109), params: SynthParams = SynthParams(),
                       stft: StftConfig = StftConfig(), duration_s: float = 1.0) -> Codebook:
    """Codebook learned from rendered isolated notes (no files involved)."""
    cols = []
    for m in midis:
        x = synth_note(m, duration_s, params.sample_rate, params.n_partials, params.decay_rate)
        cols.append(learn_note_template(stft_magnitude(x, params.sample_rate, stft)))
    return Codebook(np.column_stack(cols), list(midis), source="synthetic")


def read_score_tsv(path) -> list[NoteEvent]:
    from .evalx import read_ground_truth
    return read_ground_truth(Path(path), "tsv").events


__all__ = [
    "METHODS", "RunConfig", "Factorization", "factorize", "events_at", "sweep", "best_row",
    "delta_grid", "render_score", "synthetic_codebook", "SynthParams", "label_templates",
    "midi_to_freq",
]
