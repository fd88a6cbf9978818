"""Note-template codebooks learned from isolated notes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nnfac import NmfConfig, hals_nmf
from .signal import Spectrogram, StftConfig, load_wav, stft_magnitude

UNLABELED = -1


@dataclass
class Codebook:
    W: np.ndarray
    labels: list[int] = field(default_factory=list)
    source: str = ""

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.labels and len(self.labels) != self.W.shape[1]:
            raise ValueError("one label per codebook column required")
        for lab in self.labels:
            if lab != UNLABELED and not 21 <= lab <= 108:
                raise ValueError(f"label {lab} outside piano range")

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    @property
    def zero_columns(self) -> list[int]:
        return [j for j in range(self.rank) if not np.any(self.W[:, j])]

    def save(self, path) -> None:
        header = "midi_labels: " + ",".join(str(lab) for lab in self.labels)
        np.savetxt(path, self.W, delimiter=",", fmt="%.17g", header=header, comments="")

    @classmethod
    def load(cls, path) -> Codebook:
        path = Path(path)
        with open(path) as fh:
            first = fh.readline().strip()
        if not first.startswith("midi_labels:"):
            raise ValueError(f"{path}: missing 'midi_labels:' header")
        body = first.split(":", 1)[1].strip()
        labels = [int(x) for x in body.split(",")] if body else []
        W = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(W, labels, source=str(path))

    def stacked(self, n_channels: int) -> np.ndarray:
        """Dictionary for vertically stacked channels, columns renormalized."""
        return normalize_columns(np.vstack([self.W] * n_channels))


def normalize_columns(W) -> np.ndarray:
    W = np.array(W, dtype=np.float64)
    norms = np.linalg.norm(W, axis=0)
    nz = norms > 0
    W[:, nz] /= norms[nz]
    return W


def learn_note_template(spec: Spectrogram | np.ndarray) -> np.ndarray:
    """Unit-norm spectral template: ``W`` of a rank-1 NMF of the spectrogram."""
    X = spec.data if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=np.float64)
    if X.size == 0 or not np.any(X):
        raise ValueError("cannot learn a template from an all-zero spectrogram")
    res = hals_nmf(X, NmfConfig(rank=1, max_outer_iters=200, outer_tol=1e-10, deterministic=True))
    w = res.W[:, 0]
    return w / np.linalg.norm(w)


def codebook_from_templates(templates: dict[int, np.ndarray], source: str = "") -> Codebook:
    labels = sorted(templates)
    sizes = {len(templates[m]) for m in labels}
    if len(sizes) > 1:
        raise ValueError(f"templates have inconsistent frequency sizes {sorted(sizes)}")
    W = np.column_stack([templates[m] for m in labels]) if labels else np.zeros((0, 0))
    return Codebook(W, labels, source)


def build_codebook(note_files, stft: StftConfig = StftConfig(), channel: int | None = None,
                   source: str = "") -> Codebook:
    """Learn one template per ``(wav_path, midi)`` pair; columns sorted by MIDI.

    ``channel=None`` averages the channels before learning; an integer selects one.
    """
    templates: dict[int, np.ndarray] = {}
    for path, midi in note_files:
        midi = int(midi)
        if midi in templates:
            raise ValueError(f"duplicate MIDI label {midi} ({path})")
        clip = load_wav(path)
        x = clip.mono() if channel is None else clip.channels[channel]
        templates[midi] = learn_note_template(stft_magnitude(x, clip.sample_rate, stft))
    return codebook_from_templates(templates, source)
