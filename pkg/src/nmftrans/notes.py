"""Activation thresholding into note events, and Standard MIDI File output."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TICKS_PER_QUARTER = 480
TEMPO_US = 500_000  # 120 BPM
TICKS_PER_SECOND = TICKS_PER_QUARTER * 1_000_000 / TEMPO_US  # 960
NOTE_VELOCITY = 64


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset_s: float
    offset_s: float
    midi: int

    def __post_init__(self):
        if not self.offset_s > self.onset_s:
            raise ValueError(f"offset {self.offset_s} must follow onset {self.onset_s}")
        if not 21 <= self.midi <= 108:
            raise ValueError(f"midi {self.midi} outside piano range")


@dataclass(frozen=True)
class DetectorConfig:
    mode: str = "fixed"
    delta_db: float = 17.5
    smooth_frames: int = 5
    context_halfwidth: int = 10
    refine_fraction: float = 0.10
    refine_lookback: int = 5

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown detection mode {self.mode!r}")
        if self.delta_db <= 0:
            raise ValueError("delta_db must be positive")
        if min(self.smooth_frames, self.context_halfwidth, self.refine_lookback) < 1:
            raise ValueError("frame counts must be >= 1")


def threshold_value(H, delta_db: float) -> float:
    """Threshold lying ``delta_db`` decibels below ``max(H)``."""
    peak = float(np.max(H)) if np.size(H) else 0.0
    if peak <= 0:
        raise ValueError("activations are all zero")
    return peak * 10.0 ** (-delta_db / 10.0)


def _forward_mean(row: np.ndarray, width: int) -> np.ndarray:
    padded = np.concatenate([row, np.zeros(width - 1)])
    c = np.concatenate([[0.0], np.cumsum(padded)])
    return (c[width:] - c[:-width]) / width


def _centered_mean(row: np.ndarray, half: int) -> np.ndarray:
    padded = np.concatenate([np.zeros(half), row, np.zeros(half)])
    c = np.concatenate([[0.0], np.cumsum(padded)])
    w = 2 * half + 1
    return (c[w:] - c[:-w]) / w


def detect_row(row, thresh: float, cfg: DetectorConfig) -> list[tuple[int, int]]:
    """Onset/offset frame pairs for one activation row.

    A note fires at frame ``t`` when the activation there exceeds the threshold
    and, in fixed mode, so does its mean over ``t..t+4``.  In adaptive mode the
    threshold at ``t`` is ``thresh`` plus the zero-padded mean over ``t-10..t+10``.
    The note ends at the first later frame under the threshold; no new note can
    start on the row before that.
    """
    row = np.asarray(row, dtype=np.float64)
    T = len(row)
    if cfg.mode == "fixed":
        level = np.full(T, thresh)
        gate = _forward_mean(row, cfg.smooth_frames) > thresh
    else:
        level = thresh + _centered_mean(row, cfg.context_halfwidth)
        gate = np.ones(T, dtype=bool)
    above = row > level
    fire = above & gate
    low = cfg.refine_fraction * thresh
    events = []
    t = 0
    floor = 0  # refined onsets never reach back into the previous note
    while t < T:
        if not fire[t]:
            t += 1
            continue
        start = max(floor, t - cfg.refine_lookback)
        hits = np.flatnonzero(row[start:t] > low)
        onset = start + int(hits[0]) if len(hits) else start
        below = np.flatnonzero(~above[t + 1:])
        offset = t + 1 + int(below[0]) if len(below) else T
        events.append((onset, offset))
        t = floor = offset
    return events


def detect_notes(H, row_labels, cfg: DetectorConfig, hop_seconds: float) -> list[NoteEvent]:
    """Threshold every activation row into note events, sorted by onset then pitch.

    Rows labelled outside the piano range (e.g. unpitched components) are ignored.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if len(row_labels) != H.shape[0]:
        raise ValueError(f"{len(row_labels)} labels for {H.shape[0]} activation rows")
    if not np.any(H > 0):
        return []
    thresh = threshold_value(H, cfg.delta_db)
    events = []
    for r, label in enumerate(row_labels):
        if label is None or not 21 <= int(label) <= 108:
            continue
        for on, off in detect_row(H[r], thresh, cfg):
            events.append(NoteEvent(on * hop_seconds, off * hop_seconds, int(label)))
    return sort_events(events)


def merge_rows(H, labels) -> tuple[np.ndarray, list[int]]:
    """Sum activation rows sharing a pitch label; rows with invalid labels dropped."""
    H = np.atleast_2d(H)
    keep = sorted({int(x) for x in labels if x is not None and 21 <= int(x) <= 108})
    out = np.zeros((len(keep), H.shape[1]))
    for i, lab in enumerate(keep):
        rows = [r for r, x in enumerate(labels) if x is not None and int(x) == lab]
        out[i] = H[rows].sum(axis=0)
    return out, keep


def sort_events(events) -> list[NoteEvent]:
    return sorted(events, key=lambda e: (e.onset_s, e.midi, e.offset_s))


# ------------------------------------------------------------------------- SMF

def _vlq(value: int) -> bytes:
    if value < 0:
        raise ValueError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def seconds_to_ticks(seconds: float) -> int:
    return int(round(seconds * TICKS_PER_SECOND))


def midi_bytes(events) -> bytes:
    """Format-0 SMF for the events at a fixed 120 BPM, 480 ticks per quarter."""
    timed = []
    for e in sort_events(events):
        on, off = seconds_to_ticks(e.onset_s), seconds_to_ticks(e.offset_s)
        off = max(off, on + 1)
        # note-offs sort before note-ons at the same tick
        timed.append((on, 1, e.midi, bytes([0x90, e.midi, NOTE_VELOCITY])))
        timed.append((off, 0, e.midi, bytes([0x80, e.midi, 0])))
    timed.sort(key=lambda x: (x[0], x[1], x[2]))
    track = bytearray()
    track += _vlq(0) + b"\xff\x51\x03" + TEMPO_US.to_bytes(3, "big")
    now = 0
    for tick, _, _, msg in timed:
        track += _vlq(tick - now) + msg
        now = tick
    track += _vlq(0) + b"\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, TICKS_PER_QUARTER)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


def write_midi(events, path) -> None:
    Path(path).write_bytes(midi_bytes(events))


def write_events_tsv(events, path) -> None:
    with open(path, "w") as fh:
        for e in sort_events(events):
            fh.write(f"{e.onset_s:.6f}\t{e.offset_s:.6f}\t{e.midi}\n")
