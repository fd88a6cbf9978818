"""Note-level transcription scoring, ground-truth readers and inter-channel ratios."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .notes import NoteEvent, sort_events

DEFAULT_TOL = 0.15
RATIO_FLOOR = 1e-8


class GroundTruthError(ValueError):
    """Malformed annotation file."""


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_measure: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> Metrics:
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(tp, fp, fn, p, r, f)

    def to_dict(self, **extra) -> dict:
        return {**asdict(self), **extra}

    def to_json(self, **extra) -> str:
        return json.dumps(self.to_dict(**extra), indent=2)


def match_events(predicted, truth, onset_tol_s: float = DEFAULT_TOL) -> list[tuple[int, int]]:
    """Greedy one-to-one matching as ``(truth_index, predicted_index)`` pairs.

    Truth notes are visited by onset; each takes the earliest unmatched prediction
    of the same pitch whose onset lies within the tolerance.  Offsets are ignored.
    """
    if onset_tol_s < 0:
        raise ValueError("tolerance must be >= 0")
    t_order = sorted(range(len(truth)), key=lambda i: (truth[i].onset_s, truth[i].midi))
    p_order = sorted(range(len(predicted)), key=lambda j: (predicted[j].onset_s, predicted[j].midi))
    used = set()
    pairs = []
    for i in t_order:
        t = truth[i]
        for j in p_order:
            if j in used:
                continue
            p = predicted[j]
            if p.midi == t.midi and abs(p.onset_s - t.onset_s) <= onset_tol_s + 1e-12:
                used.add(j)
                pairs.append((i, j))
                break
    return pairs


def score(predicted, truth, onset_tol_s: float = DEFAULT_TOL) -> Metrics:
    tp = len(match_events(predicted, truth, onset_tol_s))
    return Metrics.from_counts(tp, len(predicted) - tp, len(truth) - tp)


# ------------------------------------------------------------------- readers

@dataclass
class GroundTruth:
    events: list[NoteEvent]
    source_format: str


def _parse_rows(path: Path, skip_header: bool) -> list[NoteEvent]:
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if skip_header and lineno == 1 and not _is_number(fields[0]):
                continue
            if len(fields) < 3:
                raise GroundTruthError(f"{path}:{lineno}: expected 3 columns, got {len(fields)}")
            try:
                onset, offset, midi = float(fields[0]), float(fields[1]), int(round(float(fields[2])))
                events.append(NoteEvent(onset, offset, midi))
            except ValueError as exc:
                raise GroundTruthError(f"{path}:{lineno}: {exc}") from None
    return events


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_midi_events(path) -> list[NoteEvent]:
    """Note events of a format 0/1 SMF, honouring tempo changes."""
    data = Path(path).read_bytes()
    if data[:4] != b"MThd" or len(data) < 14:
        raise GroundTruthError(f"{path}: not a Standard MIDI File")
    _, fmt, ntrk, division = struct.unpack(">IHHH", data[4:14])
    if division & 0x8000:
        raise GroundTruthError(f"{path}: SMPTE time division unsupported")
    pos = 8 + struct.unpack(">I", data[4:8])[0]
    raw = []  # (tick, order, kind, a, b)
    tempos = [(0, 500_000)]
    for _ in range(ntrk):
        if data[pos:pos + 4] != b"MTrk":
            raise GroundTruthError(f"{path}: missing track chunk at byte {pos}")
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        end = pos + 8 + length
        if end > len(data):
            raise GroundTruthError(f"{path}: truncated track at byte {pos}")
        i, tick, status = pos + 8, 0, None
        order = 0
        while i < end:
            delta = 0
            while True:
                byte = data[i]
                i += 1
                delta = (delta << 7) | (byte & 0x7F)
                if not byte & 0x80:
                    break
            tick += delta
            b0 = data[i]
            if b0 == 0xFF:
                mtype, i = data[i + 1], i + 2
                mlen, i = _read_vlq(data, i)
                if mtype == 0x51:
                    tempos.append((tick, int.from_bytes(data[i:i + mlen], "big")))
                i += mlen
                continue
            if b0 in (0xF0, 0xF7):
                slen, i = _read_vlq(data, i + 1)
                i += slen
                continue
            if b0 & 0x80:
                status, i = b0, i + 1
            if status is None:
                raise GroundTruthError(f"{path}: running status without status byte")
            kind = status & 0xF0
            nbytes = 1 if kind in (0xC0, 0xD0) else 2
            args = data[i:i + nbytes]
            i += nbytes
            if kind in (0x80, 0x90):
                is_on = kind == 0x90 and args[1] > 0
                raw.append((tick, order, is_on, status & 0x0F, args[0]))
                order += 1
        pos = end
    tempos.sort()

    def to_seconds(tick):
        sec, last_tick, tempo = 0.0, 0, 500_000
        for t, tmp in tempos:
            if t > tick:
                break
            sec += (t - last_tick) * tempo / 1e6 / division
            last_tick, tempo = t, tmp
        return sec + (tick - last_tick) * tempo / 1e6 / division

    raw.sort(key=lambda x: (x[0], x[1]))
    pending: dict[tuple[int, int], list[int]] = {}
    events = []
    for tick, _, is_on, ch, note in raw:
        key = (ch, note)
        if is_on:
            pending.setdefault(key, []).append(tick)
        elif pending.get(key):
            start = pending[key].pop(0)
            if tick > start:
                events.append(NoteEvent(to_seconds(start), to_seconds(tick), note))
    return sort_events(events)


def _read_vlq(data: bytes, i: int) -> tuple[int, int]:
    value = 0
    while True:
        byte = data[i]
        i += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, i


def read_ground_truth(path, fmt: str | None = None) -> GroundTruth:
    """Load annotations as ``tsv`` (onset, offset, midi), ``maps_txt`` or ``midi``.

    ``fmt=None`` guesses from the extension.
    """
    path = Path(path)
    if fmt is None:
        fmt = "midi" if path.suffix.lower() in (".mid", ".midi") else (
            "maps_txt" if path.suffix.lower() == ".txt" else "tsv")
    if fmt == "midi":
        try:
            events = read_midi_events(path)
        except (IndexError, struct.error) as exc:
            raise GroundTruthError(f"{path}: truncated MIDI data ({exc})") from None
    elif fmt in ("tsv", "maps_txt"):
        events = _parse_rows(path, skip_header=True)
    else:
        raise ValueError(f"unknown ground-truth format {fmt!r}")
    return GroundTruth(sort_events(events), fmt)


# ------------------------------------------------------------------ stereo

def interchannel_ratio(tensor, frame_index: int, floor_eps: float = RATIO_FLOOR) -> np.ndarray:
    """``|M1| / max(|M2|, floor)`` per frequency bin at one frame of an F x T x 2 tensor."""
    data = np.asarray(tensor) if isinstance(tensor, np.ndarray) else np.asarray(tensor.data)
    if data.ndim != 3 or data.shape[2] != 2:
        raise ValueError(f"inter-channel ratio needs exactly 2 channels, got shape {data.shape}")
    if not 0 <= frame_index < data.shape[1]:
        raise IndexError(f"frame {frame_index} outside 0..{data.shape[1] - 1}")
    m1 = np.abs(data[:, frame_index, 0])
    m2 = np.abs(data[:, frame_index, 1])
    return m1 / np.maximum(m2, floor_eps)
