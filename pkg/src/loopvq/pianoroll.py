"""Binary bass/drum pianoroll representation and bar-level helpers.

A loop is a ``(128, 93)`` uint8 matrix: 8 bars of 16 sixteenth-note steps on
the time axis, 84 bass rows (MIDI 24..107) followed by 9 drum rows on the
pitch axis. Bar ``i`` occupies steps ``[16 * i, 16 * i + 16)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

STEPS_PER_BAR = 16
N_BARS = 8
N_STEPS = STEPS_PER_BAR * N_BARS
N_BASS = 84
N_DRUMS = 9
N_PITCHES = N_BASS + N_DRUMS
BASS_LOWEST_PITCH = 24  # C1
BASS_HIGHEST_PITCH = BASS_LOWEST_PITCH + N_BASS - 1  # B7
CELLS_PER_BAR = STEPS_PER_BAR * N_PITCHES  # 1488
PACKED_BYTES = N_STEPS * N_PITCHES // 8  # 1488

DRUM_NAMES = (
    "kick",
    "snare",
    "closed_hihat",
    "open_hihat",
    "low_tom",
    "mid_tom",
    "high_tom",
    "crash",
    "ride",
)
DRUM_ROW = {name: N_BASS + i for i, name in enumerate(DRUM_NAMES)}
KICK_ROW = DRUM_ROW["kick"]
CRASH_ROW = DRUM_ROW["crash"]


def bass_row(pitch: int) -> int:
    """Row index of a MIDI bass pitch in 24..107."""
    if not BASS_LOWEST_PITCH <= pitch <= BASS_HIGHEST_PITCH:
        raise ValueError(f"bass pitch {pitch} outside {BASS_LOWEST_PITCH}..{BASS_HIGHEST_PITCH}")
    return pitch - BASS_LOWEST_PITCH


def row_pitch(row: int) -> int:
    """MIDI pitch of a bass row."""
    if not 0 <= row < N_BASS:
        raise ValueError(f"row {row} is not a bass row")
    return row + BASS_LOWEST_PITCH


def empty() -> np.ndarray:
    return np.zeros((N_STEPS, N_PITCHES), dtype=np.uint8)


def check_pianoroll(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p)
    if p.shape != (N_STEPS, N_PITCHES):
        raise ValueError(f"expected pianoroll shape {(N_STEPS, N_PITCHES)}, got {p.shape}")
    if not np.isin(p, (0, 1)).all():
        raise ValueError("pianoroll cells must be 0 or 1")
    return p.astype(np.uint8, copy=False)


def bar(p: np.ndarray, i: int) -> np.ndarray:
    """View of bar ``i`` as a ``(16, 93)`` slice."""
    return p[i * STEPS_PER_BAR:(i + 1) * STEPS_PER_BAR]


def hamming_bar_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of differing cells between two bar slices.

    Normalized by the cell count of one bar (1488), so two bars differing in
    a single cell are ``1/1488`` apart.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"bar shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty bar slice")
    return float(np.count_nonzero(a != b)) / a.size


def enforce_lowest_bass(p: np.ndarray) -> np.ndarray:
    """Keep only the lowest active bass row at every time step.

    Works on any ``(steps, 93)`` array; drum rows are copied unchanged.
    """
    p = np.asarray(p)
    out = p.copy()
    bass = out[:, :N_BASS]
    active = bass.any(axis=1)
    lowest = bass.argmax(axis=1)
    bass[:] = 0
    steps = np.nonzero(active)[0]
    bass[steps, lowest[steps]] = 1
    return out


def duplicate_bass_steps(p: np.ndarray) -> np.ndarray:
    """Boolean mask of steps where two or more bass rows sound."""
    return np.asarray(p)[:, :N_BASS].sum(axis=1) >= 2


@dataclass(frozen=True, order=True)
class Note:
    row: int
    onset: int
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("note length must be >= 1")
        if self.onset < 0:
            raise ValueError("note onset must be >= 0")


def pianoroll_to_notes(p: np.ndarray) -> List[Note]:
    """Split every row into maximal runs of 1s.

    Successive active steps merge into one note, so a held note and a
    repeated note are indistinguishable. Notes are ordered by (row, onset).
    """
    p = np.asarray(p)
    n_steps = p.shape[0]
    padded = np.zeros((n_steps + 2, p.shape[1]), dtype=np.int8)
    padded[1:-1] = p != 0
    edges = np.diff(padded, axis=0)
    # nonzero on the transpose yields (row, step) pairs sorted by row then step
    on_rows, on_steps = np.nonzero(edges.T == 1)
    _, off_steps = np.nonzero(edges.T == -1)
    return [Note(int(r), int(s), int(e - s)) for r, s, e in zip(on_rows, on_steps, off_steps)]


def notes_to_pianoroll(notes: Iterable[Note], n_steps: int = N_STEPS,
                       n_pitches: int = N_PITCHES) -> np.ndarray:
    out = np.zeros((n_steps, n_pitches), dtype=np.uint8)
    for note in notes:
        if note.onset + note.length > n_steps:
            raise ValueError(f"{note} extends past step {n_steps}")
        out[note.onset:note.onset + note.length, note.row] = 1
    return out


def pack(p: np.ndarray) -> bytes:
    """Bit-pack one pianoroll: time-major, pitch-minor, MSB first."""
    p = check_pianoroll(p)
    return np.packbits(p.reshape(-1), bitorder="big").tobytes()


def unpack(data: bytes) -> np.ndarray:
    if len(data) != PACKED_BYTES:
        raise ValueError(f"packed pianoroll must be {PACKED_BYTES} bytes, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
    return bits.reshape(N_STEPS, N_PITCHES)
