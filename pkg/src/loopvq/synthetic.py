"""Procedural bass/drum material for demos, fixtures and desk-scale training.

Loops follow the mined-loop rules by construction: bar 4 repeats bar 0, and
the first step carries kick, crash and a bass note.
"""

from __future__ import annotations

import numpy as np

from . import pianoroll as pr

_KICK_PATTERNS = (
    (0, 8), (0, 6, 8), (0, 10), (0, 3, 8, 11), (0, 7, 10), (0, 8, 14), (0, 4, 8, 12), (0, 6, 10, 13),
)
_SNARE_PATTERNS = ((4, 12), (4, 12, 15), (4, 11, 12), (12,), (4, 10, 12))
_BASS_RHYTHMS = (
    (0, 4, 8, 12), (0, 6, 8, 14), (0, 3, 6, 8, 11, 14), (0, 8), (0, 2, 4, 6, 8, 10, 12, 14),
    (0, 7, 8, 10), (0, 4, 6, 10, 12), (0, 3, 8, 12, 14),
)
_INTERVALS = (0, 0, 0, 7, 12, 5, 10, 3)


def _bar_pattern(rng: np.random.Generator, root: int, fill: bool = False) -> np.ndarray:
    bar = np.zeros((pr.STEPS_PER_BAR, pr.N_PITCHES), dtype=np.uint8)
    rhythm = _BASS_RHYTHMS[rng.integers(len(_BASS_RHYTHMS))]
    onsets = list(rhythm)
    for i, on in enumerate(onsets):
        nxt = onsets[i + 1] if i + 1 < len(onsets) else pr.STEPS_PER_BAR
        length = int(rng.integers(1, nxt - on + 1))
        pitch = root + _INTERVALS[rng.integers(len(_INTERVALS))]
        bar[on:on + length, pr.bass_row(pitch)] = 1
    for s in _KICK_PATTERNS[rng.integers(len(_KICK_PATTERNS))]:
        bar[s, pr.KICK_ROW] = 1
    for s in _SNARE_PATTERNS[rng.integers(len(_SNARE_PATTERNS))]:
        bar[s, pr.DRUM_ROW["snare"]] = 1
    hat_row = pr.DRUM_ROW["ride"] if rng.random() < 0.2 else pr.DRUM_ROW["closed_hihat"]
    hat_step = 2 if rng.random() < 0.7 else 4
    bar[::hat_step, hat_row] = 1
    if rng.random() < 0.3:
        bar[14, pr.DRUM_ROW["open_hihat"]] = 1
    if fill:
        toms = [pr.DRUM_ROW["high_tom"], pr.DRUM_ROW["mid_tom"], pr.DRUM_ROW["low_tom"]]
        for k, s in enumerate((12, 13, 14, 15)):
            bar[s, toms[min(k, 2)]] = 1
    return bar


FORMS = ("ABABABAB", "ABCDABCD", "ABABABCD", "AAAAAAAB", "ABACABAD")


def random_loop(rng=None, form: str | None = None) -> np.ndarray:
    """One 8-bar loop that satisfies every extraction rule."""
    rng = np.random.default_rng(rng)
    form = form or FORMS[rng.integers(len(FORMS))]
    if len(form) != pr.N_BARS or form[0] != form[4]:
        raise ValueError(f"form {form!r} must have 8 bars with bar 5 repeating bar 1")
    root = int(rng.integers(28, 48))
    bars = {}
    for label in dict.fromkeys(form):
        bars[label] = _bar_pattern(rng, root, fill=(label == form[-1] and label != form[0]))
    loop = np.concatenate([bars[label] for label in form])
    loop[0, pr.CRASH_ROW] = 1
    loop[pr.STEPS_PER_BAR * 4, pr.CRASH_ROW] = 1
    loop[0, pr.KICK_ROW] = 1
    return pr.enforce_lowest_bass(loop)


def random_loops(n: int, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    if n == 0:
        return np.zeros((0, pr.N_STEPS, pr.N_PITCHES), dtype=np.uint8)
    return np.stack([random_loop(rng) for _ in range(n)])


def flip_cells(p: np.ndarray, n: int, rng=None, bar_index: int = 4, rows=None) -> np.ndarray:
    """Copy of ``p`` with ``n`` distinct cells toggled inside one bar.

    Steps 0 of the bar and bass rows are avoided by default so the edit
    changes only the hamming rule, not the first-note or monophony rules.
    """
    rng = np.random.default_rng(rng)
    out = np.array(p, copy=True)
    rows = np.arange(pr.N_BASS, pr.N_PITCHES) if rows is None else np.asarray(rows)
    steps = np.arange(1, pr.STEPS_PER_BAR) + bar_index * pr.STEPS_PER_BAR
    cells = [(s, r) for s in steps for r in rows]
    pick = rng.choice(len(cells), size=n, replace=False)
    for k in pick:
        s, r = cells[k]
        out[s, r] ^= 1
    return out


def song_from_bars(bars) -> np.ndarray:
    """Concatenate bar slices or whole loops into one ``(steps, 93)`` roll."""
    return np.concatenate([np.asarray(b, dtype=np.uint8).reshape(-1, pr.N_PITCHES) for b in bars])
