"""Loop mining from quantized songs and the persisted loop dataset."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from . import pianoroll as pr
from .formats import Reader, check_magic, pack_string
from .midi import QuantizedSong

DEFAULT_THRESHOLD = 0.0015
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
SPLITS = ("train", "valid", "test")
DATASET_MAGIC = b"LPD1"

RULE_HAMMING = "hamming"
RULE_FIRST_DRUM = "first_note_drum"
RULE_FIRST_BASS = "first_note_bass"
RULE_DUP_BASS = "duplicate_bass"


@dataclass
class LoopRecord:
    pianoroll: np.ndarray
    source_id: str
    bar_offset: int = 0

    def __eq__(self, other):
        if not isinstance(other, LoopRecord):
            return NotImplemented
        return (self.source_id == other.source_id and self.bar_offset == other.bar_offset
                and np.array_equal(self.pianoroll, other.pianoroll))


@dataclass
class LoopDataset:
    records: List[LoopRecord] = field(default_factory=list)
    splits: List[str] = field(default_factory=list)
    threshold: float = DEFAULT_THRESHOLD
    params: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, LoopDataset):
            return NotImplemented
        return (self.records == other.records and self.splits == other.splits
                and self.threshold == other.threshold)

    def subset(self, split: str) -> List[LoopRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r, s in zip(self.records, self.splits) if s == split]

    def array(self, split: str | None = None) -> np.ndarray:
        """Stack pianorolls into a ``(n, 128, 93)`` uint8 array."""
        recs = self.records if split is None else self.subset(split)
        if not recs:
            return np.zeros((0, pr.N_STEPS, pr.N_PITCHES), dtype=np.uint8)
        return np.stack([r.pianoroll for r in recs]).astype(np.uint8)

    def split_sizes(self) -> Dict[str, int]:
        return {s: self.splits.count(s) for s in SPLITS}


def loop_conditions_check(p: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> Tuple[bool, List[str]]:
    """Test the four loop rules; returns ``(ok, violated_rule_names)``."""
    p = np.asarray(p)
    violated = []
    if not pr.hamming_bar_distance(pr.bar(p, 0), pr.bar(p, 4)) < threshold:
        violated.append(RULE_HAMMING)
    if not (p[0, pr.KICK_ROW] and p[0, pr.CRASH_ROW]):
        violated.append(RULE_FIRST_DRUM)
    if not p[0, :pr.N_BASS].any():
        violated.append(RULE_FIRST_BASS)
    if pr.duplicate_bass_steps(p).any():
        violated.append(RULE_DUP_BASS)
    return not violated, violated


def scan_song(song: QuantizedSong, threshold: float = DEFAULT_THRESHOLD) -> List[LoopRecord]:
    """Slide an 8-bar window over the song and keep windows that pass the rules.

    The window moves one bar at a time; after a hit it jumps past the loop so
    emitted loops never share bars.
    """
    out = []
    start = 0
    while start + pr.N_BARS <= song.n_bars:
        window = pr.enforce_lowest_bass(song.window(start))
        ok, _ = loop_conditions_check(window, threshold)
        if ok:
            out.append(LoopRecord(window.astype(np.uint8), song.source_id, start))
            start += pr.N_BARS
        else:
            start += 1
    return out


def build_dataset(records: Iterable[LoopRecord], ratios: Sequence[float] = DEFAULT_RATIOS,
                  threshold: float = DEFAULT_THRESHOLD, params: Dict | None = None) -> LoopDataset:
    """Split records into train/valid/test by source file, keeping input order.

    A source goes to the split in which its first record falls when the
    records are laid out in order, so all loops of one song share a split.
    """
    records = list(records)
    if len(ratios) != 3 or min(ratios) < 0 or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    n = len(records)
    bounds = np.cumsum(ratios) * n
    split_of_source: Dict[str, str] = {}
    splits = []
    for i, rec in enumerate(records):
        if rec.source_id not in split_of_source:
            # small tolerance so exact ratio boundaries land on the next split
            k = int(np.searchsorted(bounds, i + 1e-9, side="right"))
            split_of_source[rec.source_id] = SPLITS[min(k, 2)]
        splits.append(split_of_source[rec.source_id])
    return LoopDataset(records, splits, threshold, dict(params or {}))


def manifest_path(path) -> str:
    return os.fspath(path) + ".json"


def dataset_to_bytes(ds: LoopDataset) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<I", len(ds.records))]
    for rec in ds.records:
        parts.append(pack_string(rec.source_id))
        parts.append(struct.pack("<I", rec.bar_offset))
        parts.append(pr.pack(rec.pianoroll))
    return b"".join(parts)


def dataset_from_bytes(data: bytes, what: str = "dataset") -> List[LoopRecord]:
    reader = Reader(data, what)
    check_magic(reader, DATASET_MAGIC, version_digit=True)
    count = reader.u32()
    records = []
    for _ in range(count):
        source_id = reader.string()
        offset = reader.u32()
        roll = pr.unpack(reader.take(pr.PACKED_BYTES))
        records.append(LoopRecord(roll, source_id, offset))
    reader.expect_end()
    return records


def save_dataset(ds: LoopDataset, path) -> None:
    """Write the binary container plus a ``<path>.json`` manifest."""
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))
    manifest = {
        "format": DATASET_MAGIC.decode(),
        "count": len(ds.records),
        "threshold": ds.threshold,
        "split_sizes": ds.split_sizes(),
        "splits": ds.splits,
        "params": ds.params,
    }
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(path) -> LoopDataset:
    with open(path, "rb") as fh:
        records = dataset_from_bytes(fh.read(), what=os.fspath(path))
    splits = ["train"] * len(records)
    threshold = DEFAULT_THRESHOLD
    params = {}
    if os.path.exists(manifest_path(path)):
        with open(manifest_path(path)) as fh:
            manifest = json.load(fh)
        if len(manifest.get("splits", [])) != len(records):
            raise ValueError(f"manifest for {path} lists {len(manifest.get('splits', []))} "
                             f"records but the container holds {len(records)}")
        splits = list(manifest["splits"])
        threshold = float(manifest.get("threshold", DEFAULT_THRESHOLD))
        params = dict(manifest.get("params", {}))
    return LoopDataset(records, splits, threshold, params)


def save_pianorolls(rolls: np.ndarray, path, prefix: str = "sample") -> None:
    """Store bare pianorolls (e.g. generated samples) in the dataset container."""
    recs = [LoopRecord(np.asarray(r, dtype=np.uint8), f"{prefix}-{i}", 0) for i, r in enumerate(rolls)]
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(LoopDataset(recs, ["train"] * len(recs))))


def load_pianorolls(path) -> np.ndarray:
    with open(path, "rb") as fh:
        records = dataset_from_bytes(fh.read(), what=os.fspath(path))
    return LoopDataset(records, ["train"] * len(records)).array()
