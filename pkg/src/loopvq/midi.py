"""Standard MIDI File reading, sixteenth-note quantization and export.

Only what loop mining needs is decoded: note on/off, program changes, time
signatures and end-of-track. Everything else (controllers, sysex, tempo and
other meta events) is parsed for framing and then skipped.
"""

from __future__ import annotations

import math
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import pianoroll as pr

NOTE_ON = "note_on"
NOTE_OFF = "note_off"
PROGRAM_CHANGE = "program_change"
TIME_SIGNATURE = "time_signature"
END_OF_TRACK = "end_of_track"

DRUM_CHANNEL = 9
BASS_PROGRAMS = range(32, 40)

# General MIDI percussion key -> drum row name
GM_DRUM_MAP = {
    35: "kick", 36: "kick",
    37: "snare", 38: "snare", 40: "snare",
    42: "closed_hihat", 44: "closed_hihat",
    46: "open_hihat",
    41: "low_tom", 43: "low_tom",
    45: "mid_tom", 47: "mid_tom",
    48: "high_tom", 50: "high_tom",
    49: "crash", 52: "crash", 55: "crash", 57: "crash",
    51: "ride", 53: "ride", 59: "ride",
}
# one representative key per drum row, used at export
DRUM_EXPORT_PITCHES = (36, 38, 42, 46, 41, 47, 50, 49, 51)

BASS_VELOCITY = 80
DRUM_VELOCITY = 100
EXPORT_BASS_PROGRAM = 33  # electric bass (finger)

# data byte counts for channel voice messages, keyed by status high nibble
_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


class MidiParseError(ValueError):
    """Malformed SMF data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedFormatError(MidiParseError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class MidiEvent:
    tick: int
    channel: int  # -1 for meta events
    kind: str
    data: Tuple[int, ...] = ()

    @property
    def is_drum(self) -> bool:
        return self.channel == DRUM_CHANNEL


@dataclass
class MidiSong:
    ticks_per_quarter: int
    events: List[MidiEvent]
    source_id: str = ""
    format: int = 1
    end_tick: int = 0

    def notes(self) -> List[MidiEvent]:
        return [e for e in self.events if e.kind in (NOTE_ON, NOTE_OFF)]


@dataclass
class QuantizedSong:
    bars: np.ndarray  # (n_bars, 16, 93) uint8
    source_id: str = ""

    @property
    def n_bars(self) -> int:
        return int(self.bars.shape[0])

    def pianoroll(self) -> np.ndarray:
        """All bars concatenated on the time axis."""
        return self.bars.reshape(-1, pr.N_PITCHES)

    def window(self, start_bar: int, n_bars: int = pr.N_BARS) -> np.ndarray:
        return self.bars[start_bar:start_bar + n_bars].reshape(-1, pr.N_PITCHES)


# --------------------------------------------------------------------------
# reading
# --------------------------------------------------------------------------

def read_vlq(data: bytes, pos: int) -> Tuple[int, int]:
    """Decode a variable-length quantity starting at ``pos``.

    Returns ``(value, next_pos)``.
    """
    value = 0
    for i in range(4):
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos - 4)


def write_vlq(value: int) -> bytes:
    if value < 0 or value > 0x0FFFFFFF:
        raise ValueError(f"value {value} not representable as a MIDI VLQ")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _parse_track(data: bytes, start: int, end: int) -> List[Tuple[int, int, str, Tuple[int, ...]]]:
    events = []
    pos = start
    tick = 0
    running = None
    while pos < end:
        delta, pos = read_vlq(data, pos)
        tick += delta
        if pos >= end:
            raise MidiParseError("event truncated after delta time", pos)
        status = data[pos]
        if status & 0x80:
            pos += 1
        elif running is None:
            raise MidiParseError("data byte without running status", pos)
        else:
            status = running

        if status == 0xFF:
            running = None
            if pos >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos]
            length, pos = read_vlq(data, pos + 1)
            if pos + length > end:
                raise MidiParseError("meta event overruns track chunk", pos)
            payload = data[pos:pos + length]
            pos += length
            if meta_type == 0x58:
                if length < 2:
                    raise MidiParseError("time signature meta event too short", pos - length)
                events.append((tick, -1, TIME_SIGNATURE, (payload[0], 2 ** payload[1])))
            elif meta_type == 0x2F:
                events.append((tick, -1, END_OF_TRACK, ()))
                break
        elif status in (0xF0, 0xF7):
            running = None
            length, pos = read_vlq(data, pos)
            if pos + length > end:
                raise MidiParseError("sysex event overruns track chunk", pos)
            pos += length
        elif status >= 0xF0:
            raise MidiParseError(f"unexpected system message 0x{status:02X} in track", pos - 1)
        else:
            running = status
            kind_nibble = status >> 4
            channel = status & 0x0F
            n = _CHANNEL_DATA_LEN[kind_nibble]
            if pos + n > end:
                raise MidiParseError("channel message overruns track chunk", pos)
            args = tuple(data[pos:pos + n])
            if any(b & 0x80 for b in args):
                raise MidiParseError("status byte inside channel message data", pos)
            pos += n
            if kind_nibble == 0x9 and args[1] > 0:
                events.append((tick, channel, NOTE_ON, args))
            elif kind_nibble in (0x8, 0x9):
                events.append((tick, channel, NOTE_OFF, (args[0], 0)))
            elif kind_nibble == 0xC:
                events.append((tick, channel, PROGRAM_CHANGE, args))
    return events


def parse_smf(data: bytes, source_id: str = "") -> MidiSong:
    """Parse a format 0 or 1 Standard MIDI File into a merged event stream.

    Events from all tracks are merged by tick; ties keep track order. A
    note-on with velocity 0 is recorded as a note-off.
    """
    data = bytes(data)
    if len(data) < 14:
        raise MidiParseError("file shorter than an SMF header", len(data))
    if data[:4] != b"MThd":
        raise MidiParseError("missing MThd header magic", 0)
    (header_len,) = struct.unpack(">I", data[4:8])
    if header_len < 6 or 8 + header_len > len(data):
        raise MidiParseError(f"bad header chunk length {header_len}", 4)
    fmt, n_tracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormatError("SMF format 2 is not supported", 8)
    if fmt not in (0, 1):
        raise MidiParseError(f"unknown SMF format {fmt}", 8)
    if division & 0x8000:
        raise UnsupportedFormatError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("division must be positive", 12)

    pos = 8 + header_len
    merged = []
    track_index = 0
    while pos < len(data) and track_index < n_tracks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        chunk_type = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = pos + 8
        if body + length > len(data):
            raise MidiParseError(f"chunk length {length} overruns file", pos + 4)
        if chunk_type == b"MTrk":
            for seq, ev in enumerate(_parse_track(data, body, body + length)):
                merged.append((ev[0], track_index, seq, ev))
            track_index += 1
        pos = body + length
    if track_index < n_tracks:
        raise MidiParseError(f"expected {n_tracks} tracks, found {track_index}", pos)

    merged.sort(key=lambda item: item[:3])
    events = [MidiEvent(tick, channel, kind, args) for _, _, _, (tick, channel, kind, args) in merged]
    end_tick = max((e.tick for e in events), default=0)
    return MidiSong(division, events, source_id=source_id, format=fmt, end_tick=end_tick)


def read_midi_file(path) -> MidiSong:
    with open(path, "rb") as fh:
        return parse_smf(fh.read(), source_id=str(path))


def is_four_four(song: MidiSong) -> bool:
    """True when every time signature is 4/4 (no signature means 4/4)."""
    return all(e.data[:2] == (4, 4) for e in song.events if e.kind == TIME_SIGNATURE)


# --------------------------------------------------------------------------
# quantization
# --------------------------------------------------------------------------

def fold_bass_pitch(pitch: int) -> int:
    """Shift a pitch by octaves until it lies in the bass range 24..107."""
    while pitch < pr.BASS_LOWEST_PITCH:
        pitch += 12
    while pitch > pr.BASS_HIGHEST_PITCH:
        pitch -= 12
    return pitch


def _to_step(tick: int, ticks_per_step: float) -> int:
    # nearest grid step, exact halves go down
    return int(math.ceil(tick / ticks_per_step - 0.5))


def _note_spans(song: MidiSong) -> List[Tuple[int, int, int, int, int]]:
    """Pair note-ons with note-offs: ``(channel, pitch, program, on_tick, off_tick)``."""
    program = defaultdict(int)
    open_notes: Dict[Tuple[int, int], deque] = defaultdict(deque)
    spans = []

    def close(key, tick):
        on_tick, prog = open_notes[key].popleft()
        spans.append((key[0], key[1], prog, on_tick, tick))

    by_tick = defaultdict(list)
    for e in song.events:
        by_tick[e.tick].append(e)
    for tick in sorted(by_tick):
        group = by_tick[tick]
        deferred_offs = []
        for e in group:
            if e.kind == PROGRAM_CHANGE:
                program[e.channel] = e.data[0]
        # offs for notes opened earlier go first so a re-strike at this tick
        # is not cut short
        for e in group:
            if e.kind == NOTE_OFF:
                key = (e.channel, e.data[0])
                if open_notes[key] and open_notes[key][0][0] < tick:
                    close(key, tick)
                else:
                    deferred_offs.append(e)
        for e in group:
            if e.kind == NOTE_ON:
                open_notes[(e.channel, e.data[0])].append((tick, program[e.channel]))
        for e in deferred_offs:
            key = (e.channel, e.data[0])
            if open_notes[key]:
                close(key, tick)
    last = song.end_tick
    for key, queue in open_notes.items():
        while queue:
            close(key, max(last, queue[0][0]))
    return spans


def song_to_pianoroll(song: MidiSong) -> QuantizedSong:
    """Quantize bass and drum notes of a 4/4 song to the sixteenth grid.

    Bass notes come from channels whose program (at note-on) is 32..39;
    drums from channel 10. Cells are set for every step a note sounds.
    """
    if not is_four_four(song):
        raise PreconditionError(f"{song.source_id or 'song'} is not in 4/4")
    ticks_per_step = song.ticks_per_quarter / 4.0

    cells = []  # (step_from, step_to, row)
    last_step = _to_step(song.end_tick, ticks_per_step)
    for channel, pitch, program, on_tick, off_tick in _note_spans(song):
        if channel == DRUM_CHANNEL:
            name = GM_DRUM_MAP.get(pitch)
            if name is None:
                continue
            row = pr.DRUM_ROW[name]
        elif program in BASS_PROGRAMS:
            row = fold_bass_pitch(pitch) - pr.BASS_LOWEST_PITCH
        else:
            continue
        start = _to_step(on_tick, ticks_per_step)
        stop = max(start + 1, _to_step(off_tick, ticks_per_step))
        cells.append((start, stop, row))
        last_step = max(last_step, stop)

    n_bars = -(-last_step // pr.STEPS_PER_BAR)
    roll = np.zeros((n_bars * pr.STEPS_PER_BAR, pr.N_PITCHES), dtype=np.uint8)
    for start, stop, row in cells:
        roll[start:stop, row] = 1
    roll = pr.enforce_lowest_bass(roll)
    return QuantizedSong(roll.reshape(n_bars, pr.STEPS_PER_BAR, pr.N_PITCHES), song.source_id)


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------

def _track_chunk(events: Sequence[Tuple[int, int, bytes]]) -> bytes:
    """Serialize ``(tick, order, message)`` triples; sorts by tick then order."""
    body = bytearray()
    now = 0
    for tick, _, message in sorted(events, key=lambda e: (e[0], e[1])):
        body += write_vlq(tick - now)
        body += message
        now = tick
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def export_midi(p: np.ndarray, bpm: float = 120.0, division: int = 480,
                time_signature: Tuple[int, int] = (4, 4)) -> bytes:
    """Render a pianoroll as a format-1 SMF.

    Runs of consecutive 1s in a row become one note. Bass plays on channel 1
    with an electric-bass program, drums on channel 10. Any number of steps
    is accepted, so whole songs can be rendered as well as single loops.
    """
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[1] != pr.N_PITCHES:
        raise ValueError(f"expected a (steps, {pr.N_PITCHES}) pianoroll, got shape {p.shape}")
    if not np.isin(p, (0, 1)).all():
        raise ValueError("pianoroll must be binary")
    if division % 4:
        raise ValueError("division must be a multiple of 4 so a sixteenth is whole ticks")
    if not bpm > 0:
        raise ValueError(f"bpm must be positive, got {bpm}")
    num, den = time_signature
    if den < 1 or den & (den - 1):
        raise ValueError(f"time signature denominator must be a power of two, got {den}")
    ticks_per_step = division // 4
    end_tick = p.shape[0] * ticks_per_step
    tempo = int(round(60_000_000 / bpm))

    conductor = [
        (0, 0, b"\xff\x51\x03" + tempo.to_bytes(3, "big")),
        (0, 1, b"\xff\x58\x04" + bytes((num, den.bit_length() - 1, 24, 8))),
        (end_tick, 9, b"\xff\x2f\x00"),
    ]
    bass, drums = [], []
    for note in pr.pianoroll_to_notes(p):
        on = note.onset * ticks_per_step
        off = (note.onset + note.length) * ticks_per_step
        if note.row < pr.N_BASS:
            pitch, channel, vel, dest = pr.row_pitch(note.row), 0, BASS_VELOCITY, bass
        else:
            pitch, channel, vel, dest = DRUM_EXPORT_PITCHES[note.row - pr.N_BASS], DRUM_CHANNEL, DRUM_VELOCITY, drums
        dest.append((on, 3, bytes((0x90 | channel, pitch, vel))))
        dest.append((off, 2, bytes((0x80 | channel, pitch, 0))))
    if bass:
        bass.append((0, 1, bytes((0xC0, EXPORT_BASS_PROGRAM))))
    tracks = [conductor, bass, drums]
    for t in tracks[1:]:
        t.append((end_tick, 9, b"\xff\x2f\x00"))

    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(tracks), division)
    return header + b"".join(_track_chunk(t) for t in tracks)
