#!/usr/bin/env python3
"""
Standard MIDI File Input/Output for the Multitrack Measure Pipeline

This module parses format 0/1 Standard MIDI Files into notes plus a tempo /
time-signature timeline, splits scores into regions of constant meter and
tempo, and writes decoded measures back out as format-1 files.

Chunk structure is validated with a struct-based scanner so that malformed
files are reported with a byte offset; channel and meta events are decoded
by mido one track chunk at a time.
"""

import io
import logging
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import mido

from event_codec import (DRUM_PROGRAM, STEPS_PER_MEASURE, STEPS_PER_QUARTER, DecodedTrack,
                         Measure, decode_measure, dequantize_velocity)

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DRUM_CHANNEL = 9
DEFAULT_TEMPO_BPM = 120.0
DEFAULT_TIME_SIGNATURE = (4, 4)
DEFAULT_TICKS_PER_QUARTER = 480


class SMFParseError(ValueError):
    """Raised for malformed Standard MIDI File bytes"""

    def __init__(self, message: str, offset: int, chunk: Optional[str] = None):
        self.offset = offset
        self.chunk = chunk
        where = f" in chunk {chunk}" if chunk else ""
        super().__init__(f"{message}{where} at byte offset {offset}")


class SMFWriteError(ValueError):
    """Raised when measures cannot be written as a Standard MIDI File"""


@dataclass(frozen=True)
class ScoreNote:
    """A resolved note with absolute tick timing"""
    pitch: int
    onset_ticks: int
    duration_ticks: int
    velocity: int
    program: int = 0
    is_drum: bool = False
    source_track: int = 0

    @property
    def offset_ticks(self) -> int:
        return self.onset_ticks + self.duration_ticks


@dataclass
class MetaTimeline:
    """Tempo and time-signature declarations on the absolute tick axis"""
    ticks_per_quarter: int
    tempos: List[Tuple[int, float]] = field(default_factory=list)
    time_signatures: List[Tuple[int, Tuple[int, int]]] = field(default_factory=list)
    end_tick: int = 0


@dataclass
class ParsedScore:
    """Result of parse_smf"""
    notes: List[ScoreNote]
    timeline: MetaTimeline
    format: int = 1
    num_tracks: int = 0


@dataclass
class MeterSegment:
    """A region of the score with one tempo and one time signature"""
    notes: List[ScoreNote]
    ticks_per_quarter: int
    time_signature: Tuple[int, int]
    tempo_bpm: float
    start_tick: int
    end_tick: int

    @property
    def quarters_per_bar(self) -> float:
        numerator, denominator = self.time_signature
        return numerator * 4.0 / denominator


@dataclass
class _Chunk:
    kind: str
    offset: int
    body: bytes


def _scan_chunks(data: bytes) -> Tuple[Tuple[int, int, int], List[_Chunk]]:
    """Validate the header and split the file into chunks"""
    if len(data) < 14 or data[:4] != b"MThd":
        raise SMFParseError("missing MThd header", 0, "MThd")
    (header_len,) = struct.unpack(">I", data[4:8])
    if header_len < 6 or 8 + header_len > len(data):
        raise SMFParseError(f"bad header length {header_len}", 4, "MThd")
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise SMFParseError("format 2 files are not supported", 8, "MThd")
    if fmt not in (0, 1):
        raise SMFParseError(f"unknown format {fmt}", 8, "MThd")
    if division & 0x8000:
        raise SMFParseError("SMPTE time division is not supported", 12, "MThd")
    if division == 0:
        raise SMFParseError("ticks per quarter must be positive", 12, "MThd")

    chunks = []
    offset = 8 + header_len
    while offset < len(data):
        if offset + 8 > len(data):
            raise SMFParseError("truncated chunk header", offset, f"#{len(chunks)}")
        kind = data[offset:offset + 4].decode("latin-1")
        (length,) = struct.unpack(">I", data[offset + 4:offset + 8])
        if offset + 8 + length > len(data):
            raise SMFParseError(f"truncated chunk (declared {length} bytes)", offset,
                                f"{kind} #{len(chunks)}")
        if kind == "MTrk":
            chunks.append(_Chunk(kind, offset, data[offset + 8:offset + 8 + length]))
        else:
            logger.debug(f"Skipping unknown chunk {kind!r} at offset {offset}")
        offset += 8 + length
    if len(chunks) < ntracks:
        logger.warning(f"Header declares {ntracks} tracks but {len(chunks)} were found")
    return (fmt, ntracks, division), chunks


def _read_track_messages(chunk: _Chunk, index: int, division: int) -> mido.MidiTrack:
    """Decode one MTrk chunk with mido by wrapping it in a single-track file"""
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, division)
    raw = header + b"MTrk" + struct.pack(">I", len(chunk.body)) + chunk.body
    try:
        midi = mido.MidiFile(file=io.BytesIO(raw))
    except Exception as e:
        raise SMFParseError(f"malformed event data ({e})", chunk.offset, f"MTrk #{index}") from e
    return midi.tracks[0] if midi.tracks else mido.MidiTrack()


def parse_smf(data: bytes) -> ParsedScore:
    """Parse SMF bytes into resolved notes and a tempo/meter timeline"""
    (fmt, _, division), chunks = _scan_chunks(bytes(data))
    timeline = MetaTimeline(ticks_per_quarter=division)
    notes: List[ScoreNote] = []

    for track_index, chunk in enumerate(chunks):
        track = _read_track_messages(chunk, track_index, division)
        programs = [0] * 16
        open_notes: Dict[Tuple[int, int], deque] = defaultdict(deque)
        tick = 0

        def close(key: Tuple[int, int], end: int) -> None:
            start, velocity, program = open_notes[key].popleft()
            channel, pitch = key
            if end > start:
                notes.append(ScoreNote(pitch, start, end - start, velocity, program,
                                       channel == DRUM_CHANNEL, track_index))

        for msg in track:
            tick += msg.time
            if msg.type == "program_change":
                programs[msg.channel] = msg.program
            elif msg.type == "note_on" and msg.velocity > 0:
                key = (msg.channel, msg.note)
                if open_notes[key]:
                    close(key, tick)
                open_notes[key].append((tick, msg.velocity, programs[msg.channel]))
            elif msg.type in ("note_off", "note_on"):
                key = (msg.channel, msg.note)
                if open_notes[key]:
                    close(key, tick)
            elif msg.type == "set_tempo":
                if msg.tempo <= 0:
                    raise SMFParseError(f"tempo of 0 microseconds per quarter at tick {tick}",
                                        chunk.offset, f"MTrk #{track_index}")
                timeline.tempos.append((tick, mido.tempo2bpm(msg.tempo)))
            elif msg.type == "time_signature":
                if msg.numerator <= 0:
                    raise SMFParseError(f"time signature with numerator 0 at tick {tick}",
                                        chunk.offset, f"MTrk #{track_index}")
                timeline.time_signatures.append((tick, (msg.numerator, msg.denominator)))

        for key, pending in open_notes.items():
            if pending:
                logger.warning(f"Track {track_index}: {len(pending)} note(s) on channel {key[0]} "
                               f"pitch {key[1]} never released; closing at end of track")
            while pending:
                close(key, tick)
        timeline.end_tick = max(timeline.end_tick, tick)

    timeline.tempos.sort(key=lambda e: e[0])
    timeline.time_signatures.sort(key=lambda e: e[0])
    if notes:
        timeline.end_tick = max(timeline.end_tick, max(n.offset_ticks for n in notes))
    notes.sort(key=lambda n: (n.onset_ticks, n.source_track, n.pitch))
    return ParsedScore(notes=notes, timeline=timeline, format=fmt, num_tracks=len(chunks))


def _meter_changes(timeline: MetaTimeline) -> List[Tuple[int, float, Tuple[int, int]]]:
    """(tick, tempo, meter) at every tick where either value actually changes"""
    events = sorted([(t, "tempo", v) for t, v in timeline.tempos] +
                    [(t, "meter", v) for t, v in timeline.time_signatures],
                    key=lambda e: e[0])
    tempo, meter = DEFAULT_TEMPO_BPM, DEFAULT_TIME_SIGNATURE
    changes = [(0, tempo, meter)]
    for tick, kind, value in events:
        if kind == "tempo":
            tempo = value
        else:
            meter = value
        if tick == changes[-1][0]:
            changes[-1] = (tick, tempo, meter)
            if len(changes) > 1 and changes[-1][1:] == changes[-2][1:]:
                changes.pop()
        elif (tempo, meter) != changes[-1][1:]:
            changes.append((tick, tempo, meter))
    return changes


def segment_by_meter(notes: Sequence[ScoreNote], timeline: MetaTimeline) -> List[MeterSegment]:
    """Split the score at every tempo or time-signature change.

    Segments partition [0, end_tick]; a note crossing a boundary is split so
    that each segment keeps the part that falls inside it.
    """
    changes = [c for c in _meter_changes(timeline) if c[0] < timeline.end_tick or c[0] == 0]
    bounds = [c[0] for c in changes] + [max(timeline.end_tick, changes[-1][0])]
    segments = []
    for (start, tempo, meter), end in zip(changes, bounds[1:]):
        inside = []
        for note in notes:
            lo, hi = max(note.onset_ticks, start), min(note.offset_ticks, end)
            if hi > lo:
                inside.append(ScoreNote(note.pitch, lo, hi - lo, note.velocity, note.program,
                                        note.is_drum, note.source_track))
        segments.append(MeterSegment(notes=inside, ticks_per_quarter=timeline.ticks_per_quarter,
                                     time_signature=tuple(meter), tempo_bpm=tempo,
                                     start_tick=start, end_tick=end))
    return segments


def _track_key(tracks: Sequence[DecodedTrack]) -> List[Tuple[int, int]]:
    """(program, ordinal among same-program tracks) for each track of a measure"""
    seen: Dict[int, int] = defaultdict(int)
    keys = []
    for track in tracks:
        keys.append((track.program, seen[track.program]))
        seen[track.program] += 1
    return keys


def _assign_channels(spans: Dict[Tuple[int, int], Tuple[int, int]]) -> Dict[Tuple[int, int], int]:
    """Greedy channel allocation over the measure span of each melodic track.

    Tracks whose spans do not overlap may share a channel; drums always use
    channel 10.
    """
    channels: Dict[Tuple[int, int], int] = {}
    busy_until = {c: -1 for c in range(16) if c != DRUM_CHANNEL}
    for key in sorted(spans, key=lambda k: (spans[k][0], k)):
        if key[0] == DRUM_PROGRAM:
            channels[key] = DRUM_CHANNEL
            continue
        first, last = spans[key]
        free = [c for c, until in busy_until.items() if until < first]
        if not free:
            raise SMFWriteError(f"More than {len(busy_until)} non-drum tracks sound at once "
                                f"in measure {first}")
        channels[key] = free[0]
        busy_until[free[0]] = last
    return channels


def write_smf(measures: Sequence, tempo_bpm: float = DEFAULT_TEMPO_BPM,
              ticks_per_quarter: int = DEFAULT_TICKS_PER_QUARTER) -> bytes:
    """Write consecutive measures as a format-1 file.

    `measures` holds Measure objects or already decoded track lists. Tracks
    sharing (program, ordinal) across measures share one SMF track whose
    program change sits at the start of its first measure; drums use
    channel 10.
    """
    if ticks_per_quarter % STEPS_PER_QUARTER:
        raise SMFWriteError(f"ticks_per_quarter must be a multiple of {STEPS_PER_QUARTER}")
    ticks_per_step = ticks_per_quarter // STEPS_PER_QUARTER
    ticks_per_measure = STEPS_PER_MEASURE * ticks_per_step
    decoded = [decode_measure(m) if isinstance(m, Measure) else list(m) for m in measures]

    events: Dict[Tuple[int, int], List[Tuple[int, int, mido.Message]]] = defaultdict(list)
    spans: Dict[Tuple[int, int], Tuple[int, int]] = {}
    for index, tracks in enumerate(decoded):
        base = index * ticks_per_measure
        for key, track in zip(_track_key(tracks), tracks):
            events.setdefault(key, [])
            spans[key] = (spans.get(key, (index, index))[0], index)
            for note in track.notes:
                on = base + note.onset * ticks_per_step
                off = base + note.offset * ticks_per_step
                velocity = dequantize_velocity(note.velocity_bin)
                events[key].append((off, 0, mido.Message("note_off", note=note.pitch, velocity=0)))
                events[key].append((on, 1, mido.Message("note_on", note=note.pitch, velocity=velocity)))
    channels = _assign_channels(spans)

    end_tick = len(decoded) * ticks_per_measure
    midi = mido.MidiFile(type=1, ticks_per_beat=ticks_per_quarter)
    conductor = mido.MidiTrack()
    conductor.append(mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(tempo_bpm), time=0))
    conductor.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
    conductor.append(mido.MetaMessage("end_of_track", time=end_tick))
    midi.tracks.append(conductor)

    for key in sorted(events):
        program, _ = key
        channel = channels[key]
        track = mido.MidiTrack()
        last = 0
        if program != DRUM_PROGRAM:
            last = spans[key][0] * ticks_per_measure
            track.append(mido.Message("program_change", program=program, channel=channel, time=last))
        for tick, _, msg in sorted(events[key], key=lambda e: (e[0], e[1], e[2].note)):
            track.append(msg.copy(channel=channel, time=tick - last))
            last = tick
        track.append(mido.MetaMessage("end_of_track", time=end_tick - last))
        midi.tracks.append(track)

    buffer = io.BytesIO()
    midi.save(file=buffer)
    return buffer.getvalue()


def read_smf_file(path: str) -> ParsedScore:
    """Parse a MIDI file from disk"""
    with open(path, "rb") as f:
        return parse_smf(f.read())


def main():
    """Example usage of SMF parsing and segmentation"""
    logger.info("Standard MIDI File I/O")
    logger.info("- format 0 and 1 parsing with running status")
    logger.info("- segmentation by tempo and time signature")
    logger.info("- format-1 export of decoded measures")


if __name__ == "__main__":
    main()
