#!/usr/bin/env python3
"""
Measure Event Codec for the Multitrack Measure VAE

This module converts between quantized note lists and the 490-token event
vocabulary used to represent one track of one measure:

    0-127    note-on (pitch)
    128-255  note-off (pitch)
    256-263  velocity-change (8 bins)
    264-359  time-shift (1..96 steps, 24 steps per quarter note)
    360-488  program-select (128 General MIDI programs plus drums)
    489      end-track

A measure is exactly 8 track slots plus two chord classes (one per half
measure). Missing slots hold the single end-track token.
"""

import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

NUM_PITCHES = 128
NOTE_ON_OFFSET = 0
NOTE_OFF_OFFSET = 128
VELOCITY_OFFSET = 256
NUM_VELOCITY_BINS = 8
TIME_SHIFT_OFFSET = 264
MAX_TIME_SHIFT = 96
PROGRAM_OFFSET = 360
NUM_PROGRAMS = 129
DRUM_PROGRAM = 128
END_TRACK = 489
VOCAB_SIZE = 490

STEPS_PER_QUARTER = 24
STEPS_PER_MEASURE = 96
NUM_TRACKS = 8
MAX_TRACK_EVENTS = 64
CHORDS_PER_MEASURE = 2
NUM_CHORD_CLASSES = 49
DEFAULT_VELOCITY_BIN = 4

Track = List[int]


class CodecError(ValueError):
    """Raised when notes or tokens cannot be encoded or decoded"""


class MeasureValidationError(ValueError):
    """Raised when a measure violates the track/measure invariants"""


class EventType(Enum):
    """Event species of the measure vocabulary"""
    NOTE_ON = "note_on"
    NOTE_OFF = "note_off"
    VELOCITY_CHANGE = "velocity_change"
    TIME_SHIFT = "time_shift"
    PROGRAM_SELECT = "program_select"
    END_TRACK = "end_track"


@dataclass(frozen=True)
class Event:
    """One symbol of the vocabulary"""
    kind: EventType
    value: int = 0

    @property
    def index(self) -> int:
        if self.kind == EventType.NOTE_ON:
            return NOTE_ON_OFFSET + self.value
        if self.kind == EventType.NOTE_OFF:
            return NOTE_OFF_OFFSET + self.value
        if self.kind == EventType.VELOCITY_CHANGE:
            return VELOCITY_OFFSET + self.value
        if self.kind == EventType.TIME_SHIFT:
            return TIME_SHIFT_OFFSET + self.value - 1
        if self.kind == EventType.PROGRAM_SELECT:
            return PROGRAM_OFFSET + self.value
        return END_TRACK

    @classmethod
    def from_index(cls, index: int) -> "Event":
        if not 0 <= index < VOCAB_SIZE:
            raise CodecError(f"Token index out of range: {index}")
        if index < NOTE_OFF_OFFSET:
            return cls(EventType.NOTE_ON, index - NOTE_ON_OFFSET)
        if index < VELOCITY_OFFSET:
            return cls(EventType.NOTE_OFF, index - NOTE_OFF_OFFSET)
        if index < TIME_SHIFT_OFFSET:
            return cls(EventType.VELOCITY_CHANGE, index - VELOCITY_OFFSET)
        if index < PROGRAM_OFFSET:
            return cls(EventType.TIME_SHIFT, index - TIME_SHIFT_OFFSET + 1)
        if index < END_TRACK:
            return cls(EventType.PROGRAM_SELECT, index - PROGRAM_OFFSET)
        return cls(EventType.END_TRACK)

    def __str__(self) -> str:
        if self.kind == EventType.END_TRACK:
            return "END"
        return f"{self.kind.value}({self.value})"


def note_on(pitch: int) -> int:
    return NOTE_ON_OFFSET + pitch


def note_off(pitch: int) -> int:
    return NOTE_OFF_OFFSET + pitch


def velocity_change(bin_index: int) -> int:
    return VELOCITY_OFFSET + bin_index


def time_shift(steps: int) -> int:
    if not 1 <= steps <= MAX_TIME_SHIFT:
        raise CodecError(f"Time shift out of range: {steps}")
    return TIME_SHIFT_OFFSET + steps - 1


def program_select(program: int) -> int:
    return PROGRAM_OFFSET + program


def is_time_shift(token: int) -> bool:
    return TIME_SHIFT_OFFSET <= token < PROGRAM_OFFSET


def shift_steps(token: int) -> int:
    """Steps advanced by a token (0 for anything but a time-shift)"""
    if is_time_shift(token):
        return token - TIME_SHIFT_OFFSET + 1
    return 0


def describe_track(tokens: Sequence[int]) -> List[Event]:
    """Expand token indices into Event objects (debugging aid)"""
    return [Event.from_index(int(t)) for t in tokens]


@dataclass(frozen=True)
class QuantizedNote:
    """A note on the 96-step measure grid"""
    pitch: int
    onset: int
    duration: int
    velocity_bin: int

    @property
    def offset(self) -> int:
        return self.onset + self.duration


@dataclass
class DecodedTrack:
    """Notes of one non-missing track together with its program"""
    program: int
    notes: List[QuantizedNote] = field(default_factory=list)

    @property
    def is_drum(self) -> bool:
        return self.program == DRUM_PROGRAM


@dataclass
class Measure:
    """Eight track slots of token indices plus one chord class per half measure"""
    tracks: List[Track]
    chords: Tuple[int, ...] = (0, 0)

    @property
    def programs(self) -> List[Optional[int]]:
        return [track_program(t) for t in self.tracks]

    @property
    def num_present(self) -> int:
        return sum(1 for p in self.programs if p is not None)

    def serialize_tracks(self) -> bytes:
        """Canonical byte serialization of the track slots (chords excluded)"""
        return json.dumps(self.tracks, separators=(",", ":")).encode("utf-8")

    def to_json_line(self) -> str:
        return json.dumps({"tracks": self.tracks, "chords": list(self.chords)},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, record: Dict) -> "Measure":
        try:
            tracks = [[int(t) for t in track] for track in record["tracks"]]
            chords = tuple(int(c) for c in record.get("chords", (0, 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise MeasureValidationError(f"Malformed measure record: {e}") from e
        return cls(tracks=tracks, chords=chords)


def quantize_velocity(velocity: int) -> int:
    """Map MIDI velocity 1-127 to one of 8 uniform bins"""
    if not 1 <= velocity <= 127:
        raise CodecError(f"Velocity out of range 1-127: {velocity}")
    return min(NUM_VELOCITY_BINS - 1, velocity // 16)


def dequantize_velocity(bin_index: int) -> int:
    """Return the bin center velocity"""
    if not 0 <= bin_index < NUM_VELOCITY_BINS:
        raise CodecError(f"Velocity bin out of range 0-7: {bin_index}")
    return 16 * bin_index + 8


def track_program(tokens: Sequence[int]) -> Optional[int]:
    """Program of a track, or None for a missing (end-track only) track"""
    if not tokens or tokens[0] == END_TRACK:
        return None
    first = tokens[0]
    if PROGRAM_OFFSET <= first < END_TRACK:
        return first - PROGRAM_OFFSET
    return None


def _time_shifts(steps: int) -> List[int]:
    tokens = []
    while steps > 0:
        shift = min(MAX_TIME_SHIFT, steps)
        tokens.append(time_shift(shift))
        steps -= shift
    return tokens


def encode_track(notes: Iterable[QuantizedNote], program: Optional[int]) -> Track:
    """Encode a quantized note list as a track token sequence.

    A program of None encodes a missing track. At every step with activity
    note-offs come first (ascending pitch), then note-ons (ascending pitch),
    each note-on preceded by a velocity change only when its bin differs from
    the current velocity state.
    """
    notes = list(notes)
    if program is None:
        if notes:
            raise CodecError("A missing track cannot carry notes")
        return [END_TRACK]
    if not 0 <= program < NUM_PROGRAMS:
        raise CodecError(f"Program out of range 0-128: {program}")

    ons: Dict[int, List[QuantizedNote]] = defaultdict(list)
    offs: Dict[int, List[int]] = defaultdict(list)
    for note in notes:
        if not 0 <= note.pitch < NUM_PITCHES:
            raise CodecError(f"Pitch out of range: {note.pitch}")
        if not 0 <= note.velocity_bin < NUM_VELOCITY_BINS:
            raise CodecError(f"Velocity bin out of range: {note.velocity_bin}")
        if note.onset < 0 or note.duration < 1:
            raise CodecError(f"Invalid note timing: {note}")
        if note.offset > STEPS_PER_MEASURE:
            raise CodecError(f"Note extends past step {STEPS_PER_MEASURE}: {note}")
        ons[note.onset].append(note)
        offs[note.offset].append(note.pitch)

    tokens = [program_select(program)]
    current_bin: Optional[int] = None
    cursor = 0
    for step in sorted(set(ons) | set(offs)):
        tokens.extend(_time_shifts(step - cursor))
        cursor = step
        for pitch in sorted(offs.get(step, [])):
            tokens.append(note_off(pitch))
        for note in sorted(ons.get(step, []), key=lambda n: (n.pitch, n.velocity_bin)):
            if note.velocity_bin != current_bin:
                tokens.append(velocity_change(note.velocity_bin))
                current_bin = note.velocity_bin
            tokens.append(note_on(note.pitch))
    tokens.extend(_time_shifts(STEPS_PER_MEASURE - cursor))
    tokens.append(END_TRACK)
    return tokens


def decode_track(tokens: Sequence[int]) -> Tuple[List[QuantizedNote], Optional[int]]:
    """Replay a token sequence into (notes, program); program None means missing"""
    tokens = [int(t) for t in tokens]
    if not tokens or tokens[0] == END_TRACK:
        return [], None

    program = track_program(tokens)
    if program is None:
        logger.warning("Track does not begin with a program-select event")

    time = 0
    velocity_bin: Optional[int] = None
    open_notes: Dict[int, deque] = defaultdict(deque)
    notes: List[QuantizedNote] = []
    overflow_warned = False

    for token in tokens[1:] if program is not None else tokens:
        event = Event.from_index(token)
        if event.kind == EventType.END_TRACK:
            break
        if time > STEPS_PER_MEASURE:
            if not overflow_warned:
                logger.warning(f"Ignoring events after cumulative time {STEPS_PER_MEASURE}")
                overflow_warned = True
            continue
        if event.kind == EventType.TIME_SHIFT:
            time += event.value
        elif event.kind == EventType.VELOCITY_CHANGE:
            velocity_bin = event.value
        elif event.kind == EventType.PROGRAM_SELECT:
            if program is None:
                program = event.value
            else:
                logger.warning("Ignoring extra program-select event inside track")
        elif event.kind == EventType.NOTE_ON:
            if time >= STEPS_PER_MEASURE:
                logger.warning(f"Ignoring note-on at step {time}")
                continue
            if velocity_bin is None:
                logger.warning(f"Note-on before any velocity change; using bin {DEFAULT_VELOCITY_BIN}")
                velocity_bin = DEFAULT_VELOCITY_BIN
            open_notes[event.value].append((time, velocity_bin))
        elif event.kind == EventType.NOTE_OFF:
            if not open_notes[event.value]:
                logger.warning(f"Note-off for pitch {event.value} with no open note")
                continue
            onset, bin_index = open_notes[event.value].popleft()
            end = min(time, STEPS_PER_MEASURE)
            if end > onset:
                notes.append(QuantizedNote(event.value, onset, end - onset, bin_index))

    for pitch, pending in open_notes.items():
        for onset, bin_index in pending:
            notes.append(QuantizedNote(pitch, onset, STEPS_PER_MEASURE - onset, bin_index))

    if program is None and notes:
        logger.warning("Track without program-select carries notes; assuming program 0")
        program = 0
    notes.sort(key=lambda n: (n.onset, n.pitch, n.duration))
    return notes, program


def fit_track(notes: Sequence[QuantizedNote], program: Optional[int],
              max_events: int = MAX_TRACK_EVENTS) -> Track:
    """Encode a track, dropping the latest notes until it fits max_events tokens"""
    kept = sorted(notes, key=lambda n: (n.onset, n.pitch))
    tokens = encode_track(kept, program)
    while len(tokens) > max_events and kept:
        kept = kept[:-1]
        tokens = encode_track(kept, program)
    return tokens


def encode_measure(tracks: Sequence[Tuple[int, Sequence[QuantizedNote]]],
                   chords: Sequence[int] = (0, 0)) -> Measure:
    """Sort tracks by program (drums last, ties in input order) and pad to 8 slots"""
    if len(tracks) > NUM_TRACKS:
        raise CodecError(f"Measure has {len(tracks)} tracks; at most {NUM_TRACKS} allowed")
    ordered = sorted(tracks, key=lambda t: t[0])
    slots = [encode_track(notes, program) for program, notes in ordered]
    slots.extend([[END_TRACK] for _ in range(NUM_TRACKS - len(slots))])
    return Measure(tracks=slots, chords=tuple(int(c) for c in chords))


def decode_measure(measure: Measure) -> List[DecodedTrack]:
    """Decode every non-missing slot, in slot order"""
    decoded = []
    for tokens in measure.tracks:
        notes, program = decode_track(tokens)
        if program is not None:
            decoded.append(DecodedTrack(program=program, notes=notes))
    return decoded


def _validate_track(tokens: Sequence[int], slot: int, max_events: int) -> Optional[int]:
    if not tokens:
        raise MeasureValidationError(f"Slot {slot}: empty token list")
    if any(not 0 <= t < VOCAB_SIZE for t in tokens):
        raise MeasureValidationError(f"Slot {slot}: token outside vocabulary")
    if list(tokens) == [END_TRACK]:
        return None
    program = track_program(tokens)
    if program is None:
        raise MeasureValidationError(f"Slot {slot}: missing leading program-select")
    if tokens[-1] != END_TRACK or tokens.count(END_TRACK) != 1:
        raise MeasureValidationError(f"Slot {slot}: must end with exactly one end-track")
    if len(tokens) > max_events:
        raise MeasureValidationError(f"Slot {slot}: {len(tokens)} tokens exceeds {max_events}")
    if sum(1 for t in tokens if PROGRAM_OFFSET <= t < END_TRACK) != 1:
        raise MeasureValidationError(f"Slot {slot}: more than one program-select")
    total = sum(shift_steps(t) for t in tokens)
    if total != STEPS_PER_MEASURE:
        raise MeasureValidationError(f"Slot {slot}: time shifts sum to {total}, expected {STEPS_PER_MEASURE}")
    open_count: Dict[int, int] = defaultdict(int)
    for token in tokens:
        if token < NOTE_OFF_OFFSET:
            open_count[token] += 1
        elif token < VELOCITY_OFFSET and open_count[token - NOTE_OFF_OFFSET] > 0:
            open_count[token - NOTE_OFF_OFFSET] -= 1
    if any(open_count.values()):
        raise MeasureValidationError(f"Slot {slot}: note-on without matching note-off")
    return program


def validate_measure(measure: Measure, max_events: int = MAX_TRACK_EVENTS) -> None:
    """Raise MeasureValidationError unless the measure satisfies every invariant"""
    if len(measure.tracks) != NUM_TRACKS:
        raise MeasureValidationError(f"Expected {NUM_TRACKS} slots, got {len(measure.tracks)}")
    if len(measure.chords) != CHORDS_PER_MEASURE:
        raise MeasureValidationError(f"Expected {CHORDS_PER_MEASURE} chords, got {len(measure.chords)}")
    if any(not 0 <= c < NUM_CHORD_CLASSES for c in measure.chords):
        raise MeasureValidationError(f"Chord class out of range: {measure.chords}")

    programs = [_validate_track(t, i, max_events) for i, t in enumerate(measure.tracks)]
    present = [p for p in programs if p is not None]
    first_missing = programs.index(None) if None in programs else NUM_TRACKS
    if any(p is not None for p in programs[first_missing:]):
        raise MeasureValidationError("Missing slots must follow all present tracks")
    if present != sorted(present):
        raise MeasureValidationError(f"Tracks not sorted by program: {present}")


def main():
    """Example usage of the measure event codec"""
    notes = [QuantizedNote(pitch=60, onset=0, duration=24, velocity_bin=quantize_velocity(80))]
    tokens = encode_track(notes, program=0)
    logger.info("Measure Event Codec")
    logger.info(f"Vocabulary size: {VOCAB_SIZE}")
    logger.info(f"Example track: {[str(e) for e in describe_track(tokens)]}")


if __name__ == "__main__":
    main()
