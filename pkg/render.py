#!/usr/bin/env python3
"""
Pianoroll Rendering for Multitrack Measures

Combines every track of a sequence of measures into one pianoroll, colored
by General MIDI instrument family (16 program blocks plus drums). Output is
either an SVG drawn with matplotlib or a plain-text grid that can be parsed
back into notes.
"""

import io
import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from event_codec import DRUM_PROGRAM, NUM_PITCHES, STEPS_PER_MEASURE, Measure, decode_measure

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DRUM_FAMILY = 16
FAMILY_NAMES = ("Piano", "Chromatic Percussion", "Organ", "Guitar", "Bass", "Strings",
                "Ensemble", "Brass", "Reed", "Pipe", "Synth Lead", "Synth Pad",
                "Synth Effects", "Ethnic", "Percussive", "Sound Effects", "Drums")
FAMILY_LETTERS = "ABCDEFGHIJKLMNOPQ"
EMPTY_CELL = "."
SVG_HASH_SALT = "multitrack-measure-vae"


class RenderError(ValueError):
    """Raised for unknown formats or unparseable grids"""


class RenderFormat(Enum):
    SVG = "svg"
    TEXT = "text"


@dataclass
class RenderOptions:
    format: str = "svg"
    strip_drums: bool = False
    strip_octaves: bool = False

    @property
    def render_format(self) -> RenderFormat:
        try:
            return RenderFormat(self.format)
        except ValueError:
            raise RenderError(f"Unknown render format '{self.format}'; use svg or text") from None


@dataclass(frozen=True, order=True)
class RenderedNote:
    """A note placed on the global step axis"""
    pitch: int
    onset: int
    duration: int
    family: int


def instrument_family(program: int) -> int:
    return DRUM_FAMILY if program == DRUM_PROGRAM else program // 8


def pianoroll_notes(measures: Sequence[Measure], options: RenderOptions) -> List[RenderedNote]:
    notes = []
    for index, measure in enumerate(measures):
        base = index * STEPS_PER_MEASURE
        for track in decode_measure(measure):
            if track.is_drum and options.strip_drums:
                continue
            family = instrument_family(track.program)
            for note in track.notes:
                pitch = note.pitch % 12 if options.strip_octaves else note.pitch
                notes.append(RenderedNote(pitch, base + note.onset, note.duration, family))
    return sorted(notes)


def _lanes(notes: Sequence[RenderedNote]) -> Dict[int, List[List[RenderedNote]]]:
    """Stack colliding notes of one pitch into extra lanes"""
    lanes: Dict[int, List[List[RenderedNote]]] = {}
    for note in sorted(notes, key=lambda n: (n.pitch, n.onset, n.family, n.duration)):
        rows = lanes.setdefault(note.pitch, [])
        for row in rows:
            if row[-1].onset + row[-1].duration <= note.onset:
                row.append(note)
                break
        else:
            rows.append([note])
    return lanes


def render_text(measures: Sequence[Measure], options: RenderOptions) -> bytes:
    """One line per pitch row, highest first; uppercase marks an onset, lowercase a sustain"""
    num_rows = 12 if options.strip_octaves else NUM_PITCHES
    steps = STEPS_PER_MEASURE * len(measures)
    lanes = _lanes(pianoroll_notes(measures, options))
    lines = [f"# pianoroll rows={num_rows} steps={steps} measures={len(measures)}"]
    for pitch in range(num_rows - 1, -1, -1):
        for row in lanes.get(pitch) or [[]]:
            cells = [EMPTY_CELL] * steps
            for note in row:
                letter = FAMILY_LETTERS[note.family]
                cells[note.onset] = letter
                for step in range(note.onset + 1, note.onset + note.duration):
                    cells[step] = letter.lower()
            lines.append(f"{pitch:03d} |{''.join(cells)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_text_grid(data: bytes) -> List[Tuple[int, int, int, int]]:
    """Recover (pitch, onset, duration, family) tuples from a text pianoroll"""
    notes = []
    for line_num, line in enumerate(data.decode("utf-8").splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        match = re.fullmatch(r"(\d{3}) \|(.*)", line)
        if not match:
            raise RenderError(f"Malformed pianoroll line {line_num}")
        pitch, cells = int(match.group(1)), match.group(2)
        for run in re.finditer(r"([A-Q])([a-q]*)", cells):
            letter, tail = run.group(1), run.group(2)
            if tail.strip(letter.lower()):
                raise RenderError(f"Mixed families in one note at line {line_num}")
            notes.append((pitch, run.start(), len(run.group(0)), FAMILY_LETTERS.index(letter)))
        if re.search(r"(^|[.])[a-q]", cells):
            raise RenderError(f"Sustain without onset at line {line_num}")
    return sorted(notes)


def render_svg(measures: Sequence[Measure], options: RenderOptions) -> bytes:
    notes = pianoroll_notes(measures, options)
    num_rows = 12 if options.strip_octaves else NUM_PITCHES
    steps = STEPS_PER_MEASURE * max(1, len(measures))
    colors = matplotlib.colormaps["tab20"]

    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(max(4.0, 2.0 * len(measures)), 4.0 if options.strip_octaves else 8.0))
        by_family: Dict[int, Dict[int, List[Tuple[int, int]]]] = {}
        for note in notes:
            by_family.setdefault(note.family, {}).setdefault(note.pitch, []).append(
                (note.onset, note.duration))
        for family in sorted(by_family):
            for i, (pitch, bars) in enumerate(sorted(by_family[family].items())):
                ax.broken_barh(bars, (pitch - 0.4, 0.8), facecolors=colors(family),
                               label=FAMILY_NAMES[family] if i == 0 else None)
        for boundary in range(STEPS_PER_MEASURE, steps, STEPS_PER_MEASURE):
            ax.axvline(boundary, color="0.7", linewidth=0.5)
        ax.set_xlim(0, steps)
        ax.set_ylim(-0.5, num_rows - 0.5)
        ax.set_xlabel("Step")
        ax.set_ylabel("Pitch class" if options.strip_octaves else "Pitch")
        if by_family:
            ax.legend(loc="upper right", fontsize="small")

        buffer = io.BytesIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buffer.getvalue()


def render_measures(measures: Sequence[Measure], options: RenderOptions = RenderOptions()) -> bytes:
    """Render measures in the requested format; output bytes are deterministic"""
    fmt = options.render_format
    if fmt == RenderFormat.TEXT:
        return render_text(measures, options)
    return render_svg(measures, options)


def main():
    """Example usage of pianoroll rendering"""
    logger.info("Pianoroll Rendering")
    logger.info("- SVG via matplotlib, colored by instrument family")
    logger.info("- Lossless plain-text grid with a parser")
    logger.info("- Optional drum removal and octave folding")


if __name__ == "__main__":
    main()
