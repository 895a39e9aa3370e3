#!/usr/bin/env python3
"""
Measure Corpus Pipeline for the Multitrack Measure VAE

This module turns a directory of MIDI files into the training dataset:
meter segmentation, 4-quarter-note measure splitting on the 24-steps-per-
quarter grid, chord inference per segment, track extraction and filtering,
deduplication, and JSON-lines output. Transposition augmentation is applied
later, when training batches are assembled.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tabulate import tabulate
from tqdm import tqdm

from chord_inference import ChordInferenceParams, chord_name, infer_chords, transpose_chord
from event_codec import (DRUM_PROGRAM, MAX_TRACK_EVENTS, NUM_PITCHES, NUM_TRACKS,
                         STEPS_PER_MEASURE, STEPS_PER_QUARTER, DecodedTrack, Measure,
                         QuantizedNote, decode_track, encode_measure, encode_track,
                         quantize_velocity, track_program, validate_measure)
from smf_io import MeterSegment, parse_smf, segment_by_meter

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

MIDI_SUFFIXES = (".mid", ".midi")


class DatasetError(ValueError):
    """Raised for unreadable or malformed dataset files"""


class DiscardReason(Enum):
    """Why a measure was left out of the dataset"""
    TRACK_COUNT = "track_count"
    EVENT_COUNT = "event_count"


@dataclass(frozen=True, order=True)
class TrackKey:
    """Identity of an extracted track within a segment"""
    source_track: int
    program: int
    is_drum: bool

    @property
    def codec_program(self) -> int:
        return DRUM_PROGRAM if self.is_drum else self.program


@dataclass
class RawMeasure:
    """Quantized notes of one 96-step bar, grouped by track identity"""
    index: int
    tracks: Dict[TrackKey, List[QuantizedNote]] = field(default_factory=dict)

    def decoded_tracks(self) -> List[DecodedTrack]:
        return [DecodedTrack(key.codec_program, notes)
                for key, notes in sorted(self.tracks.items()) if notes]


@dataclass
class ExtractionResult:
    """Either a retained measure or the reason it was discarded"""
    measure: Optional[Measure] = None
    reason: Optional[DiscardReason] = None


@dataclass
class DatasetStats:
    """Statistics for dataset construction"""
    measures_seen: int = 0
    discarded_bad_length: int = 0
    discarded_track_count: int = 0
    discarded_event_count: int = 0
    discarded_long_segment: int = 0
    duplicates_removed: int = 0
    retained: int = 0
    files_seen: int = 0
    files_failed: int = 0

    def merge(self, other: "DatasetStats") -> None:
        for name, value in asdict(other).items():
            setattr(self, name, getattr(self, name) + value)

    @property
    def discarded(self) -> int:
        return (self.discarded_bad_length + self.discarded_track_count +
                self.discarded_event_count + self.discarded_long_segment)

    def is_conserved(self) -> bool:
        return self.retained == self.measures_seen - self.discarded - self.duplicates_removed


@dataclass
class PipelineConfig:
    """Configuration for dataset construction"""
    min_tracks: int = 2
    max_tracks: int = NUM_TRACKS
    max_events: int = MAX_TRACK_EVENTS
    max_transpose: int = 3
    workers: int = 1
    shuffle: bool = False
    progress: bool = True


@dataclass
class FileResult:
    """Per-file output of the parse/encode stage"""
    path: str
    measures: List[Measure] = field(default_factory=list)
    stats: DatasetStats = field(default_factory=DatasetStats)
    error: Optional[str] = None


def _quantize(ticks: int, ticks_per_quarter: int) -> int:
    """Nearest 24-per-quarter step, ties rounded up"""
    return (2 * ticks * STEPS_PER_QUARTER + ticks_per_quarter) // (2 * ticks_per_quarter)


def is_four_quarter_meter(time_signature: Tuple[int, int]) -> bool:
    numerator, denominator = time_signature
    # bar of four quarter notes: 4/4, 2/2, 8/8
    return numerator == denominator


def bar_count(segment: MeterSegment) -> int:
    """Bars in a segment at its own meter, counting a partial last bar"""
    numerator, denominator = segment.time_signature
    bar_ticks = segment.ticks_per_quarter * numerator * 4 / denominator
    span = segment.end_tick - segment.start_tick
    return int(np.ceil(span / bar_ticks)) if span > 0 else 0


def _resolve_overlaps(notes: List[QuantizedNote]) -> List[QuantizedNote]:
    """Cut a note short at the next onset of the same pitch"""
    resolved: List[QuantizedNote] = []
    last_by_pitch: Dict[int, int] = {}
    for note in sorted(notes, key=lambda n: (n.onset, n.pitch, -n.duration)):
        prev = last_by_pitch.get(note.pitch)
        if prev is not None:
            earlier = resolved[prev]
            if earlier.onset == note.onset:
                continue
            if earlier.offset > note.onset:
                resolved[prev] = QuantizedNote(earlier.pitch, earlier.onset,
                                               note.onset - earlier.onset, earlier.velocity_bin)
        last_by_pitch[note.pitch] = len(resolved)
        resolved.append(note)
    return resolved


def split_measures(segment: MeterSegment) -> List[RawMeasure]:
    """Cut a segment into consecutive 4-quarter-note measures.

    Only segments whose bar is four quarter notes long produce measures. Note
    boundaries are rounded to the nearest step; a note crossing a bar line is
    split at the bar line and a trailing partial bar is left out.
    """
    if not is_four_quarter_meter(segment.time_signature):
        return []
    tpq = segment.ticks_per_quarter
    span_steps = ((segment.end_tick - segment.start_tick) * STEPS_PER_QUARTER) // tpq
    num_bars = span_steps // STEPS_PER_MEASURE
    limit = num_bars * STEPS_PER_MEASURE
    measures = [RawMeasure(index=i) for i in range(num_bars)]

    for note in segment.notes:
        onset = _quantize(note.onset_ticks - segment.start_tick, tpq)
        offset = max(onset + 1, _quantize(note.offset_ticks - segment.start_tick, tpq))
        key = TrackKey(note.source_track, note.program, note.is_drum)
        velocity_bin = quantize_velocity(note.velocity)
        while onset < min(offset, limit):
            bar = onset // STEPS_PER_MEASURE
            end = min(offset, (bar + 1) * STEPS_PER_MEASURE)
            measures[bar].tracks.setdefault(key, []).append(
                QuantizedNote(note.pitch, onset - bar * STEPS_PER_MEASURE, end - onset, velocity_bin))
            onset = end

    for measure in measures:
        measure.tracks = {k: _resolve_overlaps(v) for k, v in measure.tracks.items()}
    return measures


def extract_tracks(raw: RawMeasure, chords: Tuple[int, ...] = (0, 0),
                   config: Optional[PipelineConfig] = None) -> ExtractionResult:
    """Encode a raw measure, or report why it is discarded"""
    config = config or PipelineConfig()
    tracks = raw.decoded_tracks()
    if not config.min_tracks <= len(tracks) <= config.max_tracks:
        return ExtractionResult(reason=DiscardReason.TRACK_COUNT)
    measure = encode_measure([(t.program, t.notes) for t in tracks], chords)
    if any(len(tokens) > config.max_events for tokens in measure.tracks):
        return ExtractionResult(reason=DiscardReason.EVENT_COUNT)
    return ExtractionResult(measure=measure)


def measure_digest(measure: Measure) -> str:
    return hashlib.sha1(measure.serialize_tracks()).hexdigest()


def dedupe(measures: Iterable[Measure],
           stats: Optional[DatasetStats] = None) -> Tuple[List[Measure], DatasetStats]:
    """Keep the first occurrence of each distinct 8-slot track serialization"""
    stats = stats if stats is not None else DatasetStats()
    seen = set()
    unique = []
    for measure in measures:
        digest = measure_digest(measure)
        if digest in seen:
            stats.duplicates_removed += 1
            continue
        seen.add(digest)
        unique.append(measure)
    stats.retained = len(unique)
    return unique, stats


def transpose_augment(measure: Measure, semitones: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      max_transpose: int = 3) -> Measure:
    """Transpose non-drum tracks and chord roots; notes leaving 0-127 are dropped"""
    if semitones is None:
        rng = rng if rng is not None else np.random.default_rng()
        semitones = int(rng.integers(-max_transpose, max_transpose + 1))
    if semitones == 0:
        return Measure(tracks=[list(t) for t in measure.tracks], chords=tuple(measure.chords))

    tracks = []
    for tokens in measure.tracks:
        notes, program = decode_track(tokens)
        if program is None or program == DRUM_PROGRAM:
            tracks.append(list(tokens))
            continue
        shifted = [QuantizedNote(n.pitch + semitones, n.onset, n.duration, n.velocity_bin)
                   for n in notes if 0 <= n.pitch + semitones < NUM_PITCHES]
        tracks.append(encode_track(shifted, program))
    chords = tuple(transpose_chord(c, semitones) for c in measure.chords)
    return Measure(tracks=tracks, chords=chords)


def measures_from_bytes(data: bytes, config: Optional[PipelineConfig] = None,
                        chord_params: Optional[ChordInferenceParams] = None
                        ) -> Tuple[List[Measure], DatasetStats]:
    """Parse, segment, split, infer chords and extract tracks for one file"""
    config = config or PipelineConfig()
    chord_params = chord_params or ChordInferenceParams()
    stats = DatasetStats()
    measures: List[Measure] = []
    parsed = parse_smf(data)
    for segment in segment_by_meter(parsed.notes, parsed.timeline):
        total_bars = bar_count(segment)
        raw_measures = split_measures(segment)
        stats.measures_seen += total_bars
        stats.discarded_bad_length += total_bars - len(raw_measures)
        if not raw_measures:
            continue

        inference = infer_chords([m.decoded_tracks() for m in raw_measures], chord_params)
        if inference.discarded:
            stats.discarded_long_segment += len(raw_measures)
            continue

        for raw, chords in zip(raw_measures, inference.chords):
            result = extract_tracks(raw, chords, config)
            if result.reason == DiscardReason.TRACK_COUNT:
                stats.discarded_track_count += 1
            elif result.reason == DiscardReason.EVENT_COUNT:
                stats.discarded_event_count += 1
            else:
                measures.append(result.measure)
    stats.retained = len(measures)
    return measures, stats


def measures_from_midi(path: str, config: Optional[PipelineConfig] = None,
                       chord_params: Optional[ChordInferenceParams] = None) -> List[Measure]:
    """Ingest a single MIDI file without deduplication, warning about dropped measures"""
    config = config or PipelineConfig()
    with open(path, "rb") as f:
        measures, stats = measures_from_bytes(f.read(), config, chord_params)
    dropped = stats.measures_seen - stats.retained
    if dropped:
        logger.warning(f"{path}: dropped {dropped} of {stats.measures_seen} measures "
                       f"({stats.discarded_bad_length} not 4/4 or partial, "
                       f"{stats.discarded_track_count} track count, "
                       f"{stats.discarded_event_count} over {config.max_events} "
                       f"tokens, {stats.discarded_long_segment} in long segments)")
    else:
        logger.info(f"{path}: {stats.retained} of {stats.measures_seen} measures retained")
    return measures


def _process_file(path: str, config: PipelineConfig,
                  chord_params: ChordInferenceParams) -> FileResult:
    """Worker entry point; never raises so one bad file cannot stop the batch"""
    result = FileResult(path=path)
    result.stats.files_seen = 1
    try:
        with open(path, "rb") as f:
            result.measures, file_stats = measures_from_bytes(f.read(), config, chord_params)
        file_stats.files_seen = 1
        result.stats = file_stats
    except Exception as e:
        result.error = f"{type(e).__name__}: {e}"
        result.stats.files_failed = 1
    return result


class CorpusBuilder:
    """Builds a JSON-lines measure dataset from a directory of MIDI files"""

    def __init__(self, config: Optional[PipelineConfig] = None,
                 chord_params: Optional[ChordInferenceParams] = None):
        self.config = config or PipelineConfig()
        self.chord_params = chord_params or ChordInferenceParams()
        self.stats = DatasetStats()

    @staticmethod
    def list_files(input_dir: str) -> List[str]:
        root = Path(input_dir)
        if not root.is_dir():
            raise DatasetError(f"Input directory not found: {input_dir}")
        return sorted(str(p) for p in root.rglob("*")
                      if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES)

    def _file_results(self, files: List[str]) -> Iterable[FileResult]:
        configs = [self.config] * len(files)
        params = [self.chord_params] * len(files)
        if self.config.workers <= 1:
            yield from map(_process_file, files, configs, params)
            return
        with ProcessPoolExecutor(max_workers=self.config.workers) as executor:
            yield from executor.map(_process_file, files, configs, params)

    def collect(self, input_dir: str) -> List[Measure]:
        """Parse every file in sorted order and merge the per-file results"""
        files = self.list_files(input_dir)
        logger.info(f"Ingesting {len(files)} MIDI files from {input_dir}")
        self.stats = DatasetStats()
        measures: List[Measure] = []
        results = tqdm(self._file_results(files), total=len(files), desc="Ingesting",
                       disable=not self.config.progress)
        for result in results:
            if result.error:
                logger.warning(f"Skipping {result.path}: {result.error}")
            self.stats.merge(result.stats)
            measures.extend(result.measures)
        return measures

    def build(self, input_dir: str, output_path: str, seed: int = 0,
              stats_path: Optional[str] = None) -> DatasetStats:
        measures = self.collect(input_dir)
        unique, self.stats = dedupe(measures, self.stats)
        if self.config.shuffle:
            order = np.random.default_rng(seed).permutation(len(unique))
            unique = [unique[i] for i in order]

        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8", newline="\n") as f:
            for measure in unique:
                f.write(measure.to_json_line() + "\n")

        if not self.stats.is_conserved():
            raise DatasetError(f"Dataset statistics do not balance: {self.stats}")
        if stats_path:
            with open(stats_path, "w", encoding="utf-8") as f:
                json.dump(asdict(self.stats), f, indent=2, sort_keys=True)

        logger.info(f"Dataset complete: {self.stats.retained} measures retained from "
                    f"{self.stats.measures_seen} seen ({self.stats.files_failed} files failed)")
        return self.stats


def build_dataset(input_dir: str, output_path: str, config: Optional[PipelineConfig] = None,
                  seed: int = 0, stats_path: Optional[str] = None,
                  chord_params: Optional[ChordInferenceParams] = None) -> DatasetStats:
    """Build the JSON-lines dataset for every MIDI file under input_dir"""
    return CorpusBuilder(config, chord_params).build(input_dir, output_path, seed, stats_path)


def load_dataset(path: str, validate: bool = True) -> List[Measure]:
    """Read a JSON-lines dataset; every record is validated unless told otherwise"""
    measures = []
    with open(path, "r", encoding="utf-8") as f:
        for line_num, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                measure = Measure.from_json(json.loads(line))
                if validate:
                    validate_measure(measure)
            except (json.JSONDecodeError, ValueError) as e:
                raise DatasetError(f"{path}:{line_num}: {e}") from e
            measures.append(measure)
    logger.info(f"Loaded {len(measures)} measures from {path}")
    return measures


def summarize_dataset(measures: Sequence[Measure]) -> Dict[str, pd.DataFrame]:
    """Per-measure and per-track tables for the dataset report"""
    track_rows = []
    measure_rows = []
    for index, measure in enumerate(measures):
        present = [t for t in measure.tracks if track_program(t) is not None]
        measure_rows.append({"measure": index, "tracks": len(present),
                             "chord_1": chord_name(measure.chords[0]),
                             "chord_2": chord_name(measure.chords[1])})
        for tokens in present:
            track_rows.append({"measure": index, "program": track_program(tokens),
                               "tokens": len(tokens)})
    measures_df = pd.DataFrame(measure_rows, columns=["measure", "tracks", "chord_1", "chord_2"])
    tracks_df = pd.DataFrame(track_rows, columns=["measure", "program", "tokens"])
    chords = pd.concat([measures_df["chord_1"], measures_df["chord_2"]])

    summary = pd.DataFrame([
        {"metric": "measures", "value": len(measures_df)},
        {"metric": "tracks", "value": len(tracks_df)},
        {"metric": "mean tracks per measure",
         "value": round(float(measures_df["tracks"].mean()), 3) if len(measures_df) else 0.0},
        {"metric": "mean tokens per track",
         "value": round(float(tracks_df["tokens"].mean()), 3) if len(tracks_df) else 0.0},
        {"metric": "max tokens per track",
         "value": int(tracks_df["tokens"].max()) if len(tracks_df) else 0},
    ])
    programs = (tracks_df["program"].value_counts().sort_index()
                .rename_axis("program").reset_index(name="count"))
    chord_counts = chords.value_counts().rename_axis("chord").reset_index(name="count")
    return {"summary": summary, "programs": programs, "chords": chord_counts}


def format_summary(tables: Dict[str, pd.DataFrame]) -> str:
    """Plain-text report of summarize_dataset tables"""
    parts = []
    for title, frame in tables.items():
        parts.append(f"== {title} ==")
        parts.append(tabulate(frame, headers="keys", tablefmt="simple", showindex=False))
    return "\n".join(parts)


def main():
    """Example usage of the corpus pipeline"""
    logger.info("Measure Corpus Pipeline")
    logger.info("Key features:")
    logger.info("- 4-quarter-note measure splitting on a 24-steps-per-quarter grid")
    logger.info("- Per-segment chord inference for conditioning")
    logger.info("- Track count and event count filters")
    logger.info("- Serialization-level deduplication")
    logger.info("- Transposition augmentation within a minor third")


if __name__ == "__main__":
    main()
