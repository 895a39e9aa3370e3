#!/usr/bin/env python3
"""
Shared test fixtures: deterministic note generators, the bundled mini corpus
(written with write_smf, so no binary fixtures live in the tree) and small
model configurations.
"""

from pathlib import Path
from typing import List

import numpy as np
import pytest

from event_codec import (DRUM_PROGRAM, STEPS_PER_MEASURE, DecodedTrack, Measure,
                         QuantizedNote, encode_measure)
from smf_io import write_smf
from vae_core import ModelConfig, TrainConfig

MINI_CORPUS_FILES = 10
MAJOR_TRIAD = (0, 4, 7)


def note(pitch: int, onset: int, duration: int, velocity_bin: int = 4) -> QuantizedNote:
    return QuantizedNote(pitch, onset, duration, velocity_bin)


def triad_measure(root: int, program: int = 0, bass_program: int = 33,
                  drums: bool = False, velocity_bin: int = 4) -> List[DecodedTrack]:
    """A held major triad, a bass line on the root and optional quarter-note drums"""
    chord = [note(60 + (root + i) % 12, 0, 96, velocity_bin) for i in MAJOR_TRIAD]
    bass = [note(36 + root % 12, beat * 24, 24, velocity_bin) for beat in range(4)]
    tracks = [DecodedTrack(program, chord), DecodedTrack(bass_program, bass)]
    if drums:
        tracks.append(DecodedTrack(DRUM_PROGRAM, [note(36, b * 24, 6) for b in range(4)]))
    return tracks


def mini_corpus_measures(index: int) -> List[List[DecodedTrack]]:
    """Four measures of I-IV-V-I in a key that depends on the file index"""
    key = (index * 5) % 12
    program = (0, 48, 24, 4)[index % 4]
    return [triad_measure(key + offset, program=program, drums=bool(index % 2),
                          velocity_bin=3 + index % 4)
            for offset in (0, 5, 7, 0)]


def random_track_notes(rng: np.random.Generator, max_notes: int = 6) -> List[QuantizedNote]:
    """Random notes with no two overlapping notes of the same pitch"""
    notes: List[QuantizedNote] = []
    for _ in range(int(rng.integers(1, max_notes + 1))):
        pitch = int(rng.integers(0, 128))
        onset = int(rng.integers(0, STEPS_PER_MEASURE))
        duration = int(rng.integers(1, STEPS_PER_MEASURE - onset + 1))
        candidate = note(pitch, onset, duration, int(rng.integers(0, 8)))
        if all(n.pitch != pitch or n.offset <= onset or candidate.offset <= n.onset for n in notes):
            notes.append(candidate)
    return sorted(notes, key=lambda n: (n.onset, n.pitch, n.duration))


def random_measure(rng: np.random.Generator, min_tracks: int = 1, max_tracks: int = 8) -> Measure:
    count = int(rng.integers(min_tracks, max_tracks + 1))
    tracks = [(int(rng.integers(0, 129)), random_track_notes(rng)) for _ in range(count)]
    chords = tuple(int(c) for c in rng.integers(0, 49, size=2))
    return encode_measure(tracks, chords)


@pytest.fixture(scope="session")
def mini_corpus_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("mini_corpus")
    for index in range(MINI_CORPUS_FILES):
        (root / f"song_{index:02d}.mid").write_bytes(write_smf(mini_corpus_measures(index)))
    return root


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Gradient-check scale: latent 4, hidden 8, 2 tracks of up to 6 tokens"""
    return ModelConfig(latent_dim=4, enc_hidden=8, dec_hidden=8, dec_layers=1,
                       num_tracks=2, max_track_len=6, free_bits=0.0, seed=7)


@pytest.fixture
def small_config() -> ModelConfig:
    return ModelConfig(latent_dim=8, enc_hidden=16, dec_hidden=16, seed=3)


@pytest.fixture
def desk_config() -> ModelConfig:
    return ModelConfig(seed=11)


@pytest.fixture
def quick_train_config() -> TrainConfig:
    return TrainConfig(batch_size=2, max_steps=5, log_every=1, checkpoint_every=100,
                       augment=False, seed=5)
