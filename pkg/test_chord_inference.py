#!/usr/bin/env python3
"""
Tests for the key/chord harmony model and its Viterbi decoder.
"""

import itertools
import math

import numpy as np
import pytest

from chord_inference import (NO_CHORD, NUM_CHORDS, NUM_STATES, ChordInferenceError,
                             ChordInferenceParams, HarmonyState, chord_index, chord_name,
                             chord_template, chord_tones, infer_chords, key_membership_prob,
                             log_initial_distribution, log_transition_matrix, observation_matrix,
                             parse_chord_name, pitch_class_frames, project_to_triads,
                             transition_logprob, transpose_chord, viterbi, viterbi_path)
from conftest import note, triad_measure
from event_codec import DRUM_PROGRAM, DecodedTrack

PARAMS = ChordInferenceParams()
C_MAJOR = chord_index(0, 0)


class TestChordVocabulary:
    def test_indices_and_tones(self):
        assert NUM_CHORDS == 97 and NUM_STATES == 1164
        assert C_MAJOR == 1
        assert chord_tones(C_MAJOR) == (0, 4, 7)
        assert chord_tones(chord_index(4, 7)) == (2, 5, 7, 11)
        assert chord_tones(NO_CHORD) == ()

    def test_templates_are_unit_vectors(self):
        for chord in range(NUM_CHORDS):
            assert np.linalg.norm(chord_template(chord)) == pytest.approx(1.0)

    def test_names(self):
        assert chord_name(C_MAJOR) == "C"
        assert chord_name(NO_CHORD) == "N.C."
        assert parse_chord_name("Bbm") == chord_index(1, 10)
        assert chord_name(parse_chord_name("Bbm")) == "A#m"
        assert parse_chord_name("F#o") == chord_index(3, 6)
        for chord in range(NUM_CHORDS):
            assert parse_chord_name(chord_name(chord)) == chord
        with pytest.raises(ChordInferenceError):
            parse_chord_name("H")
        with pytest.raises(ChordInferenceError):
            parse_chord_name("Csus4")

    def test_projection_and_transposition(self):
        assert project_to_triads(parse_chord_name("G7")) == chord_index(0, 7)
        assert project_to_triads(parse_chord_name("Bm7b5")) == chord_index(3, 11)
        assert project_to_triads(NO_CHORD) == NO_CHORD
        assert all(0 <= project_to_triads(c) < 49 for c in range(NUM_CHORDS))
        assert transpose_chord(chord_index(0, 7), 5) == C_MAJOR
        assert transpose_chord(NO_CHORD, 3) == NO_CHORD

    def test_invalid_params(self):
        with pytest.raises(ChordInferenceError):
            ChordInferenceParams(gamma=0.0)
        with pytest.raises(ChordInferenceError):
            ChordInferenceParams(kappa=-1.0)
        with pytest.raises(ChordInferenceError):
            ChordInferenceParams(frames_per_measure=5)


class TestTransitionModel:
    def test_spot_values(self):
        c_in_c = HarmonyState(0, C_MAJOR)
        assert math.exp(transition_logprob(c_in_c, c_in_c)) == pytest.approx(0.4995, abs=1e-12)
        assert key_membership_prob(c_in_c) == pytest.approx(0.970299, abs=1e-12)
        # D major has one tone (F#) outside the C major scale
        assert key_membership_prob(HarmonyState(0, chord_index(0, 2))) == pytest.approx(0.029403, abs=1e-12)

    def test_matrix_matches_scalar_function(self):
        log_trans = log_transition_matrix(PARAMS)
        rng = np.random.default_rng(0)
        for i, j in rng.integers(0, NUM_STATES, size=(200, 2)):
            expected = transition_logprob(HarmonyState.from_index(i), HarmonyState.from_index(j))
            assert log_trans[i, j] == pytest.approx(expected, abs=1e-12)

    def test_within_key_chord_changes_share_gamma(self):
        trans = np.exp(log_transition_matrix(PARAMS))
        for key in (0, 7):
            block = trans[key * NUM_CHORDS:(key + 1) * NUM_CHORDS, key * NUM_CHORDS:(key + 1) * NUM_CHORDS]
            off_diagonal = block.sum(axis=1) - np.diag(block)
            np.testing.assert_allclose(off_diagonal, PARAMS.gamma * (1 - PARAMS.rho), atol=1e-12)

    def test_rows_approximately_normalized(self):
        row_sums = np.exp(log_transition_matrix(PARAMS)).sum(axis=1)
        assert np.all(np.abs(row_sums - 1.0) <= 0.15)

    def test_initial_distribution(self):
        init = np.exp(log_initial_distribution(PARAMS))
        assert init.sum() == pytest.approx(1.0)
        per_key = init.reshape(12, NUM_CHORDS).sum(axis=1)
        np.testing.assert_allclose(per_key, 1 / 12)

    def test_matrices_are_read_only(self):
        with pytest.raises(ValueError):
            log_transition_matrix(PARAMS)[0, 0] = 0.0

    def test_key_change_value(self):
        value = math.exp(transition_logprob(HarmonyState(0, C_MAJOR), HarmonyState(5, C_MAJOR)))
        assert value == pytest.approx(0.001 / 11 * 0.99 ** 3, abs=1e-12)


class TestViterbi:
    def test_matches_exhaustive_search(self):
        """Restricted to 2 keys x 10 chords so every path can be enumerated"""
        rng = np.random.default_rng(2024)
        states = [HarmonyState(k, c).index for k in (0, 5) for c in range(10)]
        log_trans = log_transition_matrix(PARAMS)[np.ix_(states, states)]
        log_init = log_initial_distribution(PARAMS)[states]
        for _ in range(200):
            num_frames = int(rng.integers(1, 4))
            frames = rng.random((num_frames, 12))
            frames /= np.linalg.norm(frames, axis=1, keepdims=True)
            log_obs = observation_matrix(frames, PARAMS)[:, states]

            def score(path):
                total = log_init[path[0]] + log_obs[0, path[0]]
                for t in range(1, num_frames):
                    total += log_trans[path[t - 1], path[t]] + log_obs[t, path[t]]
                return total

            best = max(score(p) for p in itertools.product(range(len(states)), repeat=num_frames))
            path, value = viterbi_path(log_init, log_trans, log_obs)
            assert value == pytest.approx(best, abs=1e-9)
            assert score(path) == pytest.approx(best, abs=1e-9)

    def test_empty_input(self):
        assert viterbi([]) == []
        assert infer_chords([]).chords == []

    def test_sustained_major_triad(self):
        tracks = [DecodedTrack(0, [note(60, 0, 96), note(64, 0, 96), note(67, 0, 96)])]
        result = infer_chords([tracks])
        assert result.chords == [(C_MAJOR, C_MAJOR)]
        assert not result.discarded

    def test_progression(self):
        measures = [triad_measure(root, drums=True) for root in (0, 5, 7, 0)]
        result = infer_chords(measures)
        roots = [chord_index(0, r) for r in (0, 5, 7, 0)]
        assert result.chords == [(r, r) for r in roots]
        assert all(keys == (0, 0) for keys in result.keys)

    def test_long_segment_discarded(self):
        params = ChordInferenceParams(max_measures=2)
        result = infer_chords([triad_measure(0)] * 3, params)
        assert result.discarded and result.chords == []
        assert "2" in result.reason

    def test_silence_decodes_to_no_chord(self):
        states = viterbi(np.zeros((3, 12)))
        assert [s.chord for s in states] == [NO_CHORD] * 3

    @pytest.mark.parametrize("shift", [1, 3, 7])
    def test_transposed_progression(self, shift):
        measures = [triad_measure(root + shift, drums=True) for root in (0, 5, 7, 0)]
        result = infer_chords(measures)
        roots = [transpose_chord(chord_index(0, r), shift) for r in (0, 5, 7, 0)]
        assert result.chords == [(r, r) for r in roots]
        assert all(keys == (shift, shift) for keys in result.keys)


class TestPitchClassFrames:
    def test_frames_are_normalized_and_split(self):
        tracks = [DecodedTrack(0, [note(60, 0, 96), note(62, 48, 48)])]
        frames = pitch_class_frames(tracks)
        assert frames.shape == (2, 12)
        assert frames[0, 0] == pytest.approx(1.0)
        np.testing.assert_allclose(frames[1, [0, 2]], [1 / math.sqrt(2)] * 2)

    def test_drums_and_silence(self):
        tracks = [DecodedTrack(DRUM_PROGRAM, [note(36, 0, 96)]), DecodedTrack(0, [note(67, 0, 24)])]
        frames = pitch_class_frames(tracks)
        assert frames[0, 7] == pytest.approx(1.0)
        assert frames[0, 0] == 0.0
        assert not frames[1].any()
