#!/usr/bin/env python3
"""
Tests for latent space operations: prior sampling, slerp, interpolation,
attribute vectors and chord-progression decoding.
"""

from dataclasses import replace

import numpy as np
import pytest
import torch

from chord_inference import chord_index
from conftest import mini_corpus_measures, triad_measure
from event_codec import DRUM_PROGRAM, encode_measure, validate_measure
from latent_ops import (ATTRIBUTE_PREDICATES, AttributeVector, ChordProgression, LatentOpsError,
                        apply_attribute, attribute_vector, decode_progression, encode_mean,
                        interpolate_measures, note_density, pitch_range, sample_prior, slerp,
                        split_by_attribute, strings_only, track_count)
from smf_io import parse_smf
from vae_core import build_model, collate_measures, sample_decode


def as_measure(tracks, chords=(1, 1)):
    return encode_measure([(t.program, t.notes) for t in tracks], chords)


@pytest.fixture
def model(small_config):
    return build_model(small_config)


@pytest.fixture
def measures():
    return [as_measure(tracks) for index in (0, 1, 2) for tracks in mini_corpus_measures(index)]


class TestPrior:
    def test_shapes(self):
        assert sample_prior(16).shape == (16,)
        assert sample_prior(16, num_samples=5).shape == (5, 16)

    def test_seeded(self):
        a = sample_prior(8, torch.Generator().manual_seed(3), 4)
        b = sample_prior(8, torch.Generator().manual_seed(3), 4)
        assert torch.equal(a, b)

    def test_moments(self):
        z = sample_prior(16, torch.Generator().manual_seed(11), 20000).double()
        assert float(z.mean(0).abs().max()) < 0.05
        assert float((z ** 2).sum(1).mean()) == pytest.approx(16.0, abs=0.3)


class TestSlerp:
    def test_geometry(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            z0, z1 = rng.standard_normal(16), rng.standard_normal(16)
            n0, n1 = np.linalg.norm(z0), np.linalg.norm(z1)
            u0, u1 = z0 / n0, z1 / n1
            omega = np.arccos(np.clip(u0 @ u1, -1.0, 1.0))
            for alpha in np.linspace(0.0, 1.0, 11):
                z = slerp(z0, z1, alpha)
                norm = np.linalg.norm(z)
                assert abs(norm - ((1 - alpha) * n0 + alpha * n1)) < 1e-9
                u = z / norm
                assert abs(np.arccos(np.clip(u @ u0, -1.0, 1.0)) - alpha * omega) < 1e-6
                # the path stays in the plane of the two endpoints
                residual = u - (u @ u0) * u0
                orthogonal = u1 - (u1 @ u0) * u0
                orthogonal /= np.linalg.norm(orthogonal)
                assert np.linalg.norm(residual - (residual @ orthogonal) * orthogonal) < 1e-9
            np.testing.assert_allclose(slerp(z0, z1, 0.0), z0, atol=1e-9)
            np.testing.assert_allclose(slerp(z0, z1, 1.0), z1, atol=1e-9)

    def test_parallel_codes_fall_back_to_lerp(self):
        z0 = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(slerp(z0, 3 * z0, 0.5), 2 * z0)
        np.testing.assert_allclose(slerp(z0, -z0, 0.25), 0.5 * z0)

    def test_zero_vector(self):
        with pytest.raises(LatentOpsError):
            slerp(np.zeros(4), np.ones(4), 0.5)

    def test_symmetry_and_unit_sphere(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            z0, z1 = rng.standard_normal(8), rng.standard_normal(8)
            u0, u1 = z0 / np.linalg.norm(z0), z1 / np.linalg.norm(z1)
            for alpha in np.linspace(0.0, 1.0, 9):
                np.testing.assert_allclose(slerp(z0, z1, alpha), slerp(z1, z0, 1.0 - alpha),
                                           atol=1e-9)
                assert np.linalg.norm(slerp(u0, u1, alpha)) == pytest.approx(1.0, abs=1e-9)

    def test_orthonormal_midpoint(self):
        e0, e1 = np.eye(4)[0], np.eye(4)[1]
        np.testing.assert_allclose(slerp(e0, e1, 0.5), (e0 + e1) / np.sqrt(2.0), atol=1e-12)


class TestInterpolation:
    def test_endpoints_and_validity(self, model, measures):
        x0, x1 = measures[0], as_measure(triad_measure(5), (6, 6))
        results = interpolate_measures(model, x0, x1, n_steps=5, temperature=0.0)
        assert len(results) == 5
        for measure in results:
            validate_measure(measure)
        assert results[0].chords == (1, 1) and results[-1].chords == (6, 6)

    def test_greedy_endpoints_match_direct_decode(self, model, measures):
        z0 = encode_mean(model, measures[:1])[0]
        results = interpolate_measures(model, measures[0], measures[1], n_steps=3, temperature=0.0)
        assert results[0] == sample_decode(model, z0, (1, 1), 0.0).measure

    def test_needs_two_steps(self, model, measures):
        with pytest.raises(LatentOpsError):
            interpolate_measures(model, measures[0], measures[1], n_steps=1)


class TestAttributes:
    def test_predicates(self):
        measure = as_measure(triad_measure(0, drums=True))
        assert track_count(measure) == 3.0
        assert pitch_range(measure) == 67 - 36
        assert note_density(measure) == 3 + 4 + 4
        assert strings_only(measure) == 0.0
        strings = as_measure(triad_measure(0, program=48, bass_program=42, drums=True))
        assert strings_only(strings) == 1.0
        assert set(ATTRIBUTE_PREDICATES) == {"pitch_range", "track_count", "strings_only",
                                             "note_density"}

    def test_split_by_median(self, measures):
        with_set, without_set = split_by_attribute(measures, "track_count")
        assert {track_count(m) for m in with_set} == {3.0}
        assert {track_count(m) for m in without_set} == {2.0}
        with pytest.raises(LatentOpsError):
            split_by_attribute(measures, "loudness")

    def test_vector_and_application(self, model, measures):
        with_set, without_set = split_by_attribute(measures, "track_count")
        vector = attribute_vector(model, with_set, without_set, "track_count")
        expected = encode_mean(model, with_set).mean(0) - encode_mean(model, without_set).mean(0)
        np.testing.assert_allclose(vector.v, expected)
        assert (vector.n_with, vector.n_without) == (len(with_set), len(without_set))
        restored = AttributeVector.from_dict(vector.to_dict())
        np.testing.assert_allclose(restored.v, vector.v)
        shifted = apply_attribute(model, measures[0], vector, scale=1.0, temperature=0.0)
        validate_measure(shifted)

    def test_empty_side_rejected(self, model, measures):
        with pytest.raises(LatentOpsError):
            attribute_vector(model, measures, [], "empty")

    def test_vector_antisymmetry(self, model, measures):
        with_set, without_set = split_by_attribute(measures, "track_count")
        forward = attribute_vector(model, with_set, without_set, "track_count")
        backward = attribute_vector(model, without_set, with_set, "track_count")
        np.testing.assert_allclose(backward.v, -forward.v, atol=1e-12)
        same = attribute_vector(model, measures, measures, "same")
        np.testing.assert_allclose(same.v, np.zeros_like(same.v), atol=1e-12)

    def test_zero_scale_reproduces_plain_decode(self, model, measures):
        with_set, without_set = split_by_attribute(measures, "track_count")
        vector = attribute_vector(model, with_set, without_set, "track_count")
        x = measures[4]
        shifted = apply_attribute(model, x, vector, scale=0.0, temperature=0.0)
        assert shifted == sample_decode(model, encode_mean(model, [x])[0], x.chords, 0.0).measure


class TestProgressions:
    def test_parse(self):
        progression = ChordProgression.parse("C,C,F,F,G7,G7,Am,Am")
        assert progression.chords == (1, 1, 6, 6, 8, 8, chord_index(1, 9), chord_index(1, 9))
        assert progression.num_measures == 4
        assert progression.pairs()[1] == (6, 6)

    def test_invalid(self):
        with pytest.raises(LatentOpsError):
            ChordProgression((1, 1, 6))
        with pytest.raises(LatentOpsError):
            ChordProgression((1, 49))

    def test_decode_progression(self, model):
        progression = ChordProgression.parse("C,C,F,F,G,G,C,C")
        z = sample_prior(8, torch.Generator().manual_seed(4))
        result = decode_progression(model, z, progression, temperature=0.0, tempo_bpm=90)
        assert len(result.measures) == 4
        assert result.total_steps == 4 * 96
        assert [m.chords for m in result.measures] == progression.pairs()
        for measure in result.measures:
            validate_measure(measure)
        score = parse_smf(result.midi)
        assert score.timeline.tempos[0][1] == pytest.approx(90.0, abs=1e-3)
        assert all(n.onset_ticks < 4 * 1920 for n in score.notes)

    def test_arc_towards_second_code(self, model):
        generator = torch.Generator().manual_seed(6)
        z0, z1 = sample_prior(8, generator), sample_prior(8, generator)
        result = decode_progression(model, z0, (1, 1, 1, 1), temperature=0.0, z_end=z1)
        assert result.measures[-1] == sample_decode(model, z1.double().numpy(), (1, 1), 0.0).measure

    def test_drums_do_not_affect_strings_predicate(self):
        measure = encode_measure([(DRUM_PROGRAM, triad_measure(0, drums=True)[2].notes)])
        assert strings_only(measure) == 0.0

    def test_chords_steer_a_fixed_code(self, model):
        z = sample_prior(8, torch.Generator().manual_seed(8))
        measure = as_measure(triad_measure(0))
        batch_c = collate_measures([measure], model.config)
        batch_fs = collate_measures([replace(measure, chords=(7, 7))], model.config)
        code = z.to(model.dtype).view(1, -1)
        with torch.no_grad():
            assert not torch.allclose(model.decode_teacher_forced(code, batch_c),
                                      model.decode_teacher_forced(code, batch_fs))
        raw_differs = progression_differs = False
        for seed in range(5):
            c = sample_decode(model, z, (1, 1), 1.0, torch.Generator().manual_seed(seed))
            fs = sample_decode(model, z, (7, 7), 1.0, torch.Generator().manual_seed(seed))
            raw_differs |= c.raw_tracks != fs.raw_tracks
            c_song = decode_progression(model, z, (1, 1, 1, 1), 1.0,
                                        torch.Generator().manual_seed(seed))
            fs_song = decode_progression(model, z, (7, 7, 7, 7), 1.0,
                                         torch.Generator().manual_seed(seed))
            progression_differs |= c_song.measures != fs_song.measures
        assert raw_differs
        assert progression_differs
