#!/usr/bin/env python3
"""
Tests for pianoroll rendering in SVG and plain-text form.
"""

import pytest

from conftest import mini_corpus_measures, note, triad_measure
from event_codec import DRUM_PROGRAM, encode_measure
from render import (DRUM_FAMILY, RenderError, RenderFormat, RenderOptions, instrument_family,
                    parse_text_grid, pianoroll_notes, render_measures, render_text)

TEXT = RenderOptions(format="text")


def as_measures(decoded_measures):
    return [encode_measure([(t.program, t.notes) for t in tracks]) for tracks in decoded_measures]


class TestFamilies:
    def test_instrument_family(self):
        assert instrument_family(0) == 0
        assert instrument_family(33) == 4
        assert instrument_family(127) == 15
        assert instrument_family(DRUM_PROGRAM) == DRUM_FAMILY

    def test_notes_on_global_axis(self):
        notes = pianoroll_notes(as_measures(mini_corpus_measures(1)), RenderOptions())
        assert max(n.onset for n in notes) >= 3 * 96
        assert {n.family for n in notes} == {6, 4, DRUM_FAMILY}


class TestTextGrid:
    def test_layout(self):
        text = render_text(as_measures([triad_measure(0)]), TEXT).decode("utf-8")
        lines = text.splitlines()
        assert lines[0] == "# pianoroll rows=128 steps=96 measures=1"
        assert len(lines) == 129
        row_60 = next(line for line in lines if line.startswith("060 |"))
        assert row_60 == "060 |A" + "a" * 95
        row_36 = next(line for line in lines if line.startswith("036 |"))
        assert row_36 == "036 |" + ("E" + "e" * 23) * 4
        assert lines[1].startswith("127 |") and lines[-1].startswith("000 |")

    def test_parse_recovers_notes(self):
        measures = as_measures(mini_corpus_measures(3))
        expected = sorted((n.pitch, n.onset, n.duration, n.family)
                          for n in pianoroll_notes(measures, TEXT))
        assert parse_text_grid(render_text(measures, TEXT)) == expected

    def test_colliding_notes_get_extra_lines(self):
        measures = as_measures([triad_measure(0, drums=True)])
        text = render_text(measures, TEXT).decode("utf-8")
        assert sum(1 for line in text.splitlines() if line.startswith("036 |")) == 2
        notes = parse_text_grid(text.encode("utf-8"))
        assert (36, 0, 6, DRUM_FAMILY) in notes and (36, 0, 24, 4) in notes

    def test_strip_options(self):
        measures = as_measures([triad_measure(0, drums=True)])
        options = RenderOptions(format="text", strip_drums=True, strip_octaves=True)
        text = render_text(measures, options).decode("utf-8")
        lines = text.splitlines()
        assert lines[0] == "# pianoroll rows=12 steps=96 measures=1"
        assert "Q" not in text
        notes = parse_text_grid(text.encode("utf-8"))
        assert {pitch for pitch, _, _, _ in notes} == {0, 4, 7}

    def test_malformed_grid(self):
        with pytest.raises(RenderError):
            parse_text_grid(b"60 |A")
        with pytest.raises(RenderError):
            parse_text_grid(b"060 |Ab")
        with pytest.raises(RenderError):
            parse_text_grid(b"060 |.aa")

    def test_deterministic(self):
        measures = as_measures(mini_corpus_measures(2))
        assert render_measures(measures, TEXT) == render_measures(measures, TEXT)


class TestSvg:
    def test_svg_output(self):
        measures = as_measures(mini_corpus_measures(1))
        data = render_measures(measures)
        assert data.lstrip().startswith(b"<?xml")
        assert b"<svg" in data

    def test_svg_is_byte_identical(self):
        measures = as_measures(mini_corpus_measures(0))
        options = RenderOptions(strip_octaves=True)
        assert render_measures(measures, options) == render_measures(measures, options)

    def test_empty_measure(self):
        measure = encode_measure([(0, [note(60, 0, 1)])])
        assert b"<svg" in render_measures([measure])

    def test_unknown_format(self):
        assert RenderOptions(format="text").render_format == RenderFormat.TEXT
        with pytest.raises(RenderError):
            render_measures([], RenderOptions(format="png"))
