# test_plotting.py - Pianoroll rendering from note lists, ECP sequences and MIDI files
import os

import pytest

from ecp_codec import PerformedNote, encode
from helpers import steady_piece
from midi_io import write_performance_midi
from plotting import plot_pianoroll


def test_note_list_rectangles(tmp_path):
    notes = [PerformedNote(60, 0.0, 0.5, 80), PerformedNote(64, 0.5, 0.25, 100)]
    roll = plot_pianoroll(notes, str(tmp_path / "plots" / "notes.png"), title="two notes")
    assert os.path.getsize(roll.path) > 0
    assert roll.rectangles == [(0.0, 60, 0.5, 80), (0.5, 64, 0.25, 100)]
    assert roll.beat_lines == []


def test_sequence_draws_one_line_per_beat(tmp_path, spec):
    seq = encode(None, steady_piece(8), spec)
    roll = plot_pianoroll(seq, str(tmp_path / "seq.png"), spec)
    assert len(roll.beat_lines) == 4
    assert roll.beat_lines == pytest.approx([0.0, 0.5, 1.0, 1.5], abs=0.05)
    assert sorted(r[1] for r in roll.rectangles) == list(range(60, 68))


def test_score_only_sequence_uses_nominal_tempo(tmp_path, spec):
    seq = encode([a.score for a in steady_piece(4)], None, spec)
    roll = plot_pianoroll(seq, str(tmp_path / "score.png"), spec)
    assert roll.beat_lines == pytest.approx([0.0, 0.5])
    assert [r[0] for r in roll.rectangles] == pytest.approx([0.0, 0.25, 0.5, 0.75])


def test_midi_file_source(tmp_path):
    path = str(tmp_path / "piece.mid")
    write_performance_midi([PerformedNote(70, 0.0, 1.0, 90)], path)
    roll = plot_pianoroll(path, str(tmp_path / "piece.png"))
    assert [r[1] for r in roll.rectangles] == [70]


def test_identical_input_gives_identical_bytes(tmp_path):
    notes = [PerformedNote(60 + i, 0.25 * i, 0.25, 64) for i in range(8)]
    a = plot_pianoroll(notes, str(tmp_path / "a.png"))
    b = plot_pianoroll(notes, str(tmp_path / "b.png"))
    with open(a.path, "rb") as fa, open(b.path, "rb") as fb:
        assert fa.read() == fb.read()


def test_empty_piece_still_writes_an_image(tmp_path):
    roll = plot_pianoroll([], str(tmp_path / "empty.png"))
    assert os.path.exists(roll.path)
    assert roll.rectangles == []
