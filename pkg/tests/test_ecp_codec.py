# test_ecp_codec.py - Quantization tables, encoding, grammar and decoding of ECP sequences
import logging

import numpy as np
import pytest

from config import QuantizationConfig
from ecp_codec import (
    BEAT, BOS, EOS, IGNORE, METRIC, NOTE, PERF_FIELDS, AlignedNote, CompoundToken, ECPSequence, ExpressiveParams,
    GrammarError, GrammarState, PerformedNote, ScoreNote, TempoEstimationError, bins_from_ids,
    build_quantization_spec, compute_expressive_params, decode_performance, decode_score, dequantize_ids,
    dequantize_params, encode, ids_from_bins, quantize_params, read_token_dump, rebase_to_first_beat,
    sequence_from_ids, validate_grammar, write_token_dump,
)
from helpers import steady_piece


def note_token(pitch, duration_id, perf=(IGNORE,) * 4):
    return CompoundToken(NOTE, IGNORE, pitch - 20, duration_id, *perf)


def metric(position):
    return CompoundToken(METRIC, position, IGNORE, IGNORE, IGNORE, IGNORE, IGNORE, IGNORE)


def sentinel(family):
    return CompoundToken(family, *([IGNORE] * 7))


def score_only(tokens):
    return ECPSequence(list(tokens), np.zeros((len(tokens), 4)), score_only=True)


def rules(seq, spec):
    return {d.rule for d in validate_grammar(seq, spec)}


# Quantization

def test_vocab_sizes(spec):
    assert spec.score_vocab_sizes == (5, 25, 89, 52)
    assert spec.perf_vocab_sizes == (162, 33, 42, 82)
    assert spec.timing_zero_bin == 20


def test_quantize_reference_values(spec):
    bins = quantize_params(ExpressiveParams(beat_period=1.0, velocity=64, timing=0.0, articulation=1.0), spec)
    assert bins == (80, 16, 20, 40)
    assert ids_from_bins(bins) == (81, 17, 21, 41)
    assert bins_from_ids((81, 17, 21, 41)) == bins


def test_dequantize_representatives(spec):
    params = dequantize_params((80, 16, 20, 40), spec)
    assert params.beat_period == pytest.approx(1.0)
    assert params.velocity == 66
    assert params.timing == 0.0
    assert params.articulation == pytest.approx(1.0)


def test_timing_sign_and_zero_bin(spec):
    zero = spec.timing_zero_bin
    assert quantize_params(ExpressiveParams(0.5, 64, 0.001, 1.0), spec)[2] == zero
    assert quantize_params(ExpressiveParams(0.5, 64, 0.25, 1.0), spec)[2] > zero
    assert quantize_params(ExpressiveParams(0.5, 64, -0.25, 1.0), spec)[2] < zero
    ahead = dequantize_params((80, 16, zero + 5, 40), spec).timing
    behind = dequantize_params((80, 16, zero - 5, 40), spec).timing
    assert ahead == pytest.approx(-behind)
    assert ahead > 0


def test_out_of_range_values_clamp(spec):
    assert quantize_params(ExpressiveParams(100.0, 200, 9.0, 50.0), spec) == (160, 31, 40, 80)
    assert quantize_params(ExpressiveParams(0.001, 0, -9.0, 0.001), spec) == (0, 0, 0, 0)


def test_nan_is_rejected(spec):
    with pytest.raises(ValueError):
        quantize_params(ExpressiveParams(float("nan"), 64, 0.0, 1.0), spec)


def test_ignore_has_no_bin():
    with pytest.raises(ValueError):
        bins_from_ids((IGNORE, 17, 21, 41))


def test_dequantize_rejects_unknown_bin(spec):
    with pytest.raises(ValueError):
        dequantize_params((161, 16, 20, 40), spec)


def test_fingerprint_tracks_tables(spec):
    assert build_quantization_spec(QuantizationConfig()).fingerprint() == spec.fingerprint()
    assert build_quantization_spec(QuantizationConfig(velocity_bins=16)).fingerprint() != spec.fingerprint()


# Expressive parameters

def test_steady_performance_parameters():
    notes = steady_piece(4, step_beats=1.0, beat_period=0.5, velocity=70)
    params = compute_expressive_params(notes)
    for p in params:
        assert p.beat_period == pytest.approx(0.5)
        assert p.velocity == 70
        assert p.timing == pytest.approx(0.0, abs=1e-12)
        assert p.articulation == pytest.approx(0.5)


def test_chord_members_share_beat_period():
    notes = [
        AlignedNote(ScoreNote("a", 60, 0.0, 1.0), PerformedNote(60, 0.00, 0.4, 60)),
        AlignedNote(ScoreNote("b", 64, 0.0, 1.0), PerformedNote(64, 0.02, 0.4, 60)),
        AlignedNote(ScoreNote("c", 67, 1.0, 1.0), PerformedNote(67, 0.51, 0.4, 60)),
    ]
    params = compute_expressive_params(notes)
    assert params[0].beat_period == params[1].beat_period == pytest.approx(0.51)
    # the first played member is the group reference
    assert params[0].timing == pytest.approx(0.0)
    assert params[1].timing == pytest.approx(-0.02 / 0.51)


def test_chord_beat_period_comes_from_first_played_member(caplog):
    notes = [
        AlignedNote(ScoreNote("a", 60, 0.0, 1.0), PerformedNote(60, 0.0, 0.4, 60)),
        AlignedNote(ScoreNote("b", 64, 1.0, 1.0), PerformedNote(64, 0.5, 0.4, 60)),
        AlignedNote(ScoreNote("c", 67, 1.0, 1.0), PerformedNote(67, 0.6, 0.4, 60)),
    ]
    with caplog.at_level(logging.WARNING, logger="ecp_codec"):
        params = compute_expressive_params(notes)
    assert [p.beat_period for p in params] == pytest.approx([0.5, 0.5, 0.5])
    assert params[1].timing == pytest.approx(0.0)
    assert params[2].timing == pytest.approx(-0.2)
    # a small spread still warns
    assert any("spread 0.100s" in r.getMessage() for r in caplog.records)


def test_single_onset_cannot_give_a_tempo():
    notes = [AlignedNote(ScoreNote("a", 60, 0.0, 1.0), PerformedNote(60, 0.0, 0.4, 60))]
    with pytest.raises(TempoEstimationError):
        compute_expressive_params(notes)


# Encoding

def test_score_only_encoding_layout(spec):
    seq = encode([ScoreNote("a", 60, 0.0, 1.0), ScoreNote("b", 62, 0.5, 0.5)], None, spec)
    assert seq.score_only
    assert seq.tokens == [
        sentinel(BOS), metric(BEAT), note_token(60, 24), metric(13), note_token(62, 12), sentinel(EOS),
    ]
    assert validate_grammar(seq, spec) == []


def test_empty_beats_still_get_markers(spec):
    seq = encode([ScoreNote("a", 60, 2.0, 1.0)], None, spec)
    families = [(t.family, t.beat_position) for t in seq.tokens]
    assert families == [(BOS, 0), (METRIC, BEAT), (METRIC, BEAT), (METRIC, BEAT), (NOTE, 0), (EOS, 0)]


def test_simultaneous_notes_ascend_by_pitch(spec):
    seq = encode([ScoreNote("g", 67, 0.0, 1.0), ScoreNote("c", 60, 0.0, 1.0), ScoreNote("e", 64, 0.0, 1.0)],
                 None, spec)
    assert [t.pitch + 20 for t in seq.tokens if t.family == NOTE] == [60, 64, 67]
    assert sum(1 for t in seq.tokens if t.family == METRIC) == 1


def test_empty_score_is_bos_eos(spec):
    seq = encode([], None, spec)
    assert seq.tokens == [sentinel(BOS), sentinel(EOS)]
    assert validate_grammar(seq, spec) == []


def test_out_of_range_pitches_are_dropped(spec):
    seq = encode([ScoreNote("low", 12, 0.0, 1.0), ScoreNote("ok", 60, 0.0, 1.0)], None, spec)
    assert seq.note_count == 1


@pytest.mark.parametrize("beats,snapped", [(1.1, 26 / 24), (10.0, 5.0), (0.01, 1 / 24)])
def test_duration_snaps_to_table(spec, beats, snapped):
    seq = encode([ScoreNote("a", 60, 0.0, beats)], None, spec)
    assert decode_score(seq, spec)[0].duration == pytest.approx(snapped)


def test_score_round_trip(spec):
    score = [ScoreNote(f"n{i}", 60 + i, i * 0.25, 0.5) for i in range(12)]
    decoded = decode_score(encode(score, None, spec), spec)
    assert decoded == score
    assert [n.id for n in decoded] == [f"n{i}" for i in range(12)]


def test_aligned_round_trip_is_close(spec):
    notes = steady_piece(16)
    seq = encode(None, notes, spec)
    assert not seq.score_only
    assert validate_grammar(seq, spec) == []
    assert seq.pv.shape == (len(seq), 4)
    performed = decode_performance(seq, spec)
    assert [n.pitch for n in performed] == [a.performed.pitch for a in notes]
    for got, want in zip(performed, (a.performed for a in notes)):
        assert got.onset == pytest.approx(want.onset, abs=0.01)
        assert got.duration == pytest.approx(want.duration, abs=0.01)
        assert got.velocity == 66


def test_long_steady_performance_keeps_timing_near_zero(spec):
    # just above a bin edge, so every beat period rounds the same way
    beat_period = float(spec.beat_period_edges[60]) * 1.0005
    notes = steady_piece(256, step_beats=1.0, beat_period=beat_period)
    seq = encode(None, notes, spec)
    note_rows = [i for i, t in enumerate(seq.tokens) if t.family == NOTE]
    timing_ids = [seq.tokens[i].timing for i in note_rows]
    assert max(abs(t - (spec.timing_zero_bin + 1)) for t in timing_ids) <= 2
    assert np.abs(seq.pv[note_rows, 2]).max() < 0.02

    performed = decode_performance(seq, spec)
    errors = [abs(got.onset - want.performed.onset) for got, want in zip(performed, notes)]
    assert max(errors) < 0.006


def rubato_piece(rng, n_groups):
    """Score on a quarter-beat grid played with drifting tempo, jitter and rolled chords"""
    notes = []
    score_onset, perf_onset = 0.0, 0.1
    beat_period = rng.uniform(0.35, 0.8)
    for g in range(n_groups):
        if g:
            step = float(rng.choice([0.25, 0.5, 1.0]))
            beat_period = float(np.clip(beat_period * np.exp(rng.normal(0.0, 0.05)), 0.25, 1.2))
            score_onset += step
            perf_onset += step * beat_period
        played = perf_onset + rng.normal(0.0, 0.01)
        size = 1 if rng.random() < 0.8 else int(rng.integers(2, 4))
        for k, pitch in enumerate(sorted(rng.choice(np.arange(48, 84), size=size, replace=False))):
            duration = float(rng.choice([0.25, 0.5, 1.0]))
            notes.append(AlignedNote(
                ScoreNote(f"{g}:{k}", int(pitch), score_onset, duration),
                PerformedNote(int(pitch), played + (rng.uniform(0.0, 0.03) if k else 0.0),
                              duration * beat_period * rng.uniform(0.5, 1.1), int(rng.integers(20, 120))),
            ))
    return notes


def test_rubato_round_trip_stays_within_bins(spec):
    rng = np.random.default_rng(7)
    for _ in range(50):
        notes = rubato_piece(rng, int(rng.integers(10, 40)))
        seq = encode(None, notes, spec)
        assert validate_grammar(seq, spec) == []
        performed = decode_performance(seq, spec, token_order=True)
        note_tokens = [t for t in seq.tokens if t.family == NOTE]
        assert len(performed) == len(note_tokens) == len(notes)
        # decoding restarts the clock at the first note
        shift = notes[0].performed.onset - performed[0].onset

        for got, want, token in zip(performed, notes, note_tokens):
            params = dequantize_ids(token[4:], spec)
            b = token.timing - 1
            lo, hi = spec.timing_edges[b], spec.timing_edges[b + 1]
            half_width = max(hi - params.timing, params.timing - lo)
            assert abs(got.onset - (want.performed.onset - shift)) <= half_width * params.beat_period + 1e-9
            assert abs(got.velocity - want.performed.velocity) <= 2
            assert got.pitch == want.score.pitch


@pytest.mark.parametrize("name,values", [
    ("beat_period", np.geomspace(1e-6, 1e6, 400)),
    ("velocity", np.arange(128)),
    ("timing", np.linspace(-5.0, 5.0, 401)),
    ("articulation", np.geomspace(1e-4, 1e4, 400)),
])
def test_quantizer_is_monotone(spec, name, values):
    base = {"beat_period": 0.5, "velocity": 64, "timing": 0.0, "articulation": 1.0}
    column = PERF_FIELDS.index(name)
    cast = int if name == "velocity" else float
    bins = [quantize_params(ExpressiveParams(**{**base, name: cast(v)}), spec)[column] for v in values]
    assert all(a <= b for a, b in zip(bins, bins[1:]))
    assert bins[0] == 0
    assert bins[-1] == spec.perf_vocab_sizes[column] - 2


def test_single_note_uses_default_tempo(spec):
    seq = encode(None, steady_piece(1), spec)
    assert validate_grammar(seq, spec) == []
    performed = decode_performance(seq, spec)
    assert len(performed) == 1


def test_rebase_to_first_beat(spec):
    rebased = rebase_to_first_beat([ScoreNote("a", 60, 4.5, 1.0), ScoreNote("b", 62, 5.0, 1.0)], spec)
    assert [n.onset for n in rebased] == [0.5, 1.0]
    aligned = rebase_to_first_beat(steady_piece(2, start_beat=8.0), spec)
    assert aligned[0].score.onset == 0.0
    assert aligned[0].performed.onset == pytest.approx(4.0)


def test_negative_onset_is_rejected(spec):
    with pytest.raises(ValueError):
        encode([ScoreNote("a", 60, -1.0, 1.0)], None, spec)


# Grammar

def test_note_before_beat(spec):
    seq = score_only([sentinel(BOS), note_token(60, 24), sentinel(EOS)])
    assert "note-before-beat" in rules(seq, spec)


def test_position_must_advance(spec):
    seq = score_only([sentinel(BOS), metric(BEAT), metric(13), note_token(60, 12), metric(5),
                      note_token(62, 12), sentinel(EOS)])
    assert "position-order" in rules(seq, spec)


def test_eos_must_be_last(spec):
    seq = score_only([sentinel(BOS), sentinel(EOS), metric(BEAT), sentinel(EOS)])
    assert "eos-last" in rules(seq, spec)


def test_bos_must_be_first(spec):
    seq = score_only([metric(BEAT), sentinel(EOS)])
    assert "bos-first" in rules(seq, spec)


def test_performance_ids_in_score_only_sequence(spec):
    seq = score_only([sentinel(BOS), metric(BEAT), note_token(60, 24, (81, 17, 21, 41)), sentinel(EOS)])
    assert "perf-ids-forbidden-score-only" in rules(seq, spec)


def test_missing_performance_ids(spec):
    seq = encode([ScoreNote("a", 60, 0.0, 1.0)], None, spec)
    assert "perf-ids-required-on-note" in {d.rule for d in validate_grammar(seq, spec, require_performance=True)}
    with pytest.raises(GrammarError):
        decode_performance(seq, spec)


def test_id_out_of_range(spec):
    seq = score_only([sentinel(BOS), metric(BEAT), CompoundToken(NOTE, 0, 200, 24, 0, 0, 0, 0), sentinel(EOS)])
    assert "id-out-of-range" in rules(seq, spec)


def test_pv_row_on_metric_step(spec):
    seq = encode([ScoreNote("a", 60, 0.0, 1.0)], None, spec)
    seq.pv[1] = 1.0
    assert "pv-mismatch" in rules(seq, spec)


def test_decode_score_reports_diagnostics(spec):
    seq = score_only([sentinel(BOS), note_token(60, 24), sentinel(EOS)])
    with pytest.raises(GrammarError) as info:
        decode_score(seq, spec)
    assert info.value.diagnostics[0].index == 1


def test_grammar_state_masks(spec):
    state = GrammarState(spec, max_length=6, score_only=True)
    assert np.flatnonzero(state.score_mask(0)).tolist() == [BOS]
    state.advance(sentinel(BOS))
    assert np.flatnonzero(state.score_mask(0)).tolist() == [METRIC, EOS]
    assert np.flatnonzero(state.score_mask(1, [METRIC])).tolist() == [BEAT]
    state.advance(metric(BEAT))
    state.advance(metric(13))
    positions = np.flatnonzero(state.score_mask(1, [METRIC])).tolist()
    assert positions == [BEAT] + list(range(14, 25))
    assert np.flatnonzero(state.perf_mask(0, NOTE)).tolist() == [IGNORE]
    assert state.allows(note_token(60, 12))
    state.advance(note_token(60, 12))
    state.advance(note_token(64, 12))
    assert np.flatnonzero(state.score_mask(0)).tolist() == [EOS]
    state.advance(sentinel(EOS))
    assert state.finished


def test_grammar_state_requires_performance_on_notes(spec):
    state = GrammarState(spec, max_length=8)
    assert np.flatnonzero(state.perf_mask(1, NOTE)).tolist() == list(range(1, 33))
    assert np.flatnonzero(state.perf_mask(1, METRIC)).tolist() == [IGNORE]


# Token dumps

def test_token_dump_preserves_ids_and_flags(tmp_path, spec):
    sequences = [encode(None, steady_piece(8), spec), encode([ScoreNote("a", 60, 0.0, 1.0)], None, spec)]
    path = str(tmp_path / "tokens.ecp")
    assert write_token_dump(sequences, path) == 2
    loaded = read_token_dump(path, spec)
    assert [s.score_only for s in loaded] == [False, True]
    for original, parsed in zip(sequences, loaded):
        np.testing.assert_array_equal(original.ids(), parsed.ids())


def test_token_dump_with_explicit_pv(tmp_path, spec):
    seq = encode(None, steady_piece(8), spec)
    path = str(tmp_path / "tokens.ecp")
    write_token_dump([seq], path)
    loaded = read_token_dump(path, spec, pv=seq.pv)
    np.testing.assert_allclose(loaded[0].pv, seq.pv)
    with pytest.raises(ValueError):
        read_token_dump(path, spec, pv=seq.pv[:-1])


def test_sequence_from_ids_rebuilds_pv(spec):
    seq = encode(None, steady_piece(4), spec)
    rebuilt = sequence_from_ids(seq.score_ids(), seq.perf_ids(), spec)
    note_rows = [i for i, t in enumerate(rebuilt.tokens) if t.family == NOTE]
    assert all(rebuilt.pv[i][1] == 66 for i in note_rows)
    assert validate_grammar(rebuilt, spec) == []
