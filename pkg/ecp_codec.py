# ecp_codec.py - Expressive compound-token (ECP) codec: quantization, encode/decode, grammar
import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config import QuantizationConfig

logger = logging.getLogger(__name__)

IGNORE = 0

# Family ids
NOTE = 1
METRIC = 2
BOS = 3
EOS = 4
FAMILY_VOCAB = 5

# Beat_Position ids: BEAT doubles as position 0 of a new beat, POS_k = k + 1
BEAT = 1

MIN_PITCH = 21
MAX_PITCH = 108

SCORE_FIELDS = ("family", "beat_position", "pitch", "duration")
PERF_FIELDS = ("beat_period", "velocity", "timing", "articulation")

# Duration table in ticks at 24 ticks per beat: fine for short notes, coarse for long
DURATION_TICKS = tuple(
    list(range(1, 25)) + list(range(26, 49, 2)) + list(range(52, 97, 4)) + [104, 112, 120]
)


class TempoEstimationError(ValueError):
    """Raised when a local tempo curve cannot be estimated from the onsets"""


class SpecMismatchError(ValueError):
    """Raised when an artifact was produced under different quantization tables"""

    def __init__(self, expected: str, actual: str, what: str = "artifact"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} quantization fingerprint {actual} does not match {expected}")


@dataclass(frozen=True)
class Diagnostic:
    index: int
    rule: str
    message: str


class GrammarError(ValueError):
    """Raised by the decoders when a sequence violates the ECP grammar"""

    def __init__(self, diagnostics: List[Diagnostic]):
        self.diagnostics = list(diagnostics)
        first = self.diagnostics[0]
        super().__init__(
            f"grammar violation at index {first.index}: {first.rule} ({first.message})"
            f" [{len(self.diagnostics)} diagnostic(s)]"
        )


@dataclass(frozen=True)
class ScoreNote:
    id: str = field(compare=False)
    pitch: int
    onset: float      # beats
    duration: float   # beats


@dataclass(frozen=True)
class PerformedNote:
    pitch: int
    onset: float      # seconds
    duration: float   # seconds
    velocity: int


@dataclass(frozen=True)
class AlignedNote:
    score: ScoreNote
    performed: PerformedNote

    def __post_init__(self):
        if self.score.pitch != self.performed.pitch:
            raise ValueError(
                f"aligned pitches differ: score {self.score.pitch} vs performed {self.performed.pitch}"
            )


@dataclass(frozen=True)
class ExpressiveParams:
    beat_period: float   # performed seconds per score beat
    velocity: int
    timing: float        # beats, positive when played ahead of the grid
    articulation: float

    def as_row(self) -> Tuple[float, float, float, float]:
        return (float(self.beat_period), float(self.velocity), float(self.timing), float(self.articulation))


class CompoundToken(NamedTuple):
    family: int
    beat_position: int
    pitch: int
    duration: int
    beat_period: int
    velocity: int
    timing: int
    articulation: int


@dataclass(frozen=True, eq=False)
class QuantizationSpec:
    """Bin-edge tables for every quantized ECP field"""
    beat_period_edges: np.ndarray
    timing_edges: np.ndarray
    articulation_edges: np.ndarray
    velocity_bins: int
    duration_table: np.ndarray
    beat_resolution: int
    default_beat_period: float = 0.5
    chord_spread_warn_sec: float = 0.1

    @property
    def velocity_width(self) -> float:
        return 128.0 / self.velocity_bins

    @property
    def timing_zero_bin(self) -> int:
        return (len(self.timing_edges) - 2) // 2

    @property
    def score_vocab_sizes(self) -> Tuple[int, int, int, int]:
        return (
            FAMILY_VOCAB,
            self.beat_resolution + 1,
            MAX_PITCH - MIN_PITCH + 2,
            len(self.duration_table) + 1,
        )

    @property
    def perf_vocab_sizes(self) -> Tuple[int, int, int, int]:
        # bins + IGNORE; an edge array of n + 1 entries holds n bins
        return (
            len(self.beat_period_edges),
            self.velocity_bins + 1,
            len(self.timing_edges),
            len(self.articulation_edges),
        )

    @property
    def vocab_sizes(self) -> Tuple[int, ...]:
        return self.score_vocab_sizes + self.perf_vocab_sizes

    def fingerprint(self) -> str:
        digest = hashlib.md5()
        for arr in (self.beat_period_edges, self.timing_edges, self.articulation_edges, self.duration_table):
            digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        digest.update(f"{self.velocity_bins}:{self.beat_resolution}".encode())
        return digest.hexdigest()


@dataclass
class ECPSequence:
    tokens: List[CompoundToken]
    pv: np.ndarray
    score_only: bool = False

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self) -> np.ndarray:
        if not self.tokens:
            return np.zeros((0, 8), dtype=np.int64)
        return np.asarray([tuple(t) for t in self.tokens], dtype=np.int64)

    def score_ids(self) -> np.ndarray:
        return self.ids()[:, :4]

    def perf_ids(self) -> np.ndarray:
        return self.ids()[:, 4:]

    @property
    def note_count(self) -> int:
        return sum(1 for t in self.tokens if t[0] == NOTE)


@lru_cache(maxsize=1)
def default_spec() -> QuantizationSpec:
    return build_quantization_spec(QuantizationConfig())


def build_quantization_spec(config: Optional[QuantizationConfig] = None) -> QuantizationSpec:
    """Build the bin tables from a QuantizationConfig (raises ConfigurationError on bad ranges)"""
    config = config or QuantizationConfig()
    config.validate()

    def log_edges(lo, hi, bins):
        return np.exp(np.linspace(np.log(lo), np.log(hi), bins + 1))

    # Sign-mirrored magnitudes around a dedicated zero bin [-m0, m0)
    magnitudes = log_edges(config.timing_min, config.timing_max, (config.timing_bins - 1) // 2)
    timing_edges = np.concatenate([-magnitudes[::-1], magnitudes])

    return QuantizationSpec(
        beat_period_edges=log_edges(config.beat_period_min, config.beat_period_max, config.beat_period_bins),
        timing_edges=timing_edges,
        articulation_edges=log_edges(config.articulation_min, config.articulation_max, config.articulation_bins),
        velocity_bins=config.velocity_bins,
        duration_table=np.asarray(DURATION_TICKS, dtype=np.int64),
        beat_resolution=config.beat_resolution,
        default_beat_period=config.default_beat_period,
        chord_spread_warn_sec=config.chord_spread_warn_sec,
    )


# Binning

def _bin(edges: np.ndarray, value: float) -> int:
    if math.isnan(value):
        raise ValueError("cannot quantize NaN")
    idx = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(idx, 0), len(edges) - 2)


def _log_representative(edges: np.ndarray, b: int) -> float:
    return float(np.sqrt(edges[b] * edges[b + 1]))


def _timing_representative(spec: QuantizationSpec, b: int) -> float:
    if b == spec.timing_zero_bin:
        return 0.0
    lo, hi = spec.timing_edges[b], spec.timing_edges[b + 1]
    return float(np.sign(lo + hi) * np.sqrt(lo * hi))


def _check_bin(name: str, b: int, n_bins: int):
    if not 0 <= b < n_bins:
        raise ValueError(f"{name} bin {b} outside [0, {n_bins})")


def quantize_params(p: ExpressiveParams, spec: QuantizationSpec) -> Tuple[int, int, int, int]:
    """Map expressive parameters to 0-based bins; out-of-range values clamp to the end bins"""
    velocity_bin = int(math.floor(float(p.velocity) / spec.velocity_width))
    return (
        _bin(spec.beat_period_edges, float(p.beat_period)),
        min(max(velocity_bin, 0), spec.velocity_bins - 1),
        _bin(spec.timing_edges, float(p.timing)),
        _bin(spec.articulation_edges, float(p.articulation)),
    )


def dequantize_params(bins: Sequence[int], spec: QuantizationSpec) -> ExpressiveParams:
    """Bin representatives: geometric midpoints for log bins, arithmetic midpoint for velocity"""
    bp, vel, timing, art = (int(b) for b in bins)
    _check_bin("beat_period", bp, len(spec.beat_period_edges) - 1)
    _check_bin("velocity", vel, spec.velocity_bins)
    _check_bin("timing", timing, len(spec.timing_edges) - 1)
    _check_bin("articulation", art, len(spec.articulation_edges) - 1)
    width = spec.velocity_width
    return ExpressiveParams(
        beat_period=_log_representative(spec.beat_period_edges, bp),
        velocity=int(math.floor(vel * width + width / 2)),
        timing=_timing_representative(spec, timing),
        articulation=_log_representative(spec.articulation_edges, art),
    )


def ids_from_bins(bins: Sequence[int]) -> Tuple[int, int, int, int]:
    return tuple(int(b) + 1 for b in bins)


def bins_from_ids(ids: Sequence[int]) -> Tuple[int, int, int, int]:
    for name, i in zip(PERF_FIELDS, ids):
        if i == IGNORE:
            raise ValueError(f"{name} id is IGNORE; only NOTE steps carry performance ids")
    return tuple(int(i) - 1 for i in ids)


def dequantize_ids(ids: Sequence[int], spec: QuantizationSpec) -> ExpressiveParams:
    return dequantize_params(bins_from_ids(ids), spec)


# Expressive parameters

def _onset_groups(keys: Sequence) -> List[List[int]]:
    groups: List[List[int]] = []
    previous = None
    for i, key in enumerate(keys):
        if groups and key == previous:
            groups[-1].append(i)
        else:
            if groups and key < previous:
                raise ValueError(f"score onsets must be non-decreasing (index {i})")
            groups.append([i])
        previous = key
    return groups


def _warn_chord_spread(groups: List[List[int]], perf_onsets: Sequence[float], limit: float):
    for g in groups:
        if len(g) < 2:
            continue
        onsets = [perf_onsets[i] for i in g]
        spread = max(onsets) - min(onsets)
        if spread > 0:
            wide = f" (over {limit:.3f}s)" if spread > limit else ""
            logger.warning(f"Chord at note {g[0]} spread {spread:.3f}s in performance{wide}; "
                           f"members inherit the beat period of the first played note")


def _group_references(groups: List[List[int]], perf_onsets: Sequence[float]) -> np.ndarray:
    """Reference performed onset per group: its first played member"""
    return np.array([min(perf_onsets[i] for i in g) for g in groups], dtype=np.float64)


def _tempo_curve(score_onsets: np.ndarray, reference_onsets: np.ndarray) -> np.ndarray:
    """Beat period per onset group; group 0 inherits the first valid ratio"""
    n = len(score_onsets)
    if n < 2:
        raise TempoEstimationError(f"need at least 2 distinct score onsets, got {n}")

    bps = np.empty(n, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        bps[1:] = np.diff(reference_onsets) / np.diff(score_onsets)
    valid = np.isfinite(bps) & (bps > 0)
    valid[0] = False
    if not valid.any():
        raise TempoEstimationError("no positive performed inter-onset interval")

    bps[0] = bps[int(np.argmax(valid))]
    last = bps[0]
    for g in range(1, n):
        if valid[g]:
            last = bps[g]
        else:
            logger.warning(f"Non-positive beat period at onset group {g}; inheriting {last:.4f}")
            bps[g] = last
    return bps


def _integrate_grid(score_onsets: np.ndarray, bps: np.ndarray, start: float) -> np.ndarray:
    steps = bps[1:] * np.diff(score_onsets)
    return start + np.concatenate([[0.0], np.cumsum(steps)])


def compute_expressive_params(notes: Sequence[AlignedNote],
                              spec: Optional[QuantizationSpec] = None) -> List[ExpressiveParams]:
    """Per-note beat period, velocity, timing and articulation for notes sorted by score onset.

    Chord members share the beat period of their onset group, measured from
    the group's first played note. Timing captures each member's deviation
    from the grid, so later chord members get negative timing.
    """
    spec = spec or default_spec()
    if not notes:
        raise TempoEstimationError("no notes")

    groups = _onset_groups([n.score.onset for n in notes])
    perf_onsets = [n.performed.onset for n in notes]
    score_onsets = np.array([float(notes[g[0]].score.onset) for g in groups])
    references = _group_references(groups, perf_onsets)
    _warn_chord_spread(groups, perf_onsets, spec.chord_spread_warn_sec)

    bps = _tempo_curve(score_onsets, references)
    grid = _integrate_grid(score_onsets, bps, references[0])

    params: List[ExpressiveParams] = []
    for gi, g in enumerate(groups):
        bp = float(bps[gi])
        for i in g:
            note = notes[i]
            params.append(ExpressiveParams(
                beat_period=bp,
                velocity=int(note.performed.velocity),
                timing=float((grid[gi] - note.performed.onset) / bp),
                articulation=float(note.performed.duration / (note.score.duration * bp)),
            ))
    return params


# Encoding

class _Entry(NamedTuple):
    tick: int
    pitch: int
    duration_id: int
    performed: Optional[PerformedNote]


def _snap_duration(duration_beats: float, spec: QuantizationSpec) -> int:
    """Duration id of the nearest table entry; ties resolve to the shorter value"""
    ticks = float(duration_beats) * spec.beat_resolution
    return int(np.argmin(np.abs(spec.duration_table - ticks))) + 1


def onset_tick(onset_beats: float, spec: QuantizationSpec) -> int:
    return int(math.floor(float(onset_beats) * spec.beat_resolution + 0.5))


def _sentinel(family: int) -> CompoundToken:
    return CompoundToken(family, IGNORE, IGNORE, IGNORE, IGNORE, IGNORE, IGNORE, IGNORE)


def _metric(position: int) -> CompoundToken:
    return CompoundToken(METRIC, position, IGNORE, IGNORE, IGNORE, IGNORE, IGNORE, IGNORE)


def _feedback_beat_periods(score_onsets: np.ndarray, references: np.ndarray, bps: np.ndarray,
                           spec: QuantizationSpec):
    """Beat period targets, their dequantized values and the decoding grid.

    Each group's target is the beat period that carries the dequantized grid
    from the previous group onto this group's reference onset, so bin
    rounding is corrected at the next group instead of piling up in timing.
    """
    edges = spec.beat_period_edges
    n = len(score_onsets)
    targets = np.empty(n, dtype=np.float64)
    quantized = np.empty(n, dtype=np.float64)
    grid = np.empty(n, dtype=np.float64)

    targets[0] = bps[0]
    quantized[0] = _log_representative(edges, _bin(edges, targets[0]))
    # decoding starts the clock at score_onset * beat_period of the first group
    grid[0] = score_onsets[0] * quantized[0]
    offset = references[0] - grid[0]
    for g in range(1, n):
        step = score_onsets[g] - score_onsets[g - 1]
        if references[g] > references[g - 1]:
            targets[g] = max((references[g] - offset - grid[g - 1]) / step, float(edges[0]))
        else:
            targets[g] = bps[g]
        quantized[g] = _log_representative(edges, _bin(edges, targets[g]))
        grid[g] = grid[g - 1] + quantized[g] * step
    return targets, quantized, grid, offset


def _performance_rows(entries: List[_Entry], spec: QuantizationSpec):
    """Performance ids and pv rows, computed against the grid of dequantized beat periods"""
    R = spec.beat_resolution
    groups = _onset_groups([e.tick for e in entries])
    perf_onsets = [e.performed.onset for e in entries]
    score_onsets = np.array([entries[g[0]].tick / R for g in groups])
    references = _group_references(groups, perf_onsets)
    _warn_chord_spread(groups, perf_onsets, spec.chord_spread_warn_sec)

    try:
        bps = _tempo_curve(score_onsets, references)
    except TempoEstimationError as e:
        logger.warning(f"{e}; using default beat period {spec.default_beat_period}")
        bps = np.full(len(groups), spec.default_beat_period, dtype=np.float64)

    targets, bp_quantized, grid, offset = _feedback_beat_periods(score_onsets, references, bps, spec)

    rows = [None] * len(entries)
    for gi, g in enumerate(groups):
        bp = bp_quantized[gi]
        for i in g:
            performed = entries[i].performed
            duration_beats = spec.duration_table[entries[i].duration_id - 1] / R
            params = ExpressiveParams(
                beat_period=float(targets[gi]),
                velocity=int(performed.velocity),
                timing=float((grid[gi] - (performed.onset - offset)) / bp),
                articulation=float(performed.duration / (duration_beats * bp)),
            )
            rows[i] = (ids_from_bins(quantize_params(params, spec)), params.as_row())
    return rows


def encode(score: Optional[Sequence[ScoreNote]], aligned: Optional[Sequence[AlignedNote]],
           spec: QuantizationSpec) -> ECPSequence:
    """Encode a score, or an aligned score/performance, as an ECP sequence.

    With `aligned` the score halves of the aligned notes are encoded and
    `score` is ignored. Without it the sequence is score-only: NOTE steps
    carry IGNORE performance ids.
    """
    score_only = aligned is None
    if score_only:
        pairs = [(n, None) for n in (score or [])]
    else:
        pairs = [(a.score, a.performed) for a in aligned]

    kept = [(s, p) for s, p in pairs if MIN_PITCH <= s.pitch <= MAX_PITCH]
    if len(kept) < len(pairs):
        logger.warning(f"Dropped {len(pairs) - len(kept)} note(s) outside pitch range {MIN_PITCH}-{MAX_PITCH}")

    zero_row = (0.0, 0.0, 0.0, 0.0)
    if not kept:
        return ECPSequence([_sentinel(BOS), _sentinel(EOS)], np.zeros((2, 4)), score_only)

    entries = []
    for s, p in kept:
        if s.onset < 0:
            raise ValueError(f"negative score onset {s.onset} (note {s.id})")
        entries.append(_Entry(onset_tick(s.onset, spec), int(s.pitch), _snap_duration(s.duration, spec), p))
    entries.sort(key=lambda e: (e.tick, e.pitch))

    if score_only:
        perf = [((IGNORE,) * 4, zero_row)] * len(entries)
    else:
        perf = _performance_rows(entries, spec)

    R = spec.beat_resolution
    tokens = [_sentinel(BOS)]
    pv = [zero_row]
    i = 0
    for beat in range(entries[-1].tick // R + 1):
        tokens.append(_metric(BEAT))
        pv.append(zero_row)
        current_tick = 0
        while i < len(entries) and entries[i].tick // R == beat:
            tick = entries[i].tick % R
            if tick != current_tick:
                tokens.append(_metric(tick + 1))
                pv.append(zero_row)
                current_tick = tick
            perf_ids, row = perf[i]
            tokens.append(CompoundToken(NOTE, IGNORE, entries[i].pitch - MIN_PITCH + 1,
                                        entries[i].duration_id, *perf_ids))
            pv.append(row)
            i += 1
    tokens.append(_sentinel(EOS))
    pv.append(zero_row)

    logger.debug(f"Encoded {len(entries)} notes into {len(tokens)} compound tokens")
    return ECPSequence(tokens, np.asarray(pv, dtype=np.float64), score_only)


def rebase_to_first_beat(notes: Sequence, spec: QuantizationSpec) -> list:
    """Shift score onsets by whole beats so the first onset lies in beat 0.

    Accepts ScoreNote or AlignedNote lists; performed halves are untouched.
    """
    if not notes:
        return []

    def score_of(n) -> ScoreNote:
        return n.score if isinstance(n, AlignedNote) else n

    first_tick = min(onset_tick(score_of(n).onset, spec) for n in notes)
    shift = first_tick // spec.beat_resolution
    if shift == 0:
        return list(notes)

    rebased = []
    for n in notes:
        s = score_of(n)
        moved = ScoreNote(s.id, s.pitch, s.onset - shift, s.duration)
        rebased.append(AlignedNote(moved, n.performed) if isinstance(n, AlignedNote) else moved)
    return rebased


def sequence_from_ids(score_ids: np.ndarray, perf_ids: np.ndarray, spec: QuantizationSpec,
                      score_only: bool = False) -> ECPSequence:
    """Assemble an ECPSequence from id matrices; pv rows come from dequantized NOTE ids"""
    tokens = []
    pv = np.zeros((len(score_ids), 4), dtype=np.float64)
    for i, (s, p) in enumerate(zip(np.asarray(score_ids), np.asarray(perf_ids))):
        token = CompoundToken(*(int(v) for v in s), *(int(v) for v in p))
        tokens.append(token)
        if token.family == NOTE and IGNORE not in token[4:]:
            try:
                pv[i] = dequantize_ids(token[4:], spec).as_row()
            except ValueError:
                pass
    return ECPSequence(tokens, pv, score_only)


# Grammar

def validate_grammar(seq: ECPSequence, spec: Optional[QuantizationSpec] = None,
                     require_performance: Optional[bool] = None) -> List[Diagnostic]:
    """All grammar violations of a sequence; empty iff the sequence is well formed"""
    spec = spec or default_spec()
    vocab = spec.vocab_sizes
    require_perf = (not seq.score_only) if require_performance is None else require_performance
    tokens = seq.tokens
    T = len(tokens)
    if T == 0:
        return [Diagnostic(0, "bos-first", "empty sequence")]

    diags: List[Diagnostic] = []
    pv = np.asarray(seq.pv, dtype=np.float64)
    if pv.shape != (T, 4):
        diags.append(Diagnostic(0, "pv-mismatch", f"pv shape {pv.shape} does not match ({T}, 4)"))
        pv = None

    beat_seen = False
    tick = 0
    for i, token in enumerate(tokens):
        ids = tuple(int(v) for v in token)
        bad = [name for name, v, size in zip(SCORE_FIELDS + PERF_FIELDS, ids, vocab) if not 0 <= v < size]
        if len(ids) != 8 or bad:
            diags.append(Diagnostic(i, "id-out-of-range", f"ids out of vocabulary: {', '.join(bad) or 'arity'}"))
            continue

        family, position, pitch, duration = ids[:4]
        perf = ids[4:]
        if family == BOS and i != 0:
            diags.append(Diagnostic(i, "bos-first", "BOS only allowed at index 0"))
        elif family != BOS and i == 0:
            diags.append(Diagnostic(i, "bos-first", "sequence must start with BOS"))
        if family == EOS and i != T - 1:
            diags.append(Diagnostic(i, "eos-last", "EOS only allowed as the final step"))

        if family in (BOS, EOS):
            if any(ids[1:]):
                diags.append(Diagnostic(i, "sentinel-ids-must-be-ignore", "BOS/EOS carry only IGNORE ids"))
        elif family == METRIC:
            if position == IGNORE:
                diags.append(Diagnostic(i, "beat-position-required-on-metric", "METRIC without position"))
            elif position == BEAT:
                beat_seen = True
                tick = 0
            else:
                k = position - 1
                if not beat_seen:
                    diags.append(Diagnostic(i, "position-order", "position marker before the first BEAT"))
                elif k <= tick:
                    diags.append(Diagnostic(i, "position-order", f"POS_{k} does not advance past tick {tick}"))
                tick = k
            if pitch != IGNORE or duration != IGNORE:
                diags.append(Diagnostic(i, "score-ids-forbidden-on-metric", "METRIC carries pitch/duration"))
            if any(perf):
                diags.append(Diagnostic(i, "perf-ids-forbidden-off-note", "performance ids on METRIC"))
        elif family == NOTE:
            if position != IGNORE:
                diags.append(Diagnostic(i, "beat-position-forbidden-on-note", "NOTE carries a position"))
            if pitch == IGNORE or duration == IGNORE:
                diags.append(Diagnostic(i, "score-ids-required-on-note", "NOTE without pitch/duration"))
            if require_perf and IGNORE in perf:
                diags.append(Diagnostic(i, "perf-ids-required-on-note", "NOTE with IGNORE performance id"))
            elif not require_perf and any(perf):
                diags.append(Diagnostic(i, "perf-ids-forbidden-score-only", "performance ids in a score-only sequence"))
            if not beat_seen:
                diags.append(Diagnostic(i, "note-before-beat", "NOTE before the first BEAT marker"))
        else:
            diags.append(Diagnostic(i, "family-invalid", f"family id {family}"))

        if pv is not None:
            row = pv[i]
            if not np.all(np.isfinite(row)):
                diags.append(Diagnostic(i, "pv-mismatch", "non-finite pv row"))
            elif family != NOTE and np.any(row != 0):
                diags.append(Diagnostic(i, "pv-mismatch", "non-zero pv row on a non-NOTE step"))
    return diags


class _DecodedNote(NamedTuple):
    onset_beats: float
    duration_beats: float
    pitch: int
    perf_ids: Tuple[int, int, int, int]


def _walk_notes(seq: ECPSequence, spec: QuantizationSpec) -> List[_DecodedNote]:
    R = spec.beat_resolution
    notes = []
    beat, tick = -1, 0
    for token in seq.tokens:
        family = token[0]
        if family == METRIC:
            if token[1] == BEAT:
                beat += 1
                tick = 0
            else:
                tick = token[1] - 1
        elif family == NOTE:
            notes.append(_DecodedNote(
                onset_beats=(beat * R + tick) / R,
                duration_beats=float(spec.duration_table[token[3] - 1]) / R,
                pitch=int(token[2]) + MIN_PITCH - 1,
                perf_ids=tuple(int(v) for v in token[4:]),
            ))
    return notes


def decode_score(seq: ECPSequence, spec: Optional[QuantizationSpec] = None) -> List[ScoreNote]:
    spec = spec or default_spec()
    diags = validate_grammar(seq, spec)
    if diags:
        raise GrammarError(diags)
    return [
        ScoreNote(f"n{i}", n.pitch, n.onset_beats, n.duration_beats)
        for i, n in enumerate(_walk_notes(seq, spec))
    ]


def decode_performance(seq: ECPSequence, spec: QuantizationSpec, token_order: bool = False) -> List[PerformedNote]:
    """Render performed notes by integrating beat periods over the score beats.

    Output is sorted by (onset, pitch) unless `token_order` keeps the NOTE step order.
    """
    diags = validate_grammar(seq, spec, require_performance=True)
    if diags:
        raise GrammarError(diags)

    performed = []
    grid = None
    previous_onset = None
    for note in _walk_notes(seq, spec):
        params = dequantize_ids(note.perf_ids, spec)
        if note.onset_beats != previous_onset:
            # a new onset group advances the clock with its own beat period
            if grid is None:
                grid = note.onset_beats * params.beat_period
            else:
                grid += params.beat_period * (note.onset_beats - previous_onset)
            previous_onset = note.onset_beats
        performed.append(PerformedNote(
            pitch=note.pitch,
            onset=max(0.0, grid - params.timing * params.beat_period),
            duration=note.duration_beats * params.articulation * params.beat_period,
            velocity=params.velocity,
        ))
    if not token_order:
        performed.sort(key=lambda n: (n.onset, n.pitch))
    return performed


def nominal_performance(notes: Iterable[ScoreNote], beat_period: float = 0.5,
                        velocity: int = 64) -> List[PerformedNote]:
    """Deadpan rendering of a score at a fixed tempo"""
    return [
        PerformedNote(n.pitch, n.onset * beat_period, n.duration * beat_period, velocity)
        for n in notes
    ]


class GrammarState:
    """Allowed ids per sub-token for constrained decoding, advanced one step at a time"""

    def __init__(self, spec: QuantizationSpec, max_length: int, score_only: bool = False):
        if max_length < 2:
            raise ValueError("max_length must leave room for BOS and EOS")
        self.score_vocab = spec.score_vocab_sizes
        self.perf_vocab = spec.perf_vocab_sizes
        self.max_length = max_length
        self.score_only = score_only
        self.step = 0
        self.beat_seen = False
        self.tick = 0
        self.finished = False

    def score_mask(self, j: int, prefix: Sequence[int] = ()) -> np.ndarray:
        mask = np.zeros(self.score_vocab[j], dtype=bool)
        if j == 0:
            if self.step == 0:
                mask[BOS] = True
            elif self.step >= self.max_length - 1:
                mask[EOS] = True
            elif not self.beat_seen:
                mask[[METRIC, EOS]] = True
            else:
                mask[[NOTE, METRIC, EOS]] = True
            return mask

        family = prefix[0]
        if j == 1 and family == METRIC:
            mask[BEAT] = True
            if self.beat_seen:
                mask[self.tick + 2:] = True
        elif j in (2, 3) and family == NOTE:
            mask[1:] = True
        else:
            mask[IGNORE] = True
        return mask

    def perf_mask(self, j: int, family: int) -> np.ndarray:
        mask = np.zeros(self.perf_vocab[j], dtype=bool)
        if family == NOTE and not self.score_only:
            mask[1:] = True
        else:
            mask[IGNORE] = True
        return mask

    def allows(self, token: Sequence[int]) -> bool:
        token = [int(v) for v in token]
        for j in range(4):
            mask = self.score_mask(j, token[:j])
            if not 0 <= token[j] < len(mask) or not mask[token[j]]:
                return False
        for j in range(4):
            mask = self.perf_mask(j, token[0])
            if not 0 <= token[4 + j] < len(mask) or not mask[token[4 + j]]:
                return False
        return True

    def advance(self, token: Sequence[int]):
        family = int(token[0])
        if family == EOS:
            self.finished = True
        elif family == METRIC:
            if int(token[1]) == BEAT:
                self.beat_seen = True
                self.tick = 0
            else:
                self.tick = int(token[1]) - 1
        self.step += 1
        if self.step >= self.max_length:
            self.finished = True


# Token dump

def write_token_dump(sequences: Iterable[ECPSequence], path: str) -> int:
    """One line of 8 ids per step, blank line between sequences"""
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            if seq.score_only:
                f.write("# score_only\n")
            for token in seq.tokens:
                f.write(" ".join(str(int(v)) for v in token) + "\n")
            f.write("\n")
            count += 1
    logger.debug(f"Wrote {count} sequences to {path}")
    return count


def read_token_dump(path: str, spec: QuantizationSpec, pv: Optional[np.ndarray] = None) -> List[ECPSequence]:
    """Parse a token dump; pv rows are taken from `pv` (stacked rows) or rebuilt from the ids"""
    blocks = []
    current: List[Tuple[int, ...]] = []
    score_only = False
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                if current:
                    blocks.append((current, score_only))
                current, score_only = [], False
                continue
            if line.startswith("#"):
                if line[1:].strip() == "score_only":
                    score_only = True
                continue
            values = line.split()
            if len(values) != 8:
                raise ValueError(f"{path}:{line_no}: expected 8 ids, got {len(values)}")
            current.append(tuple(int(v) for v in values))
    if current:
        blocks.append((current, score_only))

    sequences = []
    row = 0
    for rows, is_score_only in blocks:
        ids = np.asarray(rows, dtype=np.int64)
        seq = sequence_from_ids(ids[:, :4], ids[:, 4:], spec, is_score_only)
        if pv is not None:
            seq.pv = np.asarray(pv[row:row + len(rows)], dtype=np.float64)
        row += len(rows)
        sequences.append(seq)
    if pv is not None and row != len(pv):
        raise ValueError(f"pv has {len(pv)} rows but the dump has {row} steps")
    return sequences
