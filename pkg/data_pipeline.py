# data_pipeline.py - Corpus ingestion, windowed segmentation, piece-level splits and batching
import glob
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import ujson

from ecp_codec import (
    BEAT, IGNORE, METRIC, AlignedNote, ECPSequence, PerformedNote, QuantizationSpec, ScoreNote,
    encode, rebase_to_first_beat,
)
from midi_io import read_score_midi

logger = logging.getLogger(__name__)

TRAIN = "train"
TEST = "test"
VALID = "valid"


class CorpusSchemaError(ValueError):
    """Raised when a corpus file does not follow the alignment/score schema"""

    def __init__(self, field_path: str, message: str = ""):
        self.field_path = field_path
        super().__init__(f"{field_path} {message}".strip())


@dataclass
class AlignedPiece:
    piece_id: str
    notes: List[AlignedNote]
    alignment_rate: float
    unmatched_score: int = 0
    unmatched_performance: int = 0


@dataclass
class AlignedCorpus:
    pieces: List[AlignedPiece]
    source_path: str
    excluded: List[str] = field(default_factory=list)

    @property
    def alignment_rates(self) -> Dict[str, float]:
        return {p.piece_id: p.alignment_rate for p in self.pieces}

    def __len__(self) -> int:
        return len(self.pieces)


@dataclass
class Segment:
    piece_id: str
    window_start: int
    sequence: ECPSequence
    split: str = TRAIN


@dataclass
class SegmentedDataset:
    segments: List[Segment]

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def piece_ids(self) -> List[str]:
        return sorted({s.piece_id for s in self.segments})

    def subset(self, split: str) -> "SegmentedDataset":
        return SegmentedDataset([s for s in self.segments if s.split == split])

    def split_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for s in self.segments:
            counts[s.split] = counts.get(s.split, 0) + 1
        return counts


@dataclass
class Batch:
    score_ids: torch.Tensor    # B x T x 4, long
    perf_ids: torch.Tensor     # B x T x 4, long
    pv: torch.Tensor           # B x T x 4, float
    beat_ids: torch.Tensor     # B x T, long
    mask: torch.Tensor         # B x T, bool (True on real steps)
    segment_indices: List[int]

    def to(self, device) -> "Batch":
        return Batch(
            self.score_ids.to(device), self.perf_ids.to(device), self.pv.to(device),
            self.beat_ids.to(device), self.mask.to(device), self.segment_indices,
        )

    @property
    def size(self) -> int:
        return self.score_ids.shape[0]


# Schema parsing

def _require(obj: Dict[str, Any], key: str, kind, path: str):
    if not isinstance(obj, dict) or key not in obj:
        raise CorpusSchemaError(f"{path}.{key}", "missing")
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise CorpusSchemaError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _number(obj, key, path) -> float:
    return _require(obj, key, float, path)


def parse_score_notes(entries: Any, path: str = "score") -> List[ScoreNote]:
    if not isinstance(entries, list):
        raise CorpusSchemaError(path, "expected a list")
    notes = []
    for i, item in enumerate(entries):
        where = f"{path}[{i}]"
        note = ScoreNote(
            id=str(_require(item, "id", (str, int), where)),
            pitch=_require(item, "pitch", int, where),
            onset=_number(item, "onset_beats", where),
            duration=_number(item, "duration_beats", where),
        )
        if note.onset < 0:
            raise CorpusSchemaError(f"{where}.onset_beats", "must be >= 0")
        if note.duration <= 0:
            raise CorpusSchemaError(f"{where}.duration_beats", "must be > 0")
        notes.append(note)
    return notes


def parse_performed_notes(entries: Any, path: str = "performance") -> List[PerformedNote]:
    if not isinstance(entries, list):
        raise CorpusSchemaError(path, "expected a list")
    notes = []
    for i, item in enumerate(entries):
        where = f"{path}[{i}]"
        note = PerformedNote(
            pitch=_require(item, "pitch", int, where),
            onset=_number(item, "onset_sec", where),
            duration=_number(item, "duration_sec", where),
            velocity=_require(item, "velocity", int, where),
        )
        if not 0 <= note.velocity <= 127:
            raise CorpusSchemaError(f"{where}.velocity", "must be in 0-127")
        if note.duration <= 0:
            raise CorpusSchemaError(f"{where}.duration_sec", "must be > 0")
        notes.append(note)
    return notes


def parse_aligned_piece(obj: Dict[str, Any]) -> AlignedPiece:
    """One alignment-file object to an AlignedPiece sorted by (score onset, pitch)"""
    piece_id = str(_require(obj, "piece_id", (str, int), "piece"))
    score = parse_score_notes(obj.get("score"), "score")
    performance = parse_performed_notes(obj.get("performance"), "performance")
    alignment = obj.get("alignment")
    if not isinstance(alignment, list):
        raise CorpusSchemaError("alignment", "expected a list")

    by_id = {n.id: n for n in score}
    used_score, used_perf = set(), set()
    notes = []
    pitch_mismatches = 0
    for i, pair in enumerate(alignment):
        score_id = str(_require(pair, "score_id", (str, int), f"alignment[{i}]"))
        perf_index = _require(pair, "perf_index", int, f"alignment[{i}]")
        if score_id not in by_id:
            raise CorpusSchemaError("alignment.score_id", f"unknown id {score_id!r}")
        if not 0 <= perf_index < len(performance):
            raise CorpusSchemaError("alignment.perf_index", "out of bounds")
        if score_id in used_score or perf_index in used_perf:
            continue
        s, p = by_id[score_id], performance[perf_index]
        if s.pitch != p.pitch:
            pitch_mismatches += 1
            continue
        used_score.add(score_id)
        used_perf.add(perf_index)
        notes.append(AlignedNote(s, p))

    if pitch_mismatches:
        logger.warning(f"Piece {piece_id}: dropped {pitch_mismatches} alignment pair(s) with differing pitches")
    notes.sort(key=lambda n: (n.score.onset, n.score.pitch))
    denominator = max(len(score), len(performance))
    return AlignedPiece(
        piece_id=piece_id,
        notes=notes,
        alignment_rate=len(notes) / denominator if denominator else 0.0,
        unmatched_score=len(score) - len(notes),
        unmatched_performance=len(performance) - len(notes),
    )


def _json_objects(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        data = ujson.load(f)
    return data if isinstance(data, list) else [data]


def _corpus_files(path: str, patterns: Sequence[str]) -> List[str]:
    if os.path.isdir(path):
        files = []
        for pattern in patterns:
            files.extend(glob.glob(os.path.join(path, "**", pattern), recursive=True))
        return sorted(set(files))
    if os.path.exists(path):
        return [path]
    raise FileNotFoundError(f"Corpus path not found: {path}")


def load_alignment_corpus(path: str, min_alignment_rate: float = 0.0, workers: int = 1) -> AlignedCorpus:
    """Load alignment JSON (one file or a directory of files) and filter by alignment rate"""
    files = _corpus_files(path, ["*.json"])

    def load_file(file_path):
        try:
            return [parse_aligned_piece(obj) for obj in _json_objects(file_path)]
        except CorpusSchemaError as e:
            raise CorpusSchemaError(f"{os.path.basename(file_path)}:{e.field_path}",
                                    str(e)[len(e.field_path):].strip()) from e

    with ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="corpus_load") as executor:
        loaded = [piece for pieces in executor.map(load_file, files) for piece in pieces]

    seen = set()
    kept, excluded = [], []
    for piece in loaded:
        if piece.piece_id in seen:
            raise CorpusSchemaError("piece_id", f"duplicate {piece.piece_id!r}")
        seen.add(piece.piece_id)
        if piece.alignment_rate < min_alignment_rate:
            logger.warning(f"Excluding {piece.piece_id}: alignment rate {piece.alignment_rate:.3f} "
                           f"below {min_alignment_rate:.3f}")
            excluded.append(piece.piece_id)
        elif len(piece.notes) < 2:
            logger.warning(f"Excluding {piece.piece_id}: only {len(piece.notes)} aligned note(s)")
            excluded.append(piece.piece_id)
        else:
            kept.append(piece)

    if not kept:
        raise CorpusSchemaError("pieces", f"no pieces left in {path} after filtering")

    dropped_score = sum(p.unmatched_score for p in kept)
    dropped_perf = sum(p.unmatched_performance for p in kept)
    logger.info(f"Loaded {len(kept)} aligned pieces from {path} ({len(excluded)} excluded); "
                f"unmatched notes dropped: {dropped_score} score, {dropped_perf} performance")
    return AlignedCorpus(pieces=kept, source_path=path, excluded=excluded)


# Segmentation

def window_starts(n_notes: int, window: int, stride: int) -> List[int]:
    """Start indices of the note windows of a piece.

    The tail left uncovered by the last full window is always shorter than
    the stride, so trailing partial windows only arise for pieces shorter
    than one window, which become a single segment.
    """
    if not window > stride > 0:
        raise ValueError(f"need window > stride > 0, got {window}/{stride}")
    if n_notes <= window:
        return [0]
    return list(range(0, n_notes - window + 1, stride))


def _segment_piece(piece_id: str, notes: Sequence, window: int, stride: int, spec: QuantizationSpec,
                   score_only: bool) -> List[Segment]:
    if len(notes) < stride:
        logger.warning(f"Piece {piece_id} has {len(notes)} notes (< stride {stride}); kept as one segment")
    segments = []
    for start in window_starts(len(notes), window, stride):
        chunk = rebase_to_first_beat(notes[start:start + window], spec)
        if score_only:
            seq = encode(chunk, None, spec)
        else:
            seq = encode(None, chunk, spec)
        segments.append(Segment(piece_id=piece_id, window_start=start, sequence=seq))
    return segments


def _segment_all(items: Sequence[Tuple[str, Sequence]], window: int, stride: int, spec: QuantizationSpec,
                 score_only: bool, workers: int) -> SegmentedDataset:
    with ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="segment") as executor:
        results = executor.map(
            lambda item: _segment_piece(item[0], item[1], window, stride, spec, score_only), items
        )
        segments = [s for piece_segments in results for s in piece_segments]
    logger.info(f"Segmented {len(items)} pieces into {len(segments)} segments (window {window}, stride {stride})")
    return SegmentedDataset(segments)


def segment(corpus: AlignedCorpus, window: int, stride: int, spec: QuantizationSpec,
            workers: int = 1) -> SegmentedDataset:
    return _segment_all([(p.piece_id, p.notes) for p in corpus.pieces], window, stride, spec,
                        score_only=False, workers=workers)


def split_by_piece(dataset: SegmentedDataset, test_fraction: float, seed: int,
                   holdout_label: str = TEST) -> SegmentedDataset:
    """Label whole pieces as held out; every other segment becomes train"""
    pieces = dataset.piece_ids
    if len(pieces) < 2:
        raise ValueError(f"need at least 2 pieces to split, got {len(pieces)}")
    n_holdout = min(max(1, round(len(pieces) * test_fraction)), len(pieces) - 1)
    rng = np.random.default_rng(seed)
    chosen = {pieces[i] for i in rng.permutation(len(pieces))[:n_holdout]}
    logger.info(f"Split {len(pieces)} pieces: {n_holdout} {holdout_label}, {len(pieces) - n_holdout} {TRAIN}")
    return SegmentedDataset([
        replace(s, split=holdout_label if s.piece_id in chosen else TRAIN) for s in dataset.segments
    ])


# Batching

def beat_segment_ids(tokens: Sequence[Sequence[int]]) -> np.ndarray:
    """Beat index per step: increments at each METRIC(BEAT), BOS sits in beat 0"""
    ids = np.zeros(len(tokens), dtype=np.int64)
    beat = 0
    for i, token in enumerate(tokens):
        if token[0] == METRIC and token[1] == BEAT:
            beat += 1
        ids[i] = beat
    return ids


def collate(sequences: Sequence[ECPSequence], indices: Sequence[int]) -> Batch:
    """Pad to the longest sequence; padded steps carry IGNORE ids and a false mask"""
    B = len(sequences)
    T = max(len(s) for s in sequences)
    ids = np.full((B, T, 8), IGNORE, dtype=np.int64)
    pv = np.zeros((B, T, 4), dtype=np.float32)
    beats = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, seq in enumerate(sequences):
        n = len(seq)
        ids[b, :n] = seq.ids()
        pv[b, :n] = seq.pv
        seq_beats = beat_segment_ids(seq.tokens)
        beats[b, :n] = seq_beats
        # padding gets a beat of its own so beat attention never mixes it with real steps
        beats[b, n:] = seq_beats[-1] + 1 if n else 0
        mask[b, :n] = True
    return Batch(
        score_ids=torch.from_numpy(ids[:, :, :4]).contiguous(),
        perf_ids=torch.from_numpy(ids[:, :, 4:]).contiguous(),
        pv=torch.from_numpy(pv),
        beat_ids=torch.from_numpy(beats),
        mask=torch.from_numpy(mask),
        segment_indices=list(indices),
    )


def make_batches(dataset: SegmentedDataset, batch_size: int, shuffle: bool = True,
                 seed: int = 0) -> Iterator[Batch]:
    """One epoch over every segment of `dataset`"""
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        indices = [int(i) for i in order[start:start + batch_size]]
        yield collate([dataset.segments[i].sequence for i in indices], indices)


# Score-only pretraining corpus

def load_score_file(path: str) -> List[Tuple[str, List[ScoreNote]]]:
    if path.lower().endswith((".mid", ".midi")):
        return [(os.path.splitext(os.path.basename(path))[0], read_score_midi(path))]
    pieces = []
    for obj in _json_objects(path):
        piece_id = str(_require(obj, "piece_id", (str, int), "piece"))
        notes = sorted(parse_score_notes(obj.get("score"), "score"), key=lambda n: (n.onset, n.pitch))
        pieces.append((piece_id, notes))
    return pieces


def load_score_corpus(path: str, spec: QuantizationSpec, window: int, stride: int,
                      workers: int = 1) -> SegmentedDataset:
    """Score-only sequences (IGNORE performance ids) from MIDI or score JSON files"""
    files = _corpus_files(path, ["*.mid", "*.midi", "*.json"])
    pieces = []
    for file_path in files:
        try:
            pieces.extend(load_score_file(file_path))
        except (IOError, ValueError) as e:
            logger.warning(f"Skipping unreadable score file {file_path}: {e}")
    pieces = [(pid, notes) for pid, notes in pieces if notes]
    if not pieces:
        raise CorpusSchemaError("scores", f"no pretraining scores found in {path}")
    return _segment_all(pieces, window, stride, spec, score_only=True, workers=workers)
