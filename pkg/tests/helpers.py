# helpers.py - Builders for synthetic aligned pieces and alignment-file objects
from typing import Dict, List

from ecp_codec import AlignedNote, PerformedNote, ScoreNote


def steady_piece(n_notes: int, piece_id: str = "p0", step_beats: float = 0.5, beat_period: float = 0.5,
                 velocity: int = 64, pitch_base: int = 60, start_beat: float = 0.0) -> List[AlignedNote]:
    """Monophonic line on a fixed grid played metronomically"""
    notes = []
    for i in range(n_notes):
        onset = start_beat + i * step_beats
        pitch = pitch_base + (i % 12)
        notes.append(AlignedNote(
            ScoreNote(f"{piece_id}:{i}", pitch, onset, step_beats),
            PerformedNote(pitch, onset * beat_period, step_beats * beat_period * 0.5, velocity),
        ))
    return notes


def alignment_object(piece_id: str, notes: List[AlignedNote]) -> Dict:
    """Alignment-file JSON object for a list of aligned notes"""
    return {
        "piece_id": piece_id,
        "score": [
            {"id": n.score.id, "pitch": n.score.pitch, "onset_beats": n.score.onset,
             "duration_beats": n.score.duration}
            for n in notes
        ],
        "performance": [
            {"pitch": n.performed.pitch, "onset_sec": n.performed.onset, "duration_sec": n.performed.duration,
             "velocity": n.performed.velocity}
            for n in notes
        ],
        "alignment": [{"score_id": n.score.id, "perf_index": i} for i, n in enumerate(notes)],
    }
