# midi_io.py - Standard MIDI File read/write for performed notes and score files
import logging
import os
from typing import Iterable, List

import pretty_midi

from ecp_codec import PerformedNote, ScoreNote

logger = logging.getLogger(__name__)

MIDI_RESOLUTION = 960
MIDI_TEMPO = 120.0


def write_performance_midi(notes: Iterable[PerformedNote], path: str) -> str:
    """Write performed notes to a single piano track at a fixed 120 BPM tempo map"""
    midi = pretty_midi.PrettyMIDI(resolution=MIDI_RESOLUTION, initial_tempo=MIDI_TEMPO)
    piano = pretty_midi.Instrument(program=0, name="Piano")
    for n in notes:
        start = max(0.0, float(n.onset))
        piano.notes.append(pretty_midi.Note(
            velocity=int(min(127, max(1, n.velocity))),  # velocity 0 would be a note-off
            pitch=int(n.pitch),
            start=start,
            end=start + max(float(n.duration), 1.0 / MIDI_RESOLUTION),
        ))
    midi.instruments.append(piano)

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    midi.write(path)
    logger.debug(f"Wrote {len(piano.notes)} notes to {path}")
    return path


def _load(path: str) -> pretty_midi.PrettyMIDI:
    try:
        return pretty_midi.PrettyMIDI(path)
    except Exception as e:
        raise IOError(f"cannot parse MIDI file {path}: {e}") from e


def read_performance_midi(path: str) -> List[PerformedNote]:
    """All non-drum notes of a MIDI file, sorted by (onset, pitch)"""
    midi = _load(path)
    notes = [
        PerformedNote(pitch=n.pitch, onset=float(n.start), duration=float(n.end - n.start), velocity=n.velocity)
        for inst in midi.instruments if not inst.is_drum
        for n in inst.notes if n.end > n.start
    ]
    notes.sort(key=lambda n: (n.onset, n.pitch))
    return notes


def read_score_midi(path: str) -> List[ScoreNote]:
    """Notes of a MIDI file in beats, using the file's tempo map"""
    midi = _load(path)
    stem = os.path.splitext(os.path.basename(path))[0]
    raw = []
    for inst in midi.instruments:
        if inst.is_drum:
            continue
        for n in inst.notes:
            onset = midi.time_to_tick(n.start) / midi.resolution
            offset = midi.time_to_tick(n.end) / midi.resolution
            if offset > onset:
                raw.append((onset, n.pitch, offset - onset))
    raw.sort()
    return [ScoreNote(f"{stem}:{i}", pitch, onset, duration) for i, (onset, pitch, duration) in enumerate(raw)]
