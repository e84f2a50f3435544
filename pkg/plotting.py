# plotting.py - Static pianoroll images of performed notes and ECP sequences
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PatchCollection  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from ecp_codec import (  # noqa: E402
    BEAT, METRIC, ECPSequence, PerformedNote, QuantizationSpec, decode_performance, decode_score,
    default_spec, nominal_performance,
)
from midi_io import read_performance_midi  # noqa: E402

logger = logging.getLogger(__name__)

NOMINAL_BEAT_PERIOD = 0.5


@dataclass
class Pianoroll:
    path: str
    # (onset seconds, pitch, duration seconds, velocity)
    rectangles: List[Tuple[float, int, float, int]] = field(default_factory=list)
    beat_lines: List[float] = field(default_factory=list)


def _beat_times(n_beats: int, onset_beats: Sequence[float], onset_times: Sequence[float]) -> List[float]:
    """Seconds of beats 0..n_beats-1, interpolated through (score beat, performed onset) pairs"""
    beats = np.arange(n_beats, dtype=np.float64)
    if not onset_beats:
        return (beats * NOMINAL_BEAT_PERIOD).tolist()
    xs, index = np.unique(np.asarray(onset_beats, dtype=np.float64), return_index=True)
    ys = np.asarray(onset_times, dtype=np.float64)[index]
    if len(xs) == 1:
        return (ys[0] + (beats - xs[0]) * NOMINAL_BEAT_PERIOD).tolist()
    times = np.interp(beats, xs, ys)
    head_slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
    tail_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
    times = np.where(beats < xs[0], ys[0] + (beats - xs[0]) * head_slope, times)
    times = np.where(beats > xs[-1], ys[-1] + (beats - xs[-1]) * tail_slope, times)
    return times.tolist()


def _from_sequence(seq: ECPSequence, spec: QuantizationSpec) -> Tuple[List[PerformedNote], List[float]]:
    score = decode_score(seq, spec)
    if seq.score_only:
        performed = nominal_performance(score, NOMINAL_BEAT_PERIOD)
    else:
        performed = decode_performance(seq, spec, token_order=True)
    n_beats = sum(1 for t in seq.tokens if t[0] == METRIC and t[1] == BEAT)
    beat_lines = _beat_times(n_beats, [n.onset for n in score], [n.onset for n in performed])
    return performed, beat_lines


def plot_pianoroll(source: Union[str, ECPSequence, Sequence[PerformedNote]], out_path: str,
                   spec: Optional[QuantizationSpec] = None, title: Optional[str] = None,
                   dpi: int = 100) -> Pianoroll:
    """Time-vs-pitch rectangles shaded by velocity; beat lines are drawn for ECP input"""
    spec = spec or default_spec()
    beat_lines: List[float] = []
    if isinstance(source, str):
        notes = read_performance_midi(source)
    elif isinstance(source, ECPSequence):
        notes, beat_lines = _from_sequence(source, spec)
    else:
        notes = list(source)
    if not notes:
        logger.warning(f"Plotting an empty piece to {out_path}")

    fig, ax = plt.subplots(figsize=(12, 5))
    cmap = plt.get_cmap("Blues")
    patches = [Rectangle((n.onset, n.pitch - 0.5), n.duration, 1.0) for n in notes]
    if patches:
        collection = PatchCollection(patches, cmap=cmap, edgecolor="black", linewidth=0.3)
        collection.set_array(np.array([n.velocity for n in notes], dtype=np.float64))
        collection.set_clim(0, 127)
        ax.add_collection(collection)
        end = max(n.onset + n.duration for n in notes)
        low, high = min(n.pitch for n in notes), max(n.pitch for n in notes)
        ax.set_xlim(0, max(end, beat_lines[-1] if beat_lines else 0) * 1.02 + 1e-3)
        ax.set_ylim(low - 2, high + 2)
    for t in beat_lines:
        ax.axvline(t, color="gray", linewidth=0.5, alpha=0.6)

    ax.set_xlabel("Time (seconds)")
    ax.set_ylabel("MIDI pitch")
    if title:
        ax.set_title(title)

    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    # no Software/date metadata so identical inputs give identical bytes
    fig.savefig(out_path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    logger.debug(f"Wrote pianoroll with {len(notes)} notes to {out_path}")

    return Pianoroll(
        path=out_path,
        rectangles=[(float(n.onset), int(n.pitch), float(n.duration), int(n.velocity)) for n in notes],
        beat_lines=[float(t) for t in beat_lines],
    )
