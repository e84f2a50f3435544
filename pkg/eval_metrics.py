# eval_metrics.py - Objective pitch, rhythm and dynamics metrics over performed notes
import glob
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import ujson
from scipy import stats

from ecp_codec import PerformedNote
from midi_io import read_performance_midi

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("upc", "pr", "aps", "dstd", "ds", "ioi", "avi")

FRAME_SEC = 0.05
MIN_PERIOD_SEC = 1.0
MAX_PERIOD_SEC = 4.0
TRACK_TOLERANCE = 0.25
MIN_DOWNBEAT_NOTES = 8
MIN_DOWNBEAT_SPAN_SEC = 4.0


class MetricError(ValueError):
    def __init__(self, metric: str, message: str):
        self.metric = metric
        super().__init__(f"{metric}: {message}")


@dataclass
class DownbeatEstimate:
    times: List[float] = field(default_factory=list)
    dstd: Optional[float] = None
    ds: Optional[float] = None
    period: Optional[float] = None
    phase: Optional[float] = None


@dataclass
class MetricReport:
    per_piece: pd.DataFrame
    summary: pd.DataFrame

    @property
    def means(self) -> Dict[str, Optional[float]]:
        return {m: _none_if_nan(self.summary.loc[m, "mean"]) for m in METRIC_FIELDS}

    @property
    def counts(self) -> Dict[str, int]:
        return {m: int(self.summary.loc[m, "count"]) for m in METRIC_FIELDS}


def _none_if_nan(value) -> Optional[float]:
    return None if value is None or (isinstance(value, float) and math.isnan(value)) else float(value)


def _ordered(notes: Sequence[PerformedNote]) -> List[PerformedNote]:
    return sorted(notes, key=lambda n: (n.onset, n.pitch))


def pitch_metrics(notes: Sequence[PerformedNote]) -> Tuple[int, int, Optional[float]]:
    """(used pitch classes, pitch range, average absolute pitch interval); aps is None below 2 notes"""
    if not notes:
        raise MetricError("pitch", "no notes")
    pitches = np.array([n.pitch for n in _ordered(notes)], dtype=np.int64)
    upc = len(set((pitches % 12).tolist()))
    pr = int(pitches.max() - pitches.min())
    aps = float(np.abs(np.diff(pitches)).mean()) if len(pitches) > 1 else None
    return upc, pr, aps


def timing_dynamics(notes: Sequence[PerformedNote]) -> Tuple[Optional[float], Optional[float]]:
    """(mean inter-onset interval in seconds, mean absolute velocity interval)"""
    if len(notes) < 2:
        return None, None
    ordered = _ordered(notes)
    onsets = np.array([n.onset for n in ordered], dtype=np.float64)
    velocities = np.array([n.velocity for n in ordered], dtype=np.float64)
    return float(np.diff(onsets).mean()), float(np.abs(np.diff(velocities)).mean())


def onset_envelope(notes: Sequence[PerformedNote]) -> np.ndarray:
    """Velocity-weighted onset strength in 50 ms frames from the first onset, normalized to a peak of 1"""
    onsets = np.array([n.onset for n in notes], dtype=np.float64)
    frames = np.floor((onsets - onsets.min()) / FRAME_SEC + 0.5).astype(np.int64)
    envelope = np.zeros(int(frames.max()) + 1, dtype=np.float64)
    np.add.at(envelope, frames, np.array([n.velocity for n in notes], dtype=np.float64))
    peak = envelope.max()
    return envelope / peak if peak > 0 else envelope


def grid_salience(envelope: np.ndarray, period: int, phase: int) -> float:
    return float(envelope[phase::period].mean())


def best_grid(envelope: np.ndarray) -> Tuple[int, int, float]:
    """(period, phase, salience) in frames; ties go to the smaller period, then the smaller phase"""
    lo = int(round(MIN_PERIOD_SEC / FRAME_SEC))
    hi = int(round(MAX_PERIOD_SEC / FRAME_SEC))
    best = (lo, 0, -1.0)
    for period in range(lo, hi + 1):
        for phase in range(min(period, len(envelope))):
            salience = grid_salience(envelope, period, phase)
            if salience > best[2]:
                best = (period, phase, salience)
    return best


def estimate_downbeats(notes: Sequence[PerformedNote]) -> DownbeatEstimate:
    """Symbolic downbeat tracker: grid search for the initial period and phase, then adaptive peak picking"""
    if len(notes) < MIN_DOWNBEAT_NOTES:
        return DownbeatEstimate()
    onsets = [n.onset for n in notes]
    if max(onsets) - min(onsets) < MIN_DOWNBEAT_SPAN_SEC:
        return DownbeatEstimate()
    envelope = onset_envelope(notes)
    if envelope.max() <= 0:
        return DownbeatEstimate()

    lo = int(round(MIN_PERIOD_SEC / FRAME_SEC))
    hi = int(round(MAX_PERIOD_SEC / FRAME_SEC))
    period, phase, _ = best_grid(envelope)

    # (frame, confirmed)
    downbeats = [(phase, envelope[phase] > 0)]
    while True:
        last = downbeats[-1][0]
        predicted = last + period
        if predicted >= len(envelope):
            break
        half = max(1, int(round(TRACK_TOLERANCE * period)))
        window_lo = max(last + 1, predicted - half)
        window = envelope[window_lo:min(len(envelope), predicted + half + 1)]
        peak = int(np.argmax(window))
        if window[peak] > 0:
            frame = window_lo + peak
            if downbeats[-1][1]:
                period = int(np.clip(frame - last, lo, hi))
            downbeats.append((frame, True))
        else:
            downbeats.append((predicted, False))

    t0 = min(onsets)
    confirmed = [f for f, ok in downbeats if ok]
    intervals = [
        (b - a) * FRAME_SEC
        for (a, ok_a), (b, ok_b) in zip(downbeats, downbeats[1:]) if ok_a and ok_b
    ]
    return DownbeatEstimate(
        times=[t0 + f * FRAME_SEC for f, _ in downbeats],
        dstd=float(np.std(intervals)) if intervals else None,
        ds=float(np.mean(envelope[confirmed])) if confirmed else None,
        period=(downbeats[1][0] - downbeats[0][0]) * FRAME_SEC if len(downbeats) > 1 else None,
        phase=phase * FRAME_SEC,
    )


def evaluate_piece(notes: Sequence[PerformedNote]) -> Dict[str, Optional[float]]:
    upc, pr, aps = pitch_metrics(notes)
    downbeats = estimate_downbeats(notes)
    ioi, avi = timing_dynamics(notes)
    return {"upc": upc, "pr": pr, "aps": aps, "dstd": downbeats.dstd, "ds": downbeats.ds, "ioi": ioi, "avi": avi}


def summarize(per_piece: pd.DataFrame) -> pd.DataFrame:
    """Mean, standard deviation, 95% t-interval half-width and valid count per metric"""
    rows = {}
    for metric in METRIC_FIELDS:
        values = pd.to_numeric(per_piece[metric], errors="coerce").dropna().to_numpy(dtype=np.float64)
        n = len(values)
        std = float(values.std(ddof=1)) if n > 1 else float("nan")
        rows[metric] = {
            "mean": float(values.mean()) if n else float("nan"),
            "std": std,
            "ci95": float(stats.t.ppf(0.975, n - 1) * std / math.sqrt(n)) if n > 1 else float("nan"),
            "count": n,
            "missing": len(per_piece) - n,
        }
    return pd.DataFrame.from_dict(rows, orient="index")


def _load_pieces(source: Union[str, Sequence[Sequence[PerformedNote]]], n: Optional[int]):
    if isinstance(source, str):
        files = sorted(glob.glob(os.path.join(source, "*.mid")) + glob.glob(os.path.join(source, "*.midi")))
        if not files:
            raise MetricError("corpus", f"no MIDI files in {source}")
        files = files[:n] if n else files
        return [os.path.basename(f) for f in files], [lambda f=f: read_performance_midi(f) for f in files]
    pieces = list(source)[:n] if n else list(source)
    if not pieces:
        raise MetricError("corpus", "no pieces to evaluate")
    return [f"piece_{i:04d}" for i in range(len(pieces))], [lambda p=p: list(p) for p in pieces]


def evaluate_corpus(source: Union[str, Sequence[Sequence[PerformedNote]]], n: Optional[int] = None,
                    out_dir: Optional[str] = None, workers: int = 1) -> MetricReport:
    """Per-piece metrics and corpus summary over a MIDI directory or in-memory note lists.

    Pieces that fail to parse or hold no notes are reported with every metric missing.
    """
    names, loaders = _load_pieces(source, n)

    def run(i: int) -> Dict[str, Optional[float]]:
        try:
            notes = loaders[i]()
            return {"piece": names[i], "notes": len(notes), **evaluate_piece(notes)}
        except (IOError, MetricError) as e:
            logger.warning(f"Skipping {names[i]}: {e}")
            return {"piece": names[i], "notes": 0, **{m: None for m in METRIC_FIELDS}}

    with ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="metrics") as executor:
        rows = list(executor.map(run, range(len(names))))

    per_piece = pd.DataFrame(rows, columns=["piece", "notes", *METRIC_FIELDS])
    report = MetricReport(per_piece=per_piece, summary=summarize(per_piece))
    logger.info(f"Evaluated {len(per_piece)} pieces: " +
                ", ".join(f"{m}={report.means[m]:.4f}" for m in METRIC_FIELDS if report.means[m] is not None))
    if out_dir:
        write_report(report, out_dir)
    return report


def write_report(report: MetricReport, out_dir: str, stem: str = "report") -> Tuple[str, str]:
    """Per-piece table as CSV, corpus summary as JSON"""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    report.per_piece.to_csv(csv_path, index=False)
    payload = {
        "pieces": int(len(report.per_piece)),
        "metrics": {
            m: {
                **{key: _none_if_nan(report.summary.loc[m, key]) for key in ("mean", "std", "ci95")},
                "count": int(report.summary.loc[m, "count"]),
                "missing": int(report.summary.loc[m, "missing"]),
            }
            for m in METRIC_FIELDS
        },
    }
    with open(json_path, "w", encoding="utf-8") as f:
        ujson.dump(payload, f, indent=2)
    logger.info(f"Wrote {csv_path} and {json_path}")
    return csv_path, json_path
