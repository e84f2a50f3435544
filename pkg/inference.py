# inference.py - Sampling pipelines: generation from scratch, primed generation, performance rendering
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import ujson

from data_pipeline import collate
from ecp_codec import (
    EOS, IGNORE, MAX_PITCH, MIN_PITCH, NOTE, AlignedNote, CompoundToken, Diagnostic, ECPSequence, GrammarState,
    PerformedNote, QuantizationSpec, ScoreNote, decode_performance, decode_score, encode,
    nominal_performance, onset_tick, rebase_to_first_beat, sequence_from_ids, validate_grammar,
    write_token_dump,
)
from midi_io import write_performance_midi
from prior_model import CodePrior, sample_codes
from training import load_checkpoint, model_from_checkpoint
from xmvae_model import XMVAE

logger = logging.getLogger(__name__)


class GenerationError(RuntimeError):
    """Raised when no grammatical piece with notes was produced within the retry budget"""

    def __init__(self, attempts: int, reason: str = ""):
        self.attempts = attempts
        super().__init__(f"generation failed after {attempts} attempt(s){': ' + reason if reason else ''}")


@dataclass
class GenerationResult:
    sequence: ECPSequence
    notes: List[PerformedNote]
    codes: List[int]
    seed: int
    top_k: int
    attempts: int = 1
    diagnostics: List[Diagnostic] = field(default_factory=list)


@dataclass
class RenderResult:
    notes: List[PerformedNote]
    sequences: List[ECPSequence]
    windows: List[Tuple[int, int]]


def load_xmvae(path: str, spec: QuantizationSpec, device: str = "cpu") -> XMVAE:
    archive = load_checkpoint(path, spec, kinds=("xmvae",))
    model = model_from_checkpoint(archive, spec).to(device)
    model.eval()
    logger.info(f"Loaded XMVAE checkpoint {path} (epoch {archive['epoch']})")
    return model


def sample_id(logits: torch.Tensor, allowed: np.ndarray, top_k: int, generator: torch.Generator) -> int:
    """Top-k sample restricted to the allowed ids; k = 1 is greedy"""
    logits = logits.detach().float().cpu().clone()
    allowed_t = torch.from_numpy(np.asarray(allowed, dtype=bool))
    n_allowed = int(allowed_t.sum())
    if n_allowed == 0:
        raise ValueError("no allowed ids for this sub-token")
    if n_allowed == 1:
        return int(allowed_t.nonzero()[0])
    logits[~allowed_t] = float("-inf")
    k = min(top_k, n_allowed)
    values, indices = torch.topk(logits, k)
    if k == 1:
        return int(indices[0])
    choice = torch.multinomial(torch.softmax(values, dim=-1), 1, generator=generator)
    return int(indices[choice])


def _strip_eos(prime: ECPSequence) -> ECPSequence:
    if prime.tokens and prime.tokens[-1][0] == EOS:
        return ECPSequence(prime.tokens[:-1], prime.pv[:-1], prime.score_only)
    return prime


def prime_from_piece(notes: Sequence[AlignedNote], spec: QuantizationSpec, beats: int = 1) -> ECPSequence:
    """ECP prefix (BOS through the first `beats` beats, no EOS) of an aligned piece"""
    if beats < 1:
        raise ValueError("a prime needs at least one beat")
    rebased = rebase_to_first_beat(list(notes), spec)
    head = [n for n in rebased if onset_tick(n.score.onset, spec) < beats * spec.beat_resolution]
    return _strip_eos(encode(None, head, spec))


@torch.no_grad()
def _prime_codes(model: XMVAE, prime: ECPSequence, device: str) -> List[int]:
    batch = collate([prime], [0]).to(device)
    _, indices, _, _ = model.composer.quantize(batch.score_ids, batch.beat_ids, batch.mask)
    return indices[0].tolist()


@torch.no_grad()
def _decode_score(model: XMVAE, z_s: torch.Tensor, state: GrammarState, top_k: int,
                  generator: torch.Generator, forced: Optional[np.ndarray] = None) -> np.ndarray:
    decoder = model.composer.decoder
    memory = model.composer.memory_proj(z_s)
    device = z_s.device
    steps: List[List[int]] = []
    while not state.finished and len(steps) < z_s.shape[1]:
        t = len(steps)
        if forced is not None and t < len(forced):
            token = [int(v) for v in forced[t]]
        else:
            prefix = torch.tensor([steps], dtype=torch.long, device=device).reshape(1, t, 4)
            hidden = decoder.next_step_hidden(prefix, memory)
            token = []
            for j in range(4):
                sub_prefix = torch.tensor([token], dtype=torch.long, device=device).reshape(1, j)
                logits = decoder.subtoken_step(hidden, sub_prefix)[0]
                token.append(sample_id(logits, state.score_mask(j, token), top_k, generator))
        state.advance(token + [IGNORE] * 4)
        steps.append(token)
    return np.asarray(steps, dtype=np.int64).reshape(-1, 4)


@torch.no_grad()
def _decode_performance(model: XMVAE, score_ids: np.ndarray, z_s: torch.Tensor, z_p: torch.Tensor,
                        state: GrammarState, top_k: int, generator: torch.Generator,
                        forced: Optional[np.ndarray] = None) -> np.ndarray:
    """Performance ids for fixed score steps; non-NOTE steps are IGNORE without consulting the model"""
    pianist = model.pianist
    T = len(score_ids)
    extra, memory = pianist.conditioning(z_s[:, :T], z_p)
    device = z_s.device
    steps: List[List[int]] = []
    for t in range(T):
        family = int(score_ids[t][0])
        if forced is not None and t < len(forced):
            steps.append([int(v) for v in forced[t]])
            continue
        if family != NOTE:
            steps.append([IGNORE] * 4)
            continue
        prefix = torch.tensor([steps], dtype=torch.long, device=device).reshape(1, t, 4)
        hidden = pianist.decoder.next_step_hidden(prefix, memory, None, extra)
        token = []
        for j in range(4):
            sub_prefix = torch.tensor([token], dtype=torch.long, device=device).reshape(1, j)
            logits = pianist.decoder.subtoken_step(hidden, sub_prefix)[0]
            token.append(sample_id(logits, state.perf_mask(j, family), top_k, generator))
        steps.append(token)
    return np.asarray(steps, dtype=np.int64).reshape(-1, 4)


def _generate(model: XMVAE, prior: CodePrior, spec: QuantizationSpec, length: int, top_k: int, seed: int,
              prime: Optional[ECPSequence], retries: int, device: str) -> GenerationResult:
    if model.spec_fingerprint != spec.fingerprint():
        raise ValueError("XMVAE checkpoint was built for a different quantization spec")
    if prior.K != model.config.K:
        raise ValueError(f"prior codebook size {prior.K} does not match XMVAE K={model.config.K}")
    model.eval()

    prime = _strip_eos(prime) if prime is not None else None
    if prime is not None and len(prime) <= 1:
        prime = None
    if prime is not None:
        if len(prime) >= length:
            raise ValueError(f"prime of {len(prime)} steps leaves no room under the length cap {length}")
        closed = ECPSequence(prime.tokens + [CompoundToken(EOS, *([IGNORE] * 7))],
                             np.vstack([prime.pv, np.zeros((1, 4))]), prime.score_only)
        if validate_grammar(closed, spec):
            raise ValueError("prime is not a valid ECP prefix")
    prime_ids = prime.ids() if prime is not None else None
    prime_codes = _prime_codes(model, prime, device) if prime is not None else None

    last_reason = ""
    for attempt in range(retries + 1):
        attempt_seed = seed + attempt
        generator = torch.Generator().manual_seed(attempt_seed)
        # room for BOS, one BEAT, one NOTE and EOS
        codes = sample_codes(prior, length, top_k, attempt_seed, prime_codes,
                             min_length=max(4, len(prime_codes) + 1 if prime_codes else 0))
        if len(codes) < 4:
            last_reason = f"code sequence of {len(codes)} steps"
            continue
        z_s = model.composer.quantizer.lookup(torch.tensor([codes], device=device))

        score_ids = _decode_score(model, z_s, GrammarState(spec, len(codes), score_only=True), top_k,
                                  generator, prime_ids[:, :4] if prime_ids is not None else None)
        z_p = torch.randn(1, model.config.d_z, generator=generator).to(device)
        forced_perf = prime_ids[:, 4:] if prime_ids is not None and not prime.score_only else None
        perf_ids = _decode_performance(model, score_ids, z_s, z_p, GrammarState(spec, len(codes)), top_k,
                                       generator, forced_perf)

        seq = sequence_from_ids(score_ids, perf_ids, spec)
        diagnostics = validate_grammar(seq, spec)
        if diagnostics:
            last_reason = f"{diagnostics[0].rule} at step {diagnostics[0].index}"
            logger.warning(f"Attempt {attempt + 1} produced an ungrammatical sequence ({last_reason})")
            continue
        if seq.note_count == 0:
            last_reason = "no notes"
            logger.warning(f"Attempt {attempt + 1} produced no notes")
            continue
        notes = decode_performance(seq, spec)
        logger.info(f"Generated {len(seq)} steps, {len(notes)} notes (seed {seed}, attempt {attempt + 1})")
        return GenerationResult(seq, notes, codes, seed, top_k, attempt + 1, diagnostics)
    raise GenerationError(retries + 1, last_reason)


def generate_from_scratch(model: XMVAE, prior: CodePrior, spec: QuantizationSpec, length: int = 512,
                          top_k: int = 8, seed: int = 0, retries: int = 3, device: str = "cpu") -> GenerationResult:
    """Dream z_s from the prior, draw z_p from N(0, I), decode both streams under the grammar"""
    return _generate(model, prior, spec, length, top_k, seed, None, retries, device)


def generate_primed(model: XMVAE, prior: CodePrior, spec: QuantizationSpec, prime: Optional[ECPSequence],
                    length: int = 512, top_k: int = 8, seed: int = 0, retries: int = 3,
                    device: str = "cpu") -> GenerationResult:
    """As generate_from_scratch, with the prime's codes and tokens forced before free sampling"""
    return _generate(model, prior, spec, length, top_k, seed, prime, retries, device)


# Rendering

def _encoded_length(notes: Sequence[ScoreNote], spec: QuantizationSpec) -> int:
    return len(encode(rebase_to_first_beat(notes, spec), None, spec))


def render_windows(notes: Sequence[ScoreNote], spec: QuantizationSpec, max_length: int,
                   overlap: int) -> List[Tuple[int, int]]:
    """Note windows [start, end) whose encodings fit max_length; consecutive windows share notes"""
    n = len(notes)
    if _encoded_length(notes, spec) <= max_length:
        return [(0, n)]
    windows = []
    start = 0
    while True:
        lo, hi = start + 1, n
        # largest end whose window still fits
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if _encoded_length(notes[start:mid], spec) <= max_length:
                lo = mid
            else:
                hi = mid - 1
        end = lo
        if _encoded_length(notes[start:end], spec) > max_length:
            raise ValueError(f"note {start} alone does not fit in {max_length} steps")
        windows.append((start, end))
        if end >= n:
            return windows
        span = end - start
        start = end - min(max(overlap, 1), span - 1) if span > 1 else end


@torch.no_grad()
def _render_window(model: XMVAE, notes: Sequence[ScoreNote], spec: QuantizationSpec, z_p: torch.Tensor,
                   top_k: int, generator: torch.Generator, device: str) -> Tuple[ECPSequence, List[PerformedNote]]:
    seq = encode(list(notes), None, spec)
    batch = collate([seq], [0]).to(device)
    _, _, z_q, _ = model.composer.quantize(batch.score_ids, batch.beat_ids, batch.mask)
    score_ids = seq.score_ids()
    perf_ids = _decode_performance(model, score_ids, z_q, z_p, GrammarState(spec, len(seq) + 1), top_k, generator)
    rendered = sequence_from_ids(score_ids, perf_ids, spec)
    return rendered, decode_performance(rendered, spec, token_order=True)


def render_performance(model: XMVAE, score: Sequence[ScoreNote], spec: QuantizationSpec, top_k: int = 8,
                       seed: int = 0, neutral: bool = True, max_length: int = 512, overlap: int = 32,
                       device: str = "cpu") -> RenderResult:
    """Perform a given score: its z_s drives the Performance Decoder, score tokens stay fixed.

    `neutral` uses z_p = 0; otherwise z_p is drawn once from N(0, I).
    """
    if model.spec_fingerprint != spec.fingerprint():
        raise ValueError("XMVAE checkpoint was built for a different quantization spec")
    bad = [n.pitch for n in score if not MIN_PITCH <= n.pitch <= MAX_PITCH]
    if bad:
        raise ValueError(f"score contains pitches outside {MIN_PITCH}-{MAX_PITCH}: {sorted(set(bad))}")
    if not score:
        return RenderResult([], [], [])
    model.eval()
    generator = torch.Generator().manual_seed(seed)
    z_p = torch.zeros(1, model.config.d_z) if neutral else torch.randn(1, model.config.d_z, generator=generator)
    z_p = z_p.to(device)

    ordered = sorted(score, key=lambda n: (n.onset, n.pitch))
    windows = render_windows(ordered, spec, max_length, overlap)
    if len(windows) > 1:
        logger.info(f"Rendering {len(ordered)} notes in {len(windows)} overlapping windows")

    sequences = []
    placed: List[Optional[PerformedNote]] = [None] * len(ordered)
    margins = [-1] * len(ordered)
    previous: Dict[int, float] = {}
    for start, end in windows:
        rebased = rebase_to_first_beat(ordered[start:end], spec)
        order = sorted(range(len(rebased)), key=lambda i: (onset_tick(rebased[i].onset, spec), rebased[i].pitch))
        seq, local = _render_window(model, [rebased[i] for i in order], spec, z_p, top_k, generator, device)
        sequences.append(seq)
        by_note = {start + order[k]: performed for k, performed in enumerate(local)}

        shared = [i for i in by_note if i in previous]
        offset = float(np.mean([previous[i] - by_note[i].onset for i in shared])) if shared else 0.0
        current = {}
        for i, performed in by_note.items():
            performed = PerformedNote(performed.pitch, max(0.0, performed.onset + offset),
                                      performed.duration, performed.velocity)
            current[i] = performed.onset
            margin = min(i - start, end - 1 - i)
            if margin > margins[i]:
                margins[i] = margin
                placed[i] = performed
        previous = current

    notes = sorted(placed, key=lambda n: (n.onset, n.pitch))
    return RenderResult(notes, sequences, windows)


# Export

def tokens_to_midi(seq: ECPSequence, spec: QuantizationSpec, out_path: str,
                   beat_period: float = 0.5) -> List[PerformedNote]:
    """Write a sequence as MIDI; score-only sequences play deadpan at `beat_period`"""
    if seq.score_only:
        notes = nominal_performance(decode_score(seq, spec), beat_period)
    else:
        notes = decode_performance(seq, spec)
    write_performance_midi(notes, out_path)
    return notes


def export_batch(results: Sequence[GenerationResult], spec: QuantizationSpec, out_dir: str,
                 prefix: str = "sample") -> str:
    """One .mid per result plus a token dump and a JSON manifest; returns the manifest path"""
    os.makedirs(out_dir, exist_ok=True)
    entries: List[Dict[str, Any]] = []
    for i, result in enumerate(results):
        midi_path = os.path.join(out_dir, f"{prefix}_{i:04d}.mid")
        write_performance_midi(result.notes, midi_path)
        entries.append({
            "file": os.path.basename(midi_path),
            "seed": result.seed,
            "top_k": result.top_k,
            "length": len(result.sequence),
            "notes": len(result.notes),
            "attempts": result.attempts,
            "diagnostics": [{"index": d.index, "rule": d.rule} for d in validate_grammar(result.sequence, spec)],
        })
    dump_path = os.path.join(out_dir, f"{prefix}s.ecp")
    write_token_dump([r.sequence for r in results], dump_path)
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        ujson.dump({"count": len(entries), "tokens": os.path.basename(dump_path), "samples": entries}, f, indent=2)
    logger.info(f"Exported {len(entries)} samples to {out_dir}")
    return manifest_path
