# prior_model.py - Autoregressive prior over Composer code-index sequences
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import Config, ModelConfig
from data_pipeline import SegmentedDataset, make_batches
from ecp_codec import QuantizationSpec, SpecMismatchError
from training import load_checkpoint, lr_at, make_optimizer, save_checkpoint, set_lr
from xmvae_model import XMVAE, NonFiniteLossError, causal_mask, sinusoidal_encoding

logger = logging.getLogger(__name__)

PAD_TARGET = -100


class CodePrior(nn.Module):
    """Causal Transformer over code indices; ids K and K + 1 are the BOS/EOS sentinels"""

    def __init__(self, K: int, d: int, layers: int, heads: int, ffn_size: int, dropout: float = 0.1):
        super().__init__()
        self.K = K
        self.d = d
        self.embed = nn.Embedding(K + 2, d)
        nn.init.normal_(self.embed.weight, std=0.02)
        layer = nn.TransformerEncoderLayer(d, heads, ffn_size, dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.head = nn.Linear(d, K + 2)
        self.dropout = nn.Dropout(dropout)

    @property
    def bos(self) -> int:
        return self.K

    @property
    def eos(self) -> int:
        return self.K + 1

    @classmethod
    def from_config(cls, config: Config) -> "CodePrior":
        m = config.model
        return cls(m.K, m.d, m.prior_layers, m.prior_heads, m.prior_ffn_size, m.dropout)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, L) ids to (B, L, K + 2) next-id logits"""
        L = tokens.shape[1]
        x = self.embed(tokens)
        x = self.dropout(x + sinusoidal_encoding(L, self.d, x.device, x.dtype))
        return self.head(self.encoder(x, mask=causal_mask(L, x.device)))

    @torch.no_grad()
    def log_prob(self, codes: Sequence[int]) -> float:
        """log p(codes, EOS) as the sum of the stepwise conditionals"""
        self.eval()
        device = self.embed.weight.device
        seq = torch.tensor([[self.bos, *codes, self.eos]], device=device)
        log_probs = F.log_softmax(self(seq[:, :-1]), dim=-1)
        return float(log_probs.gather(-1, seq[:, 1:].unsqueeze(-1)).sum())


@torch.no_grad()
def extract_codes(model: XMVAE, dataset: SegmentedDataset, spec: QuantizationSpec,
                  batch_size: int = 16, device: str = "cpu") -> List[List[int]]:
    """One code-index sequence per segment, in dataset order"""
    if model.spec_fingerprint != spec.fingerprint():
        raise SpecMismatchError(spec.fingerprint(), model.spec_fingerprint, "XMVAE checkpoint")
    model.eval()
    model.to(device)
    codes: List[Optional[List[int]]] = [None] * len(dataset)
    for batch in make_batches(dataset, batch_size, shuffle=False):
        batch = batch.to(device)
        _, indices, _, _ = model.composer.quantize(batch.score_ids, batch.beat_ids, batch.mask)
        for row, segment_index in enumerate(batch.segment_indices):
            n = int(batch.mask[row].sum())
            codes[segment_index] = indices[row, :n].tolist()
    logger.info(f"Extracted {len(codes)} code sequences")
    return codes


def code_batches(codes: Sequence[Sequence[int]], K: int, batch_size: int, shuffle: bool = True,
                 seed: int = 0):
    """(inputs, targets) pairs; inputs start with BOS, targets end with EOS, padding is ignored"""
    order = np.random.default_rng(seed).permutation(len(codes)) if shuffle else np.arange(len(codes))
    for start in range(0, len(order), batch_size):
        chunk = [list(codes[i]) for i in order[start:start + batch_size]]
        L = max(len(c) for c in chunk) + 1
        inputs = torch.full((len(chunk), L), K + 1, dtype=torch.long)
        targets = torch.full((len(chunk), L), PAD_TARGET, dtype=torch.long)
        for b, c in enumerate(chunk):
            inputs[b, : len(c) + 1] = torch.tensor([K, *c], dtype=torch.long)
            targets[b, : len(c) + 1] = torch.tensor([*c, K + 1], dtype=torch.long)
        yield inputs, targets


@torch.no_grad()
def perplexity(prior: CodePrior, codes: Sequence[Sequence[int]], batch_size: int = 16,
               device: str = "cpu") -> float:
    prior.eval()
    total, count = 0.0, 0
    for inputs, targets in code_batches(codes, prior.K, batch_size, shuffle=False):
        logits = prior(inputs.to(device))
        total += float(F.cross_entropy(logits.transpose(1, 2), targets.to(device),
                                       ignore_index=PAD_TARGET, reduction="sum"))
        count += int((targets != PAD_TARGET).sum())
    return math.exp(total / max(count, 1))


def fit_prior(codes: Sequence[Sequence[int]], config: Config, device: str = "cpu",
              valid_codes: Optional[Sequence[Sequence[int]]] = None,
              prior: Optional[CodePrior] = None) -> Tuple[CodePrior, List[Dict[str, float]]]:
    """Next-index cross-entropy training with the shared optimizer and schedule shape"""
    if not codes:
        raise ValueError("cannot fit a prior on an empty code corpus")
    training = config.training
    schedule = config.schedule.scaled(training.prior_epochs)
    prior = (prior or CodePrior.from_config(config)).to(device)
    optimizer = make_optimizer(prior.parameters(), training)

    history = []
    step = 0
    for epoch in range(1, training.prior_epochs + 1):
        lr = lr_at(epoch, schedule)
        set_lr(optimizer, lr)
        prior.train()
        epoch_loss, batches = 0.0, 0
        for inputs, targets in code_batches(codes, prior.K, training.prior_batch_size, True, config.SEED + epoch):
            optimizer.zero_grad(set_to_none=True)
            logits = prior(inputs.to(device))
            loss = F.cross_entropy(logits.transpose(1, 2), targets.to(device), ignore_index=PAD_TARGET)
            if not torch.isfinite(loss):
                raise NonFiniteLossError("prior", step, float(loss))
            loss.backward()
            torch.nn.utils.clip_grad_norm_(prior.parameters(), training.grad_clip)
            optimizer.step()
            epoch_loss += float(loss)
            batches += 1
            step += 1

        record = {"epoch": epoch, "lr": lr, "loss": epoch_loss / batches,
                  "perplexity": math.exp(epoch_loss / batches)}
        if valid_codes:
            record["valid_perplexity"] = perplexity(prior, valid_codes, training.prior_batch_size, device)
        history.append(record)
        logger.info(f"Prior epoch {epoch}: loss {record['loss']:.4f}, ppl {record['perplexity']:.2f}, lr {lr:.2e}")
    return prior, history


@torch.no_grad()
def sample_codes(prior: CodePrior, length: int, top_k: int, seed: int,
                 prime: Optional[Sequence[int]] = None, min_length: int = 2) -> List[int]:
    """Top-k ancestral sampling until EOS or `length` codes; prime codes are kept verbatim"""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    prime = list(prime or [])
    if len(prime) > length:
        raise ValueError(f"prime of {len(prime)} codes exceeds the length cap {length}")
    if any(not 0 <= c < prior.K for c in prime):
        raise ValueError("prime contains ids outside the codebook")

    prior.eval()
    device = prior.embed.weight.device
    generator = torch.Generator().manual_seed(seed)
    body = list(prime)
    while len(body) < length:
        tokens = torch.tensor([[prior.bos, *body]], device=device)
        logits = prior(tokens)[0, -1].float().cpu()
        logits[prior.bos] = float("-inf")
        if len(body) < min_length:
            logits[prior.eos] = float("-inf")
        k = min(top_k, prior.K + 1)
        top_values, top_indices = torch.topk(logits, k)
        if k == 1:
            choice = int(top_indices[0])
        else:
            probs = torch.softmax(top_values, dim=-1)
            choice = int(top_indices[torch.multinomial(probs, 1, generator=generator)])
        if choice == prior.eos:
            break
        body.append(choice)
    return body


def save_prior(path: str, prior: CodePrior, config: Config, spec: QuantizationSpec,
               source_hash: Optional[str] = None, epoch: int = 0) -> str:
    """Prior archive tagged with the hash of the XMVAE checkpoint its codes came from"""
    return save_checkpoint(path, "prior", prior.state_dict(), spec.fingerprint(), config.model,
                           config.training, epoch=epoch, source_hash=source_hash)


def load_prior(path: str, spec: QuantizationSpec) -> Tuple[CodePrior, Dict]:
    archive = load_checkpoint(path, spec, kinds=("prior",))
    m = ModelConfig(**archive["model_config"])
    prior = CodePrior(m.K, m.d, m.prior_layers, m.prior_heads, m.prior_ffn_size, m.dropout)
    prior.load_state_dict(archive["model_state"])
    prior.eval()
    return prior, archive
