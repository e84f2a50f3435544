# xmvae_model.py - Two-branch XMVAE: Composer (VQ-VAE over score tokens) and Pianist (VAE over performance)
import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import ModelConfig
from data_pipeline import Batch
from ecp_codec import IGNORE, QuantizationSpec

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term becomes NaN or infinite"""

    def __init__(self, term: str, step: int, value: float):
        self.term = term
        self.step = step
        super().__init__(f"non-finite {term} loss ({value}) at step {step}")


def sinusoidal_encoding(length: int, d: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Vanilla sinusoidal position encoding, (length, d)"""
    position = torch.arange(length, device=device, dtype=dtype).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, d, 2, device=device, dtype=dtype) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d, device=device, dtype=dtype)
    pe[:, 0::2] = torch.sin(position * div_term)
    pe[:, 1::2] = torch.cos(position * div_term)[:, : d // 2]
    return pe


def causal_mask(length: int, device=None) -> torch.Tensor:
    """True above the diagonal (future steps are not attended)"""
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)


def attention_masks(beat_ids: torch.Tensor, mask: torch.Tensor, heads: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Global and beat-restricted boolean attention masks, (B*heads, T, T), True = blocked.

    Padded keys are blocked everywhere; the diagonal stays open so padded
    queries never end up with an empty attention row.
    """
    B, T = beat_ids.shape
    diagonal = torch.eye(T, dtype=torch.bool, device=beat_ids.device).unsqueeze(0)
    key_ok = mask.unsqueeze(1).expand(B, T, T)
    same_beat = beat_ids.unsqueeze(2) == beat_ids.unsqueeze(1)
    global_blocked = ~(key_ok | diagonal)
    beat_blocked = ~((key_ok & same_beat) | diagonal)
    return (
        global_blocked.repeat_interleave(heads, dim=0),
        beat_blocked.repeat_interleave(heads, dim=0),
    )


class CompoundEmbedding(nn.Module):
    """Sum of per-sub-token embedding tables"""

    def __init__(self, vocab_sizes: Sequence[int], d: int):
        super().__init__()
        self.vocab_sizes = tuple(vocab_sizes)
        self.tables = nn.ModuleList(nn.Embedding(v, d) for v in self.vocab_sizes)
        for table in self.tables:
            nn.init.normal_(table.weight, std=0.02)

    def parts(self, ids: torch.Tensor) -> torch.Tensor:
        """(..., 4) ids to (..., 4, d) per-sub-token embeddings"""
        for j, v in enumerate(self.vocab_sizes):
            column = ids[..., j]
            if column.numel() and (column.min() < 0 or column.max() >= v):
                raise ValueError(f"sub-token {j} id out of vocabulary [0, {v})")
        return torch.stack([table(ids[..., j]) for j, table in enumerate(self.tables)], dim=-2)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.parts(ids).sum(dim=-2)


class PVEmbedding(nn.Module):
    """Learned affine map of the 4 real-valued expressive parameters"""

    def __init__(self, d: int):
        super().__init__()
        self.linear = nn.Linear(4, d)
        # velocity lives on 0-127, the ratios and beat offsets near 1
        self.register_buffer("scale", torch.tensor([1.0, 1.0 / 127.0, 1.0, 1.0]))

    def forward(self, pv: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(pv).all():
            raise ValueError("non-finite expressive parameters")
        return self.linear(pv * self.scale.to(pv.dtype))


class MultiscaleEncoderLayer(nn.Module):
    """Global and beat-masked self-attention in parallel, averaged, then feed-forward"""

    def __init__(self, d: int, heads: int, ffn_size: int, dropout: float, use_beat_attention: bool = True):
        super().__init__()
        self.global_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.beat_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True) \
            if use_beat_attention else None
        self.ff = nn.Sequential(nn.Linear(d, ffn_size), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn_size, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def attention_sublayers(self, x, global_mask, beat_mask) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        g, _ = self.global_attn(x, x, x, attn_mask=global_mask, need_weights=False)
        if self.beat_attn is None:
            return g, None
        b, _ = self.beat_attn(x, x, x, attn_mask=beat_mask, need_weights=False)
        return g, b

    def forward(self, x, global_mask, beat_mask):
        g, b = self.attention_sublayers(x, global_mask, beat_mask)
        attended = g if b is None else 0.5 * (g + b)
        x = self.norm1(x + self.dropout(attended))
        return self.norm2(x + self.dropout(self.ff(x)))


class MultiscaleEncoder(nn.Module):
    def __init__(self, d: int, layers: int, heads: int, ffn_size: int, dropout: float,
                 use_beat_attention: bool = True):
        super().__init__()
        self.heads = heads
        self.layers = nn.ModuleList(
            MultiscaleEncoderLayer(d, heads, ffn_size, dropout, use_beat_attention) for _ in range(layers)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, features: torch.Tensor, beat_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if beat_ids.shape != features.shape[:2] or mask.shape != features.shape[:2]:
            raise ValueError(f"beat_ids {tuple(beat_ids.shape)} / mask {tuple(mask.shape)} "
                             f"do not match features {tuple(features.shape[:2])}")
        B, T, d = features.shape
        global_mask, beat_mask = attention_masks(beat_ids, mask, self.heads)
        x = self.dropout(features + sinusoidal_encoding(T, d, features.device, features.dtype))
        for layer in self.layers:
            x = layer(x, global_mask, beat_mask)
        return x


class _StraightThrough(torch.autograd.Function):
    """Forward returns the codes exactly; backward hands the gradient to the encoder output"""

    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


class VectorQuantizerEMA(nn.Module):
    """Codebook of K vectors maintained by exponential moving averages"""

    def __init__(self, K: int, d_z: int, decay: float = 0.99, eps: float = 1e-5, dead_threshold: float = 1e-3):
        super().__init__()
        if K <= 0:
            raise ValueError("codebook must not be empty")
        self.K = K
        self.d_z = d_z
        self.decay = decay
        self.eps = eps
        self.dead_threshold = dead_threshold
        embedding = torch.empty(K, d_z).uniform_(-1.0 / K, 1.0 / K)
        self.register_buffer("embedding", embedding)
        self.register_buffer("ema_cluster_size", torch.ones(K))
        self.register_buffer("ema_vector_sum", embedding.clone())

    def nearest(self, vectors: torch.Tensor) -> torch.Tensor:
        """Index of the closest code per row by exact squared distance; ties go to the lowest index"""
        flat = vectors.reshape(-1, self.d_z)
        codes = self.embedding.to(flat.dtype)
        chunk = max(1, (1 << 24) // (self.K * self.d_z))
        indices = [
            ((flat[i:i + chunk, None, :] - codes[None]) ** 2).sum(-1).argmin(dim=1)
            for i in range(0, flat.shape[0], chunk)
        ]
        if not indices:
            return torch.zeros(vectors.shape[:-1], dtype=torch.long, device=vectors.device)
        return torch.cat(indices).reshape(vectors.shape[:-1])

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        return F.embedding(indices, self.embedding)

    def forward(self, z_e: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (straight-through codes, indices, codes)"""
        with torch.no_grad():
            indices = self.nearest(z_e.detach())
            z_q = self.lookup(indices).to(z_e.dtype)
        return _StraightThrough.apply(z_e, z_q), indices, z_q

    @torch.no_grad()
    def ema_update(self, vectors: torch.Tensor, indices: torch.Tensor, mask: Optional[torch.Tensor] = None):
        if mask is not None:
            vectors, indices = vectors[mask], indices[mask]
        vectors = vectors.reshape(-1, self.d_z).to(self.embedding.dtype)
        indices = indices.reshape(-1)
        counts = torch.bincount(indices, minlength=self.K).to(self.embedding.dtype)
        sums = torch.zeros_like(self.embedding).index_add_(0, indices, vectors)

        self.ema_cluster_size.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.ema_vector_sum.mul_(self.decay).add_(sums, alpha=1 - self.decay)

        # Laplace smoothing keeps unused codes away from a zero division
        n = self.ema_cluster_size.sum()
        smoothed = (self.ema_cluster_size + self.eps) / (n + self.K * self.eps) * n
        self.embedding.copy_(self.ema_vector_sum / smoothed.unsqueeze(1))

    @torch.no_grad()
    def init_from_samples(self, samples: torch.Tensor, generator: Optional[torch.Generator] = None):
        samples = samples.reshape(-1, self.d_z).to(self.embedding.dtype)
        picks = torch.randint(samples.shape[0], (self.K,), generator=generator)
        if samples.shape[0] >= self.K:
            picks = torch.randperm(samples.shape[0], generator=generator)[: self.K]
        self.embedding.copy_(samples[picks])
        self.ema_cluster_size.fill_(1.0)
        self.ema_vector_sum.copy_(self.embedding)

    @torch.no_grad()
    def reseed_dead_codes(self, samples: torch.Tensor, generator: Optional[torch.Generator] = None) -> int:
        """Move codes whose EMA count fell below the threshold onto random encoder outputs"""
        dead = (self.ema_cluster_size < self.dead_threshold).nonzero(as_tuple=True)[0]
        if dead.numel() == 0 or samples.numel() == 0:
            return 0
        samples = samples.reshape(-1, self.d_z).to(self.embedding.dtype)
        picks = torch.randint(samples.shape[0], (dead.numel(),), generator=generator)
        self.embedding[dead] = samples[picks]
        self.ema_cluster_size[dead] = 1.0
        self.ema_vector_sum[dead] = samples[picks]
        return int(dead.numel())


class SubTokenDecoder(nn.Module):
    """Autoregressive decoder along the 4 sub-tokens of one step, memory = the step's hidden state"""

    def __init__(self, d: int, layers: int, heads: int, ffn_size: int, dropout: float):
        super().__init__()
        self.sos = nn.Parameter(torch.randn(d) * 0.02)
        layer = nn.TransformerDecoderLayer(d, heads, ffn_size, dropout, batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, layers)

    def forward(self, hidden: torch.Tensor, parts: torch.Tensor) -> torch.Tensor:
        """hidden (N, d), parts (N, L, d) -> (N, L + 1, d)"""
        N, L, d = parts.shape
        x = torch.cat([self.sos.to(parts.dtype).expand(N, 1, d), parts], dim=1)
        x = x + sinusoidal_encoding(L + 1, d, parts.device, parts.dtype)
        return self.decoder(x, hidden.unsqueeze(1), tgt_mask=causal_mask(L + 1, parts.device))


class OrthogonalDecoder(nn.Module):
    """Temporal decoder over steps plus sub-token decoder within each step"""

    def __init__(self, embed: CompoundEmbedding, d: int, temporal_layers: int, subtoken_layers: int,
                 heads: int, ffn_size: int, dropout: float, use_subtoken_decoder: bool = True):
        super().__init__()
        self.embed = embed
        self.d = d
        self.sos = nn.Parameter(torch.randn(d) * 0.02)
        layer = nn.TransformerDecoderLayer(d, heads, ffn_size, dropout, batch_first=True)
        self.temporal = nn.TransformerDecoder(layer, temporal_layers)
        self.subtoken = SubTokenDecoder(d, subtoken_layers, heads, ffn_size, dropout) \
            if use_subtoken_decoder else None
        self.heads = nn.ModuleList(nn.Linear(d, v) for v in embed.vocab_sizes)
        self.dropout = nn.Dropout(dropout)

    def _temporal(self, inputs: torch.Tensor, memory: torch.Tensor, memory_padding: Optional[torch.Tensor],
                  extra: Optional[torch.Tensor]) -> torch.Tensor:
        B, T, d = inputs.shape
        x = torch.cat([self.sos.to(inputs.dtype).expand(B, 1, d), inputs], dim=1)[:, :T]
        if extra is not None:
            x = x + extra[:, :T]
        x = self.dropout(x + sinusoidal_encoding(T, d, x.device, x.dtype))
        return self.temporal(x, memory, tgt_mask=causal_mask(T, x.device),
                             memory_key_padding_mask=memory_padding)

    def forward(self, target_ids: torch.Tensor, memory: torch.Tensor,
                memory_padding: Optional[torch.Tensor] = None,
                extra: Optional[torch.Tensor] = None) -> List[torch.Tensor]:
        """Teacher-forced logits per sub-token, each (B, T, V_j)"""
        if memory.shape[0] != target_ids.shape[0]:
            raise ValueError("memory and targets disagree on batch size")
        parts = self.embed.parts(target_ids)
        B, T = target_ids.shape[:2]
        hidden = self._temporal(parts.sum(dim=2), memory, memory_padding, extra)
        if self.subtoken is None:
            return [head(hidden) for head in self.heads]
        out = self.subtoken(hidden.reshape(B * T, self.d), parts[:, :, :3].reshape(B * T, 3, self.d))
        out = out.reshape(B, T, 4, self.d)
        return [head(out[:, :, j]) for j, head in enumerate(self.heads)]

    def next_step_hidden(self, prefix_ids: torch.Tensor, memory: torch.Tensor,
                         memory_padding: Optional[torch.Tensor] = None,
                         extra: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Hidden state for step t given the t decoded steps in prefix_ids (B, t, 4)"""
        B, t = prefix_ids.shape[:2]
        if t:
            inputs = self.embed(prefix_ids)
            inputs = torch.cat([inputs, inputs.new_zeros(B, 1, self.d)], dim=1)
        else:
            inputs = memory.new_zeros(B, 1, self.d)
        return self._temporal(inputs, memory, memory_padding, extra)[:, t]

    def subtoken_step(self, hidden: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """Logits of sub-token j = prefix.shape[1] given the step's hidden state"""
        j = prefix.shape[1]
        if self.subtoken is None:
            return self.heads[j](hidden)
        if j:
            parts = torch.stack([self.embed.tables[k](prefix[:, k]) for k in range(j)], dim=1)
        else:
            parts = hidden.new_zeros(hidden.shape[0], 0, self.d)
        return self.heads[j](self.subtoken(hidden, parts)[:, j])


class Composer(nn.Module):
    """Score branch: multiscale encoder, vector quantizer, orthogonal score decoder"""

    def __init__(self, config: ModelConfig, vocab_sizes: Sequence[int]):
        super().__init__()
        self.embed = CompoundEmbedding(vocab_sizes, config.d)
        self.encoder = MultiscaleEncoder(config.d, config.encoder_layers, config.heads, config.ffn_size,
                                         config.dropout, config.use_beat_attention)
        self.to_latent = nn.Linear(config.d, config.d_z)
        self.quantizer = VectorQuantizerEMA(config.K, config.d_z, config.ema_decay, config.ema_eps,
                                            config.dead_code_threshold)
        self.memory_proj = nn.Linear(config.d_z, config.d)
        self.decoder = OrthogonalDecoder(self.embed, config.d, config.temporal_decoder_layers,
                                         config.subtoken_decoder_layers, config.heads, config.ffn_size,
                                         config.dropout, config.use_subtoken_decoder)

    def encode(self, score_ids, beat_ids, mask) -> torch.Tensor:
        return self.to_latent(self.encoder(self.embed(score_ids), beat_ids, mask))

    def quantize(self, score_ids, beat_ids, mask):
        z_e = self.encode(score_ids, beat_ids, mask)
        z_st, indices, z_q = self.quantizer(z_e)
        return z_st, indices, z_q, z_e

    def decode(self, score_ids, z_s, mask) -> List[torch.Tensor]:
        return self.decoder(score_ids, self.memory_proj(z_s), ~mask)


class Pianist(nn.Module):
    """Performance branch: multiscale encoder to a Gaussian latent, orthogonal performance decoder"""

    def __init__(self, config: ModelConfig, vocab_sizes: Sequence[int]):
        super().__init__()
        self.embed = CompoundEmbedding(vocab_sizes, config.d)
        self.pv_embed = PVEmbedding(config.d) if config.use_pv else None
        self.encoder = MultiscaleEncoder(config.d, config.encoder_layers, config.heads, config.ffn_size,
                                         config.dropout, config.use_beat_attention)
        self.to_mu = nn.Linear(config.d, config.d_z)
        self.to_logvar = nn.Linear(config.d, config.d_z)
        self.input_proj = nn.Linear(config.d_z, config.d)
        self.memory_proj = nn.Linear(config.d_z, config.d)
        self.zp_proj = nn.Linear(config.d_z, config.d)
        self.decoder = OrthogonalDecoder(self.embed, config.d, config.temporal_decoder_layers,
                                         config.subtoken_decoder_layers, config.heads, config.ffn_size,
                                         config.dropout, config.use_subtoken_decoder)

    def encode(self, perf_ids, pv, beat_ids, mask) -> Tuple[torch.Tensor, torch.Tensor]:
        """Posterior (mu, logvar) from the temporal mean of the encoder states"""
        features = self.embed(perf_ids)
        if self.pv_embed is not None:
            features = features + self.pv_embed(pv.to(features.dtype))
        states = self.encoder(features, beat_ids, mask)
        counts = mask.sum(dim=1, keepdim=True)
        if (counts == 0).any():
            raise ValueError("cannot encode an all-padding sequence")
        pooled = (states * mask.unsqueeze(-1).to(states.dtype)).sum(dim=1) / counts.to(states.dtype)
        return self.to_mu(pooled), self.to_logvar(pooled)

    def sample(self, mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
        if not self.training:
            return mu
        return mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)

    def conditioning(self, z_s: torch.Tensor, z_p: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(per-step decoder input addend, decoder memory)"""
        extra = self.input_proj(z_s)
        memory = self.memory_proj(z_s) + self.zp_proj(z_p).unsqueeze(1)
        return extra, memory

    def decode(self, perf_ids, z_s, z_p, mask) -> List[torch.Tensor]:
        if z_s.shape[:2] != perf_ids.shape[:2]:
            raise ValueError(f"z_s length {z_s.shape[1]} does not match {perf_ids.shape[1]} steps")
        extra, memory = self.conditioning(z_s, z_p)
        return self.decoder(perf_ids, memory, ~mask, extra)


class XMVAE(nn.Module):
    def __init__(self, config: ModelConfig, spec: QuantizationSpec):
        super().__init__()
        config.validate()
        self.config = config
        self.spec_fingerprint = spec.fingerprint()
        self.composer = Composer(config, spec.score_vocab_sizes)
        self.pianist = Pianist(config, spec.perf_vocab_sizes)

    def forward(self, batch: Batch, composer_only: bool = False) -> Dict[str, torch.Tensor]:
        z_st, indices, z_q, z_e = self.composer.quantize(batch.score_ids, batch.beat_ids, batch.mask)
        out = {
            "score_logits": self.composer.decode(batch.score_ids, z_st, batch.mask),
            "z_e": z_e,
            "z_q": z_q,
            "indices": indices,
        }
        if composer_only:
            return out
        mu, logvar = self.pianist.encode(batch.perf_ids, batch.pv, batch.beat_ids, batch.mask)
        z_p = self.pianist.sample(mu, logvar)
        # the Pianist reads z_s as fixed features
        out["perf_logits"] = self.pianist.decode(batch.perf_ids, z_st.detach(), z_p, batch.mask)
        out.update(mu=mu, logvar=logvar, z_p=z_p)
        return out

    def composer_parameters(self) -> Iterator[nn.Parameter]:
        return self.composer.parameters()

    def pianist_parameters(self) -> Iterator[nn.Parameter]:
        return self.pianist.parameters()


# Losses

def masked_cross_entropy(logits: Sequence[torch.Tensor], targets: torch.Tensor,
                         mask: torch.Tensor) -> Tuple[torch.Tensor, int, int]:
    """Sum over sub-tokens of the mean CE on real, non-IGNORE targets; plus (correct, total)"""
    total_loss = logits[0].sum() * 0.0
    correct, counted = 0, 0
    for j, lj in enumerate(logits):
        target = targets[..., j]
        valid = mask & (target != IGNORE)
        n = int(valid.sum())
        if n == 0:
            continue
        total_loss = total_loss + F.cross_entropy(lj[valid], target[valid])
        correct += int((lj[valid].argmax(dim=-1) == target[valid]).sum())
        counted += n
    return total_loss, correct, counted


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch"""
    return (0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)).sum(dim=-1).mean()


def commitment_loss(z_e: torch.Tensor, z_q: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    steps = mask.unsqueeze(-1).to(z_e.dtype)
    denom = steps.sum() * z_e.shape[-1]
    if denom == 0:
        return z_e.sum() * 0.0
    return (((z_e - z_q.detach()) ** 2) * steps).sum() / denom


def compute_losses(batch: Batch, out: Dict[str, torch.Tensor], alpha: float, beta: float,
                   composer_only: bool = False) -> Dict[str, torch.Tensor]:
    score_ce, score_correct, score_count = masked_cross_entropy(out["score_logits"], batch.score_ids, batch.mask)
    commitment = commitment_loss(out["z_e"], out["z_q"], batch.mask)
    loss_s = score_ce + alpha * commitment
    losses = {
        "score_ce": score_ce,
        "commitment": commitment,
        "loss_s": loss_s,
        "score_accuracy": torch.tensor(score_correct / score_count if score_count else 0.0),
    }
    if composer_only:
        losses["total"] = loss_s
        return losses

    perf_ce, perf_correct, perf_count = masked_cross_entropy(out["perf_logits"], batch.perf_ids, batch.mask)
    kl = kl_divergence(out["mu"], out["logvar"])
    loss_p = perf_ce + beta * kl
    losses.update(
        perf_ce=perf_ce,
        kl=kl,
        loss_p=loss_p,
        total=loss_s + loss_p,
        perf_accuracy=torch.tensor(perf_correct / perf_count if perf_count else 0.0),
    )
    return losses


def train_step(model: XMVAE, batch: Batch, optimizer: torch.optim.Optimizer, beta: float,
               grad_clip: float = 1.0, step: int = 0, composer_only: bool = False) -> Dict[str, float]:
    """One optimizer step on the joint (or Composer-only) objective, then the EMA codebook update"""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(batch, composer_only=composer_only)
    losses = compute_losses(batch, out, model.config.alpha, beta, composer_only)

    for name, value in losses.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(name, step, float(value))

    losses["total"].backward()
    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    if grad_clip and params:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()
    model.composer.quantizer.ema_update(out["z_e"].detach(), out["indices"], batch.mask)

    record = {name: float(value.detach()) for name, value in losses.items()}
    record["beta"] = beta
    return record
