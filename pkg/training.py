# training.py - Optimization loops, learning-rate schedule and checkpoints
import hashlib
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional

import pandas as pd
import psutil
import torch

from config import Config, LRSchedule, ModelConfig, TrainingConfig
from data_pipeline import TRAIN, VALID, SegmentedDataset, make_batches, split_by_piece
from ecp_codec import QuantizationSpec, SpecMismatchError
from xmvae_model import XMVAE, NonFiniteLossError, compute_losses, train_step

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "epoch", "step", "split", "lr", "beta", "total", "loss_s", "loss_p", "score_ce", "perf_ce",
    "commitment", "kl", "score_accuracy", "perf_accuracy", "rss_mb",
]


class TrainingStoppedError(ValueError):
    """Raised when the schedule is queried past its stop epoch"""


def lr_at(epoch: float, schedule: Optional[LRSchedule] = None) -> float:
    """Linear warmup to the peak, linear decay to the floor, then constant until the stop epoch"""
    s = schedule or LRSchedule()
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch > s.stop_epoch:
        raise TrainingStoppedError(f"training stopped at epoch {s.stop_epoch}; asked for {epoch}")
    if epoch < s.warmup_epochs:
        return s.peak_lr * epoch / s.warmup_epochs
    if epoch < s.decay_end_epoch:
        span = s.decay_end_epoch - s.warmup_epochs
        return s.peak_lr + (s.floor_lr - s.peak_lr) * (epoch - s.warmup_epochs) / span
    return s.floor_lr


def beta_at(epoch: int, training: TrainingConfig) -> float:
    """KL weight ramped linearly from 0 at epoch 1 to its full value"""
    if training.beta_anneal_epochs <= 0:
        return training.beta
    return training.beta * min(1.0, (epoch - 1) / training.beta_anneal_epochs)


def make_optimizer(params: Iterable[torch.nn.Parameter], training: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=0.0, betas=(training.adam_beta1, training.adam_beta2), eps=training.adam_eps)


def set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def epoch_schedule(config: Config, epochs: int) -> LRSchedule:
    if epochs == config.schedule.stop_epoch:
        return config.schedule
    logger.info(f"Stretching the learning-rate schedule from {config.schedule.stop_epoch} to {epochs} epochs")
    return config.schedule.scaled(epochs)


# Checkpoints

def file_hash(path: str) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(path: str, kind: str, model_state: Dict[str, Any], spec_fingerprint: str,
                    model_config: ModelConfig, training_config: Optional[TrainingConfig] = None,
                    optimizer_state: Optional[Dict[str, Any]] = None, epoch: int = 0,
                    best_metric: Optional[float] = None, source_hash: Optional[str] = None) -> str:
    """Write a checkpoint archive atomically (temp file in the target directory, then rename)"""
    archive = {
        "kind": kind,
        "model_state": model_state,
        "optimizer_state": optimizer_state,
        "epoch": epoch,
        "model_config": asdict(model_config),
        "training_config": asdict(training_config) if training_config is not None else None,
        "spec_fingerprint": spec_fingerprint,
        "saved_at": datetime.now().isoformat(),
        "best_metric": best_metric,
        "source_hash": source_hash,
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(archive, f)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.debug(f"Saved {kind} checkpoint (epoch {epoch}) to {path}")
    return path


def load_checkpoint(path: str, spec: Optional[QuantizationSpec] = None,
                    kinds: Optional[Iterable[str]] = None) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    archive = torch.load(path, map_location="cpu", weights_only=False)
    if kinds is not None and archive.get("kind") not in set(kinds):
        raise ValueError(f"{path} holds a {archive.get('kind')!r} checkpoint, expected one of {sorted(kinds)}")
    if spec is not None and archive.get("spec_fingerprint") != spec.fingerprint():
        raise SpecMismatchError(spec.fingerprint(), archive.get("spec_fingerprint"), f"checkpoint {path}")
    return archive


def model_from_checkpoint(archive: Dict[str, Any], spec: QuantizationSpec) -> XMVAE:
    model = XMVAE(ModelConfig(**archive["model_config"]), spec)
    if archive["kind"] == "composer":
        model.composer.load_state_dict(archive["model_state"])
    else:
        model.load_state_dict(archive["model_state"])
    return model


# Metrics log

class MetricsLog:
    """Appends one CSV row per logged step"""

    def __init__(self, path: Optional[str]):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, row: Dict[str, Any]):
        if not self.path:
            return
        frame = pd.DataFrame([{column: row.get(column) for column in METRIC_COLUMNS}], columns=METRIC_COLUMNS)
        frame.to_csv(self.path, mode="a", header=not os.path.exists(self.path), index=False)

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.path)


def rss_mb() -> float:
    return psutil.Process().memory_info().rss / (1024 * 1024)


@dataclass
class TrainingResult:
    model: XMVAE
    history: List[Dict[str, float]] = field(default_factory=list)
    last_checkpoint: Optional[str] = None
    best_checkpoint: Optional[str] = None


@torch.no_grad()
def evaluate(model: XMVAE, dataset: SegmentedDataset, batch_size: int, beta: float, device: str = "cpu",
             composer_only: bool = False) -> Dict[str, float]:
    """Mean teacher-forced loss terms over a dataset in eval mode"""
    model.eval()
    sums: Dict[str, float] = {}
    batches = 0
    for batch in make_batches(dataset, batch_size, shuffle=False):
        batch = batch.to(device)
        losses = compute_losses(batch, model(batch, composer_only), model.config.alpha, beta, composer_only)
        for name, value in losses.items():
            sums[name] = sums.get(name, 0.0) + float(value)
        batches += 1
    return {name: total / max(batches, 1) for name, total in sums.items()}


class EncodingReservoir:
    """Uniform sample of the encoder outputs seen in one epoch, at most `capacity` rows"""

    def __init__(self, capacity: int, generator: Optional[torch.Generator] = None):
        if capacity <= 0:
            raise ValueError("reservoir capacity must be positive")
        self.capacity = capacity
        self.generator = generator
        self.samples: Optional[torch.Tensor] = None
        self.seen = 0

    def __len__(self) -> int:
        return 0 if self.samples is None else int(self.samples.shape[0])

    @torch.no_grad()
    def add(self, vectors: torch.Tensor):
        vectors = vectors.detach().reshape(-1, vectors.shape[-1])
        if self.samples is None:
            self.samples = vectors[:0].clone()
        room = self.capacity - len(self)
        if room > 0:
            self.samples = torch.cat([self.samples, vectors[:room]])
            self.seen += min(room, vectors.shape[0])
            vectors = vectors[room:]
        if vectors.shape[0] == 0:
            return
        # row n (1-based, counted over the epoch) lands in a random slot with probability capacity / n
        positions = self.seen + torch.arange(1, vectors.shape[0] + 1, dtype=torch.float64)
        slots = (torch.rand(vectors.shape[0], generator=self.generator, dtype=torch.float64) * positions).long()
        for row, slot in enumerate(slots.tolist()):
            if slot < self.capacity:
                self.samples[slot] = vectors[row]
        self.seen += vectors.shape[0]


def _validation_split(dataset: SegmentedDataset, config: Config):
    train = dataset.subset(TRAIN)
    if len(train) == 0:
        raise ValueError("no training segments")
    fraction = config.training.valid_fraction
    if fraction <= 0:
        return train, None
    pieces = len(train.piece_ids)
    if pieces * fraction < 1 - 1e-9:
        logger.info(f"Skipping validation: {pieces} training piece(s) are too few to hold out {fraction:.0%}")
        return train, None
    marked = split_by_piece(train, fraction, config.SEED, holdout_label=VALID)
    return marked.subset(TRAIN), marked.subset(VALID)


@torch.no_grad()
def _init_codebook(model: XMVAE, train: SegmentedDataset, batch_size: int, device: str, seed: int):
    batch = next(make_batches(train, batch_size, shuffle=True, seed=seed)).to(device)
    model.eval()
    z_e = model.composer.encode(batch.score_ids, batch.beat_ids, batch.mask)
    model.composer.quantizer.init_from_samples(z_e[batch.mask], torch.Generator().manual_seed(seed))


def _fit(model: XMVAE, train: SegmentedDataset, valid: Optional[SegmentedDataset], config: Config,
         spec: QuantizationSpec, device: str, out_dir: str, kind: str, start_epoch: int = 1,
         optimizer_state: Optional[Dict[str, Any]] = None) -> TrainingResult:
    composer_only = kind == "composer"
    training = config.training
    schedule = epoch_schedule(config, training.epochs)
    params = model.composer_parameters() if composer_only else model.parameters()
    optimizer = make_optimizer(params, training)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    metrics = MetricsLog(os.path.join(out_dir, f"{kind}_metrics.csv") if out_dir else None)
    last_path = os.path.join(out_dir, f"{kind}_last.pt") if out_dir else None
    best_path = os.path.join(out_dir, f"{kind}_best.pt") if out_dir else None
    generator = torch.Generator().manual_seed(config.SEED)

    result = TrainingResult(model=model)
    best = float("inf")
    step = 0
    for epoch in range(start_epoch, training.epochs + 1):
        lr = lr_at(epoch, schedule)
        set_lr(optimizer, lr)
        beta = beta_at(epoch, training)
        totals: Dict[str, float] = {}
        batches = 0
        reservoir = EncodingReservoir(training.reseed_pool_size, generator)

        for batch in make_batches(train, training.batch_size, shuffle=True, seed=config.SEED + epoch):
            batch = batch.to(device)
            try:
                record = train_step(model, batch, optimizer, beta, training.grad_clip, step, composer_only)
            except NonFiniteLossError as e:
                logger.error(f"{e}; last good checkpoint kept at {last_path}")
                raise
            step += 1
            batches += 1
            for name, value in record.items():
                totals[name] = totals.get(name, 0.0) + value
            with torch.no_grad():
                reservoir.add(model.composer.encode(batch.score_ids, batch.beat_ids, batch.mask)[batch.mask])
            if step % training.log_every_steps == 0:
                metrics.append({"epoch": epoch, "step": step, "split": TRAIN, "lr": lr, "rss_mb": rss_mb(), **record})

        means = {name: total / max(batches, 1) for name, total in totals.items()}
        reseeded = model.composer.quantizer.reseed_dead_codes(reservoir.samples, generator) if len(reservoir) else 0
        if reseeded:
            logger.info(f"Reseeded {reseeded} dead codebook entries")

        monitored = means.get("total", float("inf"))
        if valid is not None and len(valid):
            valid_means = evaluate(model, valid, training.batch_size, beta, device, composer_only)
            metrics.append({"epoch": epoch, "step": step, "split": VALID, "lr": lr, "rss_mb": rss_mb(), **valid_means})
            monitored = valid_means["total"]
            means["valid_total"] = monitored

        means.update(epoch=epoch, lr=lr)
        result.history.append(means)
        logger.info(
            f"[{kind}] epoch {epoch}/{training.epochs} lr {lr:.2e} beta {beta:.3f} "
            f"total {means.get('total', float('nan')):.4f} score_ce {means.get('score_ce', float('nan')):.4f} "
            f"perf_ce {means.get('perf_ce', float('nan')):.4f} commit {means.get('commitment', float('nan')):.4f} "
            f"kl {means.get('kl', float('nan')):.4f} rss {rss_mb():.0f}MB"
        )

        if out_dir:
            state = model.composer.state_dict() if composer_only else model.state_dict()
            save_checkpoint(last_path, kind, state, spec.fingerprint(), model.config, training,
                            optimizer.state_dict(), epoch, monitored)
            result.last_checkpoint = last_path
            if monitored < best:
                best = monitored
                save_checkpoint(best_path, kind, state, spec.fingerprint(), model.config, training,
                                optimizer.state_dict(), epoch, monitored)
                result.best_checkpoint = best_path
    return result


def run_training(dataset: SegmentedDataset, config: Config, spec: QuantizationSpec, device: str = "cpu",
                 out_dir: Optional[str] = None, resume: Optional[str] = None) -> TrainingResult:
    """Joint XMVAE training; `resume` takes an xmvae checkpoint or a pretrained composer checkpoint"""
    torch.manual_seed(config.SEED)
    train, valid = _validation_split(dataset, config)
    logger.info(f"Training on {len(train)} segments, validating on {len(valid) if valid else 0}")

    model = XMVAE(config.model, spec).to(device)
    start_epoch, optimizer_state = 1, None
    if resume:
        archive = load_checkpoint(resume, spec, kinds=("xmvae", "composer"))
        if archive["kind"] == "composer":
            model.composer.load_state_dict(archive["model_state"])
            logger.info(f"Initialized Composer from pretrained checkpoint {resume}")
        else:
            model.load_state_dict(archive["model_state"])
            start_epoch = archive["epoch"] + 1
            optimizer_state = archive["optimizer_state"]
            logger.info(f"Resuming from {resume} at epoch {start_epoch}")
    else:
        _init_codebook(model, train, config.training.batch_size, device, config.SEED)

    return _fit(model, train, valid, config, spec, device, out_dir, "xmvae", start_epoch, optimizer_state)


def pretrain_composer(score_dataset: SegmentedDataset, config: Config, spec: QuantizationSpec,
                      device: str = "cpu", out_dir: Optional[str] = None) -> TrainingResult:
    """Train only the Composer objective on score-only sequences"""
    torch.manual_seed(config.SEED)
    train, valid = _validation_split(score_dataset, config)
    logger.info(f"Pretraining the Composer on {len(train)} score-only segments")
    model = XMVAE(config.model, spec).to(device)
    _init_codebook(model, train, config.training.batch_size, device, config.SEED)
    return _fit(model, train, valid, config, spec, device, out_dir, "composer")
