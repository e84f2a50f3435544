# test_training.py - Learning-rate schedule, checkpoints, metrics log and the training loops
import logging
import os

import pandas as pd
import pytest
import torch

from config import LRSchedule, QuantizationConfig, TrainingConfig
from data_pipeline import TEST, AlignedCorpus, load_score_corpus, segment, split_by_piece
from ecp_codec import PerformedNote, SpecMismatchError, build_quantization_spec
from midi_io import write_performance_midi
from training import (
    METRIC_COLUMNS, EncodingReservoir, MetricsLog, TrainingStoppedError, beta_at, file_hash, load_checkpoint, lr_at,
    model_from_checkpoint, pretrain_composer, run_training, save_checkpoint,
)
from xmvae_model import XMVAE


@pytest.mark.parametrize("epoch,expected", [
    (0, 0.0), (5, 1e-4), (10, 2e-4), (55, 1.2e-4), (100, 4e-5), (150, 4e-5), (200, 4e-5),
])
def test_default_schedule(epoch, expected):
    assert lr_at(epoch) == pytest.approx(expected, rel=1e-9, abs=1e-15)


def test_schedule_bounds():
    with pytest.raises(TrainingStoppedError):
        lr_at(201)
    with pytest.raises(ValueError):
        lr_at(-1)


def test_schedule_is_continuous_at_the_knots():
    schedule = LRSchedule()
    for knot in (schedule.warmup_epochs, schedule.decay_end_epoch):
        assert lr_at(knot - 1e-9, schedule) == pytest.approx(lr_at(knot, schedule), rel=1e-6)


def test_beta_annealing():
    training = TrainingConfig(beta=0.2, beta_anneal_epochs=20)
    assert beta_at(1, training) == 0.0
    assert beta_at(11, training) == pytest.approx(0.1)
    assert beta_at(21, training) == pytest.approx(0.2)
    assert beta_at(80, training) == pytest.approx(0.2)
    assert beta_at(1, TrainingConfig(beta=0.2, beta_anneal_epochs=0)) == 0.2


def test_checkpoint_round_trip(tmp_path, config, spec):
    model = XMVAE(config.model, spec)
    path = save_checkpoint(str(tmp_path / "ckpt" / "model.pt"), "xmvae", model.state_dict(), spec.fingerprint(),
                           config.model, config.training, epoch=3, best_metric=1.5)
    archive = load_checkpoint(path, spec, kinds=("xmvae",))
    assert archive["epoch"] == 3
    assert archive["best_metric"] == 1.5
    restored = model_from_checkpoint(archive, spec)
    for key, value in model.state_dict().items():
        assert torch.equal(value, restored.state_dict()[key])
    # no temp files are left next to the checkpoint
    assert os.listdir(tmp_path / "ckpt") == ["model.pt"]


def test_checkpoint_guards(tmp_path, config, spec):
    model = XMVAE(config.model, spec)
    path = save_checkpoint(str(tmp_path / "model.pt"), "xmvae", model.state_dict(), spec.fingerprint(),
                           config.model)
    with pytest.raises(ValueError):
        load_checkpoint(path, spec, kinds=("prior",))
    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, build_quantization_spec(QuantizationConfig(velocity_bins=16)))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "missing.pt"))


def test_file_hash_changes_with_content(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    a.write_bytes(b"one")
    b.write_bytes(b"two")
    assert file_hash(str(a)) == file_hash(str(a))
    assert file_hash(str(a)) != file_hash(str(b))


def test_metrics_log_appends_rows(tmp_path):
    log = MetricsLog(str(tmp_path / "logs" / "metrics.csv"))
    log.append({"epoch": 1, "step": 1, "split": "train", "total": 3.0})
    log.append({"epoch": 1, "step": 2, "split": "train", "total": 2.5, "unknown": 9})
    frame = log.read()
    assert list(frame.columns) == METRIC_COLUMNS
    assert frame["total"].tolist() == [3.0, 2.5]
    MetricsLog(None).append({"epoch": 1})


def test_run_training_writes_checkpoints(dataset, config, spec):
    config.training.valid_fraction = 0.2
    out_dir = os.path.join(config.OUTPUT_DIR, "xmvae")
    result = run_training(dataset, config, spec, out_dir=out_dir)
    assert [h["epoch"] for h in result.history] == [1, 2, 3, 4]
    assert all("valid_total" in h for h in result.history)
    assert os.path.exists(result.last_checkpoint)
    assert os.path.exists(result.best_checkpoint)
    archive = load_checkpoint(result.last_checkpoint, spec, kinds=("xmvae",))
    assert archive["epoch"] == 4
    assert archive["optimizer_state"] is not None

    metrics = pd.read_csv(os.path.join(out_dir, "xmvae_metrics.csv"))
    assert set(metrics["split"]) == {"train", "valid"}
    assert metrics["rss_mb"].gt(0).all()
    # lr follows the schedule: warmup ends at epoch 1, floor from epoch 3
    lrs = [h["lr"] for h in result.history]
    assert lrs[0] == pytest.approx(config.schedule.peak_lr)
    assert lrs[2] == pytest.approx(config.schedule.floor_lr)


def test_resume_continues_after_saved_epoch(dataset, config, spec):
    out_dir = os.path.join(config.OUTPUT_DIR, "first")
    config.training.epochs = 2
    first = run_training(dataset, config, spec, out_dir=out_dir)
    config.training.epochs = 4
    resumed = run_training(dataset, config, spec, out_dir=os.path.join(config.OUTPUT_DIR, "second"),
                           resume=first.last_checkpoint)
    assert [h["epoch"] for h in resumed.history] == [3, 4]


def test_training_without_output_dir(dataset, config, spec):
    config.training.epochs = 1
    config.training.valid_fraction = 0.0
    result = run_training(dataset, config, spec)
    assert result.last_checkpoint is None
    assert len(result.history) == 1
    assert "valid_total" not in result.history[0]


def test_pretrain_composer_then_train(tmp_path, config, spec, dataset):
    scores = tmp_path / "scores"
    scores.mkdir()
    for name in ("a", "b", "c"):
        write_performance_midi([PerformedNote(55 + i % 7, 0.25 * i, 0.25, 64) for i in range(24)],
                               str(scores / f"{name}.mid"))
    score_dataset = load_score_corpus(str(scores), spec, config.WINDOW, config.STRIDE)
    config.training.epochs = 2
    pretrained = pretrain_composer(score_dataset, config, spec, out_dir=os.path.join(config.OUTPUT_DIR, "composer"))
    archive = load_checkpoint(pretrained.best_checkpoint, spec, kinds=("composer",))
    assert all(not key.startswith("pianist") for key in archive["model_state"])
    assert "perf_ce" not in pretrained.history[0]

    result = run_training(dataset, config, spec, out_dir=os.path.join(config.OUTPUT_DIR, "joint"),
                          resume=pretrained.best_checkpoint)
    assert [h["epoch"] for h in result.history] == [1, 2]


def test_training_needs_train_segments(dataset, config, spec):
    held_out = split_by_piece(dataset, 0.5, seed=0).subset(TEST)
    with pytest.raises(ValueError):
        run_training(held_out, config, spec)


def test_small_corpus_trains_without_validation(corpus, config, spec, caplog):
    two_pieces = segment(AlignedCorpus(pieces=corpus.pieces[:2], source_path="memory"), config.WINDOW,
                         config.STRIDE, spec)
    config.training.epochs = 1
    with caplog.at_level(logging.INFO, logger="training"):
        result = run_training(two_pieces, config, spec)
    assert "valid_total" not in result.history[0]
    assert any("Skipping validation" in r.getMessage() for r in caplog.records)


def test_reservoir_keeps_everything_until_full():
    reservoir = EncodingReservoir(10)
    reservoir.add(torch.arange(8.0).reshape(4, 2))
    reservoir.add(torch.arange(8.0, 12.0).reshape(2, 2))
    assert len(reservoir) == 6
    assert reservoir.samples[:, 0].tolist() == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]


def test_reservoir_samples_the_whole_epoch():
    from_last_batch = 0
    for seed in range(200):
        reservoir = EncodingReservoir(10, torch.Generator().manual_seed(seed))
        for b in range(3):
            reservoir.add(torch.full((8, 2), float(b)))
        assert len(reservoir) == 10
        assert reservoir.seen == 24
        from_last_batch += int((reservoir.samples[:, 0] == 2.0).sum())
    # the last of three equal batches holds a third of the sample on average
    assert from_last_batch / 2000 == pytest.approx(1 / 3, abs=0.05)


def test_pretrained_composer_starts_with_lower_score_loss(dataset, config, spec):
    config.training.epochs = 4
    pretrained = pretrain_composer(dataset, config, spec, out_dir=os.path.join(config.OUTPUT_DIR, "composer"))

    config.training.epochs = 1
    warm = run_training(dataset, config, spec, resume=pretrained.last_checkpoint)
    cold = run_training(dataset, config, spec)
    assert warm.history[0]["score_ce"] < cold.history[0]["score_ce"]
