#!/usr/bin/env python
# cli.py - Command-line entry point for tokenizing, training, generating, rendering and evaluating
import argparse
import logging
import os
import signal
import sys
from typing import List, Optional

import ujson

from config import Config, get_config

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

REQUIRED_MODULES = ["numpy", "scipy", "pandas", "torch", "pretty_midi", "matplotlib", "ujson", "psutil"]


def setup_signal_handlers():
    """Exit cleanly on SIGINT/SIGTERM; checkpoints are written atomically so none is left half-written"""
    def signal_handler(signum, frame):
        logger.info(f"Received signal {signum}, shutting down...")
        sys.exit(1)

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)


def check_dependencies() -> List[str]:
    missing = []
    for module in REQUIRED_MODULES:
        try:
            __import__(module)
        except ImportError:
            missing.append(module)
    if missing:
        logger.error(f"Missing required modules: {missing}")
        logger.error("Please install missing modules: pip install -r requirements.txt")
    return missing


def load_config(args: argparse.Namespace) -> Config:
    config = get_config()
    if args.config:
        config = Config.from_file(args.config, base=config)
    if args.seed is not None:
        config.SEED = args.seed
    return config.validate()


DATA_COMMANDS = {"tokenize", "prepare-data", "pretrain-composer", "train", "train-prior", "render"}


def resolve_data_paths(args: argparse.Namespace, config: Config) -> argparse.Namespace:
    """Relative corpus and prime paths found under DATA_ROOT resolve there; others stay as given"""
    names = ["prime"] + (["input"] if args.command in DATA_COMMANDS else [])
    for name in names:
        path = getattr(args, name, None)
        if not path or os.path.isabs(path):
            continue
        candidate = os.path.join(config.DATA_ROOT, path)
        if os.path.exists(candidate):
            logger.debug(f"Resolved {name} {path} to {candidate}")
            setattr(args, name, candidate)
    return args


def _spec(config: Config):
    from ecp_codec import build_quantization_spec
    return build_quantization_spec(config.quantization)


def _out(args: argparse.Namespace, config: Config, default: str) -> str:
    return args.out or os.path.join(config.OUTPUT_DIR, default)


def _aligned_dataset(config: Config, path: str, spec):
    """Segmented, split aligned dataset through the on-disk cache"""
    from cache_manager import DatasetCache
    from data_pipeline import load_alignment_corpus, segment, split_by_piece

    cache = DatasetCache(config)
    key = cache.dataset_key(path, spec, config.WINDOW, config.STRIDE, config.MIN_ALIGNMENT_RATE)

    def build():
        corpus = load_alignment_corpus(path, config.MIN_ALIGNMENT_RATE, config.WORKER_COUNT)
        return segment(corpus, config.WINDOW, config.STRIDE, spec, config.WORKER_COUNT)

    dataset = cache.get_or_build(key, build, spec, path, config.WINDOW, config.STRIDE)
    # splits depend on seed and fraction, which the cache key leaves out
    dataset = split_by_piece(dataset, config.TEST_FRACTION, config.SEED)
    cache.update_splits(key, dataset)
    return key, dataset


def _score_dataset(config: Config, path: str, spec):
    from cache_manager import DatasetCache
    from data_pipeline import load_score_corpus

    cache = DatasetCache(config)
    key = cache.dataset_key(path, spec, config.WINDOW, config.STRIDE, score_only=True)
    dataset = cache.get_or_build(
        key, lambda: load_score_corpus(path, spec, config.WINDOW, config.STRIDE, config.WORKER_COUNT),
        spec, path, config.WINDOW, config.STRIDE,
    )
    return key, dataset


def _read_score(path: str):
    from data_pipeline import load_score_file
    pieces = load_score_file(path)
    if not pieces:
        raise ValueError(f"no score found in {path}")
    return pieces[0][1]


# Subcommands

def cmd_tokenize(args, config: Config) -> int:
    from data_pipeline import load_alignment_corpus
    from ecp_codec import encode, rebase_to_first_beat, write_token_dump

    spec = _spec(config)
    if args.input.lower().endswith((".mid", ".midi")) or args.score_only:
        sequences = [encode(rebase_to_first_beat(_read_score(args.input), spec), None, spec)]
    else:
        corpus = load_alignment_corpus(args.input, config.MIN_ALIGNMENT_RATE, config.WORKER_COUNT)
        sequences = [encode(None, rebase_to_first_beat(p.notes, spec), spec) for p in corpus.pieces]
    out = _out(args, config, "tokens.ecp")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_token_dump(sequences, out)
    logger.info(f"Wrote {len(sequences)} sequence(s), {sum(len(s) for s in sequences)} steps to {out}")
    return 0


def cmd_detokenize(args, config: Config) -> int:
    from ecp_codec import read_token_dump
    from inference import tokens_to_midi

    spec = _spec(config)
    sequences = read_token_dump(args.input, spec)
    out = _out(args, config, "detokenized.mid")
    stem, ext = os.path.splitext(out)
    for i, seq in enumerate(sequences):
        path = out if len(sequences) == 1 else f"{stem}_{i:04d}{ext or '.mid'}"
        notes = tokens_to_midi(seq, spec, path)
        logger.info(f"Wrote {len(notes)} notes to {path}")
    return 0


def cmd_prepare_data(args, config: Config) -> int:
    spec = _spec(config)
    if args.scores:
        key, dataset = _score_dataset(config, args.input, spec)
    else:
        key, dataset = _aligned_dataset(config, args.input, spec)
    out = _out(args, config, "dataset.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    summary = {
        "cache_key": key,
        "source": os.path.abspath(args.input),
        "segments": len(dataset),
        "pieces": len(dataset.piece_ids),
        "splits": dataset.split_counts(),
        "spec_fingerprint": spec.fingerprint(),
    }
    with open(out, "w", encoding="utf-8") as f:
        ujson.dump(summary, f, indent=2)
    logger.info(f"Prepared {len(dataset)} segments from {len(dataset.piece_ids)} pieces: {dataset.split_counts()}")
    return 0


def cmd_pretrain_composer(args, config: Config) -> int:
    from training import pretrain_composer

    spec = _spec(config)
    _, dataset = _score_dataset(config, args.input, spec)
    result = pretrain_composer(dataset, config, spec, config.resolve_device(), _out(args, config, "composer"))
    logger.info(f"Composer checkpoint: {result.best_checkpoint}")
    return 0


def cmd_train(args, config: Config) -> int:
    from training import run_training

    spec = _spec(config)
    _, dataset = _aligned_dataset(config, args.input, spec)
    result = run_training(dataset, config, spec, config.resolve_device(), _out(args, config, "xmvae"), args.resume)
    logger.info(f"XMVAE checkpoints: last {result.last_checkpoint}, best {result.best_checkpoint}")
    return 0


def cmd_train_prior(args, config: Config) -> int:
    from data_pipeline import TEST, TRAIN
    from inference import load_xmvae
    from prior_model import extract_codes, fit_prior, save_prior
    from training import file_hash

    spec = _spec(config)
    device = config.resolve_device()
    _, dataset = _aligned_dataset(config, args.input, spec)
    model = load_xmvae(args.checkpoint, spec, device)
    batch_size = config.training.batch_size
    codes = extract_codes(model, dataset.subset(TRAIN), spec, batch_size, device)
    held_out = dataset.subset(TEST)
    valid = extract_codes(model, held_out, spec, batch_size, device) if len(held_out) else None
    prior, history = fit_prior(codes, config, device, valid)
    out = _out(args, config, os.path.join("prior", "prior.pt"))
    save_prior(out, prior, config, spec, file_hash(args.checkpoint), epoch=len(history))
    logger.info(f"Prior checkpoint: {out}")
    return 0


def cmd_generate(args, config: Config) -> int:
    from data_pipeline import load_alignment_corpus
    from inference import export_batch, generate_primed, load_xmvae, prime_from_piece
    from prior_model import load_prior

    spec = _spec(config)
    device = config.resolve_device()
    model = load_xmvae(args.checkpoint, spec, device)
    prior, _ = load_prior(args.prior, spec)
    prior.to(device)
    top_k = args.top_k or config.TOP_K
    length = args.length or config.GENERATION_LENGTH

    prime = None
    if args.prime:
        piece = load_alignment_corpus(args.prime).pieces[0]
        prime = prime_from_piece(piece.notes, spec, args.prime_beats)

    # seeds spaced so retry seeds of one sample never collide with the next sample
    stride = config.GENERATION_RETRIES + 1
    results = [
        generate_primed(model, prior, spec, prime, length, top_k, config.SEED + i * stride,
                        config.GENERATION_RETRIES, device)
        for i in range(args.n)
    ]
    manifest = export_batch(results, spec, _out(args, config, "samples"))
    logger.info(f"Manifest: {manifest}")
    return 0


def cmd_render(args, config: Config) -> int:
    from inference import load_xmvae, render_performance
    from midi_io import write_performance_midi

    spec = _spec(config)
    device = config.resolve_device()
    model = load_xmvae(args.checkpoint, spec, device)
    result = render_performance(
        model, _read_score(args.input), spec, args.top_k or config.TOP_K, config.SEED,
        neutral=not args.sample_style, max_length=config.GENERATION_LENGTH, overlap=config.RENDER_OVERLAP,
        device=device,
    )
    out = _out(args, config, "rendered.mid")
    write_performance_midi(result.notes, out)
    logger.info(f"Rendered {len(result.notes)} notes in {len(result.windows)} window(s) to {out}")
    return 0


def cmd_evaluate(args, config: Config) -> int:
    from eval_metrics import evaluate_corpus, write_report

    report = evaluate_corpus(args.input, args.n or config.EVAL_SAMPLES, workers=config.WORKER_COUNT)
    out = _out(args, config, "report")
    if out.lower().endswith((".csv", ".json")):
        out_dir, stem = os.path.dirname(out) or ".", os.path.splitext(os.path.basename(out))[0]
    else:
        out_dir, stem = out, "report"
    write_report(report, out_dir, stem)
    return 0


def cmd_plot(args, config: Config) -> int:
    from ecp_codec import read_token_dump
    from plotting import plot_pianoroll

    spec = _spec(config)
    source = args.input
    if args.input.lower().endswith(".ecp"):
        sequences = read_token_dump(args.input, spec)
        if not 0 <= args.index < len(sequences):
            raise ValueError(f"{args.input} holds {len(sequences)} sequence(s); no index {args.index}")
        source = sequences[args.index]
    plot_pianoroll(source, _out(args, config, "pianoroll.png"), spec, title=os.path.basename(args.input))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output path")

    parser = argparse.ArgumentParser(prog="ecp", description="Expressive piano performance generation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("tokenize", parents=[common], help="alignment JSON or score MIDI to a token dump")
    p.add_argument("input")
    p.add_argument("--score-only", action="store_true", help="treat the input as a score file")
    p.set_defaults(handler=cmd_tokenize)

    p = sub.add_parser("detokenize", parents=[common], help="token dump to MIDI")
    p.add_argument("input")
    p.set_defaults(handler=cmd_detokenize)

    p = sub.add_parser("prepare-data", parents=[common], help="segment, split and cache a corpus")
    p.add_argument("input")
    p.add_argument("--scores", action="store_true", help="score-only pretraining corpus")
    p.set_defaults(handler=cmd_prepare_data)

    p = sub.add_parser("pretrain-composer", parents=[common], help="Composer-only pretraining on scores")
    p.add_argument("input")
    p.set_defaults(handler=cmd_pretrain_composer)

    p = sub.add_parser("train", parents=[common], help="joint XMVAE training")
    p.add_argument("input")
    p.add_argument("--resume", help="XMVAE checkpoint to resume or Composer checkpoint to start from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("train-prior", parents=[common], help="fit the code prior on a trained XMVAE")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(handler=cmd_train_prior)

    p = sub.add_parser("generate", parents=[common], help="sample pieces from scratch or from a prime")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--top-k", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--prime", help="alignment JSON whose first piece primes generation")
    p.add_argument("--prime-beats", type=int, default=1)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("render", parents=[common], help="perform a given score")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-k", type=int)
    p.add_argument("--sample-style", action="store_true", help="draw z_p from N(0, I) instead of zeros")
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("evaluate", parents=[common], help="objective metrics over a MIDI directory")
    p.add_argument("input")
    p.add_argument("--n", type=int)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common], help="pianoroll image of a MIDI file or token dump")
    p.add_argument("input")
    p.add_argument("--index", type=int, default=0, help="sequence index within a token dump")
    p.set_defaults(handler=cmd_plot)
    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on failure, 2 on usage errors"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0

    try:
        config = load_config(args)
    except Exception as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    logging.getLogger().setLevel(config.LOG_LEVEL)
    resolve_data_paths(args, config)

    try:
        return args.handler(args, config)
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        logger.debug("Traceback", exc_info=True)
        return 1


def main():
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    setup_signal_handlers()
    if check_dependencies():
        sys.exit(1)
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
