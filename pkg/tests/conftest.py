# conftest.py - Shared fixtures: quantization spec, desk-scale config, synthetic aligned corpora
import os
from typing import Dict, List

import pytest
import ujson

from config import TestingConfig
from data_pipeline import AlignedCorpus, AlignedPiece, segment
from ecp_codec import AlignedNote, default_spec
from helpers import alignment_object, steady_piece


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("ECP_"):
            monkeypatch.delenv(key, raising=False)


@pytest.fixture
def spec():
    return default_spec()


@pytest.fixture
def config(tmp_path):
    config = TestingConfig()
    config.OUTPUT_DIR = str(tmp_path / "runs")
    config.WINDOW = 16
    config.STRIDE = 8
    return config.validate()


@pytest.fixture
def corpus():
    pieces = [
        AlignedPiece(f"piece{i}", steady_piece(24, f"piece{i}", pitch_base=48 + 3 * i), 1.0)
        for i in range(6)
    ]
    return AlignedCorpus(pieces=pieces, source_path="memory")


@pytest.fixture
def dataset(corpus, config, spec):
    return segment(corpus, config.WINDOW, config.STRIDE, spec)


@pytest.fixture
def alignment_file(tmp_path):
    """Writes pieces to an alignment JSON file and returns its path"""
    def write(pieces: Dict[str, List[AlignedNote]], name: str = "corpus.json") -> str:
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as f:
            ujson.dump([alignment_object(pid, notes) for pid, notes in pieces.items()], f)
        return str(path)
    return write
