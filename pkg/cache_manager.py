# cache_manager.py - Tokenized dataset cache: token dumps and pv arrays indexed in sqlite
import hashlib
import logging
import os
import sqlite3
import threading
from contextlib import contextmanager
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import ujson

from config import Config
from data_pipeline import Segment, SegmentedDataset
from ecp_codec import QuantizationSpec, SpecMismatchError, read_token_dump, write_token_dump

logger = logging.getLogger(__name__)


def generate_cache_key(params: Dict[str, Any]) -> str:
    """Generate a consistent cache key for given parameters"""
    key_string = ujson.dumps(params, sort_keys=True)
    return hashlib.md5(key_string.encode()).hexdigest()


def source_mtime(path: str) -> float:
    """Latest modification time of a file, or of any file below a directory"""
    if not os.path.isdir(path):
        return os.path.getmtime(path)
    latest = os.path.getmtime(path)
    for root, _, files in os.walk(path):
        for name in files:
            latest = max(latest, os.path.getmtime(os.path.join(root, name)))
    return latest


class DatabaseManager:
    """Owns the sqlite index of cached datasets"""

    def __init__(self, db_path: str = "ecp_cache.db"):
        self.db_path = db_path
        # an in-memory database only lives as long as its connection
        self._shared = sqlite3.connect(db_path, check_same_thread=False) if db_path == ":memory:" else None
        self._lock = threading.Lock()
        self.init_database()

    @contextmanager
    def get_connection(self):
        """Context manager for database connections with proper cleanup"""
        conn = None
        with self._lock:
            try:
                conn = self._shared or sqlite3.connect(self.db_path)
                conn.execute("PRAGMA foreign_keys = ON")
                if self._shared is None:
                    conn.execute("PRAGMA journal_mode = WAL")
                    conn.execute("PRAGMA synchronous = NORMAL")
                yield conn
            except Exception as e:
                if conn:
                    conn.rollback()
                logger.error(f"Database error: {e}")
                raise
            finally:
                if conn and conn is not self._shared:
                    conn.close()

    def init_database(self):
        with self.get_connection() as conn:
            conn.execute("""
                CREATE TABLE IF NOT EXISTS metadata (
                    key TEXT PRIMARY KEY,
                    value TEXT,
                    updated_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """)
            conn.execute("""
                CREATE TABLE IF NOT EXISTS datasets (
                    cache_key TEXT PRIMARY KEY,
                    source_path TEXT,
                    dump_path TEXT,
                    pv_path TEXT,
                    spec_fingerprint TEXT,
                    window INTEGER,
                    stride INTEGER,
                    segment_count INTEGER,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """)
            conn.execute("""
                CREATE TABLE IF NOT EXISTS segments (
                    cache_key TEXT REFERENCES datasets(cache_key) ON DELETE CASCADE,
                    segment_index INTEGER,
                    piece_id TEXT,
                    split TEXT,
                    row_offset INTEGER,
                    length INTEGER,
                    window_start INTEGER,
                    PRIMARY KEY (cache_key, segment_index)
                )
            """)
            for index_sql in (
                "CREATE INDEX IF NOT EXISTS idx_segments_piece ON segments(cache_key, piece_id)",
                "CREATE INDEX IF NOT EXISTS idx_segments_split ON segments(cache_key, split)",
            ):
                try:
                    conn.execute(index_sql)
                except sqlite3.Error as e:
                    logger.warning(f"Could not create index: {e}")
            conn.commit()

    def get_metadata(self, key: str) -> Optional[str]:
        with self.get_connection() as conn:
            row = conn.execute("SELECT value FROM metadata WHERE key = ?", (key,)).fetchone()
            return row[0] if row else None

    def set_metadata(self, key: str, value: str):
        with self.get_connection() as conn:
            conn.execute("""
                INSERT OR REPLACE INTO metadata (key, value, updated_at)
                VALUES (?, ?, CURRENT_TIMESTAMP)
            """, (key, value))
            conn.commit()

    def get_database_stats(self) -> Dict[str, Any]:
        """Get database statistics for monitoring"""
        with self.get_connection() as conn:
            stats = {}
            for table in ("datasets", "segments"):
                stats[f"{table}_count"] = conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()[0]
            stats["database_size_bytes"] = conn.execute(
                "SELECT page_count * page_size FROM pragma_page_count(), pragma_page_size()"
            ).fetchone()[0]
            return stats


class DatasetCache:
    """Stores segmented datasets on disk and serves them back by cache key"""

    def __init__(self, config: Config, db_manager: Optional[DatabaseManager] = None):
        self.config = config
        self.db_manager = db_manager or DatabaseManager(config.CACHE_DB_PATH)
        self.cache_dir = os.path.join(config.OUTPUT_DIR, "cache")
        self.memory_cache: Dict[str, Dict[str, Any]] = {}
        self.memory_cache_lock = threading.Lock()
        self.max_memory_cache_size = 4

    def dataset_key(self, source_path: str, spec: QuantizationSpec, window: int, stride: int,
                    min_alignment_rate: float = 0.0, score_only: bool = False) -> str:
        return generate_cache_key({
            "source": os.path.abspath(source_path),
            "mtime": source_mtime(source_path),
            "spec": spec.fingerprint(),
            "window": window,
            "stride": stride,
            "min_alignment_rate": min_alignment_rate,
            "score_only": score_only,
        })

    def store(self, cache_key: str, dataset: SegmentedDataset, spec: QuantizationSpec,
              source_path: str = "", window: int = 0, stride: int = 0) -> int:
        os.makedirs(self.cache_dir, exist_ok=True)
        dump_path = os.path.join(self.cache_dir, f"{cache_key}.ecp")
        pv_path = os.path.join(self.cache_dir, f"{cache_key}.pv.npy")

        sequences = [s.sequence for s in dataset.segments]
        write_token_dump(sequences, dump_path)
        pv = np.concatenate([s.pv for s in sequences]) if sequences else np.zeros((0, 4))
        np.save(pv_path, pv)

        rows = []
        offset = 0
        for i, s in enumerate(dataset.segments):
            rows.append((cache_key, i, s.piece_id, s.split, offset, len(s.sequence), s.window_start))
            offset += len(s.sequence)

        with self.db_manager.get_connection() as conn:
            conn.execute("DELETE FROM segments WHERE cache_key = ?", (cache_key,))
            conn.execute("""
                INSERT OR REPLACE INTO datasets
                (cache_key, source_path, dump_path, pv_path, spec_fingerprint, window, stride, segment_count)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """, (cache_key, source_path, dump_path, pv_path, spec.fingerprint(), window, stride, len(rows)))

            batch_size = 1000
            for i in range(0, len(rows), batch_size):
                conn.executemany("INSERT INTO segments VALUES (?, ?, ?, ?, ?, ?, ?)", rows[i:i + batch_size])
                if i and i % 10000 == 0:
                    logger.info(f"Indexed {i}/{len(rows)} segments...")
            conn.commit()

        self.db_manager.set_metadata("last_dataset", cache_key)
        self._add_to_memory_cache(cache_key, dataset)
        logger.info(f"Cached {len(rows)} segments under {cache_key[:8]}...")
        return len(rows)

    def update_splits(self, cache_key: str, dataset: SegmentedDataset):
        with self.db_manager.get_connection() as conn:
            conn.executemany(
                "UPDATE segments SET split = ? WHERE cache_key = ? AND segment_index = ?",
                [(s.split, cache_key, i) for i, s in enumerate(dataset.segments)],
            )
            conn.commit()
        self._add_to_memory_cache(cache_key, dataset)

    def load(self, cache_key: str, spec: QuantizationSpec) -> Optional[SegmentedDataset]:
        with self.memory_cache_lock:
            if cache_key in self.memory_cache:
                self.memory_cache[cache_key]["last_accessed"] = datetime.now()
                return self.memory_cache[cache_key]["data"]

        with self.db_manager.get_connection() as conn:
            row = conn.execute(
                "SELECT dump_path, pv_path, spec_fingerprint FROM datasets WHERE cache_key = ?", (cache_key,)
            ).fetchone()
            if row is None:
                return None
            index = pd.read_sql_query(
                "SELECT * FROM segments WHERE cache_key = ? ORDER BY segment_index", conn, params=(cache_key,)
            )

        dump_path, pv_path, fingerprint = row
        if fingerprint != spec.fingerprint():
            raise SpecMismatchError(spec.fingerprint(), fingerprint, "cached dataset")
        if not (os.path.exists(dump_path) and os.path.exists(pv_path)):
            logger.warning(f"Cache files for {cache_key[:8]} are missing; dropping the entry")
            self.clear(cache_key)
            return None

        sequences = read_token_dump(dump_path, spec, pv=np.load(pv_path))
        if len(sequences) != len(index):
            logger.warning(f"Cache {cache_key[:8]} index has {len(index)} rows but dump has {len(sequences)}")
            self.clear(cache_key)
            return None

        dataset = SegmentedDataset([
            Segment(piece_id=r.piece_id, window_start=int(r.window_start), sequence=seq, split=r.split)
            for r, seq in zip(index.itertuples(index=False), sequences)
        ])
        self._add_to_memory_cache(cache_key, dataset)
        logger.info(f"Loaded {len(dataset)} cached segments from {dump_path}")
        return dataset

    def get_or_build(self, cache_key: str, builder: Callable[[], SegmentedDataset], spec: QuantizationSpec,
                     source_path: str = "", window: int = 0, stride: int = 0,
                     force_rebuild: bool = False) -> SegmentedDataset:
        if not force_rebuild:
            cached = self.load(cache_key, spec)
            if cached is not None:
                return cached
        dataset = builder()
        self.store(cache_key, dataset, spec, source_path, window, stride)
        return dataset

    def list_datasets(self) -> pd.DataFrame:
        with self.db_manager.get_connection() as conn:
            return pd.read_sql_query("SELECT * FROM datasets ORDER BY created_at DESC", conn)

    def clear(self, cache_key: Optional[str] = None):
        """Drop one cached dataset (or all) from the index, memory and disk"""
        with self.memory_cache_lock:
            if cache_key is None:
                self.memory_cache.clear()
            else:
                self.memory_cache.pop(cache_key, None)

        with self.db_manager.get_connection() as conn:
            if cache_key is None:
                rows = conn.execute("SELECT dump_path, pv_path FROM datasets").fetchall()
                conn.execute("DELETE FROM segments")
                conn.execute("DELETE FROM datasets")
            else:
                rows = conn.execute(
                    "SELECT dump_path, pv_path FROM datasets WHERE cache_key = ?", (cache_key,)
                ).fetchall()
                conn.execute("DELETE FROM segments WHERE cache_key = ?", (cache_key,))
                conn.execute("DELETE FROM datasets WHERE cache_key = ?", (cache_key,))
            conn.commit()

        for paths in rows:
            for path in paths:
                if path and os.path.exists(path):
                    os.remove(path)
        logger.info(f"Cleared dataset cache {cache_key[:8] if cache_key else '(all)'}")

    def get_cache_stats(self) -> Dict[str, Any]:
        with self.memory_cache_lock:
            memory_stats = {"size": len(self.memory_cache), "max_size": self.max_memory_cache_size}
        try:
            db_stats = self.db_manager.get_database_stats()
        except Exception as e:
            logger.error(f"Error getting database cache stats: {e}")
            db_stats = {"error": str(e)}
        return {"memory_cache": memory_stats, "database_cache": db_stats}

    def _add_to_memory_cache(self, cache_key: str, dataset: SegmentedDataset):
        """Add a dataset to the memory cache with LRU eviction"""
        with self.memory_cache_lock:
            if cache_key not in self.memory_cache and len(self.memory_cache) >= self.max_memory_cache_size:
                oldest_key = min(self.memory_cache, key=lambda k: self.memory_cache[k]["last_accessed"])
                del self.memory_cache[oldest_key]
            self.memory_cache[cache_key] = {"data": dataset, "last_accessed": datetime.now()}
