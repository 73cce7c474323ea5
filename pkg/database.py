"""Database module for experiment results."""
import json
import logging
from datetime import datetime
from typing import Any, Dict, List, Optional

import aiosqlite
import pytz

import config

logger = logging.getLogger(__name__)


class ResultsDatabase:
    """SQLite store for runs and their scores."""

    def __init__(self, db_path: str, timezone: str = config.LOG_TIMEZONE):
        """Initialize database handler."""
        self.db_path = str(db_path)
        self.timezone = timezone

    def _convert_utc_to_local(self, utc_timestamp_str: str) -> str:
        """Convert a SQLite UTC timestamp to the configured timezone."""
        try:
            utc_dt = pytz.utc.localize(datetime.strptime(utc_timestamp_str, '%Y-%m-%d %H:%M:%S'))
            local_dt = utc_dt.astimezone(pytz.timezone(self.timezone))
            return local_dt.strftime('%Y-%m-%d %H:%M:%S')
        except Exception as e:
            logger.warning(f"Error converting timestamp {utc_timestamp_str!r}: {e}")
            return utc_timestamp_str

    async def init_db(self):
        """Initialize database tables."""
        async with aiosqlite.connect(self.db_path) as db:
            await db.execute('''
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    label TEXT NOT NULL,
                    recording TEXT NOT NULL,
                    n_clusters INTEGER NOT NULL,
                    backend TEXT NOT NULL,
                    seed INTEGER NOT NULL,
                    config TEXT,
                    status TEXT NOT NULL DEFAULT 'running',
                    error TEXT,
                    mean_utterance REAL,
                    mean_segment REAL,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            ''')

            await db.execute('''
                CREATE TABLE IF NOT EXISTS segment_scores (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    segment_index INTEGER NOT NULL,
                    start_s REAL NOT NULL,
                    end_s REAL NOT NULL,
                    overlap_ratio REAL NOT NULL,
                    bucket TEXT NOT NULL,
                    metric TEXT NOT NULL,
                    score REAL NOT NULL,
                    FOREIGN KEY (run_id) REFERENCES runs(id)
                )
            ''')

            await db.execute('''
                CREATE TABLE IF NOT EXISTS utterance_scores (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    speaker INTEGER NOT NULL,
                    onset_s REAL NOT NULL,
                    offset_s REAL NOT NULL,
                    stream INTEGER NOT NULL,
                    bucket TEXT NOT NULL,
                    metric TEXT NOT NULL,
                    score REAL NOT NULL,
                    FOREIGN KEY (run_id) REFERENCES runs(id)
                )
            ''')

            await db.execute('''
                CREATE TABLE IF NOT EXISTS cluster_purity (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL,
                    cluster INTEGER NOT NULL,
                    labelled INTEGER NOT NULL,
                    majority_speaker INTEGER,
                    purity REAL,
                    FOREIGN KEY (run_id) REFERENCES runs(id)
                )
            ''')

            await db.commit()

    async def add_run(self, label: str, recording: str, n_clusters: int, backend: str,
                      seed: int, run_config: Optional[Dict[str, Any]] = None,
                      created_at: Optional[str] = None) -> Optional[int]:
        """
        Register a run and return its id.

        created_at is a UTC 'YYYY-MM-DD HH:MM:SS' stamp; the current time when omitted.
        """
        try:
            async with aiosqlite.connect(self.db_path) as db:
                cursor = await db.execute(
                    '''INSERT INTO runs (label, recording, n_clusters, backend, seed, config, created_at)
                       VALUES (?, ?, ?, ?, ?, ?, COALESCE(?, CURRENT_TIMESTAMP))''',
                    (label, recording, n_clusters, backend, seed,
                     json.dumps(run_config or {}, sort_keys=True), created_at)
                )
                await db.commit()
                return cursor.lastrowid
        except Exception as e:
            logger.error(f"Error adding run: {e}")
            return None

    async def finish_run(self, run_id: int, mean_utterance: Optional[float],
                         mean_segment: Optional[float]) -> bool:
        """Store the summary scores of a completed run."""
        try:
            async with aiosqlite.connect(self.db_path) as db:
                cursor = await db.execute(
                    '''UPDATE runs SET status = 'ok', mean_utterance = ?, mean_segment = ?
                       WHERE id = ?''',
                    (mean_utterance, mean_segment, run_id)
                )
                await db.commit()
                return cursor.rowcount > 0
        except Exception as e:
            logger.error(f"Error finishing run {run_id}: {e}")
            return False

    async def mark_run_failed(self, run_id: int, error: str) -> bool:
        """Mark a run as failed with its error message."""
        try:
            async with aiosqlite.connect(self.db_path) as db:
                cursor = await db.execute(
                    "UPDATE runs SET status = 'failed', error = ? WHERE id = ?",
                    (error, run_id)
                )
                await db.commit()
                return cursor.rowcount > 0
        except Exception as e:
            logger.error(f"Error marking run {run_id} failed: {e}")
            return False

    async def add_segment_scores(self, run_id: int, metric: str, items: List[Dict[str, Any]]) -> bool:
        """Store segment-wise scores of a run."""
        try:
            async with aiosqlite.connect(self.db_path) as db:
                await db.executemany(
                    '''INSERT INTO segment_scores
                       (run_id, segment_index, start_s, end_s, overlap_ratio, bucket, metric, score)
                       VALUES (?, ?, ?, ?, ?, ?, ?, ?)''',
                    [(run_id, item['segment'], item['start_s'], item['end_s'], item['overlap_ratio'],
                      item['bucket'], metric, item['score']) for item in items]
                )
                await db.commit()
                return True
        except Exception as e:
            logger.error(f"Error adding segment scores for run {run_id}: {e}")
            return False

    async def add_utterance_scores(self, run_id: int, metric: str, items: List[Dict[str, Any]]) -> bool:
        """Store utterance-level scores of a run."""
        try:
            async with aiosqlite.connect(self.db_path) as db:
                await db.executemany(
                    '''INSERT INTO utterance_scores
                       (run_id, speaker, onset_s, offset_s, stream, bucket, metric, score)
                       VALUES (?, ?, ?, ?, ?, ?, ?, ?)''',
                    [(run_id, item['speaker'], item['onset_s'], item['offset_s'], item['stream'],
                      item['bucket'], metric, item['score']) for item in items]
                )
                await db.commit()
                return True
        except Exception as e:
            logger.error(f"Error adding utterance scores for run {run_id}: {e}")
            return False

    async def add_cluster_purity(self, run_id: int, clusters: List[Dict[str, Any]]) -> bool:
        """Store per-cluster purity of a run."""
        try:
            async with aiosqlite.connect(self.db_path) as db:
                await db.executemany(
                    '''INSERT INTO cluster_purity (run_id, cluster, labelled, majority_speaker, purity)
                       VALUES (?, ?, ?, ?, ?)''',
                    [(run_id, c['cluster'], c['labelled'], c['majority_speaker'], c['purity'])
                     for c in clusters]
                )
                await db.commit()
                return True
        except Exception as e:
            logger.error(f"Error adding cluster purity for run {run_id}: {e}")
            return False

    async def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        """Get run by ID, with created_at in the configured timezone."""
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute('SELECT * FROM runs WHERE id = ?', (run_id,)) as cursor:
                row = await cursor.fetchone()
                if not row:
                    return None
                run = dict(row)
                if run.get('created_at'):
                    run['created_at'] = self._convert_utc_to_local(run['created_at'])
                run['config'] = json.loads(run['config']) if run.get('config') else {}
                return run

    async def get_bucket_means(self, run_id: int, metric: str = 'si_sdr') -> Dict[str, Dict[str, Any]]:
        """Segment score mean and count per overlap bucket."""
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute(
                '''SELECT bucket, COUNT(*) AS count, AVG(score) AS mean
                   FROM segment_scores
                   WHERE run_id = ? AND metric = ?
                   GROUP BY bucket
                   ORDER BY bucket''',
                (run_id, metric)
            ) as cursor:
                rows = await cursor.fetchall()
                return {row['bucket']: {'count': row['count'], 'mean': row['mean']} for row in rows}

    async def get_sweep_rows(self, label: str) -> List[Dict[str, Any]]:
        """Runs sharing a label, ordered by cluster count."""
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute(
                '''SELECT id, recording, n_clusters, backend, status, error, mean_utterance, mean_segment
                   FROM runs
                   WHERE label = ?
                   ORDER BY n_clusters, recording, id''',
                (label,)
            ) as cursor:
                rows = await cursor.fetchall()
                return [dict(row) for row in rows]

    async def get_cluster_purity(self, run_id: int) -> List[Dict[str, Any]]:
        async with aiosqlite.connect(self.db_path) as db:
            db.row_factory = aiosqlite.Row
            async with db.execute(
                'SELECT cluster, labelled, majority_speaker, purity FROM cluster_purity WHERE run_id = ? ORDER BY cluster',
                (run_id,)
            ) as cursor:
                rows = await cursor.fetchall()
                return [dict(row) for row in rows]
