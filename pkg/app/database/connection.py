"""
Подключение к журналу запусков.
Использует aiosqlite; DB_PATH=:memory: держит журнал только в памяти.
"""

import aiosqlite
import logging
import os
from typing import Optional

from app.config import settings

logger = logging.getLogger(__name__)

_connection: Optional[aiosqlite.Connection] = None


async def get_connection() -> aiosqlite.Connection:
    """Получить текущее подключение к журналу."""
    if _connection is None:
        raise RuntimeError("Run ledger not initialized. Call init_db() first.")
    return _connection


async def init_db(db_path: Optional[str] = None) -> None:
    """Открыть журнал и создать таблицы."""
    global _connection

    db_path = db_path or settings.db_path
    if db_path != ":memory:":
        db_dir = os.path.dirname(db_path)
        if db_dir and not os.path.exists(db_dir):
            os.makedirs(db_dir, exist_ok=True)
            logger.info(f"Created ledger directory: {db_dir}")

    _connection = await aiosqlite.connect(db_path)
    _connection.row_factory = aiosqlite.Row

    await _connection.executescript("""
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            command TEXT NOT NULL,
            seed INTEGER,
            config_hash TEXT NOT NULL,
            status TEXT NOT NULL DEFAULT 'running',
            exit_code INTEGER,
            summary TEXT,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        );

        CREATE TABLE IF NOT EXISTS run_metrics (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER NOT NULL,
            name TEXT NOT NULL,
            value REAL,
            FOREIGN KEY (run_id) REFERENCES runs(id)
        );

        CREATE INDEX IF NOT EXISTS idx_runs_command ON runs(command);
        CREATE INDEX IF NOT EXISTS idx_metrics_run_id ON run_metrics(run_id);
    """)
    await _connection.commit()
    logger.debug(f"Run ledger initialized: {db_path}")


async def close_db() -> None:
    """Закрыть журнал."""
    global _connection
    if _connection:
        await _connection.close()
        _connection = None
        logger.debug("Run ledger closed")
