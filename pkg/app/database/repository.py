"""
Repository для журнала запусков.
Паттерн Repository для абстрагирования доступа к данным.
"""

import json
import math
from typing import Optional, List, Dict, Any, Tuple

from app.database.connection import get_connection


class RunRepository:
    """Репозиторий запусков CLI."""

    @staticmethod
    async def create(command: str, seed: Optional[int], config_hash: str) -> int:
        """Записать начало запуска; seed может быть ещё неизвестен (None)."""
        conn = await get_connection()
        cursor = await conn.execute(
            "INSERT INTO runs (command, seed, config_hash) VALUES (?, ?, ?)",
            (command, seed, config_hash)
        )
        await conn.commit()
        return cursor.lastrowid

    @staticmethod
    async def set_seed(run_id: int, seed: int) -> None:
        """Записать seed, разрешённый из конфига и флага --seed."""
        conn = await get_connection()
        await conn.execute("UPDATE runs SET seed = ? WHERE id = ?", (seed, run_id))
        await conn.commit()

    @staticmethod
    async def finish(
        run_id: int,
        status: str,
        exit_code: int,
        summary: Optional[Dict[str, Any]] = None
    ) -> None:
        """Записать итог запуска."""
        conn = await get_connection()
        await conn.execute(
            "UPDATE runs SET status = ?, exit_code = ?, summary = ? WHERE id = ?",
            (status, exit_code, json.dumps(summary, sort_keys=True, default=str) if summary else None, run_id)
        )
        await conn.commit()

    @staticmethod
    async def get(run_id: int) -> Optional[Dict[str, Any]]:
        """Получить запуск по id."""
        conn = await get_connection()
        cursor = await conn.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
        row = await cursor.fetchone()
        return dict(row) if row else None

    @staticmethod
    async def list_recent(command: Optional[str] = None, limit: int = 10) -> List[Dict[str, Any]]:
        """Последние запуски, при необходимости по одной команде."""
        conn = await get_connection()
        if command:
            cursor = await conn.execute(
                "SELECT * FROM runs WHERE command = ? ORDER BY id DESC LIMIT ?",
                (command, limit)
            )
        else:
            cursor = await conn.execute(
                "SELECT * FROM runs ORDER BY id DESC LIMIT ?",
                (limit,)
            )
        rows = await cursor.fetchall()
        return [dict(row) for row in rows]

    @staticmethod
    async def count_all() -> int:
        """Общее количество запусков."""
        conn = await get_connection()
        cursor = await conn.execute("SELECT COUNT(*) as cnt FROM runs")
        row = await cursor.fetchone()
        return row["cnt"] if row else 0


class MetricRepository:
    """Репозиторий числовых метрик запусков."""

    @staticmethod
    async def add_many(run_id: int, metrics: Dict[str, float]) -> int:
        """Сохранить конечные числовые метрики; вернуть их количество."""
        rows: List[Tuple[int, str, float]] = [
            (run_id, name, float(value))
            for name, value in sorted(metrics.items())
            if isinstance(value, (int, float)) and not isinstance(value, bool)
            and math.isfinite(value)
        ]
        if not rows:
            return 0
        conn = await get_connection()
        await conn.executemany(
            "INSERT INTO run_metrics (run_id, name, value) VALUES (?, ?, ?)",
            rows
        )
        await conn.commit()
        return len(rows)

    @staticmethod
    async def get_by_run(run_id: int) -> Dict[str, float]:
        """Метрики запуска."""
        conn = await get_connection()
        cursor = await conn.execute(
            "SELECT name, value FROM run_metrics WHERE run_id = ? ORDER BY name",
            (run_id,)
        )
        rows = await cursor.fetchall()
        return {row["name"]: row["value"] for row in rows}
