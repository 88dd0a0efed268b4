"""
Pytest fixtures для тестирования верстака.
"""

import asyncio
import os

import numpy as np
import pytest

# Устанавливаем тестовые переменные окружения до импорта модулей
os.environ["DB_PATH"] = ":memory:"
os.environ["LOG_LEVEL"] = "DEBUG"
os.environ["WORKBENCH_THREADS"] = "2"
os.environ.pop("WORKBENCH_OUT_DIR", None)


@pytest.fixture(scope="session")
def event_loop():
    """Создаёт event loop для всей сессии тестов."""
    loop = asyncio.get_event_loop_policy().new_event_loop()
    yield loop
    loop.close()


@pytest.fixture
def rng():
    """Генератор с фиксированным seed."""
    return np.random.default_rng(1234)


@pytest.fixture
def toy_section():
    """Уменьшенные размеры игрушечного бандла."""
    from app.config import ToySection

    return ToySection(cond_dim=32, hidden=64, pool_size=24)


@pytest.fixture
def toy_bundle(toy_section):
    """Свежий игрушечный бандл (тренеры меняют его на месте)."""
    from app.services.toy_models import build_toy_bundle

    return build_toy_bundle(toy_section, seed=7)


@pytest.fixture
def synthetic_set():
    """Синтетический набор 5 + 5 снимков 64x64."""
    from app.services.synthetic import synthesize_cxr_set

    return synthesize_cxr_set(5, 5, 64, seed=0)


@pytest.fixture
def finetune_set(synthetic_set):
    """Few-shot набор с подписями двух промптов оценки."""
    from app.services.ingestion import build_finetune_set

    return build_finetune_set(synthetic_set)


@pytest.fixture
async def temp_db():
    """Временный журнал запусков в памяти."""
    import app.database.connection as conn_module
    from app.database.connection import close_db, init_db

    conn_module._connection = None
    await init_db(":memory:")
    yield
    await close_db()
