"""
Синтетические рентгенограммы грудной клетки для настольных экспериментов.
Позитивы несут яркое пятно у основания лёгкого ("плевральный выпот").
"""

from typing import List, Tuple

import numpy as np
from scipy import ndimage

from app.services.ingestion import ImageSample, LabelVector, NO_FINDING

EFFUSION = "Pleural Effusion"

# Центры в нормированных координатах (x, y) в [-1, 1]; y растёт вниз.
# Правое лёгкое пациента находится слева на снимке.
LUNG_CENTERS: Tuple[Tuple[float, float], ...] = ((-0.42, -0.05), (0.42, -0.05))
LUNG_RADII = (0.28, 0.55)
BLOB_CENTER = (-0.42, 0.38)
BLOB_SIGMA = 0.14


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return xx, yy


def synthesize_cxr(rng: np.random.Generator, size: int = 64, abnormal: bool = False) -> np.ndarray:
    """
    Одна синтетическая фронтальная рентгенограмма.

    Args:
        rng: Генератор случайных чисел
        size: Сторона квадратного снимка
        abnormal: Добавить пятно выпота

    Returns:
        Массив size x size в [0, 1], квантованный до 8 бит
    """
    xx, yy = _grid(size)
    brightness = 0.55 + rng.uniform(-0.03, 0.03)

    thorax = (xx / 0.92) ** 2 + (yy / 1.05) ** 2 <= 1.0
    img = np.where(thorax, brightness, 0.12)

    mediastinum = np.exp(-(xx / 0.16) ** 2) * (yy > -0.7)
    img = img + 0.25 * mediastinum

    for cx, cy in LUNG_CENTERS:
        cx += rng.uniform(-0.03, 0.03)
        cy += rng.uniform(-0.03, 0.03)
        rx = LUNG_RADII[0] * rng.uniform(0.95, 1.05)
        ry = LUNG_RADII[1] * rng.uniform(0.95, 1.05)
        lung = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        img = np.where(lung, img - 0.3, img)

    if abnormal:
        bx = BLOB_CENTER[0] + rng.uniform(-0.03, 0.03)
        by = BLOB_CENTER[1] + rng.uniform(-0.03, 0.03)
        amplitude = rng.uniform(0.4, 0.5)
        img = img + amplitude * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * BLOB_SIGMA ** 2))

    img = ndimage.gaussian_filter(img, sigma=size / 32.0)
    img = img + rng.normal(0.0, 0.005, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


def synthesize_cxr_set(
    n_negative: int = 5,
    n_positive: int = 5,
    size: int = 64,
    seed: int = 0,
) -> List[ImageSample]:
    """Размеченный набор: neg-XXX ("No Finding") и pos-XXX ("Pleural Effusion")."""
    children = np.random.SeedSequence(seed).spawn(n_negative + n_positive)
    samples = []
    for i in range(n_negative):
        rng = np.random.default_rng(children[i])
        samples.append(ImageSample(
            id=f"neg-{i:03d}",
            pixels=synthesize_cxr(rng, size, abnormal=False),
            source_range=255.0,
            labels=LabelVector.from_findings([NO_FINDING]),
        ))
    for i in range(n_positive):
        rng = np.random.default_rng(children[n_negative + i])
        samples.append(ImageSample(
            id=f"pos-{i:03d}",
            pixels=synthesize_cxr(rng, size, abnormal=True),
            source_range=255.0,
            labels=LabelVector.from_findings([EFFUSION]),
        ))
    return samples
