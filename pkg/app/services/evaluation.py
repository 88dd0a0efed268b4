"""
Оценка генерации: наборы сэмплов по промптам, классификация сгенерированных
снимков и сетка FID по стратегиям и промптам.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.config import settings
from app.errors import ConfigError, DataError, SingleClassOnly
from app.services.ingestion import NEGATIVE_PROMPT, POSITIVE_PROMPT, ImageSample
from app.services.metrics import ClassificationReport, FeatureSet, classification_report, fid

logger = logging.getLogger(__name__)

METHODS = ("Stable Diffusion", "Textual inversion", "U-Net", "U-Net, with prior")
METHOD_TABLE_COLUMNS = ["Method", "Prevalence", "AUC", "Accuracy", "F1Score", "Precision", "Recall"]


def derive_seed(seed: int, prompt_index: int, sample_index: int) -> int:
    """Seed сэмпла; новые промпты и сэмплы не сдвигают уже выданные seed."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(prompt_index, sample_index))
    return int(seq.generate_state(1)[0])


@dataclass
class GenerationSpec:
    prompts: List[Tuple[str, int]] = field(default_factory=lambda: [
        (NEGATIVE_PROMPT, 0),
        (POSITIVE_PROMPT, 1),
    ])
    per_prompt_count: int = 50
    seed: int = 0
    steps: int = 50
    mode: str = "deterministic"

    def __post_init__(self):
        if self.per_prompt_count < 1:
            raise ConfigError("per_prompt_count must be >= 1")
        if not self.prompts:
            raise ConfigError("GenerationSpec needs at least one prompt")
        for caption, label in self.prompts:
            if label not in (0, 1):
                raise ConfigError(f"Prompt '{caption}' has label {label}, expected 0 or 1")


@dataclass
class GeneratedImage:
    """Сгенерированный снимок и его сайдкар."""

    sample: ImageSample
    caption: str
    expected_label: int
    seed: int
    steps: int
    mode: str
    prompt_index: int = 0
    sample_index: int = 0

    def sidecar(self) -> Dict:
        return {
            "id": self.sample.id,
            "caption": self.caption,
            "expected_label": self.expected_label,
            "seed": self.seed,
            "steps": self.steps,
            "mode": self.mode,
        }


@dataclass
class MethodRow:
    method: str
    prevalence: float
    auc: Optional[float]
    accuracy: float
    f1: float
    precision: float
    recall: float

    def to_dict(self) -> Dict:
        return {
            "Method": self.method,
            "Prevalence": self.prevalence,
            "AUC": self.auc,
            "Accuracy": self.accuracy,
            "F1Score": self.f1,
            "Precision": self.precision,
            "Recall": self.recall,
        }


def _generate_one(generator, job: Tuple[int, int, str, int], spec: GenerationSpec) -> GeneratedImage:
    p, s, caption, label = job
    seed = derive_seed(spec.seed, p, s)
    image = generator.generate(caption, seed, spec.steps, spec.mode)
    image.id = f"p{p:02d}-s{s:04d}"
    return GeneratedImage(sample=image, caption=caption, expected_label=label, seed=seed,
                          steps=spec.steps, mode=spec.mode, prompt_index=p, sample_index=s)


def generate_suite(generator, spec: GenerationSpec) -> List[GeneratedImage]:
    """
    per_prompt_count снимков на каждый промпт с seed (seed, промпт, сэмпл).

    Args:
        generator: Бандл или любой объект с generate(caption, seed, steps, mode)
        spec: Промпты и настройки семплера

    Returns:
        Список GeneratedImage в порядке (промпт, сэмпл)
    """
    jobs = [
        (p, s, caption, label)
        for p, (caption, label) in enumerate(spec.prompts)
        for s in range(spec.per_prompt_count)
    ]
    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        images = list(pool.map(lambda job: _generate_one(generator, job, spec), jobs))
    logger.info(f"Generated {len(images)} images for {len(spec.prompts)} prompts")
    return images


def evaluate_generated(images: Sequence[GeneratedImage], clf,
                       method: str = METHODS[0]) -> Tuple[ClassificationReport, MethodRow]:
    """
    Классификация сгенерированных снимков против ожидаемых меток.

    Returns:
        (ClassificationReport, строка таблицы методов)
    """
    labels = [img.expected_label for img in images]
    if len(set(labels)) < 2:
        raise SingleClassOnly("Generated set needs both expected labels for AUC")
    scores = [clf.score(img.sample) for img in images]
    report = classification_report(scores, labels)
    row = MethodRow(
        method=method,
        prevalence=float(np.mean(labels)),
        auc=report.auc,
        accuracy=report.accuracy,
        f1=report.f1,
        precision=report.precision,
        recall=report.recall,
    )
    logger.info(f"{method}: auc {report.auc:.3f}, accuracy {report.accuracy:.3f}")
    return report, row


def method_table(rows: Sequence[MethodRow]) -> pd.DataFrame:
    def _r(value: Optional[float]) -> Optional[float]:
        return None if value is None else round(value, 3)

    return pd.DataFrame(
        [{k: (v if k == "Method" else _r(v)) for k, v in row.to_dict().items()} for row in rows],
        columns=METHOD_TABLE_COLUMNS,
    )


def fid_grid(
    generators: Mapping[str, object],
    prompts: Sequence[str],
    references: Mapping[str, FeatureSet],
    extractor,
    per_prompt_count: int = 50,
    seed: int = 0,
    steps: int = 50,
    mode: str = "deterministic",
) -> pd.DataFrame:
    """
    FID сгенерированных снимков против эталона каждого промпта.

    Args:
        generators: Имя стратегии -> генератор
        prompts: Промпты (столбцы)
        references: Промпт -> признаки эталонного набора
        extractor: Экстрактор признаков
        per_prompt_count: Снимков на ячейку

    Returns:
        DataFrame: строки - стратегии, столбцы - промпты
    """
    missing = [p for p in prompts if p not in references]
    if missing:
        raise DataError(f"No reference set for prompt '{missing[0]}'")

    grid: Dict[str, Dict[str, float]] = {}
    for name, generator in generators.items():
        spec = GenerationSpec(prompts=[(p, 0) for p in prompts], per_prompt_count=per_prompt_count,
                              seed=seed, steps=steps, mode=mode)
        images = generate_suite(generator, spec)
        row = {}
        for p, prompt in enumerate(prompts):
            generated = extractor([img.sample for img in images if img.prompt_index == p])
            row[prompt] = fid(generated, references[prompt])
        grid[name] = row
        logger.info(f"FID row {name}: " + ", ".join(f"{v:.3f}" for v in row.values()))

    frame = pd.DataFrame.from_dict(grid, orient="index", columns=list(prompts))
    frame.index.name = "Method"
    return frame
