"""
Контракты подключаемых компонентов пайплайна.
Игрушечные реализации лежат в toy_models, адаптеры к настоящим весам
должны реализовать те же протоколы.
"""

from typing import Dict, List, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from app.services.encoder_bench import EncoderOutput
from app.services.ingestion import ImageSample
from app.services.metrics import FeatureSet


@runtime_checkable
class LatentVAE(Protocol):
    """Изображение <-> латент C x h x w."""

    scaling: float

    def encode(self, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Возвращает (mean, logvar) латентного распределения."""
        ...

    def sample(self, mean: np.ndarray, logvar: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ...

    def decode(self, latent: np.ndarray) -> np.ndarray:
        ...

    def latent_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        ...

    def parameters(self) -> Dict[str, np.ndarray]:
        ...


@runtime_checkable
class TextEncoder(Protocol):
    """Текст -> EncoderOutput; таблица эмбеддингов адресуется по id токена."""

    dim: int
    embedding: np.ndarray

    def tokenize(self, text: str) -> List[int]:
        ...

    def encode_text(self, text: str) -> EncoderOutput:
        ...

    def parameters(self) -> Dict[str, np.ndarray]:
        ...


@runtime_checkable
class Denoiser(Protocol):
    """Предсказание шума по (латент, t, обусловливание)."""

    cond_dim: int

    def predict_noise(self, latent: np.ndarray, t: int, cond: np.ndarray) -> np.ndarray:
        ...

    def parameters(self) -> Dict[str, np.ndarray]:
        ...


@runtime_checkable
class FeatureExtractor(Protocol):
    """Признаки изображений для FID и косинусной близости."""

    extractor_id: str

    def __call__(self, images: Sequence[ImageSample]) -> FeatureSet:
        ...


@runtime_checkable
class Classifier(Protocol):
    """Вероятность находки finding_id на снимке, в [0, 1]."""

    finding_id: str

    def score(self, image: ImageSample) -> float:
        ...


@runtime_checkable
class ImageGenerator(Protocol):
    """Всё, что умеет сгенерировать снимок по подписи и seed."""

    def generate(self, caption: str, seed: int, steps: int, mode: str) -> ImageSample:
        ...
