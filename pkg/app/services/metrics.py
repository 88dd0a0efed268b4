"""
Метрики качества изображений и классификации.
RMSE, PSNR, SSIM, FID, косинусная близость, отчёт классификатора
и парная оценка реконструкций VAE.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import linalg, stats
from skimage.metrics import structural_similarity

from app.config import settings
from app.errors import (
    DataError,
    DegenerateCovariance,
    DimensionMismatch,
    ImageTooSmall,
    LengthMismatch,
    ShapeMismatch,
    ZeroVector,
)
from app.services.ingestion import CHEXPERT_CLASSES, ImageSample, normalize_labels

if TYPE_CHECKING:
    from app.services.contracts import Classifier, FeatureExtractor

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
FID_JITTER = 1e-6
FID_BATCH_SIZE = 32
DECISION_THRESHOLD = 0.5

ImageLike = Union[ImageSample, np.ndarray]


@dataclass
class PairMetrics:
    id: str
    rmse: float
    psnr: float
    ssim: float


@dataclass
class FeatureSet:
    """Матрица признаков N x F с идентификатором экстрактора."""

    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionMismatch("Features must be an N x F matrix")
        if not np.all(np.isfinite(self.features)):
            raise DataError("Features contain non-finite values")


@dataclass
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class ClassificationReport:
    auc: Optional[float]
    accuracy: float
    f1: float
    precision: float
    recall: float
    confusion: Confusion

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SummaryStats:
    mean: float
    sd: float
    median: float
    min: float
    max: float
    n: int
    non_finite: int = 0


@dataclass
class FindingRow:
    """Строка таблицы классификации оригиналов и реконструкций."""

    finding: str
    prevalence: float
    original: ClassificationReport
    reconstruction: ClassificationReport


@dataclass
class ReconstructionReport:
    pairs: List[PairMetrics]
    rmse: SummaryStats
    psnr: SummaryStats
    ssim: SummaryStats
    fid_batches: List[float]
    fid_mean: Optional[float]
    cosine: SummaryStats
    cosines: List[float]
    extractor_id: str
    findings: List[FindingRow] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["schema_version"] = REPORT_SCHEMA_VERSION
        return json_safe(data)


def json_safe(value: Any) -> Any:
    """Заменяет нечисловые float на строки ("inf", "-inf", "nan") для JSON."""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, np.integer):
        return int(value)
    return value


def _grid(img: ImageLike) -> np.ndarray:
    if isinstance(img, ImageSample):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def _source_range(a: ImageLike, source_range: Optional[float]) -> float:
    if source_range is not None:
        return float(source_range)
    if isinstance(a, ImageSample):
        return a.source_range
    return 1.0


def _check_shapes(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ShapeMismatch(f"Shapes differ: {x.shape} vs {y.shape}")


def rmse(a: ImageLike, b: ImageLike, source_range: Optional[float] = None) -> float:
    """RMSE в единицах исходного диапазона."""
    x, y = _grid(a), _grid(b)
    _check_shapes(x, y)
    return float(np.sqrt(np.mean((x - y) ** 2)) * _source_range(a, source_range))


def psnr(a: ImageLike, b: ImageLike, source_range: Optional[float] = None) -> float:
    """PSNR в дБ с пиком source_range; +inf для совпадающих снимков."""
    peak = _source_range(a, source_range)
    error = rmse(a, b, peak)
    if error == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / error)


def ssim(a: ImageLike, b: ImageLike) -> float:
    """
    SSIM по нормированным пикселям (L = 1).

    Гауссово окно 11x11, sigma = 1.5, C1 = (0.01 L)^2, C2 = (0.03 L)^2.
    """
    x, y = _grid(a), _grid(b)
    _check_shapes(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"Minimum side {min(x.shape)} < window {SSIM_WINDOW}")
    return float(structural_similarity(
        x,
        y,
        data_range=1.0,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
    ))


def pair_metrics(a: ImageSample, b: ImageSample) -> PairMetrics:
    return PairMetrics(id=a.id, rmse=rmse(a, b), psnr=psnr(a, b), ssim=ssim(a, b))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Квадратный корень симметричной неотрицательно определённой матрицы."""
    eigvals, eigvecs = linalg.eigh(matrix)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def _trace_sqrt_product(sigma_p: np.ndarray, sigma_q: np.ndarray) -> Optional[float]:
    """Tr((Sp Sq)^1/2) через собственные числа Sp^1/2 Sq Sp^1/2; None при сбое."""
    root_p = _psd_sqrt(sigma_p)
    middle = root_p @ sigma_q @ root_p
    middle = (middle + middle.T) / 2.0
    eigvals = linalg.eigh(middle, eigvals_only=True)
    if not np.all(np.isfinite(eigvals)):
        return None
    scale = max(1.0, float(np.max(np.abs(eigvals))))
    if eigvals.min() < -1e-8 * scale:
        return None
    return float(np.sum(np.sqrt(np.clip(eigvals, 0.0, None))))


def fid(p: FeatureSet, q: FeatureSet) -> float:
    """
    Расстояние Фреше между гауссовыми аппроксимациями двух наборов признаков.

    Args:
        p: Признаки первого набора (N >= 2)
        q: Признаки второго набора (N >= 2), та же размерность F

    Returns:
        FID >= 0
    """
    if p.features.shape[1] != q.features.shape[1]:
        raise DimensionMismatch(
            f"Feature dims differ: {p.features.shape[1]} vs {q.features.shape[1]}"
        )
    if p.features.shape[0] < 2 or q.features.shape[0] < 2:
        raise DimensionMismatch("FID needs at least 2 rows per set")

    mu_p, mu_q = p.features.mean(axis=0), q.features.mean(axis=0)
    sigma_p = np.atleast_2d(np.cov(p.features, rowvar=False))
    sigma_q = np.atleast_2d(np.cov(q.features, rowvar=False))

    trace_sqrt = _trace_sqrt_product(sigma_p, sigma_q)
    if trace_sqrt is None:
        logger.warning("FID: matrix square root failed, retrying with jitter")
        jitter = FID_JITTER * np.eye(sigma_p.shape[0])
        trace_sqrt = _trace_sqrt_product(sigma_p + jitter, sigma_q + jitter)
        if trace_sqrt is None:
            raise DegenerateCovariance("Covariance product has no real square root")

    diff = mu_p - mu_q
    value = float(diff @ diff + np.trace(sigma_p) + np.trace(sigma_q) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionMismatch(f"Vector dims differ: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("Cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 0.0


def classification_report_from_confusion(tp: int, fp: int, fn: int, tn: int,
                                         auc: Optional[float] = None) -> ClassificationReport:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassificationReport(
        auc=auc,
        accuracy=_ratio(tp + tn, tp + fp + fn + tn),
        f1=f1,
        precision=precision,
        recall=recall,
        confusion=Confusion(tp=tp, fp=fp, fn=fn, tn=tn),
    )


def roc_auc(scores: np.ndarray, truth: np.ndarray) -> Optional[float]:
    """AUC как статистика Манна-Уитни; связки получают 0.5. None для одного класса."""
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = stats.rankdata(scores, method="average")
    u = ranks[truth == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_report(scores: Sequence[float], truth: Sequence[int]) -> ClassificationReport:
    """
    Отчёт классификации: AUC, accuracy, F1, precision, recall.

    Args:
        scores: Оценки классификатора, N значений
        truth: Бинарные истинные метки, N значений

    Returns:
        ClassificationReport; порог для матрицы ошибок 0.5
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth, dtype=np.int64)
    if s.shape != y.shape:
        raise LengthMismatch(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise LengthMismatch("Empty score list")

    pred = s >= DECISION_THRESHOLD
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return classification_report_from_confusion(tp, fp, fn, tn, auc=roc_auc(s, y))


def summarize(values: Sequence[float]) -> SummaryStats:
    arr = np.asarray(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    non_finite = int(arr.size - finite.size)
    if finite.size == 0:
        fill = math.inf if arr.size else math.nan
        return SummaryStats(fill, 0.0, fill, fill, fill, int(arr.size), non_finite)
    sd = float(np.std(finite, ddof=1)) if finite.size > 1 else 0.0
    return SummaryStats(
        mean=float(np.mean(finite)),
        sd=sd,
        median=float(np.median(finite)),
        min=float(np.min(finite)),
        max=float(np.max(finite)),
        n=int(arr.size),
        non_finite=non_finite,
    )


def batched_fid(p: FeatureSet, q: FeatureSet, batch_size: int = FID_BATCH_SIZE) -> List[float]:
    """FID по последовательным батчам; батчи меньше двух строк пропускаются."""
    n = min(p.features.shape[0], q.features.shape[0])
    values = []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        if stop - start < 2:
            logger.warning(f"FID batch {start}:{stop} skipped (fewer than 2 rows)")
            continue
        values.append(fid(
            FeatureSet(p.features[start:stop], p.extractor_id),
            FeatureSet(q.features[start:stop], q.extractor_id),
        ))
    return values


def _match_pairs(originals: Sequence[ImageSample],
                 reconstructions: Sequence[ImageSample]) -> List[tuple]:
    recon_by_id = {r.id: r for r in reconstructions}
    orig_ids = {o.id for o in originals}
    for o in originals:
        if o.id not in recon_by_id:
            raise DataError(f"Reconstruction missing for id {o.id}")
    for r in reconstructions:
        if r.id not in orig_ids:
            raise DataError(f"Original missing for id {r.id}")
    return [(o, recon_by_id[o.id]) for o in sorted(originals, key=lambda s: s.id)]


def _finding_rows(pairs: List[tuple], classifiers: Sequence["Classifier"]) -> List[FindingRow]:
    rows = []
    for clf in classifiers:
        if clf.finding_id not in CHEXPERT_CLASSES:
            raise DataError(f"Unknown finding {clf.finding_id}")
        index = CHEXPERT_CLASSES.index(clf.finding_id)
        labeled = [(o, r) for o, r in pairs if o.labels is not None]
        if not labeled:
            logger.warning(f"No labeled originals for {clf.finding_id}, row skipped")
            continue
        truth = [int(normalize_labels(o.labels)[index]) for o, _ in labeled]
        rows.append(FindingRow(
            finding=clf.finding_id,
            prevalence=float(np.mean(truth)),
            original=classification_report([clf.score(o) for o, _ in labeled], truth),
            reconstruction=classification_report([clf.score(r) for _, r in labeled], truth),
        ))
    return rows


def reconstruction_report(
    originals: Sequence[ImageSample],
    reconstructions: Sequence[ImageSample],
    embedder: "FeatureExtractor",
    classifiers: Optional[Sequence["Classifier"]] = None,
    batch_size: int = FID_BATCH_SIZE,
) -> ReconstructionReport:
    """
    Парная оценка оригиналов и реконструкций.

    Args:
        originals: Исходные снимки
        reconstructions: Реконструкции с теми же id
        embedder: Экстрактор признаков (FID и косинусная близость)
        classifiers: Необязательные классификаторы находок
        batch_size: Размер батча для FID

    Returns:
        ReconstructionReport со статистиками по парам
    """
    pairs = _match_pairs(originals, reconstructions)

    def _one(pair: tuple) -> PairMetrics:
        o, r = pair
        try:
            return pair_metrics(o, r)
        except DataError as e:
            raise type(e)(f"{o.id}: {e}") from e

    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        per_pair = list(pool.map(_one, pairs))

    orig_features = embedder([o for o, _ in pairs])
    recon_features = embedder([r for _, r in pairs])
    cosines = [
        cosine_similarity(u, v)
        for u, v in zip(orig_features.features, recon_features.features)
    ]
    fid_values = batched_fid(orig_features, recon_features, batch_size)

    report = ReconstructionReport(
        pairs=per_pair,
        rmse=summarize([m.rmse for m in per_pair]),
        psnr=summarize([m.psnr for m in per_pair]),
        ssim=summarize([m.ssim for m in per_pair]),
        fid_batches=fid_values,
        fid_mean=float(np.mean(fid_values)) if fid_values else None,
        cosine=summarize(cosines),
        cosines=cosines,
        extractor_id=orig_features.extractor_id,
        findings=_finding_rows(pairs, classifiers or []),
    )
    logger.info(
        f"Reconstruction report: {len(per_pair)} pairs, "
        f"ssim mean {report.ssim.mean:.4f}, fid {report.fid_mean}"
    )
    return report


def findings_table(rows: Sequence[FindingRow]) -> pd.DataFrame:
    """Таблица по находкам: оригиналы против реконструкций."""
    def _r(value: Optional[float]) -> Optional[float]:
        return None if value is None else round(value, 3)

    return pd.DataFrame([
        {
            "Finding": row.finding,
            "Prevalence": _r(row.prevalence),
            "AUC orig": _r(row.original.auc),
            "AUC recon": _r(row.reconstruction.auc),
            "Accuracy orig": _r(row.original.accuracy),
            "Accuracy recon": _r(row.reconstruction.accuracy),
            "F1 orig": _r(row.original.f1),
            "F1 recon": _r(row.reconstruction.f1),
        }
        for row in rows
    ], columns=[
        "Finding", "Prevalence", "AUC orig", "AUC recon",
        "Accuracy orig", "Accuracy recon", "F1 orig", "F1 recon",
    ])
