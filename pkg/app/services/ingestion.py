"""
Сервис загрузки данных.
Снимки, отчёты, метки CheXpert и корпуса промптов; извлечение
раздела IMPRESSION и сборка few-shot набора для дообучения.
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from app.config import settings
from app.errors import DataError, FormatError, MissingSection, RangeError

logger = logging.getLogger(__name__)

CHEXPERT_CLASSES: Tuple[str, ...] = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
)
NO_FINDING = "No Finding"

# Состояния меток: 1 positive, 0 negative, -1 uncertain, None missing
POSITIVE, NEGATIVE, UNCERTAIN = 1, 0, -1
LABEL_STATES = (POSITIVE, NEGATIVE, UNCERTAIN, None)

NEGATIVE_PROMPT = "a photo of a lung xray"
POSITIVE_PROMPT = "a photo of a lung xray with visible pleural effusion"

_IMPRESSION_MARKER = re.compile(r"impression\s*:", re.IGNORECASE)
_SECTION_HEADER = re.compile(r"(?<![A-Za-z])[A-Z][A-Z ]{2,}:")

RAW_ENCODINGS = {
    "u8": "<u1",
    "u16": "<u2",
    "f4": "<f4",
    "normalized_f8": "<f8",
}


@dataclass(frozen=True)
class LabelVector:
    """14 меток CheXpert в алфавите {1, 0, -1, None}."""

    values: Tuple[Optional[int], ...]

    def __post_init__(self):
        if len(self.values) != len(CHEXPERT_CLASSES):
            raise FormatError(f"Expected {len(CHEXPERT_CLASSES)} labels, got {len(self.values)}")
        for v in self.values:
            if v not in LABEL_STATES or isinstance(v, bool):
                raise FormatError(f"Invalid label state: {v!r}")

    @classmethod
    def from_list(cls, raw: Sequence[Any]) -> "LabelVector":
        return cls(tuple(None if v is None else int(v) for v in raw))

    @classmethod
    def from_findings(cls, positives: Sequence[str]) -> "LabelVector":
        """Вектор, где перечисленные классы положительны, остальные отрицательны."""
        return cls(tuple(POSITIVE if c in positives else NEGATIVE for c in CHEXPERT_CLASSES))

    def to_list(self) -> List[Optional[int]]:
        return list(self.values)


@dataclass
class ImageSample:
    """Снимок с пикселями в [0, 1] и исходным динамическим диапазоном."""

    id: str
    pixels: np.ndarray
    source_range: float = 255.0
    labels: Optional[LabelVector] = None
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise FormatError("Pixel grid must be 2-D", locus=self.id)
        h, w = self.pixels.shape
        if not self.width:
            self.width = w
        if not self.height:
            self.height = h
        if (self.height, self.width) != (h, w):
            raise FormatError(f"Declared {self.width}x{self.height} but grid is {w}x{h}", locus=self.id)
        if not self.source_range > 0:
            raise RangeError(f"{self.id}: source_range must be positive")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise RangeError(f"{self.id}: pixel values outside [0, 1]")


@dataclass
class LabeledReport:
    """Отчёт рентгенолога с извлечённым заключением и метками."""

    id: str
    full_text: str
    impression: str
    labels: LabelVector
    primary_class: Optional[str]
    valid: bool = True
    problems: List[str] = field(default_factory=list)


@dataclass
class FinetuneSet:
    """Few-shot набор: снимки без находок, снимки с одной находкой и подписи."""

    negatives: List[ImageSample]
    positives: List[ImageSample]
    negative_captions: List[str]
    positive_captions: List[str]

    def __post_init__(self):
        if len(self.negatives) != len(self.negative_captions):
            raise DataError("Every negative image needs exactly one caption")
        if len(self.positives) != len(self.positive_captions):
            raise DataError("Every positive image needs exactly one caption")

    @property
    def prompts(self) -> List[str]:
        return self.negative_captions + self.positive_captions

    def pairs(self) -> List[Tuple[ImageSample, str]]:
        """Все пары (снимок, подпись): сначала негативы, затем позитивы."""
        return list(zip(self.negatives, self.negative_captions)) + list(
            zip(self.positives, self.positive_captions)
        )


@dataclass
class PromptCorpus:
    """Непустой корпус непустых промптов."""

    prompts: List[str]
    origin: str = "file"

    def __post_init__(self):
        if not self.prompts:
            raise DataError("Prompt corpus is empty")
        if any(not p.strip() for p in self.prompts):
            raise DataError("Prompt corpus contains an empty prompt")


def extract_impression(full_text: str) -> str:
    """
    Извлекает раздел IMPRESSION из отчёта.

    Берётся текст после последнего маркера "IMPRESSION:" (без учёта регистра)
    до следующего заголовка из заглавных букв или конца текста.

    Args:
        full_text: Полный текст отчёта

    Returns:
        Текст заключения без пробелов по краям
    """
    if not full_text or not full_text.strip():
        raise MissingSection("Report text is empty")

    markers = list(_IMPRESSION_MARKER.finditer(full_text))
    if not markers:
        raise MissingSection("No IMPRESSION section")

    start = markers[-1].end()
    rest = full_text[start:]
    header = _SECTION_HEADER.search(rest)
    end = start + header.start() if header else len(full_text)

    impression = full_text[start:end].strip()
    if not impression:
        raise MissingSection("IMPRESSION section is empty")
    return impression


def normalize_labels(raw: LabelVector) -> np.ndarray:
    """Uncertain и positive -> 1, negative и missing -> 0."""
    return np.array([1 if v in (POSITIVE, UNCERTAIN) else 0 for v in raw.values], dtype=np.int64)


def assign_primary_class(labels: LabelVector) -> Optional[str]:
    """
    Основной класс отчёта.

    Наименьший индекс среди положительных (после нормализации) классов,
    кроме "No Finding"; "No Finding" только если он единственный.
    """
    binary = normalize_labels(labels)
    positives = [CHEXPERT_CLASSES[i] for i in np.flatnonzero(binary)]
    findings = [c for c in positives if c != NO_FINDING]
    if findings:
        return findings[0]
    if NO_FINDING in positives:
        return NO_FINDING
    return None


def build_report(report_id: str, full_text: str, raw_labels: Sequence[Any]) -> LabeledReport:
    """Собрать LabeledReport; проблемные записи помечаются, а не отбрасываются."""
    labels = LabelVector.from_list(raw_labels)
    problems = []
    try:
        impression = extract_impression(full_text)
    except MissingSection as e:
        impression = ""
        problems.append(str(e))

    primary = assign_primary_class(labels)
    if primary is None:
        problems.append("No positive label")

    if problems:
        logger.warning(f"Report {report_id} flagged invalid: {'; '.join(problems)}")

    return LabeledReport(
        id=report_id,
        full_text=full_text,
        impression=impression,
        labels=labels,
        primary_class=primary,
        valid=not problems,
        problems=problems,
    )


# --- Чтение файлов ---

def _read_json(path: Path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise FormatError("File not found", locus=str(path)) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"Invalid JSON: {e.msg}", locus=f"{path}:{e.lineno}") from e


def _optional_labels(raw: Any, locus: str) -> Optional[LabelVector]:
    if raw is None:
        return None
    try:
        return LabelVector.from_list(raw)
    except (FormatError, TypeError, ValueError) as e:
        raise FormatError(f"Invalid labels: {e}", locus=locus) from e


def load_png(path: Path) -> ImageSample:
    """PNG в оттенках серого, 8 или 16 бит; необязательный JSON рядом."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            data = np.array(img)
    except (OSError, ValueError) as e:
        raise FormatError(f"Unreadable PNG: {e}", locus=str(path)) from e

    if mode in ("L", "P"):
        source_range = 255.0
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        source_range = 65535.0
    else:
        raise FormatError(f"Unsupported PNG mode {mode}", locus=str(path))

    if data.ndim != 2:
        raise FormatError("Expected a single-channel image", locus=str(path))
    if data.min() < 0 or data.max() > source_range:
        raise RangeError(f"{path}: pixel values exceed declared range {source_range:g}")

    sample_id = path.stem
    labels = None
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = _read_json(sidecar)
        sample_id = str(meta.get("id", sample_id))
        labels = _optional_labels(meta.get("labels"), str(sidecar))

    return ImageSample(
        id=sample_id,
        pixels=data.astype(np.float64) / source_range,
        source_range=source_range,
        labels=labels,
    )


def load_raw(sidecar_path: Path) -> ImageSample:
    """Raw-снимок: JSON {id, width, height, source_range, encoding, file}."""
    meta = _read_json(sidecar_path)
    locus = str(sidecar_path)
    try:
        sample_id = str(meta["id"])
        width, height = int(meta["width"]), int(meta["height"])
        source_range = float(meta["source_range"])
        encoding = meta.get("encoding", "f4")
        payload = sidecar_path.parent / meta.get("file", f"{sample_id}.raw")
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Invalid raw sidecar: {e}", locus=locus) from e

    if encoding not in RAW_ENCODINGS:
        raise FormatError(f"Unknown encoding {encoding}", locus=locus)
    if width <= 0 or height <= 0 or source_range <= 0:
        raise FormatError("Non-positive dimensions or range", locus=locus)

    try:
        values = np.fromfile(payload, dtype=RAW_ENCODINGS[encoding]).astype(np.float64)
    except OSError as e:
        raise FormatError(f"Unreadable payload {payload.name}", locus=locus) from e
    if values.size != width * height:
        raise FormatError(f"Payload has {values.size} values, expected {width * height}", locus=locus)

    if encoding == "normalized_f8":
        pixels = values
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise RangeError(f"{locus}: normalized pixels outside [0, 1]")
    else:
        if values.size and (values.min() < 0.0 or values.max() > source_range):
            raise RangeError(f"{locus}: pixel values exceed declared range {source_range:g}")
        pixels = values / source_range

    return ImageSample(
        id=sample_id,
        pixels=pixels.reshape(height, width),
        source_range=source_range,
        labels=_optional_labels(meta.get("labels"), locus),
    )


def load_image(path: Path) -> ImageSample:
    if path.suffix.lower() == ".png":
        return load_png(path)
    if path.suffix.lower() == ".json":
        return load_raw(path)
    raise FormatError("Expected .png or raw .json sidecar", locus=str(path))


def load_reports_file(path: Path) -> List[LabeledReport]:
    """JSON-lines: {id, text, labels: [14 значений из {-1, 0, 1, null}]}."""
    reports = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise FormatError("Unreadable reports file", locus=str(path)) from e

    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        locus = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
            report_id, text, raw_labels = str(obj["id"]), obj["text"], obj["labels"]
            labels = LabelVector.from_list(raw_labels)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"Invalid report record: {e}", locus=locus) from e
        except FormatError as e:
            raise FormatError(str(e), locus=locus) from e
        reports.append(build_report(report_id, text, labels.values))
    return reports


def load_prompts_file(path: Path) -> List[str]:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise FormatError("Unreadable prompts file", locus=str(path)) from e
    return [line.strip() for line in lines if line.strip()]


def _manifest_records(path: Path, kind: str) -> List[Path]:
    manifest = _read_json(path)
    if not isinstance(manifest, dict) or not isinstance(manifest.get("records"), list):
        raise FormatError("Manifest must be an object with a 'records' list", locus=str(path))
    declared = manifest.get("kind", kind)
    if declared != kind:
        raise FormatError(f"Manifest kind is {declared}, expected {kind}", locus=str(path))
    return [path.parent / str(r) for r in manifest["records"]]


def load_manifest(
    path: Union[str, Path],
    kind: str,
) -> Union[List[ImageSample], List[LabeledReport], PromptCorpus, List[str]]:
    """
    Загружает коллекцию по манифесту.

    Args:
        path: JSON-манифест {"kind": ..., "records": [относительные пути]}
        kind: images | reports | prompts

    Returns:
        Список ImageSample или LabeledReport (по возрастанию id),
        PromptCorpus для prompts (пустой манифест -> пустой список)
    """
    path = Path(path)
    if kind not in ("images", "reports", "prompts"):
        raise FormatError(f"Unknown manifest kind {kind}", locus=str(path))

    records = _manifest_records(path, kind)
    if not records:
        logger.warning(f"Manifest {path} is empty")
        return []

    if kind == "prompts":
        prompts = [p for r in records for p in load_prompts_file(r)]
        if not prompts:
            logger.warning(f"Manifest {path} has no prompts")
            return []
        return PromptCorpus(prompts=prompts, origin="file")

    loader = load_image if kind == "images" else load_reports_file
    # Порядок результата определяется сортировкой по id, а не планировщиком
    with ThreadPoolExecutor(max_workers=settings.threads) as pool:
        loaded = list(pool.map(loader, records))

    items = loaded if kind == "images" else [r for batch in loaded for r in batch]
    ids = [item.id for item in items]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise FormatError(f"Duplicate id {dup}", locus=str(path))

    logger.info(f"Loaded {len(items)} {kind} from {path}")
    return sorted(items, key=lambda item: item.id)


# --- Запись (для round-trip) ---

def save_images(samples: Sequence[ImageSample], directory: Union[str, Path]) -> Path:
    """Сохраняет снимки в raw normalized_f8 и пишет манифест; возвращает путь манифеста."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for sample in samples:
        payload = directory / f"{sample.id}.raw"
        sample.pixels.astype("<f8").tofile(payload)
        meta = {
            "id": sample.id,
            "width": sample.width,
            "height": sample.height,
            "source_range": sample.source_range,
            "encoding": "normalized_f8",
            "file": payload.name,
            "labels": sample.labels.to_list() if sample.labels else None,
        }
        sidecar = directory / f"{sample.id}.json"
        sidecar.write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        records.append(sidecar.name)
    return write_manifest(directory / "manifest.json", "images", records)


def save_reports(reports: Sequence[LabeledReport], path: Union[str, Path]) -> Path:
    """Сохраняет отчёты в JSON-lines рядом с манифестом."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps({"id": r.id, "text": r.full_text, "labels": r.labels.to_list()})
        for r in reports
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return write_manifest(path.parent / "manifest.json", "reports", [path.name])


def save_prompts(prompts: Sequence[str], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(prompts) + "\n", encoding="utf-8")
    return write_manifest(path.parent / "manifest.json", "prompts", [path.name])


def write_manifest(path: Union[str, Path], kind: str, records: Sequence[str]) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"kind": kind, "records": list(records)}, indent=2), encoding="utf-8")
    return path


# --- Few-shot набор ---

def build_finetune_set(
    images: Sequence[ImageSample],
    n_negative: int = 5,
    n_positive: int = 5,
    finding: str = "Pleural Effusion",
    negative_caption: str = NEGATIVE_PROMPT,
    positive_caption: str = POSITIVE_PROMPT,
) -> FinetuneSet:
    """
    Отбирает снимки без находок и снимки с единственной находкой.

    Args:
        images: Размеченные снимки (по возрастанию id)
        n_negative: Сколько снимков "No Finding"
        n_positive: Сколько снимков с находкой
        finding: Единственная положительная находка у позитивов

    Returns:
        FinetuneSet с подписями по классам
    """
    negatives, positives = [], []
    for sample in images:
        if sample.labels is None:
            continue
        binary = normalize_labels(sample.labels)
        positive_classes = {CHEXPERT_CLASSES[i] for i in np.flatnonzero(binary)}
        if positive_classes == {NO_FINDING}:
            negatives.append(sample)
        elif positive_classes == {finding}:
            positives.append(sample)

    if len(negatives) < n_negative or len(positives) < n_positive:
        raise DataError(
            f"Need {n_negative}+{n_positive} images, found {len(negatives)}+{len(positives)}"
        )

    negatives, positives = negatives[:n_negative], positives[:n_positive]
    return FinetuneSet(
        negatives=negatives,
        positives=positives,
        negative_captions=[negative_caption] * len(negatives),
        positive_captions=[positive_caption] * len(positives),
    )
