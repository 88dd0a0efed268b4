"""
Централизованная конфигурация приложения.
Загружает настройки процесса из переменных окружения
и разбирает JSON-конфиги запусков.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

from dotenv import load_dotenv

from app.errors import ConfigError

load_dotenv()

SCHEMA_VERSION = 1

COMMANDS = (
    "recon-eval",
    "text-bench",
    "train-projection",
    "train-ti",
    "train-unet",
    "generate",
    "classify-eval",
    "fid-grid",
)


@dataclass
class Settings:
    """Настройки процесса."""

    out_dir: str = os.getenv("WORKBENCH_OUT_DIR", "out")
    threads: int = 1
    db_path: str = os.getenv("DB_PATH", "data/runs.sqlite3")
    log_level: str = os.getenv("LOG_LEVEL", "INFO")

    def __post_init__(self):
        threads_str = os.getenv("WORKBENCH_THREADS", "")
        if threads_str.strip():
            self.threads = max(1, int(threads_str))

    def reload(self) -> None:
        """Перечитать переменные окружения (нужно тестам)."""
        self.out_dir = os.getenv("WORKBENCH_OUT_DIR", "out")
        self.db_path = os.getenv("DB_PATH", "data/runs.sqlite3")
        self.log_level = os.getenv("LOG_LEVEL", "INFO")
        self.threads = 1
        self.__post_init__()


settings = Settings()


# --- Подконфиги команд ---

@dataclass
class ToySection:
    """Размеры игрушечного бандла."""

    image_size: int = 64
    latent_channels: int = 4
    cond_dim: int = 32
    hidden: int = 128
    timesteps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    prior_std: float = 0.3
    vocab_buckets: int = 4096
    pool_size: int = 48


@dataclass
class SyntheticSection:
    """Синтетический набор снимков вместо манифеста."""

    n_negative: int = 5
    n_positive: int = 5
    size: int = 64


@dataclass
class ReconEvalConfig:
    originals: Optional[str] = None
    reconstructions: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None
    bundle: Optional[str] = None
    toy: ToySection = field(default_factory=ToySection)
    batch_size: int = 32
    sample_latent: bool = False
    classifier: Optional[str] = None
    extractor_seed: int = 0


@dataclass
class EncoderSource:
    encoder_id: str = ""
    index: str = ""


@dataclass
class TextBenchConfig:
    reports: str = ""
    encoders: List[EncoderSource] = field(default_factory=list)
    strategies: List[str] = field(default_factory=lambda: [
        "cls_hidden_state", "mean_hidden_states", "pooler_output", "model_specific"
    ])
    k: int = 10
    label_mode: str = "primary_class"
    baseline: bool = True
    embed_2d: bool = False


@dataclass
class ProjectionSection:
    source: Optional[str] = None
    target: Optional[str] = None
    prompts: Optional[str] = None
    concepts: List[str] = field(default_factory=lambda: ["lung xray"])
    family: str = "object"
    source_seed: int = 1
    target_seed: int = 2
    cond_dim: int = 32
    mode: str = "document"
    hidden: int = 0
    learning_rate: float = 1e-3
    steps: int = 500
    batch_size: int = 16
    optimizer: str = "adam"


@dataclass
class TextualInversionSection:
    bundle: Optional[str] = None
    toy: ToySection = field(default_factory=ToySection)
    images: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None
    surface: str = "<lung-xray>"
    init_from: Optional[str] = "xray"
    caption: str = "a photo of a <lung-xray>"
    steps: int = 300
    learning_rate: float = 0.05
    batch_size: int = 4
    optimizer: str = "adam"


@dataclass
class UnetSection:
    bundle: Optional[str] = None
    toy: ToySection = field(default_factory=ToySection)
    images: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None
    with_prior: bool = False
    prior_weight: float = 1.0
    class_caption: str = "a photo of a chest xray"
    prior_size: int = 0
    steps: int = 400
    learning_rate: float = 5e-3
    batch_size: int = 4
    optimizer: str = "adam"


@dataclass
class PromptSpec:
    caption: str = ""
    label: int = 0


@dataclass
class GenerateSection:
    bundle: Optional[str] = None
    toy: ToySection = field(default_factory=ToySection)
    prompts: List[PromptSpec] = field(default_factory=lambda: [
        PromptSpec("a photo of a lung xray", 0),
        PromptSpec("a photo of a lung xray with visible pleural effusion", 1),
    ])
    per_prompt_count: int = 50
    steps: int = 50
    mode: str = "deterministic"


@dataclass
class ClassifyEvalSection:
    generated: str = ""
    classifier: Optional[str] = None
    classifier_seed: int = 0
    method: str = "Stable Diffusion"


@dataclass
class FidGridSection:
    bundles: Dict[str, str] = field(default_factory=dict)
    toy: ToySection = field(default_factory=ToySection)
    prompts: List[str] = field(default_factory=list)
    references: Dict[str, str] = field(default_factory=dict)
    per_prompt_count: int = 50
    steps: int = 50
    mode: str = "deterministic"
    extractor_seed: int = 0


SECTION_TYPES: Dict[str, type] = {
    "recon-eval": ReconEvalConfig,
    "text-bench": TextBenchConfig,
    "train-projection": ProjectionSection,
    "train-ti": TextualInversionSection,
    "train-unet": UnetSection,
    "generate": GenerateSection,
    "classify-eval": ClassifyEvalSection,
    "fid-grid": FidGridSection,
}


@dataclass
class RunPaths:
    input: str = "."
    output: str = ""


@dataclass
class RunConfig:
    """Конфиг одного запуска CLI."""

    command: str
    seed: int
    paths: RunPaths
    section: Any
    schema_version: int = SCHEMA_VERSION
    base_dir: Path = Path(".")

    def resolve(self, relative: Optional[str]) -> Optional[Path]:
        """Путь относительно input-директории конфига."""
        if relative is None:
            return None
        path = Path(relative)
        if path.is_absolute():
            return path
        return self.base_dir / self.paths.input / path

    @property
    def out_path(self) -> Path:
        return Path(self.paths.output or settings.out_dir)


T = TypeVar("T")


def _unwrap_optional(tp: Any) -> Any:
    args = getattr(tp, "__args__", None)
    if getattr(tp, "__origin__", None) is not None and args and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        if len(rest) == 1:
            return rest[0]
    return tp


def from_dict(cls: Type[T], data: Any, where: str) -> T:
    """
    Строгий разбор словаря в dataclass.

    Args:
        cls: Целевой dataclass
        data: Словарь из JSON
        where: Путь в конфиге для сообщений об ошибках

    Returns:
        Экземпляр cls
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")

    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key '{unknown[0]}'")

    kwargs = {}
    for name, value in data.items():
        tp = _unwrap_optional(known[name].type)
        kwargs[name] = _convert(tp, value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def _convert(tp: Any, value: Any, where: str) -> Any:
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    origin = getattr(tp, "__origin__", None)
    if origin in (list, List):
        (item_tp,) = tp.__args__
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_convert(item_tp, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin in (dict, Dict):
        _, val_tp = tp.__args__
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return {str(k): _convert(val_tp, v, f"{where}.{k}") for k, v in value.items()}
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}")
    if tp is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected int")
    return value


def load_run_config(
    path: str,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> RunConfig:
    """
    Загрузить и проверить конфиг запуска.

    Args:
        path: Путь к JSON-конфигу
        seed: Переопределение seed из CLI
        out_dir: Переопределение выходной директории из CLI

    Returns:
        RunConfig
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}") from e

    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")

    command = raw.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"Unknown command: {command!r}")

    allowed = {"schema_version", "command", "seed", "paths", command}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown key '{unknown[0]}'")

    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"Unsupported schema_version: {raw.get('schema_version')!r}")

    run_seed = raw.get("seed", 0)
    if not isinstance(run_seed, int) or isinstance(run_seed, bool):
        raise ConfigError("config.seed: expected int")
    if seed is not None:
        run_seed = seed

    paths = from_dict(RunPaths, raw.get("paths", {}), "config.paths")
    if out_dir is not None:
        paths.output = out_dir

    section = from_dict(SECTION_TYPES[command], raw.get(command, {}), f"config.{command}")

    return RunConfig(
        command=command,
        seed=run_seed,
        paths=paths,
        section=section,
        base_dir=Path(path).resolve().parent,
    )
