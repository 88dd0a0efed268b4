"""
Проекция эмбеддингов доменного энкодера в пространство энкодера
обусловливания: MLP Linear -> LayerNorm -> ReLU -> Linear с ручным
обратным проходом, на уровне документа или токенов.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.errors import ConfigError, DimensionMismatch, NoPairs, NonFiniteLoss
from app.services.encoder_bench import EncoderOutput
from app.services.ingestion import PromptCorpus
from app.services.optim import make_optimizer

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-5
MAX_LENGTH_GAP = 0.25

OBJECT_TEMPLATES = (
    "a photo of a {}",
    "a picture of a {}",
    "an image of a {}",
    "a close-up photo of a {}",
    "a cropped photo of a {}",
    "a good photo of a {}",
    "a rendering of a {}",
)
STYLE_TEMPLATES = (
    "a photo in the style of a {}",
    "a picture in the style of a {}",
    "an image in the style of a {}",
    "a rendering in the style of a {}",
    "a painting in the style of a {}",
)

PARAM_ORDER = ("w1", "b1", "ln_gamma", "ln_beta", "w2", "b2")


@dataclass
class ProjectionMLP:
    """
    y = W2^T relu(layernorm(W1^T x + b1)) + b2, построчно.

    Порядок слоёв: Linear, LayerNorm, ReLU, Linear.
    """

    params: Dict[str, np.ndarray]
    mode: str = "document"
    seed: int = 0
    step: int = 0

    @property
    def dim(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["w1"].shape[1]

    def copy(self) -> "ProjectionMLP":
        return ProjectionMLP({k: v.copy() for k, v in self.params.items()},
                             self.mode, self.seed, self.step)


@dataclass
class ProjectionTrainConfig:
    mode: str = "document"
    learning_rate: float = 1e-3
    steps: int = 500
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    hidden: Optional[int] = None
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in ("document", "token"):
            raise ConfigError(f"Unknown projection mode: {self.mode}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")


@dataclass
class ProjectionTrainResult:
    mlp: ProjectionMLP
    losses: List[float]
    dropped_pairs: int = 0
    pairs: int = 0


@dataclass
class _Cache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    u: np.ndarray
    r: np.ndarray
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


def init_projection(dim: int = 768, hidden: Optional[int] = None, seed: int = 0,
                    mode: str = "document") -> ProjectionMLP:
    """W из равномерного U(+-1/sqrt(fan_in)), gamma = 1, beta и смещения = 0."""
    hidden = hidden or dim
    rng = np.random.default_rng(seed)
    bound1, bound2 = 1.0 / np.sqrt(dim), 1.0 / np.sqrt(hidden)
    params = {
        "w1": rng.uniform(-bound1, bound1, size=(dim, hidden)),
        "b1": np.zeros(hidden),
        "ln_gamma": np.ones(hidden),
        "ln_beta": np.zeros(hidden),
        "w2": rng.uniform(-bound2, bound2, size=(hidden, dim)),
        "b2": np.zeros(dim),
    }
    return ProjectionMLP(params=params, mode=mode, seed=seed)


def _forward(mlp: ProjectionMLP, x: np.ndarray) -> Tuple[np.ndarray, _Cache]:
    p = mlp.params
    z = x @ p["w1"] + p["b1"]
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (z - mu) * inv_std
    u = p["ln_gamma"] * xhat + p["ln_beta"]
    r = np.maximum(u, 0.0)
    y = r @ p["w2"] + p["b2"]
    return y, _Cache(x=x, xhat=xhat, inv_std=inv_std, u=u, r=r)


def _backward(mlp: ProjectionMLP, cache: _Cache, dy: np.ndarray) -> Dict[str, np.ndarray]:
    p = mlp.params
    grads = {
        "w2": cache.r.T @ dy,
        "b2": dy.sum(axis=0),
    }
    dr = dy @ p["w2"].T
    du = dr * (cache.u > 0.0)
    grads["ln_gamma"] = (du * cache.xhat).sum(axis=0)
    grads["ln_beta"] = du.sum(axis=0)
    dxhat = du * p["ln_gamma"]
    dz = cache.inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - cache.xhat * (dxhat * cache.xhat).mean(axis=1, keepdims=True)
    )
    grads["w1"] = cache.x.T @ dz
    grads["b1"] = dz.sum(axis=0)
    return grads


def project(mlp: ProjectionMLP, x: np.ndarray) -> np.ndarray:
    """Прямой проход для вектора D или матрицы T x D (построчно)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    if rows.ndim != 2 or rows.shape[1] != mlp.dim:
        raise DimensionMismatch(f"Expected input dim {mlp.dim}, got shape {arr.shape}")
    y, _ = _forward(mlp, rows)
    return y[0] if single else y


def projection_loss(mlp: ProjectionMLP, x: np.ndarray,
                    y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Средняя по строкам квадратичная ошибка ||project(x) - y||^2 и её градиенты."""
    pred, cache = _forward(mlp, x)
    diff = pred - y
    loss = float(np.sum(diff * diff) / x.shape[0])
    grads = _backward(mlp, cache, 2.0 * diff / x.shape[0])
    return loss, grads


def align_token_pairs(
    sources: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Выравнивание последовательностей разных токенизаторов.

    Пары обрезаются до более короткой длины; пары, длины которых
    различаются больше чем на 25% от длинной, отбрасываются.

    Returns:
        (строки источника, строки цели, число отброшенных пар)
    """
    if len(sources) != len(targets):
        raise NoPairs(f"{len(sources)} source vs {len(targets)} target sequences")
    xs, ys, dropped = [], [], 0
    for s, t in zip(sources, targets):
        ls, lt = len(s), len(t)
        if abs(ls - lt) > MAX_LENGTH_GAP * max(ls, lt):
            dropped += 1
            continue
        n = min(ls, lt)
        xs.append(np.asarray(s, dtype=np.float64)[:n])
        ys.append(np.asarray(t, dtype=np.float64)[:n])
    if dropped:
        logger.warning(f"Token alignment dropped {dropped} pairs with mismatched lengths")
    if not xs:
        return np.empty((0, 0)), np.empty((0, 0)), dropped
    return np.vstack(xs), np.vstack(ys), dropped


def train_projection(
    source: Sequence,
    target: Sequence,
    cfg: ProjectionTrainConfig,
    mlp: Optional[ProjectionMLP] = None,
) -> ProjectionTrainResult:
    """
    Обучение проекции по парам эмбеддингов на одних и тех же промптах.

    Args:
        source: Документы N x D (document) или список T_i x D (token)
        target: Цели той же структуры от энкодера обусловливания
        cfg: Настройки обучения
        mlp: Начальная проекция (по умолчанию инициализируется из cfg.seed)

    Returns:
        ProjectionTrainResult с обученной проекцией и трассой лосса
    """
    dropped = 0
    if cfg.mode == "token":
        x, y, dropped = align_token_pairs(source, target)
    else:
        x = np.asarray(source, dtype=np.float64)
        y = np.asarray(target, dtype=np.float64)
        if x.shape[0] != y.shape[0]:
            raise NoPairs(f"{x.shape[0]} source vs {y.shape[0]} target rows")
    if x.size == 0:
        raise NoPairs("No training pairs")
    if x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"Source dim {x.shape[1]} vs target dim {y.shape[1]}")

    if mlp is None:
        mlp = init_projection(x.shape[1], cfg.hidden, seed=cfg.seed, mode=cfg.mode)
    elif mlp.dim != x.shape[1]:
        raise DimensionMismatch(f"Projection dim {mlp.dim} vs data dim {x.shape[1]}")

    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate)
    n = x.shape[0]
    batch = min(cfg.batch_size, n)
    losses = []

    for step in tqdm(range(cfg.steps), desc="projection", disable=None, leave=False):
        idx = rng.choice(n, size=batch, replace=False)
        loss, grads = projection_loss(mlp, x[idx], y[idx])
        if not np.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        losses.append(loss)
        optimizer.step(mlp.params, grads)
        mlp.step += 1
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.debug(f"projection step {step + 1}: loss {loss:.6f}")

    logger.info(f"Projection trained: {cfg.steps} steps on {n} pairs, final loss {losses[-1]:.6f}")
    return ProjectionTrainResult(mlp=mlp, losses=losses, dropped_pairs=dropped, pairs=n)


def expand_prompt_templates(
    concepts: Sequence[str],
    family: str = "object",
    variants: Optional[Sequence[str]] = None,
) -> PromptCorpus:
    """
    Корпус промптов из шаблонов.

    Args:
        concepts: Понятия для подстановки
        family: object ("a photo of a ...") или style ("a photo in the style of a ...")
        variants: Дополнительные шаблоны; None - стандартные варианты, [] - только базовый

    Returns:
        PromptCorpus в порядке (понятие, шаблон)
    """
    if not concepts:
        raise ConfigError("No concepts to expand")
    if family == "object":
        base, defaults = OBJECT_TEMPLATES[0], OBJECT_TEMPLATES[1:]
    elif family == "style":
        base, defaults = STYLE_TEMPLATES[0], STYLE_TEMPLATES[1:]
    else:
        raise ConfigError(f"Unknown template family: {family}")

    templates = [base] + list(defaults if variants is None else variants)
    prompts = [template.format(concept) for concept in concepts for template in templates]
    return PromptCorpus(prompts=prompts, origin="template")


class ProjectedTextEncoder:
    """
    Доменный энкодер + обученная проекция как энкодер обусловливания.

    В режиме token проецируются все состояния токенов, в режиме document -
    вектор pooled (состояния токенов проецируются тоже, чтобы размерности совпали).
    """

    def __init__(self, inner, mlp: ProjectionMLP):
        if inner.dim != mlp.dim:
            raise DimensionMismatch(f"Encoder dim {inner.dim} vs projection dim {mlp.dim}")
        self.inner = inner
        self.mlp = mlp
        self.dim = mlp.dim

    @property
    def embedding(self) -> np.ndarray:
        return self.inner.embedding

    def tokenize(self, text: str) -> List[int]:
        return self.inner.tokenize(text)

    def parameters(self) -> Dict[str, np.ndarray]:
        params = dict(self.inner.parameters())
        params.update({f"projection.{k}": v for k, v in self.mlp.params.items()})
        return params

    def encode_text(self, text: str) -> EncoderOutput:
        out = self.inner.encode_text(text)
        states = project(self.mlp, out.token_states)
        if self.mlp.mode == "token":
            pooled = states.mean(axis=0)
        else:
            source = out.pooled if out.pooled is not None else out.token_states.mean(axis=0)
            pooled = project(self.mlp, source)
        return EncoderOutput(token_states=states, pooled=pooled,
                             encoder_id=f"{out.encoder_id}+projection")
