"""
Стратегии адаптации бандла: текстовая инверсия (обучается одна строка
таблицы эмбеддингов), дообучение денойзера и дообучение с сохранением
априорного класса.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.errors import (
    ConfigError,
    DataError,
    EmptyPriorSet,
    InvalidRange,
    NonFiniteLoss,
    StrategyUnavailable,
    TokenNotInCaption,
)
from app.services.diffusion import DiffusionBundle, denoise_loss
from app.services.evaluation import derive_seed
from app.services.ingestion import FinetuneSet, ImageSample
from app.services.optim import make_optimizer

logger = logging.getLogger(__name__)

STRATEGIES = ("textual_inversion", "unet", "unet_with_prior")
DEFAULT_CLASS_CAPTION = "a photo of a chest xray"

Pair = Tuple[ImageSample, str]


@dataclass
class TokenRegistration:
    surface: str
    token_id: int
    init: np.ndarray


@dataclass
class FinetuneConfig:
    strategy: str = "unet"
    steps: int = 400
    learning_rate: float = 5e-3
    batch_size: int = 4
    seed: int = 0
    prior_weight: float = 1.0
    prior_set: Optional[List[Pair]] = None
    optimizer: str = "adam"
    class_caption: str = DEFAULT_CLASS_CAPTION
    prior_size: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"Unknown strategy: {self.strategy}")
        if self.steps < 1:
            raise InvalidRange(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise InvalidRange(f"batch_size must be >= 1, got {self.batch_size}")
        if self.prior_weight < 0:
            raise InvalidRange(f"prior_weight must be >= 0, got {self.prior_weight}")


@dataclass
class TrainResult:
    """
    Итог обучения.

    losses - полный лосс шага; instance_losses и prior_losses - его слагаемые
    без веса (prior_losses пуст без априорного набора).
    """

    losses: List[float]
    steps: int
    strategy: str
    trainable: List[str] = field(default_factory=list)
    instance_losses: List[float] = field(default_factory=list)
    prior_losses: List[float] = field(default_factory=list)

    def curve(self) -> Dict[str, float]:
        """Отношения лоссов конца и начала обучения, полного и по слагаемым."""
        ratios = {"loss_ratio": loss_ratio(self.losses)}
        if self.instance_losses:
            ratios["instance_loss_ratio"] = loss_ratio(self.instance_losses)
        if self.prior_losses:
            ratios["prior_loss_ratio"] = loss_ratio(self.prior_losses)
        return ratios


def register_token(bundle: DiffusionBundle, surface: str,
                   init_from: Optional[str] = None, seed: int = 0) -> TokenRegistration:
    """
    Регистрация нового токена в текстовом энкодере бандла.

    Args:
        bundle: Бандл диффузии
        surface: Новый токен, например "<lung-xray>"
        init_from: Существующее слово, чей эмбеддинг копируется
        seed: Seed случайной инициализации, если init_from не задан

    Returns:
        TokenRegistration
    """
    text = bundle.text
    if not hasattr(text, "register"):
        raise StrategyUnavailable("Text encoder does not support token registration")

    if init_from is not None:
        ids = text.tokenize(init_from)[1:]
        if len(ids) != 1:
            raise ConfigError(f"init_from must be a single token, got '{init_from}'")
        init = text.embedding[ids[0]].copy()
    else:
        rng = np.random.default_rng(seed)
        init = rng.standard_normal(text.dim) * float(np.std(text.embedding))

    token_id = text.register(surface, init)
    logger.info(f"Registered token {surface} as id {token_id}")
    return TokenRegistration(surface=surface, token_id=token_id, init=init.copy())


def freeze_mask(bundle: DiffusionBundle, strategy: str,
                reg: Optional[TokenRegistration] = None) -> Dict[str, np.ndarray]:
    """
    Булевы маски обучаемых элементов для каждого параметра бандла.

    textual_inversion: только строка reg.token_id в text.embedding;
    unet и unet_with_prior: все denoiser.*; остальное заморожено.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"Unknown strategy: {strategy}")
    masks = {}
    for name, value in bundle.parameters().items():
        if strategy == "textual_inversion":
            mask = np.zeros(value.shape, dtype=bool)
            if name == "text.embedding":
                if reg is None:
                    raise ConfigError("textual_inversion needs a token registration")
                mask[reg.token_id] = True
        else:
            mask = np.full(value.shape, name.startswith("denoiser."), dtype=bool)
        masks[name] = mask
    return masks


def _trainable_names(masks: Dict[str, np.ndarray]) -> List[str]:
    return sorted(name for name, mask in masks.items() if mask.any())


def _latents(bundle: DiffusionBundle, pairs: Sequence[Pair]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(mean, logvar) латентного распределения каждого снимка."""
    return [bundle.vae.encode(image.pixels) for image, _ in pairs]


class _PairSampler:
    """Один поток случайности на набор пар: индекс, латент, t и шум."""

    def __init__(self, bundle: DiffusionBundle, pairs: Sequence[Pair], seed_seq: np.random.SeedSequence):
        if not pairs:
            raise DataError("Training set is empty")
        self.bundle = bundle
        self.captions = [caption for _, caption in pairs]
        self.latents = _latents(bundle, pairs)
        self.rng = np.random.default_rng(seed_seq)

    def batch_loss(self, batch_size: int,
                   masks: Dict[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
        vae = self.bundle.vae
        total, grads = 0.0, {}
        for _ in range(batch_size):
            i = int(self.rng.integers(len(self.captions)))
            mean, logvar = self.latents[i]
            x0 = vae.sample(mean, logvar, self.rng) * vae.scaling
            t = int(self.rng.integers(self.bundle.schedule.T))
            eps = self.rng.standard_normal(x0.shape)
            loss, g = denoise_loss(self.bundle, x0, self.captions[i], t, eps, masks)
            total += loss / batch_size
            for name, value in g.items():
                if name in grads:
                    grads[name] += value / batch_size
                else:
                    grads[name] = value / batch_size
        return total, grads


def _run(
    bundle: DiffusionBundle,
    samplers: Sequence[Tuple[_PairSampler, float]],
    cfg: FinetuneConfig,
    masks: Dict[str, np.ndarray],
    desc: str,
) -> Tuple[List[float], List[List[float]]]:
    """Возвращает полный лосс по шагам и невзвешенные слагаемые каждого сэмплера."""
    trainable = _trainable_names(masks)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate,
                               {name: masks[name] for name in trainable})
    losses: List[float] = []
    parts: List[List[float]] = [[] for _ in samplers]
    for step in tqdm(range(cfg.steps), desc=desc, disable=None, leave=False):
        params = bundle.parameters()
        loss, grads = 0.0, {}
        for trace, (sampler, weight) in zip(parts, samplers):
            part, part_grads = sampler.batch_loss(cfg.batch_size, masks)
            trace.append(float(part))
            loss += weight * part
            for name in trainable:
                g = weight * part_grads[name]
                grads[name] = grads[name] + g if name in grads else g
        if not np.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        losses.append(float(loss))
        optimizer.step(params, grads)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.debug(f"{desc} step {step + 1}: loss {loss:.6f}")
    logger.info(f"{desc}: {cfg.steps} steps, loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    return losses, parts


def train_textual_inversion(bundle: DiffusionBundle, data: FinetuneSet,
                            reg: TokenRegistration, cfg: FinetuneConfig) -> TrainResult:
    """
    Текстовая инверсия: градиенты всех параметров, кроме строки нового токена, обнуляются.

    Args:
        bundle: Бандл с зарегистрированным токеном
        data: Набор снимков; каждая подпись содержит reg.surface
        reg: Регистрация токена
        cfg: Настройки (strategy = textual_inversion)

    Returns:
        TrainResult; бандл обновлён на месте
    """
    if cfg.strategy != "textual_inversion":
        raise ConfigError(f"Expected strategy textual_inversion, got {cfg.strategy}")
    pairs = data.pairs()
    for _, caption in pairs:
        if reg.token_id not in bundle.text.tokenize(caption):
            raise TokenNotInCaption(f"Caption '{caption}' does not contain {reg.surface}")

    masks = freeze_mask(bundle, cfg.strategy, reg)
    (instance_seq,) = np.random.SeedSequence(cfg.seed).spawn(1)
    losses, (instance,) = _run(bundle, [(_PairSampler(bundle, pairs, instance_seq), 1.0)], cfg, masks,
                               "textual inversion")
    return TrainResult(losses=losses, steps=cfg.steps, strategy=cfg.strategy,
                       trainable=_trainable_names(masks), instance_losses=instance)


def train_unet(bundle: DiffusionBundle, data: FinetuneSet, cfg: FinetuneConfig) -> TrainResult:
    """
    Дообучение денойзера; VAE и текстовый энкодер заморожены.

    С unet_with_prior общий лосс = лосс на наборе + prior_weight * лосс на
    заранее сгенерированном априорном наборе. Потоки случайности набора
    и априорного набора независимы.
    """
    if cfg.strategy not in ("unet", "unet_with_prior"):
        raise ConfigError(f"Expected strategy unet or unet_with_prior, got {cfg.strategy}")

    masks = freeze_mask(bundle, cfg.strategy)
    instance_seq, prior_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    samplers = [(_PairSampler(bundle, data.pairs(), instance_seq), 1.0)]
    if cfg.strategy == "unet_with_prior":
        if not cfg.prior_set:
            raise EmptyPriorSet("unet_with_prior needs a non-empty prior set")
        samplers.append((_PairSampler(bundle, cfg.prior_set, prior_seq), cfg.prior_weight))

    losses, parts = _run(bundle, samplers, cfg, masks, cfg.strategy.replace("_", " "))
    if len(parts) > 1:
        logger.info(f"Instance loss ratio {loss_ratio(parts[0]):.3f}, "
                    f"prior loss ratio {loss_ratio(parts[1]):.3f}")
    return TrainResult(losses=losses, steps=cfg.steps, strategy=cfg.strategy,
                       trainable=_trainable_names(masks), instance_losses=parts[0],
                       prior_losses=parts[1] if len(parts) > 1 else [])


def generate_prior_set(bundle: DiffusionBundle, class_caption: str, n: int, seed: int = 0,
                       steps: int = 50, mode: str = "deterministic") -> List[Pair]:
    """
    Априорный набор: n сэмплов замороженного бандла с подписью класса.

    Returns:
        Список пар (снимок, подпись класса)
    """
    if n < 1:
        raise InvalidRange(f"Prior set size must be >= 1, got {n}")
    pairs = []
    for i in range(n):
        image = bundle.generate(class_caption, derive_seed(seed, 0, i), steps, mode)
        image.id = f"prior-{i:03d}"
        pairs.append((image, class_caption))
    logger.info(f"Generated prior set of {n} images for '{class_caption}'")
    return pairs


def data_hash(pairs: Sequence[Pair]) -> str:
    digest = hashlib.sha256()
    for image, caption in pairs:
        digest.update(image.id.encode("utf-8"))
        digest.update(np.ascontiguousarray(image.pixels, dtype="<f8").tobytes())
        digest.update(caption.encode("utf-8"))
    return digest.hexdigest()


def provenance(cfg: FinetuneConfig, data: FinetuneSet,
               reg: Optional[TokenRegistration] = None) -> Dict[str, Any]:
    """Провенанс обучения: стратегия, шаги, seed и хэши данных."""
    record = {
        "strategy": cfg.strategy,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "optimizer": cfg.optimizer,
        "data_hashes": {
            "instance": data_hash(data.pairs()),
        },
        "images": [image.id for image, _ in data.pairs()],
    }
    if cfg.strategy == "unet_with_prior":
        record["prior_weight"] = cfg.prior_weight
        record["class_caption"] = cfg.class_caption
        record["data_hashes"]["prior"] = data_hash(cfg.prior_set or [])
    if reg is not None:
        record["token"] = {"surface": reg.surface, "token_id": reg.token_id}
    return record


def loss_ratio(losses: Sequence[float], fraction: float = 0.1) -> float:
    """Средний лосс последних fraction шагов к среднему первых."""
    if not losses:
        raise DataError("Empty loss trace")
    n = max(1, int(round(len(losses) * fraction)))
    return float(np.mean(losses[-n:]) / np.mean(losses[:n]))
