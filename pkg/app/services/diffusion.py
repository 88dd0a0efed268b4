"""
Латентная диффузия: расписание шума, прямой процесс, лосс предсказания шума,
семплеры и бандл из трёх подключаемых компонентов.
"""

import copy
import logging
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from app.errors import InconsistentDims, InvalidRange, ShapeMismatch, TOutOfRange
from app.services.ingestion import ImageSample

logger = logging.getLogger(__name__)

SAMPLER_MODES = {"deterministic": 0.0, "ancestral": 1.0}


@dataclass
class NoiseSchedule:
    """Линейное расписание beta и кумулятивные произведения alpha."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def make_schedule(T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    """
    Линейное расписание шума.

    Args:
        T: Число шагов диффузии
        beta_start: Первая beta
        beta_end: Последняя beta

    Returns:
        NoiseSchedule
    """
    if T < 1:
        raise InvalidRange(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRange(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def _check_t(t: int, schedule: NoiseSchedule) -> None:
    if not 0 <= t < schedule.T:
        raise TOutOfRange(f"t={t} outside [0, {schedule.T})")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """
    x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    eps может нести ведущие batch-оси поверх формы x0.
    """
    _check_t(t, schedule)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[eps.ndim - x0.ndim:] != x0.shape:
        raise ShapeMismatch(f"Noise shape {eps.shape} does not match latent shape {x0.shape}")
    abar = schedule.alpha_bars[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


@dataclass
class DiffusionBundle:
    """VAE + текстовый энкодер + денойзер + расписание."""

    vae: Any
    text: Any
    denoiser: Any
    schedule: NoiseSchedule
    seed: int = 0
    image_size: int = 64

    def __post_init__(self):
        self.check_dims()

    def check_dims(self) -> None:
        if self.text.dim != self.denoiser.cond_dim:
            raise InconsistentDims(
                f"Text encoder width {self.text.dim} vs denoiser conditioning {self.denoiser.cond_dim}"
            )
        latent_dim = getattr(self.denoiser, "latent_dim", None)
        if latent_dim is not None:
            shape = self.vae.latent_shape(self.image_size, self.image_size)
            if int(np.prod(shape)) != latent_dim:
                raise InconsistentDims(f"VAE latent {shape} vs denoiser latent dim {latent_dim}")
        timesteps = getattr(self.denoiser, "timesteps", None)
        if timesteps is not None and timesteps != self.schedule.T:
            raise InconsistentDims(f"Denoiser built for T={timesteps}, schedule has T={self.schedule.T}")

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return self.vae.latent_shape(self.image_size, self.image_size)

    def parameters(self) -> Dict[str, np.ndarray]:
        """Плоский словарь параметров: vae.*, text.*, denoiser.*"""
        params = {}
        for prefix, component in (("vae", self.vae), ("text", self.text), ("denoiser", self.denoiser)):
            for name, value in component.parameters().items():
                params[f"{prefix}.{name}"] = value
        return params

    def condition(self, caption: str) -> np.ndarray:
        out = self.text.encode_text(caption)
        return out.pooled if out.pooled is not None else out.token_states.mean(axis=0)

    def encode_image(self, pixels: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Латент снимка: среднее распределения или, при rng, сэмпл из него."""
        mean, logvar = self.vae.encode(pixels)
        latent = mean if rng is None else self.vae.sample(mean, logvar, rng)
        return latent * self.vae.scaling

    def copy(self) -> "DiffusionBundle":
        return copy.deepcopy(self)

    def generate(self, caption: str, seed: int, steps: int = 50,
                 mode: str = "deterministic") -> ImageSample:
        return sample(self, caption, steps, mode, seed)


def _timesteps(T: int, steps: int) -> np.ndarray:
    if steps < 1 or steps > T:
        raise InvalidRange(f"steps must be in [1, {T}], got {steps}")
    return np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)


def denoise_loss(
    bundle: DiffusionBundle,
    x0: np.ndarray,
    caption: str,
    t: int,
    eps: np.ndarray,
    mask: Optional[Mapping[str, np.ndarray]] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    MSE между предсказанным и истинным шумом.

    Args:
        bundle: Бандл диффузии
        x0: Чистый латент
        caption: Подпись для обусловливания
        t: Шаг диффузии
        eps: Истинный шум той же формы
        mask: Булевы маски обучаемых элементов по именам параметров

    Returns:
        (loss, градиенты по параметрам бандла); замороженные элементы обнулены
    """
    x_t = forward_diffuse(x0, t, eps, bundle.schedule)
    if eps.shape != x0.shape:
        raise ShapeMismatch(f"Noise shape {eps.shape} does not match latent shape {x0.shape}")

    text, denoiser = bundle.text, bundle.denoiser
    differentiable = hasattr(denoiser, "forward") and hasattr(denoiser, "backward")

    if hasattr(text, "encode_for_grad"):
        cond, text_cache = text.encode_for_grad(caption)
    else:
        cond, text_cache = bundle.condition(caption), None

    if differentiable:
        pred, cache = denoiser.forward(x_t, t, cond)
    else:
        pred, cache = denoiser.predict_noise(x_t, t, cond), None

    diff = pred - eps
    loss = float(np.mean(diff * diff))
    if not differentiable:
        return loss, {}

    grad_out = 2.0 * diff / diff.size
    denoiser_grads, grad_cond = denoiser.backward(cache, grad_out)
    grads = {f"denoiser.{k}": v for k, v in denoiser_grads.items()}
    if text_cache is not None:
        for k, v in text.backward(text_cache, grad_cond).items():
            grads[f"text.{k}"] = v

    if mask is not None:
        grads = {
            name: np.where(mask[name], g, 0.0) if name in mask else g
            for name, g in grads.items()
        }
    return loss, grads


def sample_latent(
    bundle: DiffusionBundle,
    caption: str,
    steps: int = 50,
    mode: str = "deterministic",
    seed: int = 0,
) -> np.ndarray:
    """
    Обратный процесс DDIM от гауссова латента до x0.

    Args:
        bundle: Бандл диффузии
        caption: Подпись для обусловливания
        steps: Число шагов (равномерно от T-1 до 0), не больше T
        mode: deterministic (eta = 0) или ancestral (eta = 1)
        seed: Seed начального шума и шума шагов

    Returns:
        Латент формы bundle.latent_shape
    """
    if mode not in SAMPLER_MODES:
        raise InvalidRange(f"Unknown sampler mode: {mode}")
    eta = SAMPLER_MODES[mode]
    schedule = bundle.schedule
    timesteps = _timesteps(schedule.T, steps)

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(bundle.latent_shape)
    cond = bundle.condition(caption)

    for i, t in enumerate(timesteps):
        abar = schedule.alpha_bars[t]
        abar_prev = schedule.alpha_bars[timesteps[i + 1]] if i + 1 < len(timesteps) else 1.0
        eps_hat = bundle.denoiser.predict_noise(x, int(t), cond)
        x0_hat = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)

        sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar)) * np.sqrt(1.0 - abar / abar_prev)
        x = np.sqrt(abar_prev) * x0_hat + np.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0)) * eps_hat
        if sigma > 0.0:
            x = x + sigma * rng.standard_normal(x.shape)
    return x


def sample(
    bundle: DiffusionBundle,
    caption: str,
    steps: int = 50,
    mode: str = "deterministic",
    seed: int = 0,
) -> ImageSample:
    """Сэмпл латента и декодирование в снимок."""
    latent = sample_latent(bundle, caption, steps, mode, seed)
    pixels = np.clip(bundle.vae.decode(latent / bundle.vae.scaling), 0.0, 1.0)
    return ImageSample(id=f"sample-{seed}", pixels=pixels, source_range=255.0)
