"""
Игрушечные компоненты настольного масштаба: VAE на патчах, текстовый энкодер
с хэшированным словарём, денойзер с ручным обратным проходом,
экстрактор признаков и классификатор находки.
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from skimage.transform import resize
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression

from app.config import ToySection
from app.errors import ConfigError, DataError, DuplicateToken, InconsistentDims, ShapeMismatch
from app.services.diffusion import DiffusionBundle, NoiseSchedule, make_schedule
from app.services.encoder_bench import EncoderOutput
from app.services.ingestion import ImageSample
from app.services.metrics import FeatureSet
from app.services.synthetic import BLOB_CENTER, EFFUSION, LUNG_CENTERS, synthesize_cxr_set

logger = logging.getLogger(__name__)

PATCH = 8
VAE_LOGVAR = -9.0
POSITIONAL_WEIGHT = 0.1
TIME_EMBED_DIM = 16
START_TOKEN = 0

_WORD = re.compile(r"<[^<>\s]+>|[a-z0-9]+")
_SURFACE = re.compile(r"<[^<>\s]+>")


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    """Синусоидальное кодирование позиций (или шагов) в dim признаков."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    enc = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        enc = np.concatenate([enc, np.zeros((enc.shape[0], 1))], axis=1)
    return enc


def _seed_of(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


# --- VAE ---

def _to_patches(pixels: np.ndarray) -> np.ndarray:
    h, w = pixels.shape
    if h % PATCH or w % PATCH:
        raise ShapeMismatch(f"Image {w}x{h} is not divisible by {PATCH}")
    return (
        pixels.reshape(h // PATCH, PATCH, w // PATCH, PATCH)
        .transpose(0, 2, 1, 3)
        .reshape(h // PATCH, w // PATCH, PATCH * PATCH)
    )


def _from_patches(patches: np.ndarray) -> np.ndarray:
    gh, gw, _ = patches.shape
    return (
        patches.reshape(gh, gw, PATCH, PATCH)
        .transpose(0, 2, 1, 3)
        .reshape(gh * PATCH, gw * PATCH)
    )


class ToyVAE:
    """
    Ортогональное патч-преобразование 8x8: первые C главных компонент
    патчей, побелённые по каналу. Латент C x H/8 x W/8.
    """

    scaling = 1.0

    def __init__(self, basis: np.ndarray, mean_patch: np.ndarray, scale: np.ndarray):
        self.basis = basis
        self.mean_patch = mean_patch
        self.scale = scale

    @property
    def channels(self) -> int:
        return self.basis.shape[0]

    @classmethod
    def fit(cls, images: Sequence[np.ndarray], channels: int = 4) -> "ToyVAE":
        if not 1 <= channels <= PATCH * PATCH:
            raise InconsistentDims(f"latent_channels must be in [1, {PATCH * PATCH}]")
        patches = np.vstack([_to_patches(np.asarray(img, dtype=np.float64)).reshape(-1, PATCH * PATCH)
                             for img in images])
        pca = PCA(n_components=channels, svd_solver="full").fit(patches)
        scale = np.sqrt(np.maximum(pca.explained_variance_, 1e-12))
        logger.debug(f"Toy VAE fit on {patches.shape[0]} patches, "
                     f"explained variance {pca.explained_variance_ratio_.sum():.4f}")
        return cls(pca.components_.astype(np.float64), pca.mean_.astype(np.float64), scale)

    def latent_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        if height % PATCH or width % PATCH:
            raise InconsistentDims(f"Image size {width}x{height} is not divisible by {PATCH}")
        return self.channels, height // PATCH, width // PATCH

    def encode(self, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        patches = _to_patches(np.asarray(pixels, dtype=np.float64))
        coeffs = (patches - self.mean_patch) @ self.basis.T / self.scale
        mean = coeffs.transpose(2, 0, 1)
        return mean, np.full_like(mean, VAE_LOGVAR)

    def sample(self, mean: np.ndarray, logvar: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return mean + np.exp(0.5 * logvar) * rng.standard_normal(mean.shape)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(latent, dtype=np.float64).transpose(1, 2, 0) * self.scale
        return np.clip(_from_patches(coeffs @ self.basis + self.mean_patch), 0.0, 1.0)

    def reconstruct(self, sample: ImageSample, rng: Optional[np.random.Generator] = None) -> ImageSample:
        """Декодирование среднего (или сэмпла при rng) латента снимка."""
        mean, logvar = self.encode(sample.pixels)
        latent = mean if rng is None else self.sample(mean, logvar, rng)
        return ImageSample(id=sample.id, pixels=self.decode(latent),
                           source_range=sample.source_range, labels=sample.labels)

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"basis": self.basis, "mean_patch": self.mean_patch, "scale": self.scale}


# --- Текстовый энкодер ---

class ToyTextEncoder:
    """
    Строка 0 - стартовый токен, далее хэш-корзины слов (blake2b),
    затем зарегистрированные токены. Состояния = E[ids] + 0.1 * позиции.
    """

    encoder_id = "toy-text"

    def __init__(self, embedding: np.ndarray, buckets: int, registered: Optional[Dict[str, int]] = None):
        self.embedding = embedding
        self.buckets = buckets
        self.registered: Dict[str, int] = dict(registered or {})

    @classmethod
    def create(cls, dim: int = 32, buckets: int = 4096, seed: int = 0) -> "ToyTextEncoder":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((buckets + 1, dim)), buckets)

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    def word_id(self, word: str) -> int:
        if word in self.registered:
            return self.registered[word]
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return 1 + int.from_bytes(digest, "little") % self.buckets

    def tokenize(self, text: str) -> List[int]:
        return [START_TOKEN] + [self.word_id(w) for w in _WORD.findall(text.lower())]

    def register(self, surface: str, init: np.ndarray) -> int:
        """Добавить строку в таблицу; вернуть id нового токена."""
        key = surface.lower()
        if not _SURFACE.fullmatch(key):
            if _WORD.fullmatch(key):
                raise DuplicateToken(f"'{surface}' is already a vocabulary word")
            raise ConfigError(f"Token surface must look like <name>, got '{surface}'")
        if key in self.registered:
            raise DuplicateToken(f"Token '{surface}' is already registered")
        token_id = self.vocab_size
        self.embedding = np.vstack([self.embedding, np.asarray(init, dtype=np.float64)[None, :]])
        self.registered[key] = token_id
        return token_id

    def _states(self, ids: List[int]) -> np.ndarray:
        return self.embedding[ids] + POSITIONAL_WEIGHT * sinusoid(np.arange(len(ids)), self.dim)

    def encode_text(self, text: str) -> EncoderOutput:
        states = self._states(self.tokenize(text))
        return EncoderOutput(token_states=states, pooled=states.mean(axis=0),
                             encoder_id=self.encoder_id)

    def encode_for_grad(self, text: str) -> Tuple[np.ndarray, List[int]]:
        ids = self.tokenize(text)
        return self._states(ids).mean(axis=0), ids

    def backward(self, ids: List[int], grad_pooled: np.ndarray) -> Dict[str, np.ndarray]:
        grad = np.zeros_like(self.embedding)
        np.add.at(grad, ids, grad_pooled / len(ids))
        return {"embedding": grad}

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"embedding": self.embedding}


# --- Денойзер ---

@dataclass
class _DenoiserCache:
    x: np.ndarray
    z: np.ndarray
    h: np.ndarray
    cond: np.ndarray
    k: float
    root_abar: float
    shape: Tuple[int, ...]


class ToyDenoiser:
    """
    eps = k(t) (x_t - sqrt(abar_t) m(c)) + W_out tanh(W_in x_t + W_c [temb; c] + b_h) + b_out,
    m(c) = W_m c + b_m, k(t) = sqrt(1 - abar_t) / (abar_t s^2 + 1 - abar_t).

    Первое слагаемое - апостериорный шум при гауссовом априорном N(m(c), s^2 I),
    второе - обучаемая нелинейная поправка.
    """

    def __init__(self, params: Dict[str, np.ndarray], latent_shape: Tuple[int, int, int],
                 alpha_bars: np.ndarray, prior_std: float = 0.3):
        self.params = params
        self.latent_shape = tuple(latent_shape)
        self.alpha_bars = alpha_bars
        self.prior_std = prior_std

    @classmethod
    def create(
        cls,
        latent_shape: Tuple[int, int, int],
        cond_dim: int,
        hidden: int,
        schedule: NoiseSchedule,
        prior_std: float = 0.3,
        seed: int = 0,
        pool_latents: Optional[np.ndarray] = None,
    ) -> "ToyDenoiser":
        """
        Args:
            latent_shape: Форма латента C x h x w
            cond_dim: Ширина обусловливания
            hidden: Ширина скрытого слоя
            schedule: Расписание шума
            prior_std: s в коэффициенте k(t)
            seed: Seed весов
            pool_latents: P x N латенты для подгонки шаблона W_m
        """
        n = int(np.prod(latent_shape))
        rng = np.random.default_rng(seed)
        w_m = np.zeros((n, cond_dim))
        if pool_latents is not None and pool_latents.size:
            _, s, vt = np.linalg.svd(pool_latents, full_matrices=False)
            rank = min(cond_dim, vt.shape[0])
            w_m[:, :rank] = vt[:rank].T * (s[:rank] / np.sqrt(pool_latents.shape[0]))
        params = {
            "w_m": w_m,
            "b_m": np.zeros(n),
            "w_in": rng.normal(0.0, 1.0 / np.sqrt(n), size=(hidden, n)),
            "w_c": rng.normal(0.0, 1.0 / np.sqrt(TIME_EMBED_DIM + cond_dim),
                              size=(hidden, TIME_EMBED_DIM + cond_dim)),
            "b_h": np.zeros(hidden),
            "w_out": rng.normal(0.0, 0.01 / np.sqrt(hidden), size=(n, hidden)),
            "b_out": np.zeros(n),
        }
        return cls(params, latent_shape, schedule.alpha_bars, prior_std)

    @property
    def latent_dim(self) -> int:
        return self.params["w_m"].shape[0]

    @property
    def cond_dim(self) -> int:
        return self.params["w_m"].shape[1]

    @property
    def timesteps(self) -> int:
        return int(self.alpha_bars.size)

    def _coefficients(self, t: int) -> Tuple[float, float]:
        abar = float(self.alpha_bars[t])
        k = np.sqrt(1.0 - abar) / (abar * self.prior_std ** 2 + 1.0 - abar)
        return float(k), float(np.sqrt(abar))

    def forward(self, latent: np.ndarray, t: int, cond: np.ndarray) -> Tuple[np.ndarray, _DenoiserCache]:
        p = self.params
        x = np.asarray(latent, dtype=np.float64).ravel()
        if x.size != self.latent_dim:
            raise ShapeMismatch(f"Latent has {x.size} values, denoiser expects {self.latent_dim}")
        cond = np.asarray(cond, dtype=np.float64).ravel()
        k, root_abar = self._coefficients(t)

        z = np.concatenate([sinusoid(np.array([t]), TIME_EMBED_DIM)[0], cond])
        h = np.tanh(p["w_in"] @ x + p["w_c"] @ z + p["b_h"])
        template = p["w_m"] @ cond + p["b_m"]
        out = k * (x - root_abar * template) + p["w_out"] @ h + p["b_out"]
        cache = _DenoiserCache(x=x, z=z, h=h, cond=cond, k=k, root_abar=root_abar,
                               shape=np.shape(latent))
        return out.reshape(np.shape(latent)), cache

    def backward(self, cache: _DenoiserCache,
                 grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """Градиенты по параметрам и по вектору обусловливания."""
        p = self.params
        g = np.asarray(grad_out, dtype=np.float64).ravel()
        d_template = -cache.k * cache.root_abar * g
        dh = p["w_out"].T @ g
        d_pre = dh * (1.0 - cache.h ** 2)
        dz = p["w_c"].T @ d_pre
        grads = {
            "w_m": np.outer(d_template, cache.cond),
            "b_m": d_template,
            "w_in": np.outer(d_pre, cache.x),
            "w_c": np.outer(d_pre, cache.z),
            "b_h": d_pre,
            "w_out": np.outer(g, cache.h),
            "b_out": g,
        }
        grad_cond = p["w_m"].T @ d_template + dz[TIME_EMBED_DIM:]
        return grads, grad_cond

    def predict_noise(self, latent: np.ndarray, t: int, cond: np.ndarray) -> np.ndarray:
        out, _ = self.forward(latent, t, cond)
        return out

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.params


def build_toy_bundle(cfg: Optional[ToySection] = None, seed: int = 0) -> DiffusionBundle:
    """
    Игрушечный бандл: VAE и шаблон денойзера подгоняются на синтетическом пуле снимков.

    Args:
        cfg: Размеры бандла
        seed: Seed всех компонентов

    Returns:
        DiffusionBundle
    """
    cfg = cfg or ToySection()
    if cfg.image_size % PATCH:
        raise InconsistentDims(f"image_size must be divisible by {PATCH}")
    pool_seq, text_seq, denoiser_seq = np.random.SeedSequence(seed).spawn(3)

    half = cfg.pool_size // 2
    pool = synthesize_cxr_set(half, cfg.pool_size - half, cfg.image_size, seed=_seed_of(pool_seq))
    vae = ToyVAE.fit([s.pixels for s in pool], cfg.latent_channels)
    latents = np.stack([vae.encode(s.pixels)[0].ravel() for s in pool])

    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    text = ToyTextEncoder.create(cfg.cond_dim, cfg.vocab_buckets, seed=_seed_of(text_seq))
    denoiser = ToyDenoiser.create(
        vae.latent_shape(cfg.image_size, cfg.image_size),
        cfg.cond_dim,
        cfg.hidden,
        schedule,
        prior_std=cfg.prior_std,
        seed=_seed_of(denoiser_seq),
        pool_latents=latents,
    )
    logger.info(f"Toy bundle built: image {cfg.image_size}, latent {denoiser.latent_shape}, "
                f"cond {cfg.cond_dim}, T={schedule.T}")
    return DiffusionBundle(vae=vae, text=text, denoiser=denoiser, schedule=schedule,
                           seed=seed, image_size=cfg.image_size)


# --- Признаки и классификатор ---

class ToyFeatureExtractor:
    """Уменьшение до 16x16, фиксированная случайная проекция и tanh."""

    def __init__(self, seed: int = 0, size: int = 16, features: int = 16):
        self.size = size
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((size * size, features)) / size
        self.extractor_id = f"toy-features-s{seed}"

    def embed(self, pixels: np.ndarray) -> np.ndarray:
        small = resize(np.asarray(pixels, dtype=np.float64), (self.size, self.size),
                       order=1, anti_aliasing=True, mode="reflect")
        return np.tanh((small.ravel() - 0.5) @ self.weights)

    def __call__(self, images: Sequence[ImageSample]) -> FeatureSet:
        if not images:
            raise DataError("No images to embed")
        return FeatureSet(np.stack([self.embed(s.pixels) for s in images]), self.extractor_id)


REGION_RADIUS = 0.15
MIRROR_CENTER = (-BLOB_CENTER[0], BLOB_CENTER[1])
UPPER_LUNG_CENTER = (LUNG_CENTERS[0][0], -0.3)


def _region_mean(pixels: np.ndarray, center: Tuple[float, float]) -> float:
    h, w = pixels.shape
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    region = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= REGION_RADIUS ** 2
    return float(pixels[region].mean())


def region_features(pixels: np.ndarray) -> np.ndarray:
    """Контраст основания лёгкого против зеркального основания и против верхушки."""
    base = _region_mean(pixels, BLOB_CENTER)
    return np.array([
        base - _region_mean(pixels, MIRROR_CENTER),
        base - _region_mean(pixels, UPPER_LUNG_CENTER),
    ])


class ToyClassifier:
    """Логистическая регрессия по контрастам областей."""

    def __init__(self, coef: np.ndarray, intercept: float, finding_id: str = EFFUSION):
        self.coef = np.asarray(coef, dtype=np.float64)
        self.intercept = float(intercept)
        self.finding_id = finding_id

    def score(self, image: ImageSample) -> float:
        return float(expit(region_features(image.pixels) @ self.coef + self.intercept))

    def to_dict(self) -> Dict:
        return {"finding_id": self.finding_id, "coef": self.coef.tolist(), "intercept": self.intercept}

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ToyClassifier":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(data["coef"], data["intercept"], data.get("finding_id", EFFUSION))
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"Cannot load classifier {path}: {e}") from e


def build_toy_classifier(seed: int = 0, n_per_class: int = 40, size: int = 64) -> ToyClassifier:
    """Классификатор выпота, обученный на свежем синтетическом наборе."""
    samples = synthesize_cxr_set(n_per_class, n_per_class, size, seed=seed)
    x = np.stack([region_features(s.pixels) for s in samples])
    y = np.array([0] * n_per_class + [1] * n_per_class)
    model = LogisticRegression(C=100.0, max_iter=1000).fit(x, y)
    logger.info(f"Toy classifier fit on {len(samples)} images, "
                f"train accuracy {model.score(x, y):.3f}")
    return ToyClassifier(model.coef_[0], float(model.intercept_[0]))
