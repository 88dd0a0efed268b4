"""
Общие загрузчики для обработчиков команд.
"""

import logging
from typing import List, Optional

from app.config import RunConfig, SyntheticSection, ToySection
from app.errors import ConfigError, DataError
from app.services.artifacts import load_bundle
from app.services.diffusion import DiffusionBundle
from app.services.ingestion import ImageSample, load_manifest
from app.services.synthetic import synthesize_cxr_set
from app.services.toy_models import build_toy_bundle

logger = logging.getLogger(__name__)


def load_images(
    cfg: RunConfig,
    manifest: Optional[str],
    synthetic: Optional[SyntheticSection],
    what: str = "images",
) -> List[ImageSample]:
    """Снимки из манифеста или синтетический набор из seed запуска."""
    if manifest:
        images = load_manifest(cfg.resolve(manifest), "images")
        if not images:
            raise DataError(f"{what}: manifest {manifest} has no images")
        return images
    if synthetic is not None:
        return synthesize_cxr_set(synthetic.n_negative, synthetic.n_positive, synthetic.size, seed=cfg.seed)
    raise ConfigError(f"{what}: set either a manifest path or a synthetic section")


def load_or_build_bundle(cfg: RunConfig, bundle_path: Optional[str], toy: ToySection) -> DiffusionBundle:
    if bundle_path:
        return load_bundle(cfg.resolve(bundle_path))
    return build_toy_bundle(toy, seed=cfg.seed)

