"""
Команды train-ti и train-unet: адаптация бандла на few-shot наборе.
"""

import logging
from typing import Dict, List

from app.config import RunConfig, SyntheticSection, TextualInversionSection, UnetSection
from app.handlers.common import load_images, load_or_build_bundle
from app.services.artifacts import ArtifactWriter, add_bundle, loss_frame
from app.services.finetune import (
    FinetuneConfig,
    Pair,
    TrainResult,
    generate_prior_set,
    provenance,
    register_token,
    train_textual_inversion,
    train_unet,
)
from app.services.ingestion import FinetuneSet, build_finetune_set

logger = logging.getLogger(__name__)


def _summary(result: TrainResult) -> Dict:
    return {
        "strategy": result.strategy,
        "steps": result.steps,
        "trainable": result.trainable,
        "initial_loss": result.losses[0],
        "final_loss": result.losses[-1],
        **result.curve(),
    }


def _add_prior_images(writer: ArtifactWriter, prior: List[Pair]) -> None:
    for image, caption in prior:
        writer.add_png(f"prior/{image.id}.png", image.pixels)
        writer.add_json(f"prior/{image.id}.json", {"id": image.id, "caption": caption, "labels": None})
    writer.add_json("prior/manifest.json", {
        "kind": "images",
        "records": [f"{image.id}.png" for image, _ in prior],
    })


async def cmd_train_ti(cfg: RunConfig, writer: ArtifactWriter) -> Dict:
    """Текстовая инверсия нового токена."""
    section: TextualInversionSection = cfg.section
    synthetic = section.synthetic or (None if section.images else SyntheticSection())
    images = load_images(cfg, section.images, synthetic)
    bundle = load_or_build_bundle(cfg, section.bundle, section.toy)

    reg = register_token(bundle, section.surface, section.init_from, seed=cfg.seed)
    data = FinetuneSet(
        negatives=images,
        positives=[],
        negative_captions=[section.caption] * len(images),
        positive_captions=[],
    )
    train_cfg = FinetuneConfig(
        strategy="textual_inversion",
        steps=section.steps,
        learning_rate=section.learning_rate,
        batch_size=section.batch_size,
        seed=cfg.seed,
        optimizer=section.optimizer,
    )
    result = train_textual_inversion(bundle, data, reg, train_cfg)

    add_bundle(writer, bundle, "bundle", provenance(train_cfg, data, reg))
    writer.add_csv("loss.csv", loss_frame(result.losses))
    summary = _summary(result)
    summary["token_id"] = reg.token_id
    return summary


async def cmd_train_unet(cfg: RunConfig, writer: ArtifactWriter) -> Dict:
    """Дообучение денойзера, с априорным набором или без него."""
    section: UnetSection = cfg.section
    synthetic = section.synthetic or (None if section.images else SyntheticSection())
    images = load_images(cfg, section.images, synthetic)
    counts = synthetic or SyntheticSection()
    data = build_finetune_set(images, counts.n_negative, counts.n_positive)
    bundle = load_or_build_bundle(cfg, section.bundle, section.toy)

    prior = None
    if section.with_prior:
        size = section.prior_size or 2 * len(data.pairs())
        prior = generate_prior_set(bundle, section.class_caption, size, seed=cfg.seed)
        _add_prior_images(writer, prior)

    train_cfg = FinetuneConfig(
        strategy="unet_with_prior" if section.with_prior else "unet",
        steps=section.steps,
        learning_rate=section.learning_rate,
        batch_size=section.batch_size,
        seed=cfg.seed,
        prior_weight=section.prior_weight,
        prior_set=prior,
        optimizer=section.optimizer,
        class_caption=section.class_caption,
        prior_size=len(prior) if prior else 0,
    )
    result = train_unet(bundle, data, train_cfg)

    add_bundle(writer, bundle, "bundle", provenance(train_cfg, data))
    writer.add_csv("loss.csv", loss_frame(result.losses, instance=result.instance_losses,
                                           prior=result.prior_losses))
    summary = _summary(result)
    summary["prior_size"] = train_cfg.prior_size
    return summary
