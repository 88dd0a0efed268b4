"""
Команды generate, classify-eval и fid-grid.
"""

import logging
from typing import Dict

from app.config import ClassifyEvalSection, FidGridSection, GenerateSection, RunConfig
from app.errors import ConfigError
from app.handlers.common import load_images, load_or_build_bundle
from app.services.artifacts import ArtifactWriter, add_generated, load_generated
from app.services.evaluation import (
    GenerationSpec,
    evaluate_generated,
    fid_grid,
    generate_suite,
    method_table,
)
from app.services.metrics import json_safe
from app.services.toy_models import ToyClassifier, ToyFeatureExtractor, build_toy_classifier

logger = logging.getLogger(__name__)


async def cmd_generate(cfg: RunConfig, writer: ArtifactWriter) -> Dict:
    """Набор сэмплов по промптам с сайдкарами."""
    section: GenerateSection = cfg.section
    bundle = load_or_build_bundle(cfg, section.bundle, section.toy)
    spec = GenerationSpec(
        prompts=[(p.caption, p.label) for p in section.prompts],
        per_prompt_count=section.per_prompt_count,
        seed=cfg.seed,
        steps=section.steps,
        mode=section.mode,
    )
    images = generate_suite(bundle, spec)
    add_generated(writer, images, "images")
    return {
        "images": len(images),
        "prompts": len(spec.prompts),
        "positives": sum(img.expected_label for img in images),
    }


async def cmd_classify_eval(cfg: RunConfig, writer: ArtifactWriter) -> Dict:
    """Классификация сгенерированных снимков и строка таблицы методов."""
    section: ClassifyEvalSection = cfg.section
    if not section.generated:
        raise ConfigError("classify-eval: generated manifest is required")
    images = load_generated(cfg.resolve(section.generated))
    if section.classifier:
        clf = ToyClassifier.load(cfg.resolve(section.classifier))
    else:
        clf = build_toy_classifier(seed=section.classifier_seed)

    report, row = evaluate_generated(images, clf, section.method)
    writer.add_json("classification.json", json_safe({
        "method": section.method,
        "finding": clf.finding_id,
        "report": report.to_dict(),
    }))
    writer.add_csv("methods.csv", method_table([row]))
    return json_safe(row.to_dict())


async def cmd_fid_grid(cfg: RunConfig, writer: ArtifactWriter) -> Dict:
    """FID стратегий против эталонных наборов каждого промпта."""
    section: FidGridSection = cfg.section
    if not section.bundles or not section.prompts:
        raise ConfigError("fid-grid: bundles and prompts are required")
    missing = [p for p in section.prompts if p not in section.references]
    if missing:
        raise ConfigError(f"fid-grid: no reference manifest for prompt '{missing[0]}'")

    extractor = ToyFeatureExtractor(seed=section.extractor_seed)
    references = {
        prompt: extractor(load_images(cfg, section.references[prompt], None, f"reference '{prompt}'"))
        for prompt in section.prompts
    }
    bundles = {
        name: load_or_build_bundle(cfg, path or None, section.toy)
        for name, path in section.bundles.items()
    }
    frame = fid_grid(
        bundles,
        section.prompts,
        references,
        extractor,
        per_prompt_count=section.per_prompt_count,
        seed=cfg.seed,
        steps=section.steps,
        mode=section.mode,
    )
    writer.add_csv("fid_grid.csv", frame, index=True)
    return {
        "cells": int(frame.size),
        "grid": {name: {p: float(v) for p, v in row.items()} for name, row in frame.iterrows()},
    }
