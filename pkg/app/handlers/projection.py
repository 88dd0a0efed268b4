"""
Команда train-projection: обучение проекции между пространствами энкодеров.
"""

import logging
from typing import Dict, List, Tuple

import numpy as np

from app.config import ProjectionSection, RunConfig
from app.errors import ConfigError, NoPairs
from app.services.artifacts import ArtifactWriter, add_projection, loss_frame, read_encoder_tensors
from app.services.encoder_bench import EncoderOutput
from app.services.ingestion import PromptCorpus, load_manifest, load_prompts_file
from app.services.projection import ProjectionTrainConfig, expand_prompt_templates, train_projection
from app.services.toy_models import ToyTextEncoder

logger = logging.getLogger(__name__)


def _document_vector(out: EncoderOutput) -> np.ndarray:
    return out.pooled if out.pooled is not None else out.token_states.mean(axis=0)


def _pairs_from_tensors(cfg: RunConfig, section: ProjectionSection) -> Tuple[List, List]:
    source = read_encoder_tensors(cfg.resolve(section.source))
    target = read_encoder_tensors(cfg.resolve(section.target))
    ids = sorted(set(source) & set(target))
    if not ids:
        raise NoPairs("Source and target tensors share no ids")
    if section.mode == "token":
        return [source[i].token_states for i in ids], [target[i].token_states for i in ids]
    return [_document_vector(source[i]) for i in ids], [_document_vector(target[i]) for i in ids]


def _corpus(cfg: RunConfig, section: ProjectionSection) -> PromptCorpus:
    if section.prompts:
        path = cfg.resolve(section.prompts)
        if path.suffix == ".json":
            corpus = load_manifest(path, "prompts")
            if not corpus:
                raise NoPairs(f"No prompts in {path}")
            return corpus
        return PromptCorpus(prompts=load_prompts_file(path), origin="file")
    return expand_prompt_templates(section.concepts, section.family)


def _pairs_from_toy_encoders(cfg: RunConfig, section: ProjectionSection) -> Tuple[List, List]:
    corpus = _corpus(cfg, section)
    source = ToyTextEncoder.create(section.cond_dim, seed=section.source_seed)
    target = ToyTextEncoder.create(section.cond_dim, seed=section.target_seed)
    xs = [source.encode_text(p) for p in corpus.prompts]
    ys = [target.encode_text(p) for p in corpus.prompts]
    logger.info(f"Encoded {len(corpus.prompts)} prompts ({corpus.origin}) with toy encoders")
    if section.mode == "token":
        return [x.token_states for x in xs], [y.token_states for y in ys]
    return [x.pooled for x in xs], [y.pooled for y in ys]


async def cmd_train_projection(cfg: RunConfig, writer: ArtifactWriter) -> Dict:
    """Обучение MLP-проекции по парам эмбеддингов на одних промптах."""
    section: ProjectionSection = cfg.section
    if bool(section.source) != bool(section.target):
        raise ConfigError("train-projection: set both source and target, or neither")

    if section.source:
        source, target = _pairs_from_tensors(cfg, section)
    else:
        source, target = _pairs_from_toy_encoders(cfg, section)

    train_cfg = ProjectionTrainConfig(
        mode=section.mode,
        learning_rate=section.learning_rate,
        steps=section.steps,
        batch_size=section.batch_size,
        seed=cfg.seed,
        optimizer=section.optimizer,
        hidden=section.hidden or None,
    )
    result = train_projection(source, target, train_cfg)

    add_projection(writer, result.mlp, "projection")
    writer.add_csv("loss.csv", loss_frame(result.losses))
    return {
        "mode": section.mode,
        "pairs": result.pairs,
        "dropped_pairs": result.dropped_pairs,
        "steps": train_cfg.steps,
        "initial_loss": result.losses[0],
        "final_loss": result.losses[-1],
    }
