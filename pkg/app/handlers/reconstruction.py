"""
Команда recon-eval: оценка реконструкций VAE.
"""

import logging
from typing import Dict

import numpy as np

from app.config import ReconEvalConfig, RunConfig
from app.handlers.common import load_images, load_or_build_bundle
from app.services.artifacts import ArtifactWriter
from app.services.metrics import findings_table, json_safe, reconstruction_report
from app.services.toy_models import ToyClassifier, ToyFeatureExtractor

logger = logging.getLogger(__name__)


async def cmd_recon_eval(cfg: RunConfig, writer: ArtifactWriter) -> Dict:
    """Оригиналы против реконструкций: RMSE, PSNR, SSIM, FID, косинус и находки."""
    section: ReconEvalConfig = cfg.section
    originals = load_images(cfg, section.originals, section.synthetic, "originals")

    if section.reconstructions:
        reconstructions = load_images(cfg, section.reconstructions, None, "reconstructions")
    else:
        bundle = load_or_build_bundle(cfg, section.bundle, section.toy)
        rng = np.random.default_rng(cfg.seed) if section.sample_latent else None
        reconstructions = [bundle.vae.reconstruct(o, rng) for o in originals]
        logger.info(f"Reconstructed {len(reconstructions)} images with the bundle VAE")

    classifiers = []
    if section.classifier:
        classifiers.append(ToyClassifier.load(cfg.resolve(section.classifier)))

    report = reconstruction_report(
        originals,
        reconstructions,
        ToyFeatureExtractor(seed=section.extractor_seed),
        classifiers=classifiers,
        batch_size=section.batch_size,
    )
    writer.add_json("recon_report.json", report.to_dict())
    if report.findings:
        writer.add_csv("findings.csv", findings_table(report.findings))

    return json_safe({
        "pairs": len(report.pairs),
        "rmse_mean": report.rmse.mean,
        "psnr_mean": report.psnr.mean,
        "ssim_mean": report.ssim.mean,
        "cosine_mean": report.cosine.mean,
        "fid_mean": report.fid_mean,
    })
