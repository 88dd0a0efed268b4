"""
Тесты для оценки генерации.
"""

import numpy as np
import pytest

from app.errors import ConfigError, DataError, SingleClassOnly
from app.services.artifacts import ArtifactWriter, add_bundle
from app.services.evaluation import (
    METHOD_TABLE_COLUMNS,
    GenerationSpec,
    derive_seed,
    evaluate_generated,
    fid_grid,
    generate_suite,
    method_table,
)
from app.services.finetune import FinetuneConfig, generate_prior_set, provenance, train_unet
from app.services.ingestion import NEGATIVE_PROMPT, POSITIVE_PROMPT, ImageSample, build_finetune_set
from app.services.metrics import json_safe
from app.services.synthetic import synthesize_cxr_set
from app.services.toy_models import ToyFeatureExtractor, build_toy_bundle, build_toy_classifier


class BrightnessGenerator:
    """Генератор: снимок с «находкой» светлее, шум зависит от seed."""

    def __init__(self, positive_level=0.8, negative_level=0.2):
        self.levels = {POSITIVE_PROMPT: positive_level, NEGATIVE_PROMPT: negative_level}

    def generate(self, caption, seed, steps=50, mode="deterministic"):
        rng = np.random.default_rng(seed)
        level = self.levels.get(caption, 0.5)
        pixels = np.clip(level + 0.05 * rng.standard_normal((16, 16)), 0.0, 1.0)
        return ImageSample(id=f"sample-{seed}", pixels=pixels)


class MeanClassifier:
    finding_id = "Pleural Effusion"

    def __init__(self, inverted=False):
        self.inverted = inverted

    def score(self, image):
        value = float(image.pixels.mean())
        return 1.0 - value if self.inverted else value


class TestDeriveSeed:
    """Тесты для derive_seed."""

    def test_distinct_and_stable(self):
        """Тест: seed различны по (промпт, сэмпл) и стабильны."""
        seeds = {derive_seed(0, p, s) for p in range(2) for s in range(50)}

        assert len(seeds) == 100
        assert derive_seed(0, 1, 7) == derive_seed(0, 1, 7)
        assert derive_seed(0, 1, 7) != derive_seed(1, 1, 7)


class TestGenerateSuite:
    """Тесты для generate_suite."""

    def test_default_two_prompts(self):
        """Тест: 2 промпта x 50 сэмплов = 100 снимков."""
        images = generate_suite(BrightnessGenerator(), GenerationSpec())

        assert len(images) == 100
        assert images[0].sample.id == "p00-s0000"
        assert images[-1].sample.id == "p01-s0049"
        assert sum(img.expected_label for img in images) == 50
        assert len({img.seed for img in images}) == 100

    def test_adding_prompt_keeps_seeds(self):
        """Тест: новый промпт не сдвигает seed прежних."""
        base = GenerationSpec(prompts=[(NEGATIVE_PROMPT, 0)], per_prompt_count=3)
        extended = GenerationSpec(prompts=[(NEGATIVE_PROMPT, 0), (POSITIVE_PROMPT, 1)],
                                  per_prompt_count=3)

        first = generate_suite(BrightnessGenerator(), base)
        second = generate_suite(BrightnessGenerator(), extended)

        assert [img.seed for img in first] == [img.seed for img in second[:3]]

    def test_sidecar(self):
        """Тест содержимого сайдкара."""
        (image,) = generate_suite(BrightnessGenerator(),
                                  GenerationSpec(prompts=[(POSITIVE_PROMPT, 1)], per_prompt_count=1))

        assert image.sidecar() == {
            "id": "p00-s0000",
            "caption": POSITIVE_PROMPT,
            "expected_label": 1,
            "seed": derive_seed(0, 0, 0),
            "steps": 50,
            "mode": "deterministic",
        }

    def test_invalid_spec(self):
        """Тест недопустимых настроек."""
        with pytest.raises(ConfigError):
            GenerationSpec(per_prompt_count=0)
        with pytest.raises(ConfigError):
            GenerationSpec(prompts=[("x", 2)])


class TestEvaluateGenerated:
    """Тесты для evaluate_generated."""

    def test_oracle_and_anti_oracle(self):
        """Тест: оракул даёт AUC 1, перевёрнутый классификатор - 0."""
        images = generate_suite(BrightnessGenerator(), GenerationSpec(per_prompt_count=10))

        report, row = evaluate_generated(images, MeanClassifier(), "Stable Diffusion")
        anti, _ = evaluate_generated(images, MeanClassifier(inverted=True))

        assert report.auc == 1.0
        assert report.accuracy == 1.0
        assert anti.auc == 0.0
        assert row.prevalence == 0.5
        assert row.to_dict()["Method"] == "Stable Diffusion"

    def test_single_class(self):
        """Тест: только одна ожидаемая метка."""
        images = generate_suite(BrightnessGenerator(),
                                GenerationSpec(prompts=[(NEGATIVE_PROMPT, 0)], per_prompt_count=4))

        with pytest.raises(SingleClassOnly):
            evaluate_generated(images, MeanClassifier())

    def test_method_table(self):
        """Тест таблицы методов."""
        images = generate_suite(BrightnessGenerator(), GenerationSpec(per_prompt_count=5))
        _, first = evaluate_generated(images, MeanClassifier(), "U-Net")
        _, second = evaluate_generated(images, MeanClassifier(inverted=True), "Textual inversion")

        table = method_table([first, second])

        assert list(table.columns) == METHOD_TABLE_COLUMNS
        assert list(table["Method"]) == ["U-Net", "Textual inversion"]
        assert list(table["AUC"]) == [1.0, 0.0]


class TestFidGrid:
    """Тесты для fid_grid."""

    def test_replay_is_zero_and_shape(self):
        """Тест: эталон из того же генератора даёт FID около нуля."""
        extractor = ToyFeatureExtractor(seed=0)
        prompts = [NEGATIVE_PROMPT, POSITIVE_PROMPT]
        replay = generate_suite(BrightnessGenerator(), GenerationSpec(
            prompts=[(p, 0) for p in prompts], per_prompt_count=20, seed=5,
        ))
        references = {
            prompt: extractor([img.sample for img in replay if img.prompt_index == p])
            for p, prompt in enumerate(prompts)
        }

        grid = fid_grid(
            {"same": BrightnessGenerator(), "shifted": BrightnessGenerator(0.3, 0.7)},
            prompts, references, extractor, per_prompt_count=20, seed=5,
        )

        assert grid.shape == (2, 2)
        assert grid.index.name == "Method"
        assert list(grid.columns) == prompts
        assert grid.loc["same", NEGATIVE_PROMPT] < 1e-5
        assert grid.loc["shifted", NEGATIVE_PROMPT] > grid.loc["same", NEGATIVE_PROMPT]

    def test_missing_reference(self):
        """Тест отсутствующего эталона."""
        with pytest.raises(DataError):
            fid_grid({"x": BrightnessGenerator()}, [NEGATIVE_PROMPT], {},
                     ToyFeatureExtractor(seed=0), per_prompt_count=2)


def desk_scale_run(out_dir):
    """Дообучение с априорным набором, генерация 50 + 50 и оценка; артефакты на диск."""
    bundle = build_toy_bundle(seed=0)
    data = build_finetune_set(synthesize_cxr_set(5, 5, 64, seed=0))
    prior_set = generate_prior_set(bundle, "a photo of a chest xray", n=2 * len(data.pairs()), seed=0)
    cfg = FinetuneConfig(
        strategy="unet_with_prior", steps=400, learning_rate=5e-3, batch_size=4,
        seed=0, prior_set=prior_set, prior_weight=1.0,
    )
    result = train_unet(bundle, data, cfg)
    images = generate_suite(bundle, GenerationSpec(per_prompt_count=50, seed=0))
    report, row = evaluate_generated(images, build_toy_classifier(seed=0), "U-Net, with prior")

    writer = ArtifactWriter(out_dir)
    add_bundle(writer, bundle, "bundle", provenance(cfg, data))
    writer.add_json("metrics.json", json_safe({"report": report.to_dict(), "row": row.to_dict(),
                                               **result.curve()}))
    writer.commit()
    return result, report, images, out_dir


@pytest.fixture(scope="module")
def desk_scale_runs(tmp_path_factory):
    """Два одинаковых прогона с одним seed."""
    first = desk_scale_run(tmp_path_factory.mktemp("first"))
    second = desk_scale_run(tmp_path_factory.mktemp("second"))
    return first, second


class TestEndToEnd:
    """Сквозной тест: дообучение с априорным набором, генерация, классификация."""

    def test_classifier_separates_generated_images(self, desk_scale_runs):
        """Тест: AUC классификатора на 50 + 50 сгенерированных снимках не ниже 0.9."""
        (_, report, images, _), _ = desk_scale_runs

        assert len(images) == 100
        assert report.auc >= 0.9

    def test_instance_loss_halves(self, desk_scale_runs):
        """Тест: лосс на наборе снимков падает вдвое, априорный лосс записан отдельно."""
        (result, _, _, _), _ = desk_scale_runs
        curve = result.curve()

        assert len(result.instance_losses) == len(result.prior_losses) == 400
        assert np.allclose(result.losses,
                           np.add(result.instance_losses, result.prior_losses), rtol=1e-12)
        assert curve["instance_loss_ratio"] < 0.5

    def test_repeat_is_bit_identical(self, desk_scale_runs):
        """Тест: повторный прогон даёт побайтно те же чекпоинт и метрики."""
        (first, _, first_images, first_dir), (second, _, second_images, second_dir) = desk_scale_runs

        assert first.losses == second.losses
        for a, b in zip(first_images, second_images):
            assert np.array_equal(a.sample.pixels, b.sample.pixels)
        names = sorted(p.relative_to(first_dir) for p in first_dir.rglob("*") if p.is_file())
        assert names
        for name in names:
            assert (first_dir / name).read_bytes() == (second_dir / name).read_bytes(), name
