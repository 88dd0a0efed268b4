"""
Тесты для записи артефактов и чекпоинтов.
"""

import json

import numpy as np
import pandas as pd
import pytest

from app.errors import FormatError
from app.services.artifacts import (
    ArtifactWriter,
    add_bundle,
    add_generated,
    load_bundle,
    load_generated,
    loss_frame,
    png_bytes,
    read_encoder_tensors,
    write_encoder_tensors,
)
from app.services.diffusion import sample
from app.services.encoder_bench import EncoderOutput
from app.services.evaluation import GenerationSpec, generate_suite
from app.services.finetune import register_token


class TestArtifactWriter:
    """Тесты для ArtifactWriter."""

    def test_nothing_on_disk_before_commit(self, tmp_path):
        """Тест: до commit() файлов нет."""
        writer = ArtifactWriter(tmp_path / "out")
        writer.add_json("summary.json", {"a": 1})
        writer.add_csv("table.csv", pd.DataFrame({"x": [1, 2]}))

        assert not (tmp_path / "out").exists()
        assert writer.names == ["summary.json", "table.csv"]

        written = writer.commit()

        assert [p.name for p in written] == ["summary.json", "table.csv"]
        assert json.loads((tmp_path / "out" / "summary.json").read_text()) == {"a": 1}
        assert (tmp_path / "out" / "table.csv").read_text() == "x\n1\n2\n"
        assert len(writer) == 0

    def test_no_temporary_files_left(self, tmp_path):
        """Тест: после commit() не остаётся временных файлов."""
        writer = ArtifactWriter(tmp_path)
        writer.add_text("nested/a.txt", "hello")
        writer.commit()

        assert sorted(p.name for p in (tmp_path / "nested").iterdir()) == ["a.txt"]

    def test_json_rejects_nan(self, tmp_path):
        """Тест: NaN не попадает в JSON."""
        writer = ArtifactWriter(tmp_path)

        with pytest.raises(ValueError):
            writer.add_json("bad.json", {"x": float("nan")})

    def test_png_bytes_deterministic(self, rng):
        """Тест: одинаковые пиксели дают одинаковые байты."""
        pixels = rng.random((8, 8))

        assert png_bytes(pixels) == png_bytes(pixels.copy())
        assert png_bytes(pixels, bits=16) != png_bytes(pixels)

    def test_loss_frame(self):
        """Тест таблицы лосса."""
        frame = loss_frame([3.0, 2.0])

        assert list(frame["step"]) == [1, 2]
        assert list(frame["loss"]) == [3.0, 2.0]

    def test_loss_frame_terms(self):
        """Тест: непустые слагаемые лосса становятся столбцами, пустые пропускаются."""
        frame = loss_frame([3.0, 2.0], instance=[2.0, 1.5], prior=[])

        assert list(frame.columns) == ["step", "loss", "instance"]
        assert list(frame["instance"]) == [2.0, 1.5]


class TestEncoderTensors:
    """Тесты тензоров энкодеров."""

    def test_round_trip(self, tmp_path, rng):
        """Тест записи и чтения index.jsonl + payload.bin."""
        outputs = [
            EncoderOutput(token_states=rng.standard_normal((3, 4)), pooled=rng.standard_normal(4),
                          encoder_id="enc"),
            EncoderOutput(token_states=rng.standard_normal((1, 4)), model_specific=np.ones(4),
                          encoder_id="enc"),
        ]

        write_encoder_tensors(tmp_path, ["r0", "r1"], outputs)
        loaded = read_encoder_tensors(tmp_path)

        assert set(loaded) == {"r0", "r1"}
        assert np.allclose(loaded["r0"].token_states, outputs[0].token_states, atol=1e-6)
        assert np.allclose(loaded["r0"].pooled, outputs[0].pooled, atol=1e-6)
        assert loaded["r0"].model_specific is None
        assert loaded["r1"].token_states.shape == (1, 4)
        assert loaded["r1"].model_specific.tolist() == [1.0] * 4

    def test_offset_outside_payload(self, tmp_path):
        """Тест: смещение за пределами payload."""
        write_encoder_tensors(tmp_path, ["r0"], [EncoderOutput(token_states=np.zeros((1, 2)))])
        record = json.loads((tmp_path / "index.jsonl").read_text())
        record["offset"] = 400
        (tmp_path / "index.jsonl").write_text(json.dumps(record) + "\n")

        with pytest.raises(FormatError) as exc:
            read_encoder_tensors(tmp_path)

        assert exc.value.locus.endswith("index.jsonl:1")


class TestBundleCheckpoint:
    """Тесты чекпоинта бандла."""

    def test_round_trip_generates_same_image(self, tmp_path, toy_bundle):
        """Тест: загруженный бандл генерирует тот же снимок (с точностью float32)."""
        register_token(toy_bundle, "<lung-xray>", seed=0)
        writer = ArtifactWriter(tmp_path)
        add_bundle(writer, toy_bundle, "bundle", provenance={"strategy": "unet"})
        writer.commit()

        loaded = load_bundle(tmp_path / "bundle")

        assert loaded.text.registered == {"<lung-xray>": toy_bundle.text.vocab_size - 1}
        assert loaded.latent_shape == toy_bundle.latent_shape
        assert loaded.schedule.T == toy_bundle.schedule.T
        assert json.loads((tmp_path / "bundle" / "provenance.json").read_text()) == {"strategy": "unet"}
        original = sample(toy_bundle, "a photo of a <lung-xray>", steps=10, seed=2)
        replayed = sample(loaded, "a photo of a <lung-xray>", steps=10, seed=2)
        assert np.max(np.abs(original.pixels - replayed.pixels)) < 1e-3

    def test_unsupported_format(self, tmp_path):
        """Тест неизвестного формата заголовка."""
        (tmp_path / "bundle.json").write_text(json.dumps({"format": "other", "version": 1}))

        with pytest.raises(FormatError):
            load_bundle(tmp_path)

    def test_missing_directory(self, tmp_path):
        """Тест отсутствующего каталога."""
        with pytest.raises(FormatError):
            load_bundle(tmp_path / "nowhere")


class TestGeneratedImages:
    """Тесты сохранения сгенерированных снимков."""

    def test_round_trip(self, tmp_path, toy_bundle):
        """Тест: подписи и ожидаемые метки переживают запись."""
        images = generate_suite(toy_bundle, GenerationSpec(per_prompt_count=2, steps=5))
        writer = ArtifactWriter(tmp_path)
        add_generated(writer, images, "images")
        writer.commit()

        loaded = load_generated(tmp_path / "images" / "manifest.json")

        assert [item.sample.id for item in loaded] == [item.sample.id for item in images]
        assert [item.expected_label for item in loaded] == [0, 0, 1, 1]
        assert loaded[0].caption == images[0].caption
        assert loaded[0].seed == images[0].seed
        assert np.max(np.abs(loaded[0].sample.pixels - images[0].sample.pixels)) <= 0.5 / 255 + 1e-12
