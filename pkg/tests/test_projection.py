"""
Тесты для проекции эмбеддингов.
"""

import numpy as np
import pytest

from app.errors import ConfigError, DimensionMismatch, NoPairs
from app.services.artifacts import ArtifactWriter, add_projection, load_projection
from app.services.gradcheck import check_gradients
from app.services.projection import (
    ProjectedTextEncoder,
    ProjectionTrainConfig,
    _forward,
    align_token_pairs,
    expand_prompt_templates,
    init_projection,
    project,
    projection_loss,
    train_projection,
)
from app.services.toy_models import ToyTextEncoder


class TestProject:
    """Тесты прямого прохода."""

    def test_zero_output_layer_gives_bias(self, rng):
        """Тест: при W2 = 0 выход равен b2 для любого входа."""
        mlp = init_projection(6, 10, seed=0)
        mlp.params["w2"][:] = 0.0
        mlp.params["b2"][:] = np.arange(6.0)

        out = project(mlp, rng.standard_normal((4, 6)))

        assert np.array_equal(out, np.tile(np.arange(6.0), (4, 1)))

    def test_token_states_row_wise(self, rng):
        """Тест: матрица токенов проецируется построчно."""
        mlp = init_projection(5, 7, seed=1, mode="token")
        states = rng.standard_normal((3, 5))

        out = project(mlp, states)

        for i in range(3):
            assert np.allclose(out[i], project(mlp, states[i]))

    def test_init_shapes(self):
        """Тест форм и начальных значений LayerNorm."""
        mlp = init_projection(8, seed=0)

        assert mlp.params["w1"].shape == (8, 8)
        assert np.array_equal(mlp.params["ln_gamma"], np.ones(8))
        assert not mlp.params["b1"].any()

    def test_layernorm_and_relu_outputs(self, rng):
        """Тест: после LayerNorm среднее 0 и дисперсия 1 по строке, после ReLU всё >= 0."""
        mlp = init_projection(6, 10, seed=4)
        mlp.params["ln_beta"][:] = rng.uniform(-0.5, 0.5, size=10)

        _, cache = _forward(mlp, rng.standard_normal((7, 6)))

        assert np.allclose(cache.xhat.mean(axis=1), 0.0, atol=1e-12)
        assert np.allclose(cache.xhat.var(axis=1), 1.0, atol=1e-3)
        assert np.all(cache.r >= 0.0)
        assert np.array_equal(cache.r, np.maximum(cache.u, 0.0))

    def test_wrong_dim(self):
        """Тест неверной размерности входа."""
        with pytest.raises(DimensionMismatch):
            project(init_projection(4, seed=0), np.zeros(5))


class TestProjectionLoss:
    """Тесты градиентов проекции."""

    @pytest.mark.parametrize("draw", range(20))
    def test_gradients_match_finite_differences(self, draw):
        """Тест аналитических градиентов против конечных разностей (20 случайных наборов)."""
        rng = np.random.default_rng(draw)
        mlp = init_projection(6, 10, seed=draw)
        mlp.params["b1"][:] = rng.uniform(-0.1, 0.1, size=10)
        mlp.params["b2"][:] = rng.uniform(-0.1, 0.1, size=6)
        mlp.params["ln_beta"][:] = rng.uniform(-0.2, 0.2, size=10)
        x = rng.standard_normal((5, 6))
        y = rng.standard_normal((5, 6))

        _, grads = projection_loss(mlp, x, y)
        errors = check_gradients(lambda: projection_loss(mlp, x, y)[0], mlp.params, grads)

        assert set(errors) == set(mlp.params)
        assert max(errors.values()) < 1e-4

    def test_exact_target_zero_loss(self, rng):
        """Тест нулевого лосса на собственных выходах."""
        mlp = init_projection(4, seed=3)
        x = rng.standard_normal((3, 4))

        loss, grads = projection_loss(mlp, x, project(mlp, x))

        assert loss == 0.0
        assert not grads["w2"].any()


class TestTrainProjection:
    """Тесты для train_projection."""

    def test_zero_learning_rate_keeps_params(self, rng):
        """Тест: при нулевом шаге параметры не меняются побитово."""
        x, y = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
        mlp = init_projection(4, seed=0)
        before = {k: v.copy() for k, v in mlp.params.items()}

        result = train_projection(x, y, ProjectionTrainConfig(learning_rate=0.0, steps=5), mlp=mlp)

        for name, value in before.items():
            assert np.array_equal(result.mlp.params[name], value)
        assert result.mlp.step == 5

    def test_overfits_linear_map(self, rng):
        """Тест: лосс на фиксированной линейной связи падает."""
        x = rng.standard_normal((20, 6))
        y = x @ rng.standard_normal((6, 6)) * 0.5

        result = train_projection(x, y, ProjectionTrainConfig(
            learning_rate=1e-2, steps=300, batch_size=20, seed=0,
        ))

        assert len(result.losses) == 300
        assert result.losses[-1] < 0.5 * result.losses[0]
        assert result.pairs == 20

    def test_deterministic(self, rng):
        """Тест воспроизводимости при одинаковом seed."""
        x, y = rng.standard_normal((10, 4)), rng.standard_normal((10, 4))
        cfg = ProjectionTrainConfig(steps=20, batch_size=4, seed=9)

        first = train_projection(x, y, cfg)
        second = train_projection(x, y, cfg)

        assert first.losses == second.losses

    def test_row_count_mismatch(self, rng):
        """Тест разного числа строк."""
        with pytest.raises(NoPairs):
            train_projection(rng.standard_normal((3, 4)), rng.standard_normal((2, 4)),
                             ProjectionTrainConfig(steps=1))

    def test_token_mode_all_dropped(self, rng):
        """Тест: все пары отброшены выравниванием."""
        with pytest.raises(NoPairs):
            train_projection([rng.standard_normal((8, 4))], [rng.standard_normal((2, 4))],
                             ProjectionTrainConfig(mode="token", steps=1))

    def test_unknown_mode(self):
        """Тест неизвестного режима."""
        with pytest.raises(ConfigError):
            ProjectionTrainConfig(mode="sentence")


class TestAlignTokenPairs:
    """Тесты для align_token_pairs."""

    def test_truncate_and_drop(self, rng):
        """Тест обрезки до короткой длины и отбрасывания далёких длин."""
        sources = [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))]
        targets = [rng.standard_normal((3, 3)), rng.standard_normal((2, 3))]

        x, y, dropped = align_token_pairs(sources, targets)

        assert x.shape == (3, 3)
        assert y.shape == (3, 3)
        assert dropped == 1
        assert np.array_equal(x, sources[0][:3])

    def test_count_mismatch(self, rng):
        """Тест разного числа последовательностей."""
        with pytest.raises(NoPairs):
            align_token_pairs([rng.standard_normal((2, 3))], [])


class TestPromptTemplates:
    """Тесты для expand_prompt_templates."""

    def test_object_family(self):
        """Тест шаблонов объекта."""
        corpus = expand_prompt_templates(["lung xray"])

        assert corpus.prompts[0] == "a photo of a lung xray"
        assert len(corpus.prompts) == 7
        assert corpus.origin == "template"

    def test_base_only(self):
        """Тест: пустой список вариантов даёт только базовый шаблон."""
        corpus = expand_prompt_templates(["lung xray", "chest"], variants=[])

        assert corpus.prompts == ["a photo of a lung xray", "a photo of a chest"]

    def test_style_family(self):
        """Тест шаблонов стиля."""
        corpus = expand_prompt_templates(["radiograph"], family="style", variants=[])

        assert corpus.prompts == ["a photo in the style of a radiograph"]

    def test_errors(self):
        """Тест неизвестного семейства и пустого списка понятий."""
        with pytest.raises(ConfigError):
            expand_prompt_templates(["x"], family="poem")
        with pytest.raises(ConfigError):
            expand_prompt_templates([])


class TestCheckpoint:
    """Тесты сохранения проекции."""

    def test_round_trip(self, tmp_path):
        """Тест записи и загрузки чекпоинта."""
        mlp = init_projection(6, 9, seed=4, mode="token")
        mlp.step = 12
        writer = ArtifactWriter(tmp_path)
        add_projection(writer, mlp)
        writer.commit()

        loaded = load_projection(tmp_path / "projection.json")

        assert (loaded.dim, loaded.hidden, loaded.mode, loaded.step) == (6, 9, "token", 12)
        for name, value in mlp.params.items():
            assert np.allclose(loaded.params[name], value, rtol=1e-6, atol=1e-7)


class TestProjectedTextEncoder:
    """Тесты для ProjectedTextEncoder."""

    def test_document_mode(self):
        """Тест: pooled проецируется отдельно."""
        inner = ToyTextEncoder.create(dim=8, buckets=64, seed=0)
        mlp = init_projection(8, seed=0)
        encoder = ProjectedTextEncoder(inner, mlp)

        out = encoder.encode_text("a photo of a lung xray")
        raw = inner.encode_text("a photo of a lung xray")

        assert out.encoder_id == "toy-text+projection"
        assert np.allclose(out.pooled, project(mlp, raw.pooled))
        assert out.token_states.shape == raw.token_states.shape
        assert "projection.w1" in encoder.parameters()

    def test_token_mode_pools_projected_states(self):
        """Тест: в режиме token pooled - среднее проекций."""
        inner = ToyTextEncoder.create(dim=8, buckets=64, seed=0)
        encoder = ProjectedTextEncoder(inner, init_projection(8, seed=0, mode="token"))

        out = encoder.encode_text("lung xray")

        assert np.allclose(out.pooled, out.token_states.mean(axis=0))

    def test_dim_mismatch(self):
        """Тест несовпадения размерностей."""
        with pytest.raises(DimensionMismatch):
            ProjectedTextEncoder(ToyTextEncoder.create(dim=8, buckets=64), init_projection(6))
