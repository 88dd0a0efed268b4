"""
Тесты для бенчмарка текстовых энкодеров.
"""

import math

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from app.errors import DimensionMismatch, KTooLarge, StrategyUnavailable, TooFewPoints
from app.services.encoder_bench import (
    EncoderOutput,
    ExtractionStrategy,
    LabelMode,
    benchmark_labels,
    best_strategy_per_encoder,
    bow_baseline,
    bow_iou_similarity,
    chexpert_at_k,
    chexpert_per_class,
    class_table,
    embed_2d,
    extract_embedding,
    run_benchmark,
    strategy_table,
)
from app.services.ingestion import CHEXPERT_CLASSES, build_report

EFFUSION = "Pleural Effusion"
EDEMA = "Edema"


def make_report(report_id, impression, finding):
    values = [None] * len(CHEXPERT_CLASSES)
    values[CHEXPERT_CLASSES.index(finding)] = 1
    return build_report(report_id, f"FINDINGS: see below. IMPRESSION: {impression}", values)


def brute_force(embeddings, labels, k):
    """Прямой перебор: k соседей с наибольшим скалярным произведением -> (global, по классам, macro)."""
    n = len(labels)
    scores = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (-float(embeddings[i] @ embeddings[j]), j))
        scores.append(sum(labels[j] == labels[i] for j in others[:k]) / k)
    groups = {}
    for score, label in zip(scores, labels):
        groups.setdefault(str(label), []).append(score)
    per_class = {label: float(np.mean(group)) for label, group in sorted(groups.items())}
    return float(np.mean(scores)), per_class, float(np.mean(list(per_class.values())))


def random_instance(seed):
    """Случайный набор: N <= 50, D <= 8, k <= min(10, N - 1)."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 51))
    emb = rng.standard_normal((n, int(rng.integers(1, 9))))
    labels = [int(c) for c in rng.integers(0, int(rng.integers(1, 5)), size=n)]
    k = int(rng.integers(1, min(10, n - 1) + 1))
    return rng, emb, labels, k


class TestExtractEmbedding:
    """Тесты для extract_embedding."""

    def test_strategies(self):
        """Тест всех стратегий извлечения."""
        out = EncoderOutput(
            token_states=[[1.0, 2.0], [3.0, 4.0]],
            pooled=[5.0, 6.0],
            model_specific=[7.0, 8.0],
            encoder_id="enc",
        )

        assert extract_embedding(out, ExtractionStrategy.CLS_HIDDEN_STATE).tolist() == [1.0, 2.0]
        assert extract_embedding(out, "mean_hidden_states").tolist() == [2.0, 3.0]
        assert extract_embedding(out, ExtractionStrategy.POOLER_OUTPUT).tolist() == [5.0, 6.0]
        assert extract_embedding(out, ExtractionStrategy.MODEL_SPECIFIC).tolist() == [7.0, 8.0]

    def test_unavailable(self):
        """Тест отсутствующего pooler output."""
        out = EncoderOutput(token_states=[[1.0, 2.0]], encoder_id="enc")

        with pytest.raises(StrategyUnavailable):
            extract_embedding(out, ExtractionStrategy.POOLER_OUTPUT)
        with pytest.raises(StrategyUnavailable):
            extract_embedding(out, ExtractionStrategy.MODEL_SPECIFIC)

    def test_pooled_dim_checked(self):
        """Тест несовпадения размерности pooled."""
        with pytest.raises(DimensionMismatch):
            EncoderOutput(token_states=[[1.0, 2.0]], pooled=[1.0, 2.0, 3.0])


class TestChexpertAtK:
    """Тесты для chexpert_at_k."""

    def test_oracle_embeddings(self):
        """Тест: одинаковые метки совпадают по направлению -> 1.0."""
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])

        score, per_report = chexpert_at_k(emb, ["A", "A", "B", "B"], k=1)

        assert score == 1.0
        assert per_report.tolist() == [1.0] * 4

    def test_anti_oracle_embeddings(self):
        """Тест: ближайший сосед всегда другого класса -> 0.0."""
        emb = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])

        score, _ = chexpert_at_k(emb, ["A", "A", "B", "B"], k=1)

        assert score == 0.0

    def test_documented_examples(self):
        """Тест: близкие пары одного класса -> 1.0, чередующиеся метки -> 0.0."""
        emb = np.array([[1.0, 0.0], [0.99, 0.01], [0.0, 1.0], [0.01, 0.99]])

        assert chexpert_at_k(emb, ["X", "X", "Y", "Y"], k=1)[0] == 1.0
        assert chexpert_at_k(emb, ["X", "Y", "X", "Y"], k=1)[0] == 0.0
        for k in (1, 2, 3):
            assert chexpert_at_k(emb, ["X"] * 4, k=k)[0] == 1.0

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_brute_force(self, seed):
        """Тест точного совпадения с прямым перебором: global, по классам, macro."""
        _, emb, labels, k = random_instance(seed)

        result = chexpert_per_class(emb, labels, k)
        global_score, per_class, macro = brute_force(emb, labels, k)

        assert result.global_score == global_score
        assert result.per_class_scores == per_class
        assert result.macro == macro

    @pytest.mark.parametrize("seed", range(50))
    def test_orthogonal_and_scale_invariance(self, seed):
        """Тест точной инвариантности к ортогональному повороту и масштабу c > 0."""
        rng, emb, labels, k = random_instance(1000 + seed)
        q, _ = np.linalg.qr(rng.standard_normal((emb.shape[1], emb.shape[1])))
        c = float(rng.uniform(0.01, 100.0))

        score, per_report = chexpert_at_k(emb, labels, k)
        rotated, rotated_per_report = chexpert_at_k(emb @ q, labels, k)
        scaled, scaled_per_report = chexpert_at_k(c * emb, labels, k)

        assert rotated == score
        assert scaled == score
        assert np.array_equal(rotated_per_report, per_report)
        assert np.array_equal(scaled_per_report, per_report)

    def test_self_is_never_retrieved(self):
        """Тест: копия отчёта с другой меткой меняет его скор, сам отчёт не считается."""
        emb = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        labels = ["A", "A", "B"]

        _, before = chexpert_at_k(emb, labels, k=1)
        _, after = chexpert_at_k(np.vstack([emb, emb[:1]]), labels + ["B"], k=1)

        assert before[0] == 1.0
        assert after[0] == 0.0
        assert after[3] == 0.0

    def test_tie_takes_lower_index(self):
        """Тест: при равном сходстве берётся меньший индекс."""
        emb = np.array([[1.0], [1.0], [1.0]])

        _, per_report = chexpert_at_k(emb, ["A", "B", "A"], k=1)

        assert per_report.tolist() == [0.0, 0.0, 1.0]

    def test_tuple_labels(self):
        """Тест полного бинарного вектора как метки."""
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

        score, _ = chexpert_at_k(emb, [(1, 0), (1, 0), (0, 1)], k=1)

        assert score == pytest.approx(2 / 3)

    def test_k_bounds(self, rng):
        """Тест: k должен быть в [1, N-1]."""
        emb = rng.standard_normal((4, 2))

        with pytest.raises(KTooLarge):
            chexpert_at_k(emb, ["A"] * 4, k=4)
        with pytest.raises(KTooLarge):
            chexpert_at_k(emb, ["A"] * 4, k=0)


class TestPerClass:
    """Тесты для chexpert_per_class."""

    def test_macro_is_mean_of_classes(self):
        """Тест macro как среднего по классам."""
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
        labels = ["A", "A", "B", "B", "A"]

        result = chexpert_per_class(emb, labels, k=1, encoder_id="enc", strategy="x")

        assert result.per_class_scores == {"A": pytest.approx(2 / 3), "B": 1.0}
        assert result.macro == pytest.approx((2 / 3 + 1.0) / 2)
        assert result.global_score == pytest.approx(4 / 5)
        assert result.to_dict()["global"] == result.global_score

    def test_two_clusters(self):
        """Тест: два кластера 3 + 3 по one-hot направлениям, k=2 -> все скоры 1.0."""
        emb = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3)

        result = chexpert_per_class(emb, ["A"] * 3 + ["B"] * 3, k=2)

        assert result.per_class_scores == {"A": 1.0, "B": 1.0}
        assert result.macro == 1.0

    def test_singleton_class(self):
        """Тест: у единственного отчёта класса нет соседа с той же меткой -> 0.0."""
        emb = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])

        result = chexpert_per_class(emb, ["A", "A", "B", "C"], k=1)

        assert result.per_class_scores["C"] == 0.0
        assert result.per_class_scores["A"] == 1.0


class TestBowBaseline:
    """Тесты для baseline мешка слов."""

    def test_iou(self):
        """Тест IoU мешков слов."""
        assert bow_iou_similarity("Left pleural effusion.", "pleural effusion") == pytest.approx(2 / 3)
        assert bow_iou_similarity("", "") == 1.0
        assert bow_iou_similarity("edema", "effusion") == 0.0

    def test_baseline_groups_shared_words(self):
        """Тест: отчёты с общими словами находят друг друга."""
        reports = [
            make_report("r0", "Small left pleural effusion.", EFFUSION),
            make_report("r1", "Left pleural effusion, small.", EFFUSION),
            make_report("r2", "Mild pulmonary edema.", EDEMA),
            make_report("r3", "Pulmonary edema, mild.", EDEMA),
        ]

        result = bow_baseline(reports, benchmark_labels(reports), k=1)

        assert result.encoder_id == "Base"
        assert result.global_score == 1.0


class TestRunBenchmark:
    """Тесты для run_benchmark и таблиц."""

    @pytest.fixture
    def reports(self):
        return [
            make_report("r0", "Small effusion.", EFFUSION),
            make_report("r1", "Effusion on the left.", EFFUSION),
            make_report("r2", "Mild edema.", EDEMA),
            make_report("r3", "Edema present.", EDEMA),
        ]

    @pytest.fixture
    def outputs(self):
        directions = {"r0": [1.0, 0.0], "r1": [1.0, 0.0], "r2": [0.0, 1.0], "r3": [0.0, 1.0]}
        return {
            "oracle": {
                rid: EncoderOutput(token_states=[d], pooled=d, encoder_id="oracle")
                for rid, d in directions.items()
            },
            "flat": {
                rid: EncoderOutput(token_states=[[1.0, 1.0]], encoder_id="flat")
                for rid in directions
            },
        }

    def test_results_and_unavailable(self, reports, outputs):
        """Тест результатов и недоступной стратегии."""
        strategies = [ExtractionStrategy.MEAN_HIDDEN_STATES, ExtractionStrategy.POOLER_OUTPUT]

        results = run_benchmark(outputs, reports, strategies, k=1)

        assert [(r.encoder_id, r.strategy) for r in results] == [
            ("oracle", "mean_hidden_states"),
            ("oracle", "pooler_output"),
            ("flat", "mean_hidden_states"),
            ("flat", "pooler_output"),
        ]
        assert results[0].macro == 1.0
        assert math.isnan(results[3].macro)

    def test_missing_output(self, reports, outputs):
        """Тест отсутствующего вывода для отчёта."""
        del outputs["oracle"]["r2"]

        with pytest.raises(DimensionMismatch, match="r2"):
            run_benchmark(outputs, reports, [ExtractionStrategy.MEAN_HIDDEN_STATES], k=1)

    def test_invalid_reports_skipped(self, reports, outputs):
        """Тест: помеченные отчёты не участвуют."""
        flagged = build_report("r9", "no impression here", [None] * len(CHEXPERT_CLASSES))

        results = run_benchmark(outputs, reports + [flagged],
                                [ExtractionStrategy.CLS_HIDDEN_STATE], k=1)

        assert results[0].global_score == 1.0

    def test_full_vector_labels(self, reports):
        """Тест меток в режиме полного вектора."""
        labels = benchmark_labels(reports, LabelMode.FULL_VECTOR)

        assert len(labels[0]) == 14
        assert labels[0] == labels[1]
        assert labels[0] != labels[2]

    def test_tables(self, reports, outputs):
        """Тест таблицы стратегий и таблицы классов."""
        strategies = [ExtractionStrategy.MEAN_HIDDEN_STATES, ExtractionStrategy.POOLER_OUTPUT]
        results = run_benchmark(outputs, reports, strategies, k=1)
        baseline = bow_baseline(reports, benchmark_labels(reports), k=1)

        by_strategy = strategy_table(results)
        by_class = class_table(results, baseline)
        best = best_strategy_per_encoder(results)

        assert list(by_strategy["Model"]) == ["oracle", "flat"]
        assert by_strategy.loc[1, "Pooler output"] == "None"
        assert by_strategy.loc[0, "Mean hidden states"] == 100.0
        assert list(by_class.columns) == ["Abnormality", "Base", "oracle", "flat"]
        assert list(by_class["Abnormality"]) == [EDEMA, EFFUSION, "Macro"]
        assert best["oracle"].strategy == "mean_hidden_states"


class TestEmbed2D:
    """Тесты для embed_2d."""

    def test_too_few_points(self):
        """Тест: меньше трёх точек."""
        with pytest.raises(TooFewPoints):
            embed_2d(np.zeros((2, 4)))

    def test_linear(self, rng):
        """Тест линейной проекции."""
        projection = embed_2d(rng.standard_normal((10, 5)), method="linear")

        assert projection.coords.shape == (10, 2)
        assert projection.method == "linear"
        assert 0.0 < projection.metadata["explained_variance"] <= 1.0

    def test_tsne_separates_clusters(self, rng):
        """Тест: два далёких кластера остаются разделёнными."""
        centers = np.zeros((2, 8))
        centers[0, 0], centers[1, 0] = 5.0, -5.0
        x = np.vstack([c + 0.1 * rng.standard_normal((20, 8)) for c in centers])
        labels = [0] * 20 + [1] * 20

        projection = embed_2d(x, seed=0)

        assert projection.coords.shape == (40, 2)
        assert projection.metadata["perplexity"] == 13.0
        assert silhouette_score(projection.coords, labels) > 0.5

    def test_tsne_deterministic(self, rng):
        """Тест воспроизводимости при одинаковом seed."""
        x = rng.standard_normal((12, 4))

        first = embed_2d(x, seed=3)
        second = embed_2d(x, seed=3)

        assert np.allclose(first.coords, second.coords)
