import math
from dataclasses import replace

import numpy as np
import pytest

from metaknn.constants import FREQUENCY_LABELS, GAMMA_LABELS
from metaknn.experiments import adaptation_study, corpus_ppl, similarity_study, word_study
from metaknn.finetune import FtHyper, GridSpec
from metaknn.prediction import ScoredToken
from metaknn.synthdata import SynthConfig, base_projection, gen_task

KNN_GRID = {"k": [4, 8], "lambda": [0.3, 0.6], "temperature": [10.0]}


@pytest.fixture(scope="module")
def task():
    cfg = SynthConfig(dim=8, vocab_size=16, n_general=3000, n_indomain=1500, n_val=200, n_test=200, shift=4.0, seed=1)
    return gen_task(cfg)


@pytest.fixture(scope="module")
def base(task):
    return base_projection(task.config, task.general, ft=FtHyper(lr=0.1, steps=500, batch=64))


@pytest.fixture(scope="module")
def adaptation(task, base):
    grid = GridSpec(lr_candidates=(1e-2, 1e-1), alpha_candidates=(0.0, 0.1))
    return adaptation_study(task, base=base, knn_grid=KNN_GRID, grid=grid, steps=200, batch=64)


def test_corpus_ppl():
    scored = [ScoredToken(0, 1, 0.5, math.log(0.5), 1), ScoredToken(1, 2, 0.25, math.log(0.25), 0)]
    assert corpus_ppl(scored) == pytest.approx(math.sqrt(8.0))
    with pytest.raises(ValueError, match="at least one"):
        corpus_ppl([])


class TestAdaptation:
    def test_both_systems_improve_on_base(self, adaptation):
        assert set(adaptation.ppl) == {"base", "knn-mt", "opl-ft"}
        assert adaptation.gain("knn-mt") >= 0.05
        assert adaptation.gain("opl-ft") >= 0.05

    def test_selected_settings_come_from_grids(self, adaptation):
        assert adaptation.hyper.k in KNN_GRID["k"]
        assert adaptation.hyper.lam in KNN_GRID["lambda"]
        assert adaptation.ft.lr in (1e-2, 1e-1)
        assert adaptation.ft.steps == 200

    def test_datastore_is_in_domain_training_corpus(self, adaptation, task):
        assert adaptation.datastore.count == len(task.train)


class TestSimilarity:
    @pytest.fixture(scope="class")
    def similarity(self, task, base, adaptation):
        return similarity_study(task, base, adaptation.datastore, knn_grid=KNN_GRID, lr_candidates=[1e-3, 1e-2])

    def test_series_cover_test_corpus(self, similarity, task):
        assert set(similarity.series) == {"nmt", "knn-mt", "opl-ft"}
        assert all(len(s) == len(task.test) for s in similarity.series.values())
        assert similarity.lr in (1e-3, 1e-2)

    def test_pairwise_table(self, similarity):
        table = similarity.table
        assert len(table) == 6
        assert (table["variance"] >= 0).all()
        forward = table[(table["a"] == "knn-mt") & (table["b"] == "opl-ft")]["mean"].item()
        backward = table[(table["a"] == "opl-ft") & (table["b"] == "knn-mt")]["mean"].item()
        assert forward == pytest.approx(-backward)

    def test_retrieval_and_fine_tuning_raise_gold_probability(self, similarity):
        assert similarity.stats("knn-mt", "nmt")[0] > 0
        assert similarity.stats("opl-ft", "nmt")[0] > 0


class TestWordStudy:
    @pytest.fixture(scope="class")
    def words(self, task, base, adaptation):
        return word_study(task, base, adaptation.datastore, adaptation.hyper, adaptation.tuned)

    def test_system_scores(self, words):
        assert list(words.prf.index) == ["nmt", "knn-mt", "opl-ft"]
        values = words.prf[["precision", "recall", "f1"]].to_numpy()
        assert np.all((values >= 0) & (values <= 1))

    def test_buckets_partition_in_domain_words(self, words, task):
        seen = {w for w, c in task.word_freq_id.items() if c > 0}
        assert set(words.gamma_buckets) == seen
        specific = {w for w, b in words.gamma_buckets.items() if b == "5~"}
        assert set(words.frequency_buckets) == specific
        assert set(words.gamma_buckets.values()) <= set(GAMMA_LABELS)

    def test_bucket_tables(self, words):
        assert list(words.recall_by_gamma.index) == list(GAMMA_LABELS)
        assert list(words.recall_by_frequency.index) == list(FREQUENCY_LABELS)
        rates = words.quality_by_frequency["non_retrieval_rate"].dropna()
        assert ((rates >= 0) & (rates <= 1)).all()
        assert words.quality_by_gamma.loc["5~", "count"] == words.quality_by_frequency["count"].sum()


SEEDS = (20231, 1, 2)
DEFAULT_KNN_GRIDS = {
    "ip": {"k": [4, 8, 16], "lambda": [0.2, 0.4, 0.6, 0.8], "temperature": [10.0, 20.0, 50.0]},
    "l2": {"k": [4, 8, 16], "lambda": [0.2, 0.4, 0.6, 0.8], "temperature": [10.0, 20.0, 50.0, 100.0]},
}
DEFAULT_GRID = GridSpec(lr_candidates=(1e-3, 1e-2, 1e-1), alpha_candidates=(0.0, 0.01))
PER_STEP_LRS = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)


@pytest.fixture(scope="module", params=SEEDS, ids=lambda seed: f"seed{seed}")
def default_task(request):
    task = gen_task(replace(SynthConfig(), seed=request.param))
    return task, base_projection(task.config, task.general)


@pytest.mark.slow
class TestDefaultTask:
    @pytest.mark.parametrize("metric", ["ip", "l2"])
    def test_adaptation_gains(self, default_task, metric):
        task, base = default_task
        result = adaptation_study(task, metric, base, DEFAULT_KNN_GRIDS[metric], DEFAULT_GRID, steps=500, batch=64)
        assert result.gain("knn-mt") >= 0.05
        assert result.gain("opl-ft") >= 0.05

    @pytest.mark.parametrize("metric", ["ip", "l2"])
    def test_knn_mt_is_closer_to_fine_tuning_than_to_base(self, default_task, metric):
        task, base = default_task
        ds = task.datastore()
        result = similarity_study(task, base, ds, metric, DEFAULT_KNN_GRIDS[metric], lr_candidates=PER_STEP_LRS)
        mean_ft, var_ft = result.stats("knn-mt", "opl-ft")
        mean_nmt, var_nmt = result.stats("knn-mt", "nmt")
        assert abs(mean_ft) < abs(mean_nmt)
        assert var_ft < var_nmt

    def test_non_retrieval_grows_as_words_get_rarer(self, default_task):
        task, base = default_task
        adaptation = adaptation_study(task, "ip", base, DEFAULT_KNN_GRIDS["ip"], DEFAULT_GRID, steps=500, batch=64)
        words = word_study(task, base, adaptation.datastore, adaptation.hyper, adaptation.tuned)
        quality = words.quality_by_frequency
        assert (quality["count"] > 0).all()
        rates = quality["non_retrieval_rate"].to_numpy()
        assert np.all(np.diff(rates) >= 0)
