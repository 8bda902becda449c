"""End-to-end protocols on a synthetic task: domain adaptation, the similarity between kNN-MT and
explicit fine-tuning, and the word-level analyses.
"""

__all__ = [
    "AdaptationResult",
    "SimilarityResult",
    "WordStudyResult",
    "corpus_ppl",
    "adaptation_study",
    "similarity_study",
    "word_study",
]

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from metaknn.analysis import (
    GoldProbSeries,
    bucket_summary,
    compare_series,
    incremental_recall,
    mean_diff,
    neighbor_quality,
    neighbor_quality_summary,
    prf_by_bucket,
    realize_words,
    var_diff,
    word_buckets,
    word_prf,
)
from metaknn.constants import FREQUENCY_LABELS, GAMMA_LABELS, KNN_GRID_K, KNN_GRID_LAMBDA, KNN_GRID_TEMPERATURE
from metaknn.datastore import Datastore, Metric
from metaknn.finetune import (
    FtHyper,
    GridSpec,
    finetune_full,
    finetune_per_step,
    grid_search,
    per_step_lr_search,
    validation_ppl,
)
from metaknn.prediction import Hyper, Projection, ScoredToken, Variant, knn_grid_search, score_corpus
from metaknn.synthdata import SynthTask, base_projection

logger = logging.getLogger(__name__)


def corpus_ppl(scored: Sequence[ScoredToken]) -> float:
    """Perplexity of teacher-forced scoring from the log-domain gold probabilities."""
    if len(scored) == 0:
        raise ValueError("corpus_ppl needs at least one scored token")
    return float(np.exp(-np.mean([t.log_p_gold for t in scored])))


@dataclass(frozen=True)
class AdaptationResult:
    """Base, kNN-MT and fine-tuned models of a task with their in-domain test perplexities."""

    base: Projection
    datastore: Datastore
    hyper: Hyper
    ft: FtHyper
    tuned: Projection
    ppl: dict = field(default_factory=dict)

    def gain(self, system: str) -> float:
        """Relative test-perplexity reduction of ``system`` against the base model."""
        return 1.0 - self.ppl[system] / self.ppl["base"]


def adaptation_study(
    task: SynthTask,
    metric: Metric | str = Metric.INNER_PRODUCT,
    base: Projection | None = None,
    knn_grid: dict | None = None,
    grid: GridSpec | None = None,
    steps: int = 500,
    batch: int = 64,
    strategy: str = "staged",
    seed: int = 0,
) -> AdaptationResult:
    """
    Compare the base projection, grid-tuned kNN-MT and full-data fine-tuning on in-domain test data.

    Parameters
    ----------
    task : SynthTask
        Synthetic task.
    metric : Metric or str, optional
        Retrieval metric.
    base : Projection, optional
        Base projection; trained with :func:`base_projection` when None.
    knn_grid : dict, optional
        ``k``, ``lambda`` and ``temperature`` candidate lists of the retrieval search.
    grid : GridSpec, optional
        Learning rate and l2 candidates of the fine-tuning search.
    steps, batch : int, optional
        Length and batch size of every fine-tuning run.
    strategy : str, optional
        Fine-tuning search strategy.
    seed : int, optional
        Batch-order seed.

    Returns
    -------
    AdaptationResult
        Models, selected settings and test perplexities keyed ``base``, ``knn-mt``, ``opl-ft``.
    """
    metric = Metric.parse(metric)
    knn_grid = knn_grid or {}
    if base is None:
        base = base_projection(task.config, task.general)
    ds = task.datastore()

    logger.info("Adaptation study (%s)...", metric.value)
    hyper, _ = knn_grid_search(
        base,
        ds,
        task.val.steps(),
        k_candidates=knn_grid.get("k", KNN_GRID_K),
        lambda_candidates=knn_grid.get("lambda", KNN_GRID_LAMBDA),
        temperature_candidates=knn_grid.get("temperature", KNN_GRID_TEMPERATURE),
        metric=metric,
    )
    ft, _ = grid_search(base, task.train, task.val, grid, steps=steps, batch=batch, strategy=strategy, seed=seed)
    tuned = finetune_full(base, task.train, ft, task.val, seed=seed)

    ppl = {
        "base": validation_ppl(base, task.test),
        Variant.KNN_MT.value: corpus_ppl(score_corpus(base, ds, hyper, task.test, Variant.KNN_MT)),
        Variant.OPL_FT.value: validation_ppl(tuned, task.test),
    }
    logger.info("    Test PPL: base %.4f, kNN-MT %.4f, fine-tuned %.4f", *ppl.values())
    return AdaptationResult(base=base, datastore=ds, hyper=hyper, ft=ft, tuned=tuned, ppl=ppl)


@dataclass(frozen=True)
class SimilarityResult:
    """Gold-probability series of the plain, interpolated and per-step fine-tuned predictors."""

    hyper: Hyper
    lr: float
    series: dict
    table: pd.DataFrame

    def stats(self, a: str, b: str) -> tuple[float, float]:
        """Mean and variance of the differences ``a - b`` of two series."""
        return mean_diff(self.series[a], self.series[b]), var_diff(self.series[a], self.series[b])


def similarity_study(
    task: SynthTask,
    base: Projection,
    ds: Datastore,
    metric: Metric | str = Metric.INNER_PRODUCT,
    knn_grid: dict | None = None,
    lr_candidates: Sequence[float] | None = None,
    updates: int = 1,
) -> SimilarityResult:
    """
    Score the in-domain test corpus with the plain projection, kNN-MT and per-step OPL fine-tuning
    and compare the gold-probability series pairwise.

    The retrieval settings are selected by :func:`knn_grid_search` and the per-step learning rate
    by :func:`per_step_lr_search`, both on the validation corpus. Per-step fine-tuning uses the
    same k neighbors as kNN-MT.
    """
    metric = Metric.parse(metric)
    knn_grid = knn_grid or {}
    val_steps = task.val.steps()
    hyper, _ = knn_grid_search(
        base,
        ds,
        val_steps,
        k_candidates=knn_grid.get("k", KNN_GRID_K),
        lambda_candidates=knn_grid.get("lambda", KNN_GRID_LAMBDA),
        temperature_candidates=knn_grid.get("temperature", KNN_GRID_TEMPERATURE),
        metric=metric,
    )
    lr, _ = per_step_lr_search(base, ds, hyper, val_steps, lr_candidates, updates=updates)

    ft = FtHyper(lr=lr, alpha=0.0, steps=updates)
    opl = []
    for s, (vectors, tokens) in enumerate(task.test.sequences()):
        opl.extend(finetune_per_step(base, ds, hyper, list(zip(vectors, tokens, strict=True)), ft, sequence=s))

    series = {
        Variant.NMT.value: GoldProbSeries.from_scored(
            Variant.NMT, score_corpus(base, ds, hyper, task.test, Variant.NMT)
        ),
        Variant.KNN_MT.value: GoldProbSeries.from_scored(
            Variant.KNN_MT, score_corpus(base, ds, hyper, task.test, Variant.KNN_MT)
        ),
        Variant.OPL_FT.value: GoldProbSeries.from_scored(Variant.OPL_FT, opl),
    }
    table = compare_series(list(series.values()))
    logger.info(
        "Similarity study (%s): k=%d lambda=%g T=%g, per-step lr=%g",
        metric.value,
        hyper.k,
        hyper.lam,
        hyper.temperature,
        lr,
    )
    return SimilarityResult(hyper=hyper, lr=lr, series=series, table=table)


@dataclass(frozen=True)
class WordStudyResult:
    """Word-level comparison of kNN-MT against the fine-tuned proxy."""

    prf: pd.DataFrame
    prf_by_gamma: dict
    recall_by_gamma: pd.DataFrame
    recall_by_frequency: pd.DataFrame
    quality_by_gamma: pd.DataFrame
    quality_by_frequency: pd.DataFrame
    gamma_buckets: dict
    frequency_buckets: dict

    def tables(self) -> dict[str, pd.DataFrame]:
        """The result tables by name, for reports."""
        return {
            "prf": self.prf,
            "recall_by_gamma": self.recall_by_gamma,
            "recall_by_frequency": self.recall_by_frequency,
            "quality_by_gamma": self.quality_by_gamma,
            "quality_by_frequency": self.quality_by_frequency,
        }


def word_study(
    task: SynthTask,
    base: Projection,
    ds: Datastore,
    hyper: Hyper,
    tuned: Projection,
) -> WordStudyResult:
    """
    Word-level precision/recall/F1, incremental recall of kNN-MT over the fine-tuned proxy by
    domain-specificity and frequency bucket, and neighbor quality per bucket.

    Only words seen in the in-domain training corpus get a gamma bucket, and only the ``5~`` words
    among them get a frequency bucket.

    Parameters
    ----------
    task : SynthTask
        Synthetic task.
    base : Projection
        Base projection, the model of the plain and kNN-MT systems.
    ds : Datastore
        In-domain datastore.
    hyper : Hyper
        Retrieval settings of kNN-MT.
    tuned : Projection
        Fully fine-tuned projection, the reference system of incremental recall.

    Returns
    -------
    WordStudyResult
        Tables keyed by bucket.
    """
    knn_scored = score_corpus(base, ds, hyper, task.test, Variant.KNN_MT, retain_neighbors=True)
    systems = {
        Variant.NMT.value: score_corpus(base, ds, hyper, task.test, Variant.NMT),
        Variant.KNN_MT.value: knn_scored,
        Variant.OPL_FT.value: score_corpus(tuned, ds, hyper, task.test, Variant.NMT),
    }
    stats = {}
    for name, scored in systems.items():
        hyps, refs = realize_words(scored, task.subword_map)
        stats[name] = word_prf(hyps, refs)

    gamma_buckets, frequency_buckets = word_buckets(task.word_freq_id, task.word_freq_gd)

    prf = pd.DataFrame(
        {name: prf_by_bucket(s, {w: "all" for w in s}, ["all"]).loc["all"] for name, s in stats.items()}
    ).T
    prf.index.name = "system"
    delta = incremental_recall(stats[Variant.KNN_MT.value], stats[Variant.OPL_FT.value])
    qualities = neighbor_quality(knn_scored, task.subword_map)

    result = WordStudyResult(
        prf=prf,
        prf_by_gamma={name: prf_by_bucket(s, gamma_buckets, GAMMA_LABELS) for name, s in stats.items()},
        recall_by_gamma=bucket_summary(delta, gamma_buckets, GAMMA_LABELS),
        recall_by_frequency=bucket_summary(delta, frequency_buckets, FREQUENCY_LABELS),
        quality_by_gamma=neighbor_quality_summary(qualities, gamma_buckets, GAMMA_LABELS),
        quality_by_frequency=neighbor_quality_summary(qualities, frequency_buckets, FREQUENCY_LABELS),
        gamma_buckets=gamma_buckets,
        frequency_buckets=frequency_buckets,
    )
    rates = result.quality_by_frequency["non_retrieval_rate"].tolist()
    summary = ", ".join("nan" if math.isnan(r) else f"{r:.3f}" for r in rates)
    logger.info("Word study: non-retrieval rate by frequency bucket %s", summary)
    return result
