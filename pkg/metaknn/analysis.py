"""Module containing the comparison statistics of gold-label probabilities and the word-level
analyses: precision/recall/F1 per word, domain-specificity and frequency buckets, incremental
recall against a fine-tuned reference system, and the quality of the retrieved neighbors.
"""

__all__ = [
    "GoldProbSeries",
    "WordStats",
    "NeighborQuality",
    "mean_diff",
    "var_diff",
    "perplexity",
    "compare_series",
    "gamma",
    "gamma_bucket",
    "frequency_ranks",
    "frequency_bucket",
    "word_prf",
    "corpus_prf",
    "prf_by_bucket",
    "incremental_recall",
    "bucket_summary",
    "word_buckets",
    "word_tables",
    "stack_tables",
    "read_word_file",
    "read_frequency_table",
    "segment_words",
    "realize_words",
    "neighbor_quality",
    "neighbor_quality_summary",
    "plot_buckets",
]

import json
import logging
import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from metaknn.constants import FREQUENCY_EDGES, FREQUENCY_LABELS, GAMMA_EDGES, GAMMA_LABELS
from metaknn.datastore import Metric
from metaknn.exceptions import MissingInputError
from metaknn.prediction import ScoredToken, Variant
from metaknn.utils import atomic_write_text, tool_version

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GoldProbSeries:
    """
    Gold-label probabilities of one system over a teacher-forced corpus.

    Attributes
    ----------
    variant : Variant
        System that produced the probabilities.
    probs : np.ndarray
        ``p(y_i)`` for every step, in [0, 1].
    """

    variant: Variant
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 1:
            raise ValueError("GoldProbSeries probabilities must be 1-D")
        if np.any((self.probs < 0) | (self.probs > 1)) or np.any(np.isnan(self.probs)):
            raise ValueError("GoldProbSeries probabilities must lie in [0, 1]")

    def __len__(self):
        return int(self.probs.shape[0])

    @classmethod
    def from_scored(cls, variant: Variant | str, scored: Iterable[ScoredToken]) -> "GoldProbSeries":
        """Collect the gold probabilities of scored tokens."""
        return cls(variant=variant, probs=np.array([t.p_gold for t in scored], dtype=np.float64))

    @staticmethod
    def scored_to_frame(scored: Sequence[ScoredToken]) -> pd.DataFrame:
        """Tabulate scored tokens with columns sequence, position, gold_token, p_gold, log_p_gold, prediction."""
        return pd.DataFrame(
            {
                "sequence": [t.sequence for t in scored],
                "position": [t.position for t in scored],
                "gold_token": [t.gold_token for t in scored],
                "p_gold": [t.p_gold for t in scored],
                "log_p_gold": [t.log_p_gold for t in scored],
                "prediction": [t.prediction for t in scored],
            }
        )

    @staticmethod
    def write_csv(path, variant: Variant | str, scored: Sequence[ScoredToken], seed: int | None = None) -> None:
        """
        Write a scored-series file: a ``#`` comment header (tool version, seed, variant) followed
        by the table of :meth:`scored_to_frame`. Written atomically.
        """
        header = f"# metaknn {tool_version()} seed={seed} variant={Variant(variant).value}\n"
        atomic_write_text(path, header + GoldProbSeries.scored_to_frame(scored).to_csv(index=False))

    @classmethod
    def read_csv(cls, path) -> "GoldProbSeries":
        """
        Read a scored-series file written by :meth:`write_csv`.

        Raises
        ------
        MissingInputError
            If the file does not exist.
        """
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"Scored-series file '{path}' not found")
        with open(path) as f:
            first = f.readline()
        variant = Variant.KNN_MT
        for part in first.lstrip("#").split():
            if part.startswith("variant="):
                variant = Variant(part.split("=", 1)[1])
        frame = pd.read_csv(path, comment="#")
        if "p_gold" not in frame.columns:
            raise ValueError(f"Scored-series file '{path}' has no p_gold column")
        return cls(variant=variant, probs=frame["p_gold"].to_numpy(dtype=np.float64))


@dataclass
class WordStats:
    """
    Word-level counts of a hypothesis corpus against its reference.

    Attributes
    ----------
    word : str
        The word.
    hyp_count, ref_count : int
        Occurrences in the hypotheses and references.
    match_count : int
        Per-sentence clipped matches, ``sum_s min(hyp_s, ref_s)``.
    gamma : float or None
        Domain-specificity ``f_id / f_gd``, set by the caller when known.
    in_domain_rank_pct : float or None
        In-domain frequency rank percentage in (0, 100], set by the caller when known.
    """

    word: str
    hyp_count: int = 0
    ref_count: int = 0
    match_count: int = 0
    gamma: float | None = None
    in_domain_rank_pct: float | None = None

    def __post_init__(self):
        if self.match_count > min(self.hyp_count, self.ref_count):
            raise ValueError(f"Word '{self.word}': {self.match_count} matches exceed its counts")

    @property
    def precision(self) -> float:
        return self.match_count / self.hyp_count if self.hyp_count else 0.0

    @property
    def recall(self) -> float:
        return self.match_count / self.ref_count if self.ref_count else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass(frozen=True)
class NeighborQuality:
    """
    Retrieval quality of one word occurrence.

    Attributes
    ----------
    word : str
        The word.
    unretrieved : bool
        True if the gold token of any of its sub-tokens is absent from that step's top-k values.
    gold_rank : float
        Rank (from 1) of the first gold-valued neighbor, or of the last neighbor when absent;
        averaged over sub-tokens.
    gold_dist : float
        Distance of that neighbor, averaged over sub-tokens: the squared L2 distance under
        negative L2, the dot-product score under the inner product.
    gold_count : int
        Number of gold-valued neighbors; the minimum over sub-tokens.
    distinct_labels : int
        Number of distinct values among the neighbors; the maximum over sub-tokens.
    """

    word: str
    unretrieved: bool
    gold_rank: float
    gold_dist: float
    gold_count: int
    distinct_labels: int


def _check_pair(a: GoldProbSeries, b: GoldProbSeries) -> np.ndarray:
    if len(a) != len(b):
        raise ValueError(f"Series lengths differ: {len(a)} vs {len(b)}")
    return a.probs - b.probs


def mean_diff(a: GoldProbSeries, b: GoldProbSeries) -> float:
    """Mean gold-probability difference ``M = (1/n) sum (p_A - p_B)``."""
    diff = _check_pair(a, b)
    if len(diff) == 0:
        raise ValueError("Series are empty")
    return float(np.mean(diff))


def var_diff(a: GoldProbSeries, b: GoldProbSeries) -> float:
    """Sample variance of the gold-probability difference, with the ``n - 1`` denominator."""
    diff = _check_pair(a, b)
    if len(diff) < 2:
        raise ValueError(f"Variance needs at least 2 steps, got {len(diff)}")
    return float(np.var(diff, ddof=1))


def perplexity(series: GoldProbSeries) -> float:
    """
    Exponential of the mean negative log gold probability.

    Raises
    ------
    ValueError
        If the series is empty or any probability is zero; floor such values in the log domain
        before calling.
    """
    if len(series) == 0:
        raise ValueError("Perplexity of an empty series")
    if np.any(series.probs <= 0):
        raise ValueError("Perplexity is undefined for a zero gold probability")
    return float(np.exp(-np.mean(np.log(series.probs))))


def compare_series(series: Sequence[GoldProbSeries]) -> pd.DataFrame:
    """
    M and V of every ordered pair of series.

    Returns
    -------
    pd.DataFrame
        Columns ``a, b, mean, variance``; one row per ordered pair ``a != b``.
    """
    rows = []
    for a in series:
        for b in series:
            if a is b:
                continue
            rows.append(
                {"a": a.variant.value, "b": b.variant.value, "mean": mean_diff(a, b), "variance": var_diff(a, b)}
            )
    return pd.DataFrame(rows, columns=["a", "b", "mean", "variance"])


def gamma(word: str, f_id: int, f_gd: int) -> float:
    """
    Domain-specificity of a word, ``f_id / f_gd``; infinite when the word never occurs in the
    general domain.

    Raises
    ------
    ValueError
        If ``f_id < 1`` (not an in-domain word) or a count is negative.
    """
    if f_id < 1:
        raise ValueError(f"Word '{word}' does not occur in-domain (f_id={f_id})")
    if f_gd < 0:
        raise ValueError(f"Word '{word}' has a negative general-domain count {f_gd}")
    return math.inf if f_gd == 0 else f_id / f_gd


def gamma_bucket(value: float) -> str:
    """Bucket label of a gamma value: ``0~1``, ``1~2``, ``2~5`` or ``5~`` (infinity included)."""
    return GAMMA_LABELS[int(np.searchsorted(GAMMA_EDGES, value, side="right"))]


def frequency_ranks(f_id: Mapping[str, int]) -> dict[str, float]:
    """
    In-domain frequency rank of every word as a percentage in (0, 100].

    Words are ranked by decreasing count, ties by the word string; the most frequent of ``n``
    words has ``100 / n``.
    """
    ordered = sorted(f_id, key=lambda w: (-f_id[w], w))
    n = len(ordered)
    return {word: 100.0 * (i + 1) / n for i, word in enumerate(ordered)}


def frequency_bucket(rank_pct: float) -> str:
    """Bucket label of a rank percentage: top 1%, 1~5%, 5~20% or 20~100% (upper edges inclusive)."""
    return FREQUENCY_LABELS[int(np.searchsorted(FREQUENCY_EDGES, rank_pct, side="left"))]


def word_prf(
    hyp_tokens: Sequence[str | Sequence[str]], ref_tokens: Sequence[str | Sequence[str]]
) -> dict[str, WordStats]:
    """
    Per-word precision, recall and F1 with per-sentence clipped matching.

    Parameters
    ----------
    hyp_tokens, ref_tokens : sequence of str or of token lists
        Aligned hypothesis and reference sentences. Strings are split on whitespace.

    Returns
    -------
    dict of str to WordStats
        Every word seen in either side.
    """
    if len(hyp_tokens) != len(ref_tokens):
        raise ValueError(f"{len(hyp_tokens)} hypotheses but {len(ref_tokens)} references")
    stats: dict[str, WordStats] = {}
    for hyp, ref in zip(hyp_tokens, ref_tokens, strict=True):
        hyp_counts = Counter(hyp.split() if isinstance(hyp, str) else hyp)
        ref_counts = Counter(ref.split() if isinstance(ref, str) else ref)
        for word in hyp_counts.keys() | ref_counts.keys():
            entry = stats.setdefault(word, WordStats(word))
            entry.hyp_count += hyp_counts[word]
            entry.ref_count += ref_counts[word]
            entry.match_count += min(hyp_counts[word], ref_counts[word])
    return stats


def corpus_prf(stats: Mapping[str, WordStats]) -> dict[str, float]:
    """Overall precision, recall and F1 from the summed counts of a set of words."""
    total = WordStats(
        "SUM",
        hyp_count=sum(s.hyp_count for s in stats.values()),
        ref_count=sum(s.ref_count for s in stats.values()),
        match_count=sum(s.match_count for s in stats.values()),
    )
    return {"precision": total.precision, "recall": total.recall, "f1": total.f1}


def prf_by_bucket(
    stats: Mapping[str, WordStats], buckets: Mapping[str, str], labels: Sequence[str] | None = None
) -> pd.DataFrame:
    """Overall precision, recall and F1 of the words of each bucket; words without a bucket are skipped."""
    order = list(labels) if labels is not None else sorted(set(buckets.values()))
    rows = {}
    for label in order:
        members = {w: s for w, s in stats.items() if buckets.get(w) == label}
        rows[label] = corpus_prf(members) | {"count": len(members)}
    frame = pd.DataFrame.from_dict(rows, orient="index", columns=["precision", "recall", "f1", "count"])
    frame.index.name = "bucket"
    return frame


def incremental_recall(stats: Mapping[str, WordStats], stats_ft: Mapping[str, WordStats]) -> dict[str, float]:
    """
    Recall of a system minus the recall of the fine-tuned reference system, per word.

    Words absent from the reference corpus are excluded.
    """
    delta = {}
    for word, entry in stats.items():
        if entry.ref_count == 0:
            continue
        other = stats_ft.get(word)
        other_recall = other.recall if other is not None else 0.0
        delta[word] = entry.recall - other_recall
    return delta


def bucket_summary(
    values: Mapping[str, float], buckets: Mapping[str, str], labels: Sequence[str] | None = None
) -> pd.DataFrame:
    """
    Mean, standard deviation and population of per-word values grouped by bucket.

    Parameters
    ----------
    values : mapping of str to float
        A value per word (e.g. incremental recall).
    buckets : mapping of str to str
        A bucket label per word; words without a label are skipped.
    labels : sequence of str, optional
        Bucket order of the output; defaults to the labels present, sorted.

    Returns
    -------
    pd.DataFrame
        Indexed by bucket with columns ``mean``, ``std`` (sample, NaN for one word) and ``count``.
    """
    frame = pd.DataFrame(
        [(buckets[w], float(v)) for w, v in values.items() if w in buckets], columns=["bucket", "value"]
    )
    summary = frame.groupby("bucket")["value"].agg(["mean", "std", "count"])
    order = list(labels) if labels is not None else sorted(summary.index)
    summary = summary.reindex(order)
    summary["count"] = summary["count"].fillna(0).astype(int)
    summary.index.name = "bucket"
    return summary


def word_buckets(f_id: Mapping[str, int], f_gd: Mapping[str, int]) -> tuple[dict[str, str], dict[str, str]]:
    """
    Domain-specificity and frequency buckets of the in-domain vocabulary.

    Every word with a positive in-domain count gets a gamma bucket. Only the words of the
    ``5~`` gamma bucket get a frequency bucket, ranked by in-domain count among themselves.

    Parameters
    ----------
    f_id, f_gd : mapping of str to int
        In-domain and general-domain word counts; words missing from ``f_gd`` count zero.

    Returns
    -------
    tuple of (dict of str to str, dict of str to str)
        Gamma bucket and frequency bucket per word.
    """
    seen = {w: int(c) for w, c in f_id.items() if c > 0}
    gamma_buckets = {w: gamma_bucket(gamma(w, c, int(f_gd.get(w, 0)))) for w, c in seen.items()}
    specific = {w: c for w, c in seen.items() if gamma_buckets[w] == GAMMA_LABELS[-1]}
    frequency_buckets = {w: frequency_bucket(r) for w, r in frequency_ranks(specific).items()}
    return gamma_buckets, frequency_buckets


def word_tables(
    hyps: Sequence[str | Sequence[str]],
    refs: Sequence[str | Sequence[str]],
    f_id: Mapping[str, int],
    f_gd: Mapping[str, int],
    hyps_ft: Sequence[str | Sequence[str]] | None = None,
) -> dict[str, pd.DataFrame]:
    """
    Bucketed word-level scores of a hypothesis corpus.

    Parameters
    ----------
    hyps, refs : sequence of str or of token lists
        Aligned hypothesis and reference sentences.
    f_id, f_gd : mapping of str to int
        In-domain and general-domain word counts.
    hyps_ft : sequence of str or of token lists, optional
        Hypotheses of the fine-tuned reference system; adds the incremental recall tables.

    Returns
    -------
    dict of str to pd.DataFrame
        ``prf_by_gamma`` and ``prf_by_frequency`` and, with ``hyps_ft``, ``recall_by_gamma`` and
        ``recall_by_frequency``; each indexed by bucket.
    """
    gamma_buckets, frequency_buckets = word_buckets(f_id, f_gd)
    stats = word_prf(hyps, refs)
    tables = {
        "prf_by_gamma": prf_by_bucket(stats, gamma_buckets, GAMMA_LABELS),
        "prf_by_frequency": prf_by_bucket(stats, frequency_buckets, FREQUENCY_LABELS),
    }
    if hyps_ft is not None:
        delta = incremental_recall(stats, word_prf(hyps_ft, refs))
        tables["recall_by_gamma"] = bucket_summary(delta, gamma_buckets, GAMMA_LABELS)
        tables["recall_by_frequency"] = bucket_summary(delta, frequency_buckets, FREQUENCY_LABELS)
    logger.info(
        "Word analysis: %d sentences, %d in-domain words, %d with gamma >= 5",
        len(refs),
        len(gamma_buckets),
        len(frequency_buckets),
    )
    return tables


def stack_tables(tables: Mapping[str, pd.DataFrame]) -> pd.DataFrame:
    """Concatenate named tables into one long frame with a leading ``table`` column."""
    frames = [frame.reset_index().assign(table=name) for name, frame in tables.items()]
    if not frames:
        return pd.DataFrame(columns=["table"])
    stacked = pd.concat(frames, ignore_index=True, sort=False)
    return stacked[["table"] + [c for c in stacked.columns if c != "table"]]


def read_word_file(path) -> list[list[str]]:
    """
    Read a tokenized corpus: one sentence per line, words separated by whitespace.

    Raises
    ------
    MissingInputError
        If the file does not exist.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Word file '{path}' not found")
    return [line.split() for line in path.read_text(encoding="utf-8").splitlines()]


def read_frequency_table(path) -> dict[str, int]:
    """
    Read word counts from a JSON object mapping every word to a non-negative integer.

    Raises
    ------
    MissingInputError
        If the file does not exist.
    ValueError
        If the content is not such an object.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Frequency table '{path}' not found")
    counts = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(counts, dict):
        raise ValueError(f"Frequency table '{path}' must be a JSON object of word counts")
    for word, count in counts.items():
        if not isinstance(count, int) or isinstance(count, bool) or count < 0:
            raise ValueError(f"Frequency table '{path}': count {count!r} of '{word}' is not a non-negative integer")
    return counts


def segment_words(tokens: Sequence[int], subword_map: Mapping[str, Sequence[int]]) -> list[tuple[str, int, int]]:
    """
    Split a gold token stream into words by greedy longest match against the sub-token map.

    Returns
    -------
    list of (str, int, int)
        ``(word, start, stop)`` spans; tokens matching no word become ``"<tok:ID>"`` of length one.
    """
    inverse = {tuple(int(t) for t in subs): word for word, subs in subword_map.items()}
    longest = max((len(k) for k in inverse), default=1)
    spans = []
    i = 0
    while i < len(tokens):
        for length in range(min(longest, len(tokens) - i), 0, -1):
            word = inverse.get(tuple(int(t) for t in tokens[i : i + length]))
            if word is not None:
                spans.append((word, i, i + length))
                i += length
                break
        else:
            spans.append((f"<tok:{int(tokens[i])}>", i, i + 1))
            i += 1
    return spans


def realize_words(
    scored: Sequence[ScoredToken], subword_map: Mapping[str, Sequence[int]]
) -> tuple[list[list[str]], list[list[str]]]:
    """
    Word-level hypothesis and reference sentences of teacher-forced scoring.

    The gold tokens of each sequence are segmented into words. Over every gold word span the
    greedy predictions form the hypothesis word: the word with exactly those sub-tokens, or
    ``"<tok:A+B>"`` when no word matches.

    Returns
    -------
    tuple of (list of list of str, list of list of str)
        Hypothesis and reference word lists, one per sequence in corpus order.
    """
    inverse = {tuple(int(t) for t in subs): word for word, subs in subword_map.items()}
    by_sequence: dict[int, list[ScoredToken]] = {}
    for token in scored:
        by_sequence.setdefault(token.sequence, []).append(token)

    hyps, refs = [], []
    for sequence in by_sequence.values():
        predictions = [int(t.prediction) for t in sequence]
        hyp, ref = [], []
        for word, start, stop in segment_words([t.gold_token for t in sequence], subword_map):
            predicted = tuple(predictions[start:stop])
            hyp.append(inverse.get(predicted, "<tok:" + "+".join(str(t) for t in predicted) + ">"))
            ref.append(word)
        hyps.append(hyp)
        refs.append(ref)
    return hyps, refs


def _step_quality(token: ScoredToken) -> tuple[bool, float, float, int, int]:
    nbrs = token.neighbors
    if nbrs is None:
        raise ValueError(f"Step {token.position} of sequence {token.sequence} has no retained neighbors")
    values = nbrs.values.astype(np.int64)
    hits = np.flatnonzero(values == token.gold_token)
    at = int(hits[0]) if len(hits) else len(values) - 1
    score = float(nbrs.scores[at])
    dist = -score if nbrs.metric is Metric.NEGATIVE_L2 else score
    return len(hits) > 0, float(at + 1), dist, int(len(hits)), int(len(np.unique(values)))


def neighbor_quality(
    tokens: Sequence[ScoredToken], subword_map: Mapping[str, Sequence[int]]
) -> list[NeighborQuality]:
    """
    Retrieval quality of every word occurrence of teacher-forced scoring with retained neighbors.

    The gold tokens of each sequence are segmented into words with :func:`segment_words`. A word
    is unretrieved if any sub-token's gold is missing from its step's neighbor values.

    Parameters
    ----------
    tokens : sequence of ScoredToken
        Scored steps in corpus order, each with ``neighbors`` set.
    subword_map : mapping of str to sequence of int
        Sub-token ids of every word.

    Returns
    -------
    list of NeighborQuality
        One entry per word occurrence.

    Raises
    ------
    ValueError
        If a step has no retained neighbors.
    """
    qualities = []
    by_sequence: dict[int, list[ScoredToken]] = {}
    for token in tokens:
        by_sequence.setdefault(token.sequence, []).append(token)

    for sequence in by_sequence.values():
        steps = [_step_quality(t) for t in sequence]
        for word, start, stop in segment_words([t.gold_token for t in sequence], subword_map):
            span = steps[start:stop]
            qualities.append(
                NeighborQuality(
                    word=word,
                    unretrieved=not all(s[0] for s in span),
                    gold_rank=float(np.mean([s[1] for s in span])),
                    gold_dist=float(np.mean([s[2] for s in span])),
                    gold_count=min(s[3] for s in span),
                    distinct_labels=max(s[4] for s in span),
                )
            )
    return qualities


def neighbor_quality_summary(
    qualities: Sequence[NeighborQuality], buckets: Mapping[str, str], labels: Sequence[str] | None = None
) -> pd.DataFrame:
    """
    Average neighbor metrics per bucket.

    Returns
    -------
    pd.DataFrame
        Indexed by bucket with columns ``non_retrieval_rate``, ``gold_rank``, ``gold_dist``,
        ``gold_count``, ``distinct_labels`` and ``count``.
    """
    frame = pd.DataFrame(
        [
            {
                "bucket": buckets[q.word],
                "non_retrieval_rate": float(q.unretrieved),
                "gold_rank": q.gold_rank,
                "gold_dist": q.gold_dist,
                "gold_count": q.gold_count,
                "distinct_labels": q.distinct_labels,
            }
            for q in qualities
            if q.word in buckets
        ],
        columns=["bucket", "non_retrieval_rate", "gold_rank", "gold_dist", "gold_count", "distinct_labels"],
    )
    summary = frame.groupby("bucket").mean()
    summary["count"] = frame.groupby("bucket").size()
    order = list(labels) if labels is not None else sorted(summary.index)
    summary = summary.reindex(order)
    summary["count"] = summary["count"].fillna(0).astype(int)
    summary.index.name = "bucket"
    return summary


def plot_buckets(summary: pd.DataFrame, column: str = "mean", ax=None, **kwargs):
    """Bar chart of one column of a bucket summary, with ``std`` error bars when present.

    Parameters
    ----------
    summary : pd.DataFrame
        Output of :func:`bucket_summary` or :func:`neighbor_quality_summary`.
    column : str, optional
        Column to draw, by default ``"mean"``.
    ax : matplotlib.axes.Axes, optional
        Axes to draw on. If None, a new figure and axes will be created.
    **kwargs
        Additional keyword arguments passed to ``ax.bar``.

    Returns
    -------
    matplotlib.axes.Axes
        The Axes object containing the plot.
    """
    if ax is None:
        _, ax = plt.subplots()
    errors = summary["std"].fillna(0.0).to_numpy() if "std" in summary.columns and column == "mean" else None
    ax.bar([str(label) for label in summary.index], summary[column].to_numpy(dtype=float), yerr=errors, **kwargs)
    ax.set_xlabel(summary.index.name or "bucket")
    ax.set_ylabel(column)
    ax.axhline(0.0, color="black", linewidth=0.8)
    return ax
