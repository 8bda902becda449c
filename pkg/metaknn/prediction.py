"""Module containing the next-token distributions of retrieval-augmented decoding: the
output-projection distribution, the neighbor distribution and their interpolation, and
teacher-forced scoring of sequences with them.
"""

__all__ = [
    "Projection",
    "ProbVector",
    "Hyper",
    "Variant",
    "ScoredToken",
    "InterpolationPolicy",
    "ConstantPolicy",
    "nmt_distribution",
    "knn_distribution",
    "interpolate",
    "score_sequence",
    "score_corpus",
    "greedy_decode_step",
    "knn_grid_search",
]

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import h5py
import numpy as np

from metaknn.constants import KNN_GRID_K, KNN_GRID_LAMBDA, KNN_GRID_TEMPERATURE, default_hyper
from metaknn.contexts import ContextPairs
from metaknn.datastore import Datastore, Metric, NeighborSet
from metaknn.exceptions import MissingInputError
from metaknn.utils import atomic_path, ensure_finite, log_softmax

logger = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Projection:
    """
    Output projection layer W_O mapping a context vector to vocabulary logits.

    Attributes
    ----------
    weights : np.ndarray
        ``(vocab_size, dim)`` float64 matrix; row ``v`` is the output embedding of token ``v``.
    """

    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ValueError(f"Projection weights must be 2-D, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("Projection weights must be finite")

    @property
    def vocab_size(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    @classmethod
    def zeros(cls, vocab_size: int, dim: int) -> "Projection":
        """All-zero projection, which predicts the uniform distribution."""
        return cls(np.zeros((vocab_size, dim), dtype=np.float64))

    def logits(self, h: np.ndarray) -> np.ndarray:
        """Return ``W_O h`` for a vector or ``H W_O^T`` for a batch of row vectors."""
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.dim:
            raise ValueError(f"Context vector has dim {h.shape[-1]}, projection has dim {self.dim}")
        return h @ self.weights.T

    def check_compatible(self, ds: Datastore) -> None:
        """Raise ``ValueError`` if the datastore does not share this projection's shape."""
        if ds.dim != self.dim or ds.vocab_size != self.vocab_size:
            raise ValueError(
                f"Datastore (dim={ds.dim}, vocab_size={ds.vocab_size}) does not match projection "
                f"(dim={self.dim}, vocab_size={self.vocab_size})"
            )

    def to_hdf5(self, file_path, key: str = "projection") -> None:
        """
        Save the weights to an HDF5 file.

        Parameters
        ----------
        file_path : str or Path
            The HDF5 file; an existing group of the same name is replaced and other groups are
            kept. The update goes through a copy that replaces the file once complete.
        key : str, optional
            Group name, by default ``"projection"``.
        """
        with atomic_path(file_path, copy_existing=True) as tmp, h5py.File(tmp, "a") as f:
            if key in f:
                del f[key]
            grp = f.create_group(key)
            grp.create_dataset("weights", data=self.weights)
            grp.attrs["vocab_size"] = self.vocab_size
            grp.attrs["dim"] = self.dim

    @classmethod
    def from_hdf5(cls, file_path, key: str = "projection") -> "Projection":
        """
        Load weights written by :meth:`to_hdf5`.

        Raises
        ------
        MissingInputError
            If the file does not exist.
        KeyError
            If the group is not in the file.
        """
        if not Path(file_path).exists():
            raise MissingInputError(f"Projection file '{file_path}' not found")
        with h5py.File(file_path, "r") as f:
            if key not in f:
                raise KeyError(f"Projection '{key}' not found in {file_path}")
            weights = np.array(f[key]["weights"], dtype=np.float64)
        return cls(weights)


@dataclass(frozen=True)
class ProbVector:
    """
    A probability distribution over the vocabulary.

    Attributes
    ----------
    probs : np.ndarray
        Non-negative float64 entries summing to one within 1e-9.
    """

    probs: np.ndarray

    def __post_init__(self):
        if self.probs.ndim != 1:
            raise ValueError(f"ProbVector must be 1-D, got shape {self.probs.shape}")
        if np.any(self.probs < 0):
            raise ValueError("ProbVector has negative entries")
        total = float(self.probs.sum())
        if abs(total - 1.0) > PROB_TOLERANCE:
            raise ValueError(f"ProbVector sums to {total!r}, expected 1")

    def __len__(self):
        return int(self.probs.shape[0])

    def __getitem__(self, token: int) -> float:
        return float(self.probs[token])


@dataclass(frozen=True)
class Hyper:
    """
    Retrieval hyper-parameters of kNN-MT.

    Attributes
    ----------
    k : int
        Number of neighbors.
    lam : float
        Interpolation weight of the neighbor distribution, in [0, 1].
    temperature : float
        Softmax temperature of the neighbor scores, > 0.
    metric : Metric
        Retrieval metric.
    """

    k: int = 8
    lam: float = 0.6
    temperature: float = 20.0
    metric: Metric = Metric.INNER_PRODUCT

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ValueError(f"k {self.k} must be a positive integer")
        _check_lambda(self.lam)
        _check_temperature(self.temperature)

    @classmethod
    def for_domain(cls, metric: "Metric | str" = Metric.INNER_PRODUCT, domain: str = "it") -> "Hyper":
        """Settings selected for ``domain`` under ``metric``."""
        metric = Metric.parse(metric)
        k, lam, temperature = default_hyper(metric.value, domain)
        return cls(k=k, lam=lam, temperature=temperature, metric=metric)


class Variant(str, Enum):
    """Which distribution produced a gold-probability series."""

    NMT = "nmt"
    KNN = "knn"
    KNN_MT = "knn-mt"
    OPL_FT = "opl-ft"


@dataclass(frozen=True)
class ScoredToken:
    """
    Probability assigned to the gold token at one teacher-forced step.

    Attributes
    ----------
    position : int
        Step index within its sequence.
    gold_token : int
        Gold token id.
    p_gold : float
        Probability of the gold token.
    log_p_gold : float
        Natural log of ``p_gold`` computed in the log domain; ``-inf`` when the mass is zero.
    prediction : int
        Greedy (argmax) token of the distribution.
    sequence : int
        Sequence number within the corpus.
    neighbors : NeighborSet or None
        Retrieved neighbors, kept only when requested.
    """

    position: int
    gold_token: int
    p_gold: float
    log_p_gold: float
    prediction: int
    sequence: int = 0
    neighbors: NeighborSet | None = field(default=None, repr=False)


InterpolationPolicy = Callable[[int, np.ndarray], tuple[int, float]]
"""Per-step choice of ``(k, lambda)`` from the step position and context vector."""


@dataclass(frozen=True)
class ConstantPolicy:
    """Vanilla kNN-MT: the same k and lambda at every step."""

    k: int
    lam: float

    def __call__(self, position: int, h: np.ndarray) -> tuple[int, float]:
        return self.k, self.lam


def _check_lambda(lam: float) -> None:
    if not 0.0 <= float(lam) <= 1.0:
        raise ValueError(f"lambda {lam} must lie in [0, 1]")


def _check_temperature(temperature: float) -> None:
    if not float(temperature) > 0.0:
        raise ValueError(f"temperature {temperature} must be positive")


def nmt_distribution(proj: Projection, h: np.ndarray) -> ProbVector:
    """
    Next-token distribution of the output projection, ``softmax(W_O h)``.

    Parameters
    ----------
    proj : Projection
        The output projection.
    h : np.ndarray
        Context vector of length ``proj.dim``.

    Returns
    -------
    ProbVector
        The model distribution p_NMT.

    Raises
    ------
    NumericError
        If ``h`` is not finite.
    """
    h = ensure_finite(np.asarray(h, dtype=np.float64), "context vector")
    return ProbVector(np.exp(log_softmax(proj.logits(h))))


def _log_knn_gold(p_knn: ProbVector, gold: int) -> float:
    with np.errstate(divide="ignore"):
        return float(np.log(p_knn.probs[gold]))


def knn_distribution(nbrs: NeighborSet, temperature: float, vocab_size: int) -> ProbVector:
    """
    Neighbor distribution p_kNN.

    ``p_kNN(v)`` is proportional to the sum of ``exp(score_j / T)`` over the neighbors whose
    value is ``v``. Scores are used as stored: dot products under the inner product, negative
    squared distances under negative L2. The temperature is metric specific and no rescaling
    between metrics is applied.

    Parameters
    ----------
    nbrs : NeighborSet
        Retrieved neighbors; must not be empty.
    temperature : float
        Temperature T > 0.
    vocab_size : int
        Vocabulary size.

    Returns
    -------
    ProbVector
        Distribution supported on the retrieved values.
    """
    if len(nbrs) == 0:
        raise ValueError("knn_distribution needs at least one neighbor")
    _check_temperature(temperature)
    weights = np.exp(log_softmax(np.asarray(nbrs.scores, dtype=np.float64) / temperature))
    probs = np.bincount(nbrs.values.astype(np.int64), weights=weights, minlength=vocab_size)
    return ProbVector(probs / probs.sum())


def interpolate(p_knn: ProbVector, p_nmt: ProbVector, lam: float) -> ProbVector:
    """
    Mix the two distributions: ``lam * p_knn + (1 - lam) * p_nmt``.

    The boundaries are exact: ``lam = 0`` returns ``p_nmt`` and ``lam = 1`` returns ``p_knn``.
    """
    if len(p_knn) != len(p_nmt):
        raise ValueError(f"Length mismatch: p_knn has {len(p_knn)} entries, p_nmt has {len(p_nmt)}")
    _check_lambda(lam)
    if lam == 0.0:
        return p_nmt
    if lam == 1.0:
        return p_knn
    return ProbVector(lam * p_knn.probs + (1.0 - lam) * p_nmt.probs)


def greedy_decode_step(p: ProbVector) -> int:
    """Argmax token of a distribution, ties broken by the lowest token id."""
    return int(np.argmax(p.probs))


def _interpolated_log_gold(log_knn: float, log_nmt: float, lam: float) -> float:
    if lam == 0.0:
        return log_nmt
    if lam == 1.0:
        return log_knn
    return float(np.logaddexp(np.log(lam) + log_knn, np.log1p(-lam) + log_nmt))


def score_sequence(
    proj: Projection,
    ds: Datastore | None,
    hyper: Hyper,
    steps: Sequence[tuple[np.ndarray, int]],
    variant: Variant | str = Variant.KNN_MT,
    retain_neighbors: bool = False,
    policy: InterpolationPolicy | None = None,
    sequence: int = 0,
) -> list[ScoredToken]:
    """
    Teacher-forced scoring of one sequence.

    At every step the k nearest neighbors of the context vector are retrieved, the selected
    distribution is evaluated and the probability of the gold token is recorded.

    Parameters
    ----------
    proj : Projection
        Output projection.
    ds : Datastore or None
        Datastore to retrieve from; may be None for the pure NMT variant.
    hyper : Hyper
        Retrieval settings.
    steps : sequence of (np.ndarray, int)
        ``(context vector, gold token)`` per step.
    variant : Variant or str, optional
        ``"nmt"`` (p_NMT only), ``"knn"`` (p_kNN only) or ``"knn-mt"`` (interpolation, default).
    retain_neighbors : bool, optional
        Keep each step's NeighborSet on the ScoredToken, by default False.
    policy : callable, optional
        Per-step ``(k, lambda)`` choice; defaults to the constant ``(hyper.k, hyper.lam)``.
    sequence : int, optional
        Sequence number stored on every ScoredToken.

    Returns
    -------
    list of ScoredToken
        One entry per step.
    """
    variant = Variant(variant)
    if variant is Variant.OPL_FT:
        raise ValueError("Use finetune_per_step to score the OPL-FT variant")
    if policy is None:
        policy = ConstantPolicy(hyper.k, hyper.lam)
    if ds is not None:
        proj.check_compatible(ds)

    scored = []
    for position, (h, gold) in enumerate(steps):
        h = ensure_finite(np.asarray(h, dtype=np.float64), "context vector")
        gold = int(gold)
        k, lam = policy(position, h)
        if variant is Variant.NMT:
            lam = 0.0
        elif variant is Variant.KNN:
            lam = 1.0
        _check_lambda(lam)

        log_nmt = log_softmax(proj.logits(h))
        nbrs = None
        # lambda = 0 skips retrieval entirely unless the neighbors are wanted for analysis.
        if lam > 0.0 or (retain_neighbors and ds is not None):
            if ds is None:
                raise ValueError(f"Variant '{variant.value}' needs a datastore")
            nbrs = ds.search(h, k, hyper.metric)

        if lam == 0.0:
            p = ProbVector(np.exp(log_nmt))
            log_gold = float(log_nmt[gold])
        else:
            p_knn = knn_distribution(nbrs, hyper.temperature, proj.vocab_size)
            p = interpolate(p_knn, ProbVector(np.exp(log_nmt)), lam)
            log_gold = _interpolated_log_gold(_log_knn_gold(p_knn, gold), float(log_nmt[gold]), lam)

        scored.append(
            ScoredToken(
                position=position,
                gold_token=gold,
                p_gold=p[gold],
                log_p_gold=log_gold,
                prediction=greedy_decode_step(p),
                sequence=sequence,
                neighbors=nbrs if retain_neighbors else None,
            )
        )
    return scored


def score_corpus(
    proj: Projection,
    ds: Datastore | None,
    hyper: Hyper,
    pairs: ContextPairs,
    variant: Variant | str = Variant.KNN_MT,
    retain_neighbors: bool = False,
    policy: InterpolationPolicy | None = None,
) -> list[ScoredToken]:
    """Apply :func:`score_sequence` to every sequence of a corpus, numbering the sequences."""
    scored = []
    for s, (vectors, tokens) in enumerate(pairs.sequences()):
        steps = list(zip(vectors, tokens, strict=True))
        scored.extend(score_sequence(proj, ds, hyper, steps, variant, retain_neighbors, policy, sequence=s))
    return scored


def knn_grid_search(
    proj: Projection,
    ds: Datastore,
    val_steps: Sequence[tuple[np.ndarray, int]],
    k_candidates: Sequence[int] = KNN_GRID_K,
    lambda_candidates: Sequence[float] = KNN_GRID_LAMBDA,
    temperature_candidates: Sequence[float] = KNN_GRID_TEMPERATURE,
    metric: "Metric | str" = Metric.INNER_PRODUCT,
) -> tuple[Hyper, float]:
    """
    Select ``(k, lambda, T)`` by validation perplexity of the interpolated distribution.

    Neighbors are retrieved once per step at the largest k; smaller k reuse the prefix of that
    list, which is their exact top-k.

    Parameters
    ----------
    proj : Projection
        Output projection.
    ds : Datastore
        Datastore.
    val_steps : sequence of (np.ndarray, int)
        Validation steps.
    k_candidates, lambda_candidates, temperature_candidates : sequence
        Grids; defaults cover k in {2..32}, lambda in {0.1..0.9}, T in {5..200}.
    metric : Metric or str, optional
        Retrieval metric.

    Returns
    -------
    tuple of (Hyper, float)
        The best settings and their validation perplexity. Ties keep the first in grid
        order (k-major, then lambda, then T).
    """
    metric = Metric.parse(metric)
    if not (k_candidates and lambda_candidates and temperature_candidates):
        raise ValueError("knn_grid_search needs a nonempty grid")
    if len(val_steps) == 0:
        raise ValueError("knn_grid_search needs validation steps")
    proj.check_compatible(ds)

    k_max = max(int(k) for k in k_candidates)
    golds = np.array([int(g) for _, g in val_steps], dtype=np.int64)
    log_nmt_gold = np.array([log_softmax(proj.logits(h))[g] for (h, _), g in zip(val_steps, golds, strict=True)])
    neighbor_lists = [ds.search(h, k_max, metric) for h, _ in val_steps]

    results = []
    for ik, k in enumerate(k_candidates):
        for it, temperature in enumerate(temperature_candidates):
            log_knn_gold = np.array(
                [
                    _log_knn_gold(knn_distribution(nbrs.head(int(k)), temperature, proj.vocab_size), g)
                    for nbrs, g in zip(neighbor_lists, golds, strict=True)
                ]
            )
            for il, lam in enumerate(lambda_candidates):
                log_gold = np.array(
                    [_interpolated_log_gold(a, b, lam) for a, b in zip(log_knn_gold, log_nmt_gold, strict=True)]
                )
                ppl = float(np.exp(-np.mean(log_gold)))
                hyper = Hyper(k=int(k), lam=float(lam), temperature=float(temperature), metric=metric)
                logger.debug("kNN grid k=%d lambda=%.2f T=%g: PPL %.4f", hyper.k, hyper.lam, hyper.temperature, ppl)
                results.append(((ppl, ik, il, it), hyper))

    (ppl, *_), hyper = min(results, key=lambda item: item[0])
    logger.info(
        "Selected k=%d, lambda=%.2f, T=%g (%s) with validation PPL %.4f",
        hyper.k, hyper.lam, hyper.temperature, metric.value, ppl,
    )
    return hyper, ppl
