"""Module containing the softmax-free (relaxed) forms of the two next-token predictors, the
meta-gradient that neighbor interpolation implicitly applies to the output projection, and the
dual-form identity check between them.

All computations run in float64 regardless of the float32 key storage. The relaxed forms are for
analysis only and are never substituted into decoding.
"""

__all__ = [
    "GradKind",
    "GradMatrix",
    "relaxed_nmt",
    "relaxed_knn",
    "meta_gradient",
    "dual_output",
    "dual_residual",
    "error_signals",
    "random_instance",
    "dual_check_trials",
]

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from metaknn.constants import KNN_GRID_TEMPERATURE
from metaknn.datastore import Datastore, Metric, NeighborSet
from metaknn.prediction import Projection
from metaknn.utils import one_hot, softmax

logger = logging.getLogger(__name__)


class GradKind(str, Enum):
    """Provenance of a gradient matrix."""

    META = "meta"
    ANALYTIC = "analytic"
    NUMERIC = "numeric"


@dataclass(frozen=True)
class GradMatrix:
    """
    An update direction for the output projection.

    Attributes
    ----------
    delta : np.ndarray
        ``(vocab_size, dim)`` float64 matrix.
    kind : GradKind
        ``meta`` for the implicit kNN-MT update, ``analytic`` for the closed-form fine-tuning
        gradient, ``numeric`` for finite differences.
    scale_note : dict
        Coefficients the matrix was built with, e.g. ``{"temperature": 20.0}`` or ``{"alpha": 0.1}``.
    """

    delta: np.ndarray
    kind: GradKind
    scale_note: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", GradKind(self.kind))
        if self.delta.ndim != 2:
            raise ValueError(f"Gradient must be 2-D, got shape {self.delta.shape}")
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("Gradient entries must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.delta.shape


def _check_neighbors(nbrs: NeighborSet, proj: Projection | None = None) -> None:
    if len(nbrs) == 0:
        raise ValueError("At least one neighbor is required")
    if proj is not None and nbrs.query_dim != proj.dim:
        raise ValueError(f"Neighbors have dim {nbrs.query_dim}, projection has dim {proj.dim}")


def _check_temperature(temperature: float) -> None:
    if not float(temperature) > 0.0:
        raise ValueError(f"temperature {temperature} must be positive")


def _value_key_product(nbrs: NeighborSet, vocab_size: int) -> np.ndarray:
    """Dense ``V_m K_m^T``: row v sums the keys of the neighbors whose value is v."""
    vk = np.zeros((vocab_size, nbrs.query_dim), dtype=np.float64)
    np.add.at(vk, nbrs.values.astype(np.int64), np.asarray(nbrs.keys, dtype=np.float64))
    return vk


def relaxed_nmt(proj: Projection, h: np.ndarray) -> np.ndarray:
    """Logits ``W_O h`` without the softmax."""
    return proj.logits(np.asarray(h, dtype=np.float64).ravel())


def relaxed_knn(nbrs: NeighborSet, h: np.ndarray, temperature: float, vocab_size: int) -> np.ndarray:
    """
    Softmax-free neighbor attention ``V_m K_m^T h / T``.

    Component ``v`` equals the sum of ``key_j . h / T`` over neighbors whose value is ``v``.

    Parameters
    ----------
    nbrs : NeighborSet
        Retrieved neighbors; must not be empty.
    h : np.ndarray
        Query vector.
    temperature : float
        Temperature T > 0.
    vocab_size : int
        Vocabulary size.

    Returns
    -------
    np.ndarray
        Vector of length ``vocab_size``.
    """
    _check_neighbors(nbrs)
    _check_temperature(temperature)
    h = np.asarray(h, dtype=np.float64).ravel()
    if h.shape[0] != nbrs.query_dim:
        raise ValueError(f"Query has dim {h.shape[0]}, neighbors have dim {nbrs.query_dim}")
    attention = np.asarray(nbrs.keys, dtype=np.float64) @ h
    return np.bincount(nbrs.values.astype(np.int64), weights=attention, minlength=vocab_size) / temperature


def meta_gradient(nbrs: NeighborSet, proj: Projection, temperature: float) -> GradMatrix:
    """
    Implicit update of the output projection induced by neighbor interpolation.

    ``delta = V_m K_m^T - T * W_O``: the sum over neighbors of ``onehot(value_j) (x) key_j``,
    minus the temperature times the current weights (an l2 regularization derivative whose
    coefficient is T).

    Returns
    -------
    GradMatrix
        Matrix of kind ``meta``.
    """
    _check_neighbors(nbrs, proj)
    _check_temperature(temperature)
    delta = _value_key_product(nbrs, proj.vocab_size) - temperature * proj.weights
    return GradMatrix(delta=delta, kind=GradKind.META, scale_note={"temperature": float(temperature)})


def dual_output(proj: Projection, nbrs: NeighborSet, h: np.ndarray, lam: float, temperature: float) -> np.ndarray:
    """
    Logits of a single forward pass through the updated projection
    ``(W_O + (lam / T) * delta_kNN) h``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} must lie in [0, 1]")
    h = np.asarray(h, dtype=np.float64).ravel()
    if lam == 0.0:
        return relaxed_nmt(proj, h)
    grad = meta_gradient(nbrs, proj, temperature)
    return (proj.weights + (lam / temperature) * grad.delta) @ h


def dual_residual(proj: Projection, nbrs: NeighborSet, h: np.ndarray, lam: float, temperature: float) -> float:
    """
    Relative mismatch between the updated-projection forward pass and the interpolation of the
    two relaxed attentions:

    ``||dual - [nmt + lam (knn - nmt)]|| / max(1, ||dual||)``.

    The two sides are computed independently; the identity is exact in real arithmetic.
    """
    dual = dual_output(proj, nbrs, h, lam, temperature)
    nmt = relaxed_nmt(proj, h)
    if lam == 0.0:
        mixed = nmt
    else:
        mixed = nmt + lam * (relaxed_knn(nbrs, h, temperature, proj.vocab_size) - nmt)
    return float(np.linalg.norm(dual - mixed) / max(1.0, float(np.linalg.norm(dual))))


def error_signals(nbrs: NeighborSet, proj: Projection, kind: str = "meta") -> np.ndarray:
    """
    Per-neighbor error signals multiplied into the keys to form a gradient.

    Parameters
    ----------
    nbrs : NeighborSet
        Retrieved neighbors.
    proj : Projection
        Output projection.
    kind : str, optional
        ``"meta"`` returns the one-hot values ``V_m``; ``"analytic"`` returns ``V_m - P_m`` with
        ``P_m`` the projection's predictions at the keys.

    Returns
    -------
    np.ndarray
        ``(len(nbrs), vocab_size)`` matrix, one signal per neighbor.
    """
    _check_neighbors(nbrs, proj)
    signals = one_hot(nbrs.values, proj.vocab_size)
    if GradKind(kind) is GradKind.ANALYTIC:
        signals -= softmax(proj.logits(np.asarray(nbrs.keys, dtype=np.float64)))
    return signals


def random_instance(
    rng: np.random.Generator,
    max_dim: int = 64,
    max_vocab: int = 256,
    max_k: int = 32,
    temperatures=KNN_GRID_TEMPERATURE,
    metric: Metric = Metric.INNER_PRODUCT,
) -> tuple[Projection, NeighborSet, np.ndarray, float, float]:
    """
    Draw a random ``(proj, nbrs, h, lambda, T)`` instance for the identity checks.

    The neighbors are the top-k of a random k-entry datastore, so every instance goes through
    the real retrieval path.
    """
    dim = int(rng.integers(1, max_dim + 1))
    vocab_size = int(rng.integers(2, max_vocab + 1))
    k = int(rng.integers(1, max_k + 1))
    temperature = float(rng.choice(np.asarray(temperatures, dtype=np.float64)))
    lam = float(rng.uniform(0.0, 1.0))

    proj = Projection(rng.normal(size=(vocab_size, dim)))
    ds = Datastore.from_arrays(rng.normal(size=(k, dim)), rng.integers(0, vocab_size, size=k), vocab_size)
    h = rng.normal(size=dim)
    return proj, ds.search(h, k, metric), h, lam, temperature


def dual_check_trials(trials: int = 1000, seed: int = 0, **instance_kwargs) -> pd.DataFrame:
    """
    Evaluate :func:`dual_residual` on seeded random instances.

    Parameters
    ----------
    trials : int, optional
        Number of instances, by default 1000.
    seed : int, optional
        Base seed; trial ``i`` uses the stream ``default_rng([seed, i])``.
    **instance_kwargs
        Size limits forwarded to :func:`random_instance`.

    Returns
    -------
    pd.DataFrame
        One row per trial with columns ``seed, d_in, vocab_size, k, lambda, temperature, residual``.
    """
    rows = []
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        proj, nbrs, h, lam, temperature = random_instance(rng, **instance_kwargs)
        rows.append(
            {
                "seed": seed,
                "trial": i,
                "d_in": proj.dim,
                "vocab_size": proj.vocab_size,
                "k": len(nbrs),
                "lambda": lam,
                "temperature": temperature,
                "residual": dual_residual(proj, nbrs, h, lam, temperature),
            }
        )
    table = pd.DataFrame(rows)
    logger.info("Dual-form check: %d trials, max residual %.3e", trials, table["residual"].max() if rows else 0.0)
    return table
