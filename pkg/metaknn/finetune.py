"""Module containing explicit fine-tuning of the output projection layer (OPL): the
log-likelihood objective on retrieved neighbors, its closed-form gradient and a finite-difference
oracle, the gradient-ascent update, per-step and full-data training loops and the
learning-rate / l2 grid search selected by validation perplexity.
"""

__all__ = [
    "FtHyper",
    "GridSpec",
    "opl_loss",
    "opl_gradient",
    "fd_gradient",
    "sgd_step",
    "validation_ppl",
    "finetune_per_step",
    "finetune_full",
    "grid_search",
    "per_step_lr_search",
    "grad_check_trials",
    "fd_convergence_ratio",
]

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from metaknn.constants import ALPHA_GRID, EVAL_EVERY, default_lr_grid
from metaknn.contexts import ContextPairs
from metaknn.datastore import Datastore, Metric, NeighborSet
from metaknn.exceptions import NumericError
from metaknn.meta_optimizer import GradKind, GradMatrix
from metaknn.prediction import Hyper, Projection, ScoredToken, greedy_decode_step, nmt_distribution
from metaknn.utils import log_softmax, one_hot, relative_error, softmax

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FtHyper:
    """
    Settings of explicit OPL fine-tuning.

    Attributes
    ----------
    lr : float
        Learning rate eta > 0.
    alpha : float
        l2 coefficient >= 0.
    steps : int
        Number of optimizer steps. Zero is accepted and leaves the weights untouched.
    batch : int
        Mini-batch size of full-data fine-tuning.
    """

    lr: float = 4e-3
    alpha: float = 0.0
    steps: int = 1
    batch: int = 64

    def __post_init__(self):
        if not float(self.lr) > 0.0:
            raise ValueError(f"Learning rate {self.lr} must be positive")
        if not float(self.alpha) >= 0.0:
            raise ValueError(f"alpha {self.alpha} must be non-negative")
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 0:
            raise ValueError(f"steps {self.steps} must be a non-negative integer")
        if not isinstance(self.batch, (int, np.integer)) or self.batch < 1:
            raise ValueError(f"batch {self.batch} must be a positive integer")


@dataclass(frozen=True)
class GridSpec:
    """
    Candidate learning rates and l2 coefficients.

    Defaults are the 36 learning rates {1..9} x {1e-1, 1e-2, 1e-3, 1e-4} and
    alpha in {0, 0.01, 0.05, 0.1, 0.5, 1, 5, 10}.
    """

    lr_candidates: tuple[float, ...] = field(default_factory=lambda: tuple(default_lr_grid()))
    alpha_candidates: tuple[float, ...] = ALPHA_GRID

    def __post_init__(self):
        object.__setattr__(self, "lr_candidates", tuple(float(x) for x in self.lr_candidates))
        object.__setattr__(self, "alpha_candidates", tuple(float(x) for x in self.alpha_candidates))
        if not self.lr_candidates or not self.alpha_candidates:
            raise ValueError("Grid must contain at least one learning rate and one alpha")
        if any(lr <= 0 for lr in self.lr_candidates):
            raise ValueError("Grid learning rates must be positive")
        if any(alpha < 0 for alpha in self.alpha_candidates):
            raise ValueError("Grid alphas must be non-negative")

    def __len__(self):
        return len(self.lr_candidates) * len(self.alpha_candidates)


def _arrays(nbrs: NeighborSet, proj: Projection) -> tuple[np.ndarray, np.ndarray]:
    if len(nbrs) == 0:
        raise ValueError("At least one neighbor is required")
    if nbrs.query_dim != proj.dim:
        raise ValueError(f"Neighbors have dim {nbrs.query_dim}, projection has dim {proj.dim}")
    return np.asarray(nbrs.keys, dtype=np.float64), nbrs.values.astype(np.int64)


def _check_alpha(alpha: float) -> None:
    if not float(alpha) >= 0.0:
        raise ValueError(f"alpha {alpha} must be non-negative")


def _loss(weights: np.ndarray, keys: np.ndarray, values: np.ndarray, alpha: float) -> float:
    log_probs = log_softmax(keys @ weights.T)
    data = float(np.sum(log_probs[np.arange(len(values)), values]))
    return data - 0.5 * alpha * float(np.sum(weights * weights))


def _gradient(
    weights: np.ndarray, keys: np.ndarray, values: np.ndarray, alpha: float, zero_prediction: bool = False
) -> np.ndarray:
    signals = one_hot(values, weights.shape[0])
    if not zero_prediction:
        signals -= softmax(keys @ weights.T)
    return signals.T @ keys - alpha * weights


def opl_loss(proj: Projection, nbrs: NeighborSet, alpha: float = 0.0) -> float:
    """
    Log-likelihood of the neighbor values under the projection, with an l2 penalty.

    ``L = sum_j log softmax(W_O K_j)[V_j] - (alpha / 2) ||W_O||_F^2``

    Parameters
    ----------
    proj : Projection
        Output projection.
    nbrs : NeighborSet
        Retrieved neighbors, used as training pairs ``(K_j, V_j)``.
    alpha : float, optional
        l2 coefficient, by default 0.

    Returns
    -------
    float
        The objective, to be maximized.
    """
    _check_alpha(alpha)
    keys, values = _arrays(nbrs, proj)
    return _loss(proj.weights, keys, values, alpha)


def opl_gradient(proj: Projection, nbrs: NeighborSet, alpha: float = 0.0, zero_prediction: bool = False) -> GradMatrix:
    """
    Closed-form gradient of :func:`opl_loss` with respect to W_O.

    ``delta_FT = (V_m - P_m) K_m^T - alpha W_O``, where ``V_m`` holds the one-hot neighbor values
    and ``P_m`` the projection's predictions ``softmax(W_O K_j)`` at the neighbor keys.

    Parameters
    ----------
    proj : Projection
        Output projection.
    nbrs : NeighborSet
        Retrieved neighbors.
    alpha : float, optional
        l2 coefficient.
    zero_prediction : bool, optional
        Drop the ``P_m`` term, leaving the error signal ``V_m`` of kNN-MT. With ``alpha = T``
        this reproduces :func:`metaknn.meta_optimizer.meta_gradient`.

    Returns
    -------
    GradMatrix
        Matrix of kind ``analytic``.
    """
    _check_alpha(alpha)
    keys, values = _arrays(nbrs, proj)
    return GradMatrix(
        delta=_gradient(proj.weights, keys, values, alpha, zero_prediction),
        kind=GradKind.ANALYTIC,
        scale_note={"alpha": float(alpha), "zero_prediction": zero_prediction},
    )


def fd_gradient(proj: Projection, nbrs: NeighborSet, alpha: float = 0.0, epsilon: float = 1e-5) -> GradMatrix:
    """
    Central finite differences of :func:`opl_loss`, one weight entry at a time:
    ``(L(W + eps E_ij) - L(W - eps E_ij)) / (2 eps)``.
    """
    if not epsilon > 0.0:
        raise ValueError(f"epsilon {epsilon} must be positive")
    _check_alpha(alpha)
    keys, values = _arrays(nbrs, proj)
    weights = proj.weights.copy()
    delta = np.empty_like(weights)
    for i, j in np.ndindex(weights.shape):
        original = weights[i, j]
        weights[i, j] = original + epsilon
        plus = _loss(weights, keys, values, alpha)
        weights[i, j] = original - epsilon
        minus = _loss(weights, keys, values, alpha)
        weights[i, j] = original
        delta[i, j] = (plus - minus) / (2.0 * epsilon)
    return GradMatrix(delta=delta, kind=GradKind.NUMERIC, scale_note={"alpha": float(alpha), "epsilon": epsilon})


def sgd_step(proj: Projection, grad: GradMatrix, lr: float) -> Projection:
    """
    Gradient-ascent update ``W' = W + lr * delta``.

    The plus sign is kept because the objective is a log-likelihood.
    """
    if grad.shape != proj.weights.shape:
        raise ValueError(f"Gradient shape {grad.shape} does not match projection shape {proj.weights.shape}")
    if lr == 0.0:
        return proj
    return Projection(proj.weights + lr * grad.delta)


def validation_ppl(proj: Projection, pairs: ContextPairs) -> float:
    """Perplexity of the projection alone on the gold tokens of a corpus."""
    if len(pairs) == 0:
        raise ValueError("Validation corpus is empty")
    log_probs = log_softmax(proj.logits(np.asarray(pairs.vectors, dtype=np.float64)))
    gold = log_probs[np.arange(len(pairs)), np.asarray(pairs.tokens, dtype=np.int64)]
    return float(np.exp(-np.mean(gold)))


def finetune_per_step(
    proj: Projection,
    ds: Datastore,
    hyper: Hyper,
    steps: Sequence[tuple[np.ndarray, int]],
    ft: FtHyper,
    sequence: int = 0,
    retain_neighbors: bool = False,
) -> list[ScoredToken]:
    """
    Per-step OPL fine-tuning, the explicit counterpart of kNN-MT.

    At every teacher-forced step the same k neighbors kNN-MT would use are retrieved, a fresh
    copy of W_O takes ``ft.steps`` gradient-ascent steps on them, and the tuned copy scores the
    gold token. Weights are reset before the next step.

    Parameters
    ----------
    proj : Projection
        Base output projection; never modified.
    ds : Datastore
        Datastore.
    hyper : Hyper
        Retrieval settings; only ``k`` and ``metric`` are used.
    steps : sequence of (np.ndarray, int)
        ``(context vector, gold token)`` per step.
    ft : FtHyper
        ``lr``, ``alpha`` and the number of updates ``steps`` per timestep.
    sequence : int, optional
        Sequence number stored on every ScoredToken.
    retain_neighbors : bool, optional
        Keep the neighbors on each ScoredToken.

    Returns
    -------
    list of ScoredToken
        Gold probabilities under the tuned copies.
    """
    proj.check_compatible(ds)
    scored = []
    for position, (h, gold) in enumerate(steps):
        gold = int(gold)
        nbrs = ds.search(h, hyper.k, hyper.metric)
        keys, values = _arrays(nbrs, proj)
        weights = proj.weights
        for _ in range(ft.steps):
            weights = weights + ft.lr * _gradient(weights, keys, values, ft.alpha)
        tuned = Projection(weights)
        log_probs = log_softmax(tuned.logits(np.asarray(h, dtype=np.float64)))
        p = nmt_distribution(tuned, h)
        scored.append(
            ScoredToken(
                position=position,
                gold_token=gold,
                p_gold=p[gold],
                log_p_gold=float(log_probs[gold]),
                prediction=greedy_decode_step(p),
                sequence=sequence,
                neighbors=nbrs if retain_neighbors else None,
            )
        )
    return scored


def finetune_full(
    proj: Projection,
    pairs: ContextPairs,
    ft: FtHyper,
    val: ContextPairs,
    eval_every: int = EVAL_EVERY,
    patience: int | None = None,
    seed: int = 0,
) -> Projection:
    """
    Mini-batch gradient ascent over a whole training corpus.

    Each step draws the next ``ft.batch`` pairs of a seeded per-epoch permutation and applies
    ``W += lr * ((V - P) K^T / batch - alpha W)``; the data term is averaged over the batch so a
    learning rate transfers across batch sizes. Validation perplexity is measured before
    training, every ``eval_every`` steps and at the end, and the best weights seen are returned.

    Parameters
    ----------
    proj : Projection
        Initial weights; never modified.
    pairs : ContextPairs
        Training corpus.
    ft : FtHyper
        Learning rate, l2 coefficient, number of steps and batch size.
    val : ContextPairs
        Validation corpus.
    eval_every : int, optional
        Validation interval in steps.
    patience : int, optional
        Stop after this many validations without improvement. None trains for ``ft.steps``.
    seed : int, optional
        Seed of the batch order.

    Returns
    -------
    Projection
        Weights with the lowest validation perplexity seen.

    Raises
    ------
    ValueError
        If the training corpus is empty.
    """
    if len(pairs) == 0:
        raise ValueError("finetune_full needs a nonempty training corpus")
    if eval_every < 1:
        raise ValueError(f"eval_every {eval_every} must be a positive integer")

    rng = np.random.Generator(np.random.PCG64(seed))
    keys_all = np.asarray(pairs.vectors, dtype=np.float64)
    values_all = np.asarray(pairs.tokens, dtype=np.int64)
    n = len(pairs)
    batch = min(ft.batch, n)

    weights = proj.weights.copy()
    best_weights, best_ppl = weights.copy(), validation_ppl(proj, val)
    stale = 0
    order = rng.permutation(n)
    cursor = 0
    logger.debug("finetune_full lr=%g alpha=%g: initial validation PPL %.4f", ft.lr, ft.alpha, best_ppl)

    for step in range(1, ft.steps + 1):
        if cursor + batch > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + batch]
        cursor += batch

        keys, values = keys_all[idx], values_all[idx]
        signals = one_hot(values, weights.shape[0]) - softmax(keys @ weights.T)
        weights = weights + ft.lr * (signals.T @ keys / batch - ft.alpha * weights)

        if step % eval_every == 0 or step == ft.steps:
            if not np.all(np.isfinite(weights)):
                logger.warning("finetune_full lr=%g alpha=%g diverged at step %d", ft.lr, ft.alpha, step)
                break
            ppl = validation_ppl(Projection(weights), val)
            logger.debug("finetune_full step %d: validation PPL %.4f", step, ppl)
            if ppl < best_ppl:
                best_weights, best_ppl, stale = weights.copy(), ppl, 0
            else:
                stale += 1
                if patience is not None and stale >= patience:
                    logger.debug("finetune_full: validation PPL plateaued at step %d", step)
                    break

    return Projection(best_weights)


def grid_search(
    proj: Projection,
    pairs: ContextPairs,
    val: ContextPairs,
    grid: GridSpec | None = None,
    steps: int = 500,
    batch: int = 64,
    strategy: str = "full",
    eval_every: int = EVAL_EVERY,
    seed: int = 0,
    parallel: bool = False,
    max_workers: int | None = None,
) -> tuple[FtHyper, float]:
    """
    Select the learning rate and l2 coefficient of :func:`finetune_full` by validation perplexity.

    Parameters
    ----------
    proj : Projection
        Initial weights.
    pairs, val : ContextPairs
        Training and validation corpora.
    grid : GridSpec, optional
        Candidates; defaults to the full 36 x 8 grid.
    steps, batch : int, optional
        Training length and batch size of every run.
    strategy : str, optional
        ``"full"`` evaluates every (lr, alpha) pair. ``"staged"`` first picks the learning rate
        with the first alpha candidate, then picks alpha at that learning rate.
    eval_every : int, optional
        Validation interval forwarded to :func:`finetune_full`.
    seed : int, optional
        Batch-order seed shared by every run.
    parallel : bool, optional
        Run the grid cells in a thread pool.
    max_workers : int, optional
        Pool size when ``parallel`` is True.

    Returns
    -------
    tuple of (FtHyper, float)
        Best settings and their validation perplexity. Ties keep the earliest cell in
        lr-major, then alpha, order.
    """
    grid = grid or GridSpec()
    if strategy not in ("full", "staged"):
        raise ValueError(f"Unknown grid-search strategy '{strategy}'")

    def evaluate(cells: list[FtHyper]) -> list[float]:
        def run(ft: FtHyper) -> float:
            tuned = finetune_full(proj, pairs, ft, val, eval_every=eval_every, seed=seed)
            ppl = validation_ppl(tuned, val)
            logger.debug("grid lr=%g alpha=%g: validation PPL %.4f", ft.lr, ft.alpha, ppl)
            return ppl

        if parallel:
            with ThreadPoolExecutor(max_workers=max_workers) as executor:
                return list(executor.map(run, cells))
        return [run(ft) for ft in cells]

    def cell(lr: float, alpha: float) -> FtHyper:
        return FtHyper(lr=lr, alpha=alpha, steps=steps, batch=batch)

    logger.info("Grid search over %d learning rates and %d alphas (%s)...",
                len(grid.lr_candidates), len(grid.alpha_candidates), strategy)
    if strategy == "full":
        cells = [cell(lr, alpha) for lr in grid.lr_candidates for alpha in grid.alpha_candidates]
    else:
        lr_cells = [cell(lr, grid.alpha_candidates[0]) for lr in grid.lr_candidates]
        lr_ppls = evaluate(lr_cells)
        best_lr = lr_cells[int(np.argmin(lr_ppls))].lr
        cells = [cell(best_lr, alpha) for alpha in grid.alpha_candidates]

    ppls = evaluate(cells)
    best = int(np.argmin(ppls))
    logger.info("    Selected lr=%g, alpha=%g with validation PPL %.4f", cells[best].lr, cells[best].alpha, ppls[best])
    return cells[best], float(ppls[best])


def per_step_lr_search(
    proj: Projection,
    ds: Datastore,
    hyper: Hyper,
    val_steps: Sequence[tuple[np.ndarray, int]],
    lr_candidates: Sequence[float] | None = None,
    alpha: float = 0.0,
    updates: int = 1,
) -> tuple[float, float]:
    """
    Select the learning rate of :func:`finetune_per_step` by validation perplexity.

    Returns
    -------
    tuple of (float, float)
        Best learning rate and its validation perplexity; ties keep the earlier candidate.
    """
    lr_candidates = list(lr_candidates) if lr_candidates is not None else default_lr_grid()
    if not lr_candidates:
        raise ValueError("per_step_lr_search needs at least one learning rate")
    results = []
    for lr in lr_candidates:
        scored = finetune_per_step(proj, ds, hyper, val_steps, FtHyper(lr=lr, alpha=alpha, steps=updates))
        ppl = float(np.exp(-np.mean([t.log_p_gold for t in scored])))
        results.append(ppl)
    best = int(np.argmin(results))
    logger.info("Per-step OPL-FT: selected lr=%g with validation PPL %.4f", lr_candidates[best], results[best])
    return float(lr_candidates[best]), float(results[best])


def _random_problem(rng: np.random.Generator, max_dim: int, max_vocab: int, max_k: int):
    dim = int(rng.integers(1, max_dim + 1))
    vocab_size = int(rng.integers(2, max_vocab + 1))
    k = int(rng.integers(1, max_k + 1))
    proj = Projection(rng.normal(scale=0.5, size=(vocab_size, dim)))
    ds = Datastore.from_arrays(rng.normal(size=(k, dim)), rng.integers(0, vocab_size, size=k), vocab_size)
    return proj, ds.search(rng.normal(size=dim), k, Metric.INNER_PRODUCT)


def grad_check_trials(
    trials: int = 100,
    seed: int = 0,
    epsilon: float = 1e-5,
    alphas: Sequence[float] = (0.0, 0.1, 1.0),
    max_dim: int = 16,
    max_vocab: int = 32,
    max_k: int = 8,
) -> pd.DataFrame:
    """
    Compare :func:`opl_gradient` with :func:`fd_gradient` on seeded random instances.

    Returns
    -------
    pd.DataFrame
        One row per trial with columns ``seed, trial, d_in, vocab_size, k, alpha, epsilon,
        max_abs_error, max_rel_error``. Relative error is ``|a - n| / max(1, |a|, |n|)``, so entries
        below one in magnitude are held to the same bound in absolute terms.
    """
    rows = []
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        alpha = float(alphas[i % len(alphas)])
        proj, nbrs = _random_problem(rng, max_dim, max_vocab, max_k)
        analytic = opl_gradient(proj, nbrs, alpha).delta
        numeric = fd_gradient(proj, nbrs, alpha, epsilon).delta
        rows.append(
            {
                "seed": seed,
                "trial": i,
                "d_in": proj.dim,
                "vocab_size": proj.vocab_size,
                "k": len(nbrs),
                "alpha": alpha,
                "epsilon": epsilon,
                "max_abs_error": float(np.abs(analytic - numeric).max()),
                "max_rel_error": float(relative_error(analytic, numeric).max()),
            }
        )
    table = pd.DataFrame(rows)
    worst = table["max_rel_error"].max() if rows else 0.0
    logger.info("Gradient check: %d trials, max relative error %.3e", trials, worst)
    return table


def fd_convergence_ratio(proj: Projection, nbrs: NeighborSet, alpha: float = 0.0, epsilon: float = 1e-2) -> float:
    """
    Richardson check of the central differences: the ratio of the maximum absolute error at
    ``epsilon`` to that at ``epsilon / 2``. Second-order truncation makes it close to 4 when
    ``epsilon`` is small enough for truncation to dominate rounding.

    Raises
    ------
    NumericError
        If the finite differences at ``epsilon / 2`` are exact, leaving no truncation error to compare.
    """
    analytic = opl_gradient(proj, nbrs, alpha).delta
    coarse = np.abs(fd_gradient(proj, nbrs, alpha, epsilon).delta - analytic).max()
    fine = np.abs(fd_gradient(proj, nbrs, alpha, epsilon / 2).delta - analytic).max()
    if fine == 0.0:
        raise NumericError(f"Central differences at epsilon={epsilon / 2:g} match the gradient exactly")
    return float(coarse / fine)
