import math

import numpy as np
import pytest

from metaknn.contexts import ContextPairs
from metaknn.datastore import Datastore
from metaknn.exceptions import NumericError
from metaknn.finetune import (
    FtHyper,
    GridSpec,
    fd_convergence_ratio,
    fd_gradient,
    finetune_full,
    finetune_per_step,
    grad_check_trials,
    grid_search,
    opl_gradient,
    opl_loss,
    per_step_lr_search,
    sgd_step,
    validation_ppl,
)
from metaknn.meta_optimizer import GradKind
from metaknn.prediction import Hyper, Projection, Variant, score_sequence


@pytest.fixture
def neighbors():
    """Five neighbors over a 4-token vocabulary in 3 dimensions."""
    rng = np.random.default_rng(7)
    ds = Datastore.from_arrays(rng.normal(size=(5, 3)), np.array([0, 1, 1, 3, 2]), 4)
    return ds.search(rng.normal(size=3), 5)


@pytest.fixture
def projection():
    return Projection(np.random.default_rng(8).normal(scale=0.5, size=(4, 3)))


def _separable_corpus(rng, n_per_class, vocab_size=4, dim=4, sep=3.0):
    means = sep * np.eye(vocab_size, dim)
    tokens = np.repeat(np.arange(vocab_size), n_per_class)
    rng.shuffle(tokens)
    vectors = means[tokens] + 0.5 * rng.normal(size=(len(tokens), dim))
    sequences = [(vectors[i : i + 8], tokens[i : i + 8]) for i in range(0, len(tokens), 8)]
    return ContextPairs.from_sequences(sequences, vocab_size, dim)


@pytest.fixture
def corpora():
    rng = np.random.default_rng(0)
    return _separable_corpus(rng, 100), _separable_corpus(rng, 20)


class TestHyperParameters:
    def test_ft_hyper_defaults(self):
        ft = FtHyper()
        assert (ft.lr, ft.alpha, ft.steps, ft.batch) == (4e-3, 0.0, 1, 64)

    @pytest.mark.parametrize(
        "kwargs, match",
        [({"lr": 0.0}, "Learning rate"), ({"alpha": -1.0}, "alpha"), ({"steps": -1}, "steps"), ({"batch": 0}, "batch")],
    )
    def test_ft_hyper_invalid(self, kwargs, match):
        with pytest.raises(ValueError, match=match):
            FtHyper(**kwargs)

    def test_default_grid_size(self):
        grid = GridSpec()
        assert len(grid.lr_candidates) == 36
        assert len(grid.alpha_candidates) == 8
        assert len(grid) == 288
        assert grid.lr_candidates[:3] == (0.1, 0.2, 0.3)
        assert grid.lr_candidates[-1] == 9e-4

    def test_empty_grid(self):
        with pytest.raises(ValueError, match="at least one"):
            GridSpec(lr_candidates=())


class TestGradient:
    def test_analytic_matches_finite_differences(self, projection, neighbors):
        for alpha in (0.0, 0.1, 1.0):
            analytic = opl_gradient(projection, neighbors, alpha)
            numeric = fd_gradient(projection, neighbors, alpha)
            assert analytic.kind is GradKind.ANALYTIC
            assert numeric.kind is GradKind.NUMERIC
            np.testing.assert_allclose(analytic.delta, numeric.delta, rtol=1e-6, atol=1e-6)

    def test_zero_weights_two_neighbors(self):
        ds = Datastore.build([([1.0, 0.0], 0), ([0.0, 1.0], 1)], dim=2, vocab_size=2)
        nbrs = ds.search(np.array([1.0, 1.0]), 2)
        grad = opl_gradient(Projection.zeros(2, 2), nbrs)
        np.testing.assert_allclose(grad.delta, [[0.5, -0.5], [-0.5, 0.5]])

    def test_loss_at_zero_weights(self, neighbors):
        assert opl_loss(Projection.zeros(4, 3), neighbors) == pytest.approx(-5 * math.log(4))

    def test_l2_penalty(self, projection, neighbors):
        gap = opl_loss(projection, neighbors, 0.0) - opl_loss(projection, neighbors, 2.0)
        assert gap == pytest.approx(float(np.sum(projection.weights**2)))

    def test_bad_alpha(self, projection, neighbors):
        with pytest.raises(ValueError, match="alpha"):
            opl_gradient(projection, neighbors, alpha=-0.5)

    def test_bad_epsilon(self, projection, neighbors):
        with pytest.raises(ValueError, match="epsilon"):
            fd_gradient(projection, neighbors, epsilon=0.0)

    def test_richardson_ratio(self, projection, neighbors):
        assert 3.5 <= fd_convergence_ratio(projection, neighbors, alpha=0.1) <= 4.5

    def test_richardson_ratio_needs_truncation_error(self):
        ds = Datastore.from_arrays(np.array([[1.0, 0.0, 2.0], [0.5, -1.0, 0.0]]), np.zeros(2, dtype=int), 1)
        nbrs = ds.search(np.ones(3), 2)
        with pytest.raises(NumericError, match="exactly"):
            fd_convergence_ratio(Projection(np.array([[0.2, -0.1, 0.4]])), nbrs)

    def test_vocabulary_sums_vanish_without_penalty(self, projection, neighbors):
        delta = opl_gradient(projection, neighbors, alpha=0.0).delta
        np.testing.assert_allclose(delta.sum(axis=0), np.zeros(3), atol=1e-12)

    def test_loss_non_increasing_in_alpha(self, projection, neighbors):
        losses = [opl_loss(projection, neighbors, alpha) for alpha in (0.0, 0.01, 0.1, 1.0, 10.0)]
        assert np.all(np.diff(losses) <= 0)

    def test_grad_check_trials(self):
        table = grad_check_trials(trials=100, seed=0)
        assert len(table) == 100
        assert table["max_rel_error"].max() <= 1e-5
        assert (table["max_abs_error"] >= 0).all()
        assert set(table["alpha"]) == {0.0, 0.1, 1.0}
        assert table["d_in"].max() <= 16 and table["vocab_size"].max() <= 32 and table["k"].max() <= 8


class TestUpdate:
    def test_zero_learning_rate_is_identity(self, projection, neighbors):
        assert sgd_step(projection, opl_gradient(projection, neighbors), 0.0) is projection

    def test_ascent_increases_loss(self, projection, neighbors):
        grad = opl_gradient(projection, neighbors, 0.1)
        updated = sgd_step(projection, grad, 1e-3)
        assert opl_loss(updated, neighbors, 0.1) > opl_loss(projection, neighbors, 0.1)

    @pytest.mark.parametrize("seed", range(5))
    def test_tiny_step_increases_loss(self, seed):
        rng = np.random.default_rng(seed)
        ds = Datastore.from_arrays(rng.normal(size=(6, 5)), rng.integers(0, 7, size=6), 7)
        nbrs = ds.search(rng.normal(size=5), 6)
        proj = Projection(rng.normal(scale=0.5, size=(7, 5)))
        updated = sgd_step(proj, opl_gradient(proj, nbrs, 0.1), 1e-6)
        assert opl_loss(updated, nbrs, 0.1) > opl_loss(proj, nbrs, 0.1)

    def test_shape_mismatch(self, projection, neighbors):
        grad = opl_gradient(projection, neighbors)
        with pytest.raises(ValueError, match="does not match"):
            sgd_step(Projection.zeros(5, 3), grad, 0.1)


class TestPerStep:
    def test_zero_updates_equal_nmt(self, projection):
        rng = np.random.default_rng(2)
        ds = Datastore.from_arrays(rng.normal(size=(50, 3)), rng.integers(0, 4, size=50), 4)
        steps = [(rng.normal(size=3), int(rng.integers(0, 4))) for _ in range(10)]
        tuned = finetune_per_step(projection, ds, Hyper(k=4), steps, FtHyper(lr=0.1, steps=0))
        nmt = score_sequence(projection, ds, Hyper(k=4), steps, Variant.NMT)
        np.testing.assert_allclose([t.p_gold for t in tuned], [t.p_gold for t in nmt])

    def test_neighbors_sharing_gold_raise_its_probability(self, projection):
        query = np.array([0.4, -0.3, 0.8])
        ds = Datastore.from_arrays(np.tile(query, (6, 1)), np.full(6, 2), 4)
        steps = [(query, 2)]
        before = finetune_per_step(projection, ds, Hyper(k=6), steps, FtHyper(lr=0.1, steps=0))
        after = finetune_per_step(projection, ds, Hyper(k=6), steps, FtHyper(lr=0.1, steps=1))
        assert after[0].p_gold > before[0].p_gold

    def test_two_token_update_arithmetic(self):
        # One neighbor (key 1, token 0) and query 0.5: one step widens the weight gap by 2 * lr * (1 - p).
        ds = Datastore.from_arrays(np.array([[1.0]]), np.array([0]), 2)
        proj = Projection(np.array([[0.3], [-0.2]]))
        scored = finetune_per_step(proj, ds, Hyper(k=1), [(np.array([0.5]), 0)], FtHyper(lr=0.5, steps=1))
        p_neighbor = 1.0 / (1.0 + math.exp(-0.5))
        gap = 0.5 * (0.5 + 2 * 0.5 * (1.0 - p_neighbor))
        assert scored[0].p_gold == pytest.approx(1.0 / (1.0 + math.exp(-gap)), rel=1e-12)

    def test_weights_reset_between_steps(self, projection):
        rng = np.random.default_rng(3)
        ds = Datastore.from_arrays(rng.normal(size=(50, 3)), rng.integers(0, 4, size=50), 4)
        steps = [(rng.normal(size=3), int(rng.integers(0, 4))) for _ in range(6)]
        ft = FtHyper(lr=0.05, steps=2)
        together = finetune_per_step(projection, ds, Hyper(k=4), steps, ft)
        alone = finetune_per_step(projection, ds, Hyper(k=4), steps[3:4], ft)
        assert together[3].p_gold == alone[0].p_gold

    def test_lr_search_picks_candidate(self, projection):
        rng = np.random.default_rng(4)
        ds = Datastore.from_arrays(rng.normal(size=(50, 3)), rng.integers(0, 4, size=50), 4)
        steps = [(rng.normal(size=3), int(rng.integers(0, 4))) for _ in range(10)]
        lr, ppl = per_step_lr_search(projection, ds, Hyper(k=4), steps, [1e-3, 1e-2, 1e-1])
        assert lr in (1e-3, 1e-2, 1e-1)
        assert ppl > 1.0


class TestFullFinetune:
    def test_zero_steps_keep_weights(self, corpora):
        train, val = corpora
        tuned = finetune_full(Projection.zeros(4, 4), train, FtHyper(lr=0.1, steps=0), val)
        np.testing.assert_array_equal(tuned.weights, np.zeros((4, 4)))
        assert validation_ppl(tuned, val) == pytest.approx(4.0)

    def test_training_reduces_perplexity(self, corpora):
        train, val = corpora
        tuned = finetune_full(Projection.zeros(4, 4), train, FtHyper(lr=0.1, steps=300, batch=32), val)
        assert validation_ppl(tuned, val) < 2.0

    def test_deterministic_under_seed(self, corpora):
        train, val = corpora
        ft = FtHyper(lr=0.1, steps=60, batch=16)
        first = finetune_full(Projection.zeros(4, 4), train, ft, val, eval_every=10, seed=5)
        second = finetune_full(Projection.zeros(4, 4), train, ft, val, eval_every=10, seed=5)
        np.testing.assert_array_equal(first.weights, second.weights)

    def test_never_worse_than_start(self, corpora):
        train, val = corpora
        start = finetune_full(Projection.zeros(4, 4), train, FtHyper(lr=0.1, steps=200), val)
        tuned = finetune_full(start, train, FtHyper(lr=9.0, alpha=10.0, steps=100), val)
        assert validation_ppl(tuned, val) <= validation_ppl(start, val)

    def test_patience_stops_early(self, corpora):
        train, val = corpora
        tuned = finetune_full(Projection.zeros(4, 4), train, FtHyper(lr=0.1, steps=5000), val, patience=2)
        assert validation_ppl(tuned, val) < 2.0

    def test_single_pair_is_memorized(self):
        pair = ContextPairs.from_sequences([(np.array([[1.0, 0.5]]), np.array([1]))], vocab_size=3, dim=2)
        tuned = finetune_full(Projection.zeros(3, 2), pair, FtHyper(lr=1.0, steps=2000, batch=1), pair)
        assert validation_ppl(tuned, pair) < 1.01

    def test_empty_training_corpus(self, corpora):
        _, val = corpora
        empty = ContextPairs.from_sequences([], vocab_size=4, dim=4)
        with pytest.raises(ValueError, match="nonempty training corpus"):
            finetune_full(Projection.zeros(4, 4), empty, FtHyper(), val)


class TestGridSearch:
    @pytest.mark.parametrize("strategy", ["full", "staged"])
    def test_selects_from_grid(self, corpora, strategy):
        train, val = corpora
        grid = GridSpec(lr_candidates=(1e-3, 1e-1), alpha_candidates=(0.0, 10.0))
        ft, ppl = grid_search(Projection.zeros(4, 4), train, val, grid, steps=100, batch=32, strategy=strategy)
        assert ft.lr == 1e-1
        assert ft.alpha == 0.0
        assert ppl == pytest.approx(validation_ppl(finetune_full(Projection.zeros(4, 4), train, ft, val), val))

    def test_parallel_matches_serial(self, corpora):
        train, val = corpora
        grid = GridSpec(lr_candidates=(1e-2, 1e-1), alpha_candidates=(0.0, 0.1))
        serial = grid_search(Projection.zeros(4, 4), train, val, grid, steps=50, batch=32)
        parallel = grid_search(
            Projection.zeros(4, 4), train, val, grid, steps=50, batch=32, parallel=True, max_workers=2
        )
        assert serial == parallel

    def test_ties_keep_first_cell(self, corpora):
        train, val = corpora
        grid = GridSpec(lr_candidates=(0.3, 0.1), alpha_candidates=(0.5, 0.0))
        ft, ppl = grid_search(Projection.zeros(4, 4), train, val, grid, steps=0)
        assert (ft.lr, ft.alpha) == (0.3, 0.5)
        assert ppl == pytest.approx(4.0)

    def test_unknown_strategy(self, corpora):
        train, val = corpora
        with pytest.raises(ValueError, match="strategy"):
            grid_search(Projection.zeros(4, 4), train, val, strategy="random")
