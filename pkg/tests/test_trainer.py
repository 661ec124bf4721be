"""Gradient correctness against finite differences, Adam mechanics, and
the fit loop's rejection/best-state behavior."""

import numpy as np
import pytest
from jax.flatten_util import ravel_pytree

from mcpm.data import CountGrid, generate_s1
from mcpm.elbo import batch_from_grid, elbo, kl_u, kl_w
from mcpm.exceptions import TrainingFailureError
from mcpm.kernels import KernelSpec
from mcpm.model import BaselineMode, ModelConfig, init_state
from mcpm.trainer import (
    AdamMoments,
    TrainConfig,
    TrainTrace,
    adam_init,
    adam_step,
    fit,
    grad_elbo,
    trainable_mask,
)

from test_elbo import prior_state, random_instance


def flat_gradient(state, batch, total):
    grads = grad_elbo(state, batch, total)
    flat, _ = ravel_pytree(grads)
    return np.asarray(flat)


def finite_difference(state, batch, total, step=1e-5):
    flat, unravel = ravel_pytree(state)
    flat = np.asarray(flat)
    out = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        hi = elbo(unravel(bumped), batch, total)
        bumped[i] -= 2 * step
        lo = elbo(unravel(bumped), batch, total)
        out[i] = (hi - lo) / (2 * step)
    return out


def assert_grad_matches_fd(state, batch, total):
    grad = flat_gradient(state, batch, total)
    fd = finite_difference(state, batch, total)
    scale = np.maximum(np.abs(grad), np.abs(fd))
    bad = np.abs(grad - fd) > np.maximum(1e-4 * scale, 1e-7)
    assert not bad.any(), f"{bad.sum()} coordinates off; worst {np.abs(grad - fd).max():.3e}"


class TestGradElbo:
    @pytest.mark.parametrize(
        "seed,kwargs",
        [
            (0, {}),
            (1, {"coupled": True}),
            (2, {"baseline_mode": BaselineMode.LGCP}),
            (3, {"baseline_mode": BaselineMode.ICM_LIMIT}),
        ],
    )
    def test_matches_finite_differences(self, seed, kwargs):
        st, batch, _ = random_instance(seed, num_cells=5, num_tasks=2, num_latents=2, **kwargs)
        assert_grad_matches_fd(st, batch, batch.num_cells)

    def test_kl_stationary_at_prior(self):
        import jax

        from mcpm.elbo import _kl_u, _kl_w

        st, _ = prior_state()
        grads = jax.grad(lambda s: _kl_u(s) + _kl_w(s))(st)
        assert np.abs(np.asarray(grads.u_mean)).max() < 1e-10

    def test_total_observed_scales_ell_gradient(self):
        st, batch, _ = random_instance(4, num_cells=5, num_tasks=2)
        g1, _ = ravel_pytree(grad_elbo(st, batch, 10))
        g2, _ = ravel_pytree(grad_elbo(st, batch, 20))
        g0, _ = ravel_pytree(grad_elbo(st, batch, 0))
        np.testing.assert_allclose(np.asarray(g2), 2 * np.asarray(g1) - np.asarray(g0),
                                   rtol=1e-9, atol=1e-12)


class TestAdam:
    def params(self):
        return {"a": np.array([1.0, -2.0]), "b": np.array(0.5)}

    def test_zero_gradient_keeps_params(self):
        p = self.params()
        grads = {"a": np.zeros(2), "b": np.array(0.0)}
        config = TrainConfig(learning_rate=0.1)
        new_p, moments = adam_step(p, grads, adam_init(p), config)
        assert np.array_equal(np.asarray(new_p["a"]), p["a"])
        assert float(new_p["b"]) == 0.5
        assert moments.step == 1

    def test_first_step_is_signed_learning_rate(self):
        p = self.params()
        grads = {"a": np.array([0.3, -4.0]), "b": np.array(2.0)}
        config = TrainConfig(learning_rate=0.01)
        new_p, _ = adam_step(p, grads, adam_init(p), config)
        np.testing.assert_allclose(np.asarray(new_p["a"]), p["a"] - 0.01 * np.sign(grads["a"]),
                                   rtol=1e-6)
        assert float(new_p["b"]) == pytest.approx(0.5 - 0.01, rel=1e-6)

    def test_deterministic(self):
        p = self.params()
        grads = {"a": np.array([0.3, -4.0]), "b": np.array(2.0)}
        config = TrainConfig()
        out1 = adam_step(p, grads, adam_init(p), config)
        out2 = adam_step(p, grads, adam_init(p), config)
        assert np.array_equal(np.asarray(out1[0]["a"]), np.asarray(out2[0]["a"]))


class TestTrainConfig:
    def test_rejects_bad_betas(self):
        with pytest.raises(ValueError):
            TrainConfig(adam_beta1=1.0)
        with pytest.raises(ValueError):
            TrainConfig(adam_beta2=-0.1)
        TrainConfig(adam_beta1=0.0, adam_beta2=0.0)  # degenerate mode stays legal

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)


def small_fit_setup(num_cells=10, num_tasks=1, seed=0):
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0, 1, size=(num_cells, 2))
    counts = rng.poisson(2.0, size=(num_cells, num_tasks))
    grid = CountGrid(counts=counts, centroids=centroids,
                     observed=np.ones((num_cells, num_tasks), dtype=bool), grid=None)
    cfg = ModelConfig(num_latents=1, num_tasks=num_tasks, num_inducing=3,
                      latent_kernel=KernelSpec(lengthscales=(0.3, 0.3)))
    return cfg, grid


class TestFit:
    def test_tiny_rate_is_almost_monotone(self):
        cfg, grid = small_fit_setup()
        tc = TrainConfig(learning_rate=1e-4, epochs=200, seed=0)
        _, trace = fit(cfg, tc, grid)
        diffs = np.diff(trace.elbo)
        assert (diffs >= 0).mean() >= 0.95

    def test_same_seed_identical_trace(self):
        cfg, grid = small_fit_setup()
        tc = TrainConfig(epochs=30, seed=1, batch_size=4)
        _, t1 = fit(cfg, tc, grid)
        _, t2 = fit(cfg, tc, grid)
        assert t1.elbo == t2.elbo
        assert t1.grad_norm == t2.grad_norm
        assert t1.rejected_steps == t2.rejected_steps

    def test_best_state_never_below_init(self):
        cfg, grid = small_fit_setup(seed=3)
        tc = TrainConfig(epochs=25, seed=0, learning_rate=0.05)
        best, trace = fit(cfg, tc, grid)
        batch = batch_from_grid(grid)
        final = elbo(best, batch, batch.num_cells)
        assert final >= trace.elbo[0] - 1e-9
        assert final == pytest.approx(max(trace.elbo), rel=1e-9)

    def test_oversized_steps_still_finish(self):
        cfg, grid = small_fit_setup(seed=5)
        tc = TrainConfig(learning_rate=5.0, epochs=8, seed=0)
        best, trace = fit(cfg, tc, grid)
        assert np.isfinite(elbo(best, batch_from_grid(grid), 10))

    def test_minibatch_improves_on_s1(self):
        out = generate_s1(0)
        cfg = ModelConfig(num_latents=2, num_tasks=4, num_inducing=30,
                          latent_kernel=KernelSpec(lengthscales=(0.1, 0.1)))
        tc = TrainConfig(epochs=20, seed=0, batch_size=100)
        best, trace = fit(cfg, tc, out.grid)
        assert trace.elbo[-1] > trace.elbo[0]

    def test_fixed_weights_do_not_move(self):
        rng = np.random.default_rng(0)
        centroids = rng.uniform(0, 1, size=(12, 2))
        counts = rng.poisson(1.0, size=(12, 2))
        grid = CountGrid(counts=counts, centroids=centroids,
                         observed=np.ones((12, 2), dtype=bool), grid=None)
        cfg = ModelConfig(num_latents=2, num_tasks=2, num_inducing=3,
                          baseline_mode=BaselineMode.LGCP,
                          latent_kernel=KernelSpec(lengthscales=(0.3, 0.3)))
        best, _ = fit(cfg, TrainConfig(epochs=15, seed=0), grid)
        assert np.array_equal(np.asarray(best.w_mean), np.eye(2))

    def test_inducing_frozen_by_default(self):
        cfg, grid = small_fit_setup(seed=7)
        init = init_state(cfg, grid, seed=0)
        best, _ = fit(cfg, TrainConfig(epochs=10, seed=0), grid)
        assert np.array_equal(np.asarray(best.z), init.z)

    def test_inducing_move_when_enabled(self):
        cfg, grid = small_fit_setup(seed=7)
        cfg = ModelConfig(num_latents=1, num_tasks=1, num_inducing=3,
                          latent_kernel=KernelSpec(lengthscales=(0.3, 0.3)),
                          train_inducing=True)
        init = init_state(cfg, grid, seed=0)
        best, _ = fit(cfg, TrainConfig(epochs=10, seed=0), grid)
        assert not np.array_equal(np.asarray(best.z), init.z)

    def test_unobserved_task_rejected(self):
        cfg, grid = small_fit_setup(num_tasks=2)
        observed = grid.observed.copy()
        observed[:, 1] = False
        from dataclasses import replace

        with pytest.raises(ValueError, match="tasks with no observed cells"):
            fit(cfg, TrainConfig(epochs=1), replace(grid, observed=observed))

    def test_infeasible_initialization_fails_loudly(self):
        # mid lengthscales make the inducing Gram nearly singular; with the
        # 0.1 I posterior covariance the marginal variance then blows past
        # the MGF domain at every cell, so no first-epoch step can pass
        out = generate_s1(0)
        cfg = ModelConfig(num_latents=2, num_tasks=4, num_inducing=60,
                          latent_kernel=KernelSpec(lengthscales=(0.25, 0.25)))
        with pytest.raises(TrainingFailureError):
            fit(cfg, TrainConfig(epochs=2, seed=0), out.grid)

    def test_checkpoints_written(self, tmp_path):
        from mcpm.model import load_checkpoint

        cfg, grid = small_fit_setup()
        path = tmp_path / "ckpt.json"
        tc = TrainConfig(epochs=6, seed=0, checkpoint_every=3, checkpoint_path=str(path))
        fit(cfg, tc, grid)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg

    def test_convergence_stops_early(self):
        cfg, grid = small_fit_setup()
        tc = TrainConfig(epochs=1000, seed=0, convergence_window=5, convergence_rtol=1e-3)
        _, trace = fit(cfg, tc, grid)
        assert len(trace) - 1 < 1000


class TestTrace:
    def test_csv_round_trippable(self, tmp_path):
        trace = TrainTrace()
        trace.append(0, -10.5, -1.0, -0.5, -9.0, 3.25, 0.01)
        trace.append(1, -9.25, -1.1, -0.4, -7.75, 2.0, 0.011)
        trace.rejected_steps = 2
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        text = path.read_text().splitlines()
        assert text[0] == "# rejected_steps: 2"
        assert text[1] == "epoch,elbo,kl_u,kl_w,ell,grad_norm,seconds"
        row = text[2].split(",")
        assert int(row[0]) == 0
        assert float(row[1]) == -10.5

    def test_lengths_consistent(self):
        cfg, grid = small_fit_setup()
        _, trace = fit(cfg, TrainConfig(epochs=5, seed=0), grid)
        n = len(trace)
        assert n == 6  # epoch 0 baseline plus five epochs
        for name in ("elbo", "kl_u", "kl_w", "ell", "grad_norm", "seconds"):
            assert len(getattr(trace, name)) == n
