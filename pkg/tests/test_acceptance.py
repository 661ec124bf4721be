"""Release gates, one test per numbered contract.

Covers, in order: the closed-form likelihood term against Monte Carlo,
gradients against finite differences, the log-intensity MGF against
sampling plus its domain guard, both KL terms against a dense Gaussian
oracle, the prior sampler against its analytic covariance, transfer
gains from shared latents on the four-task synthetic, recovery of known
intensities from simulated counts, interval calibration, and
byte-identical command line reruns. Each test pins its own tolerances
and, where promised, a wall-clock budget; pytest -v prints one
pass/fail line per contract.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from mcpm.cli import main
from mcpm.data import CountGrid, GridSpec, apply_fold, generate_s1, make_folds
from mcpm.elbo import (
    MGF_DOMAIN_EPS,
    ell_closed_form,
    ell_monte_carlo,
    kl_u,
    kl_w,
    mgf_log_intensity,
)
from mcpm.exceptions import MgfDomainError
from mcpm.kernels import KernelSpec, chol_jitter, chol_ladder, gram
from mcpm.metrics import empirical_coverage, nlpl, rmse
from mcpm.model import (
    BaselineMode,
    CoupledWeights,
    ModelConfig,
    factor_from_raw,
    init_state,
    latent_chols,
    prior_log_intensity_cov,
    raw_from_factor,
    sample_prior_counts,
    sample_prior_log_intensities,
)
from mcpm.predict import intensity_mean_var, sample_intensities
from mcpm.trainer import TrainConfig, fit

from test_elbo import moments, prior_state, random_instance
from test_trainer import assert_grad_matches_fd


def test_01_closed_form_ell_matches_monte_carlo():
    start = time.perf_counter()
    for i in range(20):
        rng = np.random.default_rng([600, i])
        st, batch, _ = random_instance(
            1000 + i,
            num_cells=int(rng.integers(3, 11)),
            num_tasks=int(rng.integers(1, 5)),
            num_latents=int(rng.integers(1, 4)),
            coupled=bool(i % 4 == 1),
            missing=0.2,
        )
        closed = ell_closed_form(st, batch)
        est, se = ell_monte_carlo(st, batch, 100_000, seed=i)
        assert se > 0
        assert abs(closed - est) <= 3.0 * se, (
            f"instance {i}: closed {closed:.4f} vs monte carlo {est:.4f} (se {se:.4f})"
        )
    assert time.perf_counter() - start < 60.0


def test_02_gradient_matches_finite_differences():
    start = time.perf_counter()
    cases = [
        dict(),
        dict(coupled=True),
        dict(baseline_mode=BaselineMode.LGCP),
        dict(baseline_mode=BaselineMode.ICM_LIMIT),
        dict(baseline_mode=BaselineMode.ICM_LIMIT, coupled=True),
        dict(coupled=True, num_latents=1),
        dict(num_latents=3),
        dict(baseline_mode=BaselineMode.LGCP, num_tasks=3),
        dict(coupled=True, num_tasks=3),
        dict(num_tasks=1, num_latents=1),
    ]
    for i, kwargs in enumerate(cases):
        st, batch, _ = random_instance(
            2000 + i,
            num_cells=4,
            num_tasks=kwargs.pop("num_tasks", 2),
            num_latents=kwargs.pop("num_latents", 2),
            **kwargs,
        )
        assert_grad_matches_fd(st, batch, batch.num_cells)
    assert time.perf_counter() - start < 120.0


def test_03_mgf_matches_monte_carlo_and_guards_domain():
    start = time.perf_counter()
    for t in (1.0, 2.0):
        for i in range(10):
            rng = np.random.default_rng([300, int(t), i])
            q = int(rng.integers(1, 4))
            g = rng.uniform(-0.8, 0.8, q)
            vw = rng.uniform(0.02, 0.2, q)
            m = rng.uniform(-0.8, 0.8, q)
            vf = rng.uniform(0.02, 0.2, q)
            assert np.all(1.0 - t**2 * vw * vf > 0.3)  # well inside the domain
            value = mgf_log_intensity(moments(g, vw), moments(m, vf), t)
            w = g + np.sqrt(vw) * rng.standard_normal((1_000_000, q))
            f = m + np.sqrt(vf) * rng.standard_normal((1_000_000, q))
            sample = np.exp(t * np.sum(w * f, axis=1))
            est = sample.mean()
            se = sample.std(ddof=1) / 1000.0
            assert abs(value - est) <= 3.0 * se, (
                f"t={t} set {i}: mgf {value:.5f} vs monte carlo {est:.5f} (se {se:.5f})"
            )
    # the guard trips exactly at denom <= eps, on either side of the line
    for t in (1.0, 2.0):
        for delta in (0.0, 1e-9, -1e-9, 1e-7, -1e-7, 0.3, -0.3):
            vw = 0.5
            vf = (1.0 - MGF_DOMAIN_EPS - delta) / (t**2 * vw)
            denom = 1.0 - t**2 * vw * vf
            if denom <= MGF_DOMAIN_EPS:
                with pytest.raises(MgfDomainError):
                    mgf_log_intensity(moments([0.1], [vw]), moments([0.2], [vf]), t)
            else:
                with np.errstate(over="ignore"):  # hugging the boundary overflows
                    mgf_log_intensity(moments([0.1], [vw]), moments([0.2], [vf]), t)
    assert time.perf_counter() - start < 60.0


def _gauss_kl(mean0, cov0, cov1):
    """KL(N(mean0, cov0) || N(0, cov1)) by dense linear algebra."""
    k = mean0.size
    trace = float(np.trace(np.linalg.solve(cov1, cov0)))
    quad_term = float(mean0 @ np.linalg.solve(cov1, mean0))
    _, logdet1 = np.linalg.slogdet(cov1)
    _, logdet0 = np.linalg.slogdet(cov0)
    return 0.5 * (trace + quad_term - k + logdet1 - logdet0)


def _state_latent_spec(st, q):
    return KernelSpec(
        st.config.latent_kernel.family,
        variance=float(np.exp(st.log_latent_variance[q])),
        lengthscales=tuple(np.exp(np.asarray(st.log_latent_lengthscales[q]))),
    )


def test_04_kl_terms_match_dense_gaussian_oracle():
    for seed in range(5):
        coupled = bool(seed % 2)
        st, _, _ = random_instance(4000 + seed, num_cells=6, num_tasks=3, coupled=coupled)

        expect_u = 0.0
        for q, (_, jitter) in enumerate(latent_chols(st)):
            kzz = np.asarray(gram(_state_latent_spec(st, q), st.z[q]).values)
            prior_cov = kzz + float(jitter) * np.eye(kzz.shape[0])
            s_factor = np.asarray(factor_from_raw(st.u_cov_factor[q]))
            expect_u -= _gauss_kl(np.asarray(st.u_mean[q]), s_factor @ s_factor.T, prior_cov)
        assert kl_u(st) == pytest.approx(expect_u, abs=1e-8)

        expect_w = 0.0
        if coupled:
            desc = np.asarray(st.config.weight_prior.descriptors_array())
            for q in range(st.num_latents):
                spec_w = KernelSpec(
                    st.config.weight_prior.weight_kernel.family,
                    variance=float(np.exp(st.log_weight_variance[q])),
                    lengthscales=tuple(np.exp(np.asarray(st.log_weight_lengthscales[q]))),
                )
                gram_w = np.asarray(gram(spec_w, desc).values)
                _, jit_w = chol_ladder(gram_w, try_exact=True)
                prior_cov = gram_w + float(jit_w) * np.eye(st.num_tasks)
                fac = np.asarray(factor_from_raw(st.w_cov[q]))
                expect_w -= _gauss_kl(np.asarray(st.w_mean[q]), fac @ fac.T, prior_cov)
        else:
            gamma = st.config.weight_prior.means_array().T
            kappa = st.config.weight_prior.vars_array().T
            omega = np.asarray(st.w_mean)
            var_post = np.exp(np.asarray(st.w_cov))
            for q in range(st.num_latents):
                for p in range(st.num_tasks):
                    expect_w -= _gauss_kl(
                        np.array([omega[q, p] - gamma[q, p]]),
                        np.array([[var_post[q, p]]]),
                        np.array([[kappa[q, p]]]),
                    )
        assert kl_w(st) == pytest.approx(expect_w, abs=1e-8)

    # both terms vanish when the posterior sits at the prior
    st, _ = prior_state()
    assert kl_u(st) == pytest.approx(0.0, abs=1e-10)
    st.w_mean = st.config.weight_prior.means_array().T.copy()
    st.w_cov = np.log(st.config.weight_prior.vars_array().T)
    assert kl_w(st) == pytest.approx(0.0, abs=1e-10)

    st, _ = prior_state(
        weight_prior=CoupledWeights(
            task_descriptors=((0.0, 0.0), (1.0, 0.2), (0.4, 1.0)),
            weight_kernel=KernelSpec(lengthscales=(1.0, 1.0)),
        )
    )
    st.w_mean = np.zeros_like(st.w_mean)
    desc = np.asarray(st.config.weight_prior.descriptors_array())
    for q in range(st.num_latents):
        spec_w = KernelSpec(
            st.config.weight_prior.weight_kernel.family,
            variance=float(np.exp(st.log_weight_variance[q])),
            lengthscales=tuple(np.exp(np.asarray(st.log_weight_lengthscales[q]))),
        )
        factor, _ = chol_ladder(np.asarray(gram(spec_w, desc).values), try_exact=True)
        st.w_cov[q] = raw_from_factor(np.asarray(factor))
    assert kl_w(st) == pytest.approx(0.0, abs=1e-10)

    st, _, _ = random_instance(4100, baseline_mode=BaselineMode.LGCP)
    assert kl_w(st) == 0.0


def test_05_prior_sampler_matches_analytic_covariance():
    cfg = ModelConfig(
        num_latents=2,
        num_tasks=2,
        latent_kernel=KernelSpec(lengthscales=(0.35, 0.35)),
        weight_prior=CoupledWeights(
            task_descriptors=((0.0, 0.0), (1.0, 0.5)),
            weight_kernel=KernelSpec(variance=0.8, lengthscales=(1.2, 1.2)),
        ),
    )
    rng = np.random.default_rng(50)
    x = rng.uniform(0.0, 1.0, size=(5, 2))
    draws = sample_prior_log_intensities(cfg, x, 50_000, seed=0)
    flat = draws.transpose(0, 2, 1).reshape(draws.shape[0], -1)  # task-major
    emp = np.cov(flat, rowvar=False)
    want = prior_log_intensity_cov(cfg, x)
    # weight-latent products are heavier tailed than a Gaussian, so take
    # the standard error from the empirical fourth moments
    centered = flat - flat.mean(axis=0)
    prod = centered[:, :, None] * centered[:, None, :]
    se = prod.std(axis=0, ddof=1) / np.sqrt(flat.shape[0])
    worst = np.max(np.abs(emp - want) / se)
    assert worst <= 3.0, f"worst covariance entry off by {worst:.2f} standard errors"


def test_06_shared_latents_beat_per_task_baseline():
    start = time.perf_counter()
    mixing = ModelConfig(
        num_latents=2, num_tasks=4, num_inducing=60,
        latent_kernel=KernelSpec(lengthscales=(0.1, 0.1)),
    )
    per_task = ModelConfig(
        num_latents=4, num_tasks=4, num_inducing=60,
        baseline_mode=BaselineMode.LGCP,
        latent_kernel=KernelSpec(lengthscales=(0.1, 0.1)),
    )
    tc = TrainConfig(learning_rate=0.05, epochs=60, seed=0)
    scores = {"mixing": [], "per_task": []}
    for seed in range(3):
        sim = generate_s1(seed)
        folds = make_folds(sim.grid.grid, 4, 4, seed=seed)
        for fold_id in range(folds.num_folds):
            masked = apply_fold(sim.grid, folds, fold_id)
            for name, cfg in (("mixing", mixing), ("per_task", per_task)):
                st, _ = fit(cfg, tc, masked)
                draws = sample_intensities(st, sim.grid.centroids, 300, seed=fold_id)
                scores[name].append([
                    nlpl(draws[:, p, ~masked.observed[:, p]],
                         sim.grid.counts[~masked.observed[:, p], p])
                    for p in range(4)
                ])
    mean_mixing = np.mean(scores["mixing"], axis=0)
    mean_per_task = np.mean(scores["per_task"], axis=0)
    wins = int(np.sum(mean_mixing < mean_per_task))
    assert wins >= 3, (
        f"shared latents won {wins}/4 tasks "
        f"(mixing {mean_mixing.round(3)}, per-task {mean_per_task.round(3)})"
    )
    assert time.perf_counter() - start < 900.0


def test_07_recovers_intensities_from_simulated_counts():
    grid_spec = GridSpec(bounds=((0.0, 1.0), (0.0, 1.0)), cells_per_dim=(10, 10))
    generator = ModelConfig(
        num_latents=2, num_tasks=3,
        latent_kernel=KernelSpec(lengthscales=(0.3, 0.3)),
    )
    fit_cfg = ModelConfig(
        num_latents=2, num_tasks=3, num_inducing=100,
        latent_kernel=KernelSpec(lengthscales=(0.25, 0.25)),
    )
    offsets = np.log(10.0) * np.ones(3)
    tc = TrainConfig(learning_rate=0.05, epochs=150, batch_size=25, seed=0)
    for seed in (3, 7, 8):
        sample = sample_prior_counts(generator, grid_spec.centroids(), seed, offsets=offsets)
        grid = replace(sample.grid, grid=grid_spec)
        st, _ = fit(fit_cfg, tc, grid)
        pred = intensity_mean_var(st, grid.centroids)
        for p in range(3):
            truth = sample.intensity[:, p]
            model_err = rmse(pred.mean[p], truth)
            const_err = rmse(np.full_like(truth, grid.counts[:, p].mean()), truth)
            assert model_err < const_err, (
                f"seed {seed} task {p}: rmse {model_err:.3f} vs constant {const_err:.3f}"
            )


def test_08_interval_coverage_is_calibrated():
    grid_spec = GridSpec(bounds=((0.0, 1.0), (0.0, 1.0)), cells_per_dim=(8, 8))
    x = grid_spec.centroids()
    cfg = ModelConfig(
        num_latents=1, num_tasks=1, num_inducing=x.shape[0],
        latent_kernel=KernelSpec(lengthscales=(0.25, 0.25)),
        fixed_weights=((1.0,),),
    )
    factor, _ = chol_jitter(gram(cfg.latent_kernel, x))
    values = []
    for rep in range(20):
        rng = np.random.default_rng([911, rep])
        f = factor @ rng.standard_normal(x.shape[0])
        counts = rng.poisson(np.exp(f))[:, None]
        grid = CountGrid(counts=counts, centroids=x,
                         observed=np.ones_like(counts, dtype=bool), grid=grid_spec)
        st = init_state(cfg, grid, seed=0)
        st.z[0] = x.copy()
        st.u_mean[:] = 0.0
        st.u_cov_factor[0] = raw_from_factor(factor)
        st.offsets[:] = 0.0
        values.append(empirical_coverage(
            st, grid, "train", 0, region_cells=4,
            num_regions=100, level=0.9, seed=rep, num_count_samples=100,
        ))
    mean_cov = float(np.mean(values))
    assert 0.8 <= mean_cov <= 1.0, f"mean coverage {mean_cov:.3f} over {len(values)} reps"


def _run_cli(*argv):
    return main([str(a) for a in argv])


def _artifact_bytes(root):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_09_cli_reruns_are_byte_identical(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "model": {
            "num_latents": 1, "num_tasks": 2, "num_inducing": 12,
            "latent_kernel": {"family": "squared-exponential",
                              "variance": 1.0, "lengthscales": [0.25, 0.25]},
        },
        "train": {"learning_rate": 0.05, "epochs": 4, "seed": 1},
    }))
    sim = tmp_path / "sim"
    fit_dir = tmp_path / "fit"

    def pipeline():
        assert _run_cli("simulate", "--preset", "prior", "--q", 1, "--p", 2,
                        "--grid", 6, "--seed", 11, "--folds", 4,
                        "--out", sim, "--threads", 1) == 0
        assert _run_cli("fit", "--counts", sim / "counts.csv", "--config", cfg_path,
                        "--fold-spec", sim / "folds.json", "--fold", 0,
                        "--out", fit_dir, "--threads", 1) == 0
        assert _run_cli("predict", "--checkpoint", fit_dir / "checkpoint.json",
                        "--counts", sim / "counts.csv",
                        "--out", tmp_path / "surface.csv", "--threads", 1) == 0
        assert _run_cli("evaluate", "--checkpoint", fit_dir / "checkpoint.json",
                        "--counts", sim / "counts.csv",
                        "--fold", 0, "--fold-spec", sim / "folds.json",
                        "--cells", "missing", "--region-cells", 2,
                        "--num-regions", 10, "--intensity-samples", 60,
                        "--out", tmp_path / "report.json", "--threads", 1) == 0
        return _artifact_bytes(tmp_path)

    first = pipeline()
    second = pipeline()
    assert first and first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], f"{name} differs between identical reruns"
