"""Tests for forces, gradient, KL, the update rule, and the full descent."""

import numpy as np
import pytest

from fftsne.affinities import SparseAffinities
from fftsne.optimizer import (
    ExaggerationSchedule,
    OptimizerState,
    TsneConfig,
    compute_attractive,
    compute_repulsive,
    gradient,
    kl_divergence,
    run_tsne,
    step,
)


def random_affinities(n, rng, density=1.0):
    iu = np.triu_indices(n, 1)
    vals = rng.random(iu[0].size)
    if density < 1.0:
        vals *= rng.random(vals.size) < density
    keep = vals > 0
    vals = vals[keep] / (2.0 * vals[keep].sum())
    return SparseAffinities(n=n, rows=iu[0][keep], cols=iu[1][keep], values=vals)


def dense_attractive_oracle(P, Y):
    full = np.zeros((P.n, P.n))
    full[P.rows, P.cols] = P.values
    full += full.T
    out = np.zeros_like(Y)
    for i in range(P.n):
        for j in range(P.n):
            if i == j or full[i, j] == 0:
                continue
            d2 = ((Y[i] - Y[j]) ** 2).sum()
            out[i] += full[i, j] / (1.0 + d2) * (Y[i] - Y[j])
    return out


def dense_kl_oracle(P, Y):
    full = np.zeros((P.n, P.n))
    full[P.rows, P.cols] = P.values
    full += full.T
    d2 = ((Y[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
    inv = 1.0 / (1.0 + d2)
    np.fill_diagonal(inv, 0.0)
    q = inv / inv.sum()
    mask = full > 0
    return float((full[mask] * np.log(full[mask] / q[mask])).sum())


class TestAttractive:
    def test_two_point_hand_value(self):
        P = SparseAffinities(n=2, rows=[0], cols=[1], values=[0.5])
        F = compute_attractive(P, np.array([[0.0], [1.0]]))
        np.testing.assert_allclose(F, [[-0.25], [0.25]])

    def test_zero_affinities_zero_forces(self):
        P = SparseAffinities(n=3, rows=[0], cols=[1], values=[0.0])
        F = compute_attractive(P, np.random.default_rng(0).standard_normal((3, 2)))
        np.testing.assert_allclose(F, 0.0)

    def test_matches_dense_double_loop(self):
        rng = np.random.default_rng(1)
        P = random_affinities(100, rng, density=0.3)
        Y = rng.standard_normal((100, 2))
        np.testing.assert_allclose(
            compute_attractive(P, Y), dense_attractive_oracle(P, Y), atol=1e-12
        )

    def test_shape_mismatch_rejected(self):
        P = SparseAffinities(n=2, rows=[0], cols=[1], values=[0.5])
        with pytest.raises(ValueError):
            compute_attractive(P, np.zeros((3, 2)))


class TestRepulsive:
    def test_two_point_hand_values(self):
        rep = compute_repulsive(np.array([[0.0], [1.0]]), method="exact")
        assert rep.z == pytest.approx(1.0)
        np.testing.assert_allclose(rep.forces, [[-0.25], [0.25]])
        np.testing.assert_allclose(rep.k2_potentials[0], [0.25, 0.25])

    def test_single_point_rejected(self):
        with pytest.raises(ValueError):
            compute_repulsive(np.array([[0.0, 0.0]]))

    @pytest.mark.parametrize("dims", [1, 2])
    def test_fft_z_matches_exact(self, dims):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-10, 10, size=(1500, dims))
        z_fft = compute_repulsive(pts, method="fft").z
        z_exact = compute_repulsive(pts, method="exact").z
        assert abs(z_fft - z_exact) / z_exact <= 1e-3

    def test_fft_forces_reach_tolerance_on_fine_grid(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-10, 10, size=(1500, 2))
        exact = compute_repulsive(pts, method="exact")
        fine = compute_repulsive(pts, min_intervals=100, method="fft")
        err = np.max(np.abs(fine.forces - exact.forces)) / np.max(np.abs(exact.forces))
        assert err <= 1e-3

    def test_fft_force_error_shrinks_with_grid(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-10, 10, size=(1200, 2))
        exact = compute_repulsive(pts, method="exact")
        errs = []
        for m in (20, 40, 80):
            rep = compute_repulsive(pts, min_intervals=m, method="fft")
            errs.append(
                np.max(np.abs(rep.forces - exact.forces)) / np.max(np.abs(exact.forces))
            )
        assert errs[2] < errs[1] < errs[0]

    def test_auto_uses_exact_below_threshold(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((300, 2))
        auto = compute_repulsive(pts, method="auto")
        exact = compute_repulsive(pts, method="exact")
        np.testing.assert_array_equal(auto.forces, exact.forces)


class TestGradient:
    def test_exaggeration_linearity(self):
        rng = np.random.default_rng(6)
        P = random_affinities(40, rng)
        Y = rng.standard_normal((40, 2))
        g1 = gradient(P, Y, alpha=1.0, method="exact")
        g5 = gradient(P, Y, alpha=5.0, method="exact")
        attr = compute_attractive(P, Y)
        np.testing.assert_allclose(g5 - g1, 4.0 * 4.0 * attr, atol=1e-12)

    def test_symmetric_pair_opposite_gradients(self):
        P = SparseAffinities(n=2, rows=[0], cols=[1], values=[0.5])
        g = gradient(P, np.array([[-1.0, 0.0], [1.0, 0.0]]), method="exact")
        np.testing.assert_allclose(g[0], -g[1], atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        n = 20
        P = random_affinities(n, rng)
        Y = rng.standard_normal((n, 2))
        g = gradient(P, Y, alpha=1.0, method="exact")
        h = 1e-5
        fd = np.zeros_like(Y)
        for i in range(n):
            for c in range(2):
                yp, ym = Y.copy(), Y.copy()
                yp[i, c] += h
                ym[i, c] -= h
                fd[i, c] = (
                    kl_divergence(P, yp, "exact") - kl_divergence(P, ym, "exact")
                ) / (2 * h)
        mask = np.abs(fd) > 1e-10
        rel = np.abs(g[mask] - fd[mask]) / np.abs(fd[mask])
        assert rel.max() <= 1e-5

    def test_alpha_below_one_rejected(self):
        P = SparseAffinities(n=2, rows=[0], cols=[1], values=[0.5])
        with pytest.raises(ValueError):
            gradient(P, np.zeros((2, 2)), alpha=0.5)


class TestKl:
    def test_uniform_p_coincident_points_zero(self):
        P = SparseAffinities(n=2, rows=[0], cols=[1], values=[0.5])
        assert kl_divergence(P, np.zeros((2, 2))) == pytest.approx(0.0, abs=1e-12)

    def test_entropy_identity(self):
        # sum p log(p/q) + sum p log q == sum p log p, by construction
        rng = np.random.default_rng(8)
        P = random_affinities(30, rng)
        Y = rng.standard_normal((30, 2))
        c = kl_divergence(P, Y, "exact")
        d2 = ((Y[P.rows] - Y[P.cols]) ** 2).sum(1)
        k1_total = compute_repulsive(Y, method="exact").z
        logq = -np.log1p(d2) - np.log(k1_total)
        plogq = 2.0 * (P.values * logq).sum()
        plogp = 2.0 * (P.values * np.log(P.values)).sum()
        assert c + plogq == pytest.approx(plogp, rel=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(9)
        P = random_affinities(100, rng, density=0.4)
        Y = rng.standard_normal((100, 2))
        assert kl_divergence(P, Y, "exact") == pytest.approx(
            dense_kl_oracle(P, Y), rel=1e-10
        )

    def test_nonnegative_for_true_distribution(self):
        rng = np.random.default_rng(10)
        P = random_affinities(60, rng)
        Y = rng.standard_normal((60, 2)) * 3
        assert kl_divergence(P, Y, "exact") >= 0.0


class TestStep:
    def test_zero_gradient_zero_velocity_keeps_embedding(self):
        state = OptimizerState.fresh(3, 2)
        y = np.arange(6.0).reshape(3, 2)
        out = step(state, y, np.zeros((3, 2)), momentum=0.5)
        np.testing.assert_array_equal(out, y)

    def test_plain_gradient_step_uses_current_gains(self):
        state = OptimizerState.fresh(1, 1, learning_rate=200.0)
        out = step(state, np.array([[0.0]]), np.array([[2.0]]), momentum=0.5)
        assert out[0, 0] == pytest.approx(-400.0)

    def test_gradient_opposing_velocity_grows_gains(self):
        # steady descent: velocity stays opposite the gradient, +0.2 per step
        state = OptimizerState.fresh(1, 1, learning_rate=1.0)
        y = np.array([[0.0]])
        g = np.array([[1.0]])
        for k in range(4):
            y = step(state, y, g, momentum=0.0)
            assert state.gains[0, 0] == pytest.approx(1.0 + 0.2 * (k + 1))

    def test_oscillating_velocity_shrinks_gains(self):
        state = OptimizerState.fresh(1, 1, learning_rate=1.0)
        y = np.array([[0.0]])
        y = step(state, y, np.array([[1.0]]), momentum=0.0)   # velocity now -1.2?
        gains_after_first = state.gains[0, 0]
        y = step(state, y, np.array([[-1.0]]), momentum=0.0)  # agrees with velocity
        assert state.gains[0, 0] == pytest.approx(gains_after_first * 0.8)

    def test_gain_floor(self):
        state = OptimizerState.fresh(1, 1)
        state.gains[:] = 0.011
        state.velocity[:] = 1.0
        step(state, np.zeros((1, 1)), np.ones((1, 1)), momentum=0.0)
        assert state.gains[0, 0] >= 0.01

    def test_non_finite_gradient_aborts(self):
        state = OptimizerState.fresh(1, 2)
        with pytest.raises(FloatingPointError):
            step(state, np.zeros((1, 2)), np.array([[np.nan, 0.0]]))


class TestSchedule:
    def test_alpha_phases(self):
        sched = ExaggerationSchedule(early_coeff=12.0, early_until_iter=250,
                                     late_coeff=4.0, late_from_iter=750)
        assert sched.alpha(0, 1000) == 12.0
        assert sched.alpha(249, 1000) == 12.0
        assert sched.alpha(250, 1000) == 1.0
        assert sched.alpha(749, 1000) == 1.0
        assert sched.alpha(750, 1000) == 4.0
        assert sched.alpha(999, 1000) == 4.0

    def test_late_defaults_to_last_250(self):
        sched = ExaggerationSchedule(late_coeff=12.0)
        assert sched.resolved_late_from(1000) == 750
        assert sched.alpha(700, 1000) == 1.0
        assert sched.alpha(800, 1000) == 12.0

    def test_invalid_windows_rejected(self):
        sched = ExaggerationSchedule(early_until_iter=500, late_coeff=2.0,
                                     late_from_iter=400)
        with pytest.raises(ValueError):
            sched.validate(1000)

    def test_coefficients_below_one_rejected(self):
        with pytest.raises(ValueError):
            ExaggerationSchedule(early_coeff=0.5).validate(1000)


class TestRunTsne:
    def test_two_cluster_separation(self):
        rng = np.random.default_rng(11)
        data = np.vstack([
            rng.normal(0, 0.5, (500, 10)) + 6.0,
            rng.normal(0, 0.5, (500, 10)) - 6.0,
        ])
        res = run_tsne(data=data, config=TsneConfig(dims=2, perplexity=30,
                                                    n_iter=1000, seed=4))
        emb = res.embedding
        c0, c1 = emb[:500].mean(0), emb[500:].mean(0)
        r0 = np.linalg.norm(emb[:500] - c0, axis=1).max()
        r1 = np.linalg.norm(emb[500:] - c1, axis=1).max()
        assert np.linalg.norm(c0 - c1) > 2.0 * max(r0, r1)

    def test_two_points_neither_collapse_nor_diverge(self):
        P = SparseAffinities(n=2, rows=[0], cols=[1], values=[0.5])
        res = run_tsne(affinities=P, config=TsneConfig(dims=2, n_iter=1000, seed=0))
        emb = res.embedding
        assert np.all(np.isfinite(emb))
        assert np.linalg.norm(emb[0] - emb[1]) > 1e-8

    def test_same_seed_bitwise_identical(self):
        rng = np.random.default_rng(12)
        data = rng.standard_normal((150, 8))
        cfg = TsneConfig(dims=2, perplexity=12, n_iter=120, seed=9)
        a = run_tsne(data=data, config=cfg)
        b = run_tsne(data=data, config=cfg)
        np.testing.assert_array_equal(a.embedding, b.embedding)
        np.testing.assert_array_equal(a.kl_log, b.kl_log)

    def test_kl_decreases_late_across_seeds(self):
        # dense exact affinities (k = N - 1); final-stretch KL must drop for
        # at least 9 of 10 seeds
        rng = np.random.default_rng(13)
        n = 200
        data = np.vstack([
            rng.normal(0, 1.0, (n // 2, 6)) + 3.0,
            rng.normal(0, 1.0, (n // 2, 6)) - 3.0,
        ])
        drops = 0
        for seed in range(10):
            cfg = TsneConfig(dims=2, perplexity=20, n_neighbors=n - 1,
                             n_iter=500, seed=seed)
            res = run_tsne(data=data, config=cfg)
            assert np.all(res.kl_log >= -1e-12)
            if res.kl_log[-1] <= res.kl_log[-100]:
                drops += 1
        assert drops >= 9

    def test_precomputed_affinities_validated(self):
        bad = SparseAffinities(n=3, rows=[0], cols=[1], values=[0.9])
        with pytest.raises(ValueError):
            run_tsne(affinities=bad, config=TsneConfig(n_iter=5))

    def test_data_and_affinities_mutually_exclusive(self):
        P = SparseAffinities(n=2, rows=[0], cols=[1], values=[0.5])
        with pytest.raises(ValueError):
            run_tsne(data=np.zeros((2, 2)), affinities=P)

    def test_dims_validated(self):
        with pytest.raises(ValueError):
            run_tsne(data=np.zeros((10, 3)), config=TsneConfig(dims=3))

    def test_callback_sees_every_iteration(self):
        P = SparseAffinities(n=4, rows=[0, 1, 2], cols=[1, 2, 3],
                             values=[1 / 6, 1 / 6, 1 / 6])
        seen = []
        run_tsne(affinities=P, config=TsneConfig(n_iter=25, seed=1),
                 callback=lambda it, y, info: seen.append(it))
        assert seen == list(range(25))

    def test_pca_front_end_runs(self):
        rng = np.random.default_rng(14)
        data = rng.standard_normal((120, 80))
        res = run_tsne(data=data, config=TsneConfig(dims=2, perplexity=10,
                                                    n_iter=30, seed=2, pca_dims=20))
        assert res.embedding.shape == (120, 2)
