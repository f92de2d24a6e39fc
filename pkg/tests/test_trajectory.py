import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajod import (
    decide,
    fit_prototypes,
    fit_reference,
    layer_score,
    layer_score_mahalanobis,
    make_trajectory,
    score,
    score_set,
    smooth_trajectory,
    softmax,
    threshold_at_tpr,
    trajectories,
)

from conftest import make_fs, random_fs


# -- independent oracles ------------------------------------------------------


def layer_score_oracle(z, protos, probs):
    """Naive per-class loop; the production path is vectorized."""
    total = 0.0
    for y in range(len(protos)):
        mu = np.asarray(protos[y], dtype=float)
        nrm = math.sqrt(float((mu * mu).sum()))
        if nrm < 1e-12:
            continue
        total += float(probs[y]) * float(np.dot(z, mu)) / nrm
    return total


def threshold_oracle(scores, tpr):
    """Exhaustive scan over all candidate order statistics."""
    scores = list(map(float, scores))
    n = len(scores)
    best = float("-inf")
    for gamma in sorted(set(scores)):
        kept = sum(s > gamma for s in scores)
        if kept / n >= tpr:
            best = max(best, gamma)
    return best


def smooth_oracle(y, window, degree):
    """Per-window least squares via explicit normal equations."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        xs = np.arange(-h, h + 1, dtype=float)
        deg = min(degree, 2 * h)
        v = np.vander(xs, deg + 1, increasing=True)
        coef = np.linalg.solve(v.T @ v, v.T @ y[i - h : i + h + 1])
        out[i] = coef[0]
    return out


# -- softmax ------------------------------------------------------------------


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)

    def test_analytic(self):
        assert np.allclose(softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-12)

    def test_extreme_logits_stable(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        assert abs(p[0] - 1.0) < 1e-12 and abs(p[1]) < 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            softmax([float("inf"), 0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_valid_probability_vector(self, logits):
        p = softmax(logits)
        assert np.all(p >= 0) and np.all(p <= 1)
        assert abs(p.sum() - 1.0) < 1e-9


# -- prototypes ---------------------------------------------------------------


class TestFitPrototypes:
    def test_mean_of_two_points(self):
        fs = make_fs([[[1, 1], [3, 3]], [[0.5], [0.5]]], [0, 0], 1)
        bank = fit_prototypes(fs)
        assert np.allclose(bank.mu[0][0], [2, 2], atol=1e-12)

    def test_single_sample_class(self):
        fs = make_fs([[[1, 2], [5, 6]], [[1, 0], [0, 1]]], [0, 1], 2)
        bank = fit_prototypes(fs)
        assert np.allclose(bank.mu[0][0], [1, 2], atol=1e-7)
        assert np.allclose(bank.mu[0][1], [5, 6], atol=1e-7)

    def test_matches_two_pass_oracle(self, rng):
        fs = random_fs(rng, n=64, dims=(7,), n_classes=3)
        bank = fit_prototypes(fs)
        for li, arr in enumerate(fs.features):
            for y in range(3):
                rows = arr[fs.labels == y].astype(np.float64)
                acc = np.zeros(arr.shape[1])
                for r in rows:
                    acc += r
                oracle = acc / rows.shape[0]
                assert np.allclose(bank.mu[li][y], oracle, rtol=1e-12, atol=1e-12)

    def test_rejects_unlabeled(self, rng):
        fs = random_fs(rng, unlabeled=True)
        with pytest.raises(ValueError, match="unlabeled"):
            fit_prototypes(fs)

    def test_rejects_empty_class(self):
        fs = make_fs([[[1.0, 0.0], [1.0, 0.0]], [[1, 0], [1, 0]]], [0, 0], 2)
        with pytest.raises(ValueError, match="empty class"):
            fit_prototypes(fs)


# -- layer scores -------------------------------------------------------------


class TestLayerScore:
    def test_projection_onto_self_is_norm(self):
        assert layer_score([3, 4], [[3, 4]], [1.0]) == pytest.approx(5.0, abs=1e-12)

    def test_orthogonal(self):
        assert layer_score([1, 0], [[0, 2]], [1.0]) == pytest.approx(0.0, abs=1e-12)

    def test_convex_combination(self):
        got = layer_score([2, 4], [[1, 0], [0, 1]], [0.5, 0.5])
        assert got == pytest.approx(3.0, abs=1e-12)

    def test_degenerate_prototype_contributes_zero(self):
        got = layer_score([1, 1], [[0, 0], [2, 0]], [0.5, 0.5])
        assert got == pytest.approx(0.5, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            layer_score([1, 2, 3], [[1, 0]], [1.0])

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), c=st.floats(0.01, 100))
    def test_homogeneity(self, seed, c):
        r = np.random.default_rng(seed)
        z, protos = r.standard_normal(5), r.standard_normal((3, 5))
        probs = softmax(r.standard_normal(3))
        assert layer_score(c * z, protos, probs) == pytest.approx(
            c * layer_score(z, protos, probs), rel=1e-10, abs=1e-12
        )

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_class_order_invariance(self, seed):
        r = np.random.default_rng(seed)
        z, protos = r.standard_normal(4), r.standard_normal((5, 4))
        probs = softmax(r.standard_normal(5))
        perm = r.permutation(5)
        assert layer_score(z, protos[perm], probs[perm]) == pytest.approx(
            layer_score(z, protos, probs), rel=1e-12, abs=1e-12
        )

    def test_matches_loop_oracle(self, rng):
        for _ in range(50):
            c, d = int(rng.integers(1, 6)), int(rng.integers(1, 9))
            z, protos = rng.standard_normal(d), rng.standard_normal((c, d))
            probs = softmax(rng.standard_normal(c))
            got = layer_score(z, protos, probs)
            want = layer_score_oracle(z, protos, probs)
            assert got == pytest.approx(want, rel=1e-10, abs=1e-12)


class TestLayerScoreMahalanobis:
    def test_zero_distance_at_own_prototype(self):
        protos = np.array([[1.0, 2.0], [5.0, 5.0]])
        got = layer_score_mahalanobis([1.0, 2.0], protos, np.eye(2))
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_identity_covariance_reduces_to_euclidean(self):
        got = layer_score_mahalanobis([3.0, 4.0], [[0.0, 0.0]], np.eye(2))
        assert got == pytest.approx(-5.0, abs=1e-12)

    def test_matches_quadratic_form_oracle(self, rng):
        for _ in range(20):
            d, c = int(rng.integers(1, 6)), int(rng.integers(1, 4))
            a = rng.standard_normal((d, d))
            cov_inv = a @ a.T + 0.5 * np.eye(d)
            z, protos = rng.standard_normal(d), rng.standard_normal((c, d))
            want = -min(
                math.sqrt(float((z - mu) @ cov_inv @ (z - mu))) for mu in protos
            )
            got = layer_score_mahalanobis(z, protos, cov_inv)
            assert got == pytest.approx(want, rel=1e-8, abs=1e-10)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            layer_score_mahalanobis([1.0, 0.0], [[0.0, 0.0]], [[1.0, 0.5], [0.0, 1.0]])

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="positive definite"):
            layer_score_mahalanobis([0.0, 1.0], [[0.0, 0.0]], np.diag([1.0, -1.0]))


# -- trajectories -------------------------------------------------------------


class TestMakeTrajectory:
    def test_self_prototype_gives_norms(self):
        mu1, logit = np.array([3.0, 4.0]), np.array([2.0])
        fs = make_fs([[mu1], [logit]], [0], 1)
        bank = fit_prototypes(fs)
        traj = make_trajectory([mu1, logit], bank)
        assert np.allclose(traj, [5.0, 2.0], atol=1e-6)

    def test_length_contract(self, rng):
        fs = random_fs(rng, dims=(3, 4, 5), n_classes=2)
        bank = fit_prototypes(fs)
        traj = make_trajectory([f[0] for f in fs.features], bank)
        assert traj.shape == (4,)

    def test_compositional_oracle(self, rng):
        fs = random_fs(rng, n=30, dims=(4, 6), n_classes=3)
        bank = fit_prototypes(fs)
        sample = [f[7].astype(np.float64) for f in fs.features]
        traj = make_trajectory(sample, bank)
        probs = softmax(sample[-1])
        for li in range(3):
            want = layer_score(sample[li], bank.mu[li], probs)
            assert traj[li] == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_batch_equals_single(self, rng):
        fs = random_fs(rng, n=25, dims=(4, 6), n_classes=3)
        bank = fit_prototypes(fs)
        batch = trajectories(fs, bank)
        for i in range(fs.n_samples):
            single = make_trajectory([f[i] for f in fs.features], bank)
            assert np.allclose(batch[i], single, rtol=1e-12, atol=1e-12)

    def test_thread_count_does_not_change_bytes(self, rng):
        fs = random_fs(rng, n=300, dims=(8,), n_classes=4)
        bank = fit_prototypes(fs)
        a = trajectories(fs, bank, n_threads=1)
        b = trajectories(fs, bank, n_threads=4)
        assert a.tobytes() == b.tobytes()


# -- reference fitting --------------------------------------------------------


class TestFitReference:
    def test_identical_samples_give_unit_reference(self):
        row, logit = [3.0, 4.0], [2.0]
        fs = make_fs([[row] * 5, [logit] * 5], [0] * 5, 1)
        model = fit_reference(fs, subsample_fraction=1.0, seed=0)
        assert np.allclose(model.reference, [1.0, 1.0], atol=1e-12)
        assert np.allclose(model.scale, [5.0, 2.0], atol=1e-6)

    def test_scale_matches_sort_oracle(self, rng):
        fs = random_fs(rng, n=10, dims=(3, 4), n_classes=2)
        model = fit_reference(fs, subsample_fraction=1.0, seed=0)
        bank = fit_prototypes(fs)
        u = trajectories(fs, bank)
        for j in range(u.shape[1]):
            assert model.scale[j] == sorted(u[:, j])[-1]

    def test_deterministic(self, rng):
        fs = random_fs(rng, n=200, dims=(5,), n_classes=2)
        a = fit_reference(fs, subsample_fraction=0.1, seed=42)
        b = fit_reference(fs, subsample_fraction=0.1, seed=42)
        assert a.scale.tobytes() == b.scale.tobytes()
        assert a.reference.tobytes() == b.reference.tobytes()
        for ma, mb in zip(a.bank.mu, b.bank.mu):
            assert ma.tobytes() == mb.tobytes()

    def test_full_subsample_ignores_seed(self, rng):
        fs = random_fs(rng, n=50, dims=(5,), n_classes=2)
        a = fit_reference(fs, subsample_fraction=1.0, seed=1)
        b = fit_reference(fs, subsample_fraction=1.0, seed=999)
        assert a.reference.tobytes() == b.reference.tobytes()

    def test_degenerate_scale_names_layer(self):
        # Features of the two samples cancel, so the class prototype is the
        # zero vector, every projection is zero and the scale degenerates.
        fs = make_fs([[[1.0, 0.0], [-1.0, 0.0]], [[1.0], [1.0]]], [0, 0], 1)
        with pytest.raises(ValueError, match="layer0"):
            fit_reference(fs, subsample_fraction=1.0, seed=0)

    def test_invalid_fraction(self, rng):
        fs = random_fs(rng)
        with pytest.raises(ValueError, match="subsample_fraction"):
            fit_reference(fs, subsample_fraction=0.0, seed=0)


# -- scoring ------------------------------------------------------------------


class TestScore:
    def test_reference_trajectory_scores_one(self):
        row, logit = [3.0, 4.0], [2.0]
        fs = make_fs([[row] * 4, [logit] * 4], [0] * 4, 1)
        model = fit_reference(fs, subsample_fraction=1.0, seed=0)
        assert score([np.array(row), np.array(logit)], model) == pytest.approx(
            1.0, abs=1e-9
        )

    def test_orthogonal_trajectory_scores_zero(self, rng):
        fs = random_fs(rng, n=20, dims=(3,), n_classes=2)
        model = fit_reference(fs, subsample_fraction=1.0, seed=0)
        # Craft a scaled trajectory orthogonal to the reference.
        ref = model.reference
        v = np.array([ref[1], -ref[0]])
        raw = v * model.scale
        assert abs(raw / model.scale @ ref) < 1e-12
        scaled = raw / model.scale
        s = (scaled @ ref) / (ref @ ref)
        assert s == pytest.approx(0.0, abs=1e-12)

    def test_batch_matches_multiply_sum_oracle(self, rng):
        fs = random_fs(rng, n=40, dims=(4, 5), n_classes=3)
        model = fit_reference(fs, subsample_fraction=1.0, seed=0)
        got = score_set(fs, model)
        u = trajectories(fs, model.bank)
        ref = model.reference
        denom = sum(float(r) * float(r) for r in ref)
        for i in range(fs.n_samples):
            acc = 0.0
            for j in range(u.shape[1]):
                acc += (u[i, j] / model.scale[j]) * ref[j]
            assert got[i] == pytest.approx(acc / denom, rel=1e-12, abs=1e-12)

    def test_normalized_and_raw_order_identically(self, rng):
        fs = random_fs(rng, n=60, dims=(4,), n_classes=2)
        model = fit_reference(fs, subsample_fraction=1.0, seed=0)
        raw = score_set(fs, model, normalized=False)
        norm = score_set(fs, model, normalized=True)
        assert np.array_equal(
            np.argsort(raw, kind="stable"), np.argsort(norm, kind="stable")
        )


class TestDecide:
    def test_below_threshold_is_ood(self):
        assert decide(0.3, 0.5) is True

    def test_boundary_is_ood(self):
        assert decide(0.5, 0.5) is True

    def test_above_threshold_is_in(self):
        assert decide(0.7, 0.5) is False

    @settings(max_examples=50, deadline=None)
    @given(
        s=st.floats(-100, 100),
        g1=st.floats(-100, 100),
        g2=st.floats(-100, 100),
    )
    def test_monotone_in_gamma(self, s, g1, g2):
        lo, hi = min(g1, g2), max(g1, g2)
        if decide(s, lo):
            assert decide(s, hi)


class TestThresholdAtTpr:
    def test_integer_scores(self):
        assert threshold_at_tpr(np.arange(1.0, 101.0), 0.95) == 5.0

    def test_all_equal_returns_neg_inf(self):
        assert threshold_at_tpr([7.0] * 10, 0.5) == float("-inf")

    def test_single_score_returns_neg_inf(self):
        assert threshold_at_tpr([7.0], 0.95) == float("-inf")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            threshold_at_tpr([], 0.95)

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(40):
            n = int(rng.integers(1, 60))
            scores = np.round(rng.standard_normal(n) * 3, 1)  # force ties
            tpr = float(rng.uniform(0.05, 0.95))
            got = threshold_at_tpr(scores, tpr)
            want = threshold_oracle(scores, tpr)
            assert got == want

    def test_constraint_always_satisfied(self, rng):
        for _ in range(40):
            scores = rng.standard_normal(int(rng.integers(1, 80)))
            tpr = float(rng.uniform(0.1, 0.99))
            gamma = threshold_at_tpr(scores, tpr)
            assert np.mean(scores > gamma) >= tpr - 1e-12


class TestSmoothTrajectory:
    def test_linear_sequence_unchanged(self):
        y = 0.5 * np.arange(9.0) - 2.0
        assert np.allclose(smooth_trajectory(y, 5, 2), y, atol=1e-10)

    def test_constant_unchanged(self):
        y = np.full(7, 3.3)
        assert np.allclose(smooth_trajectory(y, 3, 1), y, atol=1e-12)

    def test_matches_normal_equations_oracle(self, rng):
        y = rng.standard_normal(15)
        got = smooth_trajectory(y, 5, 2)
        want = smooth_oracle(y, 5, 2)
        assert np.allclose(got, want, rtol=1e-8, atol=1e-8)

    def test_idempotent_on_polynomials(self):
        x = np.arange(11.0)
        y = 0.1 * x**2 - x + 3.0
        once = smooth_trajectory(y, 5, 2)
        twice = smooth_trajectory(once, 5, 2)
        assert np.allclose(once, y, atol=1e-9)
        assert np.allclose(twice, once, atol=1e-9)

    @pytest.mark.parametrize(
        "window,degree", [(4, 2), (0, 1), (5, 0), (5, 5), (99, 2)]
    )
    def test_invalid_parameters(self, window, degree):
        with pytest.raises(ValueError):
            smooth_trajectory(np.zeros(9), window, degree)
