import math

import numpy as np
import pytest

from oodaudit.dump import EvalDump
from oodaudit.scores import (
    ScoreError,
    ScoreVector,
    compute_score,
    energy,
    fit_knn,
    fit_mahalanobis,
    fit_vim,
    margin,
    maxlogit,
    msp,
    odin_t,
    orient_ood_larger,
    react_energy,
    score_knn,
    score_mahalanobis,
    score_vim,
    shannon_entropy,
)

from conftest import make_dump


def brute_auroc(id_vals, ood_vals):
    """O(n*m) pairwise AUROC with OOD positive (used as oracle in several tests)."""
    id_vals = np.asarray(id_vals, dtype=np.float64)
    ood_vals = np.asarray(ood_vals, dtype=np.float64)
    gt = (ood_vals[:, None] > id_vals[None, :]).sum()
    eq = (ood_vals[:, None] == id_vals[None, :]).sum()
    return (gt + 0.5 * eq) / (len(id_vals) * len(ood_vals))


class TestClosedForms:
    def test_msp_symmetry(self):
        assert msp(np.array([[0.0, 0.0]])).values[0] == pytest.approx(0.5, abs=1e-12)

    def test_msp_ln3(self):
        assert msp(np.array([[math.log(3.0), 0.0]])).values[0] == pytest.approx(0.75, abs=1e-12)

    def test_msp_extreme_logit_no_overflow(self):
        v = msp(np.array([[1000.0, 0.0]])).values[0]
        # exact value is 1/(1+e^-1000); indistinguishable from 1 in float64
        assert v == pytest.approx(1.0, abs=1e-300)
        assert np.isfinite(v)

    def test_energy_two_zeros(self):
        assert energy(np.array([[0.0, 0.0]])).values[0] == pytest.approx(-math.log(2.0), abs=1e-12)

    def test_energy_five_zero_zero(self):
        expected = -math.log(math.exp(5.0) + 2.0)  # ~ -5.0133
        assert energy(np.array([[5.0, 0.0, 0.0]])).values[0] == pytest.approx(expected, abs=1e-12)

    def test_energy_constant_rows(self):
        for k in (2, 5, 17):
            a = 3.7
            v = energy(np.full((1, k), a)).values[0]
            assert v == pytest.approx(-a - math.log(k), abs=1e-12)

    def test_energy_huge_logits_stable(self):
        v = energy(np.array([[1000.0, -1000.0, 999.0]])).values[0]
        assert np.isfinite(v)
        assert v == pytest.approx(-1000.0 - math.log(1.0 + math.exp(-1.0)), abs=1e-9)

    def test_entropy_uniform(self):
        for k in (2, 4, 10):
            v = shannon_entropy(np.zeros((1, k))).values[0]
            assert v == pytest.approx(math.log(k), abs=1e-12)

    def test_entropy_near_one_hot_goes_to_zero(self):
        v = shannon_entropy(np.array([[200.0, 0.0, 0.0]])).values[0]
        assert 0.0 <= v < 1e-12

    def test_maxlogit_and_margin(self):
        sv_max = maxlogit(np.array([[2.0, 1.0, 0.0]]))
        sv_mar = margin(np.array([[2.0, 1.0, 0.0]]))
        assert sv_max.values[0] == 2.0
        assert sv_mar.values[0] == 1.0

    def test_uniform_margin_zero(self):
        assert margin(np.zeros((1, 6))).values[0] == 0.0

    def test_odin_t_is_temperature_scaled_msp(self):
        v = odin_t(np.array([[1000.0, 0.0]]), temperature=1000.0).values[0]
        assert v == pytest.approx(msp(np.array([[1.0, 0.0]])).values[0], abs=1e-15)
        assert v == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-12)

    def test_nonfinite_logits_rejected(self):
        with pytest.raises(ScoreError, match="non-finite"):
            energy(np.array([[np.nan, 0.0]]))


class TestShiftInvariance:
    def test_energy_shift_exact(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(50, 7)) * 3
        for c in (4.0, -2.5, 17.0):
            e0 = energy(z).values
            e1 = energy(z + c).values
            np.testing.assert_allclose(e1, e0 - c, rtol=0, atol=1e-10)

    def test_ranking_scores_unchanged_under_shift(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(40, 5))
        c = 9.25
        np.testing.assert_allclose(msp(z + c).values, msp(z).values, atol=1e-12)
        np.testing.assert_allclose(margin(z + c).values, margin(z).values, atol=1e-12)
        np.testing.assert_allclose(
            shannon_entropy(z + c).values, shannon_entropy(z).values, atol=1e-12
        )
        np.testing.assert_allclose(maxlogit(z + c).values, maxlogit(z).values + c, atol=1e-12)

    def test_oriented_auroc_invariant_under_shift(self):
        rng = np.random.default_rng(2)
        z_id = rng.normal(size=(60, 5))
        z_ood = rng.normal(size=(80, 5)) + 0.5
        c = 6.0
        for fn in (msp, energy, maxlogit, margin, shannon_entropy):
            a0 = brute_auroc(
                orient_ood_larger(fn(z_id)).values, orient_ood_larger(fn(z_ood)).values
            )
            a1 = brute_auroc(
                orient_ood_larger(fn(z_id + c)).values, orient_ood_larger(fn(z_ood + c)).values
            )
            assert a0 == pytest.approx(a1, abs=1e-12)


class TestOrient:
    def test_msp_negated(self):
        sv = ScoreVector(np.array([0.9, 0.5]), "msp", "id_larger")
        out = orient_ood_larger(sv)
        np.testing.assert_array_equal(out.values, [-0.9, -0.5])
        assert out.direction == "ood_larger"

    def test_energy_unchanged(self):
        sv = energy(np.zeros((3, 2)))
        out = orient_ood_larger(sv)
        assert out is sv

    def test_idempotent(self):
        sv = ScoreVector(np.array([1.0, 2.0]), "msp", "id_larger")
        once = orient_ood_larger(sv)
        twice = orient_ood_larger(once)
        np.testing.assert_array_equal(once.values, twice.values)

    def test_auroc_complement_of_unoriented(self):
        rng = np.random.default_rng(3)
        id_v = rng.normal(size=30)
        ood_v = rng.normal(size=40) - 0.7  # id_larger-style score
        oriented = brute_auroc(-id_v, -ood_v)
        raw = brute_auroc(id_v, ood_v)
        assert oriented == pytest.approx(1.0 - raw, abs=1e-12)


class TestMahalanobis:
    def _fit_dump(self, seed=0, n=40, k=2, d=3):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(k), n // k)
        feats = rng.normal(size=(n, d)) + 3.0 * labels[:, None]
        logits = rng.normal(size=(n, k))
        return EvalDump(logits=logits, features=feats, role="fit", labels=labels)

    def test_class_mean_scores_zero(self):
        fit = self._fit_dump(seed=5, k=4, n=40, d=3)
        model = fit_mahalanobis(fit)
        sv = score_mahalanobis(model, model.class_means[3][None, :])
        assert sv.values[0] == pytest.approx(0.0, abs=1e-9)

    def test_identity_covariance_unit_distance(self):
        # two classes at +/- e1, tight isotropic scatter forced via explicit model
        from oodaudit.scores import MahalanobisModel

        means = np.array([[1.0, 0.0], [-1.0, 0.0]])
        model = MahalanobisModel(means, np.eye(2), 0.0)
        sv = score_mahalanobis(model, np.zeros((1, 2)))
        assert sv.values[0] == pytest.approx(1.0, abs=1e-12)

    def test_matches_dense_linear_algebra_oracle(self):
        fit = self._fit_dump(seed=7)
        shrink = 0.05
        model = fit_mahalanobis(fit, shrinkage=shrink)
        rng = np.random.default_rng(8)
        queries = rng.normal(size=(25, 3)) * 2

        # oracle: explicit per-class accumulation and dense inverse
        x, y = fit.features, fit.labels
        mus = [x[y == c].mean(axis=0) for c in range(2)]
        scatter = np.zeros((3, 3))
        for xi, yi in zip(x, y):
            diff = xi - mus[yi]
            scatter += np.outer(diff, diff)
        cov = scatter / len(x) + shrink * np.eye(3)
        pinv = np.linalg.inv(cov)
        expected = np.array(
            [min((q - mu) @ pinv @ (q - mu) for mu in mus) for q in queries]
        )

        got = score_mahalanobis(model, queries).values
        np.testing.assert_allclose(got, expected, rtol=1e-8, atol=1e-10)

    def test_rotation_invariance(self):
        # float64 array path: the dump container quantizes to float32, which
        # would mask the 1e-8 property this checks
        from oodaudit.scores import fit_mahalanobis_features

        rng = np.random.default_rng(10)
        labels = np.repeat(np.arange(3), 20)
        feats = rng.normal(size=(60, 4)) + 2.0 * labels[:, None]
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        queries = rng.normal(size=(15, 4))

        m0 = fit_mahalanobis_features(feats, labels, 3, shrinkage=0.01)
        m1 = fit_mahalanobis_features(feats @ q.T, labels, 3, shrinkage=0.01)
        np.testing.assert_allclose(
            score_mahalanobis(m0, queries).values,
            score_mahalanobis(m1, queries @ q.T).values,
            rtol=1e-8,
            atol=1e-8,
        )

    def test_small_class_rejected(self):
        d = self._fit_dump(seed=11)
        labels = d.labels.copy()
        labels[:] = 0
        labels[0] = 1  # class 1 has a single sample
        bad = EvalDump(logits=d.logits, features=d.features, role="fit", labels=labels)
        with pytest.raises(ScoreError, match="fewer than 2"):
            fit_mahalanobis(bad)

    def test_singular_needs_shrinkage(self):
        # rank-deficient features: constant column
        labels = np.array([0, 0, 1, 1])
        feats = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [4.0, 5.0]])
        dump = EvalDump(logits=np.zeros((4, 2)), features=feats, role="fit", labels=labels)
        with pytest.raises(ScoreError, match="shrinkage > 0"):
            fit_mahalanobis(dump, shrinkage=0.0)
        fit_mahalanobis(dump, shrinkage=0.1)  # shrinkage repairs it

    def test_missing_labels(self):
        d = make_dump(10, 2, 3, role="ood", seed=12)
        with pytest.raises(ScoreError, match="labels"):
            fit_mahalanobis(d)


class TestKnn:
    def test_query_in_bank_scores_zero(self):
        d = make_dump(20, 3, 5, role="fit", seed=13)
        model = fit_knn(d, k=1)
        sv = score_knn(model, d.features[4][None, :])
        assert sv.values[0] == pytest.approx(0.0, abs=1e-7)

    def test_orthonormal_pair_closed_form(self):
        feats = np.eye(2)
        dump = EvalDump(
            logits=np.zeros((2, 2)), features=feats, role="fit", labels=np.array([0, 1])
        )
        model = fit_knn(dump, k=2)
        sv = score_knn(model, np.array([[1.0, 0.0]]))
        assert sv.values[0] == pytest.approx(math.sqrt(2.0), abs=1e-12)

    def test_matches_exhaustive_sorted_oracle(self):
        d = make_dump(200, 4, 8, role="fit", seed=14)
        k = 10
        model = fit_knn(d, k=k)
        rng = np.random.default_rng(15)
        queries = rng.normal(size=(30, 8))

        bank = d.features / np.linalg.norm(d.features, axis=1, keepdims=True)
        qn = queries / np.linalg.norm(queries, axis=1, keepdims=True)
        expected = np.array(
            [np.sort([np.linalg.norm(q - b) for b in bank])[k - 1] for q in qn]
        )
        got = score_knn(model, queries).values
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-10)

    def test_bank_permutation_invariance(self):
        d = make_dump(50, 3, 6, role="fit", seed=16)
        rng = np.random.default_rng(17)
        perm = rng.permutation(50)
        shuffled = EvalDump(
            logits=d.logits[perm], features=d.features[perm], role="fit", labels=d.labels[perm]
        )
        queries = rng.normal(size=(10, 6))
        a = score_knn(fit_knn(d, k=5), queries).values
        b = score_knn(fit_knn(shuffled, k=5), queries).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_zero_norm_feature_rejected(self):
        feats = np.zeros((3, 2))
        feats[1] = [1.0, 0.0]
        dump = EvalDump(
            logits=np.zeros((3, 2)), features=feats, role="fit", labels=np.array([0, 1, 0])
        )
        with pytest.raises(ScoreError, match="cannot normalize"):
            fit_knn(dump, k=1)

    def test_default_k_scale_free(self):
        d = make_dump(500, 3, 4, role="fit", seed=18)
        assert fit_knn(d).k == 5


class TestReact:
    def test_percentile_threshold_oracle(self):
        # fit entries 0..99 laid out over features; p90 linear-interpolated -> 89.1
        feats = np.arange(100.0).reshape(25, 4)
        fit = EvalDump(
            logits=np.zeros((25, 3)),
            features=feats,
            role="fit",
            labels=np.zeros(25, dtype=np.int32),
        )
        vals = np.sort(feats.ravel())
        h = (len(vals) - 1) * 0.90
        lo = int(np.floor(h))
        expected_thresh = vals[lo] + (h - lo) * (vals[lo + 1] - vals[lo])
        assert expected_thresh == pytest.approx(89.1, abs=1e-9)

        d = make_dump(10, 3, 4, seed=19, with_head=True)
        big = d.features.copy() * 100  # force entries above the threshold
        dump = EvalDump(
            logits=big @ d.head_w.T + d.head_b,
            features=big,
            role="id_test",
            labels=d.labels,
            head_w=d.head_w,
            head_b=d.head_b,
        )
        got = react_energy(dump, fit, clip_percentile=90.0).values
        clipped = np.minimum(dump.features, expected_thresh)
        expected = -np.log(np.exp(clipped @ d.head_w.T + d.head_b).sum(axis=1))
        np.testing.assert_allclose(got, expected, rtol=1e-9)
        assert (dump.features > expected_thresh).any()

    def test_no_clip_equals_plain_energy_bitwise(self):
        d = make_dump(40, 5, 6, seed=20, with_head=True)
        fit = make_dump(60, 5, 6, role="fit", seed=21, with_head=True)
        got = react_energy(d, fit, clip_percentile=100.0).values
        expected = energy(d.features @ d.head_w.T + d.head_b).values
        assert np.array_equal(got, expected)

    def test_all_below_threshold_is_noop(self):
        d = make_dump(20, 3, 4, seed=22, with_head=True)
        fit_feats = np.abs(np.random.default_rng(23).normal(size=(50, 4))) + 100.0
        fit = EvalDump(
            logits=np.zeros((50, 3)),
            features=fit_feats,
            role="fit",
            labels=np.zeros(50, dtype=np.int32),
        )
        got = react_energy(d, fit, clip_percentile=50.0).values
        expected = energy(d.features @ d.head_w.T + d.head_b).values
        assert np.array_equal(got, expected)

    def test_requires_head(self):
        d = make_dump(10, 3, 4, seed=24)
        fit = make_dump(10, 3, 4, role="fit", seed=25)
        with pytest.raises(ScoreError, match="requires classifier head"):
            react_energy(d, fit)

    def test_percentile_range_checked(self):
        d = make_dump(10, 3, 4, seed=26, with_head=True)
        fit = make_dump(10, 3, 4, role="fit", seed=27)
        with pytest.raises(ScoreError, match="clip_percentile"):
            react_energy(d, fit, clip_percentile=0.0)


class TestVim:
    def test_features_inside_subspace_reduce_to_neg_logsumexp(self):
        rng = np.random.default_rng(28)
        head_w = rng.normal(size=(3, 4))
        head_b = np.zeros(3)
        fit_feats = rng.normal(size=(50, 4)) * [3.0, 2.0, 0.3, 0.3]
        logits = fit_feats @ head_w.T + head_b
        fit = EvalDump(
            logits=logits,
            features=fit_feats,
            role="fit",
            labels=np.zeros(50, dtype=np.int32),
            head_w=head_w,
            head_b=head_b,
        )
        model = fit_vim(fit, subspace_dim=2)
        # queries built inside the fitted principal subspace have zero residual
        q_feats = model.origin + np.array([[1.0, -2.0], [0.5, 3.0]]) @ model.principal_basis.T
        q_logits = q_feats @ head_w.T + head_b
        q = EvalDump(logits=q_logits, features=q_feats, role="ood")
        got = score_vim(model, q).values
        expected = -np.log(np.exp(q.logits).sum(axis=1))
        np.testing.assert_allclose(got, expected, atol=1e-5)

    def test_residual_matches_projector_oracle(self):
        rng = np.random.default_rng(29)
        head_w = rng.normal(size=(2, 3))
        head_b = rng.normal(size=2)
        origin = -np.linalg.pinv(head_w) @ head_b
        b_dir = np.array([2.0, 1.0, -1.0])
        b_dir /= np.linalg.norm(b_dir)
        coeff = rng.normal(size=40) * 3
        fit_feats = origin + np.outer(coeff, b_dir) + rng.normal(size=(40, 3)) * 0.01
        logits = fit_feats @ head_w.T + head_b
        fit = EvalDump(
            logits=logits,
            features=fit_feats,
            role="fit",
            labels=np.zeros(40, dtype=np.int32),
            head_w=head_w,
            head_b=head_b,
        )
        model = fit_vim(fit, subspace_dim=1)
        queries = rng.normal(size=(12, 3))
        q_logits = queries @ head_w.T + head_b
        q = EvalDump(logits=q_logits, features=queries, role="ood")

        basis = model.principal_basis[:, 0]
        projector = np.eye(3) - np.outer(basis, basis)
        resid = np.linalg.norm((q.features - model.origin) @ projector.T, axis=1)
        lse = np.log(np.exp(q.logits).sum(axis=1))
        np.testing.assert_allclose(
            score_vim(model, q).values, model.alpha * resid - lse, rtol=1e-9, atol=1e-9
        )
        # fitted direction agrees with the construction direction
        assert abs(abs(basis @ b_dir) - 1.0) < 1e-3

    def test_alpha_is_ratio_of_means(self):
        rng = np.random.default_rng(30)
        head_w = np.eye(2)
        head_b = np.zeros(2)
        # features along e1 with mean |resid along e2| = 2 and maxlogit mean 4
        feats = np.column_stack([np.full(10, 4.0), np.tile([2.0, -2.0], 5)])
        logits = feats @ head_w.T
        fit = EvalDump(
            logits=logits,
            features=feats,
            role="fit",
            labels=np.zeros(10, dtype=np.int32),
            head_w=head_w,
            head_b=head_b,
        )
        model = fit_vim(fit, subspace_dim=1)
        np.testing.assert_allclose(model.principal_basis[:, 0], [1.0, 0.0], atol=1e-9)
        assert model.alpha == pytest.approx(2.0, abs=1e-9)

    def test_requires_head_and_valid_dim(self):
        d = make_dump(10, 3, 4, role="fit", seed=31)
        with pytest.raises(ScoreError, match="requires classifier head"):
            fit_vim(d)
        dh = make_dump(10, 3, 4, role="fit", seed=32, with_head=True)
        with pytest.raises(ScoreError, match="subspace_dim"):
            fit_vim(dh, subspace_dim=4)

    def test_degenerate_residuals_rejected(self):
        head_w = np.eye(2)
        feats = np.outer(np.arange(1.0, 9.0), [1.0, 0.0])
        fit = EvalDump(
            logits=feats @ head_w.T,
            features=feats,
            role="fit",
            labels=np.zeros(8, dtype=np.int32),
            head_w=head_w,
            head_b=np.zeros(2),
        )
        with pytest.raises(ScoreError, match="degenerate residuals"):
            fit_vim(fit, subspace_dim=1)


class TestPurityAndRegistry:
    def test_scores_bit_stable_across_calls(self):
        d = make_dump(50, 4, 6, seed=33, with_head=True)
        fit = make_dump(80, 4, 6, role="fit", seed=34, with_head=True)
        for name in ("msp", "energy", "maxlogit", "margin", "entropy", "odin_t",
                      "mahalanobis", "knn", "react", "vim"):
            a = compute_score(name, d, fit).values
            b = compute_score(name, d, fit).values
            assert np.array_equal(a, b), name

    def test_fit_scores_require_fit(self):
        d = make_dump(10, 3, 4, seed=35)
        with pytest.raises(ScoreError, match="requires fit dump"):
            compute_score("mahalanobis", d, None)

    def test_unknown_score(self):
        d = make_dump(10, 3, 4, seed=36)
        with pytest.raises(ScoreError, match="unknown score"):
            compute_score("gradnorm", d, make_dump(10, 3, 4, role="fit", seed=37))
