import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_params
from ssnn import data
from ssnn.errors import ContractViolation, ShapeError
from ssnn.evaluation import EvalReport, evaluate, pca_features, r2_probe, segmentation_error
from ssnn.generative import Sequence, sample_sequence

labels = st.lists(st.integers(0, 3), min_size=1, max_size=30)


def brute_error(pred, truth):
    """Exhaustive search over injective relabelings of the predicted alphabet."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    P, Q = int(pred.max()) + 1, int(truth.max()) + 1
    best = 0
    targets = list(range(Q)) + [-1 - i for i in range(P)]   # negative ids stand for "no partner"
    for perm in itertools.permutations(targets, P):
        best = max(best, int(np.sum(np.array(perm)[pred] == truth)))
    return 1 - best / len(pred)


class TestSegmentationError:
    def test_worked_example(self):
        # labels 1,2 written 0-based
        assert segmentation_error([1, 1, 1, 0], [0, 0, 1, 1]) == pytest.approx(0.25)

    @given(labels)
    def test_identity_and_permutation(self, z):
        z = np.array(z)
        perm = np.random.default_rng(len(z)).permutation(4)
        assert segmentation_error(z, z) == 0.0
        assert segmentation_error(perm[z], z) == 0.0

    @given(st.integers(1, 12).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 2), min_size=n, max_size=n),
                                                          st.lists(st.integers(0, 2), min_size=n, max_size=n))))
    def test_matches_exhaustive_search(self, pair):
        p, t = pair
        assert segmentation_error(p, t) == pytest.approx(brute_error(p, t))

    @given(st.integers(1, 15).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 2), min_size=n, max_size=n),
                                                          st.lists(st.integers(0, 2), min_size=n, max_size=n))))
    def test_symmetric_for_equal_alphabets(self, pair):
        p, t = np.array(pair[0]), np.array(pair[1])
        p[0], t[0] = 2, 2   # both alphabets have size 3
        assert segmentation_error(p, t) == pytest.approx(segmentation_error(t, p))

    def test_range_and_length_mismatch(self):
        assert 0.0 <= segmentation_error([0, 1, 2, 3], [0, 0, 0, 0]) <= 1.0
        with pytest.raises(ContractViolation):
            segmentation_error([0, 1], [0])


class TestR2:
    def test_exact_linear_target(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(50, 3))
        Y = X @ np.array([[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]]) + 4.0
        np.testing.assert_allclose(r2_probe(X, Y), 1.0, atol=1e-10)

    def test_orthogonal_target(self):
        X = np.array([[1.0], [-1.0], [1.0], [-1.0]] * 10)
        y = np.array([1.0, 1.0, -1.0, -1.0] * 10)
        assert abs(r2_probe(X, y)[0]) < 1e-12

    def test_constant_target_warns(self):
        with pytest.warns(RuntimeWarning, match="constant"):
            assert r2_probe(np.random.default_rng(0).normal(size=(10, 2)), np.ones(10))[0] == 0.0

    def test_rank_deficient_design(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(30, 1))
        X = np.hstack([a, a])
        r2 = r2_probe(X, 2 * a[:, 0] + 1)
        assert r2[0] == pytest.approx(1.0, abs=1e-8)

    @given(st.integers(0, 1000))
    def test_never_below_intercept_only(self, seed):
        rng = np.random.default_rng(seed)
        assert r2_probe(rng.normal(size=(20, 3)), rng.normal(size=20))[0] >= -1e-12

    def test_identifiability(self):
        with pytest.raises(ContractViolation):
            r2_probe(np.zeros((3, 2)), np.zeros(3))

    def test_pca_features_shape(self):
        X = np.random.default_rng(2).normal(size=(40, 5))
        F = pca_features(X, 2)
        assert F.shape == (40, 2) and abs(F[:, 0] @ F[:, 1]) < 1e-9


class TestEvaluate:
    def test_truth_from_self_and_aggregates(self):
        theta, phi = make_params(K=2, M=3, h=3, seed=4)
        seqs = [sample_sequence(theta, 12, np.random.default_rng(i), f"s{i}")[0] for i in range(3)]
        rep = evaluate(theta, phi, seqs, samples=10, seed=1)
        errs = [r["error"] for r in rep.records]
        assert rep.aggregate()["error_mean"] == pytest.approx(np.mean(errs))
        assert rep.aggregate()["error_std"] == pytest.approx(np.std(errs))
        assert all(r["decoder"] == "map" for r in rep.records)
        assert all(r["elbo"] <= r["log_likelihood"] + 3 * r["elbo_se"] + 1e-9 for r in rep.records)
        again = evaluate(theta, phi, seqs, samples=10, seed=1)
        assert again.to_dict() == rep.to_dict()
        assert "runtime_seconds" not in rep.to_dict() and "runtime_seconds" in rep.to_dict(True)
        assert "error_mean" in rep.to_text()

    def test_perfect_labels(self):
        theta, phi = make_params(K=2, M=2, h=2, seed=5)
        s, path = sample_sequence(theta, 10, np.random.default_rng(0))
        assert segmentation_error(path, s.truth) == 0.0

    def test_missing_truth(self):
        theta, phi = make_params(K=2, M=2, h=2)
        with pytest.raises(ContractViolation):
            evaluate(theta, phi, [Sequence("a", np.zeros((4, 2)))], samples=0, require_truth=True)

    def test_dimension_mismatch(self):
        theta, phi = make_params(K=2, M=2, h=2)
        with pytest.raises(ShapeError):
            evaluate(theta, phi, [Sequence("a", np.zeros((4, 3)))], samples=0)

    def test_greedy_fallback_beyond_guard(self, monkeypatch):
        from ssnn import oracle
        monkeypatch.setattr(oracle, "MAX_CELLS", 1)
        theta, phi = make_params(K=2, M=2, h=2)
        rep = evaluate(theta, phi, [Sequence("a", np.zeros((4, 2)))], samples=0)
        assert rep.records[0]["decoder"] == "greedy" and rep.records[0]["log_likelihood"] is None

    def test_probe(self):
        theta, phi = make_params(K=2, M=2, m=2, h=2, e=4, q=3)
        rng = np.random.default_rng(0)
        seqs = [Sequence(f"p{i}", rng.normal(size=(30, 2))) for i in range(2)]
        targets = {s.id: s.x[:, :1] * 2 for s in seqs}
        rep = evaluate(theta, phi, seqs, samples=0, probe_targets=targets)
        assert 0.0 <= rep.r2["target0"] <= 1.0
