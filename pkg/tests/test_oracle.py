import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_params
from ssnn import oracle
from ssnn.errors import ResourceError
from ssnn.generative import LatentPath, joint_log_prob, sample_sequence, segment_log_prob


def instance(seed, K=3, M=3, T=6, self_transitions=True, h=3):
    theta, _ = make_params(K=K, M=M, h=h, seed=seed, self_transitions=self_transitions)
    x, _ = sample_sequence(theta, T, np.random.default_rng(seed + 50))
    return theta, x


def all_paths(T, K, M, st=True):
    return [LatentPath.from_segments(s, T) for s in oracle.enumerate_segmentations(T, K, M, st)]


class TestScoreTable:
    def test_matches_segment_log_prob(self):
        theta, x = instance(0, T=5)
        E = oracle.segment_score_table(x, theta)
        eye = np.eye(3)
        for t in range(5):
            for d in range(1, 4):
                for k in range(3):
                    want = float(segment_log_prob(x, t, min(d, 5 - t), eye[k], theta))
                    assert E[t, d - 1, k] == pytest.approx(want, rel=1e-13, abs=1e-13)

    def test_streaming_rows_match_table(self):
        theta, x = instance(1, T=7)
        E = oracle.segment_score_table(x, theta)
        for s in range(7):
            np.testing.assert_allclose(oracle._scores_from(x.x, s, theta.view(), 3), E[s], rtol=1e-13)


class TestLikelihood:
    @pytest.mark.parametrize("self_transitions", [True, False])
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_brute_force(self, seed, self_transitions):
        theta, x = instance(seed, self_transitions=self_transitions)
        a, b = oracle.exact_log_likelihood(x, theta), oracle.brute_force_log_likelihood(x, theta)
        assert abs(a - b) <= 1e-10 * abs(b)
        assert oracle.exact_log_likelihood(x, theta, low_memory=True) == pytest.approx(a, rel=1e-13)

    def test_single_forced_path(self):
        theta, x = instance(3, K=1, M=1, T=4)
        forced = LatentPath(np.zeros(4), np.ones(4))
        assert oracle.exact_log_likelihood(x, theta) == pytest.approx(joint_log_prob(x, forced, theta), rel=1e-13)
        np.testing.assert_array_equal(oracle.map_segmentation(x, theta).z, forced.z)

    def test_single_step(self):
        theta, x = instance(4, T=1)
        li, ld = theta.log_init, theta.log_dur
        terms = [li[k] + ld[k, d] + float(segment_log_prob(x, 0, 1, np.eye(3)[k], theta))
                 for k in range(3) for d in range(3)]
        assert oracle.brute_force_log_likelihood(x, theta) == pytest.approx(np.logaddexp.reduce(terms), rel=1e-13)

    def test_constant_emission_shift(self, monkeypatch):
        theta, x = instance(5, T=7)
        base = oracle.exact_log_likelihood(x, theta)
        real = oracle.segment_score_table
        c = 0.37

        def shifted(xx, p):
            E = real(xx, p)
            T, M, _ = E.shape
            lengths = np.minimum(np.arange(1, M + 1)[None, :], (T - np.arange(T))[:, None])
            return E + c * lengths[:, :, None]

        monkeypatch.setattr(oracle, "segment_score_table", shifted)
        assert oracle.exact_log_likelihood(x, theta) == pytest.approx(base + 7 * c, rel=1e-12)

    def test_joint_never_exceeds_likelihood(self):
        theta, x = instance(6, T=5)
        ll = oracle.exact_log_likelihood(x, theta)
        assert max(joint_log_prob(x, p, theta) for p in all_paths(5, 3, 3)) <= ll


class TestMap:
    @pytest.mark.parametrize("self_transitions", [True, False])
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_enumeration(self, seed, self_transitions):
        theta, x = instance(seed + 10, T=6, self_transitions=self_transitions)
        path = oracle.map_segmentation(x, theta)
        assert path.is_valid(3, 3)
        best = max(joint_log_prob(x, p, theta) for p in all_paths(6, 3, 3, self_transitions))
        assert joint_log_prob(x, path, theta) == pytest.approx(best, rel=1e-12)

    def test_beats_random_paths_on_longer_sequence(self):
        theta, x = instance(20, K=3, M=5, T=40)
        score = joint_log_prob(x, oracle.map_segmentation(x, theta), theta)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            segs, s = [], 0
            while s < 40:
                k, d = int(rng.integers(3)), int(rng.integers(1, 6))
                segs.append((s, k, d))
                s += d
            assert joint_log_prob(x, LatentPath.from_segments(segs, 40), theta) <= score + 1e-9

    def test_tie_break_prefers_small_state_and_duration(self):
        theta, _ = make_params(K=2, M=2, h=2, seed=0)
        s = theta.store
        for name in ("init_logits", "trans_logits", "dur_logits", "W_x", "W_h", "b_h", "h0",
                     "W_mu", "b_mu", "W_sigma", "b_sigma"):
            s.set(name, np.zeros(s[name].shape))
        path = oracle.map_segmentation(np.zeros((3, 2)), theta)
        # two-segment paths tie; the last segment takes state 0 and the shortest length
        assert path.z.tolist() == [0, 0, 0] and path.d.tolist() == [2, 1, 1]

    def test_low_memory_same_path(self):
        theta, x = instance(21, M=4, T=30)
        a, b = oracle.map_segmentation(x, theta), oracle.map_segmentation(x, theta, low_memory=True)
        np.testing.assert_array_equal(a.z, b.z)
        np.testing.assert_array_equal(a.d, b.d)


class TestGuards:
    def test_path_count_matches_enumeration(self):
        for T, K, M, st in [(1, 2, 2, True), (5, 2, 3, False), (6, 3, 3, True), (7, 3, 2, False)]:
            assert oracle.count_paths(T, K, M, st) == sum(1 for _ in oracle.enumerate_segmentations(T, K, M, st))

    def test_brute_force_guard(self):
        theta, x = instance(0, K=3, M=3, T=20)
        with pytest.raises(ResourceError):
            oracle.brute_force_log_likelihood(x, theta)

    def test_cell_guard(self, monkeypatch):
        monkeypatch.setattr(oracle, "MAX_CELLS", 10)
        theta, x = instance(0)
        with pytest.raises(ResourceError):
            oracle.exact_log_likelihood(x, theta)
        with pytest.raises(ResourceError):
            oracle.map_segmentation(x, theta)
