"""Exact inference for the segment model at desk scale.

Segments are conditionally independent given their (state, duration), so
the likelihood and the MAP path follow from a dynamic program over segment
boundaries.  The brute-force enumerator exists only to validate it.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import ResourceError
from .generative import GenerativeParams, LatentPath, Sequence, log_tables, segment_log_prob
from .numerics import LOG_2PI

MAX_CELLS = 10**7
MAX_PATHS = 10**6


def _xs(x) -> np.ndarray:
    return x.x if isinstance(x, Sequence) else np.asarray(x, dtype=np.float64)


def _guard(T: int, params: GenerativeParams) -> None:
    if params.K * params.M * T > MAX_CELLS:
        raise ResourceError(f"K*M*T = {params.K * params.M * T} exceeds the exact-inference guard {MAX_CELLS}")


def segment_score_table(x, params: GenerativeParams) -> np.ndarray:
    """E[t, d-1, k]: emission log-density of the segment starting at ``t`` with
    duration ``d`` in state ``k``; durations past the end reuse the truncated sum.
    """
    xs = _xs(x)
    T, m = xs.shape
    p = params.view()
    K, M = params.K, params.M
    E = np.empty((T, M, K))
    starts = np.arange(T)
    for k in range(K):
        H = np.tile(p["h0"][k], (T, 1))
        x_prev = np.zeros((T, m))
        cum = np.zeros(T)
        for i in range(M):
            pos = np.minimum(starts + i, T - 1)
            valid = starts + i < T
            H = np.tanh(x_prev @ p["W_x"][k].T + H @ p["W_h"][k].T + p["b_h"][k])
            mean = H @ p["W_mu"][k].T + p["b_mu"][k]
            log_var = H @ p["W_sigma"][k].T + p["b_sigma"][k]
            obs = xs[pos]
            ll = -0.5 * np.sum(LOG_2PI + log_var + (obs - mean) ** 2 * np.exp(-log_var), axis=1)
            cum = np.where(valid, cum + ll, cum)
            E[:, i, k] = cum
            x_prev = obs
    return E


def _scores_from(xs: np.ndarray, s: int, p: dict, M: int) -> np.ndarray:
    """Rows E[s] (M x K) computed on demand, all states at once."""
    T, m = xs.shape
    K = p["h0"].shape[0]
    out = np.empty((M, K))
    H = p["h0"].copy()
    x_prev = np.zeros(m)
    cum = np.zeros(K)
    for i in range(M):
        if s + i < T:
            H = np.tanh(p["W_x"] @ x_prev + np.einsum("kij,kj->ki", p["W_h"], H) + p["b_h"])
            mean = np.einsum("kij,kj->ki", p["W_mu"], H) + p["b_mu"]
            log_var = np.einsum("kij,kj->ki", p["W_sigma"], H) + p["b_sigma"]
            cum = cum - 0.5 * np.sum(LOG_2PI + log_var + (xs[s + i] - mean) ** 2 * np.exp(-log_var), axis=1)
            x_prev = xs[s + i]
        out[i] = cum
    return out


def _score_rows(xs, params, low_memory):
    if low_memory:
        p = params.view()
        return lambda s: _scores_from(xs, s, p, params.M)
    E = segment_score_table(xs, params)
    return lambda s: E[s]


def _tail(log_dur: np.ndarray) -> np.ndarray:
    """tail[k, L-1] = log sum_{d >= L} p(d | k)."""
    return np.logaddexp.accumulate(log_dur[:, ::-1], axis=1)[:, ::-1]


def exact_log_likelihood(x, params: GenerativeParams, low_memory: bool = False) -> float:
    """log p(x) summed over every valid (z, d) path, final segment right-censored."""
    xs = _xs(x)
    T = xs.shape[0]
    _guard(T, params)
    K, M = params.K, params.M
    log_init, log_trans, log_dur = log_tables(params.view(), params.self_transitions, exact=True)
    tail = _tail(log_dur)
    rows = _score_rows(xs, params, low_memory)
    # alpha[t, k]: mass of prefixes whose last segment (state k) ends just before t
    alpha = np.full((T + 1, K), -np.inf)
    final = np.full(K, -np.inf)
    for s in range(T):
        if s == 0:
            enter = log_init
        else:
            enter = logsumexp(alpha[s][:, None] + log_trans, axis=0)
        if not np.any(np.isfinite(enter)):
            continue
        E = rows(s)
        remaining = T - s
        for d in range(1, min(M, remaining - 1) + 1):
            alpha[s + d] = np.logaddexp(alpha[s + d], enter + log_dur[:, d - 1] + E[d - 1])
        if remaining <= M:
            final = np.logaddexp(final, enter + tail[:, remaining - 1] + E[remaining - 1])
    return float(logsumexp(final))


def map_segmentation(x, params: GenerativeParams, low_memory: bool = False) -> LatentPath:
    """Most probable valid path by max-product over segment boundaries.

    Ties are broken walking back from the end: each segment prefers the
    smaller state index, then the shorter duration.
    """
    xs = _xs(x)
    T = xs.shape[0]
    _guard(T, params)
    K, M = params.K, params.M
    log_init, log_trans, log_dur = log_tables(params.view(), params.self_transitions, exact=True)
    rows = _score_rows(xs, params, low_memory)
    best = np.full((T + 1, K), -np.inf)
    back_start = np.full((T + 1, K), -1, dtype=np.int64)
    back_prev = np.full((T + 1, K), -1, dtype=np.int64)
    # terminal: best censored duration for each remaining length
    tail_best = np.empty((K, M))
    tail_arg = np.empty((K, M), dtype=np.int64)
    for L in range(1, M + 1):
        sub = log_dur[:, L - 1:]
        tail_arg[:, L - 1] = np.argmax(sub, axis=1) + L
        tail_best[:, L - 1] = np.max(sub, axis=1)
    fin_score = np.full(K, -np.inf)
    fin_start = np.full(K, -1, dtype=np.int64)
    fin_prev = np.full(K, -1, dtype=np.int64)
    for s in range(T):
        if s == 0:
            enter, prev = log_init, np.full(K, -1)
        else:
            cand = best[s][:, None] + log_trans
            prev = np.argmax(cand, axis=0)
            enter = cand[prev, np.arange(K)]
        E = rows(s)
        remaining = T - s
        for d in range(1, min(M, remaining - 1) + 1):
            score = enter + log_dur[:, d - 1] + E[d - 1]
            better = score >= best[s + d]
            best[s + d] = np.where(better, score, best[s + d])
            back_start[s + d] = np.where(better, s, back_start[s + d])
            back_prev[s + d] = np.where(better, prev, back_prev[s + d])
        if remaining <= M:
            score = enter + tail_best[:, remaining - 1] + E[remaining - 1]
            better = score >= fin_score
            fin_score = np.where(better, score, fin_score)
            fin_start = np.where(better, s, fin_start)
            fin_prev = np.where(better, prev, fin_prev)
    k = int(np.argmax(fin_score))
    if not np.isfinite(fin_score[k]):
        raise ValueError("no valid path has finite probability")
    s = int(fin_start[k])
    segments = [(s, k, int(tail_arg[k, T - s - 1]))]
    pk = int(fin_prev[k])
    end = s
    while end > 0:
        s = int(back_start[end, pk])
        nk = int(back_prev[end, pk])
        segments.append((s, pk, end - s))
        end, pk = s, nk
    segments.reverse()
    return LatentPath.from_segments(segments, T)


def count_paths(T: int, K: int, M: int, self_transitions: bool = True) -> int:
    """Number of countdown-valid (z, d) paths of length ``T``."""
    later = K if self_transitions else K - 1
    return K * sum(1 if d >= T else _fill(T - d, M, later) for d in range(1, M + 1))


@lru_cache(maxsize=None)
def _fill(r: int, M: int, choices: int) -> int:
    # ways to cover r remaining steps when each new segment has `choices` states
    return choices * sum(1 if d >= r else _fill(r - d, M, choices) for d in range(1, M + 1))


def enumerate_segmentations(T: int, K: int, M: int, self_transitions: bool = True):
    """Yield every valid path as a list of (start, state, nominal duration)."""
    def rec(s, prev, acc):
        if s >= T:
            yield list(acc)
            return
        for k in range(K):
            if prev is not None and not self_transitions and k == prev:
                continue
            for d in range(1, M + 1):
                acc.append((s, k, d))
                yield from rec(s + d, k, acc)
                acc.pop()

    yield from rec(0, None, [])


def brute_force_log_likelihood(x, params: GenerativeParams) -> float:
    """log-sum-exp of the joint over every valid path, enumerated explicitly.

    Segment emission terms come from ``generative.segment_log_prob`` (memoised
    per segment) so each path's score equals ``joint_log_prob`` of that path.
    """
    xs = _xs(x)
    T = xs.shape[0]
    K, M = params.K, params.M
    n = count_paths(T, K, M, params.self_transitions)
    if n > MAX_PATHS:
        raise ResourceError(f"{n} paths exceed the enumeration guard {MAX_PATHS}")
    log_init, log_trans, log_dur = log_tables(params.view(), params.self_transitions, exact=True)
    eye = np.eye(K)
    p = params.view()

    @lru_cache(maxsize=None)
    def seg(s, length, k):
        return float(segment_log_prob(xs, s, length, eye[k], p))

    def rec(s, prev, acc, out):
        if s >= T:
            out.append(acc)
            return
        for k in range(K):
            head = log_init[k] if prev is None else log_trans[prev, k]
            if head == -np.inf:
                continue
            for d in range(1, M + 1):
                rec(s + d, k, acc + head + log_dur[k, d - 1] + seg(s, min(d, T - s), k), out)

    scores: list[float] = []
    rec(0, None, 0.0, scores)
    return float(logsumexp(scores))
