"""Generative side of the model: an HSMM backbone whose segment emissions are
produced by state-conditioned tanh recurrences with Gaussian outputs.

States are 0-based (``0..K-1``); durations are counts in ``1..M``.  A
duration value ``d_t`` is the number of steps remaining in the current segment
including ``t`` (countdown semantics).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ContractViolation, ShapeError
from .numerics import NEG_MASK, ParamStore

THETA_NAMES = ("init_logits", "trans_logits", "dur_logits", "W_x", "W_h", "b_h", "h0",
               "W_mu", "b_mu", "W_sigma", "b_sigma")


@dataclass
class LatentPath:
    z: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if self.z.shape != self.d.shape or self.z.ndim != 1:
            raise ShapeError(f"z {self.z.shape} and d {self.d.shape} must be equal-length vectors")

    def __len__(self) -> int:
        return len(self.z)

    def is_valid(self, K: int | None = None, M: int | None = None) -> bool:
        """True if the path obeys the countdown rule (and ranges when given)."""
        z, d = self.z, self.d
        if len(z) == 0 or d.min() < 1 or z.min() < 0:
            return False
        if K is not None and z.max() >= K:
            return False
        if M is not None and d.max() > M:
            return False
        held = d[:-1] > 1
        return bool(np.all(z[1:][held] == z[:-1][held]) and np.all(d[1:][held] == d[:-1][held] - 1))

    def boundaries(self) -> np.ndarray:
        """Indices where a fresh (state, duration) pair is drawn."""
        if len(self.z) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(np.concatenate(([True], self.d[:-1] == 1)))

    def segments(self) -> list[tuple[int, int, int]]:
        """(start, state, nominal duration) for every segment."""
        return [(int(s), int(self.z[s]), int(self.d[s])) for s in self.boundaries()]

    @classmethod
    def from_segments(cls, segments, T: int) -> "LatentPath":
        z = np.empty(T, dtype=np.int64)
        d = np.empty(T, dtype=np.int64)
        for start, state, dur in segments:
            stop = min(start + dur, T)
            z[start:stop] = state
            d[start:stop] = dur - np.arange(stop - start)
        return cls(z, d)


@dataclass
class Sequence:
    id: str
    x: np.ndarray
    truth: LatentPath | None = None
    parent: str | None = None
    offset: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ShapeError(f"sequence {self.id!r}: x must be a non-empty T x m matrix, got {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ContractViolation(f"sequence {self.id!r} has non-finite observations")
        if self.truth is not None and len(self.truth) != self.x.shape[0]:
            raise ShapeError(f"sequence {self.id!r}: truth length {len(self.truth)} != T {self.x.shape[0]}")

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]


@dataclass
class GenerativeParams:
    K: int
    M: int
    m: int
    h: int
    store: ParamStore
    self_transitions: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ContractViolation("K and M must be at least 1")
        if not self.self_transitions and self.K < 2:
            raise ContractViolation("forbidding self-transitions needs K >= 2")
        expected = theta_shapes(self.K, self.M, self.m, self.h)
        if self.store.shapes() != expected:
            raise ShapeError(f"generative parameter shapes {self.store.shapes()} != {expected}")

    @classmethod
    def initialize(cls, K: int, M: int, m: int, h: int, rng: np.random.Generator,
                   self_transitions: bool = True) -> "GenerativeParams":
        """Uniform tables with Dirichlet(1) jitter; weights ~ N(0, 1/fan_in)."""
        def table(rows, cols):
            probs = 0.5 / cols + 0.5 * rng.dirichlet(np.ones(cols), size=rows)
            return np.log(probs)

        store = ParamStore()
        store.register("init_logits", table(1, K)[0])
        store.register("trans_logits", table(K, K))
        store.register("dur_logits", table(K, M))
        store.register("W_x", rng.normal(0.0, 1.0 / np.sqrt(m), (K, h, m)))
        store.register("W_h", rng.normal(0.0, 1.0 / np.sqrt(h), (K, h, h)))
        store.register("b_h", np.zeros((K, h)))
        store.register("h0", rng.normal(0.0, 1.0 / np.sqrt(h), (K, h)))
        store.register("W_mu", rng.normal(0.0, 1.0 / np.sqrt(h), (K, m, h)))
        store.register("b_mu", rng.normal(0.0, 1.0, (K, m)))
        store.register("W_sigma", rng.normal(0.0, 1.0 / np.sqrt(h), (K, m, h)))
        store.register("b_sigma", np.zeros((K, m)))
        return cls(K, M, m, h, store, self_transitions)

    def view(self) -> dict[str, np.ndarray]:
        return self.store.view()

    def copy(self) -> "GenerativeParams":
        return GenerativeParams(self.K, self.M, self.m, self.h, self.store.copy(), self.self_transitions)

    @property
    def log_init(self) -> np.ndarray:
        return log_tables(self.view(), self.self_transitions, exact=True)[0]

    @property
    def log_trans(self) -> np.ndarray:
        return log_tables(self.view(), self.self_transitions, exact=True)[1]

    @property
    def log_dur(self) -> np.ndarray:
        return log_tables(self.view(), self.self_transitions, exact=True)[2]


def theta_shapes(K: int, M: int, m: int, h: int) -> dict[str, tuple]:
    return {
        "init_logits": (K,), "trans_logits": (K, K), "dur_logits": (K, M),
        "W_x": (K, h, m), "W_h": (K, h, h), "b_h": (K, h), "h0": (K, h),
        "W_mu": (K, m, h), "b_mu": (K, m), "W_sigma": (K, m, h), "b_sigma": (K, m),
    }


def _mapping(params) -> Mapping:
    return params.view() if isinstance(params, GenerativeParams) else params


def _self_ok(params, default: bool = True) -> bool:
    return params.self_transitions if isinstance(params, GenerativeParams) else default


def log_tables(p: Mapping, self_transitions: bool = True, exact: bool = False):
    """Log initial, transition and duration tables from their logits.

    Forbidden self-transitions get log-probability ``-inf`` when ``exact`` and
    the finite :data:`NEG_MASK` otherwise (safe inside differentiable code).
    """
    trans = p["trans_logits"]
    if not self_transitions:
        K = nx.value_of(trans).shape[0]
        trans = nx.add(trans, np.diag(np.full(K, NEG_MASK)))
    log_trans = nx.log_softmax(trans)
    if exact and not self_transitions:
        log_trans = np.where(np.eye(log_trans.shape[0], dtype=bool), -np.inf, log_trans)
    return nx.log_softmax(p["init_logits"]), log_trans, nx.log_softmax(p["dur_logits"])


def transition_log_probs(z_prev: int, d_prev: int, params: GenerativeParams) -> np.ndarray:
    """Log-distribution over the next (state, duration) pair, flattened state-major."""
    K, M = params.K, params.M
    if not (0 <= z_prev < K and 1 <= d_prev <= M):
        raise ContractViolation(f"(z_prev={z_prev}, d_prev={d_prev}) outside K={K}, M={M}")
    out = np.full((K, M), -np.inf)
    if d_prev > 1:
        out[z_prev, d_prev - 2] = 0.0
    else:
        out = params.log_trans[z_prev][:, None] + params.log_dur
    return out.reshape(-1)


def recurrent_update(h_prev, x_prev, weights, params):
    """h = tanh(W_x x_prev + W_h h_prev + b_h) with state-mixed weight banks."""
    p = _mapping(params)
    Wx, Wh, bh = nx.mix(weights, p["W_x"]), nx.mix(weights, p["W_h"]), nx.mix(weights, p["b_h"])
    return nx.tanh(nx.add(nx.add(nx.matvec(Wx, x_prev), nx.matvec(Wh, h_prev)), bh))


def emission_log_prob(x_t, h_t, weights, params):
    p = _mapping(params)
    mean = nx.add(nx.matvec(nx.mix(weights, p["W_mu"]), h_t), nx.mix(weights, p["b_mu"]))
    log_var = nx.add(nx.matvec(nx.mix(weights, p["W_sigma"]), h_t), nx.mix(weights, p["b_sigma"]))
    return nx.gaussian_log_prob(x_t, mean, log_var)


def _segment(x: np.ndarray, start: int, length: int, weights, p: Mapping):
    Wx, Wh, bh = nx.mix(weights, p["W_x"]), nx.mix(weights, p["W_h"]), nx.mix(weights, p["b_h"])
    Wmu, bmu = nx.mix(weights, p["W_mu"]), nx.mix(weights, p["b_mu"])
    Wsig, bsig = nx.mix(weights, p["W_sigma"]), nx.mix(weights, p["b_sigma"])
    h = nx.mix(weights, p["h0"])
    x_prev = np.zeros(x.shape[1])
    acc = 0.0
    for t in range(start, start + length):
        h = nx.tanh(nx.add(nx.add(nx.matvec(Wx, x_prev), nx.matvec(Wh, h)), bh))
        mean = nx.add(nx.matvec(Wmu, h), bmu)
        log_var = nx.add(nx.matvec(Wsig, h), bsig)
        acc = nx.add(acc, nx.gaussian_log_prob(x[t], mean, log_var))
        x_prev = x[t]
    return acc


def segment_log_prob(x, start: int, dur: int, weights, params):
    """Summed emission log-density of ``x[start:start+dur]`` under one segment.

    The recurrence starts from the state's ``h0`` with a zero previous
    observation.
    """
    xs = x.x if isinstance(x, Sequence) else np.asarray(x, dtype=np.float64)
    if dur < 1 or start < 0 or start + dur > xs.shape[0]:
        raise ContractViolation(f"segment [{start}, {start + dur}) outside sequence of length {xs.shape[0]}")
    return _segment(xs, start, dur, weights, _mapping(params))


def soft_path_log_prob(x: np.ndarray, segments, p: Mapping, self_transitions: bool = True):
    """Joint log-probability with per-segment (state, duration) weight matrices.

    ``segments`` is a list of ``(start, length, pair_weights)`` where
    ``pair_weights`` is a K x M simplex (or one-hot) matrix.  State weights for
    the recurrences are its row sums.  With one-hot weights this equals the
    hard-path joint log-probability.
    """
    log_init, log_trans, log_dur = log_tables(p, self_transitions)
    acc = 0.0
    w_prev = None
    for start, length, pair in segments:
        w = nx.matvec(pair, np.ones(nx.value_of(pair).shape[1]))
        acc = nx.add(acc, nx.dot(pair, log_dur))
        if w_prev is None:
            acc = nx.add(acc, nx.dot(w, log_init))
        else:
            acc = nx.add(acc, nx.dot(w_prev, nx.matvec(log_trans, w)))
        acc = nx.add(acc, _segment(x, start, length, w, p))
        w_prev = w
    return acc


def joint_log_prob(x, path: LatentPath, params) -> float:
    """log p(x, z, d); ``-inf`` for paths that break the countdown rule."""
    xs = x.x if isinstance(x, Sequence) else np.asarray(x, dtype=np.float64)
    p = _mapping(params)
    K, M = np.shape(nx.value_of(p["dur_logits"]))
    if len(path) != xs.shape[0]:
        raise ShapeError(f"path length {len(path)} != sequence length {xs.shape[0]}")
    if xs.shape[1] != np.shape(nx.value_of(p["b_mu"]))[1]:
        raise ShapeError(f"observation dim {xs.shape[1]} != model m {np.shape(nx.value_of(p['b_mu']))[1]}")
    if not path.is_valid(K, M):
        return -np.inf
    log_init, log_trans, log_dur = log_tables(p, _self_ok(params), exact=True)
    T = xs.shape[0]
    eye = np.eye(K)
    total = 0.0
    prev = None
    for start, k, dur in path.segments():
        total += log_dur[k, dur - 1]
        total += log_init[k] if prev is None else log_trans[prev, k]
        total += float(_segment(xs, start, min(dur, T - start), eye[k], p))
        prev = k
    return float(total)


def sample_sequence(params: GenerativeParams, T: int, rng: np.random.Generator,
                    seq_id: str = "sample") -> tuple[Sequence, LatentPath]:
    """Ancestral sample of (x, z, d) of length ``T``."""
    if T < 1:
        raise ContractViolation("T must be at least 1")
    p = params.view()
    log_init, log_trans, log_dur = log_tables(p, params.self_transitions, exact=True)
    K, M, m = params.K, params.M, params.m
    eye = np.eye(K)
    z = np.empty(T, dtype=np.int64)
    d = np.empty(T, dtype=np.int64)
    x = np.empty((T, m))
    h = x_prev = None
    for t in range(T):
        if t == 0 or d[t - 1] == 1:
            probs = np.exp(log_init if t == 0 else log_trans[z[t - 1]])
            k = int(rng.choice(K, p=probs / probs.sum()))
            dp = np.exp(log_dur[k])
            z[t], d[t] = k, int(rng.choice(M, p=dp / dp.sum())) + 1
            h, x_prev = p["h0"][k], np.zeros(m)
        else:
            z[t], d[t] = z[t - 1], d[t - 1] - 1
        w = eye[z[t]]
        h = recurrent_update(h, x_prev, w, p)
        k = z[t]
        mean = p["W_mu"][k] @ h + p["b_mu"][k]
        std = np.exp(0.5 * (p["W_sigma"][k] @ h + p["b_sigma"][k]))
        x[t] = mean + std * rng.standard_normal(m)
        x_prev = x[t]
    path = LatentPath(z, d)
    return Sequence(seq_id, x, truth=path), path
