"""Structured inference network q(z, d | x).

A bidirectional LSTM encoder produces per-step context, a backward GRU-style
recurrence folds it into summaries ``I_t`` (seeing x_t..x_T directly and the
past through the encoder), and two linear heads give categorical logits over
states and durations.  Sampling walks the sequence forwards: at segment
boundaries a joint (state, duration) pair is drawn with Gumbel-Softmax; inside
a segment the countdown is copied deterministically.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ContractViolation, ShapeError
from .generative import LatentPath, Sequence
from .numerics import NEG_MASK, ParamStore

PHI_NAMES = ("enc_fwd_W", "enc_fwd_b", "enc_bwd_W", "enc_bwd_b",
             "sum_W", "sum_U", "sum_b", "sum_end", "W_z", "W_d")

HARD_ST = "hard-st"
RELAXED = "relaxed"


def phi_shapes(K: int, M: int, m: int, e: int, q: int) -> dict[str, tuple]:
    return {
        "enc_fwd_W": (4 * e, m + e), "enc_fwd_b": (4 * e,),
        "enc_bwd_W": (4 * e, m + e), "enc_bwd_b": (4 * e,),
        "sum_W": (3 * q, m + 2 * e), "sum_U": (3 * q, q), "sum_b": (3 * q,), "sum_end": (q,),
        "W_z": (q, K), "W_d": (q, M),
    }


@dataclass
class InferenceParams:
    K: int
    M: int
    m: int
    e: int
    q: int
    store: ParamStore

    def __post_init__(self):
        expected = phi_shapes(self.K, self.M, self.m, self.e, self.q)
        if self.store.shapes() != expected:
            raise ShapeError(f"inference parameter shapes {self.store.shapes()} != {expected}")

    @classmethod
    def initialize(cls, K: int, M: int, m: int, e: int, q: int,
                   rng: np.random.Generator) -> "InferenceParams":
        """Weights ~ N(0, 1/fan_in); LSTM forget-gate biases start at 1."""
        store = ParamStore()
        for side in ("fwd", "bwd"):
            store.register(f"enc_{side}_W", rng.normal(0.0, 1.0 / np.sqrt(m + e), (4 * e, m + e)))
            b = np.zeros(4 * e)
            b[e:2 * e] = 1.0
            store.register(f"enc_{side}_b", b)
        store.register("sum_W", rng.normal(0.0, 1.0 / np.sqrt(m + 2 * e), (3 * q, m + 2 * e)))
        store.register("sum_U", rng.normal(0.0, 1.0 / np.sqrt(q), (3 * q, q)))
        store.register("sum_b", np.zeros(3 * q))
        store.register("sum_end", np.zeros(q))
        store.register("W_z", rng.normal(0.0, 1.0 / np.sqrt(q), (q, K)))
        store.register("W_d", rng.normal(0.0, 1.0 / np.sqrt(q), (q, M)))
        return cls(K, M, m, e, q, store)

    def view(self) -> dict[str, np.ndarray]:
        return self.store.view()

    def copy(self) -> "InferenceParams":
        return InferenceParams(self.K, self.M, self.m, self.e, self.q, self.store.copy())


@dataclass
class RelaxedPath:
    """One posterior draw: relaxed boundary samples plus their hard decoding.

    ``noise`` is the full T x (K*M) Gumbel matrix; only rows at boundary steps
    are used.  ``y`` maps each boundary step to its simplex sample.
    """
    hard: LatentPath
    y: dict
    noise: np.ndarray
    log_q: float
    tau: float
    mode: str


def _mapping(params) -> Mapping:
    return params.view() if isinstance(params, InferenceParams) else params


def _xs(x) -> np.ndarray:
    return x.x if isinstance(x, Sequence) else np.asarray(x, dtype=np.float64)


def lstm_cell(x_t, h, c, W, b):
    """One LSTM step, gate order (input, forget, candidate, output)."""
    e = nx.value_of(h).shape[0]
    a = nx.add(nx.matvec(W, nx.concat([x_t, h])), b)
    i = nx.sigmoid(nx.take(a, slice(0, e)))
    f = nx.sigmoid(nx.take(a, slice(e, 2 * e)))
    g = nx.tanh(nx.take(a, slice(2 * e, 3 * e)))
    o = nx.sigmoid(nx.take(a, slice(3 * e, 4 * e)))
    c = nx.add(nx.mul(f, c), nx.mul(i, g))
    return nx.mul(o, nx.tanh(c)), c


def summary_cell(u, prev, W, U, b):
    """Gated recurrent step ``I_t = g(I_{t+1}, u_t)`` (gate order reset, update, new)."""
    q = nx.value_of(prev).shape[0]
    wu = nx.add(nx.matvec(W, u), b)
    r = nx.sigmoid(nx.add(nx.take(wu, slice(0, q)), nx.matvec(nx.take(U, slice(0, q)), prev)))
    z = nx.sigmoid(nx.add(nx.take(wu, slice(q, 2 * q)), nx.matvec(nx.take(U, slice(q, 2 * q)), prev)))
    n = nx.tanh(nx.add(nx.take(wu, slice(2 * q, 3 * q)),
                       nx.matvec(nx.take(U, slice(2 * q, 3 * q)), nx.mul(r, prev))))
    return nx.add(nx.mul(nx.sub(1.0, z), n), nx.mul(z, prev))


def _encode_rows(xs: np.ndarray, p: Mapping, init_state=None):
    T = xs.shape[0]
    e = nx.value_of(p["enc_fwd_b"]).shape[0] // 4
    h, c = (np.zeros(e), np.zeros(e)) if init_state is None else init_state
    fwd = []
    for t in range(T):
        h, c = lstm_cell(xs[t], h, c, p["enc_fwd_W"], p["enc_fwd_b"])
        fwd.append(h)
    final = (nx.value_of(h).copy(), nx.value_of(c).copy())
    h, c = np.zeros(e), np.zeros(e)
    bwd = [None] * T
    for t in range(T - 1, -1, -1):
        h, c = lstm_cell(xs[t], h, c, p["enc_bwd_W"], p["enc_bwd_b"])
        bwd[t] = h
    return [nx.concat([fwd[t], bwd[t]]) for t in range(T)], final


def _summary_rows(xs: np.ndarray, hhat_rows, p: Mapping):
    T = xs.shape[0]
    out = [None] * T
    state = p["sum_end"]
    for t in range(T - 1, -1, -1):
        state = summary_cell(nx.concat([xs[t], hhat_rows[t]]), state, p["sum_W"], p["sum_U"], p["sum_b"])
        out[t] = state
    return out


def encode_bidirectional(x, params, init_state=None) -> np.ndarray:
    """T x 2e matrix: forward LSTM output after x_1..x_t next to backward output after x_T..x_t."""
    rows, _ = _encode_rows(_xs(x), _mapping(params), init_state)
    return np.stack([nx.value_of(r) for r in rows])


def backward_summaries(x, hhat, params) -> np.ndarray:
    """T x q summaries computed from the learned terminal vector backwards."""
    xs = _xs(x)
    hhat = np.asarray(hhat, dtype=np.float64)
    if hhat.shape[0] != xs.shape[0]:
        raise ShapeError(f"encoder rows {hhat.shape[0]} != sequence length {xs.shape[0]}")
    rows = _summary_rows(xs, list(hhat), _mapping(params))
    return np.stack([nx.value_of(r) for r in rows])


def posterior_logits(I_t, params):
    """Raw state and duration logits ``(W_z^T I_t, W_d^T I_t)``."""
    p = _mapping(params)
    return nx.matvec(nx.transpose(p["W_z"]), I_t), nx.matvec(nx.transpose(p["W_d"]), I_t)


def joint_log_probs(I_t, params, forbid_state: int | None = None):
    """K x M log-probabilities of the joint pair, ``log softmax(lz)[k] + log softmax(ld)[j]``."""
    lz, ld = posterior_logits(I_t, params)
    if forbid_state is not None:
        mask = np.zeros(nx.value_of(lz).shape[0])
        mask[forbid_state] = NEG_MASK
        lz = nx.add(lz, mask)
    return nx.outer_sum(nx.log_softmax(lz), nx.log_softmax(ld))


def gumbel_softmax(logits, tau: float, g):
    """Concrete sample ``softmax((logits + g) / tau)``."""
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    return nx.softmax(nx.mul(nx.add(logits, np.asarray(g, dtype=np.float64)), 1.0 / tau))


def walk(xs: np.ndarray, p: Mapping, tau: float, noise: np.ndarray, mode: str = HARD_ST,
         self_transitions: bool = True, init_state=None):
    """Forward posterior walk shared by sampling and the differentiable ELBO.

    Returns ``(hard_path, steps, final_encoder_state)`` where ``steps`` lists
    ``(t, length, pair_weights, log_probs)`` per boundary; ``pair_weights`` is
    what the generative side consumes (straight-through one-hot or relaxed
    sample) and ``log_probs`` is the K x M posterior log-table at ``t``.
    """
    if mode not in (HARD_ST, RELAXED):
        raise ContractViolation(f"unknown sampling mode {mode!r}")
    T = xs.shape[0]
    K = nx.value_of(p["W_z"]).shape[1]
    M = nx.value_of(p["W_d"]).shape[1]
    if noise.shape != (T, K * M):
        raise ShapeError(f"noise shape {noise.shape} != {(T, K * M)}")
    rows, final = _encode_rows(xs, p, init_state)
    summaries = _summary_rows(xs, rows, p)
    z = np.empty(T, dtype=np.int64)
    d = np.empty(T, dtype=np.int64)
    steps = []
    for t in range(T):
        if t > 0 and d[t - 1] > 1:
            z[t], d[t] = z[t - 1], d[t - 1] - 1
            continue
        forbid = None if (self_transitions or t == 0) else int(z[t - 1])
        logp = joint_log_probs(summaries[t], p, forbid)
        flat = nx.reshape(logp, (K * M,))
        y = gumbel_softmax(flat, tau, noise[t])
        pick = int(np.argmax(nx.value_of(flat) + noise[t]))
        if mode == HARD_ST:
            onehot = np.zeros(K * M)
            onehot[pick] = 1.0
            y = nx.straight_through(onehot, y)
        z[t], d[t] = divmod(pick, M)
        d[t] += 1
        steps.append((t, int(min(d[t], T - t)), nx.reshape(y, (K, M)), logp))
    return LatentPath(z, d), steps, final


def sample_posterior_path(x, params, tau: float, rng: np.random.Generator | None,
                          mode: str = HARD_ST, self_transitions: bool = True,
                          noise: np.ndarray | None = None) -> RelaxedPath:
    """Draw one path from q(z, d | x).

    The Gumbel noise is a full T x (K*M) block drawn up front (or supplied as
    ``noise``); ``noise = zeros`` gives greedy argmax decoding.
    """
    xs = _xs(x)
    p = _mapping(params)
    K = p["W_z"].shape[1]
    M = p["W_d"].shape[1]
    if noise is None:
        noise = rng.gumbel(size=(xs.shape[0], K * M))
    hard, steps, _ = walk(xs, p, tau, noise, mode, self_transitions)
    log_q = 0.0
    y = {}
    for t, _, _, logp in steps:
        y[t] = gumbel_softmax(logp.reshape(-1), tau, noise[t])
        log_q += float(logp[hard.z[t], hard.d[t] - 1])
    return RelaxedPath(hard, y, noise, log_q, tau, mode)


def boundary_log_tables(x, params, self_transitions: bool = True) -> np.ndarray:
    """All boundary log-tables at once, shape T x (K+1) x K x M.

    Slot 0 is the unmasked table; slot ``k+1`` is the table used when the
    previous segment was in state ``k`` and self-transitions are forbidden.
    """
    xs = _xs(x)
    p = _mapping(params)
    K = p["W_z"].shape[1]
    M = p["W_d"].shape[1]
    rows, _ = _encode_rows(xs, p)
    summaries = _summary_rows(xs, rows, p)
    out = np.empty((xs.shape[0], K + 1, K, M))
    for t, I_t in enumerate(summaries):
        out[t, 0] = joint_log_probs(I_t, p)
        for k in range(K):
            out[t, k + 1] = out[t, 0] if self_transitions else joint_log_probs(I_t, p, k)
    return out


def path_log_prob_from_tables(path: LatentPath, tables: np.ndarray, self_transitions: bool = True) -> float:
    total = 0.0
    for t in path.boundaries():
        if t > 0 and not self_transitions and path.z[t] == path.z[t - 1]:
            return -np.inf
        slot = 0 if (self_transitions or t == 0) else int(path.z[t - 1]) + 1
        total += float(tables[t, slot, path.z[t], path.d[t] - 1])
    return total


def posterior_log_prob(path: LatentPath, x, params, self_transitions: bool = True) -> float:
    """log q(z, d | x): boundary log-probabilities summed; ``-inf`` off-support."""
    xs = _xs(x)
    p = _mapping(params)
    K = p["W_z"].shape[1]
    M = p["W_d"].shape[1]
    if len(path) != xs.shape[0]:
        raise ShapeError(f"path length {len(path)} != sequence length {xs.shape[0]}")
    if not path.is_valid(K, M):
        return -np.inf
    return path_log_prob_from_tables(path, boundary_log_tables(xs, p, self_transitions), self_transitions)
