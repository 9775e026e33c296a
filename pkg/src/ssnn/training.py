"""ELBO estimation, gradients, ADAM and the stochastic training loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence as Seq

import numpy as np

from . import kernels
from .errors import ContractViolation, NonFiniteError
from .generative import GenerativeParams, Sequence
from .inference import HARD_ST, RELAXED, InferenceParams, RelaxedPath

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 500
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau_start: float = 0.15
    tau_end: float = 0.01
    anneal_steps: int | None = None
    mode: str = HARD_ST
    clip_norm: float = 10.0
    seed: int = 0
    bptt_chunk: int | None = None
    samples: int = 1
    K: int = 3
    M: int = 10
    h: int = 8
    e: int = 8
    q: int = 8
    self_transitions: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0 or self.samples < 1:
            raise ContractViolation("batch_size and samples must be >= 1, iterations >= 0")
        if not (self.tau_start >= self.tau_end > 0):
            raise ContractViolation(f"need tau_start >= tau_end > 0, got {self.tau_start}, {self.tau_end}")
        if self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ContractViolation("learning_rate and clip_norm must be positive")
        if self.mode not in (HARD_ST, RELAXED):
            raise ContractViolation(f"mode must be {HARD_ST!r} or {RELAXED!r}")
        if self.mode == RELAXED and not self.self_transitions:
            raise ContractViolation("relaxed mode requires self_transitions=True")
        if self.bptt_chunk is not None and self.bptt_chunk < 1:
            raise ContractViolation("bptt_chunk must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(dict(record))

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def elbos(self) -> np.ndarray:
        return np.array([r["elbo"] for r in self.records])


def _noise(rng: np.random.Generator, T: int, N: int) -> np.ndarray:
    return rng.gumbel(size=(T, N))


def elbo_term(x, path: RelaxedPath, theta: GenerativeParams, phi: InferenceParams) -> float:
    """F = log p(x, z, d) - log q(z, d | x) for the path's frozen noise.

    In relaxed mode the generative side consumes the simplex samples.
    """
    xs = x.x if isinstance(x, Sequence) else np.asarray(x, dtype=np.float64)
    res = kernels.elbo_and_grad(xs, theta.view(), phi.view(), path.noise, path.tau,
                                relaxed=path.mode == RELAXED, self_transitions=theta.self_transitions,
                                need_grad=False)
    if not np.isfinite(res.elbo):
        raise NonFiniteError(f"ELBO term is {res.elbo}: posterior path left the prior support")
    return res.elbo


def elbo_gradients(batch: Seq[Sequence], theta: GenerativeParams, phi: InferenceParams, tau: float,
                   rng: np.random.Generator | None = None, *, noises=None, mode: str = HARD_ST,
                   samples: int = 1, chunk: int | None = None, iteration: int | None = None):
    """Batch-mean ELBO and its gradients (ascent direction) for theta and phi.

    One noise draw per sequence and sample unless ``noises`` (one T x K*M
    array per sequence) freezes them.  With ``chunk`` each sequence is cut
    into pieces whose forward-encoder state is carried (without gradient)
    from one piece to the next.
    """
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    K, M = theta.K, theta.M
    tv, pv = theta.view(), phi.view()
    g_theta = {k: np.zeros_like(v) for k, v in tv.items()}
    g_phi = {k: np.zeros_like(v) for k, v in pv.items()}
    total = 0.0
    count = 0
    for b, seq in enumerate(batch):
        for s in range(samples):
            bounds = [(0, seq.T)] if not chunk else [(o, min(o + chunk, seq.T)) for o in range(0, seq.T, chunk)]
            state = None
            for lo, hi in bounds:
                if noises is not None:
                    g = np.asarray(noises[b])[lo:hi]
                else:
                    g = _noise(rng, hi - lo, K * M)
                res = kernels.elbo_and_grad(seq.x[lo:hi], tv, pv, g, tau, relaxed=mode == RELAXED,
                                            self_transitions=theta.self_transitions, encoder_state=state)
                state = res.encoder_state
                total += res.elbo
                for k in g_theta:
                    g_theta[k] += res.grad_theta[k]
                for k in g_phi:
                    g_phi[k] += res.grad_phi[k]
            count += 1
    for grads in (g_theta, g_phi):
        for k in grads:
            grads[k] /= count
            if not np.all(np.isfinite(grads[k])):
                where = f" at iteration {iteration}" if iteration is not None else ""
                raise NonFiniteError(f"non-finite gradient for parameter {k!r}{where}")
    mean = total / count
    if not np.isfinite(mean):
        raise NonFiniteError(f"non-finite ELBO{'' if iteration is None else f' at iteration {iteration}'}")
    return g_theta, g_phi, mean


def clip_gradients(grads: list[dict], max_norm: float) -> float:
    """Scale all gradient arrays in place so their joint norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for d in grads for g in d.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for d in grads:
            for k in d:
                d[k] = d[k] * scale
    return norm


def adam_step(params, grads: dict, state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """One bias-corrected ADAM descent step on ``params`` (a ParamStore) in place."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1 ** t)
        v_hat = state.v[name] / (1.0 - beta2 ** t)
        params.set(name, params[name] - lr * m_hat / (np.sqrt(v_hat) + eps))
    return state


def anneal_temperature(step: int, config: TrainConfig) -> float:
    """Exponential schedule from tau_start to tau_end, clamped at tau_end."""
    if step < 0:
        raise ContractViolation("step must be >= 0")
    total = config.anneal_steps if config.anneal_steps is not None else config.iterations
    if config.tau_start == config.tau_end:
        return config.tau_start
    if total <= 0:
        return config.tau_start if step == 0 else config.tau_end
    frac = min(step / total, 1.0)
    tau = config.tau_start * (config.tau_end / config.tau_start) ** frac
    return max(tau, config.tau_end)


def _grad_norm(d: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in d.values())))


def train(dataset, theta0: GenerativeParams, phi0: InferenceParams, config: TrainConfig, *,
          history_path=None, checkpoint: Callable[[GenerativeParams, InferenceParams, int], None] | None = None,
          callback: Callable[[int, GenerativeParams, InferenceParams, dict], None] | None = None):
    """Stochastic variational training.

    Each iteration draws a mini-batch uniformly (without replacement when
    possible), samples one posterior path per sequence, and takes an ADAM
    step on the negative batch-mean ELBO.  History records are appended to
    ``history_path`` as JSON lines.  ``checkpoint(theta, phi, iteration)``
    is called every ``config.checkpoint_every`` iterations and only after a
    finite update.
    """
    seqs = list(getattr(dataset, "sequences", dataset))
    if not seqs:
        raise ContractViolation("dataset is empty")
    if any(s.m != theta0.m for s in seqs) or theta0.m != phi0.m:
        raise ContractViolation(f"observation dims {sorted({s.m for s in seqs})} do not match model m={theta0.m}")
    if (theta0.K, theta0.M) != (phi0.K, phi0.M):
        raise ContractViolation("generative and inference parameters disagree on K or M")
    if config.mode == RELAXED and not theta0.self_transitions:
        raise ContractViolation("relaxed mode requires self-transitions")
    theta, phi = theta0.copy(), phi0.copy()
    opt_theta, opt_phi = OptimizerState(), OptimizerState()
    history = TrainHistory()
    n = len(seqs)
    sink = open(history_path, "w") if history_path is not None else None
    start = time.perf_counter()
    try:
        for it in range(config.iterations):
            tau = anneal_temperature(it, config)
            pick_rng = np.random.default_rng([config.seed, it])
            idx = pick_rng.choice(n, size=config.batch_size, replace=config.batch_size > n)
            g_theta, g_phi, mean, total_n = _batch_grads(seqs, idx, theta, phi, tau, config, it)
            norm_theta, norm_phi = _grad_norm(g_theta), _grad_norm(g_phi)
            clip_gradients([g_theta, g_phi], config.clip_norm)
            # descend on the negative ELBO
            adam_step(theta.store, {k: -v for k, v in g_theta.items()}, opt_theta, config.learning_rate,
                      config.beta1, config.beta2, config.eps)
            adam_step(phi.store, {k: -v for k, v in g_phi.items()}, opt_phi, config.learning_rate,
                      config.beta1, config.beta2, config.eps)
            record = {"iteration": it, "elbo": mean, "tau": tau,
                      "grad_norm_theta": norm_theta, "grad_norm_phi": norm_phi}
            history.append({**record, "wall_time": time.perf_counter() - start})
            if sink is not None:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
            if checkpoint is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                checkpoint(theta, phi, it + 1)
            if callback is not None:
                callback(it, theta, phi, record)
    finally:
        if sink is not None:
            sink.close()
    return theta, phi, history


def _batch_grads(seqs, idx, theta, phi, tau, config, it):
    g_theta = g_phi = None
    total = 0.0
    for i in idx:
        rng = np.random.default_rng([config.seed, it, int(i)])
        gt, gp, mean = elbo_gradients([seqs[i]], theta, phi, tau, rng, mode=config.mode,
                                      samples=config.samples, chunk=config.bptt_chunk, iteration=it)
        if g_theta is None:
            g_theta, g_phi = gt, gp
        else:
            for k in g_theta:
                g_theta[k] += gt[k]
            for k in g_phi:
                g_phi[k] += gp[k]
        total += mean
    B = len(idx)
    for d in (g_theta, g_phi):
        for k in d:
            d[k] /= B
    return g_theta, g_phi, total / B, B


def _fd_error(fn, analytic: dict, params: dict, step: float) -> float:
    worst = 0.0
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += step
            minus[idx] -= step
            fd = (fn({**params, name: plus}) - fn({**params, name: minus})) / (2.0 * step)
            worst = max(worst, abs(analytic[name][idx] - fd) / max(1.0, abs(fd)))
    return worst


def gradient_audit(T: int = 4, K: int = 2, M: int = 2, m: int = 2, h: int = 3, e: int = 3, q: int = 3,
                   seed: int = 0, tau: float = 0.5, step: float = 1e-5, backend: str | None = None) -> dict:
    """Max relative error of ELBO gradients against central differences.

    Noise is frozen.  In hard-ST mode the path is piecewise constant in
    theta, so the theta gradient is exact and audited there; the phi
    gradient of hard-ST is a surrogate, so phi is audited in relaxed mode
    where F is smooth in both parameter sets.
    """
    rng = np.random.default_rng(seed)
    theta = GenerativeParams.initialize(K, M, m, h, rng)
    phi = InferenceParams.initialize(K, M, m, e, q, rng)
    x = rng.normal(size=(T, m))
    noise = rng.gumbel(size=(T, K * M))
    tv, pv = theta.view(), phi.view()
    out = {}
    for label, relaxed in (("hard-st", False), ("relaxed", True)):
        res = kernels.elbo_and_grad(x, tv, pv, noise, tau, relaxed=relaxed, backend=backend)
        f_theta = lambda p: kernels.elbo_and_grad(x, p, pv, noise, tau, relaxed=relaxed, need_grad=False,  # noqa: E731
                                                  backend=backend).elbo
        out[f"theta[{label}]"] = _fd_error(f_theta, res.grad_theta, tv, step)
        if relaxed:
            f_phi = lambda p: kernels.elbo_and_grad(x, tv, p, noise, tau, relaxed=True, need_grad=False,  # noqa: E731
                                                    backend=backend).elbo
            out[f"phi[{label}]"] = _fd_error(f_phi, res.grad_phi, pv, step)
    return out
