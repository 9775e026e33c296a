"""Pure-Python ELBO kernel built on the reverse-mode tape.

Same signature and return layout as the compiled ``_ckernel.elbo_and_grad``.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .generative import soft_path_log_prob
from .inference import HARD_ST, RELAXED, walk


def elbo_graph(xs, theta, phi, noise, tau, relaxed=False, self_transitions=True, enc_state=None):
    """Build F = log p(x, path) - log q(path) for one frozen-noise draw.

    ``theta``/``phi`` map names to arrays or tensors.  Returns
    ``(F, log_joint, log_q, hard_path, final_encoder_state)``.
    """
    mode = RELAXED if relaxed else HARD_ST
    hard, steps, final = walk(xs, phi, tau, noise, mode, self_transitions, enc_state)
    log_joint = soft_path_log_prob(xs, [(t, ln, pair) for t, ln, pair, _ in steps], theta, self_transitions)
    log_q = 0.0
    for _, _, pair, logp in steps:
        log_q = nx.add(log_q, nx.dot(pair, logp))
    return nx.sub(log_joint, log_q), log_joint, log_q, hard, final


def elbo_and_grad(x, theta, phi, noise, tau, relaxed=False, self_transitions=True,
                  need_grad=True, enc_state=None):
    xs = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if need_grad:
        tl = {k: nx.Tensor(v, name=k) for k, v in theta.items()}
        pl = {k: nx.Tensor(v, name=k) for k, v in phi.items()}
    else:
        tl, pl = dict(theta), dict(phi)
    F, lj, lq, hard, final = elbo_graph(xs, tl, pl, noise, tau, relaxed, self_transitions, enc_state)
    out = (float(nx.value_of(F)), float(nx.value_of(lj)), float(nx.value_of(lq)), hard.z, hard.d)
    if not need_grad:
        return (*out, None, None, final)
    grads = nx.gradient(F, {**{"theta." + k: v for k, v in tl.items()},
                            **{"phi." + k: v for k, v in pl.items()}}).grads
    g_theta = {k: grads["theta." + k] for k in theta}
    g_phi = {k: grads["phi." + k] for k in phi}
    return (*out, g_theta, g_phi, final)
