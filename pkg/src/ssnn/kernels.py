"""Backend selection for the per-sequence ELBO kernel.

The compiled extension is used when it imports; otherwise the tape-based
pure-Python kernel.  ``SSNN_BACKEND=python`` forces the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _pykernel

BACKEND = "python"
_impl = _pykernel
if os.environ.get("SSNN_BACKEND", "").lower() != "python":
    try:
        from . import _ckernel as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernel


@dataclass
class ElboResult:
    elbo: float
    log_joint: float
    log_q: float
    z: np.ndarray
    d: np.ndarray
    grad_theta: dict | None
    grad_phi: dict | None
    encoder_state: tuple


def elbo_and_grad(x, theta, phi, noise, tau, *, relaxed=False, self_transitions=True,
                  need_grad=True, encoder_state=None, backend: str | None = None) -> ElboResult:
    """F, its parts, the hard path, and (optionally) gradients of F for one noise draw."""
    impl = _impl
    if backend == "python":
        impl = _pykernel
    elif backend == "cython":
        from . import _ckernel as impl  # raises if unavailable
    return ElboResult(*impl.elbo_and_grad(x, theta, phi, noise, tau, relaxed, self_transitions,
                                          need_grad, encoder_state))
