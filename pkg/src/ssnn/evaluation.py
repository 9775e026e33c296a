"""Segmentation error, latent R² probes and per-dataset evaluation reports."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels, oracle
from .errors import ContractViolation, ResourceError, ShapeError
from .generative import GenerativeParams, LatentPath
from .inference import HARD_ST, InferenceParams, encode_bidirectional, sample_posterior_path

REPORT_VERSION = 1


def _labels(path) -> np.ndarray:
    return np.asarray(path.z if isinstance(path, LatentPath) else path, dtype=np.int64)


def segmentation_error(pred, truth) -> float:
    """Fraction of frames mislabeled after the best one-to-one relabeling.

    Accepts LatentPaths or label vectors.  Predicted labels left without a
    partner (unequal alphabets) count as errors.
    """
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape or p.ndim != 1:
        raise ContractViolation(f"label sequences differ in shape: {p.shape} vs {t.shape}")
    if len(p) == 0:
        return 0.0
    if p.min() < 0 or t.min() < 0:
        raise ContractViolation("labels must be non-negative")
    C = np.zeros((p.max() + 1, t.max() + 1))
    np.add.at(C, (p, t), 1.0)
    rows, cols = linear_sum_assignment(C, maximize=True)
    return float(1.0 - C[rows, cols].sum() / len(p))


def r2_probe(features, targets) -> np.ndarray:
    """R² of an OLS fit (with intercept) of each target column on the features."""
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"features {X.shape} and targets {Y.shape} disagree")
    T, p = X.shape
    if T <= p + 1:
        raise ContractViolation(f"need more rows than features + 1 (T={T}, p={p})")
    A = np.hstack([np.ones((T, 1)), X])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        beta = np.linalg.solve(A.T @ A + 1e-8 * np.eye(A.shape[1]), A.T @ Y)
    else:
        beta = np.linalg.lstsq(A, Y, rcond=None)[0]
    resid = Y - A @ beta
    out = np.empty(Y.shape[1])
    for j in range(Y.shape[1]):
        ss_tot = float(np.sum((Y[:, j] - Y[:, j].mean()) ** 2))
        if ss_tot == 0.0:
            warnings.warn(f"target column {j} is constant; R² set to 0", RuntimeWarning, stacklevel=2)
            out[j] = 0.0
        else:
            out[j] = 1.0 - float(np.sum(resid[:, j] ** 2)) / ss_tot
    return out


def pca_features(x, n: int = 2) -> np.ndarray:
    """Projections of the centred rows of ``x`` on their top ``n`` principal axes."""
    X = np.asarray(x, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    return Xc @ Vt[:n].T


def elbo_samples(x, theta: GenerativeParams, phi: InferenceParams, samples: int, rng: np.random.Generator,
                 tau: float = 1.0) -> np.ndarray:
    """Hard-path ELBO terms for ``samples`` independent posterior draws."""
    xs = np.asarray(x, dtype=np.float64)
    tv, pv = theta.view(), phi.view()
    out = np.empty(samples)
    for s in range(samples):
        g = rng.gumbel(size=(xs.shape[0], theta.K * theta.M))
        out[s] = kernels.elbo_and_grad(xs, tv, pv, g, tau, self_transitions=theta.self_transitions,
                                       need_grad=False).elbo
    return out


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    r2: dict = field(default_factory=dict)
    runtime: float = 0.0

    @property
    def errors(self) -> np.ndarray:
        return np.array([r["error"] for r in self.records if r.get("error") is not None])

    def aggregate(self) -> dict:
        errs = self.errors
        elbos = np.array([r["elbo"] for r in self.records])
        lls = [r["log_likelihood"] for r in self.records if r.get("log_likelihood") is not None]
        return {
            "sequences": len(self.records),
            "error_mean": float(errs.mean()) if len(errs) else None,
            "error_std": float(errs.std()) if len(errs) else None,
            "elbo_mean": float(elbos.mean()) if len(elbos) else None,
            "log_likelihood_mean": float(np.mean(lls)) if lls else None,
        }

    def to_dict(self, include_timing: bool = False) -> dict:
        """JSON-ready report; wall time is left out unless asked for, so that
        repeated runs give identical files."""
        out = {"report_version": REPORT_VERSION, "aggregate": self.aggregate(),
               "sequences": self.records, "r2": self.r2}
        if include_timing:
            out["runtime_seconds"] = self.runtime
        return out

    def to_text(self) -> str:
        head = ("sequence", "T", "decoder", "error", "elbo", "elbo_se", "log_lik")
        rows = [head]
        fmt = lambda v: "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))  # noqa: E731
        for r in self.records:
            rows.append(tuple(fmt(r.get(k)) for k in ("id", "T", "decoder", "error", "elbo", "elbo_se",
                                                      "log_likelihood")))
        agg = self.aggregate()
        widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        lines.append("")
        for k, v in agg.items():
            lines.append(f"{k:<20} {fmt(v)}")
        for k, v in self.r2.items():
            lines.append(f"r2[{k}]{'':<{max(0, 15 - len(k))}} {v:.4f}")
        return "\n".join(lines) + "\n"


def evaluate(theta: GenerativeParams, phi: InferenceParams, dataset, *, samples: int = 100, seed: int = 0,
             require_truth: bool = False, probe_targets: dict | None = None,
             tau: float = 1.0) -> EvalReport:
    """Decode, score and (when truth exists) grade every sequence.

    Decoding uses the exact MAP path when the oracle guard admits it and the
    greedy posterior path (zero noise) otherwise.  ``probe_targets`` maps
    sequence ids to T x r arrays regressed on the encoder features.
    """
    start = time.perf_counter()
    seqs = list(dataset)
    if seqs and seqs[0].m != theta.m:
        raise ShapeError(f"dataset observation dim {seqs[0].m} != model m {theta.m}")
    report = EvalReport()
    feats, targs = [], []
    for i, s in enumerate(seqs):
        if require_truth and s.truth is None:
            raise ContractViolation(f"sequence {s.id!r} has no ground truth; error rate unavailable")
        try:
            path = oracle.map_segmentation(s, theta)
            ll = oracle.exact_log_likelihood(s, theta)
            decoder = "map"
        except ResourceError:
            path = sample_posterior_path(s, phi, tau, None, HARD_ST, theta.self_transitions,
                                         noise=np.zeros((s.T, theta.K * theta.M))).hard
            ll, decoder = None, "greedy"
        rec = {"id": s.id, "T": s.T, "decoder": decoder, "log_likelihood": ll,
               "error": segmentation_error(path, s.truth) if s.truth is not None else None}
        if samples > 0:
            vals = elbo_samples(s.x, theta, phi, samples, np.random.default_rng([seed, i]), tau)
            rec["elbo"] = float(vals.mean())
            rec["elbo_se"] = float(vals.std(ddof=1) / np.sqrt(samples)) if samples > 1 else None
        else:
            rec["elbo"], rec["elbo_se"] = None, None
        rec["z"] = path.z.tolist()
        report.records.append(rec)
        if probe_targets is not None and s.id in probe_targets:
            feats.append(encode_bidirectional(s.x, phi))
            targs.append(np.asarray(probe_targets[s.id], dtype=np.float64))
    if feats:
        X, Y = np.concatenate(feats), np.concatenate(targs)
        names = [f"target{j}" for j in range(Y.shape[1])] if Y.ndim == 2 else ["target0"]
        vals = r2_probe(X, Y)
        report.r2 = {n: float(v) for n, v in zip(names, vals)}
    report.runtime = time.perf_counter() - start
    return report
