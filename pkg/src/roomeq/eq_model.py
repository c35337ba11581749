"""Gaussian mixture over 7-dimensional sub-band EQ vectors.

Fitting is plain EM with full covariances, seeded k-means++ starts and a
small diagonal load after every M-step.  Models are immutable once built and
serialise to a single JSON document.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .spectral import EQ_FREQUENCIES, FREE_INDICES, SubBandEq

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DIM = len(FREE_INDICES)
DEFAULT_K = 7
REG_COVAR = 1e-6
TOL = 1e-6
MAX_ITER = 200
N_INIT = 10


class ModelError(ValueError):
    """Invalid model parameters or a malformed model file."""


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class EqGmm:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood_trace: tuple = field(default=(), compare=False)
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.array(self.means, dtype=np.float64)
        cov = np.array(self.covariances, dtype=np.float64)
        k = w.shape[0] if w.ndim == 1 else -1
        if w.ndim != 1 or mu.shape != (k, DIM) or cov.shape != (k, DIM, DIM):
            raise ModelError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, "
                             f"covariances {cov.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ModelError("model parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ModelError(f"weights must be non-negative and sum to 1 (sum={w.sum():.12g})")
        for i, c in enumerate(cov):
            if np.max(np.abs(c - c.T)) > 1e-9:
                raise ModelError(f"covariance {i} is not symmetric")
        chol = np.empty_like(cov)
        for i, c in enumerate(cov):
            try:
                chol[i] = np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise ModelError(f"covariance {i} is not positive definite") from None
            if np.any(np.diag(chol[i]) <= 0):
                raise ModelError(f"covariance {i} is not positive definite")
        for name, arr in (("weights", w), ("means", mu), ("covariances", cov), ("_chol", chol)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return DIM

    def marginal_mean(self) -> np.ndarray:
        return self.weights @ self.means

    def marginal_cov(self) -> np.ndarray:
        m = self.marginal_mean()
        d = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covariances) + \
            np.einsum("k,ki,kj->ij", self.weights, d, d)


def _as_matrix(eqs) -> np.ndarray:
    """Accept SubBandEq objects, 8-wide or 7-wide rows; return (n, 7) free vectors."""
    rows = []
    for e in eqs:
        if isinstance(e, SubBandEq):
            rows.append(e.free)
        else:
            v = np.asarray(e, dtype=np.float64)
            rows.append(v[list(FREE_INDICES)] if v.shape == (len(EQ_FREQUENCIES),) else v)
    x = np.array(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != DIM:
        raise ValueError(f"expected EQ vectors of dimension {DIM}, got array of shape {x.shape}")
    return x


def _log_gauss(x, means, chols):
    """log N(x | mean_k, L_k L_k^T) for every point and component: (n, k)."""
    n, d = x.shape
    out = np.empty((n, len(means)))
    for j, (mu, L) in enumerate(zip(means, chols)):
        z = solve_triangular(L, (x - mu).T, lower=True, check_finite=False)
        maha = np.einsum("ij,ij->j", z, z)
        out[:, j] = -0.5 * (d * math.log(2 * math.pi) + maha) - np.log(np.diag(L)).sum()
    return out


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise DegenerateDataError("fewer distinct EQ vectors than mixture components")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(x, resp, reg):
    n, d = x.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / n
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((len(nk), d, d))
    for j in range(len(nk)):
        diff = x - means[j]
        c = (resp[:, j, None] * diff).T @ diff / nk[j]
        c = 0.5 * (c + c.T)
        c.flat[::d + 1] += reg
        covs[j] = c
    return weights, means, covs


def _cholesky_all(covs):
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        raise DegenerateDataError("singular covariance even after regularisation") from None


def _em(x, centers, tol, max_iter, reg):
    # hard assignment to the seeds gives the first responsibilities
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((x.shape[0], len(centers)))
    resp[np.arange(x.shape[0]), labels] = 1.0
    weights, means, covs = _m_step(x, resp, reg)
    chols = _cholesky_all(covs)

    trace = []
    for _ in range(max_iter):
        weighted = _log_gauss(x, means, chols) + np.log(weights)
        norm = logsumexp(weighted, axis=1)
        trace.append(float(norm.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        resp = np.exp(weighted - norm[:, None])
        weights, means, covs = _m_step(x, resp, reg)
        chols = _cholesky_all(covs)
    return weights, means, covs, trace


def fit_gmm(eqs, k: int = DEFAULT_K, seed: int = 0, n_init: int = N_INIT,
            tol: float = TOL, max_iter: int = MAX_ITER, reg_covar: float = REG_COVAR) -> EqGmm:
    """Fit a full-covariance mixture to sub-band EQ vectors with EM.

    ``eqs`` may hold ``SubBandEq`` objects or raw 8- or 7-wide rows.  The data
    are put in a canonical (sorted) order before the seeded initialisation,
    so the result does not depend on the order of the input.  Out of
    ``n_init`` k-means++ starts, the run with the highest final mean
    log-likelihood wins.
    """
    x = _as_matrix(eqs)
    n = x.shape[0]
    if n < 10 * k:
        raise ValueError(f"need at least {10 * k} EQ vectors for k={k}, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("EQ vectors must be finite")
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < k or distinct == 1:
        raise DegenerateDataError(
            f"only {distinct} distinct EQ vectors for k={k}; "
            "covariance would be singular even after regularisation")

    x = x[np.lexsort(x.T[::-1])]
    rng = np.random.default_rng(seed)
    x = x[rng.permutation(n)]

    best = None
    for run in range(n_init):
        centers = _kmeans_pp(x, k, rng)
        weights, means, covs, trace = _em(x, centers, tol, max_iter, reg_covar)
        log.debug("EM start %d: %d iterations, mean log-likelihood %.6f", run, len(trace), trace[-1])
        if best is None or trace[-1] > best[3][-1]:
            best = (weights, means, covs, trace)

    weights, means, covs, trace = best
    weights = weights / weights.sum()
    meta = {"gain_domain": "dB", "reference_hz": EQ_FREQUENCIES[4], "n_samples": n,
            "seed": seed, "iterations": len(trace)}
    return EqGmm(weights, means, covs, tuple(trace), meta)


def _draw_free(model: EqGmm, rng: np.random.Generator) -> np.ndarray:
    comp = int(np.searchsorted(np.cumsum(model.weights), rng.random() * model.weights.sum(),
                               side="right"))
    comp = min(comp, model.k - 1)
    z = rng.standard_normal(DIM)
    return model.means[comp] + model._chol[comp] @ z


def sample_eq(model: EqGmm, rng: np.random.Generator) -> SubBandEq:
    """One draw: pick a component by weight, then mean + L z with L the Cholesky factor."""
    return SubBandEq.from_free(_draw_free(model, rng))


def sample_eqs(model: EqGmm, count: int, rng: np.random.Generator) -> list[SubBandEq]:
    return [sample_eq(model, rng) for _ in range(count)]


def log_likelihood(model: EqGmm, eq) -> float:
    x = _as_matrix([eq])
    return float(logsumexp(_log_gauss(x, model.means, model._chol) + np.log(model.weights),
                           axis=1)[0])


def mean_log_likelihood(model: EqGmm, eqs) -> float:
    x = _as_matrix(eqs)
    return float(logsumexp(_log_gauss(x, model.means, model._chol) + np.log(model.weights),
                           axis=1).mean())


def save_model(model: EqGmm, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "k": model.k,
        "dim": DIM,
        "frequencies_hz": list(EQ_FREQUENCIES),
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "covariances": model.covariances.tolist(),
        "metadata": {"gain_domain": "dB", **model.metadata},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path) -> EqGmm:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"{path}: cannot read model file: {exc}") from exc
    try:
        if doc["format_version"] != FORMAT_VERSION:
            raise ModelError(f"{path}: unsupported format_version {doc['format_version']}")
        if doc["dim"] != DIM or list(doc["frequencies_hz"]) != list(EQ_FREQUENCIES):
            raise ModelError(f"{path}: model is not over the standard 8-point EQ")
        model = EqGmm(doc["weights"], doc["means"], doc["covariances"],
                      metadata=doc.get("metadata", {}))
    except KeyError as exc:
        raise ModelError(f"{path}: missing field {exc}") from None
    except ModelError as exc:
        raise ModelError(f"{path}: {exc}") from None
    if model.k != doc["k"]:
        raise ModelError(f"{path}: k={doc['k']} but {model.k} weights")
    return model
