"""Diagonal-covariance Gaussian mixtures and rotation-aware scoring.

The mixture scores drive rotation fine-tuning. For an embedding e (row
vector), a rotation W, and a component (p_i, mu_i, s_i) with diagonal
covariance s_i:

    log N(eW | mu_i, s_i) = -1/2 (D log 2pi + log|s_i| + (eW - mu_i)^T s_i^-1 (eW - mu_i))
    loglik(e, W, gmm)     = LSE_i(log p_i + log N(eW | mu_i, s_i))
    score(E, W, gmm)      = mean_e loglik(e, W, gmm)

The symmetric score evaluates the rotation in both directions (W and its
transpose, which is its inverse) and keeps the better one.

Fitting is plain EM from a k-means++ seeding, single-threaded and
deterministic under the seed. Covariances are diagonal with a floor of
1e-6 x the per-dimension data variance, which keeps log-determinants and
inverses well-defined at high dimension.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import EmbeddingSet, Rotation

logger = logging.getLogger(__name__)

VARIANCE_FLOOR_RATIO = 1e-6
_PRIOR_SUM_TOL = 1e-9
_EMPTY_WEIGHT = 1e-10
_MAX_RESEEDS = 3

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class GmmModel:
    """K-component diagonal-covariance mixture.

    priors: (K,) in (0, 1), summing to 1.
    means: (K, D). variances: (K, D), strictly positive.
    `train_loglik_trace` is the per-iteration mean training log-likelihood
    recorded by `fit_gmm` (empty for hand-built models).
    """

    priors: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    train_loglik_trace: tuple[float, ...] = ()

    def __post_init__(self):
        p = np.asarray(self.priors, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if p.ndim != 1 or mu.ndim != 2 or var.shape != mu.shape:
            raise ValueError("inconsistent mixture parameter shapes")
        if p.shape[0] != mu.shape[0]:
            raise ValueError(f"{p.shape[0]} priors for {mu.shape[0]} components")
        if (p <= 0).any() or (p >= 1).any() and p.shape[0] > 1:
            raise ValueError("priors must lie in (0, 1)")
        if abs(p.sum() - 1.0) > _PRIOR_SUM_TOL:
            raise ValueError(f"priors sum to {p.sum():.12f}, expected 1")
        if (var <= 0).any():
            raise ValueError("variances must be strictly positive")
        for name, a in (("priors", p), ("means", mu), ("variances", var)):
            if not np.isfinite(a).all():
                raise ValueError(f"{name} must be finite")
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def k(self) -> int:
        return self.priors.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _component_log_densities(z: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """(N, K) matrix of log p_i + log N(z_n | mu_i, s_i)."""
    d = z.shape[1]
    log_det = np.sum(np.log(gmm.variances), axis=1)  # (K,)
    diff = z[:, None, :] - gmm.means[None, :, :]  # (N, K, D)
    maha = np.sum(diff * diff / gmm.variances[None, :, :], axis=2)  # (N, K)
    return np.log(gmm.priors)[None, :] - 0.5 * (d * LOG_2PI + log_det[None, :] + maha)


def log_gaussian(e: np.ndarray, rotation: Rotation, component) -> float:
    """Log density of e W under one mixture component (p, mu, var).

    The prior rides along in the component triple but does not enter the
    density; mixture weighting happens in `gmm_loglik`.
    """
    _, mu, var = component
    e = np.asarray(e, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if e.shape != (rotation.dim,) or mu.shape != e.shape or var.shape != e.shape:
        raise ValueError(
            f"dimension mismatch: e {e.shape}, rotation {rotation.dim}, "
            f"component {mu.shape}"
        )
    z = e @ rotation.matrix
    diff = z - mu
    return float(
        -0.5 * (e.size * LOG_2PI + np.sum(np.log(var)) + np.sum(diff * diff / var))
    )


def gmm_loglik(e: np.ndarray, rotation: Rotation, gmm: GmmModel) -> float:
    """Mixture log density of e W, prior-weighted via a max-shifted LSE."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (rotation.dim,) or gmm.dim != rotation.dim:
        raise ValueError(
            f"dimension mismatch: e {e.shape}, rotation {rotation.dim}, gmm {gmm.dim}"
        )
    z = (e @ rotation.matrix)[None, :]
    return float(logsumexp(_component_log_densities(z, gmm), axis=1)[0])


def score_set(es: EmbeddingSet, rotation: Rotation, gmm: GmmModel) -> float:
    """Mean mixture log-likelihood of a whole set projected by the rotation."""
    if es.n == 0:
        raise ValueError("cannot score an empty embedding set")
    value, _ = matrix_score_and_grad(es.vectors, rotation.matrix, gmm, need_grad=False)
    return value


def symmetric_score(
    e_t: EmbeddingSet,
    rotation: Rotation,
    e_a: EmbeddingSet,
    gmm_t: GmmModel,
    gmm_a: GmmModel,
    mode: str = "max",
) -> float:
    """Two-directional set score.

    Evaluates score(e_t, W, gmm_a) and score(e_a, W^T, gmm_t) -- the
    transpose is the inverse rotation -- and combines with `max`
    (default) or `min`.
    """
    if mode not in ("max", "min"):
        raise ValueError(f"mode must be 'max' or 'min', got {mode!r}")
    forward = score_set(e_t, rotation, gmm_a)
    backward = score_set(e_a, rotation.transpose(), gmm_t)
    return max(forward, backward) if mode == "max" else min(forward, backward)


def matrix_score_and_grad(
    x: np.ndarray,
    w: np.ndarray,
    gmm: GmmModel,
    transposed: bool = False,
    need_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    """Set score for a raw (possibly non-orthogonal) matrix, with gradient.

    Projects rows of x through w (or w.T when `transposed`), returns the
    mean mixture log-likelihood and its gradient with respect to w. The
    raw-matrix form exists for optimizers whose iterates drift off the
    rotation manifold.
    """
    x = np.asarray(x, dtype=np.float64)
    z = x @ (w.T if transposed else w)
    log_dens = _component_log_densities(z, gmm)
    lse = logsumexp(log_dens, axis=1)
    value = float(lse.mean())
    if not need_grad:
        return value, None
    resp = np.exp(log_dens - lse[:, None])  # (N, K)
    diff = z[:, None, :] - gmm.means[None, :, :]
    # d loglik / dz for each record: - sum_i resp_i * (z - mu_i) / var_i
    gz = -np.einsum("nk,nkd->nd", resp, diff / gmm.variances[None, :, :])
    n = x.shape[0]
    if transposed:
        grad = gz.T @ x / n
    else:
        grad = x.T @ gz / n
    return value, grad


def _variance_floor(x: np.ndarray) -> np.ndarray:
    var = x.var(axis=0)
    positive = var[var > 0]
    base = np.where(var > 0, var, positive.mean() if positive.size else 1.0)
    return VARIANCE_FLOOR_RATIO * base


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # All mass sits on already-chosen points; fall back to uniform.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[j] = x[idx]
        closest = np.minimum(closest, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def fit_gmm(
    es: EmbeddingSet,
    k: int,
    seed: int,
    max_iters: int = 200,
    tol: float = 1e-9,
) -> GmmModel:
    """EM fit of a K-component diagonal mixture, deterministic under seed.

    Requires N >= 10 K. A component whose responsibility mass collapses
    is re-seeded at the point farthest from all current means (logged);
    three collapses abort the fit.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    x = es.vectors
    n, d = x.shape
    if n < 10 * k:
        raise ValueError(f"fitting {k} components needs N >= {10 * k}, got N = {n}")
    rng = np.random.default_rng(seed)
    floor = _variance_floor(x)

    priors = np.full(k, 1.0 / k)
    means = _kmeanspp_centers(x, k, rng)
    variances = np.tile(np.maximum(x.var(axis=0), floor), (k, 1))

    trace: list[float] = []
    reseeds = 0
    it = 0
    while it < max_iters:
        it += 1
        model = GmmModel(priors, means, variances)
        log_dens = _component_log_densities(x, model)
        lse = logsumexp(log_dens, axis=1)
        mean_ll = float(lse.mean())
        resp = np.exp(log_dens - lse[:, None])
        weights = resp.sum(axis=0)  # (K,)

        empty = np.where(weights < _EMPTY_WEIGHT * n)[0]
        if empty.size:
            reseeds += len(empty)
            if reseeds >= _MAX_RESEEDS:
                raise RuntimeError(
                    f"EM component collapse recurred {reseeds} times; "
                    "reduce k or provide more data"
                )
            dist = np.min(
                np.sum((x[:, None, :] - means[None, :, :]) ** 2, axis=2), axis=1
            )
            means = means.copy()
            priors = priors.copy()
            for j in empty:
                far = int(np.argmax(dist))
                logger.warning(
                    "empty mixture component %d re-seeded at record %d", j, far
                )
                means[j] = x[far]
                priors[j] = 1.0 / n
                dist[far] = -1.0
            priors = priors / priors.sum()
            # Restart the ascent from the repaired parameters.
            continue

        trace.append(mean_ll)
        priors = weights / n
        means = (resp.T @ x) / weights[:, None]
        second = (resp.T @ (x * x)) / weights[:, None]
        variances = np.maximum(second - means * means, floor)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < tol:
            break

    return GmmModel(priors, means, variances, train_loglik_trace=tuple(trace))


def resolve_component_count(es: EmbeddingSet, requested: int | None = None) -> int:
    """Default mixture size: 10 with class labels (one per cluster), else 8,
    clamped so N >= 10 K stays satisfiable."""
    if requested is not None:
        if requested < 1:
            raise ValueError(f"component count must be >= 1, got {requested}")
        return requested
    k = 10 if es.has_labels else 8
    return max(1, min(k, es.n // 10))


def gmm_to_dict(gmm: GmmModel) -> dict:
    return {
        "dim": gmm.dim,
        "K": gmm.k,
        "components": [
            {
                "prior": float(gmm.priors[i]),
                "mean": [float(v) for v in gmm.means[i]],
                "var": [float(v) for v in gmm.variances[i]],
            }
            for i in range(gmm.k)
        ],
    }


def gmm_from_dict(doc: dict) -> GmmModel:
    comps = doc["components"]
    priors = np.array([c["prior"] for c in comps])
    means = np.array([c["mean"] for c in comps])
    variances = np.array([c["var"] for c in comps])
    if means.shape[1] != doc["dim"] or len(comps) != doc["K"]:
        raise ValueError("mixture document is inconsistent with its declared shape")
    return GmmModel(priors, means, variances)
