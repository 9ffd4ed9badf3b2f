"""Gaussian mixture models over PCA loadings, with LOO cluster-count selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, PreconditionError


@dataclass(frozen=True)
class GmmModel:
    """K-component full-covariance Gaussian mixture."""

    weights: np.ndarray  # (K,), sum 1
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d), SPD

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        mu = np.array(self.means, dtype=np.float64)
        cov = np.array(self.covariances, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-12 or (w <= 0).any():
            raise PreconditionError("mixture weights must be positive and sum to 1")
        for k in range(len(w)):
            try:
                np.linalg.cholesky(cov[k])
            except np.linalg.LinAlgError as exc:
                raise PreconditionError("covariance must be positive definite") from exc
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _log_gaussians(data: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """(n, K) log densities of each point under each component."""
    n, d = data.shape
    out = np.empty((n, len(means)))
    for k in range(len(means)):
        try:
            chol = np.linalg.cholesky(covs[k])
        except np.linalg.LinAlgError as exc:
            raise NumericalError("non-SPD covariance in log likelihood") from exc
        diff = data - means[k]
        y = np.linalg.solve(chol, diff.T).T  # chol is lower triangular
        maha = (y**2).sum(axis=1)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out[:, k] = -0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)
    return out


def log_likelihood(model: GmmModel, data: np.ndarray) -> float:
    """Sum over points of ln sum_k pi_k N(x | mu_k, Sigma_k), log-sum-exp stabilized."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[1] != model.dim:
        raise PreconditionError("data dimension mismatch")
    logp = _log_gaussians(data, model.means, model.covariances) + np.log(model.weights)
    m = logp.max(axis=1, keepdims=True)
    return float((m.ravel() + np.log(np.exp(logp - m).sum(axis=1))).sum())


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    for _ in range(k - 1):
        d2 = np.min(
            ((data[:, None, :] - np.array(centers)[None, :, :]) ** 2).sum(axis=2), axis=1
        )
        total = d2.sum()
        if total == 0:
            centers.append(data[rng.integers(len(data))])
            continue
        centers.append(data[rng.choice(len(data), p=d2 / total)])
    return np.array(centers)


def fit_gmm(
    data: np.ndarray,
    n_components: int,
    seed: int = 0,
    restarts: int = 10,
    max_em_iters: int = 500,
    reg: float = 1e-6,
    tol: float = 1e-9,
    return_history: bool = False,
):
    """EM fit with k-means++ restarts; best restart by training log-likelihood.

    Covariances get reg * trace(data covariance) / d added to their diagonal
    every M step. The ridge perturbs the exact M-step optimum, so iterations
    are safeguarded: an update that lowers the training log-likelihood is
    rolled back and that restart stops (monotone EM). Bit-deterministic for
    a fixed seed.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = data.shape
    if n_components < 1:
        raise PreconditionError("need at least one component")
    if n_components > n:
        raise PreconditionError("more components than data points")
    rng = np.random.default_rng(seed)
    data_cov = np.cov(data.T) if d > 1 else np.atleast_2d(np.var(data, ddof=1))
    ridge = reg * np.trace(np.atleast_2d(data_cov)) / d * np.eye(d)

    best = None
    best_llh = -np.inf
    best_hist = None
    for _ in range(restarts):
        means = _kmeans_pp_init(data, n_components, rng)
        weights = np.full(n_components, 1.0 / n_components)
        covs = np.repeat((np.atleast_2d(data_cov) + ridge)[None], n_components, axis=0)
        hist = []
        prev = -np.inf
        prev_params = None
        for _ in range(max_em_iters):
            logp = _log_gaussians(data, means, covs) + np.log(weights)
            m = logp.max(axis=1, keepdims=True)
            log_norm = m.ravel() + np.log(np.exp(logp - m).sum(axis=1))
            llh = float(log_norm.sum())
            if llh < prev:  # ridge moved past the optimum: roll back, stop
                weights, means, covs = prev_params
                break
            hist.append(llh)
            resp = np.exp(logp - log_norm[:, None])

            prev_params = (weights, means, covs)
            nk = np.maximum(resp.sum(axis=0), 1e-300)
            weights = nk / nk.sum()
            means = (resp.T @ data) / nk[:, None]
            covs = np.empty((n_components, d, d))
            for k in range(n_components):
                diff = data - means[k]
                covs[k] = (resp[:, k][:, None] * diff).T @ diff / nk[k] + ridge
            if llh - prev < tol and np.isfinite(prev):
                break
            prev = llh
        model = GmmModel(weights, means, covs)
        final_llh = log_likelihood(model, data)
        if final_llh < (hist[-1] if hist else -np.inf):
            # final M-step dipped: keep the best recorded state
            weights, means, covs = prev_params
            model = GmmModel(weights, means, covs)
            final_llh = log_likelihood(model, data)
        hist.append(final_llh)
        if final_llh > best_llh:
            best_llh = final_llh
            best = model
            best_hist = hist
    if return_history:
        return best, best_hist
    return best


def select_clusters_cv(data: np.ndarray, k_max: int, seed: int = 0, restarts: int = 10):
    """Two-level cross-validation for the cluster count.

    Level one leaves each point out in turn; level two sweeps k = 1..k_max.
    The winner maximizes the mean held-out log-likelihood (ties to smaller k).

    Returns (k_star, mean test LLH per k).
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n = len(data)
    if n < k_max + 1:
        raise PreconditionError("need at least k_max + 1 data points")
    mean_llh = np.empty(k_max)
    for k in range(1, k_max + 1):
        scores = np.empty(n)
        for i in range(n):
            train = np.delete(data, i, axis=0)
            model = fit_gmm(train, k, seed=(seed, k, i), restarts=restarts)
            scores[i] = log_likelihood(model, data[i:i + 1])
        mean_llh[k - 1] = scores.mean()
    k_star = int(np.argmax(mean_llh)) + 1  # argmax takes the smaller k on ties
    return k_star, mean_llh
