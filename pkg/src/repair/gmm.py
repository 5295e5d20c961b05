"""Two-component 1-D Gaussian mixture over per-sample losses, fit by EM.

The component with the smaller mean is read as "clean"; its posterior per
sample drives the clean/noisy partition at a strict threshold. Initialization
is deterministic (means at the 10th/90th loss percentiles, equal weights,
shared variance), so identical losses always produce identical fits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .dataset import PairDataset
from .encoders import EncoderPair, embed_image, embed_text
from .errors import DegenerateFitError, ParameterError

VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class GmmFit:
    means: np.ndarray       # (2,)
    variances: np.ndarray   # (2,), floored at VARIANCE_FLOOR
    weights: np.ndarray     # (2,), sums to 1
    iterations: int
    log_likelihoods: np.ndarray  # one value per E-step evaluated

    @property
    def final_log_likelihood(self) -> float:
        return float(self.log_likelihoods[-1]) if self.log_likelihoods.size else float("nan")


def _log_responsibilities(losses, means, variances, weights):
    # log of beta_t * N(l; m_t, v_t), stabilized by the per-sample max
    log_num = (np.log(weights)[None, :]
               - 0.5 * np.log(2.0 * np.pi * variances)[None, :]
               - (losses[:, None] - means[None, :]) ** 2 / (2.0 * variances)[None, :])
    top = log_num.max(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(np.exp(log_num - top).sum(axis=1))
    return log_num - log_norm[:, None], float(log_norm.sum())


def fit_gmm(losses, max_iters: int = 100, tol: float = 1e-6) -> GmmFit:
    """EM fit from the deterministic percentile init.

    Stops when the log-likelihood improves by less than `tol` or after
    `max_iters` M-steps; max_iters=0 returns the init unchanged.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size < 2:
        raise ParameterError("losses must be a 1-D sequence of length >= 2")
    if max_iters < 0 or tol < 0:
        raise ParameterError("max_iters and tol must be >= 0")
    if np.unique(losses).size < 2:
        raise DegenerateFitError("all loss values identical; nothing to separate")

    means = np.array([np.percentile(losses, 10), np.percentile(losses, 90)])
    variances = np.full(2, max(losses.var(), VARIANCE_FLOOR))
    weights = np.array([0.5, 0.5])

    lls = []
    prev_ll = -np.inf
    iterations = 0
    for _ in range(max_iters):
        log_r, ll = _log_responsibilities(losses, means, variances, weights)
        lls.append(ll)
        if ll - prev_ll < tol:
            break
        prev_ll = ll
        r = np.exp(log_r)
        counts = np.maximum(r.sum(axis=0), 1e-300)
        weights = counts / losses.size
        means = (r * losses[:, None]).sum(axis=0) / counts
        variances = np.maximum(
            (r * (losses[:, None] - means[None, :]) ** 2).sum(axis=0) / counts,
            VARIANCE_FLOOR)
        iterations += 1
    return GmmFit(means, variances, weights, iterations, np.asarray(lls))


def clean_posterior(fit: GmmFit, losses) -> np.ndarray:
    """Posterior of the smaller-mean component per sample, never NaN."""
    losses = np.asarray(losses, dtype=np.float64)
    log_r, _ = _log_responsibilities(losses, fit.means, fit.variances, fit.weights)
    k = int(np.argmin(fit.means))
    return np.exp(log_r[:, k])


@dataclass(frozen=True)
class GmmSplit:
    posteriors: np.ndarray
    clean_ids: np.ndarray
    noisy_ids: np.ndarray
    threshold_p: float
    degenerate: bool = False  # True when fitting failed and all pairs count as clean
    fit: GmmFit | None = None


def partition(posteriors, p: float) -> GmmSplit:
    """Strict split: clean iff posterior > p."""
    if not 0.0 < p < 1.0:
        raise ParameterError("p must lie in (0, 1)")
    posteriors = np.asarray(posteriors, dtype=np.float64)
    clean = np.flatnonzero(posteriors > p)
    noisy = np.flatnonzero(~(posteriors > p))
    return GmmSplit(posteriors, clean, noisy, p)


def per_sample_losses(enc: EncoderPair, dataset: PairDataset, alpha: float,
                      batch_size: int, indices=None) -> np.ndarray:
    """Warm-up loss per pair, computed over fixed consecutive batches.

    Negatives come from the pair's own batch, so values depend on the fixed
    traversal order; a trailing singleton is folded into the previous batch.
    """
    if batch_size < 2:
        raise ParameterError("batch_size must be >= 2")
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if idx.size < 2:
        raise ParameterError("need at least 2 pairs")
    out = np.empty(idx.size)
    for start, stop in batch_bounds(idx.size, batch_size):
        rows = idx[start:stop]
        u = embed_image(enc, dataset.images[rows])
        v = embed_text(enc, dataset.texts[rows])
        out[start:stop] = kernels.warmup_pair_losses(u, v, alpha)
    return out


def batch_bounds(n: int, batch_size: int):
    """Consecutive [start, stop) bounds; a final singleton joins its neighbor."""
    bounds = []
    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        if n - stop == 1:
            stop = n
        bounds.append((start, stop))
        start = stop
    return bounds


def split_clean_noisy(losses, p: float, max_iters: int = 100, tol: float = 1e-6,
                      normalize: bool = True) -> GmmSplit:
    """Full selection pipeline: optional min-max normalization, fit, partition.

    A degenerate fit (all losses equal, or a collapsed normalization window)
    marks every pair clean with posterior 1, mirroring how a mixture with no
    separation carries no evidence of noise.
    """
    losses = np.asarray(losses, dtype=np.float64)
    scaled = losses
    if normalize:
        lo, hi = losses.min(), losses.max()
        if hi - lo > 0:
            scaled = (losses - lo) / (hi - lo)
    try:
        fit = fit_gmm(scaled, max_iters=max_iters, tol=tol)
    except DegenerateFitError:
        ones = np.ones_like(losses)
        return GmmSplit(ones, np.arange(losses.size), np.empty(0, dtype=np.int64),
                        p, degenerate=True)
    posteriors = clean_posterior(fit, scaled)
    split = partition(posteriors, p)
    return GmmSplit(split.posteriors, split.clean_ids, split.noisy_ids, p,
                    degenerate=False, fit=fit)
