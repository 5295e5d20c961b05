"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The jitted path is the default when numba imports cleanly. Set
``REPAIR_BACKEND=numpy`` to force the fallback (or ``numba`` to fail loudly
when numba is unavailable). Both paths implement identical arithmetic; they
may differ in the last float bit because summation order differs.

Kernels:
  * per-pair and batch warm-up hinge losses over all in-batch negatives,
  * soft-margin triplet loss with in-batch hard negatives,
  * batched rank correlation of two distance profiles.

All gradient outputs are with respect to the (unit-norm) embeddings, not
the encoder weights; the encoder module backpropagates them through the
normalization and the linear map.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ParameterError

# --------------------------------------------------------------------------
# backend selection

_ENV_FLAG = "REPAIR_BACKEND"


def _load_numba_njit():
    try:
        from numba import njit
    except ImportError:
        return None
    return njit


def _select_backend() -> str:
    choice = os.environ.get(_ENV_FLAG, "auto").strip().lower()
    if choice not in ("auto", "numpy", "numba"):
        raise ParameterError(
            f"{_ENV_FLAG} must be 'auto', 'numpy', or 'numba', got {choice!r}")
    if choice == "numpy":
        return "numpy"
    njit = _load_numba_njit()
    if njit is None:
        if choice == "numba":
            raise ImportError(f"{_ENV_FLAG}=numba but numba is not importable")
        return "numpy"
    return "numba"


BACKEND = _select_backend()


def active_backend() -> str:
    """Name of the kernel implementation in use ('numpy' or 'numba')."""
    return BACKEND


# --------------------------------------------------------------------------
# pure-numpy implementations

def _hinge_masks_np(U, V, alpha):
    s = U @ V.T
    pos = np.diag(s).copy()
    h_txt = alpha - pos[:, None] + s        # negatives over other texts
    h_img = alpha - pos[:, None] + s.T      # s.T[i, j] = u_j . v_i
    np.fill_diagonal(h_txt, 0.0)
    np.fill_diagonal(h_img, 0.0)
    return h_txt, h_img


def warmup_pair_losses_np(U, V, alpha):
    """Per-pair warm-up loss, each hinge sum averaged over the B-1 negatives."""
    b = U.shape[0]
    h_txt, h_img = _hinge_masks_np(U, V, alpha)
    return (np.maximum(h_txt, 0.0).sum(axis=1)
            + np.maximum(h_img, 0.0).sum(axis=1)) / (b - 1)


def warmup_loss_grads_np(U, V, alpha):
    b = U.shape[0]
    h_txt, h_img = _hinge_masks_np(U, V, alpha)
    a_txt = h_txt > 0.0
    a_img = h_img > 0.0
    c = 1.0 / (b * (b - 1))
    loss = c * (h_txt[a_txt].sum() + h_img[a_img].sum())
    at = a_txt.astype(np.float64)
    ai = a_img.astype(np.float64)
    n_active = (at.sum(axis=1) + ai.sum(axis=1))[:, None]
    dU = c * (at @ V + ai.T @ V - n_active * V)
    dV = c * (at.T @ U + ai @ U - n_active * U)
    return loss, dU, dV


def triplet_loss_grads_np(U, V, margins):
    b = U.shape[0]
    s = U @ V.T
    pos = np.diag(s).copy()
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    hard_txt = masked.argmax(axis=1)    # for image i: most similar other text
    hard_img = masked.argmax(axis=0)    # for text i: most similar other image
    rows = np.arange(b)
    h1 = margins - pos + s[rows, hard_txt]
    h2 = margins - pos + s[hard_img, rows]
    a1 = h1 > 0.0
    a2 = h2 > 0.0
    c = 1.0 / b
    loss = c * (h1[a1].sum() + h2[a2].sum())
    dU = np.zeros_like(U)
    dV = np.zeros_like(V)
    i1 = np.flatnonzero(a1)
    if i1.size:
        dU[i1] += c * (V[hard_txt[i1]] - V[i1])
        dV[i1] -= c * U[i1]
        np.add.at(dV, hard_txt[i1], c * U[i1])
    i2 = np.flatnonzero(a2)
    if i2.size:
        dV[i2] += c * (U[hard_img[i2]] - U[i2])
        dU[i2] -= c * V[i2]
        np.add.at(dU, hard_img[i2], c * V[i2])
    return loss, dU, dV


def _rank_row_np(values):
    # rank = number of elements <= value (ties share the maximal count)
    s = np.sort(values)
    return np.searchsorted(s, values, side="right").astype(np.float64)


def spearman_batch_np(img_dists, txt_dists):
    """Rank correlation per row; zero-variance rank vectors map to 0."""
    n = img_dists.shape[0]
    out = np.empty(n)
    for i in range(n):
        ra = _rank_row_np(img_dists[i])
        rb = _rank_row_np(txt_dists[i])
        da = ra - ra.mean()
        db = rb - rb.mean()
        saa = (da * da).sum()
        sbb = (db * db).sum()
        if saa <= 0.0 or sbb <= 0.0:
            out[i] = 0.0
        else:
            out[i] = min(1.0, max(-1.0, (da * db).sum() / np.sqrt(saa * sbb)))
    return out


# --------------------------------------------------------------------------
# numba implementations

def _build_numba_impls():
    njit = _load_numba_njit()
    if njit is None:
        return None

    @njit(cache=True)
    def warmup_pair_losses_nb(U, V, alpha):
        b = U.shape[0]
        s = U @ V.T
        out = np.zeros(b)
        for i in range(b):
            pos = s[i, i]
            acc = 0.0
            for j in range(b):
                if j == i:
                    continue
                h = alpha - pos + s[i, j]
                if h > 0.0:
                    acc += h
                h = alpha - pos + s[j, i]
                if h > 0.0:
                    acc += h
            out[i] = acc / (b - 1)
        return out

    @njit(cache=True)
    def warmup_loss_grads_nb(U, V, alpha):
        b, d = U.shape
        s = U @ V.T
        c = 1.0 / (b * (b - 1))
        loss = 0.0
        dU = np.zeros((b, d))
        dV = np.zeros((b, d))
        for i in range(b):
            pos = s[i, i]
            for j in range(b):
                if j == i:
                    continue
                h = alpha - pos + s[i, j]
                if h > 0.0:
                    loss += h
                    for k in range(d):
                        dU[i, k] += c * (V[j, k] - V[i, k])
                        dV[i, k] -= c * U[i, k]
                        dV[j, k] += c * U[i, k]
                h = alpha - pos + s[j, i]
                if h > 0.0:
                    loss += h
                    for k in range(d):
                        dU[i, k] -= c * V[i, k]
                        dU[j, k] += c * V[i, k]
                        dV[i, k] += c * (U[j, k] - U[i, k])
        return loss * c, dU, dV

    @njit(cache=True)
    def triplet_loss_grads_nb(U, V, margins):
        b, d = U.shape
        s = U @ V.T
        c = 1.0 / b
        loss = 0.0
        dU = np.zeros((b, d))
        dV = np.zeros((b, d))
        for i in range(b):
            pos = s[i, i]
            jt = -1
            ji = -1
            best_t = -np.inf
            best_i = -np.inf
            for j in range(b):
                if j == i:
                    continue
                if s[i, j] > best_t:
                    best_t = s[i, j]
                    jt = j
                if s[j, i] > best_i:
                    best_i = s[j, i]
                    ji = j
            h = margins[i] - pos + best_t
            if h > 0.0:
                loss += h
                for k in range(d):
                    dU[i, k] += c * (V[jt, k] - V[i, k])
                    dV[i, k] -= c * U[i, k]
                    dV[jt, k] += c * U[i, k]
            h = margins[i] - pos + best_i
            if h > 0.0:
                loss += h
                for k in range(d):
                    dV[i, k] += c * (U[ji, k] - U[i, k])
                    dU[i, k] -= c * V[i, k]
                    dU[ji, k] += c * V[i, k]
        return loss * c, dU, dV

    @njit(cache=True)
    def _rank_row_nb(values, out):
        m = values.shape[0]
        s = np.sort(values)
        for i in range(m):
            lo = 0
            hi = m
            v = values[i]
            while lo < hi:
                mid = (lo + hi) // 2
                if s[mid] <= v:
                    lo = mid + 1
                else:
                    hi = mid
            out[i] = lo

    @njit(cache=True)
    def spearman_batch_nb(img_dists, txt_dists):
        n, m = img_dists.shape
        out = np.empty(n)
        ra = np.empty(m)
        rb = np.empty(m)
        for i in range(n):
            _rank_row_nb(img_dists[i], ra)
            _rank_row_nb(txt_dists[i], rb)
            ma = ra.mean()
            mb = rb.mean()
            saa = 0.0
            sbb = 0.0
            sab = 0.0
            for j in range(m):
                da = ra[j] - ma
                db = rb[j] - mb
                saa += da * da
                sbb += db * db
                sab += da * db
            if saa <= 0.0 or sbb <= 0.0:
                out[i] = 0.0
            else:
                out[i] = min(1.0, max(-1.0, sab / np.sqrt(saa * sbb)))
        return out

    return {
        "warmup_pair_losses": warmup_pair_losses_nb,
        "warmup_loss_grads": warmup_loss_grads_nb,
        "triplet_loss_grads": triplet_loss_grads_nb,
        "spearman_batch": spearman_batch_nb,
    }


_NUMPY_IMPLS = {
    "warmup_pair_losses": warmup_pair_losses_np,
    "warmup_loss_grads": warmup_loss_grads_np,
    "triplet_loss_grads": triplet_loss_grads_np,
    "spearman_batch": spearman_batch_np,
}

_IMPLS = _NUMPY_IMPLS if BACKEND == "numpy" else _build_numba_impls()


def _f64(arr) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=np.float64)


def warmup_pair_losses(U, V, alpha: float) -> np.ndarray:
    return _IMPLS["warmup_pair_losses"](_f64(U), _f64(V), float(alpha))


def warmup_loss_grads(U, V, alpha: float):
    return _IMPLS["warmup_loss_grads"](_f64(U), _f64(V), float(alpha))


def triplet_loss_grads(U, V, margins):
    return _IMPLS["triplet_loss_grads"](_f64(U), _f64(V), _f64(margins))


def spearman_batch(img_dists, txt_dists) -> np.ndarray:
    return _IMPLS["spearman_batch"](_f64(img_dists), _f64(txt_dists))
