"""Soft correspondence labels from the rank correlation of distance profiles.

A pair's image and text features are each compared against the same memory
bank; if the pair is truly matched, the two resulting distance profiles
should agree in rank order. The rank of an element is the count of elements
less than or equal to it (ties share the maximal count), and the correlation
is the Pearson coefficient of the two rank vectors. Batch correlations are
normalized to [0, 1] between the mean of the largest 10% (gamma) and the
mean of the smallest 1% (mu), with negative correlations clamped to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, memory_bank
from .encoders import EncoderPair, embed_image, embed_text
from .errors import EmptyBankError, ParameterError, UndefinedCorrelationError

DEGENERATE_SPAN = 1e-9


@dataclass(frozen=True)
class SoftLabelSet:
    corre: np.ndarray   # raw rank correlations, in [-1, 1]
    y_star: np.ndarray  # normalized soft labels, in [0, 1]
    gamma: float        # mean of the top 10% correlations
    mu: float           # mean of the bottom 1% correlations
    degenerate: bool    # True when gamma - max(0, mu) collapsed


def ranks(values) -> np.ndarray:
    """Rank of each element as the count of elements <= it."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ParameterError("values must be a non-empty 1-D sequence")
    s = np.sort(values)
    return np.searchsorted(s, values, side="right").astype(np.int64)


def spearman(img_dists, txt_dists) -> float:
    """Pearson correlation of the two profiles' rank vectors.

    Raises UndefinedCorrelationError when either rank vector is constant;
    batch callers map that case to a neutral 0.
    """
    img_dists = np.asarray(img_dists, dtype=np.float64)
    txt_dists = np.asarray(txt_dists, dtype=np.float64)
    if img_dists.shape != txt_dists.shape or img_dists.ndim != 1:
        raise ParameterError("profiles must be 1-D and of equal length")
    if img_dists.size < 2:
        raise ParameterError("profiles must hold at least 2 entries")
    ra = ranks(img_dists).astype(np.float64)
    rb = ranks(txt_dists).astype(np.float64)
    da = ra - ra.mean()
    db = rb - rb.mean()
    saa = (da * da).sum()
    sbb = (db * db).sum()
    if saa <= 0.0 or sbb <= 0.0:
        raise UndefinedCorrelationError("constant rank vector")
    return float(min(1.0, max(-1.0, (da * db).sum() / np.sqrt(saa * sbb))))


def normalize_labels(corre) -> SoftLabelSet:
    """Map raw correlations to [0, 1] soft labels between the mu/gamma anchors.

    Percentile counts use ceiling with a floor of one element, so the anchors
    are defined for any non-empty batch. If the anchor window collapses, the
    result falls back to a hard above-gamma indicator and is flagged.
    """
    corre = np.asarray(corre, dtype=np.float64)
    if corre.ndim != 1 or corre.size < 1:
        raise ParameterError("corre must be a non-empty 1-D sequence")
    n = corre.size
    k_top = max(1, int(np.ceil(0.10 * n)))
    k_bot = max(1, int(np.ceil(0.01 * n)))
    s = np.sort(corre)
    gamma = float(s[-k_top:].mean())
    mu = float(s[:k_bot].mean())
    lo = max(0.0, mu)
    if gamma - lo < DEGENERATE_SPAN:
        y = (corre > gamma).astype(np.float64)
        return SoftLabelSet(corre.copy(), y, gamma, mu, True)
    y = (corre - lo) / (gamma - lo)
    y[corre <= lo] = 0.0
    y[corre > gamma] = 1.0
    return SoftLabelSet(corre.copy(), y, gamma, mu, False)


def profile_correlations(snapshot: memory_bank.BankSnapshot,
                         img_feats: np.ndarray,
                         txt_feats: np.ndarray) -> np.ndarray:
    """Raw rank correlation per feature pair against the bank snapshot.

    Zero-variance rank vectors yield 0 (neutral evidence).
    """
    if len(snapshot) == 0:
        raise EmptyBankError("soft labels need a non-empty bank")
    if len(snapshot) < 2:
        raise ParameterError("bank must hold at least 2 entries")
    d_img = memory_bank.profile_distances(snapshot, img_feats, "img")
    d_txt = memory_bank.profile_distances(snapshot, txt_feats, "txt")
    return kernels.spearman_batch(d_img, d_txt)


def soft_labels_for_batch(snapshot: memory_bank.BankSnapshot, enc: EncoderPair,
                          images: np.ndarray, texts: np.ndarray) -> SoftLabelSet:
    """Embed a raw batch and derive its normalized soft labels."""
    u = embed_image(enc, np.atleast_2d(images))
    v = embed_text(enc, np.atleast_2d(texts))
    return normalize_labels(profile_correlations(snapshot, u, v))
