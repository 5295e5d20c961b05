"""Noisy-pair half-replacing: rebuild confidently mismatched pairs from the bank.

A pair is eligible when both networks' clean posteriors fall below eta. For
each eligible pair and each direction, the bank is searched for the K entries
whose retained-modality feature is closest to the pair's, and the candidate
entry whose opposite-modality feature is most similar to the retained feature
supplies the replacement. Replacement features are frozen bank snapshots, so
the loss over replaced pairs only sends gradient into the retained modality's
encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels, memory_bank
from .encoders import EncoderPair, _backprop_to_weights, _project, soft_margin
from .errors import ParameterError
from .rank_correlation import normalize_labels

logger = logging.getLogger(__name__)

REPLACE_IMAGE = "replace-image"
REPLACE_TEXT = "replace-text"


@dataclass(frozen=True)
class ReplacementPair:
    direction: str                # REPLACE_IMAGE or REPLACE_TEXT
    bank_entry_index: int         # index into the snapshot used for the search
    kept_feat: np.ndarray         # unit feature of the retained modality
    replacement_feat: np.ndarray  # copy of the chosen bank row (held constant)
    similarity: float             # S(replacement_feat, kept_feat)
    source_pair_id: int = -1
    kept_raw: np.ndarray | None = None  # raw input behind kept_feat, for backprop


def select_npr_candidates(posteriors_a, posteriors_b, eta: float) -> np.ndarray:
    """Indices where both networks' clean posteriors are strictly below eta."""
    w_a = np.asarray(posteriors_a, dtype=np.float64)
    w_b = np.asarray(posteriors_b, dtype=np.float64)
    if w_a.shape != w_b.shape:
        raise ParameterError("posterior lists must have equal length")
    if not 0.0 <= eta < 1.0:
        raise ParameterError("eta must lie in [0, 1)")
    return np.flatnonzero((w_a < eta) & (w_b < eta))


def _topk(snapshot: memory_bank.BankSnapshot, feat: np.ndarray, k: int,
          modality: str) -> np.ndarray:
    if k < 1:
        raise ParameterError("k must be >= 1")
    n = len(snapshot)
    if k > n:
        logger.warning("top-K of %d clamped to bank size %d", k, n)
        k = n
    dists = memory_bank.profile_distances(snapshot, feat, modality)[0]
    return np.argsort(dists, kind="stable")[:k]


def topk_similar_texts(snapshot: memory_bank.BankSnapshot, txt_feat: np.ndarray,
                       k: int) -> np.ndarray:
    """Bank indices of the k text features closest to txt_feat (ties: lower index)."""
    return _topk(snapshot, txt_feat, k, "txt")


def topk_similar_images(snapshot: memory_bank.BankSnapshot, img_feat: np.ndarray,
                        k: int) -> np.ndarray:
    return _topk(snapshot, img_feat, k, "img")


def _pick(snapshot, candidate_indices, kept_feat, direction,
          source_pair_id, kept_raw) -> ReplacementPair:
    cands = np.asarray(candidate_indices, dtype=np.int64)
    if cands.size == 0:
        raise ParameterError("candidate set must be non-empty")
    store = snapshot.img if direction == REPLACE_IMAGE else snapshot.txt
    kept = np.asarray(kept_feat, dtype=np.float64)
    sims = store[cands].astype(np.float64) @ kept
    best = int(cands[sims == sims.max()].min())  # ties -> lower bank index
    return ReplacementPair(
        direction=direction,
        bank_entry_index=best,
        kept_feat=kept,
        replacement_feat=store[best].astype(np.float64),
        similarity=float(store[best].astype(np.float64) @ kept),
        source_pair_id=source_pair_id,
        kept_raw=None if kept_raw is None else np.asarray(kept_raw),
    )


def pick_replacement_image(snapshot, candidate_indices, txt_feat, *,
                           source_pair_id: int = -1,
                           kept_raw=None) -> ReplacementPair:
    """Among the candidates' image features, the one most similar to txt_feat."""
    return _pick(snapshot, candidate_indices, txt_feat, REPLACE_IMAGE,
                 source_pair_id, kept_raw)


def pick_replacement_text(snapshot, candidate_indices, img_feat, *,
                          source_pair_id: int = -1,
                          kept_raw=None) -> ReplacementPair:
    return _pick(snapshot, candidate_indices, img_feat, REPLACE_TEXT,
                 source_pair_id, kept_raw)


def build_replacements(snapshot: memory_bank.BankSnapshot, enc: EncoderPair,
                       images, texts, pair_ids, k: int) -> list[ReplacementPair]:
    """Both replacement directions for every given pair.

    Returned grouped by direction (all image replacements, then all text
    replacements) so each direction forms its own negative pool.
    """
    images = np.atleast_2d(images)
    texts = np.atleast_2d(texts)
    u, _ = _project(enc.w_img, images)
    v, _ = _project(enc.w_txt, texts)
    img_side = []
    txt_side = []
    for i, pid in enumerate(pair_ids):
        cands_t = topk_similar_texts(snapshot, v[i], k)
        img_side.append(pick_replacement_image(
            snapshot, cands_t, v[i], source_pair_id=int(pid), kept_raw=texts[i]))
        cands_i = topk_similar_images(snapshot, u[i], k)
        txt_side.append(pick_replacement_text(
            snapshot, cands_i, u[i], source_pair_id=int(pid), kept_raw=images[i]))
    return img_side + txt_side


def _group_correlations(snapshot, group):
    if not group:
        return np.empty(0)
    img_feats = np.stack([
        r.replacement_feat if r.direction == REPLACE_IMAGE else r.kept_feat
        for r in group])
    txt_feats = np.stack([
        r.kept_feat if r.direction == REPLACE_IMAGE else r.replacement_feat
        for r in group])
    d_img = memory_bank.profile_distances(snapshot, img_feats, "img")
    d_txt = memory_bank.profile_distances(snapshot, txt_feats, "txt")
    return kernels.spearman_batch(d_img, d_txt)


def noisy_loss(enc: EncoderPair, replacements: list[ReplacementPair],
               snapshot: memory_bank.BankSnapshot, m: float, alpha: float):
    """Soft-margin triplet loss over replacement pairs, gradients to kept sides.

    Each replacement gets a soft label from its own distance profiles against
    the snapshot (labels normalized across all replacements in the batch) and
    a margin from it. Hard negatives come from the other replacements of the
    same direction; with both directions built per source pair, each
    direction's term carries half weight. Returns the unweighted loss; the
    caller applies the tau factor.
    """
    g_img = np.zeros_like(enc.w_img)
    g_txt = np.zeros_like(enc.w_txt)
    if not replacements:
        return 0.0, g_img, g_txt, None

    corre = _group_correlations(snapshot, replacements)
    labels = normalize_labels(corre)
    margins = soft_margin(labels.y_star, m, alpha)

    loss = 0.0
    for direction in (REPLACE_IMAGE, REPLACE_TEXT):
        sel = [i for i, r in enumerate(replacements) if r.direction == direction]
        if len(sel) < 2:
            continue  # no in-batch negatives for a lone replacement
        group = [replacements[i] for i in sel]
        const_feats = np.stack([r.replacement_feat for r in group])
        kept_raws = np.stack([np.asarray(r.kept_raw, dtype=np.float64) for r in group])
        if direction == REPLACE_IMAGE:
            kept, norms = _project(enc.w_txt, kept_raws)
            part, _, d_kept = kernels.triplet_loss_grads(const_feats, kept, margins[sel])
            g_txt += 0.5 * _backprop_to_weights(d_kept, kept, norms, kept_raws)
        else:
            kept, norms = _project(enc.w_img, kept_raws)
            part, d_kept, _ = kernels.triplet_loss_grads(kept, const_feats, margins[sel])
            g_img += 0.5 * _backprop_to_weights(d_kept, kept, norms, kept_raws)
        loss += 0.5 * part
    return loss, g_img, g_txt, labels
