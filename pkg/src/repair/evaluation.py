"""Retrieval and noise-detection metrics; the only consumer of hidden flags."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, UndefinedAucError

RECALL_KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalReport:
    direction: str          # "img2txt" or "txt2img"
    r_at: dict[int, float]  # K -> recall

    @property
    def r_sum(self) -> float:
        return float(sum(self.r_at.values()))


@dataclass(frozen=True)
class DetectionReport:
    accuracy: float
    precision: float
    recall: float
    eta_used: float
    flags: tuple[str, ...] = field(default_factory=tuple)  # undefined metrics zeroed


def recall_at_k(sim_matrix: np.ndarray, k: int, direction: str = "img2txt") -> float:
    """Fraction of queries whose true partner ranks in the top k.

    Row i's partner is column i. Ties rank by lower index: an equal-similarity
    candidate with a smaller index is counted ahead of the partner.
    """
    sim = np.asarray(sim_matrix, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ParameterError("similarity matrix must be square")
    n = sim.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must lie in [1, {n}]")
    if direction == "txt2img":
        sim = sim.T
    elif direction != "img2txt":
        raise ParameterError("direction must be 'img2txt' or 'txt2img'")
    pos = np.diag(sim)
    better = (sim > pos[:, None]).sum(axis=1)
    tied_lower = np.array([
        int((sim[i, :i] == pos[i]).sum()) for i in range(n)])
    rank = better + tied_lower + 1
    return float((rank <= k).mean())


def retrieval_reports(sim_matrix: np.ndarray) -> list[RetrievalReport]:
    out = []
    n = np.asarray(sim_matrix).shape[0]
    for direction in ("img2txt", "txt2img"):
        r_at = {k: recall_at_k(sim_matrix, k, direction)
                for k in RECALL_KS if k <= n}
        out.append(RetrievalReport(direction, r_at))
    return out


def detection_metrics(selected, true_match, eta_used: float = float("nan")) -> DetectionReport:
    """Confusion metrics treating `selected` as predicted-mismatched."""
    flags = np.asarray(true_match)
    n = flags.size
    predicted = np.zeros(n, dtype=bool)
    sel = np.asarray(selected, dtype=np.int64)
    if sel.size:
        if sel.min() < 0 or sel.max() >= n:
            raise ParameterError("selected indices out of range")
        predicted[sel] = True
    actual = flags == 0
    tp = int((predicted & actual).sum())
    accuracy = float((predicted == actual).mean())
    notes = []
    if predicted.sum() == 0:
        precision = 0.0
        notes.append("precision-undefined")
    else:
        precision = tp / int(predicted.sum())
    if actual.sum() == 0:
        recall = 0.0
        notes.append("recall-undefined")
    else:
        recall = tp / int(actual.sum())
    return DetectionReport(accuracy, float(precision), float(recall),
                           float(eta_used), tuple(notes))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def soft_label_separation(y_star, true_match, bins: int = 20):
    """Rank-based AUC of the labels as a clean-vs-noisy score, plus histograms.

    Ties count one half. Returns (auc, clean_hist, noisy_hist, bin_edges)
    with `bins` equal-width bins over [0, 1].
    """
    y = np.asarray(y_star, dtype=np.float64)
    flags = np.asarray(true_match)
    if y.shape != flags.shape:
        raise ParameterError("labels and flags must have equal length")
    clean = y[flags == 1]
    noisy = y[flags == 0]
    if clean.size == 0 or noisy.size == 0:
        raise UndefinedAucError("both populations must be non-empty")
    ranks = _average_ranks(y)
    u = ranks[flags == 1].sum() - clean.size * (clean.size + 1) / 2.0
    auc = float(u / (clean.size * noisy.size))
    edges = np.linspace(0.0, 1.0, bins + 1)
    clean_hist, _ = np.histogram(clean, bins=edges)
    noisy_hist, _ = np.histogram(noisy, bins=edges)
    return auc, clean_hist, noisy_hist, edges
