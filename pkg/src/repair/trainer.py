"""Two-network co-teaching loop with memory banks and half-replacing.

Per epoch: each network scores every training pair with the warm-up loss,
a two-component mixture turns the losses into clean posteriors, and each
network trains on the partition produced by the *other* network. Within a
batch, the clean members get soft-margin triplet updates (margins from the
rank-correlation labels against the pre-push bank snapshot), the fresh clean
features are pushed into the bank, and pairs that both networks consider
noisy (posterior below eta) are half-replaced from the same snapshot and
contribute a tau-weighted extra loss.

Variants:
  * ``hard``     - no bank; margin alpha for assigned-clean pairs, 0 otherwise,
                   trained on the full batch.
  * ``drop``     - assigned-noisy pairs are discarded; uniform alpha margin.
  * ``rc-drop``  - like drop, with rank-correlation soft margins.
  * ``repair``   - rc-drop plus the half-replacing loss on eligible pairs.

Hidden match flags are never read on the training path; evaluation (the
validation split, per-epoch AUC) is their only consumer.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import evaluation, gmm, npr
from .dataset import PairDataset
from .encoders import (EncoderPair, embed_image, embed_text, init_encoders,
                       sgd_step, soft_margin, triplet_loss_and_grad,
                       warmup_loss_and_grad)
from .errors import ParameterError, UndefinedAucError
from .memory_bank import MemoryBank
from .rank_correlation import normalize_labels, profile_correlations

__all__ = ["TrainConfig", "TrainerState", "EpochReport", "RunResult",
           "RunCollector", "soft_margin", "make_state", "split_train_val",
           "warmup", "train_epoch", "train", "VARIANTS"]

logger = logging.getLogger(__name__)

VARIANTS = ("hard", "drop", "rc-drop", "repair")

# seed-stream salts so independent random decisions never collide
_SALT_NET_A, _SALT_NET_B, _SALT_VAL, _SALT_EPOCH = 11, 12, 13, 14


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 128
    lr: float = 0.05
    lr_decay: float = 0.1
    lr_decay_epoch: int = 20
    alpha: float = 0.2
    m: float = 10.0           # soft-margin exponent base
    p: float = 0.5            # clean-posterior threshold
    eta: float = 0.25         # half-replacing gate
    tau: float = 0.15         # weight of the noisy loss
    k: int | None = None      # replacement search width; None = auto
    bank_size: int = 512
    embed_dim: int = 16
    val_fraction: float = 0.1
    seed: int = 0
    variant: str = "repair"
    label_scope: str = "epoch"  # soft-label anchors per 'epoch' or per 'batch'
    normalize_losses: bool = True
    gmm_max_iters: int = 100
    gmm_tol: float = 1e-6

    def resolved_k(self) -> int:
        if self.k is not None:
            return self.k
        return 32 if self.bank_size >= 1024 else 8

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}")
        if self.label_scope not in ("epoch", "batch"):
            raise ParameterError("label-scope must be 'epoch' or 'batch'")
        if self.warmup_epochs < 1:
            raise ParameterError("warmup-epochs must be >= 1")
        if self.epochs <= self.warmup_epochs:
            raise ParameterError("epochs must exceed warmup-epochs")
        if self.batch_size < 2:
            raise ParameterError("batch-size must be >= 2")
        if self.lr <= 0:
            raise ParameterError("lr must be > 0")
        if self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if self.m <= 1:
            raise ParameterError("m must be > 1")
        if not 0 < self.p < 1:
            raise ParameterError("p must lie in (0, 1)")
        if not 0 < self.eta < 1:
            raise ParameterError("eta must lie in (0, 1)")
        if self.tau < 0:
            raise ParameterError("tau must be >= 0")
        if self.k is not None and self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.bank_size < 2:
            raise ParameterError("bank-size must be >= 2")
        if self.embed_dim < 1:
            raise ParameterError("embed-dim must be >= 1")
        if not 0 <= self.val_fraction <= 0.5:
            raise ParameterError("val-fraction must lie in [0, 0.5]")
        if self.seed < 0:
            raise ParameterError("seed must be >= 0")


@dataclass
class TrainerState:
    net_a: EncoderPair
    net_b: EncoderPair
    bank_a: MemoryBank | None
    bank_b: MemoryBank | None
    epoch: int = 0


@dataclass
class EpochReport:
    epoch: int
    variant: str
    l_clean: float
    l_noisy: float
    clean_size: float         # mean of the two networks' assigned clean sets
    npr_count: int
    val_r1: float | None
    val_r5: float | None
    val_r10: float | None
    soft_label_auc: float | None


@dataclass
class RunCollector:
    label_rows: list = field(default_factory=list)   # (epoch, net, pair_id, corre, y*)
    npr_rows: list = field(default_factory=list)     # (epoch, pair_id, dir, bank_idx, sim)
    gmm_records: list = field(default_factory=list)  # dict per net per epoch
    epoch_digests: list = field(default_factory=list)
    batch_digests: list | None = None                # (epoch, net, batch, digest)


@dataclass
class RunResult:
    config: TrainConfig
    reports: list
    best_epoch: int
    best_val: dict | None
    best_net_a: EncoderPair
    best_net_b: EncoderPair
    train_ids: np.ndarray
    val_ids: np.ndarray
    posteriors_a: np.ndarray | None
    posteriors_b: np.ndarray | None
    collector: RunCollector


def make_state(config: TrainConfig, ds: PairDataset) -> TrainerState:
    net_a = init_encoders(config.embed_dim, ds.d_img, ds.d_txt,
                          [config.seed, _SALT_NET_A])
    net_b = init_encoders(config.embed_dim, ds.d_img, ds.d_txt,
                          [config.seed, _SALT_NET_B])
    return TrainerState(net_a, net_b, None, None)


def split_train_val(ds: PairDataset, config: TrainConfig):
    """Seeded held-out split; the validation side keeps only true matches.

    Reading the hidden flags here is an evaluation concern (the paper-style
    clean validation set); the training indices are fixed before looking.
    """
    n = len(ds)
    n_val = round(config.val_fraction * n)
    rng = np.random.default_rng([config.seed, _SALT_VAL])
    val = (np.sort(rng.choice(n, size=n_val, replace=False))
           if n_val else np.empty(0, np.int64))
    train = np.setdiff1d(np.arange(n), val)
    val_clean = val[ds.true_match[val] == 1] if n_val else val
    return train, val_clean


def _epoch_order(config: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([config.seed, _SALT_EPOCH, epoch]).permutation(n)


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr * (config.lr_decay if epoch >= config.lr_decay_epoch else 1.0)


def _digest(net: EncoderPair) -> str:
    h = hashlib.sha256()
    h.update(net.w_img.tobytes())
    h.update(net.w_txt.tobytes())
    return h.hexdigest()


def _evaluate(state: TrainerState, ds: PairDataset, val_idx: np.ndarray):
    """Recall table on the clean validation pairs, averaging both networks."""
    if val_idx is None or val_idx.size < 1:
        return None
    imgs = ds.images[val_idx]
    txts = ds.texts[val_idx]
    sim = 0.5 * (embed_image(state.net_a, imgs) @ embed_text(state.net_a, txts).T
                 + embed_image(state.net_b, imgs) @ embed_text(state.net_b, txts).T)
    reports = evaluation.retrieval_reports(sim)
    out = {rep.direction: dict(rep.r_at) for rep in reports}
    r1_vals = [rep.r_at[1] for rep in reports if 1 in rep.r_at]
    out["r1_avg"] = float(np.mean(r1_vals)) if r1_vals else None
    out["r_sum"] = float(sum(rep.r_sum for rep in reports))
    return out


def _epoch_report(state, ds, config, epoch, val_idx, *, l_clean, l_noisy,
                  clean_size, npr_count, auc) -> EpochReport:
    val = _evaluate(state, ds, val_idx)
    return EpochReport(
        epoch=epoch, variant=config.variant,
        l_clean=l_clean, l_noisy=l_noisy, clean_size=clean_size,
        npr_count=npr_count,
        val_r1=None if val is None else val["r1_avg"],
        val_r5=None if val is None else 0.5 * (val["img2txt"].get(5, 0.0)
                                               + val["txt2img"].get(5, 0.0)),
        val_r10=None if val is None else 0.5 * (val["img2txt"].get(10, 0.0)
                                                + val["txt2img"].get(10, 0.0)),
        soft_label_auc=auc,
    )


def _push_clean_features(bank: MemoryBank, net: EncoderPair,
                         ds: PairDataset, rows: np.ndarray) -> None:
    bank.push_batch(embed_image(net, ds.images[rows]),
                    embed_text(net, ds.texts[rows]))


def _init_bank(net: EncoderPair, ds: PairDataset, config: TrainConfig,
               train_idx: np.ndarray) -> MemoryBank:
    """Fill a fresh bank with the lowest-warm-up-loss clean pairs."""
    bank = MemoryBank(config.bank_size, config.embed_dim)
    losses = gmm.per_sample_losses(net, ds, config.alpha, config.batch_size,
                                   indices=train_idx)
    split = gmm.split_clean_noisy(losses, config.p, config.gmm_max_iters,
                                  config.gmm_tol, config.normalize_losses)
    clean = split.clean_ids if split.clean_ids.size else np.arange(train_idx.size)
    order = clean[np.argsort(losses[clean], kind="stable")]
    chosen = order[:min(config.bank_size, order.size)]
    _push_clean_features(bank, net, ds, train_idx[chosen])
    return bank


def _init_banks(state: TrainerState, ds: PairDataset, config: TrainConfig,
                train_idx: np.ndarray) -> None:
    if config.variant in ("rc-drop", "repair"):
        state.bank_a = _init_bank(state.net_a, ds, config, train_idx)
        state.bank_b = _init_bank(state.net_b, ds, config, train_idx)


def _warmup_epoch(state, ds, config, train_idx, val_idx, collect) -> EpochReport:
    epoch = state.epoch
    order = _epoch_order(config, epoch, train_idx.size)
    lr = _epoch_lr(config, epoch)
    losses = []
    for b_idx, (start, stop) in enumerate(gmm.batch_bounds(train_idx.size,
                                                           config.batch_size)):
        rows = train_idx[order[start:stop]]
        imgs, txts = ds.images[rows], ds.texts[rows]
        for key in ("a", "b"):
            net = getattr(state, f"net_{key}")
            loss, g_img, g_txt = warmup_loss_and_grad(net, imgs, txts, config.alpha)
            net = sgd_step(net, g_img, g_txt, lr)
            setattr(state, f"net_{key}", net)
            losses.append(loss)
            if collect.batch_digests is not None:
                collect.batch_digests.append((epoch, key, b_idx, _digest(net)))
    state.epoch = epoch + 1
    collect.epoch_digests.append((epoch, _digest(state.net_a), _digest(state.net_b)))
    return _epoch_report(state, ds, config, epoch, val_idx,
                         l_clean=float(np.mean(losses)), l_noisy=0.0,
                         clean_size=float(train_idx.size), npr_count=0, auc=None)


def warmup(state: TrainerState, ds: PairDataset, config: TrainConfig, *,
           train_idx: np.ndarray | None = None,
           val_idx: np.ndarray | None = None,
           collect: RunCollector | None = None) -> list[EpochReport]:
    """Train both networks on all pairs, then initialize the banks."""
    if train_idx is None:
        train_idx = np.arange(len(ds))
    collect = collect if collect is not None else RunCollector()
    reports = [_warmup_epoch(state, ds, config, train_idx, val_idx, collect)
               for _ in range(config.warmup_epochs)]
    _init_banks(state, ds, config, train_idx)
    return reports


def _label_dump(state, ds, config, train_idx, epoch, collect):
    """Soft labels for every training pair against each network's bank."""
    y_by_net = {}
    for key in ("a", "b"):
        bank = getattr(state, f"bank_{key}")
        if bank is None or len(bank) < 2:
            return None
        net = getattr(state, f"net_{key}")
        snap = bank.snapshot()
        corre = profile_correlations(snap,
                                     embed_image(net, ds.images[train_idx]),
                                     embed_text(net, ds.texts[train_idx]))
        labels = normalize_labels(corre)
        y_by_net[key] = labels.y_star
        for i, pid in enumerate(train_idx):
            collect.label_rows.append(
                (epoch, key, int(pid), float(corre[i]), float(labels.y_star[i])))
    y_mean = 0.5 * (y_by_net["a"] + y_by_net["b"])
    try:
        auc, _, _, _ = evaluation.soft_label_separation(
            y_mean, ds.true_match[train_idx])
    except UndefinedAucError:
        return None
    return float(auc)


def _gmm_record(epoch, net_key, split) -> dict:
    rec = {"epoch": int(epoch), "net": net_key, "degenerate": bool(split.degenerate)}
    if split.fit is not None:
        rec.update({
            "means": [float(v) for v in split.fit.means],
            "variances": [float(v) for v in split.fit.variances],
            "weights": [float(v) for v in split.fit.weights],
            "iterations": int(split.fit.iterations),
            "final_log_likelihood": split.fit.final_log_likelihood,
        })
    return rec


def train_epoch(state: TrainerState, ds: PairDataset, config: TrainConfig, *,
                train_idx: np.ndarray | None = None,
                val_idx: np.ndarray | None = None,
                collect: RunCollector | None = None) -> EpochReport:
    """One co-teaching epoch at state.epoch; mutates state in place."""
    if train_idx is None:
        train_idx = np.arange(len(ds))
    collect = collect if collect is not None else RunCollector()
    epoch = state.epoch
    lr = _epoch_lr(config, epoch)
    n = train_idx.size

    splits = {}
    for key in ("a", "b"):
        net = getattr(state, f"net_{key}")
        losses = gmm.per_sample_losses(net, ds, config.alpha, config.batch_size,
                                       indices=train_idx)
        split = gmm.split_clean_noisy(losses, config.p, config.gmm_max_iters,
                                      config.gmm_tol, config.normalize_losses)
        if split.degenerate:
            logger.warning("epoch %d: net %s mixture fit degenerate, "
                           "all pairs treated as clean", epoch, key)
        splits[key] = split
        collect.gmm_records.append(_gmm_record(epoch, key, split))

    # co-teaching swap: each network trains on the other's partition
    clean_mask = {"a": np.zeros(n, dtype=bool), "b": np.zeros(n, dtype=bool)}
    clean_mask["a"][splits["b"].clean_ids] = True
    clean_mask["b"][splits["a"].clean_ids] = True
    eligible = ((splits["a"].posteriors < config.eta)
                & (splits["b"].posteriors < config.eta))

    order = _epoch_order(config, epoch, n)
    bounds = gmm.batch_bounds(n, config.batch_size)
    clean_losses, noisy_losses = [], []
    npr_count = 0

    for key in ("a", "b"):
        net = getattr(state, f"net_{key}")
        bank = getattr(state, f"bank_{key}")
        mask = clean_mask[key]
        degenerate = not mask.any()
        if degenerate:
            logger.warning("epoch %d: net %s has an empty clean subset, "
                           "training warm-up style on all pairs", epoch, key)
        epoch_margins = None
        if (not degenerate and config.label_scope == "epoch"
                and config.variant in ("rc-drop", "repair")
                and bank is not None and len(bank) >= 2):
            # anchors over the whole assigned clean set, epoch-start snapshot
            snap0 = bank.snapshot()
            c_all = np.flatnonzero(mask)
            rows_all = train_idx[c_all]
            corre = profile_correlations(
                snap0, embed_image(net, ds.images[rows_all]),
                embed_text(net, ds.texts[rows_all]))
            epoch_margins = np.full(n, config.alpha)
            epoch_margins[c_all] = soft_margin(
                normalize_labels(corre).y_star, config.m, config.alpha)
        for b_idx, (start, stop) in enumerate(bounds):
            pos = order[start:stop]
            rows = train_idx[pos]
            l_noisy = 0.0
            if degenerate:
                l_clean, g_img, g_txt = warmup_loss_and_grad(
                    net, ds.images[rows], ds.texts[rows], config.alpha)
            elif config.variant == "hard":
                margins = np.where(mask[pos], config.alpha, 0.0)
                l_clean, g_img, g_txt = triplet_loss_and_grad(
                    net, ds.images[rows], ds.texts[rows], margins)
            else:
                c_pos = pos[mask[pos]]
                if c_pos.size < 2:
                    continue  # no in-batch negatives among assigned-clean pairs
                c_rows = train_idx[c_pos]
                imgs_c, txts_c = ds.images[c_rows], ds.texts[c_rows]
                snap = bank.snapshot() if bank is not None else None
                if config.variant == "drop" or snap is None or len(snap) < 2:
                    margins = np.full(c_pos.size, config.alpha)
                elif epoch_margins is not None:
                    margins = epoch_margins[c_pos]
                else:
                    corre = profile_correlations(
                        snap, embed_image(net, imgs_c), embed_text(net, txts_c))
                    margins = soft_margin(normalize_labels(corre).y_star,
                                          config.m, config.alpha)
                l_clean, g_img, g_txt = triplet_loss_and_grad(
                    net, imgs_c, txts_c, margins)
                if config.variant in ("rc-drop", "repair"):
                    _push_clean_features(bank, net, ds, c_rows)
                if (config.variant == "repair" and config.tau > 0
                        and snap is not None and len(snap) >= 2):
                    sel = pos[(~mask[pos]) & eligible[pos]]
                    if sel.size:
                        k = min(config.resolved_k(), len(snap))
                        reps = npr.build_replacements(
                            snap, net, ds.images[train_idx[sel]],
                            ds.texts[train_idx[sel]], train_idx[sel], k)
                        l_noisy, gn_img, gn_txt, _ = npr.noisy_loss(
                            net, reps, snap, config.m, config.alpha)
                        g_img = g_img + config.tau * gn_img
                        g_txt = g_txt + config.tau * gn_txt
                        npr_count += int(sel.size)
                        collect.npr_rows.extend(
                            (epoch, r.source_pair_id, r.direction,
                             r.bank_entry_index, r.similarity) for r in reps)
            net = sgd_step(net, g_img, g_txt, lr)
            clean_losses.append(l_clean)
            noisy_losses.append(l_noisy)
            if collect.batch_digests is not None:
                collect.batch_digests.append((epoch, key, b_idx, _digest(net)))
        setattr(state, f"net_{key}", net)

    state.epoch = epoch + 1
    auc = None
    if config.variant in ("rc-drop", "repair"):
        auc = _label_dump(state, ds, config, train_idx, epoch, collect)
    collect.epoch_digests.append((epoch, _digest(state.net_a), _digest(state.net_b)))
    return _epoch_report(
        state, ds, config, epoch, val_idx,
        l_clean=float(np.mean(clean_losses)) if clean_losses else 0.0,
        l_noisy=float(np.mean(noisy_losses)) if noisy_losses else 0.0,
        clean_size=0.5 * (splits["a"].clean_ids.size + splits["b"].clean_ids.size),
        npr_count=npr_count, auc=auc)


def train(config: TrainConfig, ds: PairDataset, *,
          record_batch_digests: bool = False) -> RunResult:
    """Full run: warm-up, main epochs, best-validation checkpoint selection."""
    config.validate()
    if config.variant in ("hard", "drop") and config.tau != TrainConfig.tau:
        logger.warning("tau=%g is ignored for the %s variant",
                       config.tau, config.variant)
    train_idx, val_idx = split_train_val(ds, config)
    if train_idx.size < 2:
        raise ParameterError("training split needs at least 2 pairs")
    state = make_state(config, ds)
    collect = RunCollector(batch_digests=[] if record_batch_digests else None)

    best = {"epoch": -1, "r1": -np.inf, "val": None, "a": None, "b": None}

    def _track(report: EpochReport) -> None:
        r1 = -np.inf if report.val_r1 is None else report.val_r1
        if best["epoch"] < 0 or r1 > best["r1"]:
            best.update(epoch=report.epoch, r1=r1,
                        val=_evaluate(state, ds, val_idx),
                        a=state.net_a.copy(), b=state.net_b.copy())

    reports = []
    for _ in range(config.warmup_epochs):
        report = _warmup_epoch(state, ds, config, train_idx, val_idx, collect)
        reports.append(report)
        _track(report)
    _init_banks(state, ds, config, train_idx)
    for _ in range(config.warmup_epochs, config.epochs):
        report = train_epoch(state, ds, config, train_idx=train_idx,
                             val_idx=val_idx, collect=collect)
        reports.append(report)
        _track(report)

    # posteriors of the final weights, for detection reports and eta sweeps
    posteriors = {}
    for key in ("a", "b"):
        losses = gmm.per_sample_losses(getattr(state, f"net_{key}"), ds,
                                       config.alpha, config.batch_size,
                                       indices=train_idx)
        posteriors[key] = gmm.split_clean_noisy(
            losses, config.p, config.gmm_max_iters, config.gmm_tol,
            config.normalize_losses).posteriors

    return RunResult(
        config=config, reports=reports,
        best_epoch=int(best["epoch"]), best_val=best["val"],
        best_net_a=best["a"], best_net_b=best["b"],
        train_ids=train_idx, val_ids=val_idx,
        posteriors_a=posteriors["a"], posteriors_b=posteriors["b"],
        collector=collect)
