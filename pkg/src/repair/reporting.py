"""CSV/JSON artifact writers for training runs.

All CSVs use header rows, UTF-8, LF line endings, and repr-formatted floats,
so reruns with identical flags and seed produce byte-identical files. The
hidden match flags are joined onto rows here, on the reporting side, after
training has finished.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation, npr
from .dataset import PairDataset
from .trainer import RunResult

DETECTION_GRID = tuple(round(0.05 * i, 2) for i in range(1, 10))  # 0.05 .. 0.45


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_epochs_csv(path, reports) -> None:
    write_csv(path,
              ["epoch", "variant", "l_clean", "l_noisy", "clean_size",
               "npr_count", "val_r1", "val_r5", "val_r10", "soft_label_auc"],
              [(r.epoch, r.variant, r.l_clean, r.l_noisy, r.clean_size,
                r.npr_count, r.val_r1, r.val_r5, r.val_r10, r.soft_label_auc)
               for r in reports])


def write_labels_csv(path, result: RunResult, ds: PairDataset) -> None:
    rows = [(epoch, net, pid, corre, y_star, int(ds.true_match[pid]))
            for epoch, net, pid, corre, y_star in result.collector.label_rows]
    write_csv(path, ["epoch", "net", "pair_id", "corre", "y_star", "true_match"],
              rows)


def write_npr_csv(path, result: RunResult, ds: PairDataset) -> None:
    rows = [(epoch, pid, direction, bank_idx, sim,
             int(ds.true_match[pid] == 0))
            for epoch, pid, direction, bank_idx, sim in result.collector.npr_rows]
    write_csv(path, ["epoch", "pair_id", "direction", "bank_entry_index",
                     "similarity_of_replacement", "was_truly_mismatched"], rows)


def final_epoch_labels(result: RunResult):
    """Mean soft label per pair over both networks at the last dumped epoch."""
    rows = result.collector.label_rows
    if not rows:
        return None, None
    last = max(r[0] for r in rows)
    acc: dict[int, list[float]] = {}
    for epoch, _net, pid, _corre, y_star in rows:
        if epoch == last:
            acc.setdefault(pid, []).append(y_star)
    pids = np.array(sorted(acc))
    y = np.array([float(np.mean(acc[p])) for p in pids])
    return pids, y


def write_density_csv(path, result: RunResult, ds: PairDataset,
                      bins: int = 20) -> None:
    pids, y = final_epoch_labels(result)
    if pids is None:
        write_csv(path, ["bin_lo", "bin_hi", "clean_count", "noisy_count"], [])
        return
    flags = ds.true_match[pids]
    edges = np.linspace(0.0, 1.0, bins + 1)
    clean_hist, _ = np.histogram(y[flags == 1], bins=edges)
    noisy_hist, _ = np.histogram(y[flags == 0], bins=edges)
    write_csv(path, ["bin_lo", "bin_hi", "clean_count", "noisy_count"],
              [(edges[i], edges[i + 1], int(clean_hist[i]), int(noisy_hist[i]))
               for i in range(bins)])


def detection_sweep(result: RunResult, ds: PairDataset, grid=DETECTION_GRID):
    """Detection metrics over an eta grid, from the final posteriors."""
    if result.posteriors_a is None or result.posteriors_b is None:
        return []
    flags = ds.true_match[result.train_ids]
    out = []
    for eta in grid:
        selected = npr.select_npr_candidates(result.posteriors_a,
                                             result.posteriors_b, eta)
        out.append((eta, selected.size,
                    evaluation.detection_metrics(selected, flags, eta)))
    return out


def write_detection_csv(path, result: RunResult, ds: PairDataset,
                        grid=DETECTION_GRID) -> None:
    rows = [(eta, n_sel, rep.accuracy, rep.precision, rep.recall,
             ";".join(rep.flags))
            for eta, n_sel, rep in detection_sweep(result, ds, grid)]
    write_csv(path, ["eta", "selected", "accuracy", "precision", "recall",
                     "flags"], rows)


def write_gmm_jsonl(path, result: RunResult) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in result.collector.gmm_records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_summary(result: RunResult) -> dict:
    last = result.reports[-1]
    return {
        "variant": result.config.variant,
        "seed": result.config.seed,
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "final_soft_label_auc": last.soft_label_auc,
        "train_size": int(result.train_ids.size),
        "val_size": int(result.val_ids.size),
        "epochs_run": len(result.reports),
    }


def write_final_json(path, result: RunResult) -> None:
    payload = run_summary(result)
    payload["config"] = asdict(result.config)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(path, command: str, config: dict, dataset_fingerprint: str,
                   outputs, started: str, finished: str, version: str) -> None:
    outputs = [str(p) for p in outputs]
    missing = [p for p in outputs if not (Path(p).is_file() and Path(p).stat().st_size)]
    if missing:
        raise RuntimeError(f"manifest lists missing or empty outputs: {missing}")
    payload = {
        "command": command,
        "config": config,
        "dataset_fingerprint": dataset_fingerprint,
        "started": started,
        "finished": finished,
        "outputs": outputs,
        "artifact_version": version,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
