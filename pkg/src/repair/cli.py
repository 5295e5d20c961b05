"""Experiment command line: dataset generation, training, ablations, sweeps.

Config precedence is flags > config file > built-in defaults; the config file
is a flat ``key = value`` text file using the long flag names. Exit codes:
0 success, 2 usage error, 3 runtime or data error. The default output root is
``$REPAIR_OUT_DIR`` (falling back to ./runs).
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from ._version import __version__
from . import dataset, encoders, reporting, trainer
from .errors import ParameterError, RepairError

EXIT_USAGE = 2
EXIT_RUNTIME = 3

GENERATE_DEFAULTS = {
    "n": 2000, "d-latent": 8, "d-img": 16, "d-txt": 16,
    "noise-rate": 0.4, "sigma": 0.1, "seed": 7,
}

_CONFIG_FIELD_BY_FLAG = {
    "epochs": "epochs", "warmup-epochs": "warmup_epochs",
    "batch-size": "batch_size", "lr": "lr", "alpha": "alpha", "m": "m",
    "p": "p", "eta": "eta", "tau": "tau", "k": "k", "bank-size": "bank_size",
    "embed-dim": "embed_dim", "val-fraction": "val_fraction", "seed": "seed",
    "variant": "variant",
}


def _out_root() -> Path:
    return Path(os.environ.get("REPAIR_OUT_DIR", "runs"))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; keys are the long flag names."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(
                    f"config {path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def _coerce(key: str, text: str, like):
    try:
        if isinstance(like, bool):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if like is None or isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ParameterError(f"--{key}: cannot parse {text!r}") from exc


def _merge(ns: argparse.Namespace, defaults: dict):
    """Resolve flag > config file > default for every key in `defaults`."""
    file_values = read_config_file(ns.config) if getattr(ns, "config", None) else {}
    merged = {}
    for key, default in defaults.items():
        attr = key.replace("-", "_")
        flag_value = getattr(ns, attr, None)
        # store_true flags only count as provided when actually set
        provided = (flag_value is not None
                    and not (isinstance(default, bool) and flag_value is False))
        if provided:
            merged[key] = flag_value
        elif key in file_values:
            merged[key] = _coerce(key, file_values[key], default)
        else:
            merged[key] = default
    return merged


def _train_defaults() -> dict:
    cfg = trainer.TrainConfig()
    out = {flag: getattr(cfg, attr) for flag, attr in _CONFIG_FIELD_BY_FLAG.items()}
    out["no-loss-norm"] = False
    return out


def _add_train_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", required=True, help="dataset file to train on")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--warmup-epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--m", type=float, help="soft-margin exponent base")
    parser.add_argument("--p", type=float, help="clean-posterior threshold")
    parser.add_argument("--eta", type=float, help="half-replacing gate")
    parser.add_argument("--tau", type=float, help="noisy-loss weight")
    parser.add_argument("--k", type=int, help="replacement search width")
    parser.add_argument("--bank-size", type=int)
    parser.add_argument("--embed-dim", type=int)
    parser.add_argument("--val-fraction", type=float)
    parser.add_argument("--no-loss-norm", action="store_true",
                        help="fit the mixture on raw (unnormalized) losses")
    parser.add_argument("--out-dir", help="run directory (default under out root)")
    parser.add_argument("--config", help="flat key = value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repair", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic pair dataset")
    gen.add_argument("--n", type=int)
    gen.add_argument("--d-latent", type=int)
    gen.add_argument("--d-img", type=int)
    gen.add_argument("--d-txt", type=int)
    gen.add_argument("--noise-rate", type=float)
    gen.add_argument("--sigma", type=float)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True)
    gen.add_argument("--jsonl", help="also export a JSON-lines debug copy")
    gen.add_argument("--config", help="flat key = value config file")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="run one training configuration")
    _add_train_options(tr)
    tr.add_argument("--variant", choices=trainer.VARIANTS)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    ab = sub.add_parser("ablate", help="all four variants over a seed set")
    _add_train_options(ab)
    ab.add_argument("--seeds", type=int, default=5, help="number of seeds")
    ab.add_argument("--seed-base", type=int, default=0)
    ab.add_argument("--workers", type=int, default=1)
    ab.add_argument("--assert-ordering", action="store_true",
                    help="exit nonzero if median repair R@1 < median hard R@1")
    ab.set_defaults(func=cmd_ablate)

    sw = sub.add_parser("sweep", help="grid over one hyperparameter")
    _add_train_options(sw)
    sw.add_argument("--variant", choices=trainer.VARIANTS)
    sw.add_argument("--param", required=True, choices=("eta", "tau", "bank-size"))
    sw.add_argument("--grid", required=True,
                    help="comma list (0.1,0.2) or start:stop:step range")
    sw.add_argument("--seeds", type=int, default=1)
    sw.add_argument("--seed-base", type=int, default=0)
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)
    return parser


def _build_config(ns, overrides=None) -> trainer.TrainConfig:
    merged = _merge(ns, _train_defaults())
    kwargs = {attr: merged[flag] for flag, attr in _CONFIG_FIELD_BY_FLAG.items()}
    if merged["no-loss-norm"]:
        kwargs["normalize_losses"] = False
    if overrides:
        kwargs.update(overrides)
    if kwargs.get("variant") is None:
        kwargs["variant"] = "repair"
    config = trainer.TrainConfig(**kwargs)
    config.validate()
    return config


def cmd_generate(ns) -> int:
    merged = _merge(ns, GENERATE_DEFAULTS)
    if not 0.0 <= merged["noise-rate"] < 1.0:
        raise ParameterError("--noise-rate must lie in [0, 1)")
    ds = dataset.generate(
        n=merged["n"], d_latent=merged["d-latent"], d_img=merged["d-img"],
        d_txt=merged["d-txt"], noise_rate=merged["noise-rate"],
        sigma=merged["sigma"], seed=merged["seed"])
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset.save(ds, out)
    if ns.jsonl:
        dataset.export_jsonl(ds, ns.jsonl)
    print(f"{reporting.fingerprint(out)}  {out}")
    return 0


def _write_run_artifacts(run_dir: Path, result, ds) -> list[Path]:
    run_dir.mkdir(parents=True, exist_ok=True)
    reporting.write_epochs_csv(run_dir / "epochs.csv", result.reports)
    reporting.write_labels_csv(run_dir / "labels.csv", result, ds)
    reporting.write_npr_csv(run_dir / "npr.csv", result, ds)
    reporting.write_density_csv(run_dir / "density.csv", result, ds)
    reporting.write_detection_csv(run_dir / "detection.csv", result, ds)
    reporting.write_gmm_jsonl(run_dir / "gmm.jsonl", result)
    reporting.write_final_json(run_dir / "final.json", result)
    encoders.save_weights(result.best_net_a, run_dir / "ckpt_a.bin")
    encoders.save_weights(result.best_net_b, run_dir / "ckpt_b.bin")
    return [run_dir / name for name in (
        "epochs.csv", "labels.csv", "npr.csv", "density.csv", "detection.csv",
        "gmm.jsonl", "final.json", "ckpt_a.bin", "ckpt_b.bin")]


def cmd_train(ns) -> int:
    started = _now()
    config = _build_config(ns)
    ds = dataset.load(ns.dataset)
    result = trainer.train(config, ds)
    run_dir = Path(ns.out_dir) if ns.out_dir else (
        _out_root() / f"train-{config.variant}-seed{config.seed}")
    outputs = _write_run_artifacts(run_dir, result, ds)
    reporting.write_manifest(
        run_dir / "manifest.json", "train", asdict(config),
        reporting.fingerprint(ns.dataset), outputs, started, _now(), __version__)
    best = result.best_val or {}
    print(f"run dir: {run_dir}")
    print(f"best epoch {result.best_epoch}: "
          f"val R@1 {best.get('r1_avg')}, rSum {best.get('r_sum')}")
    return 0


def _run_training_job(payload):
    """Worker for ablate/sweep; reloads the dataset in the child process."""
    dataset_path, config_kwargs = payload
    ds = dataset.load(dataset_path)
    config = trainer.TrainConfig(**config_kwargs)
    result = trainer.train(config, ds)
    summary = reporting.run_summary(result)
    summary["detection"] = [
        (eta, n_sel, rep.accuracy, rep.precision, rep.recall)
        for eta, n_sel, rep in reporting.detection_sweep(result, ds)]
    at_eta = reporting.detection_sweep(result, ds, grid=(config.eta,))
    summary["detection_at_eta"] = (
        None if not at_eta else
        (at_eta[0][2].accuracy, at_eta[0][2].precision, at_eta[0][2].recall))
    return summary


def _run_jobs(jobs, workers: int):
    if workers <= 1:
        return [_run_training_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_training_job, jobs))


def _r1_of(summary) -> float:
    best = summary["best_val"] or {}
    r1 = best.get("r1_avg")
    return float("nan") if r1 is None else float(r1)


def cmd_ablate(ns) -> int:
    started = _now()
    config = _build_config(ns)  # shared hyperparameters; variant/seed vary below
    if ns.seeds < 1:
        raise ParameterError("--seeds must be >= 1")
    seeds = [ns.seed_base + i for i in range(ns.seeds)]
    jobs = []
    for variant in trainer.VARIANTS:
        for seed in seeds:
            kwargs = asdict(config)
            kwargs.update(variant=variant, seed=seed)
            jobs.append((ns.dataset, kwargs))
    summaries = _run_jobs(jobs, ns.workers)

    run_dir = Path(ns.out_dir) if ns.out_dir else (_out_root() / "ablate")
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    by_variant: dict[str, list[float]] = {v: [] for v in trainer.VARIANTS}
    for (dataset_path, kwargs), summary in zip(jobs, summaries):
        best = summary["best_val"] or {}
        r1 = _r1_of(summary)
        by_variant[kwargs["variant"]].append(r1)
        rows.append((kwargs["variant"], kwargs["seed"], r1,
                     best.get("r_sum"), summary["final_soft_label_auc"],
                     summary["best_epoch"]))
    reporting.write_csv(run_dir / "ablation.csv",
                        ["variant", "seed", "val_r1", "val_r_sum",
                         "soft_label_auc", "best_epoch"], rows)
    medians = {v: statistics.median(vals) for v, vals in by_variant.items()}
    reporting.write_csv(run_dir / "medians.csv", ["variant", "median_val_r1"],
                        [(v, medians[v]) for v in trainer.VARIANTS])
    reporting.write_manifest(
        run_dir / "manifest.json", "ablate", asdict(config),
        reporting.fingerprint(ns.dataset),
        [run_dir / "ablation.csv", run_dir / "medians.csv"],
        started, _now(), __version__)
    for variant in trainer.VARIANTS:
        print(f"{variant:8s} median val R@1 = {medians[variant]!r}")
    if ns.assert_ordering and medians["repair"] < medians["hard"]:
        print("ordering violated: median repair R@1 < median hard R@1",
              file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def parse_grid(text: str):
    """Comma list (`a,b,c`) or inclusive `start:stop:step` range."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ParameterError("--grid range must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ParameterError("--grid range must advance forward")
        values = []
        v = start
        while v <= stop + 1e-12:
            values.append(round(v, 12))
            v += step
        return values
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values:
        raise ParameterError("--grid must name at least one value")
    return values


def cmd_sweep(ns) -> int:
    started = _now()
    config = _build_config(ns)
    grid = parse_grid(ns.grid)
    if ns.seeds < 1:
        raise ParameterError("--seeds must be >= 1")
    seeds = [ns.seed_base + i for i in range(ns.seeds)]
    attr = {"eta": "eta", "tau": "tau", "bank-size": "bank_size"}[ns.param]
    jobs = []
    for value in grid:
        for seed in seeds:
            kwargs = asdict(config)
            kwargs[attr] = int(value) if ns.param == "bank-size" else value
            kwargs["seed"] = seed
            trainer.TrainConfig(**kwargs).validate()
            jobs.append((ns.dataset, kwargs))
    summaries = _run_jobs(jobs, ns.workers)

    run_dir = Path(ns.out_dir) if ns.out_dir else (_out_root() / f"sweep-{ns.param}")
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    by_value: dict[float, list[float]] = {}
    for (dataset_path, kwargs), summary in zip(jobs, summaries):
        value = kwargs[attr]
        r1 = _r1_of(summary)
        by_value.setdefault(value, []).append(r1)
        det = summary["detection_at_eta"] if ns.param == "eta" else None
        rows.append((ns.param, value, kwargs["seed"], r1,
                     (summary["best_val"] or {}).get("r_sum"),
                     summary["final_soft_label_auc"],
                     None if det is None else det[0],
                     None if det is None else det[1],
                     None if det is None else det[2]))
    reporting.write_csv(run_dir / "sweep.csv",
                        ["param", "value", "seed", "val_r1", "val_r_sum",
                         "soft_label_auc", "det_accuracy", "det_precision",
                         "det_recall"], rows)
    reporting.write_manifest(
        run_dir / "manifest.json", "sweep", asdict(config),
        reporting.fingerprint(ns.dataset), [run_dir / "sweep.csv"],
        started, _now(), __version__)
    medians = {v: statistics.median(vals) for v, vals in by_value.items()}
    best_value = max(medians, key=lambda v: medians[v])
    print(f"sweep over {ns.param}: best median val R@1 at {ns.param}={best_value}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RepairError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
