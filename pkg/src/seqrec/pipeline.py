"""prepare -> train -> evaluate -> grid, with run directories keyed by config hash."""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

from . import data as D
from .config import ConfigError, ExperimentConfig, file_digest, resolve, stable_hash
from .evaluation import (ModelMetrics, evaluate_recs, mark_pareto, popular_baseline,
                         recommend, relevant_sets)
from .model import ModelParams
from .trainer import train

log = logging.getLogger(__name__)


class IncompatibleSplit(RuntimeError):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _read_json(path: Path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- prepare


def split_dir(cfg: ExperimentConfig, out_root) -> tuple[Path, str, Path]:
    base = Path(cfg.base_dir) if cfg.base_dir else None
    path = cfg.dataset.resolved_path(base)
    if not path.exists():
        raise D.IngestError(f"{path}: file not found")
    digest = file_digest(path)
    shash = cfg.split_hash(digest)
    return Path(out_root) / f"split-{shash[:12]}", shash, path


def prepare(cfg: ExperimentConfig, out_root) -> tuple[D.SplitResult, dict, Path]:
    directory, shash, path = split_dir(cfg, out_root)
    manifest_path = directory / "manifest.json"
    if manifest_path.exists() and _read_json(manifest_path).get("split_hash") == shash:
        split, manifest = D.load_split(directory)
        return split, manifest, directory
    t0 = time.perf_counter()
    raw = D.ingest(path, cfg.dataset.descriptor())
    filtered = D.core_filter(raw, cfg.split.user_core, cfg.split.item_core)
    shares = {str(w): D.tail_share(filtered, w) for w in cfg.split.window_options}
    window = cfg.split.window_days or D.select_window(
        filtered, cfg.split.window_options, cfg.split.target_fraction)
    split = D.temporal_split(filtered, window)
    fold = D.loo_validation(split.train)
    extra = {
        "split_hash": shash,
        "data_digest": file_digest(path),
        "dataset": asdict(cfg.dataset),
        "split_config": asdict(cfg.split),
        "tail_shares": shares,
        "raw_interactions": len(raw),
        "filtered_interactions": len(filtered),
        "validation_users": len(fold.holdout),
        "seconds": round(time.perf_counter() - t0, 3),
    }
    manifest = D.save_split(split, directory, extra)
    # content hash excludes timings so reruns compare equal
    stable = {k: v for k, v in manifest.items() if k != "seconds"}
    manifest["manifest_hash"] = stable_hash(stable)
    _write_json(directory / "manifest.json", manifest)
    return split, manifest, directory


# ---------------------------------------------------------------- train


def run_dir(cfg: ExperimentConfig, out_root, split_hash: str) -> tuple[Path, str]:
    rhash = stable_hash({"config": cfg.to_dict(), "split": split_hash})
    return Path(out_root) / f"run-{rhash[:12]}", rhash


def train_run(cfg: ExperimentConfig, out_root) -> tuple[Path, dict]:
    """Train one configuration; an existing complete run with the same hash is reused."""
    split, split_manifest, sdir = prepare(cfg, out_root)
    directory, rhash = run_dir(cfg, out_root, split_manifest["split_hash"])
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        manifest = _read_json(manifest_path)
        if manifest.get("run_hash") == rhash and manifest.get("complete"):
            log.info("reusing completed run %s", directory)
            return directory, manifest
    directory.mkdir(parents=True, exist_ok=True)
    _write_json(directory / "config.json", cfg.to_dict())
    t0 = time.perf_counter()
    fold = D.loo_validation(split.train)
    result = train(split.train, fold, cfg.model, cfg.objective, cfg.negatives, cfg.loss,
                   cfg.train, out_dir=directory)
    manifest = {
        "run_hash": rhash,
        "config_hash": cfg.hash(),
        "split_hash": split_manifest["split_hash"],
        "split_dir": str(sdir),
        "data_digest": split_manifest["data_digest"],
        "seed": cfg.train.seed,
        "preset": cfg.preset,
        "label": cfg.label(),
        "artifacts": {"checkpoint": "checkpoint.bin", "history": "history.jsonl",
                      "config": "config.json"},
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
        "timings": {"train_seconds": round(time.perf_counter() - t0, 3)},
        "complete": True,
    }
    _write_json(manifest_path, manifest)
    return directory, manifest


# ---------------------------------------------------------------- evaluate


def _metrics_dict(m: ModelMetrics, k: int) -> dict:
    return {"name": m.name, f"ndcg@{k}": m.ndcg, f"recall@{k}": m.recall,
            f"coverage@{k}": m.coverage, "pareto": m.pareto, **m.meta}


def evaluate_runs(run_dirs, out_root, ks=(10,), popular: bool = False,
                  recall_capped: bool = False, popular_window_days: int = 7) -> tuple[dict, Path]:
    run_dirs = [Path(r) for r in run_dirs]
    if not run_dirs and not popular:
        raise ValueError("nothing to evaluate")
    manifests = [_read_json(r / "manifest.json") for r in run_dirs]
    split_hashes = {m["split_hash"] for m in manifests}
    if len(split_hashes) > 1:
        raise IncompatibleSplit(f"runs were trained on different splits: {sorted(split_hashes)}")
    if not manifests:
        raise ValueError("popular baseline alone needs a split; pass at least one run")
    sdir = Path(manifests[0]["split_dir"])
    split, split_manifest = D.load_split(sdir)
    if split_manifest["split_hash"] not in split_hashes:
        raise IncompatibleSplit("split directory does not match run manifests")
    test_users = sorted(relevant_sets(split.test))
    ks = list(ks)
    kmax = max(ks)
    eval_hash = stable_hash({"runs": [m["run_hash"] for m in manifests], "k": ks,
                             "popular": popular, "capped": recall_capped})
    out = Path(out_root) / f"eval-{eval_hash[:12]}"
    out.mkdir(parents=True, exist_ok=True)

    entries = []  # (name, meta, RecList)
    if popular:
        recs = popular_baseline(split.train, test_users, kmax, popular_window_days)
        entries.append((f"Popular-{popular_window_days}-days", {"run": None}, recs))
    for rdir, man in zip(run_dirs, manifests):
        params = ModelParams.load(rdir / "checkpoint.bin")
        recs = recommend(params, split.train, test_users, kmax)
        entries.append((man.get("label") or rdir.name,
                        {"run": rdir.name, "config_hash": man["config_hash"],
                         "preset": man.get("preset")}, recs))

    report = {"split_hash": split_manifest["split_hash"], "test_users": len(test_users),
              "catalog_size": split.train.n_items, "k": ks, "primary_k": ks[0], "tables": {}}
    for k in ks:
        rows = []
        for name, meta, recs in entries:
            m = evaluate_recs(name, recs, split.test, split.train.n_items, k, recall_capped)
            m.meta = dict(meta)
            rows.append(m)
        mark_pareto(rows)
        report["tables"][str(k)] = {
            "models": [_metrics_dict(m, k) for m in rows],
            "points": [[m.ndcg, m.coverage] for m in rows],
        }
    for name, meta, recs in entries:
        tag = meta["run"] or f"popular{popular_window_days}"
        recs.to_csv(out / f"recs-{tag}.csv")
    _write_json(out / "report.json", report)
    (out / "report.txt").write_text(format_report(report))
    return report, out


def format_report(report: dict, sort_by_ndcg: bool = False) -> str:
    lines = []
    for k, table in report["tables"].items():
        models = table["models"]
        if sort_by_ndcg:
            models = sorted(models, key=lambda m: -m[f"ndcg@{k}"])
        width = max([len(m["name"]) for m in models] + [5])
        lines.append(f"{'Model':<{width}}  {'N@' + k:>10}  {'R@' + k:>10}  {'Cov@' + k:>10}  Par")
        for m in models:
            lines.append(f"{m['name']:<{width}}  {m[f'ndcg@{k}']:>10.6f}  "
                         f"{m[f'recall@{k}']:>10.6f}  {m[f'coverage@{k}']:>10.6f}  "
                         f"{'*' if m['pareto'] else ''}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- grid


def expand_grid(axes: dict[str, list]) -> list[dict]:
    if not axes or any(len(v) == 0 for v in axes.values()):
        return []
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def run_grid(raw: dict, out_root, preset: str | None = None, base_dir=None,
             seed: int | None = None) -> tuple[dict, Path]:
    axes = raw.get("grid") or {}
    combos = expand_grid(axes)
    if not combos:
        raise ConfigError("grid has no runs: every axis needs at least one value")
    runs = []
    cfg = None
    for combo in combos:
        overrides = dict(combo)
        if seed is not None:
            overrides["train.seed"] = seed
        cfg = resolve(raw, preset, overrides, base_dir)
        rdir, _ = train_run(cfg, out_root)
        runs.append((rdir, combo))
    report, out = evaluate_runs([r for r, _ in runs], out_root, cfg.eval.k, cfg.eval.popular,
                                cfg.eval.recall_capped, cfg.eval.popular_window_days)
    by_run = {r.name: combo for r, combo in runs}
    for table in report["tables"].values():
        for m in table["models"]:
            if m.get("run") in by_run:
                m["axes"] = by_run[m["run"]]
                m["name"] = m["name"] + " [" + ", ".join(
                    f"{k}={v}" for k, v in by_run[m["run"]].items()) + "]"
        table["models"].sort(key=lambda m: -next(v for k, v in m.items() if k.startswith("ndcg@")))
        table["points"] = [[m[next(k for k in m if k.startswith("ndcg@"))],
                            m[next(k for k in m if k.startswith("coverage@"))]]
                           for m in table["models"]]
    report["grid_axes"] = axes
    _write_json(out / "grid_report.json", report)
    (out / "grid_report.txt").write_text(format_report(report))
    return report, out


def summarize_history(run_dir) -> list[dict]:
    path = Path(run_dir) / "history.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
