"""Repeated split/train/evaluate runs and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from promptiqa import plotting
from promptiqa.backend import load_backend
from promptiqa.config import DatasetConfig, RunConfig, build_model
from promptiqa.dataset import (
    ImageCache,
    Sample,
    SplitSpec,
    load_dataset,
    normalize_mos,
    split,
    write_split_manifest,
)
from promptiqa.errors import ConfigError, InputError
from promptiqa.model import ImageInputMode
from promptiqa.prompting import VALID_SCHEMES, PromptScheme, TaskKind
from promptiqa.regression import AlphaMode
from promptiqa.training import evaluate, train

log = logging.getLogger(__name__)

REPETITION_FIELDS = ("dataset", "task", "repetition", "srcc", "plcc", "best_epoch", "n_train", "n_test")
SUMMARY_FIELDS = ("dataset", "task", "scheme", "repetitions", "srcc_mean", "srcc_std",
                  "plcc_mean", "plcc_std", "config_hash")
ABLATION_FIELDS = ("dataset", "task", "axis", "setting", "srcc_mean", "plcc_mean", "repetitions",
                   "config_hash")
AXES = ("prompt_scheme", "image_input", "alpha")


@dataclass
class RepetitionResult:
    dataset: str
    task: TaskKind
    repetition: int
    srcc: float
    plcc: float
    best_epoch: int
    n_train: int
    n_test: int
    predictions: list[dict]
    history: list[dict]

    def row(self) -> dict:
        return {"dataset": self.dataset, "task": self.task.value, "repetition": self.repetition,
                "srcc": self.srcc, "plcc": self.plcc, "best_epoch": self.best_epoch,
                "n_train": self.n_train, "n_test": self.n_test}


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fieldnames})
    return path


def task_samples(dataset: DatasetConfig, task: TaskKind, levels: int) -> list[Sample]:
    samples = load_dataset(dataset.manifest, dataset.image_dir)
    samples = [s for s in samples if task in s.raw_mos]
    if len(samples) < 2:
        raise InputError(f"{dataset.name}: fewer than two samples with {task.value} MOS")
    return normalize_mos(samples, upper=levels)


def run_repetition(cfg: RunConfig, dataset: DatasetConfig, samples: Sequence[Sample],
                   repetition: int, out_dir: Path, backend=None,
                   cache: ImageCache | None = None) -> RepetitionResult:
    """One split -> fine-tune -> evaluate cycle for ``cfg.task``."""
    spec = SplitSpec(cfg.split_ratio, cfg.train.seed, repetition)
    train_set, test_set = split(samples, spec)
    tag = f"{dataset.name}_{cfg.task.value}_rep{repetition:02d}"
    manifest = write_split_manifest(out_dir / "splits" / f"{tag}.csv", train_set, test_set, repetition)
    backend = backend.clone() if backend is not None else load_backend(cfg.backend)
    model = build_model(cfg, backend)
    cache = cache or model.make_cache(dataset.cache_images)
    ckpt = train(cfg.train, model, train_set, test_set, cache, run_config=cfg.to_dict(),
                 split_manifest=str(manifest), dump_dir=out_dir / "diagnostics")
    if cfg.save_checkpoints:
        ckpt.save(out_dir / "checkpoints" / tag)
    result = evaluate(model, test_set, cfg.task, cache, cfg.train.batch_size, cfg.logistic_plcc)
    return RepetitionResult(
        dataset.name, cfg.task, repetition, result.srcc, result.plcc, ckpt.epoch,
        len(train_set), len(test_set), result.to_dict()["samples"], ckpt.history,
    )


def _worker(args) -> RepetitionResult:
    cfg_dict, dataset, repetition, out_dir = args
    cfg = RunConfig.from_dict(cfg_dict)
    levels = build_model(cfg, load_backend(cfg.backend)).levels
    samples = task_samples(dataset, cfg.task, levels)
    return run_repetition(cfg, dataset, samples, repetition, Path(out_dir))


def run_task(cfg: RunConfig, dataset: DatasetConfig, out_dir: Path, parallel: int = 0,
             backend=None) -> list[RepetitionResult]:
    """All repetitions for one (dataset, task)."""
    if parallel > 1:
        jobs = [(cfg.to_dict(), dataset, r, str(out_dir / f"rep{r:02d}"))
                for r in range(cfg.repetitions)]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_worker, jobs))
    backend = backend if backend is not None else load_backend(cfg.backend)
    levels = build_model(cfg, backend.clone()).levels
    samples = task_samples(dataset, cfg.task, levels)
    cache = ImageCache(backend.input_size, cfg.patches_n, dataset.cache_images, backend.preprocess)
    return [run_repetition(cfg, dataset, samples, r, out_dir, backend, cache)
            for r in range(cfg.repetitions)]


def summarize(results: Sequence[RepetitionResult], scheme: PromptScheme, config_hash: str) -> dict:
    srcc = np.array([r.srcc for r in results], dtype=np.float64)
    plcc = np.array([r.plcc for r in results], dtype=np.float64)
    return {
        "dataset": results[0].dataset, "task": results[0].task.value, "scheme": scheme.value,
        "repetitions": len(results),
        "srcc_mean": float(np.mean(srcc)), "srcc_std": float(np.std(srcc)),
        "plcc_mean": float(np.mean(plcc)), "plcc_std": float(np.std(plcc)),
        "config_hash": config_hash,
    }


def _write_task_outputs(results: Sequence[RepetitionResult], out_dir: Path, config_hash: str) -> None:
    first = results[0]
    tag = f"{first.dataset}_{first.task.value}"
    for r in results:
        payload = {"dataset": r.dataset, "task": r.task.value, "repetition": r.repetition,
                   "config_hash": config_hash, "srcc": r.srcc, "plcc": r.plcc,
                   "samples": r.predictions}
        path = out_dir / "predictions" / f"{tag}_rep{r.repetition:02d}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n")
    pred = [s["prediction"] for r in results for s in r.predictions]
    mos = [s["target"] for r in results for s in r.predictions]
    srcc = float(np.mean([r.srcc for r in results]))
    plcc = float(np.mean([r.plcc for r in results]))
    plotting.scatter(pred, mos, out_dir / "plots" / f"scatter_{tag}.png",
                     title=f"{first.dataset} {first.task.value}", srcc=srcc, plcc=plcc)
    plotting.training_curves([r.history for r in results], out_dir / "plots" / f"curves_{tag}.png",
                             title=tag)


def run_benchmark(cfg: RunConfig, out_dir: str | Path | None = None, parallel: int = 0) -> list[dict]:
    """Every (dataset, task) pair over ``cfg.repetitions`` splits.

    Writes repetitions.csv, summary.csv, per-image prediction JSON, split
    manifests and scatter/curve plots under ``out_dir``; returns the summary rows.
    """
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.hash()
    (out_dir / "run.json").write_text(
        json.dumps({"config_hash": config_hash, "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n"
    )
    backend = None if parallel > 1 else load_backend(cfg.backend)
    summary, per_rep = [], []
    for dataset in cfg.datasets:
        for task in cfg.benchmark_tasks():
            task_cfg = cfg.for_task(task)
            results = run_task(task_cfg, dataset, out_dir, parallel, backend)
            per_rep.extend(r.row() for r in results)
            summary.append(summarize(results, task_cfg.scheme, config_hash))
            _write_task_outputs(results, out_dir, config_hash)
    write_csv(out_dir / "repetitions.csv", REPETITION_FIELDS, per_rep)
    write_csv(out_dir / "summary.csv", SUMMARY_FIELDS, summary)
    return summary


def ablation_settings(axis: str, task: TaskKind, cross_task: bool = False) -> list[tuple[str, dict]]:
    """(label, RunConfig overrides) for each setting along ``axis``."""
    if axis == "alpha":
        return [("alpha_0", {"alpha_mode": AlphaMode.FIXED_0}),
                ("alpha_1", {"alpha_mode": AlphaMode.FIXED_1}),
                ("alpha_learned", {"alpha_mode": AlphaMode.LEARNED})]
    if axis == "image_input":
        return [(mode.value, {"image_input": mode}) for mode in
                (ImageInputMode.ONLY_IMAGE, ImageInputMode.ONLY_PATCHES, ImageInputMode.BOTH)]
    if axis == "prompt_scheme":
        schemes = list(PromptScheme) if cross_task else list(VALID_SCHEMES[task])
        extra = {"strict_scheme": False} if cross_task else {}
        return [(s.value, {"scheme": s, **extra}) for s in schemes]
    raise ConfigError(f"unknown ablation axis {axis!r} (choose from {', '.join(AXES)})")


def run_ablation(cfg: RunConfig, axis: str, out_dir: str | Path | None = None,
                 cross_task: bool = False, parallel: int = 0) -> list[dict]:
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    out_dir = Path(out_dir or cfg.output_dir) / f"ablation_{axis}"
    out_dir.mkdir(parents=True, exist_ok=True)
    backend = None if parallel > 1 else load_backend(cfg.backend)
    rows = []
    for dataset in cfg.datasets:
        for task in cfg.benchmark_tasks():
            base = cfg.for_task(task)
            labels, srccs, plccs = [], [], []
            for label, overrides in ablation_settings(axis, task, cross_task):
                variant = replace(base, **overrides)
                results = run_task(variant, dataset, out_dir / label, parallel, backend)
                srcc = float(np.mean([r.srcc for r in results]))
                plcc = float(np.mean([r.plcc for r in results]))
                rows.append({"dataset": dataset.name, "task": task.value, "axis": axis,
                             "setting": label, "srcc_mean": srcc, "plcc_mean": plcc,
                             "repetitions": len(results), "config_hash": variant.hash()})
                labels.append(label)
                srccs.append(srcc)
                plccs.append(plcc)
            plotting.ablation_bars(labels, srccs, plccs,
                                   out_dir / f"ablation_{axis}_{dataset.name}_{task.value}.png",
                                   title=f"{dataset.name} {task.value}: {axis}")
    write_csv(out_dir / f"ablation_{axis}.csv", ABLATION_FIELDS, rows)
    return rows

