"""MAE fine-tuning of the dual encoder and alpha, plus test-set evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from promptiqa.dataset import ImageCache, Sample, SampleDataset, collate
from promptiqa.errors import ConfigError, InputError, NumericError, UndefinedCorrelationError
from promptiqa.metrics import EvalResult, evaluate_predictions
from promptiqa.model import QualityModel
from promptiqa.prompting import TaskKind
from promptiqa.regression import mae_loss

log = logging.getLogger(__name__)

METRICS_FIELDS = ("epoch", "lr", "train_mae", "val_srcc", "val_plcc")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-6
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 16
    scheduler_period: int = 5
    seed: int = 0
    selection: str = "best"
    freeze_image: bool = False
    freeze_text: bool = False
    num_workers: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.scheduler_period < 1:
            raise ConfigError("epochs, batch_size and scheduler_period must be positive")
        if self.selection not in ("best", "last"):
            raise ConfigError(f"selection must be 'best' or 'last', got {self.selection!r}")


def scheduled_lr(base_lr: float, epoch: int, period: int) -> float:
    """Cosine annealing that restarts every ``period`` epochs."""
    return base_lr * (1 + math.cos(math.pi * (epoch % period) / period)) / 2


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


@dataclass
class Checkpoint:
    state_dict: dict
    alpha: float
    config: dict
    epoch: int
    best_val_srcc: float
    split_manifest: str | None = None
    history: list[dict] = field(default_factory=list)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": self.config,
            "alpha": self.alpha,
            "epoch": self.epoch,
            "best_val_srcc": self.best_val_srcc,
            "split_manifest": self.split_manifest,
        }
        (directory / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        torch.save(self.state_dict, directory / "weights.pt")
        write_metrics(directory / "metrics.csv", self.history)
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "config.json").read_text())
            state = torch.load(directory / "weights.pt", map_location="cpu", weights_only=True)
        except FileNotFoundError as exc:
            raise InputError(f"incomplete checkpoint {directory}: {exc.filename}") from None
        history = []
        metrics = directory / "metrics.csv"
        if metrics.exists():
            with metrics.open(newline="") as fh:
                history = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
        return cls(state, meta["alpha"], meta["config"], meta["epoch"], meta["best_val_srcc"],
                   meta.get("split_manifest"), history)


def write_metrics(path: Path, history: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(float(row[k])) if k != "epoch" else int(row[k])
                             for k in METRICS_FIELDS})


def _safe_metrics(model: QualityModel, samples: Sequence[Sample], cache: ImageCache,
                  batch_size: int) -> tuple[float, float]:
    if len(samples) < 2:
        return math.nan, math.nan
    pred = model.predict(samples, cache, batch_size)
    target = [s.mos(model.task) for s in samples]
    try:
        result = evaluate_predictions(pred, target, model.task)
    except UndefinedCorrelationError:
        return math.nan, math.nan
    return result.srcc, result.plcc


def _dump_batch(path: Path | None, names, q, mos) -> str:
    payload = {"names": list(names), "q": [float(x) for x in q.detach().cpu().double()],
               "mos": [float(x) for x in mos.detach().cpu().double()]}
    if path is None:
        return json.dumps(payload)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))
    return str(path)


def make_optimizer(model: QualityModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    frozen = set()
    if cfg.freeze_image:
        frozen.update(id(p) for p in model.backend.image_tower())
    if cfg.freeze_text:
        frozen.update(id(p) for p in model.backend.text_tower())
    params = []
    for p in model.parameters():
        if id(p) in frozen:
            p.requires_grad_(False)
        elif p.requires_grad:
            params.append(p)
    return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def train(cfg: TrainConfig, model: QualityModel, train_set: Sequence[Sample],
          val_set: Sequence[Sample], cache: ImageCache | None = None,
          run_config: dict | None = None, split_manifest: str | None = None,
          dump_dir: Path | None = None) -> Checkpoint:
    """Fine-tune ``model`` in place and return the selected checkpoint.

    Selection ``best`` keeps the epoch with the highest validation SRCC (the
    validation set is the current test split); ``last`` keeps the final epoch.
    """
    if not train_set:
        raise InputError("empty training set")
    for s in train_set:
        s.mos(model.task)
    cache = cache or model.make_cache()
    seed_everything(cfg.seed, cfg.deterministic)
    generator = torch.Generator().manual_seed(cfg.seed)
    loader = torch.utils.data.DataLoader(
        SampleDataset(train_set, model.task, cache), batch_size=cfg.batch_size, shuffle=True,
        generator=generator, collate_fn=collate, num_workers=cfg.num_workers,
    )
    optimizer = make_optimizer(model, cfg)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(optimizer, T_0=cfg.scheduler_period)

    history: list[dict] = []
    best_srcc, best_epoch, best_state = -math.inf, -1, None
    with model.backend.owned():
        for epoch in range(cfg.epochs):
            lr = optimizer.param_groups[0]["lr"]
            model.train()
            abs_sum, count = 0.0, 0
            for whole, patches, prompts, mos, names in loader:
                out = model(whole, patches, prompts)
                target = mos.to(out.q.dtype).to(out.q.device)
                if not bool(torch.isfinite(out.q).all()):
                    where = _dump_batch(dump_dir and dump_dir / f"nonfinite_epoch{epoch}.json",
                                        names, out.q, target)
                    raise NumericError(f"non-finite prediction at epoch {epoch}; batch dump: {where}")
                loss = mae_loss(out.q, target)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                abs_sum += float(loss.detach()) * len(names)
                count += len(names)
            scheduler.step()
            val_srcc, val_plcc = _safe_metrics(model, val_set, cache, cfg.batch_size)
            row = {"epoch": epoch, "lr": lr, "train_mae": abs_sum / count,
                   "val_srcc": val_srcc, "val_plcc": val_plcc}
            history.append(row)
            log.info("epoch %d lr %.3g train_mae %.4f val_srcc %.4f val_plcc %.4f",
                     epoch, lr, row["train_mae"], val_srcc, val_plcc)
            if cfg.selection == "best" and not math.isnan(val_srcc) and val_srcc > best_srcc:
                best_srcc, best_epoch = val_srcc, epoch
                best_state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}

    if best_state is None:
        best_epoch = cfg.epochs - 1
        best_srcc = history[-1]["val_srcc"]
        best_state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    else:
        model.load_state_dict(best_state)
    return Checkpoint(best_state, float(model.alpha().detach()), copy.deepcopy(run_config or {}),
                      best_epoch, best_srcc, split_manifest, history)


def evaluate(checkpoint: Checkpoint | QualityModel, test_set: Sequence[Sample], task: TaskKind | str,
             cache: ImageCache | None = None, batch_size: int = 16,
             logistic: bool = False) -> EvalResult:
    """Score every test sample without gradient updates."""
    task = TaskKind(task)
    if isinstance(checkpoint, QualityModel):
        model = checkpoint
    else:
        from promptiqa.config import RunConfig, build_model

        run = RunConfig.from_dict(checkpoint.config)
        if run.task is not task:
            raise ConfigError(f"checkpoint was trained for {run.task.value}, not {task.value}")
        model = build_model(run)
        model.load_state_dict(checkpoint.state_dict)
    if model.task is not task:
        raise ConfigError(f"model scores {model.task.value}, not {task.value}")
    cache = cache or model.make_cache()
    pred = model.predict(test_set, cache, batch_size)
    return evaluate_predictions(pred, [s.mos(task) for s in test_set], task,
                                [s.name for s in test_set], logistic)

