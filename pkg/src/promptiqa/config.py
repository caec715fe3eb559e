"""Run configuration files (TOML or JSON).

Example (TOML)::

    task = "perception"          # or "alignment"
    scheme = "adjective"         # antonym | adjective (perception), adverb (alignment)
    alpha_mode = "learned"       # fixed_0 | fixed_1 | learned
    patches_n = 5
    image_input = "both"         # both | only_image | only_patches
    temperature = 0.01           # optional; default is the backbone logit scale
    repetitions = 10
    split_ratio = 0.8
    output_dir = "runs/agiqa3k"
    save_checkpoints = false     # one checkpoint directory per repetition
    tasks = ["perception", "alignment"]   # benchmark only; defaults to [task]

    [schemes]                    # benchmark only: scheme per task
    alignment = "adverb"

    [backend]
    kind = "clip"                # clip | stub
    model_name = "openai/clip-vit-base-patch32"
    allow_download = false

    [train]
    learning_rate = 5e-6
    epochs = 20

    [[datasets]]
    name = "AGIQA-3K"
    manifest = "data/agiqa3k/data.csv"
    image_dir = "data/agiqa3k/images"

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from promptiqa.backend import BackendConfig, load_backend
from promptiqa.errors import ConfigError, InputError
from promptiqa.model import ImageInputMode, QualityModel
from promptiqa.prompting import DEFAULT_SCHEME, PromptScheme, TaskKind, check_scheme
from promptiqa.regression import AlphaMode
from promptiqa.training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DatasetConfig:
    name: str
    manifest: str
    image_dir: str | None = None
    cache_images: bool = True


@dataclass
class RunConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    task: TaskKind = TaskKind.PERCEPTION
    scheme: PromptScheme | None = None
    alpha_mode: AlphaMode = AlphaMode.LEARNED
    patches_n: int = 5
    image_input: ImageInputMode = ImageInputMode.BOTH
    temperature: float | None = None
    use_words: bool = True
    levels: list[str] | None = None
    strict_scheme: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    datasets: list[DatasetConfig] = field(default_factory=list)
    tasks: list[TaskKind] | None = None
    schemes: dict[TaskKind, PromptScheme] = field(default_factory=dict)
    repetitions: int = 10
    split_ratio: float = 0.8
    logistic_plcc: bool = False
    save_checkpoints: bool = False
    output_dir: str = "runs"

    def __post_init__(self):
        self.task = TaskKind(self.task)
        self.alpha_mode = AlphaMode(self.alpha_mode)
        self.image_input = ImageInputMode(self.image_input)
        self.schemes = {TaskKind(k): PromptScheme(v) for k, v in self.schemes.items()}
        if self.scheme is None:
            self.scheme = self.schemes.get(self.task, DEFAULT_SCHEME[self.task])
        self.scheme = PromptScheme(self.scheme)
        if self.tasks is not None:
            self.tasks = [TaskKind(t) for t in self.tasks]
        for task in self.benchmark_tasks():
            check_scheme(task, self.scheme_for(task), self.strict_scheme)
        if self.patches_n < 1:
            raise ConfigError("patches_n must be >= 1")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must be in (0, 1)")

    def benchmark_tasks(self) -> list[TaskKind]:
        return list(self.tasks) if self.tasks else [self.task]

    def scheme_for(self, task: TaskKind) -> PromptScheme:
        if task is self.task:
            return self.scheme
        return self.schemes.get(task, DEFAULT_SCHEME[task])

    def for_task(self, task: TaskKind) -> "RunConfig":
        task = TaskKind(task)
        return replace(self, task=task, scheme=self.scheme_for(task), tasks=None)

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "backend" in data:
                data["backend"] = BackendConfig(**data["backend"])
            if "train" in data:
                data["train"] = TrainConfig(**data["train"])
            if "datasets" in data:
                data["datasets"] = [DatasetConfig(**d) for d in data["datasets"]]
        except TypeError as exc:
            raise ConfigError(f"bad config section: {exc}") from None
        if base is not None:
            for d in data.get("datasets", []):
                d.manifest = str((base / d.manifest).resolve())
                if d.image_dir is not None:
                    d.image_dir = str((base / d.image_dir).resolve())
            if "output_dir" in data:
                data["output_dir"] = str((base / data["output_dir"]).resolve())
        try:
            return cls(**data)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["task"] = self.task.value
        out["scheme"] = self.scheme.value
        out["alpha_mode"] = self.alpha_mode.value
        out["image_input"] = self.image_input.value
        out["tasks"] = None if self.tasks is None else [t.value for t in self.tasks]
        out["schemes"] = {k.value: v.value for k, v in self.schemes.items()}
        return out

    def hash(self) -> str:
        """Digest of every setting that can change results (not output paths)."""
        data = self.to_dict()
        for key in ("output_dir", "save_checkpoints"):
            data.pop(key)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise InputError(f"config not found: {path}") from None
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return RunConfig.from_dict(data, base=path.parent.resolve())


def build_model(cfg: RunConfig, backend=None) -> QualityModel:
    backend = backend if backend is not None else load_backend(cfg.backend)
    return QualityModel(
        backend, cfg.task, cfg.scheme, cfg.alpha_mode, cfg.patches_n, cfg.image_input,
        cfg.temperature, cfg.backend.word_mode, cfg.use_words, cfg.levels, cfg.strict_scheme,
    )
