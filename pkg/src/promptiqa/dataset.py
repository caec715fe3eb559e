"""AGIQA-style manifests, MOS normalization and train/test splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from promptiqa.backend import ImageInput, crop_patches, load_image, to_uint8_tensor
from promptiqa.errors import ConfigError, InputError
from promptiqa.prompting import TaskKind

log = logging.getLogger(__name__)

MOS_COLUMNS = {TaskKind.PERCEPTION: "mos_quality", TaskKind.ALIGNMENT: "mos_align"}


@dataclass(frozen=True)
class Sample:
    image_path: Path
    initial_prompt: str
    mos_perception: float | None = None
    mos_alignment: float | None = None
    generator_id: str | None = None
    raw_mos: dict = field(default_factory=dict, compare=False)
    key: str = ""

    @property
    def name(self) -> str:
        """The manifest's ``name`` entry (file name when built by hand)."""
        return self.key or self.image_path.name

    def mos(self, task: TaskKind) -> float:
        value = self.mos_perception if TaskKind(task) is TaskKind.PERCEPTION else self.mos_alignment
        if value is None:
            raise InputError(f"{self.name} has no {TaskKind(task).value} MOS")
        return value


def _parse_mos(value: str | None, row: int, column: str) -> float | None:
    if value is None or value.strip() == "":
        return None
    try:
        out = float(value)
    except ValueError:
        raise InputError(f"row {row}: non-numeric {column} {value!r}") from None
    if not math.isfinite(out):
        raise InputError(f"row {row}: non-finite {column}")
    return out


def _decodes(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (FileNotFoundError, UnidentifiedImageError, OSError):
        return False


def load_dataset(manifest: str | Path, image_dir: str | Path | None = None,
                 verify_images: bool = True) -> list[Sample]:
    """Read a CSV manifest with columns name, prompt, mos_quality[, mos_align].

    Image paths resolve against ``image_dir`` (default: the manifest's
    directory). Rows whose image is missing or undecodable are skipped and
    counted in a warning.
    """
    manifest = Path(manifest)
    root = Path(image_dir) if image_dir is not None else manifest.parent
    try:
        handle = manifest.open(newline="", encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"manifest not found: {manifest}") from None
    samples: list[Sample] = []
    skipped = 0
    with handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = {"name", "prompt", "mos_quality"} - set(header)
        if missing:
            raise InputError(f"{manifest}: missing columns {sorted(missing)}")
        try:
            for lineno, row in enumerate(reader, start=2):
                if None in row:
                    raise InputError(f"{manifest}:{lineno}: too many fields")
                prompt = (row.get("prompt") or "").strip()
                if not prompt:
                    raise InputError(f"{manifest}:{lineno}: empty prompt")
                mos_q = _parse_mos(row.get("mos_quality"), lineno, "mos_quality")
                mos_a = _parse_mos(row.get("mos_align"), lineno, "mos_align")
                if mos_q is None and mos_a is None:
                    raise InputError(f"{manifest}:{lineno}: no MOS value")
                path = root / row["name"]
                if verify_images and not _decodes(path):
                    skipped += 1
                    continue
                raw = {k: v for k, v in ((TaskKind.PERCEPTION, mos_q), (TaskKind.ALIGNMENT, mos_a))
                       if v is not None}
                samples.append(Sample(path, prompt, mos_q, mos_a,
                                      row.get("generator") or row.get("model") or None, raw,
                                      row["name"]))
        except csv.Error as exc:
            raise InputError(f"{manifest}: malformed CSV: {exc}") from None
    if skipped:
        log.warning("%s: skipped %d rows with missing or undecodable images", manifest, skipped)
    if not samples:
        log.warning("%s: no samples loaded", manifest)
    return samples


def mos_range(samples: Sequence[Sample], task: TaskKind) -> tuple[float, float]:
    values = [s.raw_mos[task] for s in samples if task in s.raw_mos]
    if len(set(values)) < 2:
        raise InputError(f"{TaskKind(task).value} MOS needs at least two distinct values")
    return min(values), max(values)


def normalize_mos(samples: Sequence[Sample], upper: float = 5.0) -> list[Sample]:
    """Min-max map every MOS column present onto [0, upper].

    The raw values stay in ``Sample.raw_mos``; normalization always starts
    from them, so applying it twice is harmless.
    """
    ranges = {}
    for task in TaskKind:
        if any(task in s.raw_mos for s in samples):
            ranges[task] = mos_range(samples, task)

    def scaled(s: Sample, task: TaskKind) -> float | None:
        if task not in s.raw_mos:
            return None
        lo, hi = ranges[task]
        return (s.raw_mos[task] - lo) / (hi - lo) * upper

    return [
        replace(s, mos_perception=scaled(s, TaskKind.PERCEPTION),
                mos_alignment=scaled(s, TaskKind.ALIGNMENT))
        for s in samples
    ]


@dataclass(frozen=True)
class SplitSpec:
    ratio: float = 0.8
    seed: int = 0
    repetition_index: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"split ratio must be in (0, 1), got {self.ratio}")
        if self.repetition_index < 0:
            raise ConfigError("repetition_index must be >= 0")


def split(samples: Sequence[Sample], spec: SplitSpec) -> tuple[list[Sample], list[Sample]]:
    """Deterministic image-level split keyed by (seed, repetition_index)."""
    m = len(samples)
    rng = np.random.default_rng([spec.seed, spec.repetition_index])
    order = rng.permutation(m)
    n_train = int(math.floor(spec.ratio * m + 0.5))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    leaked = prompt_leakage(train, test)
    if leaked:
        log.warning("%d prompts have images on both sides of the split", leaked)
    return train, test


def prompt_leakage(train: Sequence[Sample], test: Sequence[Sample]) -> int:
    return len({s.initial_prompt for s in train} & {s.initial_prompt for s in test})


def write_split_manifest(path: str | Path, train: Sequence[Sample], test: Sequence[Sample],
                         repetition_index: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "partition", "repetition_index"])
        for part, rows in (("train", train), ("test", test)):
            for s in rows:
                writer.writerow([s.name, part, repetition_index])
    return path


def read_split_manifest(path: str | Path) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {"train": set(), "test": set()}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["partition"], set()).add(row["name"])
    return out


def apply_split_manifest(samples: Sequence[Sample], path: str | Path):
    parts = read_split_manifest(path)
    return ([s for s in samples if s.name in parts["train"]],
            [s for s in samples if s.name in parts["test"]])


class ImageCache:
    """Encoder-ready tensors for the resized image and its patches, keyed by path.

    ``preprocess`` is the backend's parameter-free input transform; without
    it the cache holds uint8 rasters.
    """

    def __init__(self, size: int = 224, patches_n: int = 5, enabled: bool = True,
                 preprocess=None):
        self.size = size
        self.patches_n = patches_n
        self.enabled = enabled
        self.preprocess = preprocess
        self._store: dict[tuple[Path, int], tuple[torch.Tensor, torch.Tensor]] = {}

    def get(self, sample: Sample) -> tuple[torch.Tensor, torch.Tensor]:
        key = (sample.image_path, self.patches_n)
        hit = self._store.get(key)
        if hit is not None:
            return hit
        img = load_image(sample.image_path)
        whole, patches = tensors_for(img, self.size, self.patches_n)
        if self.preprocess is not None:
            whole, patches = self.preprocess(whole[None])[0], self.preprocess(patches)
        out = whole, patches
        if self.enabled:
            self._store[key] = out
        return out


def tensors_for(img: ImageInput, size: int, patches_n: int) -> tuple[torch.Tensor, torch.Tensor]:
    whole = to_uint8_tensor(img, size)
    patches = torch.stack([to_uint8_tensor(p, size) for p in crop_patches(img, patches_n, size)])
    return whole, patches


class SampleDataset(torch.utils.data.Dataset):
    def __init__(self, samples: Sequence[Sample], task: TaskKind, cache: ImageCache):
        self.samples = list(samples)
        self.task = TaskKind(task)
        self.cache = cache

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int):
        s = self.samples[i]
        whole, patches = self.cache.get(s)
        return whole, patches, s.initial_prompt, torch.tensor(s.mos(self.task), dtype=torch.float64), s.name


def collate(batch):
    whole, patches, prompts, mos, names = zip(*batch)
    return torch.stack(whole), torch.stack(patches), list(prompts), torch.stack(mos), list(names)
