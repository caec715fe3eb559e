"""Toy AGIQA-style corpus whose MOS ranking is recoverable by construction.

Images are seeded random textures; each MOS column is an increasing affine
map of the zero-shot score that the configured (stub) model assigns, so a
pipeline that preserves the initial ranking reaches SRCC = 1.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from promptiqa.dataset import Sample

_SUBJECTS = ["mickey mouse", "red fox", "old lighthouse", "robot", "castle", "sailboat",
             "owl", "teapot", "dragon", "city street"]
_STYLES = ["black", "watercolor", "neon", "tiny", "ancient", "golden", "foggy", "smiling"]
_EXTRAS = ["skull", "at night", "in the snow", "on a hill", "made of glass", "", "", ""]


def _texture(rng: np.random.Generator, width: int, height: int) -> Image.Image:
    coarse = rng.random((4, 4, 3))
    base = Image.fromarray((coarse * 255).astype(np.uint8)).resize((width, height), Image.BICUBIC)
    arr = np.asarray(base, dtype=np.float64)
    noise = rng.normal(0.0, rng.uniform(0, 60), size=arr.shape)
    gain = rng.uniform(0.4, 1.2)
    arr = np.clip(arr * gain + noise, 0, 255)
    return Image.fromarray(arr.astype(np.uint8))


def _prompt(rng: np.random.Generator) -> str:
    words = [rng.choice(_STYLES), rng.choice(_SUBJECTS), rng.choice(_EXTRAS)]
    return " ".join(w for w in words if w)


def make_images(directory: str | Path, n: int = 50, seed: int = 0) -> list[Sample]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        width, height = int(rng.integers(224, 480)), int(rng.integers(224, 480))
        path = directory / f"img_{i:03d}.png"
        _texture(rng, width, height).save(path)
        samples.append(Sample(path, _prompt(rng)))
    return samples


def _spread_subset(scores: np.ndarray, n: int) -> np.ndarray:
    """Greedy max-min pick of ``n`` rows so no score column has near-ties.

    ``scores`` is (candidates, columns). Each column is scaled to [0, 1] and a
    candidate's distance to the chosen set is its smallest gap in any column.
    """
    scores = np.atleast_2d(scores.T).T
    span = scores.max(axis=0) - scores.min(axis=0)
    z = (scores - scores.min(axis=0)) / np.where(span > 0, span, 1.0)
    chosen = [int(np.argmin(z[:, 0])), int(np.argmax(z[:, 0]))]
    gap = np.min(np.abs(z[:, None, :] - z[chosen][None]), axis=(1, 2))
    while len(chosen) < n:
        pick = int(np.argmax(gap))
        chosen.append(pick)
        gap = np.minimum(gap, np.min(np.abs(z - z[pick]), axis=1))
    return np.sort(np.array(chosen))


def make_corpus(directory: str | Path, models: dict, n: int = 50, seed: int = 0,
                oversample: int = 6) -> Path:
    """Write ``n`` images plus ``data.csv``; return the manifest path.

    ``models`` maps a manifest column (``mos_quality`` / ``mos_align``) to the
    untrained :class:`QualityModel` whose zero-shot scores define that MOS.
    ``oversample * n`` candidates are rendered and the ``n`` kept are the ones
    whose scores are spread out in every column, so near-ties do not make
    the ranking fragile.
    """
    directory = Path(directory)
    candidates = make_images(directory / "candidates", n * oversample, seed)
    scores = {}
    for column, model in models.items():
        with torch.no_grad():
            scores[column] = model.predict(candidates, model.make_cache())
    keep = _spread_subset(np.stack(list(scores.values()), axis=1), n)

    images = directory / "images"
    images.mkdir(parents=True, exist_ok=True)
    rows = []
    for new_index, i in enumerate(keep):
        name = f"img_{new_index:03d}.png"
        candidates[i].image_path.replace(images / name)
        rows.append((f"images/{name}", candidates[i].initial_prompt))
    for leftover in (directory / "candidates").iterdir():
        leftover.unlink()
    (directory / "candidates").rmdir()

    columns = {}
    for column, q in scores.items():
        q = q[keep]
        columns[column] = 1.0 + 4.0 * (q - q.min()) / (q.max() - q.min())
    manifest = directory / "data.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "prompt", *columns])
        for k, (name, prompt) in enumerate(rows):
            writer.writerow([name, prompt, *(repr(float(v[k])) for v in columns.values())])
    return manifest
