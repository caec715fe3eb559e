import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from promptiqa.backend import BackendConfig, ImageInput, StubBackend, load_backend
from promptiqa.config import RunConfig, build_model
from promptiqa.synthetic import make_corpus


@pytest.fixture(scope="session")
def stub():
    return StubBackend(seed=0)


@pytest.fixture
def rgb_image():
    rng = np.random.default_rng(7)
    arr = (rng.random((300, 260, 3)) * 255).astype(np.uint8)
    return ImageInput(Image.fromarray(arr), "noise")


def toy_config(n_reps=2, epochs=2, **extra) -> dict:
    cfg = {
        "tasks": ["perception", "alignment"],
        "repetitions": n_reps,
        "output_dir": "runs",
        "backend": {"kind": "stub", "seed": 0},
        "train": {"epochs": epochs, "seed": 0},
        "datasets": [{"name": "toy", "manifest": "data.csv"}],
    }
    cfg.update(extra)
    return cfg


def write_corpus(directory: Path, n: int, seed: int = 0, **cfg_extra) -> Path:
    cfg_dict = toy_config(**cfg_extra)
    cfg = RunConfig.from_dict(cfg_dict)
    backend = load_backend(BackendConfig(**cfg_dict["backend"]))
    models = {"mos_quality": build_model(cfg.for_task("perception"), backend),
              "mos_align": build_model(cfg.for_task("alignment"), backend)}
    make_corpus(directory, models, n=n, seed=seed, oversample=3)
    path = directory / "config.json"
    path.write_text(json.dumps(cfg_dict, indent=2))
    return path


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Twelve-image stub corpus with a short two-repetition config."""
    return write_corpus(tmp_path_factory.mktemp("corpus"), n=12)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(name: str, ok: bool, detail: str) -> None:
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"

    def skip(name: str, reason: str) -> None:
        lines.append(f"SKIP  {name}: {reason}")
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
