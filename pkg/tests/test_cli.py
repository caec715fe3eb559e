import csv
import json
import shutil

import pytest
from PIL import Image

from promptiqa.cli import main


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "img.png"
    Image.new("RGB", (320, 256), (200, 40, 90)).save(path)
    return path


def _score(capsys, *args):
    code = main(["score", *map(str, args), "--zero-shot", "--backend", "stub", "--quiet"])
    assert code == 0
    return json.loads(capsys.readouterr().out)


class TestScore:
    def test_json_payload(self, capsys, image, tmp_path):
        out = tmp_path / "o" / "score.json"
        payload = _score(capsys, image, "black mickey mouse skull", "--task", "alignment",
                         "--output", out)
        for key in ("p_image", "p_patch", "w_image", "w_patch", "q_cg_image", "q_cg_patch",
                    "q_fg", "q_final", "alpha", "config_hash", "sentences", "temperature"):
            assert key in payload
        assert payload["sentences"][-1] == "A photo that perfectly matches black mickey mouse skull."
        assert len(payload["p_image"]) == 5
        assert json.loads(out.read_text()) == payload

    def test_readable_summary_on_stderr(self, capsys, image):
        assert main(["score", str(image), "a cat", "--zero-shot", "--backend", "stub"]) == 0
        err = capsys.readouterr().err
        assert "Q =" in err and "zero-shot" in err

    def test_patch_count_irrelevant_with_alpha_one(self, capsys, image):
        q = [_score(capsys, image, "a cat", "--alpha-mode", "fixed_1", "--patches-n", n)
             for n in (1, 5)]
        assert q[0]["p_image"] == q[1]["p_image"]
        assert q[0]["q_cg_image"] == q[1]["q_cg_image"]

    def test_missing_image_exit_code(self, capsys, tmp_path):
        code = main(["score", str(tmp_path / "nope.png"), "a cat", "--zero-shot", "--backend", "stub"])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_needs_checkpoint_or_zero_shot(self, capsys, image):
        assert main(["score", str(image), "a cat", "--backend", "stub"]) == 2

    def test_scheme_mismatch_exit_code(self, capsys, image):
        code = main(["score", str(image), "a cat", "--zero-shot", "--backend", "stub",
                     "--task", "alignment", "--scheme", "antonym"])
        assert code == 2

    def test_missing_clip_weights_exit_code(self, capsys, image, tmp_path):
        code = main(["score", str(image), "a cat", "--zero-shot",
                     "--model-name", str(tmp_path / "absent")])
        assert code == 1
        assert "allow-download" in capsys.readouterr().err


@pytest.fixture
def corpus_copy(small_corpus, tmp_path):
    target = tmp_path / "corpus"
    shutil.copytree(small_corpus.parent, target)
    return target / "config.json"


class TestBenchmark:
    def test_outputs_and_determinism(self, capsys, corpus_copy, tmp_path):
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["benchmark", "--config", str(corpus_copy), "--output-dir", str(out)]) == 0
            runs.append(out)
        summary = _rows(runs[0] / "summary.csv")
        assert [(r["dataset"], r["task"]) for r in summary] == [("toy", "perception"), ("toy", "alignment")]
        assert (runs[0] / "summary.csv").read_bytes() == (runs[1] / "summary.csv").read_bytes()
        assert len(_rows(runs[0] / "repetitions.csv")) == 4
        assert (runs[0] / "plots" / "scatter_toy_perception.png").stat().st_size > 0
        assert (runs[0] / "plots" / "curves_toy_alignment.png").exists()
        assert (runs[0] / "splits" / "toy_alignment_rep01.csv").exists()
        pred = json.loads((runs[0] / "predictions" / "toy_perception_rep00.json").read_text())
        assert len(pred["samples"]) == 2 and pred["config_hash"] == summary[0]["config_hash"]

    def test_parallel_matches_sequential(self, capsys, corpus_copy, tmp_path):
        for name, extra in (("seq", []), ("par", ["--parallel", "2"])):
            assert main(["benchmark", "--config", str(corpus_copy), "--task", "perception",
                         "--output-dir", str(tmp_path / name), *extra]) == 0
        seq, par = (_rows(tmp_path / n / "repetitions.csv") for n in ("seq", "par"))
        assert [r["srcc"] for r in seq] == [r["srcc"] for r in par]
        assert (tmp_path / "par" / "rep01" / "splits").is_dir()

    def test_train_then_evaluate(self, capsys, corpus_copy, tmp_path):
        out = tmp_path / "t"
        assert main(["train", "--config", str(corpus_copy), "--task", "alignment",
                     "--output-dir", str(out)]) == 0
        trained = json.loads(capsys.readouterr().out)
        assert main(["evaluate", "--checkpoint", trained["checkpoint"]]) == 0
        evaluated = json.loads(capsys.readouterr().out)
        assert evaluated["srcc"] == pytest.approx(trained["srcc"], abs=1e-12)
        image = corpus_copy.parent / "images" / "img_000.png"
        assert main(["score", str(image), "a cat", "--checkpoint", trained["checkpoint"], "--quiet"]) == 0
        assert json.loads(capsys.readouterr().out)["task"] == "alignment"

    def test_no_datasets(self, capsys):
        assert main(["benchmark", "--backend", "stub"]) == 2


class TestAblate:
    def _run(self, corpus_copy, tmp_path, axis, task, *extra):
        out = tmp_path / "abl"
        assert main(["ablate", "--config", str(corpus_copy), "--axis", axis, "--task", task,
                     "--repetitions", "1", "--output-dir", str(out), *extra]) == 0
        return _rows(out / f"ablation_{axis}" / f"ablation_{axis}.csv"), out / f"ablation_{axis}"

    def test_alpha_axis(self, capsys, corpus_copy, tmp_path):
        rows, out = self._run(corpus_copy, tmp_path, "alpha", "perception")
        assert [r["setting"] for r in rows] == ["alpha_0", "alpha_1", "alpha_learned"]
        assert (out / "ablation_alpha_toy_perception.png").exists()

    def test_image_input_axis(self, capsys, corpus_copy, tmp_path):
        rows, _ = self._run(corpus_copy, tmp_path, "image_input", "alignment")
        assert {r["setting"] for r in rows} == {"only_image", "only_patches", "both"}

    def test_prompt_scheme_axis(self, capsys, corpus_copy, tmp_path):
        rows, _ = self._run(corpus_copy, tmp_path, "prompt_scheme", "perception")
        assert [r["setting"] for r in rows] == ["antonym", "adjective"]

    def test_cross_task_schemes(self, capsys, corpus_copy, tmp_path):
        rows, _ = self._run(corpus_copy, tmp_path, "prompt_scheme", "alignment", "--cross-task-schemes")
        assert [r["setting"] for r in rows] == ["antonym", "adjective", "adverb"]


def test_make_toy(capsys, tmp_path):
    assert main(["make-toy", str(tmp_path / "toy"), "-n", "6", "--epochs", "1"]) == 0
    cfg = json.loads((tmp_path / "toy" / "config.json").read_text())
    assert cfg["tasks"] == ["perception", "alignment"] and cfg["repetitions"] == 10
    rows = _rows(tmp_path / "toy" / "data.csv")
    assert len(rows) == 6 and {"mos_quality", "mos_align"} <= set(rows[0])
    assert not (tmp_path / "toy" / "candidates").exists()
