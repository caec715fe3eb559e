import math
from dataclasses import replace

import numpy as np
import pytest
import torch

import oracles
from promptiqa.backend import StubBackend
from promptiqa.benchmark import task_samples
from promptiqa.config import load_config
from promptiqa.dataset import SplitSpec, split
from promptiqa.errors import BackendError, ConfigError, InputError
from promptiqa.model import ImageInputMode, QualityModel
from promptiqa.prompting import TaskKind
from promptiqa.regression import mae_loss
from promptiqa.training import (
    Checkpoint,
    TrainConfig,
    evaluate,
    scheduled_lr,
    train,
)


@pytest.fixture(scope="module")
def corpus(small_corpus):
    cfg = load_config(small_corpus)
    return cfg, {t: task_samples(cfg.datasets[0], t, 5) for t in TaskKind}


def _batch(model, samples):
    cache = model.make_cache()
    pairs = [cache.get(s) for s in samples]
    whole = torch.stack([p[0] for p in pairs])
    patches = torch.stack([p[1] for p in pairs])
    return whole, patches, [s.initial_prompt for s in samples]


def _tensors(t):
    return [list(map(float, row)) for row in t.detach().double()]


class TestForwardOracle:
    @pytest.mark.parametrize("task", list(TaskKind))
    def test_matches_loop_oracle(self, corpus, task):
        _, samples = corpus
        batch = (samples[task] * 3)[:32]
        model = QualityModel(StubBackend(seed=1).double(), task)
        whole, patches, prompts = _batch(model, batch)
        with torch.no_grad():
            out = model(whole, patches, prompts)
            backend = model.backend
            img = _tensors(backend.image_features(whole))
            tau = float(model.temperature())
            alpha = float(model.alpha())
            for b, prompt in enumerate(prompts):
                sents = _tensors(backend.text_features(list(model.prompt_set(prompt).sentences)).pooled)
                feats = backend.text_features([prompt])
                words = [row for row, keep in zip(_tensors(feats.tokens[0]), feats.mask[0]) if keep]
                pats = _tensors(backend.image_features(patches[b]))
                pi = oracles.level_probabilities(img[b], sents, tau)
                pp = oracles.level_probabilities(oracles.mean_vector([oracles.unit(p) for p in pats]),
                                                 sents, tau)
                wi = oracles.word_similarity(img[b], words)
                wp = oracles.word_similarity(oracles.mean_vector([oracles.unit(p) for p in pats]), words)
                q = oracles.fused(oracles.coarse_score(pi), oracles.coarse_score(pp),
                                  oracles.fine_score(wi, wp, len(sents)), alpha)
                np.testing.assert_allclose(out.p_image[b].numpy(), pi, atol=1e-6)
                np.testing.assert_allclose(out.p_patch[b].numpy(), pp, atol=1e-6)
                assert float(out.q[b]) == pytest.approx(q, abs=1e-6)

    def test_image_input_modes_copy_the_missing_side(self, corpus):
        _, samples = corpus
        batch = samples[TaskKind.PERCEPTION][:4]
        for mode, alpha in ((ImageInputMode.ONLY_IMAGE, 1.0), (ImageInputMode.ONLY_PATCHES, 0.0)):
            model = QualityModel(StubBackend(), "perception", image_input=mode)
            with torch.no_grad():
                out = model(*_batch(model, batch))
            assert float(out.alpha) == alpha
            assert torch.equal(out.p_image, out.p_patch)
            assert torch.equal(out.w_image, out.w_patch)

    def test_patch_count_irrelevant_when_alpha_is_one(self, corpus):
        _, samples = corpus
        batch = samples[TaskKind.ALIGNMENT][:4]
        q = []
        for n in (1, 5):
            model = QualityModel(StubBackend(), "alignment", alpha_mode="fixed_1", patches_n=n,
                                 use_words=False)
            with torch.no_grad():
                q.append(model(*_batch(model, batch)).q)
        assert torch.equal(q[0], q[1])

    def test_scheme_mismatch(self):
        with pytest.raises(ConfigError):
            QualityModel(StubBackend(), "alignment", "antonym")


class TestScheduleAndConfig:
    def test_closed_form(self):
        assert scheduled_lr(1.0, 0, 5) == 1.0
        assert scheduled_lr(1.0, 5, 5) == 1.0
        assert scheduled_lr(1.0, 2, 5) == pytest.approx((1 + math.cos(math.pi * 0.4)) / 2)

    @pytest.mark.parametrize("kwargs", [{"learning_rate": -1}, {"epochs": 0}, {"selection": "mid"}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestTrain:
    def test_lr_trace_follows_schedule(self, corpus):
        _, samples = corpus
        s = samples[TaskKind.PERCEPTION]
        cfg = TrainConfig(learning_rate=1e-4, epochs=7, batch_size=8)
        ckpt = train(cfg, QualityModel(StubBackend(), "perception"), s[:8], s[8:])
        for row in ckpt.history:
            assert row["lr"] == pytest.approx(scheduled_lr(1e-4, row["epoch"], 5), rel=1e-12)

    def test_zero_lr_leaves_weights_bit_equal(self, corpus):
        _, samples = corpus
        s = samples[TaskKind.ALIGNMENT]
        model = QualityModel(StubBackend(), "alignment")
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train(TrainConfig(learning_rate=0.0, epochs=2, batch_size=4), model, s[:8], s[8:])
        after = model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_first_epoch_loss_is_reproducible(self, corpus):
        _, samples = corpus
        s = samples[TaskKind.PERCEPTION]
        cfg = TrainConfig(learning_rate=1e-4, epochs=1, batch_size=4, seed=5)
        runs = [train(cfg, QualityModel(StubBackend(), "perception"), s[:8], s[8:]).history[0]
                for _ in range(2)]
        assert runs[0]["train_mae"] == runs[1]["train_mae"]

    def test_overfits_a_few_samples(self, corpus):
        _, samples = corpus
        s = samples[TaskKind.PERCEPTION][:8]
        cfg = TrainConfig(learning_rate=1e-3, weight_decay=0.0, epochs=200, batch_size=8,
                          scheduler_period=1000, selection="last")
        ckpt = train(cfg, QualityModel(StubBackend(), "perception"), s, s[:2])
        assert ckpt.history[-1]["train_mae"] < 0.1

    def test_best_selection_restores_weights(self, corpus):
        _, samples = corpus
        s = samples[TaskKind.PERCEPTION]
        model = QualityModel(StubBackend(), "perception")
        cfg = TrainConfig(learning_rate=1e-3, epochs=4, batch_size=4)
        ckpt = train(cfg, model, s[:9], s[9:])
        best = max(range(4), key=lambda e: (ckpt.history[e]["val_srcc"], -e))
        assert ckpt.epoch == best
        assert all(torch.equal(ckpt.state_dict[k], v) for k, v in model.state_dict().items())

    def test_frozen_towers_do_not_move(self, corpus):
        _, samples = corpus
        s = samples[TaskKind.PERCEPTION]
        model = QualityModel(StubBackend(), "perception")
        before = [p.detach().clone() for p in model.backend.image_tower()]
        train(TrainConfig(learning_rate=1e-2, epochs=1, freeze_image=True, selection="last"),
              model, s[:8], s[8:])
        assert all(torch.equal(a, b) for a, b in zip(before, model.backend.image_tower()))

    def test_missing_mos_rejected(self, corpus):
        _, samples = corpus
        s = [replace(x, mos_alignment=None) for x in samples[TaskKind.ALIGNMENT]]
        with pytest.raises(InputError):
            train(TrainConfig(epochs=1), QualityModel(StubBackend(), "alignment"), s, s)

    def test_backend_owned_during_training(self, corpus):
        _, samples = corpus
        s = samples[TaskKind.PERCEPTION]
        model = QualityModel(StubBackend(), "perception")
        import threading
        errors = []

        def intruder():
            try:
                with model.backend.owned():
                    pass
            except BackendError as exc:
                errors.append(exc)

        original = model.forward

        def forward(*args):
            t = threading.Thread(target=intruder)
            t.start()
            t.join()
            return original(*args)

        model.forward = forward
        train(TrainConfig(epochs=1, batch_size=8), model, s[:8], s[8:])
        assert errors


class TestAlphaGradient:
    def test_matches_central_difference(self, corpus):
        _, samples = corpus
        batch = samples[TaskKind.PERCEPTION][:6]
        model = QualityModel(StubBackend().double(), "perception")
        whole, patches, prompts = _batch(model, batch)
        mos = torch.tensor([s.mos(TaskKind.PERCEPTION) for s in batch], dtype=torch.float64)

        def loss_at(alpha):
            with torch.no_grad():
                model.alpha.raw.fill_(math.log(alpha / (1 - alpha)))
            return mae_loss(model(whole, patches, prompts).q, mos)

        alpha0 = 0.37
        loss = loss_at(alpha0)
        model.zero_grad()
        loss.backward()
        analytic = float(model.alpha.raw.grad) / (alpha0 * (1 - alpha0))
        h = 1e-6
        with torch.no_grad():
            fd = (float(loss_at(alpha0 + h)) - float(loss_at(alpha0 - h))) / (2 * h)
        assert analytic == pytest.approx(fd, abs=1e-4)


class TestEvaluateAndCheckpoint:
    def test_two_sample_srcc_is_signed_unit(self, corpus):
        _, samples = corpus
        model = QualityModel(StubBackend(), "perception")
        r = evaluate(model, samples[TaskKind.PERCEPTION][:2], "perception")
        assert abs(r.srcc) == pytest.approx(1.0, abs=1e-12)

    def test_wrong_task(self, corpus):
        _, samples = corpus
        with pytest.raises(ConfigError):
            evaluate(QualityModel(StubBackend(), "perception"), samples[TaskKind.ALIGNMENT], "alignment")

    def test_reload_reproduces_scores(self, corpus, tmp_path):
        cfg, samples = corpus
        run = cfg.for_task("alignment")
        s = samples[TaskKind.ALIGNMENT]
        train_set, test_set = split(s, SplitSpec(0.8, 0, 0))
        from promptiqa.config import build_model
        model = build_model(run)
        ckpt = train(replace(run.train, learning_rate=1e-3), model, train_set, test_set,
                     run_config=run.to_dict(), split_manifest="x.csv")
        first = evaluate(model, test_set, "alignment")
        loaded = Checkpoint.load(ckpt.save(tmp_path / "ck"))
        assert loaded.epoch == ckpt.epoch and loaded.split_manifest == "x.csv"
        assert len(loaded.history) == len(ckpt.history)
        again = evaluate(loaded, test_set, "alignment")
        np.testing.assert_array_equal(first.predictions, again.predictions)
        assert (tmp_path / "ck" / "metrics.csv").read_text().startswith("epoch,lr,train_mae")

    def test_incomplete_checkpoint(self, tmp_path):
        with pytest.raises(InputError):
            Checkpoint.load(tmp_path)
