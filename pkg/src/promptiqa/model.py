"""Per-task scoring head on top of a shared dual encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import torch
from torch import nn

from promptiqa.backend import DualEncoder, ImageInput, unit, word_features
from promptiqa.dataset import ImageCache, Sample, tensors_for
from promptiqa.prompting import DEFAULT_SCHEME, PromptScheme, TaskKind, build_prompts
from promptiqa.regression import Alpha, AlphaMode, QualityScore, coarse_score, fine_score, fuse_scores
from promptiqa.similarity import (
    SimilarityReport,
    coarse_grained,
    coarse_grained_patches,
    fine_grained,
    fine_grained_patches,
)

log = logging.getLogger(__name__)


class ImageInputMode(str, Enum):
    BOTH = "both"
    ONLY_IMAGE = "only_image"
    ONLY_PATCHES = "only_patches"


@dataclass
class ScoreBatch:
    p_image: torch.Tensor
    p_patch: torch.Tensor
    w_image: torch.Tensor
    w_patch: torch.Tensor
    q_cg_image: torch.Tensor
    q_cg_patch: torch.Tensor
    q_fg: torch.Tensor
    q: torch.Tensor
    alpha: torch.Tensor
    temperature: float


class QualityModel(nn.Module):
    """Scores images for one task with its own prompts and alpha.

    ``image_input`` restricts the coarse and fine terms to the resized image
    or to the patches; alpha is then pinned to 1 or 0 accordingly.
    ``temperature=None`` uses the backbone's learned logit scale.
    """

    def __init__(self, backend: DualEncoder, task: TaskKind | str,
                 scheme: PromptScheme | str | None = None,
                 alpha_mode: AlphaMode | str = AlphaMode.LEARNED,
                 patches_n: int = 5,
                 image_input: ImageInputMode | str = ImageInputMode.BOTH,
                 temperature: float | None = None,
                 word_mode: str = "contextual",
                 use_words: bool = True,
                 levels: Sequence[str] | None = None,
                 strict_scheme: bool = True):
        super().__init__()
        self.backend = backend
        self.task = TaskKind(task)
        self.scheme = PromptScheme(scheme) if scheme is not None else DEFAULT_SCHEME[self.task]
        self.levels_override = tuple(levels) if levels is not None else None
        self.strict_scheme = strict_scheme
        # validates the scheme/task pairing up front
        self.prompt_set("x")
        self.image_input = ImageInputMode(image_input)
        alpha_mode = AlphaMode(alpha_mode)
        pinned = {ImageInputMode.ONLY_IMAGE: AlphaMode.FIXED_1,
                  ImageInputMode.ONLY_PATCHES: AlphaMode.FIXED_0}.get(self.image_input)
        if pinned is not None and alpha_mode is not pinned:
            log.info("image_input=%s pins alpha mode to %s", self.image_input.value, pinned.value)
            alpha_mode = pinned
        self.alpha = Alpha(alpha_mode)
        self.patches_n = patches_n
        self.fixed_temperature = temperature
        self.word_mode = word_mode
        self.use_words = use_words

    def prompt_set(self, initial_prompt: str):
        return build_prompts(self.task, self.scheme, initial_prompt, self.levels_override,
                             strict=self.strict_scheme)

    @property
    def levels(self) -> int:
        return self.prompt_set("x").levels

    def temperature(self):
        if self.fixed_temperature is not None:
            return self.fixed_temperature
        return 1.0 / self.backend.logit_scale.exp()

    def sentence_embeddings(self, prompts: Sequence[str]) -> torch.Tensor:
        """B x L x D unit sentence embeddings, encoding each distinct sentence once."""
        per_sample = [self.prompt_set(p).sentences for p in prompts]
        unique = sorted({s for ss in per_sample for s in ss})
        index = {s: i for i, s in enumerate(unique)}
        table = unit(self.backend.text_features(unique).pooled)
        gather = torch.tensor([[index[s] for s in ss] for ss in per_sample], device=table.device)
        return table[gather]

    def forward(self, whole: torch.Tensor, patches: torch.Tensor, prompts: Sequence[str]) -> ScoreBatch:
        sentences = self.sentence_embeddings(prompts)
        temperature = self.temperature()
        f_img = f_patch = None
        if self.image_input is not ImageInputMode.ONLY_PATCHES:
            f_img = unit(self.backend.image_features(whole.to(self.backend.device)))
        if self.image_input is not ImageInputMode.ONLY_IMAGE:
            b, n = patches.shape[:2]
            flat = self.backend.image_features(patches.flatten(0, 1).to(self.backend.device))
            f_patch = unit(flat).view(b, n, -1)

        if f_img is not None:
            p_image = coarse_grained(f_img, sentences, temperature)
        if f_patch is not None:
            p_patch = coarse_grained_patches(f_patch, sentences, temperature)
        if f_img is None:
            p_image = p_patch
        if f_patch is None:
            p_patch = p_image

        if self.use_words:
            words, mask = word_features(self.backend, prompts, self.word_mode)
            w_image = fine_grained(f_img, words, mask) if f_img is not None else None
            w_patch = fine_grained_patches(f_patch, words, mask) if f_patch is not None else None
            w_image = w_patch if w_image is None else w_image
            w_patch = w_image if w_patch is None else w_patch
        else:
            w_image = w_patch = p_image.new_zeros(p_image.shape[0])

        levels = p_image.shape[-1]
        q_cg_image = coarse_score(p_image)
        q_cg_patch = coarse_score(p_patch)
        q_fg = fine_score(w_image, w_patch, levels)
        alpha = self.alpha()
        if self.alpha.mode is AlphaMode.FIXED_1:
            q = q_cg_image + q_fg
        elif self.alpha.mode is AlphaMode.FIXED_0:
            q = q_cg_patch + q_fg
        else:
            q = fuse_scores(q_cg_image, q_cg_patch, q_fg, alpha)
        temp = float(temperature) if not isinstance(temperature, torch.Tensor) else float(temperature.detach())
        return ScoreBatch(p_image, p_patch, w_image, w_patch, q_cg_image, q_cg_patch, q_fg, q,
                          alpha, temp)

    @torch.no_grad()
    def score(self, img: ImageInput, prompt: str) -> tuple[SimilarityReport, QualityScore]:
        self.backend.check_readable()
        was_training = self.training
        self.eval()
        try:
            whole, patches = tensors_for(img, self.backend.input_size, self.patches_n)
            pre = self.backend.preprocess
            out = self(pre(whole[None]), pre(patches)[None], [prompt])
        finally:
            self.train(was_training)
        report = SimilarityReport(
            out.p_image[0].double().cpu().numpy(), out.p_patch[0].double().cpu().numpy(),
            float(out.w_image[0]), float(out.w_patch[0]), out.temperature,
        )
        quality = QualityScore(float(out.q_cg_image[0]), float(out.q_cg_patch[0]),
                               float(out.q_fg[0]), float(out.q[0]), float(out.alpha), self.task)
        return report, quality

    def make_cache(self, enabled: bool = True) -> ImageCache:
        return ImageCache(self.backend.input_size, self.patches_n, enabled, self.backend.preprocess)

    @torch.no_grad()
    def predict(self, samples: Sequence[Sample], cache: ImageCache, batch_size: int = 16) -> np.ndarray:
        was_training = self.training
        self.eval()
        out = []
        try:
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                pairs = [cache.get(s) for s in chunk]
                whole = torch.stack([p[0] for p in pairs])
                patches = torch.stack([p[1] for p in pairs])
                out.append(self(whole, patches, [s.initial_prompt for s in chunk]).q.double().cpu())
        finally:
            self.train(was_training)
        return torch.cat(out).numpy() if out else np.zeros(0)
