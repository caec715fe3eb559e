"""Sentence-level (coarse) and word-level (fine) image-text similarity.

All functions accept tensors or array-likes with arbitrary leading batch
dimensions and return tensors. Embeddings need not be unit-norm: cosine
divides by both norms, which is also why the mean patch feature is used as-is
without re-normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from promptiqa.errors import ConfigError, InputError, NumericError

ZERO_NORM = 1e-12


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _checked_norm(x: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=-1)
    if bool((norm <= ZERO_NORM).any()):
        raise NumericError("cosine similarity of a zero vector is undefined")
    return norm


def cosine(u, v) -> torch.Tensor:
    """Cosine similarity along the last axis, broadcasting leading axes."""
    u, v = _tensor(u), _tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise InputError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    value = (u * v).sum(-1) / (_checked_norm(u) * _checked_norm(v))
    return value.clamp(-1.0, 1.0)


def mean_patch(patch_embs) -> torch.Tensor:
    patch_embs = _tensor(patch_embs)
    if patch_embs.ndim < 2 or patch_embs.shape[-2] == 0:
        raise InputError("empty patch set")
    return patch_embs.mean(dim=-2)


def coarse_grained(img_emb, sentence_embs, temperature: float = 1.0) -> torch.Tensor:
    """Softmax over quality levels of ``cosine / temperature``.

    img_emb: (..., D); sentence_embs: (..., L, D). Returns (..., L).
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    img_emb, sentence_embs = _tensor(img_emb), _tensor(sentence_embs)
    if sentence_embs.shape[-2] < 2:
        raise InputError("need at least two quality levels")
    sims = cosine(img_emb.unsqueeze(-2), sentence_embs)
    return torch.softmax(sims / temperature, dim=-1)


def coarse_grained_patches(patch_embs, sentence_embs, temperature: float = 1.0) -> torch.Tensor:
    return coarse_grained(mean_patch(patch_embs), sentence_embs, temperature)


def fine_grained(img_emb, word_embs, mask=None) -> torch.Tensor:
    """Mean cosine between the image and each word of the initial prompt.

    word_embs: (..., K, D). ``mask`` (..., K) marks real words when a batch
    of prompts is padded to a common K.
    """
    img_emb, word_embs = _tensor(img_emb), _tensor(word_embs)
    if word_embs.ndim < 2 or word_embs.shape[-2] == 0:
        raise InputError("no word embeddings (K = 0)")
    if mask is None:
        return cosine(img_emb.unsqueeze(-2), word_embs).mean(dim=-1)
    mask = torch.as_tensor(mask, dtype=torch.bool, device=word_embs.device)
    counts = mask.sum(-1)
    if bool((counts == 0).any()):
        raise InputError("no word embeddings (K = 0)")
    # padded rows may be zero; give them a harmless direction before the cosine
    safe = torch.where(mask.unsqueeze(-1), word_embs, torch.ones_like(word_embs))
    sims = cosine(img_emb.unsqueeze(-2), safe) * mask
    return sims.sum(-1) / counts


def fine_grained_patches(patch_embs, word_embs, mask=None) -> torch.Tensor:
    return fine_grained(mean_patch(patch_embs), word_embs, mask)


@dataclass
class SimilarityReport:
    p_image: np.ndarray
    p_patch: np.ndarray
    w_image: float
    w_patch: float
    temperature: float

    def to_dict(self) -> dict:
        return {
            "p_image": [float(x) for x in self.p_image],
            "p_patch": [float(x) for x in self.p_patch],
            "w_image": float(self.w_image),
            "w_patch": float(self.w_patch),
            "temperature": float(self.temperature),
        }
