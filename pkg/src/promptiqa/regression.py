"""Turning level probabilities and word similarities into quality scores."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from promptiqa.errors import ConfigError, NumericError
from promptiqa.prompting import TaskKind


class AlphaMode(str, Enum):
    FIXED_0 = "fixed_0"
    FIXED_1 = "fixed_1"
    LEARNED = "learned"


@dataclass
class AlphaPolicy:
    mode: AlphaMode = AlphaMode.LEARNED
    value: float = 0.5

    def __post_init__(self):
        self.mode = AlphaMode(self.mode)
        if self.mode is AlphaMode.FIXED_0:
            self.value = 0.0
        elif self.mode is AlphaMode.FIXED_1:
            self.value = 1.0
        if not 0.0 <= self.value <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.value}")


class Alpha(nn.Module):
    """Image/patch balance weight.

    Learned alpha is ``sigmoid(raw)`` with ``raw`` initialised to 0 so training
    starts from 0.5 and can never leave [0, 1]. Fixed modes hold a buffer.
    """

    def __init__(self, mode: AlphaMode | str = AlphaMode.LEARNED):
        super().__init__()
        self.mode = AlphaMode(mode)
        if self.mode is AlphaMode.LEARNED:
            self.raw = nn.Parameter(torch.zeros((), dtype=torch.float64))
        else:
            value = 1.0 if self.mode is AlphaMode.FIXED_1 else 0.0
            self.register_buffer("raw", torch.tensor(value, dtype=torch.float64))

    def forward(self) -> torch.Tensor:
        if self.mode is AlphaMode.LEARNED:
            return torch.sigmoid(self.raw)
        return self.raw

    def policy(self) -> AlphaPolicy:
        return AlphaPolicy(self.mode, float(self()))


def coarse_score(p) -> torch.Tensor:
    """Expected level ``sum_j j p_j`` rescaled so level 1 -> 0 and level L -> L."""
    p = p if isinstance(p, torch.Tensor) else torch.as_tensor(np.asarray(p, dtype=np.float64))
    levels = p.shape[-1]
    if levels < 2:
        raise ConfigError("coarse score needs L >= 2")
    j = torch.arange(1, levels + 1, dtype=p.dtype, device=p.device)
    return levels / (levels - 1) * ((p * j).sum(-1) - 1)


def fine_score(w_image, w_patch, levels: int):
    return (w_image + w_patch) / 2 * levels


def fuse_scores(q_cg_image, q_cg_patch, q_fg, alpha):
    return alpha * q_cg_image + (1 - alpha) * q_cg_patch + q_fg


@dataclass
class QualityScore:
    q_cg_image: float
    q_cg_patch: float
    q_fg: float
    q_final: float
    alpha: float
    task: TaskKind | None = None

    def to_dict(self) -> dict:
        return {
            "q_cg_image": self.q_cg_image,
            "q_cg_patch": self.q_cg_patch,
            "q_fg": self.q_fg,
            "q_final": self.q_final,
            "alpha": self.alpha,
            "task": None if self.task is None else TaskKind(self.task).value,
        }


def fuse(q_cg_image: float, q_cg_patch: float, q_fg: float, policy: AlphaPolicy,
         task: TaskKind | None = None) -> QualityScore:
    alpha = policy.value
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if policy.mode is AlphaMode.FIXED_1:
        q = q_cg_image + q_fg
    elif policy.mode is AlphaMode.FIXED_0:
        q = q_cg_patch + q_fg
    else:
        q = fuse_scores(q_cg_image, q_cg_patch, q_fg, alpha)
    return QualityScore(float(q_cg_image), float(q_cg_patch), float(q_fg), float(q), alpha, task)


def mae_loss(q, mos) -> torch.Tensor:
    """Mean absolute error; scalars give ``|q - mos|``."""
    q = q if isinstance(q, torch.Tensor) else torch.as_tensor(q, dtype=torch.float64)
    mos = mos if isinstance(mos, torch.Tensor) else torch.as_tensor(mos, dtype=torch.float64)
    if not (bool(torch.isfinite(q).all()) and bool(torch.isfinite(mos).all())):
        raise NumericError("non-finite value in MAE loss")
    return (q - mos).abs().mean()

