"""Dual-encoder backends and the embeddings consumed by the scoring head.

Two backends share one interface:

* :class:`ClipBackend` wraps a pretrained CLIP model from ``transformers``.
  Weights are resolved from the local cache unless ``allow_download`` is set.
* :class:`StubBackend` is a small, seeded, trainable dual encoder with a
  word-level tokenizer. It needs no weights and is what the test suite and the
  synthetic benchmark run on.

Every ``encode_*`` helper returns unit-norm rows.

Concurrency: a backend may be shared by several threads for inference
(``encode_*`` run under ``torch.no_grad`` and never mutate the module). A
training run takes exclusive ownership through :meth:`DualEncoder.owned`;
inference from another thread while a run owns the backend raises
:class:`BackendError`. Use :meth:`DualEncoder.clone` to give each worker its
own copy.
"""

from __future__ import annotations

import copy
import logging
import math
import re
import threading
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch import nn

from promptiqa.errors import BackendError, ConfigError, InputError

log = logging.getLogger(__name__)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
PATCH_SHORT_SIDE = 448


@dataclass
class BackendConfig:
    kind: str = "clip"
    model_name: str = "openai/clip-vit-base-patch32"
    input_size: int = 224
    joint_dim: int | None = None
    device: str = "cpu"
    allow_download: bool = False
    word_mode: str = "contextual"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("clip", "stub"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.input_size <= 0:
            raise ConfigError("input_size must be positive")
        if self.joint_dim is not None and self.joint_dim <= 0:
            raise ConfigError("joint_dim must be positive")
        if self.word_mode not in ("contextual", "per_word"):
            raise ConfigError(f"unknown word_mode {self.word_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- images


@dataclass
class ImageInput:
    pixels: Image.Image
    id: str = ""

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.size


def load_image(path: str | Path, image_id: str | None = None) -> ImageInput:
    path = Path(path)
    try:
        with Image.open(path) as im:
            pixels = im.convert("RGB")
    except FileNotFoundError:
        raise InputError(f"image not found: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from None
    return ImageInput(pixels, image_id if image_id is not None else path.name)


def prepare(img: ImageInput, min_side: int = 224) -> ImageInput:
    """Upscale so both sides are at least ``min_side``; RGB only."""
    pixels = img.pixels if img.pixels.mode == "RGB" else img.pixels.convert("RGB")
    w, h = pixels.size
    short = min(w, h)
    if short < min_side:
        scale = min_side / short
        size = (max(min_side, round(w * scale)), max(min_side, round(h * scale)))
        pixels = pixels.resize(size, Image.BICUBIC)
    return ImageInput(pixels, img.id)


def resize_short_side(pixels: Image.Image, short: int) -> Image.Image:
    w, h = pixels.size
    if min(w, h) == short:
        return pixels
    if w <= h:
        size = (short, max(short, round(h * short / w)))
    else:
        size = (max(short, round(w * short / h)), short)
    return pixels.resize(size, Image.BICUBIC)


def _axis_offsets(extent: int, crop: int, count: int) -> list[int]:
    span = extent - crop
    if count == 1:
        return [int(round(span / 2.0))]
    return [int(round(i * span / (count - 1))) for i in range(count)]


def patch_offsets(width: int, height: int, n: int, crop: int = 224) -> list[tuple[int, int]]:
    """(top, left) offsets of the ``n`` crops on a ``width x height`` image.

    n = 5 gives the five-crop order: top-left, top-right, bottom-left,
    bottom-right, center. Otherwise an evenly spaced grid of
    ``floor(sqrt(n))`` rows, read in raster order and truncated to ``n``.
    """
    if n < 1:
        raise ConfigError("patch count must be >= 1")
    if n == 5:
        right, bottom = width - crop, height - crop
        return [
            (0, 0),
            (0, right),
            (bottom, 0),
            (bottom, right),
            (int(round(bottom / 2.0)), int(round(right / 2.0))),
        ]
    rows = max(1, math.isqrt(n))
    cols = math.ceil(n / rows)
    tops = _axis_offsets(height, crop, rows)
    lefts = _axis_offsets(width, crop, cols)
    return [(t, l) for t in tops for l in lefts][:n]


def crop_patches(img: ImageInput, n: int = 5, crop: int = 224,
                 short_side: int = PATCH_SHORT_SIDE) -> list[ImageInput]:
    """Deterministic ``crop x crop`` patches after resizing the shorter side."""
    pixels = resize_short_side(prepare(img, crop).pixels, short_side)
    w, h = pixels.size
    return [
        ImageInput(pixels.crop((left, top, left + crop, top + crop)), f"{img.id}#p{i}")
        for i, (top, left) in enumerate(patch_offsets(w, h, n, crop))
    ]


def to_uint8_tensor(img: ImageInput, size: int = 224) -> torch.Tensor:
    """Square-resize to ``size`` and return a 3 x size x size uint8 tensor."""
    pixels = prepare(img, size).pixels
    if pixels.size != (size, size):
        pixels = pixels.resize((size, size), Image.BICUBIC)
    arr = np.asarray(pixels, dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()


def normalize_pixels(x: torch.Tensor) -> torch.Tensor:
    """uint8 or [0, 1] float batch -> CLIP-normalized float."""
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    mean = torch.tensor(CLIP_MEAN, dtype=x.dtype, device=x.device).view(3, 1, 1)
    std = torch.tensor(CLIP_STD, dtype=x.dtype, device=x.device).view(3, 1, 1)
    return (x - mean) / std


# ---------------------------------------------------------------- encoders


@dataclass
class TextFeatures:
    pooled: torch.Tensor  # B x D
    tokens: torch.Tensor  # B x T x D
    mask: torch.Tensor  # B x T, True on retained word tokens


class DualEncoder(nn.Module):
    """Image tower + text tower projecting into a shared ``joint_dim`` space.

    Outputs of :meth:`image_features` / :meth:`text_features` are projected
    but not normalized.
    """

    joint_dim: int
    input_size: int
    max_length: int = 77

    def __init__(self):
        super().__init__()
        self._owner_lock = threading.RLock()

    def preprocess(self, pixels: torch.Tensor) -> torch.Tensor:
        """Parameter-free transform of a uint8 batch, safe to cache per image."""
        return pixels

    def image_features(self, pixels: torch.Tensor) -> torch.Tensor:
        """Projected features of a :meth:`preprocess`-ed batch."""
        raise NotImplementedError

    def text_features(self, texts: Sequence[str]) -> TextFeatures:
        raise NotImplementedError

    def word_tokens(self, text: str) -> list[str]:
        """Tokens of ``text`` that become word features, specials excluded."""
        raise NotImplementedError

    def image_tower(self) -> list[nn.Parameter]:
        raise NotImplementedError

    def text_tower(self) -> list[nn.Parameter]:
        raise NotImplementedError

    @property
    def temperature(self) -> float:
        return float(1.0 / self.logit_scale.detach().exp())

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    @contextmanager
    def owned(self):
        """Exclusive ownership for a training run."""
        if not self._owner_lock.acquire(blocking=False):
            raise BackendError("backend is already owned by another training run")
        try:
            yield self
        finally:
            self._owner_lock.release()

    def check_readable(self) -> None:
        if not self._owner_lock.acquire(blocking=False):
            raise BackendError("backend is owned by a training run in another thread")
        self._owner_lock.release()

    def clone(self) -> "DualEncoder":
        return copy.deepcopy(self)

    def __deepcopy__(self, memo):
        cls = self.__class__
        new = cls.__new__(cls)
        memo[id(self)] = new
        for key, value in self.__dict__.items():
            if key == "_owner_lock":
                setattr(new, key, threading.RLock())
            else:
                setattr(new, key, copy.deepcopy(value, memo))
        return new


_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class WordTokenizer:
    """Lower-cased word/punctuation tokenizer with hashed ids.

    ids 0, 1, 2 are pad, start and end; words hash into the rest of the vocab.
    """

    pad_id, bos_id, eos_id = 0, 1, 2

    def __init__(self, vocab_size: int = 4096, max_length: int = 77):
        self.vocab_size = vocab_size
        self.max_length = max_length

    def tokenize(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    def encode(self, text: str) -> list[int]:
        tokens = self.tokenize(text)
        limit = self.max_length - 2
        if len(tokens) > limit:
            log.warning("text truncated from %d to %d tokens: %.40r...", len(tokens), limit, text)
            tokens = tokens[:limit]
        ids = [3 + zlib.crc32(t.encode()) % (self.vocab_size - 3) for t in tokens]
        return [self.bos_id, *ids, self.eos_id]

    def batch(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        encoded = [self.encode(t) for t in texts]
        width = max(len(e) for e in encoded)
        ids = torch.full((len(encoded), width), self.pad_id, dtype=torch.long)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = torch.tensor(e)
        return ids, ids != self.pad_id


class StubBackend(DualEncoder):
    """Seeded lightweight dual encoder; trainable, weight-free, CPU friendly."""

    def __init__(self, joint_dim: int = 64, input_size: int = 224, seed: int = 0,
                 width: int = 64, vocab_size: int = 4096):
        super().__init__()
        self.joint_dim = joint_dim
        self.input_size = input_size
        self.tokenizer = WordTokenizer(vocab_size, self.max_length)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.image_mlp = nn.Sequential(
                nn.Linear(3 * 64 + 2 * 16, 128), nn.GELU(), nn.Linear(128, joint_dim)
            )
            self.token_embedding = nn.Embedding(vocab_size, width)
            self.position_embedding = nn.Parameter(0.02 * torch.randn(self.max_length, width))
            self.text_block = nn.TransformerEncoderLayer(
                width, nhead=4, dim_feedforward=2 * width, dropout=0.0,
                batch_first=True, norm_first=True,
            )
            self.final_norm = nn.LayerNorm(width)
            self.text_projection = nn.Linear(width, joint_dim, bias=False)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(100.0)))

    @torch.no_grad()
    def preprocess(self, pixels: torch.Tensor) -> torch.Tensor:
        """8x8 colour means and 4x4 gradient-magnitude means: 224 values per image."""
        x = pixels.double() / 255.0 if pixels.dtype == torch.uint8 else pixels.double()
        # pooling commutes with the per-channel affine normalization
        colour = normalize_pixels(F.adaptive_avg_pool2d(x, 8)).flatten(1)
        std = torch.tensor(CLIP_STD, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        grey = (x / std).mean(1, keepdim=True)
        dx = (grey[..., :, 1:] - grey[..., :, :-1]).abs()
        dy = (grey[..., 1:, :] - grey[..., :-1, :]).abs()
        texture = torch.cat(
            [F.adaptive_avg_pool2d(dx, 4).flatten(1), F.adaptive_avg_pool2d(dy, 4).flatten(1)], 1
        )
        return torch.cat([colour, texture], 1).float()

    def image_features(self, pixels: torch.Tensor) -> torch.Tensor:
        if pixels.dtype == torch.uint8:
            pixels = self.preprocess(pixels)
        return self.image_mlp(pixels.to(self.text_projection.weight.dtype))

    def text_features(self, texts: Sequence[str]) -> TextFeatures:
        ids, valid = self.tokenizer.batch(texts)
        ids, valid = ids.to(self.device), valid.to(self.device)
        h = self.token_embedding(ids) + self.position_embedding[: ids.shape[1]]
        h = self.final_norm(self.text_block(h, src_key_padding_mask=~valid))
        eos = valid.sum(1) - 1
        projected = self.text_projection(h)
        pooled = projected[torch.arange(len(texts), device=ids.device), eos]
        words = valid & (ids != self.tokenizer.bos_id) & (ids != self.tokenizer.eos_id)
        return TextFeatures(pooled, projected, words)

    def word_tokens(self, text: str) -> list[str]:
        return self.tokenizer.tokenize(text)[: self.max_length - 2]

    def image_tower(self) -> list[nn.Parameter]:
        return list(self.image_mlp.parameters())

    def text_tower(self) -> list[nn.Parameter]:
        modules = (self.token_embedding, self.text_block, self.final_norm, self.text_projection)
        return [self.position_embedding] + [p for m in modules for p in m.parameters()]


class ClipBackend(DualEncoder):
    """CLIP through ``transformers``; word features are the projected
    final-layer token states of one text forward pass."""

    def __init__(self, model, tokenizer):
        super().__init__()
        self.model = model
        self.tokenizer = tokenizer
        self.joint_dim = int(model.config.projection_dim)
        self.input_size = int(model.config.vision_config.image_size)
        self.max_length = int(model.config.text_config.max_position_embeddings)

    @classmethod
    def from_pretrained(cls, name: str, allow_download: bool = False) -> "ClipBackend":
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - transformers is a dependency
            raise BackendError(f"transformers is not available: {exc}") from None
        try:
            model = CLIPModel.from_pretrained(name, local_files_only=not allow_download)
            tokenizer = CLIPTokenizer.from_pretrained(name, local_files_only=not allow_download)
        except (OSError, ValueError) as exc:
            hint = "" if allow_download else " (downloads are disabled; pass --allow-download)"
            raise BackendError(f"cannot load CLIP weights {name!r}{hint}: {exc}") from None
        return cls(model.float(), tokenizer)

    @property
    def logit_scale(self) -> torch.Tensor:
        return self.model.logit_scale

    def image_features(self, pixels: torch.Tensor) -> torch.Tensor:
        dtype = self.model.visual_projection.weight.dtype
        out = self.model.vision_model(pixel_values=normalize_pixels(pixels).to(dtype))
        return self.model.visual_projection(out.pooler_output)

    def _encode_ids(self, texts: Sequence[str]):
        enc = self.tokenizer(list(texts), padding=True, truncation=False, return_tensors="pt")
        ids, attn = enc["input_ids"], enc["attention_mask"]
        if ids.shape[1] > self.max_length:
            log.warning("text truncated to %d tokens", self.max_length)
            enc = self.tokenizer(list(texts), padding=True, truncation=True,
                                 max_length=self.max_length, return_tensors="pt")
            ids, attn = enc["input_ids"], enc["attention_mask"]
        return ids.to(self.device), attn.to(self.device)

    def text_features(self, texts: Sequence[str]) -> TextFeatures:
        ids, attn = self._encode_ids(texts)
        out = self.model.text_model(input_ids=ids, attention_mask=attn)
        tokens = self.model.text_projection(out.last_hidden_state)
        pooled = self.model.text_projection(out.pooler_output)
        special = torch.tensor(sorted(set(self.tokenizer.all_special_ids)), device=ids.device)
        words = attn.bool() & ~torch.isin(ids, special)
        return TextFeatures(pooled, tokens, words)

    def word_tokens(self, text: str) -> list[str]:
        ids, attn = self._encode_ids([text])
        special = set(self.tokenizer.all_special_ids)
        kept = [int(i) for i, a in zip(ids[0], attn[0]) if a and int(i) not in special]
        return self.tokenizer.convert_ids_to_tokens(kept)

    def image_tower(self) -> list[nn.Parameter]:
        return [*self.model.vision_model.parameters(), *self.model.visual_projection.parameters()]

    def text_tower(self) -> list[nn.Parameter]:
        return [*self.model.text_model.parameters(), *self.model.text_projection.parameters()]


def load_backend(cfg: BackendConfig) -> DualEncoder:
    if cfg.kind == "stub":
        backend = StubBackend(joint_dim=cfg.joint_dim or 64, input_size=cfg.input_size, seed=cfg.seed)
    else:
        backend = ClipBackend.from_pretrained(cfg.model_name, cfg.allow_download)
        if cfg.joint_dim is not None and cfg.joint_dim != backend.joint_dim:
            raise ConfigError(
                f"configured joint_dim {cfg.joint_dim} != model projection dim {backend.joint_dim}"
            )
        if cfg.input_size != backend.input_size:
            raise ConfigError(
                f"configured input_size {cfg.input_size} != model image size {backend.input_size}"
            )
    try:
        return backend.to(cfg.device)
    except (RuntimeError, AssertionError) as exc:
        raise BackendError(f"cannot move backend to {cfg.device!r}: {exc}") from None


# ---------------------------------------------------------------- public ops


def unit(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)


def image_batch(images: Sequence[ImageInput], size: int) -> torch.Tensor:
    return torch.stack([to_uint8_tensor(im, size) for im in images])


@torch.no_grad()
def encode_patches(patches: Sequence[ImageInput], backend: DualEncoder) -> torch.Tensor:
    if not patches:
        raise InputError("no patches to encode")
    backend.check_readable()
    x = backend.preprocess(image_batch(patches, backend.input_size).to(backend.device))
    return unit(backend.image_features(x))


def encode_image(img: ImageInput, backend: DualEncoder) -> torch.Tensor:
    return encode_patches([img], backend)[0]


def _check_texts(texts: Sequence[str]) -> None:
    if not texts or any(not t or not t.strip() for t in texts):
        raise InputError("empty text")


@torch.no_grad()
def encode_sentences(sentences: Sequence[str], backend: DualEncoder) -> torch.Tensor:
    _check_texts(sentences)
    backend.check_readable()
    return unit(backend.text_features(list(sentences)).pooled)


def word_features(backend: DualEncoder, prompts: Sequence[str],
                  mode: str = "contextual") -> tuple[torch.Tensor, torch.Tensor]:
    """Per-word joint-space vectors for a batch of prompts, unit-normalized.

    Returns ``(B x K x D, B x K mask)``. Differentiable; callers decide on
    ``no_grad``.
    """
    _check_texts(prompts)
    if mode == "contextual":
        feats = backend.text_features(list(prompts))
        mask = feats.mask
        if bool((mask.sum(1) == 0).any()):
            raise InputError("prompt has no word tokens")
        return unit(feats.tokens) * mask.unsqueeze(-1), mask
    words = [backend.word_tokens(p) for p in prompts]
    if any(len(w) == 0 for w in words):
        raise InputError("prompt has no word tokens")
    flat = [w for ws in words for w in ws]
    pooled = unit(backend.text_features(flat).pooled)
    k = max(len(w) for w in words)
    out = pooled.new_zeros(len(prompts), k, pooled.shape[-1])
    mask = torch.zeros(len(prompts), k, dtype=torch.bool, device=pooled.device)
    start = 0
    for i, ws in enumerate(words):
        out[i, : len(ws)] = pooled[start : start + len(ws)]
        mask[i, : len(ws)] = True
        start += len(ws)
    return out, mask


@torch.no_grad()
def encode_words(initial_prompt: str, backend: DualEncoder, mode: str = "contextual") -> torch.Tensor:
    if not initial_prompt or not initial_prompt.strip():
        raise InputError("initial prompt is empty")
    backend.check_readable()
    feats, mask = word_features(backend, [initial_prompt], mode)
    return feats[0][mask[0]]


@dataclass
class EmbeddingBundle:
    image_embedding: torch.Tensor
    patch_embeddings: torch.Tensor
    sentence_embeddings: torch.Tensor
    word_embeddings: torch.Tensor

    def __post_init__(self):
        if self.patch_embeddings.shape[0] < 1 or self.word_embeddings.shape[0] < 1:
            raise InputError("embedding bundle needs at least one patch and one word")
        dims = {t.shape[-1] for t in (self.image_embedding, self.patch_embeddings,
                                      self.sentence_embeddings, self.word_embeddings)}
        if len(dims) != 1:
            raise InputError(f"inconsistent embedding dimensions {sorted(dims)}")


def embed(img: ImageInput, sentences: Sequence[str], initial_prompt: str,
          backend: DualEncoder, patches_n: int = 5, word_mode: str = "contextual") -> EmbeddingBundle:
    return EmbeddingBundle(
        image_embedding=encode_image(img, backend),
        patch_embeddings=encode_patches(crop_patches(img, patches_n, backend.input_size), backend),
        sentence_embeddings=encode_sentences(sentences, backend),
        word_embeddings=encode_words(initial_prompt, backend, word_mode),
    )
