"""Frozen stand-in text/vision encoders, the Fourier embedder and subject augmentation.

Images are float arrays in HWC layout with values in [0, 1]. A fourth channel,
when present, is an alpha mask (1 = subject pixel, 0 = transparent).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

BLANK_VALUE = 0.5


class EncoderInputError(ValueError):
    pass


class SubjectTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class FourierEmbedder:
    num_freqs: int = 8
    arity: int = 4

    @property
    def out_dim(self) -> int:
        return 2 * self.arity * self.num_freqs


def fourier_embed(x, embedder: FourierEmbedder) -> np.ndarray:
    """[sin(2^j pi x), cos(2^j pi x)] blocks; sins of all bands first, then coss.

    Works on the trailing axis, so ``x`` may be a batch of shape (..., arity).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != embedder.arity:
        raise EncoderInputError(f"expected trailing dim {embedder.arity}, got {x.shape}")
    freqs = (2.0 ** np.arange(embedder.num_freqs)) * np.pi
    args = (x[..., None, :] * freqs[:, None]).reshape(*x.shape[:-1], -1)
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def fourier_embed_torch(x, num_freqs: int):
    """Differentiable twin of :func:`fourier_embed` used inside the networks."""
    import torch

    freqs = (2.0 ** torch.arange(num_freqs, dtype=x.dtype)) * torch.pi
    args = (x[..., None, :] * freqs[:, None]).flatten(-2)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _seed_for(token: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class ToyTextEncoder:
    """Hash-seeded bag-of-tokens encoder. Identical normalized text gives identical vectors."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def token_vectors(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise EncoderInputError("cannot encode an empty string")
        out = []
        for tok in tokens:
            if tok not in self._cache:
                rng = np.random.default_rng(_seed_for(tok, self.seed))
                self._cache[tok] = _unit(rng.standard_normal(self.dim))
            out.append(self._cache[tok])
        return np.stack(out)

    def __call__(self, text: str) -> np.ndarray:
        return _unit(self.token_vectors(text).mean(axis=0))


_DEFAULT_TEXT = ToyTextEncoder()


def toy_text_encode(phrase: str) -> np.ndarray:
    return _DEFAULT_TEXT(phrase)


class ToyVisionEncoder:
    """Patch-grid channel means projected by a fixed random matrix.

    An all-zero patch grid has no direction; it maps to the first basis vector
    (``zero_fallback``) so the output is always unit norm.
    """

    def __init__(self, dim: int = 64, grid: int = 8, seed: int = 1):
        self.dim = dim
        self.grid = grid
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((grid * grid * 3, dim)) / np.sqrt(grid * grid * 3)
        self.zero_fallback = np.eye(dim)[0]

    def patch_means(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
            raise EncoderInputError(f"expected a non-empty HxWxC image, got shape {image.shape}")
        rgb = image[..., :3]
        h, w = rgb.shape[:2]
        ys = (np.arange(h) * self.grid) // h
        xs = (np.arange(w) * self.grid) // w
        sums = np.zeros((self.grid, self.grid, 3))
        counts = np.zeros((self.grid, self.grid, 1))
        np.add.at(sums, (ys[:, None], xs[None, :]), rgb)
        np.add.at(counts, (ys[:, None], xs[None, :]), 1.0)
        return (sums / np.maximum(counts, 1)).reshape(-1)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        v = self.patch_means(image) @ self.proj
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            return self.zero_fallback.copy()
        return v / norm


_DEFAULT_VISION = ToyVisionEncoder()


def toy_vision_encode(image: np.ndarray) -> np.ndarray:
    return _DEFAULT_VISION(image)


@dataclass
class SubjectAugmentConfig:
    canvas_size: int = 64
    scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi < 2:
            raise ValueError(f"scale_range must lie inside (0, 2), got {self.scale_range}")


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    ys = ((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64)
    xs = ((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64)
    return image[np.minimum(ys, h - 1)][:, np.minimum(xs, w - 1)]


def augment_subject(subject_image: np.ndarray, cfg: SubjectAugmentConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Randomly rescale the subject and paste it centred on a blank square canvas.

    Centring (no jitter) keeps the position of the subject out of its features.
    """
    h, w = subject_image.shape[:2]
    s = rng.uniform(*cfg.scale_range)
    nh, nw = max(1, int(np.floor(h * s + 0.5))), max(1, int(np.floor(w * s + 0.5)))
    size = cfg.canvas_size
    if nh > size or nw > size:
        raise SubjectTooLargeError(f"scaled subject {nh}x{nw} exceeds canvas {size}")
    scaled = resize_nearest(subject_image, nh, nw)
    canvas = np.full((size, size, 3), BLANK_VALUE, dtype=np.float32)
    top, left = (size - nh) // 2, (size - nw) // 2
    region = canvas[top:top + nh, left:left + nw]
    if scaled.shape[-1] == 4:
        alpha = scaled[..., 3:4] > 0.5
        region[...] = np.where(alpha, scaled[..., :3], region)
    else:
        region[...] = scaled[..., :3]
    return canvas
