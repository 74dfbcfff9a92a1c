"""Multimodal-conditioned layout diffusion: object tokens, the transformer denoiser,
training and k-sample generation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, ancestral_sample, build_schedule, denoising_loss, timestep_embedding
from .encoders import (FourierEmbedder, SubjectAugmentConfig, ToyTextEncoder, ToyVisionEncoder,
                       augment_subject, fourier_embed_torch)
from .structures import (BBox, Layout, LayoutError, ObjectSpec, clamp_geometry, from_diffusion_space,
                         require_one_subject, to_diffusion_space)

log = logging.getLogger(__name__)


@dataclass
class LayoutModelConfig:
    width: int = 256
    depth: int = 4
    heads: int = 4
    num_freqs: int = 8
    text_dim: int = 64
    vision_dim: int = 64
    max_objects: int = 8
    schedule: str = "linear"
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class LayoutTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 3e-4
    log_every: int = 10
    augment: SubjectAugmentConfig = field(default_factory=SubjectAugmentConfig)


def scaled_schedule(cfg) -> NoiseSchedule:
    """Linear endpoints are given for T=1000; shorter schedules rescale them to keep abar_T small."""
    factor = 1000 / cfg.T if cfg.schedule == "linear" else 1.0
    return build_schedule(cfg.schedule, cfg.T, min(cfg.beta_start * factor, 0.5),
                          min(cfg.beta_end * factor, 0.5))


def geometry_features(g: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """Fourier features of diffusion-space geometry.

    g in [-1, 1] is mapped by (g + 2) / 4 into [0.25, 0.75], so the period-2
    base band stays one-to-one for noised values in [-4, 4).
    """
    return fourier_embed_torch((g + 2.0) / 4.0, num_freqs)


class Block(nn.Module):
    """Pre-norm self-attention -> cross-attention(caption) -> feed-forward."""

    def __init__(self, width: int, heads: int, ctx_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.sa = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.ca = nn.MultiheadAttention(width, heads, kdim=ctx_dim, vdim=ctx_dim, batch_first=True)
        self.ln3 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, h, ctx, pad_mask=None):
        x = self.ln1(h)
        h = h + self.sa(x, x, x, key_padding_mask=pad_mask, need_weights=False)[0]
        h = h + self.ca(self.ln2(h), ctx, ctx, need_weights=False)[0]
        return h + self.ff(self.ln3(h))


class LayoutDenoiser(nn.Module):
    """Permutation-equivariant transformer over object tokens (no positional encoding)."""

    def __init__(self, cfg: LayoutModelConfig):
        super().__init__()
        self.cfg = cfg
        self.geo = FourierEmbedder(cfg.num_freqs, 4)
        token_dim = self.geo.out_dim + cfg.text_dim + cfg.vision_dim
        self.token_dim = token_dim
        self.null_vector = nn.Parameter(torch.randn(cfg.vision_dim) * 0.02)
        self.proj_in = nn.Linear(token_dim, cfg.width)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.width, cfg.width), nn.SiLU(), nn.Linear(cfg.width, cfg.width))
        self.blocks = nn.ModuleList([Block(cfg.width, cfg.heads, cfg.text_dim) for _ in range(cfg.depth)])
        self.ln_out = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, 4)

    def build_object_tokens(self, g: torch.Tensor, phrase_feats: torch.Tensor, visual: torch.Tensor,
                            subject_mask: torch.Tensor) -> torch.Tensor:
        """Cat(Fourier(g), phrase embedding, subject visual embedding or the null vector).

        g: (B, N, 4); phrase_feats: (B, N, D_text); visual: (B, D_vis);
        subject_mask: (B, N) bool, exactly one True per row among real objects.
        """
        vis = torch.where(subject_mask[..., None], visual[:, None, :].to(g.dtype),
                          self.null_vector.to(g.dtype).expand(*subject_mask.shape, -1))
        return torch.cat([geometry_features(g, self.cfg.num_freqs), phrase_feats.to(g.dtype), vis], dim=-1)

    def denoise(self, tokens: torch.Tensor, caption: torch.Tensor, t: torch.Tensor,
                pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if tokens.shape[1] == 0:
            raise LayoutError("empty token sequence")
        h = self.proj_in(tokens)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.width).to(h.dtype))
        h = h + temb[:, None, :]
        ctx = caption[:, None, :].to(h.dtype)
        for blk in self.blocks:
            h = blk(h, ctx, pad_mask)
        out = self.head(self.ln_out(h))
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activation in layout denoiser")
        return out

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, y: dict) -> torch.Tensor:
        tokens = self.build_object_tokens(z_t, y["phrases"], y["visual"], y["subject_mask"])
        return self.denoise(tokens, y["caption"], t, y.get("pad_mask"))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


class LayoutConditioner:
    """Frozen encoders producing the conditional input y = (I_sub, p, c)."""

    def __init__(self, text: Optional[ToyTextEncoder] = None, vision: Optional[ToyVisionEncoder] = None,
                 augment: SubjectAugmentConfig = SubjectAugmentConfig()):
        self.text = text or ToyTextEncoder()
        self.vision = vision or ToyVisionEncoder()
        self.augment = augment

    def encode(self, subject_images: Sequence[np.ndarray], phrase_lists: Sequence[Sequence[ObjectSpec]],
               captions: Sequence[str], rng: Optional[np.random.Generator], max_n: Optional[int] = None) -> dict:
        """Batch the conditions; rng=None disables the random rescale (scale 1)."""
        if not phrase_lists or any(len(p) == 0 for p in phrase_lists):
            raise LayoutError("empty phrase list")
        n = max_n or max(len(p) for p in phrase_lists)
        b = len(phrase_lists)
        phrases = np.zeros((b, n, self.text.dim), dtype=np.float32)
        subject = np.zeros((b, n), dtype=bool)
        pad = np.ones((b, n), dtype=bool)
        visual = np.zeros((b, self.vision.dim), dtype=np.float32)
        for i, (objs, img) in enumerate(zip(phrase_lists, subject_images)):
            s = require_one_subject(objs)
            subject[i, s] = True
            pad[i, :len(objs)] = False
            for j, o in enumerate(objs):
                phrases[i, j] = self.text(o.phrase)
            aug_rng = rng if rng is not None else _UnitScale()
            visual[i] = self.vision(augment_subject(img, self.augment, aug_rng))
        captions_arr = np.stack([self.text(c) for c in captions]).astype(np.float32)
        return {"phrases": torch.from_numpy(phrases), "subject_mask": torch.from_numpy(subject),
                "pad_mask": torch.from_numpy(pad), "visual": torch.from_numpy(visual),
                "caption": torch.from_numpy(captions_arr)}


class _UnitScale:
    def uniform(self, lo, hi):
        return 1.0


@dataclass
class LayoutTrainingExample:
    subject_image: np.ndarray
    layout: Layout


def _batch_geometry(layouts: Sequence[Layout], n: int) -> torch.Tensor:
    g = np.zeros((len(layouts), n, 4), dtype=np.float32)
    for i, lay in enumerate(layouts):
        g[i, :len(lay)] = to_diffusion_space(lay.geometry())
    return torch.from_numpy(g)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    optimizer_state: Optional[dict] = None

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])


def train_layout_model(dataset: Sequence[LayoutTrainingExample], model_cfg: LayoutModelConfig,
                       train_cfg: LayoutTrainConfig, seed: int,
                       model: Optional[LayoutDenoiser] = None, start_step: int = 0,
                       on_log: Optional[Callable[[dict], None]] = None,
                       optimizer_state: Optional[dict] = None) -> tuple[LayoutDenoiser, TrainLog]:
    """Adam on the epsilon-prediction loss over noised ground-truth geometry."""
    if not dataset:
        raise ValueError("dataset is empty")
    torch.manual_seed(seed)
    if model is None:
        model = LayoutDenoiser(model_cfg)
    schedule = scaled_schedule(model_cfg)
    cond = LayoutConditioner(augment=train_cfg.augment)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=train_cfg.lr)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    gen = torch.Generator().manual_seed(seed + start_step)
    rng = np.random.default_rng([seed, start_step])
    log_ = TrainLog()
    t0 = time.time()
    model.train()
    for step in range(start_step + 1, start_step + train_cfg.steps + 1):
        idx = rng.integers(len(dataset), size=train_cfg.batch_size)
        batch = [dataset[i] for i in idx]
        n = max(len(ex.layout) for ex in batch)
        y = cond.encode([ex.subject_image for ex in batch], [ex.layout.objects for ex in batch],
                        [ex.layout.caption for ex in batch], rng, n)
        z0 = _batch_geometry([ex.layout for ex in batch], n)
        mask = (~y["pad_mask"])[..., None].float()
        loss = denoising_loss(model, z0, y, schedule, gen, mask=mask)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": float(loss.item()), "wall": time.time() - t0}
        log_.records.append(rec)
        if on_log is not None and step % train_cfg.log_every == 0:
            on_log(rec)
    model.eval()
    log_.optimizer_state = opt.state_dict()
    return model, log_


@torch.no_grad()
def sample_layouts(model: LayoutDenoiser, subject_image: np.ndarray, phrases: Sequence[ObjectSpec],
                   caption: str, k: int, seed: int,
                   conditioner: Optional[LayoutConditioner] = None) -> list[Layout]:
    return sample_layouts_batch(model, [subject_image], [phrases], [caption], k, seed, conditioner)[0]


@torch.no_grad()
def sample_layouts_batch(model: LayoutDenoiser, subject_images, phrase_lists, captions, k: int, seed: int,
                         conditioner: Optional[LayoutConditioner] = None) -> list[list[Layout]]:
    """k layouts per input; sampling clamps to [-1, 1] at the last step only.

    The subject visual embedding uses the unscaled subject (no augmentation at inference).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    for objs in phrase_lists:
        require_one_subject(objs)
    cond = conditioner or LayoutConditioner()
    n = max(len(p) for p in phrase_lists)
    y = cond.encode(subject_images, phrase_lists, captions, None, n)
    y = {key: v.repeat_interleave(k, dim=0) for key, v in y.items()}
    schedule = scaled_schedule(model.cfg)
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    z = ancestral_sample(model, (len(phrase_lists) * k, n, 4), y, schedule, gen, clamp=(-1.0, 1.0))
    geo = clamp_geometry(from_diffusion_space(z.double().numpy()))
    out = []
    for i, (objs, cap) in enumerate(zip(phrase_lists, captions)):
        out.append([Layout(list(objs), [BBox(*map(float, row)) for row in geo[i * k + j, :len(objs)]], cap)
                    for j in range(k)])
    return out
