"""Background painting: a small denoising UNet with gated self-attention grounding and a
zero-initialized control branch, plus conditioning-image construction, rescale-and-paste,
mask strategies and the subject-preserving composite."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import ancestral_sample, denoising_loss, timestep_embedding
from .encoders import BLANK_VALUE, ToyTextEncoder, fourier_embed_torch, resize_nearest
from .layoutgen import TrainLog, scaled_schedule
from .structures import BBox, Layout, SceneSample


class DegenerateBoxError(ValueError):
    pass


class InconsistentMaskError(ValueError):
    pass


class NoInstancesError(ValueError):
    pass


class WidthMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pixel-space operations (HWC float arrays in [0, 1])


def bbox_to_pixel_rect(bbox: BBox, height: int, width: int) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) with floor(v + 0.5) rounding, which commutes with integer shifts."""
    x0, y0, x1, y1 = bbox.corners()
    r = lambda v, s: int(np.floor(v * s + 0.5))
    return r(x0, width), r(y0, height), r(x1, width), r(y1, height)


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return y[0].permute(1, 2, 0).numpy()


def rescale_and_paste(subject_image: np.ndarray, subject_bbox: Optional[BBox], canvas: tuple[int, int],
                      rect: Optional[tuple[int, int, int, int]] = None,
                      resample: str = "nearest") -> tuple[np.ndarray, np.ndarray]:
    """Stretch the subject onto its box on a blank canvas.

    ``subject_image`` is RGB or RGBA (alpha > 0.5 marks subject pixels). Returns
    the canvas and the mask m (0 on pasted subject pixels, 1 elsewhere). Pixels
    of the rectangle falling outside the canvas are dropped. ``resample`` is
    "nearest" (default, exact pixel copies) or "bilinear".
    """
    height, width = canvas
    x0, y0, x1, y1 = rect if rect is not None else bbox_to_pixel_rect(subject_bbox, height, width)
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise DegenerateBoxError(f"box covers {x1 - x0}x{y1 - y0} pixels")
    if resample == "nearest":
        scaled = resize_nearest(subject_image, y1 - y0, x1 - x0)
    elif resample == "bilinear":
        scaled = np.clip(_resize_bilinear(subject_image, y1 - y0, x1 - x0), 0.0, 1.0)
    else:
        raise ValueError(f"unknown resample mode {resample!r}")
    out = np.full((height, width, 3), BLANK_VALUE, dtype=np.float32)
    mask = np.ones((height, width), dtype=np.float32)
    cy0, cy1, cx0, cx1 = max(y0, 0), min(y1, height), max(x0, 0), min(x1, width)
    if cy1 <= cy0 or cx1 <= cx0:
        raise DegenerateBoxError("box lies outside the canvas")
    part = scaled[cy0 - y0:cy1 - y0, cx0 - x0:cx1 - x0]
    alpha = part[..., 3] > 0.5 if part.shape[-1] == 4 else np.ones(part.shape[:2], dtype=bool)
    region = out[cy0:cy1, cx0:cx1]
    region[alpha] = part[..., :3][alpha]
    mask[cy0:cy1, cx0:cx1][alpha] = 0.0
    return out, mask


def build_conditioning_image(pasted: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Subject pixels kept in [0, 1]; every m = 1 pixel set to -1. Returns HWC."""
    if mask.shape != pasted.shape[:2]:
        raise InconsistentMaskError(f"mask {mask.shape} vs image {pasted.shape[:2]}")
    if not np.isin(mask, (0, 1)).all():
        raise InconsistentMaskError("mask must be binary")
    subject = mask == 0
    vals = pasted[subject]
    if vals.size and (not np.isfinite(vals).all() or vals.min() < 0 or vals.max() > 1):
        raise InconsistentMaskError("subject pixels must lie in [0, 1]")
    return np.where(subject[..., None], pasted, -1.0).astype(np.float32)


def composite(sample: np.ndarray, pasted: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """m * sample + (1 - m) * subject, evaluated as a per-pixel select so m = 0 is exact."""
    return np.where(mask[..., None] > 0.5, sample, pasted).astype(np.float32)


def random_reveal_mask(height: int, width: int, rng: np.random.Generator,
                       coverage: tuple[float, float] = (0.1, 0.6)) -> np.ndarray:
    """Union of 1-4 rectangles and 0-3 random-walk brush strokes, redrawn until the
    revealed fraction lies in ``coverage``. Returns m (0 = revealed)."""
    for _ in range(1000):
        reveal = np.zeros((height, width), dtype=bool)
        for _ in range(int(rng.integers(1, 5))):
            rh = int(rng.integers(max(1, height // 8), height // 2 + 1))
            rw = int(rng.integers(max(1, width // 8), width // 2 + 1))
            y, x = int(rng.integers(0, height - rh + 1)), int(rng.integers(0, width - rw + 1))
            reveal[y:y + rh, x:x + rw] = True
        for _ in range(int(rng.integers(0, 4))):
            y, x = int(rng.integers(height)), int(rng.integers(width))
            radius = int(rng.integers(1, max(2, width // 16) + 1))
            for _ in range(int(rng.integers(4, 16))):
                reveal[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = True
                y = int(np.clip(y + rng.integers(-3, 4), 0, height - 1))
                x = int(np.clip(x + rng.integers(-3, 4), 0, width - 1))
        frac = reveal.mean()
        if coverage[0] <= frac <= coverage[1]:
            return (~reveal).astype(np.float32)
    raise RuntimeError("could not draw a random mask within the coverage bounds")


def sample_training_condition(sample: SceneSample, strategy: str, rng: np.random.Generator,
                              candidates: Optional[Sequence[int]] = None):
    """(conditioning image, mask m, ground-truth image) for one training example.

    instance: a uniformly chosen object's segmentation is revealed.
    random: a random rectangle/brush union is revealed.
    """
    image = sample.image
    if strategy == "instance":
        pool = [i for i in (candidates if candidates is not None else range(len(sample.layout)))
                if sample.instance_masks[i].any()]
        if not pool:
            raise NoInstancesError(f"sample {sample.sample_id!r} has no usable instance mask")
        j = pool[int(rng.integers(len(pool)))]
        mask = (~sample.instance_masks[j]).astype(np.float32)
    elif strategy == "random":
        mask = random_reveal_mask(image.shape[0], image.shape[1], rng)
    else:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    return build_conditioning_image(image, mask), mask, image


# ---------------------------------------------------------------------------
# Network


@dataclass
class PaintModelConfig:
    image_size: int = 32
    channels: tuple[int, int] = (32, 64)
    heads: int = 4
    text_dim: int = 64
    num_freqs: int = 8
    attention_type: str = "gsa"  # "gsa" | "gca"
    schedule: str = "linear"
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class Attention(nn.Module):
    """Multi-head attention on scaled_dot_product_attention; ``key_pad`` marks ignored keys."""

    def __init__(self, width: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        kv_dim = kv_dim or width
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(kv_dim, width)
        self.v = nn.Linear(kv_dim, width)
        self.out = nn.Linear(width, width)

    def forward(self, x, ctx=None, key_pad=None):
        ctx = x if ctx is None else ctx
        b, n, c = x.shape
        split = lambda t: t.reshape(b, t.shape[1], self.heads, c // self.heads).transpose(1, 2)
        mask = None if key_pad is None else ~key_pad[:, None, None, :]
        h = F.scaled_dot_product_attention(split(self.q(x)), split(self.k(ctx)), split(self.v(ctx)), attn_mask=mask)
        return self.out(h.transpose(1, 2).reshape(b, n, c))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class GatedSelfAttention(nn.Module):
    """v + beta * tanh(gamma) * TS(SelfAttn([v, d])) with gamma initialized to 0, beta = 1.

    ``attention_type="gca"`` swaps in gated cross-attention from v to d.
    """

    beta = 1.0

    def __init__(self, width: int, heads: int, attention_type: str = "gsa"):
        super().__init__()
        self.width = width
        self.attention_type = attention_type
        self.norm = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, v: torch.Tensor, d: torch.Tensor, d_pad: Optional[torch.Tensor] = None) -> torch.Tensor:
        if d.shape[-1] != self.width or v.shape[-1] != self.width:
            raise WidthMismatchError(f"token widths {v.shape[-1]}/{d.shape[-1]} != layer width {self.width}")
        m = v.shape[1]
        if self.attention_type == "gca":
            if d.shape[1] == 0:
                return v
            out = self.attn(self.norm(v), self.norm(d), d_pad)
        else:
            x = self.norm(torch.cat([v, d], dim=1))
            pad = None
            if d_pad is not None:
                pad = torch.cat([torch.zeros(v.shape[0], m, dtype=torch.bool), d_pad], dim=1)
            out = self.attn(x, key_pad=pad)[:, :m]
        return v + self.beta * torch.tanh(self.gamma) * out


def gated_self_attention(v: torch.Tensor, d: torch.Tensor, layer: GatedSelfAttention,
                         d_pad: Optional[torch.Tensor] = None) -> torch.Tensor:
    return layer(v, d, d_pad)


class TransformerSubBlock(nn.Module):
    """Self-attention -> gated self-attention (adapter) -> cross-attention(caption) -> feed-forward."""

    def __init__(self, ch: int, heads: int, ctx_dim: int, with_gsa: bool, attention_type: str = "gsa"):
        super().__init__()
        self.norm_in = nn.GroupNorm(8, ch)
        self.ln1 = nn.LayerNorm(ch)
        self.sa = Attention(ch, heads)
        self.gsa = GatedSelfAttention(ch, heads, attention_type) if with_gsa else None
        self.ln2 = nn.LayerNorm(ch)
        self.ca = Attention(ch, heads, ctx_dim)
        self.ln3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 2 * ch), nn.GELU(), nn.Linear(2 * ch, ch))

    def forward(self, x, ctx, ctx_pad, grounding=None):
        b, c, h, w = x.shape
        v = self.norm_in(x).flatten(2).transpose(1, 2)
        v = v + self.sa(self.ln1(v))
        if self.gsa is not None and grounding is not None:
            v = self.gsa(v, *grounding)
        v = v + self.ca(self.ln2(v), ctx, ctx_pad)
        v = v + self.ff(self.ln3(v))
        return x + v.transpose(1, 2).reshape(b, c, h, w)


class Encoder(nn.Module):
    """conv_in, two resolution drops and the middle block. Emits six skips and the middle output."""

    def __init__(self, cfg: PaintModelConfig, temb_dim: int, with_gsa: bool):
        super().__init__()
        c0, c1 = cfg.channels
        tf = lambda ch: TransformerSubBlock(ch, cfg.heads, cfg.text_dim, with_gsa, cfg.attention_type)
        self.conv_in = nn.Conv2d(3, c0, 3, padding=1)
        self.res0 = ResBlock(c0, c0, temb_dim)
        self.down0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.res1 = ResBlock(c0, c1, temb_dim)
        self.tf1 = tf(c1)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.res2 = ResBlock(c1, c1, temb_dim)
        self.tf2 = tf(c1)
        self.mid_res1 = ResBlock(c1, c1, temb_dim)
        self.mid_tf = tf(c1)
        self.mid_res2 = ResBlock(c1, c1, temb_dim)
        self.skip_channels = [c0, c0, c0, c1, c1, c1]
        self.mid_channels = c1

    def forward(self, x, temb, ctx, ctx_pad, grounding=None, hint=None):
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = [h]
        h = self.res0(h, temb)
        skips.append(h)
        h = self.down0(h)
        skips.append(h)
        h = self.tf1(self.res1(h, temb), ctx, ctx_pad, grounding)
        skips.append(h)
        h = self.down1(h)
        skips.append(h)
        h = self.tf2(self.res2(h, temb), ctx, ctx_pad, grounding)
        skips.append(h)
        h = self.mid_res1(h, temb)
        h = self.mid_tf(h, ctx, ctx_pad, grounding)
        h = self.mid_res2(h, temb)
        return skips, h


class Decoder(nn.Module):
    def __init__(self, cfg: PaintModelConfig, temb_dim: int, with_gsa: bool):
        super().__init__()
        c0, c1 = cfg.channels
        tf = lambda ch: TransformerSubBlock(ch, cfg.heads, cfg.text_dim, with_gsa, cfg.attention_type)
        self.res5 = ResBlock(c1 + c1, c1, temb_dim)
        self.tf5 = tf(c1)
        self.res4 = ResBlock(c1 + c1, c1, temb_dim)
        self.up1 = nn.Conv2d(c1, c1, 3, padding=1)
        self.res3 = ResBlock(c1 + c1, c1, temb_dim)
        self.tf3 = tf(c1)
        self.res2 = ResBlock(c1 + c0, c1, temb_dim)
        self.up0 = nn.Conv2d(c1, c1, 3, padding=1)
        self.res1 = ResBlock(c1 + c0, c0, temb_dim)
        self.res0 = ResBlock(c0 + c0, c0, temb_dim)
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, 3, 3, padding=1)

    def forward(self, h, skips, temb, ctx, ctx_pad, grounding=None):
        s0, s1, s2, s3, s4, s5 = skips
        h = self.tf5(self.res5(torch.cat([h, s5], 1), temb), ctx, ctx_pad, grounding)
        h = self.res4(torch.cat([h, s4], 1), temb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.tf3(self.res3(torch.cat([h, s3], 1), temb), ctx, ctx_pad, grounding)
        h = self.res2(torch.cat([h, s2], 1), temb)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.res1(torch.cat([h, s1], 1), temb)
        h = self.res0(torch.cat([h, s0], 1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class GroundingNet(nn.Module):
    """d_i = MLP(Cat(text(p_i), Fourier(l_i))), two layers with SiLU."""

    def __init__(self, text_dim: int, num_freqs: int, width: int):
        super().__init__()
        self.num_freqs = num_freqs
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(text_dim + 8 * num_freqs, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, phrase_feats: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        if phrase_feats.shape[:-1] != boxes.shape[:-1]:
            raise ValueError(f"{phrase_feats.shape[:-1]} phrases vs {boxes.shape[:-1]} boxes")
        return self.mlp(torch.cat([phrase_feats, fourier_embed_torch(boxes, self.num_freqs)], dim=-1))


class ControlBranch(nn.Module):
    """Trainable encoder copy fed z_t plus a hint stem over the conditioning image; every
    output passes a zero-initialized 1x1 convolution before joining the decoder."""

    def __init__(self, cfg: PaintModelConfig, temb_dim: int, base_encoder: Encoder):
        super().__init__()
        c0 = cfg.channels[0]
        self.encoder = Encoder(cfg, temb_dim, with_gsa=False)
        self.encoder.load_state_dict(base_encoder.state_dict(), strict=False)
        self.hint = nn.Sequential(nn.Conv2d(3, 16, 3, padding=1), nn.SiLU(),
                                  nn.Conv2d(16, 32, 3, padding=1), nn.SiLU(),
                                  zero_module(nn.Conv2d(32, c0, 3, padding=1)))
        self.zero_convs = nn.ModuleList([zero_module(nn.Conv2d(c, c, 1)) for c in self.encoder.skip_channels])
        self.zero_mid = zero_module(nn.Conv2d(self.encoder.mid_channels, self.encoder.mid_channels, 1))

    def forward(self, z_t, cond_image, temb, ctx, ctx_pad):
        skips, mid = self.encoder(z_t, temb, ctx, ctx_pad, hint=self.hint(cond_image))
        return [zc(s) for zc, s in zip(self.zero_convs, skips)], self.zero_mid(mid)


class PaintUNet(nn.Module):
    """Frozen base UNet (theta) plus adapters (theta'): gated self-attention layers with
    their grounding MLP, and the control branch."""

    def __init__(self, cfg: PaintModelConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1 = cfg.channels
        self.temb_dim = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        self.encoder = Encoder(cfg, self.temb_dim, with_gsa=True)
        self.decoder = Decoder(cfg, self.temb_dim, with_gsa=True)
        self.grounding = GroundingNet(cfg.text_dim, cfg.num_freqs, c1)
        self.control = ControlBranch(cfg, self.temb_dim, self.encoder)

    # parameter partition -------------------------------------------------
    def adapter_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters()
                if n.startswith(("control.", "grounding.")) or ".gsa." in n]

    def base_parameter_names(self) -> list[str]:
        adapters = set(self.adapter_parameter_names())
        return [n for n, _ in self.named_parameters() if n not in adapters]

    def set_trainable(self, base: bool, adapters: bool) -> None:
        adapter_names = set(self.adapter_parameter_names())
        for n, p in self.named_parameters():
            p.requires_grad_(adapters if n in adapter_names else base)

    def reset_control_from_base(self) -> None:
        """Re-copy the base encoder into the control branch (after base pretraining)."""
        self.control.encoder.load_state_dict(self.encoder.state_dict(), strict=False)

    def base_checksum(self) -> str:
        h = hashlib.sha256()
        params = dict(self.named_parameters())
        for n in self.base_parameter_names():
            h.update(n.encode())
            h.update(params[n].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # forward ---------------------------------------------------------------
    def _temb(self, t, dtype):
        return self.time_mlp(timestep_embedding(t, self.cfg.channels[0]).to(dtype))

    def base_forward(self, z_t, t, y) -> torch.Tensor:
        """The base UNet alone: caption cross-attention only, no adapters."""
        temb = self._temb(t, z_t.dtype)
        skips, mid = self.encoder(z_t, temb, y["ctx"], y["ctx_pad"])
        return self.decoder(mid, skips, temb, y["ctx"], y["ctx_pad"])

    def forward(self, z_t, t, y) -> torch.Tensor:
        temb = self._temb(t, z_t.dtype)
        ctx, ctx_pad = y["ctx"], y["ctx_pad"]
        d = self.grounding(y["phrases"], y["boxes"])
        grounding = (d, y["obj_pad"])
        skips, mid = self.encoder(z_t, temb, ctx, ctx_pad, grounding)
        c_skips, c_mid = self.control(z_t, y["cond"], temb, ctx, ctx_pad)
        skips = [s + c for s, c in zip(skips, c_skips)]
        out = self.decoder(mid + c_mid, skips, temb, ctx, ctx_pad, grounding)
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite activation in paint UNet")
        return out


def paint_forward(unet: PaintUNet, z_t, t, y) -> torch.Tensor:
    return unet(z_t, t, y)


def build_grounding_tokens(net: GroundingNet, text: ToyTextEncoder, phrases: Sequence[str],
                           boxes: Sequence[BBox]) -> torch.Tensor:
    if len(phrases) != len(boxes):
        raise ValueError(f"{len(phrases)} phrases but {len(boxes)} boxes")
    feats = torch.from_numpy(np.stack([text(p) for p in phrases]).astype(np.float32))
    geo = torch.tensor(np.stack([b.as_array() for b in boxes]), dtype=torch.float32)
    return net(feats, geo)


# ---------------------------------------------------------------------------
# Conditioning batches


class PaintConditioner:
    def __init__(self, text: Optional[ToyTextEncoder] = None):
        self.text = text or ToyTextEncoder()

    def encode(self, cond_images: Sequence[np.ndarray], layouts: Sequence[Layout]) -> dict:
        b = len(layouts)
        n = max(1, max(len(l) for l in layouts))
        phrases = np.zeros((b, n, self.text.dim), dtype=np.float32)
        boxes = np.zeros((b, n, 4), dtype=np.float32)
        obj_pad = np.ones((b, n), dtype=bool)
        ctx_tokens = [self.text.token_vectors(l.caption or "a scene") for l in layouts]
        length = max(len(c) for c in ctx_tokens)
        ctx = np.zeros((b, length, self.text.dim), dtype=np.float32)
        ctx_pad = np.ones((b, length), dtype=bool)
        for i, lay in enumerate(layouts):
            for j, (o, bb) in enumerate(zip(lay.objects, lay.boxes)):
                phrases[i, j] = self.text(o.phrase)
                boxes[i, j] = bb.as_array()
                obj_pad[i, j] = False
            ctx[i, :len(ctx_tokens[i])] = ctx_tokens[i]
            ctx_pad[i, :len(ctx_tokens[i])] = False
        cond = np.stack([np.asarray(c, dtype=np.float32).transpose(2, 0, 1) for c in cond_images])
        return {"cond": torch.from_numpy(cond), "phrases": torch.from_numpy(phrases),
                "boxes": torch.from_numpy(boxes), "obj_pad": torch.from_numpy(obj_pad),
                "ctx": torch.from_numpy(ctx), "ctx_pad": torch.from_numpy(ctx_pad)}


def to_model_space(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32).transpose(2, 0, 1) for im in images]) * 2 - 1)


def from_model_space(x: torch.Tensor) -> np.ndarray:
    return ((x.clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# Training


@dataclass
class PaintTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 5e-4
    mask_strategy: str = "instance"
    stuff_phrases: tuple[str, ...] = ("sky", "ground")
    log_every: int = 10


def _subject_candidates(sample: SceneSample, stuff: Sequence[str]) -> list[int]:
    idx = [i for i, o in enumerate(sample.layout.objects) if o.phrase not in stuff]
    return idx or list(range(len(sample.layout)))


def _train_loop(model: PaintUNet, forward: Callable, dataset: Sequence[SceneSample], cfg: PaintTrainConfig,
                seed: int, params, conditioner: PaintConditioner, start_step: int,
                on_log: Optional[Callable[[dict], None]], strategy: Optional[str],
                optimizer_state: Optional[dict] = None) -> TrainLog:
    schedule = scaled_schedule(model.cfg)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    gen = torch.Generator().manual_seed(seed + start_step)
    rng = np.random.default_rng([seed, start_step])
    log_ = TrainLog()
    t0 = time.time()
    model.train()
    for step in range(start_step + 1, start_step + cfg.steps + 1):
        batch = [dataset[i] for i in rng.integers(len(dataset), size=cfg.batch_size)]
        if strategy is None:
            conds = [np.full_like(s.image, -1.0) for s in batch]
        else:
            conds = [sample_training_condition(s, strategy, rng, _subject_candidates(s, cfg.stuff_phrases))[0]
                     for s in batch]
        y = conditioner.encode(conds, [s.layout for s in batch])
        z0 = to_model_space([s.image for s in batch])
        loss = denoising_loss(forward, z0, y, schedule, gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": float(loss.item()), "wall": time.time() - t0}
        log_.records.append(rec)
        if on_log is not None and step % cfg.log_every == 0:
            on_log(rec)
    model.eval()
    log_.optimizer_state = opt.state_dict()
    return log_


def pretrain_base(model: PaintUNet, dataset: Sequence[SceneSample], cfg: PaintTrainConfig, seed: int,
                  on_log=None, start_step: int = 0, optimizer_state: Optional[dict] = None) -> TrainLog:
    """Caption-conditioned training of the base UNet alone; stands in for a pretrained backbone."""
    if not dataset:
        raise ValueError("dataset is empty")
    model.set_trainable(base=True, adapters=False)
    params = [p for n, p in model.named_parameters() if n in set(model.base_parameter_names())]
    log_ = _train_loop(model, model.base_forward, dataset, cfg, seed, params, PaintConditioner(), start_step,
                       on_log, None, optimizer_state)
    model.reset_control_from_base()
    return log_


def train_paintnet(dataset: Sequence[SceneSample], model_cfg: PaintModelConfig, train_cfg: PaintTrainConfig,
                   seed: int, model: Optional[PaintUNet] = None, start_step: int = 0,
                   on_log=None, optimizer_state: Optional[dict] = None) -> tuple[PaintUNet, TrainLog]:
    """Optimize the adapters only; the base parameters must come out bit-identical."""
    if not dataset:
        raise ValueError("dataset is empty")
    if model is None:
        torch.manual_seed(seed)
        model = PaintUNet(model_cfg)
    model.set_trainable(base=False, adapters=True)
    before = model.base_checksum()
    params = [p for p in model.parameters() if p.requires_grad]
    log_ = _train_loop(model, model, dataset, train_cfg, seed, params, PaintConditioner(), start_step, on_log,
                       train_cfg.mask_strategy, optimizer_state)
    if model.base_checksum() != before:
        raise RuntimeError("frozen base parameters changed during adapter training")
    return model, log_


# ---------------------------------------------------------------------------
# Generation


@dataclass
class Generation:
    image: np.ndarray
    raw_sample: np.ndarray
    pasted: np.ndarray
    mask: np.ndarray
    cond: np.ndarray
    layout: Layout


@torch.no_grad()
def generate_batch(unet: PaintUNet, subject_images: Sequence[np.ndarray], layouts: Sequence[Layout], seed: int,
                   conditioner: Optional[PaintConditioner] = None,
                   rects: Optional[Sequence[Optional[tuple]]] = None) -> list[Generation]:
    """R&P -> conditioning image -> ancestral sampling -> composite, for a batch of requests."""
    size = unet.cfg.image_size
    conditioner = conditioner or PaintConditioner()
    pastes = []
    for i, (img, lay) in enumerate(zip(subject_images, layouts)):
        s = lay.subject_index
        rect = rects[i] if rects is not None else None
        pasted, mask = rescale_and_paste(img, lay.boxes[s], (size, size), rect=rect)
        pastes.append((pasted, mask, build_conditioning_image(pasted, mask)))
    y = conditioner.encode([p[2] for p in pastes], layouts)
    schedule = scaled_schedule(unet.cfg)
    gen = torch.Generator().manual_seed(seed)
    unet.eval()
    z = ancestral_sample(unet, (len(layouts), 3, size, size), y, schedule, gen, clamp=(-1.0, 1.0))
    raw = from_model_space(z)
    return [Generation(composite(r, p, m), r, p, m, c, lay) for r, (p, m, c), lay in zip(raw, pastes, layouts)]


def generate(unet: PaintUNet, subject_image: np.ndarray, layout: Layout, seed: int,
             conditioner: Optional[PaintConditioner] = None) -> Generation:
    return generate_batch(unet, [subject_image], [layout], seed, conditioner)[0]
