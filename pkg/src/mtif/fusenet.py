"""Differentiable fusion network.

A shared three-stage visual encoder (conv stem, then two downsampling
transformer-style stages with channel attention) feeds per-level cross-modal
modulation blocks. Levels 1 and 2 decode into intermediate reconstructions
for the multi-grained loss; level 3 features of both streams are concatenated
and decoded into the fused image. All outputs pass through a sigmoid, so they
live in [0, 1] at full input resolution.

Text modulation is residual with a zero-initialized scale, so a freshly
initialized network ignores the text entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import Config, ContractError, Image, ImagePair, MtifError
from .textguide import TextFeatureSet

CHECKPOINT_FORMAT = "mtif-checkpoint-v1"


class CheckpointError(MtifError):
    """Checkpoint file is malformed or built for a different architecture."""


def image_to_tensor(img: Image, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Image -> (C, H, W) tensor."""
    return torch.from_numpy(img.pixels.transpose(2, 0, 1).copy()).to(dtype)


def tensor_to_image(t: torch.Tensor, color_space: str | None = None) -> Image:
    """(C, H, W) or (1, C, H, W) tensor -> Image, clipped into [0, 1]."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ContractError(f"expected batch of 1, got {t.shape[0]}")
        t = t[0]
    arr = t.detach().cpu().double().numpy().transpose(1, 2, 0)
    if color_space is None:
        color_space = "GRAY" if arr.shape[2] == 1 else "RGB"
    return Image(np.clip(arr, 0.0, 1.0), color_space)


def text_to_tensors(
    features: TextFeatureSet, batch: int, dtype: torch.dtype, device=None
) -> list[torch.Tensor]:
    """Per-level (B, T, width) tensors sharing one feature set across the batch."""
    out = []
    for mat in features.levels:
        t = torch.from_numpy(mat.copy()).to(dtype=dtype, device=device)
        out.append(t.unsqueeze(0).expand(batch, -1, -1))
    return out


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of NCHW maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + 1e-6)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class ChannelAttention(nn.Module):
    """Transposed self-attention: attention matrix lives in channel space."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(channels, channels * 3, 1, bias=False)
        self.qkv_dw = nn.Conv2d(channels * 3, channels * 3, 3, padding=1, groups=channels * 3, bias=False)
        self.project = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q = F.normalize(q.reshape(b, self.heads, c // self.heads, h * w), dim=-1)
        k = F.normalize(k.reshape(b, self.heads, c // self.heads, h * w), dim=-1)
        v = v.reshape(b, self.heads, c // self.heads, h * w)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        out = (attn @ v).reshape(b, c, h, w)
        return self.project(out)


class GatedFeedForward(nn.Module):
    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        hidden = channels * expansion
        self.expand = nn.Conv2d(channels, hidden * 2, 1, bias=False)
        self.project = nn.Conv2d(hidden, channels, 1, bias=False)

    def forward(self, x):
        gate, value = self.expand(x).chunk(2, dim=1)
        return self.project(F.gelu(gate) * value)


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.attn = ChannelAttention(channels, heads)
        self.norm2 = ChannelLayerNorm(channels)
        self.ffn = GatedFeedForward(channels)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class VisualEncoder(nn.Module):
    """Three-stage pyramid: full, half, quarter resolution."""

    def __init__(self, in_channels: int, widths: tuple[int, int, int], heads: int):
        super().__init__()
        w0, w1, w2 = widths
        self.stage1 = nn.Sequential(
            nn.Conv2d(in_channels, w0, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w0, w0, 3, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.stage2 = TransformerBlock(w1, heads)
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.stage3 = TransformerBlock(w2, heads)

    def forward(self, x) -> list[torch.Tensor]:
        f1 = self.stage1(x)
        f2 = self.stage2(self.down1(f1))
        f3 = self.stage3(self.down2(f2))
        return [f1, f2, f3]


class TextGuidedModulation(nn.Module):
    """Cross-modal residual modulation of one feature level.

    Default wiring treats flattened visual positions as queries against
    projected text tokens (keys/values), preserving the spatial layout.
    The alternative `text_query` wiring runs attention the other way round,
    mean-pools the token outputs, and applies a channel-wise affine to the
    visual map. Either way the branch is scaled by a zero-initialized gamma,
    so modulation is inactive at initialization.
    """

    def __init__(self, channels: int, text_width: int, embed_dim: int, heads: int,
                 mode: str = "visual_query"):
        super().__init__()
        if channels % heads != 0:
            raise ContractError(f"heads {heads} must divide channels {channels}")
        if mode not in ("visual_query", "text_query"):
            raise ContractError(f"unknown modulation mode {mode!r}")
        self.heads = heads
        self.mode = mode
        self.text_proj = nn.Sequential(
            nn.Linear(text_width, embed_dim),
            nn.GELU(),
            nn.Linear(embed_dim, channels),
        )
        self.query = nn.Linear(channels, channels, bias=False)
        self.key = nn.Linear(channels, channels, bias=False)
        self.value = nn.Linear(channels, channels, bias=False)
        self.out = nn.Linear(channels, channels, bias=False)
        self.gamma = nn.Parameter(torch.zeros(()))
        if mode == "text_query":
            self.scale_head = nn.Linear(channels, channels)
            self.shift_head = nn.Linear(channels, channels)

    def _split_heads(self, t):
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, x, text, return_weights: bool = False):
        b, c, h, w = x.shape
        if text.dim() != 3 or text.shape[0] != b:
            raise ContractError(f"text features must be (B, T, width) with B={b}")
        tokens = self.text_proj(text)  # (B, T, C)
        visual = x.flatten(2).transpose(1, 2)  # (B, HW, C)
        scale = 1.0 / math.sqrt(c // self.heads)

        if self.mode == "visual_query":
            q = self._split_heads(self.query(visual))
            k = self._split_heads(self.key(tokens))
            v = self._split_heads(self.value(tokens))
        else:
            q = self._split_heads(self.query(tokens))
            k = self._split_heads(self.key(visual))
            v = self._split_heads(self.value(visual))
        weights = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        attended = weights @ v  # (B, heads, Nq, C/heads)
        attended = attended.transpose(1, 2).reshape(b, -1, c)
        attended = self.out(attended)

        if self.mode == "visual_query":
            branch = attended.transpose(1, 2).reshape(b, c, h, w)
        else:
            pooled = attended.mean(dim=1)  # (B, C)
            branch = x * self.scale_head(pooled)[:, :, None, None] + self.shift_head(pooled)[:, :, None, None]
        out = x + self.gamma * branch
        if return_weights:
            return out, weights
        return out


class IntermediateDecoder(nn.Module):
    """Two-conv head turning a pair of feature maps into an image."""

    def __init__(self, channels: int, out_channels: int, upsample: int):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(0.2)
        self.conv2 = nn.Conv2d(channels, out_channels, 3, padding=1)

    def forward(self, fa, fb):
        x = self.act(self.conv1(torch.cat([fa, fb], dim=1)))
        if self.upsample > 1:
            x = F.interpolate(x, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.conv2(x))


class FusionDecoder(nn.Module):
    """Concatenate the deepest features, mix, and decode with two x2 upsamples."""

    def __init__(self, widths: tuple[int, int, int], out_channels: int, heads: int):
        super().__init__()
        w0, w1, w2 = widths
        self.mix = nn.Conv2d(2 * w2, w2, 1)
        self.block_deep = TransformerBlock(w2, heads)
        self.up2 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(w2, w1, 3, padding=1),
        )
        self.block_mid = TransformerBlock(w1, heads)
        self.up1 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(w1, w0, 3, padding=1),
        )
        self.refine = nn.Sequential(nn.Conv2d(w0, w0, 3, padding=1), nn.LeakyReLU(0.2))
        self.head = nn.Conv2d(w0, out_channels, 3, padding=1)

    def forward(self, fa, fb):
        x = self.mix(torch.cat([fa, fb], dim=1))
        x = self.block_deep(x)
        x = self.block_mid(self.up2(x))
        x = self.refine(self.up1(x))
        return torch.sigmoid(self.head(x))


@dataclass
class FusionOutputs:
    """Final fused image plus the two intermediate reconstructions, all (B, C, H, W)."""

    fused: torch.Tensor
    intermediate_1: torch.Tensor
    intermediate_2: torch.Tensor


class FusionNet(nn.Module):
    """End-to-end fusion model; both input streams share one encoder."""

    def __init__(self, cfg: Config, in_channels: int = 3, text_width: int | None = None):
        super().__init__()
        if cfg.levels != 3:
            raise ContractError("the network is built for exactly 3 levels")
        widths = cfg.channel_widths
        self.in_channels = in_channels
        self.text_width = text_width if text_width is not None else cfg.embed_dim
        self.embed_dim = cfg.embed_dim
        self.heads = cfg.heads
        self.widths = widths
        self.tgvm_mode = cfg.tgvm_mode
        self.use_tg = cfg.use_tg

        self.encoder = VisualEncoder(in_channels, widths, cfg.heads)
        if cfg.use_tg:
            self.modulators = nn.ModuleList(
                TextGuidedModulation(w, self.text_width, cfg.embed_dim, cfg.heads, cfg.tgvm_mode)
                for w in widths
            )
        else:
            self.modulators = None
        self.decoder_l1 = IntermediateDecoder(widths[0], in_channels, upsample=1)
        self.decoder_l2 = IntermediateDecoder(widths[1], in_channels, upsample=2)
        self.decoder_head = FusionDecoder(widths, in_channels, cfg.heads)

    def architecture(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "text_width": self.text_width,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "widths": list(self.widths),
            "tgvm_mode": self.tgvm_mode,
            "has_modulators": self.modulators is not None,
        }

    def encode_visual(self, a: torch.Tensor, b: torch.Tensor):
        for name, t in (("a", a), ("b", b)):
            if t.dim() != 4:
                raise ContractError(f"input {name} must be (B, C, H, W), got {tuple(t.shape)}")
            if t.shape[2] % 4 != 0 or t.shape[3] % 4 != 0:
                raise ContractError(f"input {name} spatial dims must be divisible by 4, got {tuple(t.shape[2:])}")
        if a.shape != b.shape:
            raise ContractError(f"pair shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        return self.encoder(a), self.encoder(b)

    def modulate(self, features: list[torch.Tensor], texts: list[torch.Tensor]):
        if not self.use_tg or self.modulators is None:
            return list(features)
        if len(texts) != len(features):
            raise ContractError(f"expected {len(features)} text levels, got {len(texts)}")
        return [mod(f, t) for mod, f, t in zip(self.modulators, features, texts)]

    def decode_intermediate(self, level: int, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        if level == 1:
            return self.decoder_l1(fa, fb)
        if level == 2:
            return self.decoder_l2(fa, fb)
        raise ContractError("intermediate decoding exists for levels 1 and 2 only")

    def fuse_and_decode(self, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        if fa.shape != fb.shape:
            raise ContractError(f"deep feature shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
        return self.decoder_head(fa, fb)

    def forward(self, a: torch.Tensor, b: torch.Tensor, texts) -> FusionOutputs:
        if isinstance(texts, TextFeatureSet):
            texts = text_to_tensors(texts, a.shape[0], a.dtype, a.device)
        feats_a, feats_b = self.encode_visual(a, b)
        mod_a = self.modulate(feats_a, texts)
        mod_b = self.modulate(feats_b, texts)
        inter1 = self.decode_intermediate(1, mod_a[0], mod_b[0])
        inter2 = self.decode_intermediate(2, mod_a[1], mod_b[1])
        fused = self.fuse_and_decode(mod_a[2], mod_b[2])
        return FusionOutputs(fused=fused, intermediate_1=inter1, intermediate_2=inter2)

    def forward_pair(self, pair: ImagePair, texts: TextFeatureSet) -> FusionOutputs:
        """Convenience single-pair forward from Image inputs."""
        dtype = next(self.parameters()).dtype
        a = image_to_tensor(pair.a, dtype).unsqueeze(0)
        b = image_to_tensor(pair.b, dtype).unsqueeze(0)
        return self.forward(a, b, texts)


def config_from_dict(payload: dict) -> Config:
    payload = dict(payload)
    payload["channel_widths"] = tuple(payload.get("channel_widths", (32, 64, 128)))
    return Config(**payload)


def save_model_checkpoint(model: FusionNet, cfg: Config, path: str | Path) -> None:
    """Persist model weights and the config they were built with."""
    from dataclasses import asdict

    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(cfg),
        "architecture": model.architecture(),
        "model_state": model.state_dict(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_model_checkpoint(path: str | Path, expect_cfg: Config | None = None):
    """Rebuild (model, cfg) from a checkpoint; rejects architecture mismatches."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = config_from_dict(payload["config"])
    arch = payload["architecture"]
    if expect_cfg is not None:
        expected = {
            "in_channels": arch["in_channels"],
            "text_width": arch["text_width"],
            "embed_dim": expect_cfg.embed_dim,
            "heads": expect_cfg.heads,
            "widths": list(expect_cfg.channel_widths),
            "tgvm_mode": expect_cfg.tgvm_mode,
            "has_modulators": expect_cfg.use_tg,
        }
        if expected != arch:
            raise CheckpointError(f"{path}: architecture mismatch: {arch} vs expected {expected}")
    model = FusionNet(cfg, in_channels=arch["in_channels"], text_width=arch["text_width"])
    if model.architecture() != arch:
        raise CheckpointError(f"{path}: stored architecture does not match its config")
    model.load_state_dict(payload["model_state"])
    return model, cfg
