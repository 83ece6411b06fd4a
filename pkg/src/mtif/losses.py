"""Multi-grained training objective.

Two components: a feature reconstruction term supervising the intermediate
decodes (Sobel-gradient agreement at level 1, structural similarity at
level 2) and a base term tying the final fused image to the element-wise
maximum of the inputs (L1 pixel + gradient). Everything here operates on
torch tensors shaped (B, C, H, W) or (C, H, W) and is differentiable.

Conventions: gradient magnitude is |Gx| + |Gy| with 3x3 Sobel kernels and
replicate padding; L1 norms are summed over H and W, divided by H*W, then
averaged over channels and batch; the L1 subgradient at 0 is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .core import Config, ContractError
from .fusenet import FusionOutputs

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def _as_batched(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() != 4:
        raise ContractError(f"expected (C, H, W) or (B, C, H, W), got {tuple(x.shape)}")
    return x


def sobel_gradient_magnitude(img: torch.Tensor) -> torch.Tensor:
    """|Gx| + |Gy| per channel, same spatial shape as the input."""
    squeeze = img.dim() == 3
    x = _as_batched(img)
    c = x.shape[1]
    kx = _SOBEL_X.to(dtype=x.dtype, device=x.device)
    ky = _SOBEL_Y.to(dtype=x.dtype, device=x.device)
    weight = torch.stack([kx, ky]).unsqueeze(1).repeat(c, 1, 1, 1)  # (2C, 1, 3, 3)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    grads = F.conv2d(padded, weight, groups=c)
    mag = grads[:, 0::2].abs() + grads[:, 1::2].abs()
    return mag[0] if squeeze else mag


def _spatial_l1(diff: torch.Tensor) -> torch.Tensor:
    b, c, h, w = diff.shape
    return (diff.abs().sum(dim=(-2, -1)) / (h * w)).mean()


def gradient_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between the Sobel gradient magnitudes of a and b."""
    a, b = _as_batched(a), _as_batched(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _spatial_l1(sobel_gradient_magnitude(a) - sobel_gradient_magnitude(b))


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> torch.Tensor:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Statistics are taken over the valid filter region only, so images must be
    at least window_size on each side.
    """
    a, b = _as_batched(a), _as_batched(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2], a.shape[-1]) < window_size:
        raise ContractError(f"image smaller than the {window_size}x{window_size} SSIM window")
    c = a.shape[1]
    win = _gaussian_window(window_size, sigma, a.dtype, a.device)
    weight = win.expand(c, 1, window_size, window_size).contiguous()

    def filt(x):
        return F.conv2d(x, weight, groups=c)

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu_ab + c1) * (2 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2))
    return ssim_map.mean()


@dataclass
class LossBreakdown:
    """All objective components for one step, as 0-dim tensors."""

    feat_grad: torch.Tensor
    feat_ssim: torch.Tensor
    base_pixel: torch.Tensor
    base_grad: torch.Tensor
    feat_total: torch.Tensor
    base_total: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def is_finite(self) -> bool:
        return all(torch.isfinite(getattr(self, f.name).detach()) for f in fields(self))


def feature_loss(outputs: FusionOutputs, a: torch.Tensor, b: torch.Tensor,
                 alpha1: float, alpha2: float, use_ml: bool = True):
    """Level-wise supervision of the intermediate decodes.

    The level-1 decode must match the gradients of max(a, b); the level-2
    decode is pushed toward structural similarity with both inputs. With
    use_ml off (base-loss-only ablation) every component is zero.
    """
    if not use_ml:
        zero = torch.zeros((), dtype=outputs.fused.dtype, device=outputs.fused.device)
        return zero, zero.clone(), zero.clone()
    a, b = _as_batched(a), _as_batched(b)
    target = torch.maximum(a, b)
    feat_grad = gradient_loss(outputs.intermediate_1, target)
    feat_ssim = 2.0 - ssim(outputs.intermediate_2, a) - ssim(outputs.intermediate_2, b)
    feat_total = alpha1 * feat_grad + alpha2 * feat_ssim
    return feat_grad, feat_ssim, feat_total


def base_loss(fused: torch.Tensor, a: torch.Tensor, b: torch.Tensor,
              beta1: float, beta2: float):
    """Pixel and gradient penalties against the element-wise maximum."""
    fused, a, b = _as_batched(fused), _as_batched(a), _as_batched(b)
    if fused.shape != a.shape or a.shape != b.shape:
        raise ContractError("fused and input shapes must match")
    target = torch.maximum(a, b)
    base_pixel = _spatial_l1(fused - target)
    base_grad = gradient_loss(fused, target)
    base_total = beta1 * base_pixel + beta2 * base_grad
    return base_pixel, base_grad, base_total


def total_loss(outputs: FusionOutputs, a: torch.Tensor, b: torch.Tensor, cfg: Config) -> LossBreakdown:
    """Assemble the full objective for one batch of input pairs (a, b)."""
    feat_grad, feat_ssim, feat_total = feature_loss(
        outputs, a, b, cfg.alpha1, cfg.alpha2, use_ml=cfg.use_ml
    )
    base_pixel, base_grad, base_total = base_loss(outputs.fused, a, b, cfg.beta1, cfg.beta2)
    return LossBreakdown(
        feat_grad=feat_grad,
        feat_ssim=feat_ssim,
        base_pixel=base_pixel,
        base_grad=base_grad,
        feat_total=feat_total,
        base_total=base_total,
        total=feat_total + base_total,
    )


def average_breakdowns(parts: list[LossBreakdown]) -> LossBreakdown:
    """Component-wise mean over per-pair breakdowns within one step."""
    if not parts:
        raise ContractError("cannot average an empty list of breakdowns")
    kwargs = {
        f.name: torch.stack([getattr(p, f.name) for p in parts]).mean()
        for f in fields(LossBreakdown)
    }
    return LossBreakdown(**kwargs)
