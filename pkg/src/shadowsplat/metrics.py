"""Image and normal quality metrics."""

import math
from typing import Optional

import torch

from .errors import InvalidParameterError
from .geometry import as_tensor
from .losses import ssim as _ssim


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for [0, 1] images; ``inf`` when identical."""
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    """Mean structural similarity with an 11x11 Gaussian window."""
    a, b = _pair(a, b)
    if a.dim() == 2:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    with torch.no_grad():
        return float(_ssim(a, b))


def mae_angular(a, b, mask: Optional[torch.Tensor] = None) -> float:
    """
    Mean angle in radians between two (H, W, 3) normal maps.

    Pixels where either normal is zero (background) are skipped, as are
    pixels outside ``mask``. Returns 0 when nothing is left.
    """
    a, b = _pair(a, b)
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    valid = (na > 1e-12) & (nb > 1e-12)
    if mask is not None:
        valid &= as_tensor(mask).bool()
    if not bool(valid.any()):
        return 0.0
    cos = ((a * b).sum(-1) / (na * nb).clamp_min(1e-12)).clamp(-1.0, 1.0)
    return float(torch.acos(cos[valid]).mean())
