"""
Training losses of both stages.

Every pixel loss skips background pixels (alpha below 1e-4). The stage
totals return a :class:`LossBreakdown` so the trainer can log each term.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidParameterError
from .geometry import AABB, DTYPE, Camera, GaussianScene, aabb_diagonal, as_tensor
from .rasterizer import BACKGROUND_ALPHA, BlendRecord, depth_to_normal, normals_to_world, render_channels

if TYPE_CHECKING:
    from .priors import ViewPriors

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
BCE_EPS = 1e-6
AERIAL_ELEVATION = (30.0, 80.0)
AERIAL_RADIUS_FACTOR = 1.5


@dataclass
class LossWeights:
    """Weights of every loss term (all non-negative)."""

    color: float = 1.0
    normal_consistency: float = 0.05
    normal_prior: float = 0.05
    bilateral: float = 0.05
    shaded: float = 1.0
    material: float = 1.0
    fixed_visibility: float = 0.05
    editable_visibility: float = 1e-2
    distortion: float = 0.02
    novel: float = 0.2
    l1: float = 0.8
    dssim: float = 0.2

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not (value >= 0 and math.isfinite(value)):
                raise InvalidParameterError(f"loss weight {name} must be non-negative, got {value}")


@dataclass
class LossBreakdown:
    """Weighted total plus each unweighted term."""

    total: torch.Tensor
    terms: Dict[str, torch.Tensor] = field(default_factory=dict)

    def as_floats(self) -> Dict[str, float]:
        out = {name: float(value.detach()) for name, value in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=DTYPE)


def _check_same(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidParameterError(f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def foreground_mask(alpha: torch.Tensor) -> torch.Tensor:
    return alpha.detach() >= BACKGROUND_ALPHA


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of (H, W) ``values`` over ``mask``; zero for an empty mask."""
    mask = mask.to(values.dtype)
    count = mask.sum()
    if float(count) == 0.0:
        return (values * mask).sum()
    return (values * mask).sum() / count


# ---------------------------------------------------------------------------
# Image terms
# ---------------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Normalized (size, size) Gaussian window."""
    x = torch.arange(size, dtype=DTYPE) - size // 2
    g = torch.exp(-(x * x) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return g.unsqueeze(1) @ g.unsqueeze(0)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """
    Mean structural similarity of two (H, W, C) images.

    Local statistics use a Gaussian window with zero padding; stabilizers
    are ``(0.01)^2`` and ``(0.03)^2`` for a dynamic range of one.
    """
    _check_same("ssim", a, b)
    channels = a.shape[-1]
    window = gaussian_window(window_size, sigma).expand(channels, 1, window_size, window_size)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    pad = window_size // 2

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, padding=pad, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2))
    return ssim_map.mean()


def loss_color(rendered: torch.Tensor, target: torch.Tensor, l1_weight: float = 0.8,
               dssim_weight: float = 0.2) -> torch.Tensor:
    """
    Weighted mean absolute error plus weighted ``1 - SSIM``.

    Raises:
        InvalidParameterError: If the images differ in shape.
    """
    _check_same("loss_color", rendered, target)
    return (l1_weight * (rendered - target).abs().mean()
            + dssim_weight * (1.0 - ssim(rendered, target)))


def composite_background(image: torch.Tensor, alpha: torch.Tensor,
                         color: torch.Tensor) -> torch.Tensor:
    """Render over a flat background color."""
    return image + (1.0 - alpha).unsqueeze(-1) * as_tensor(color)


def loss_color_random_background(rendered: torch.Tensor, alpha: torch.Tensor,
                                 target: torch.Tensor, sky_mask: Optional[torch.Tensor],
                                 color: Optional[torch.Tensor] = None, l1_weight: float = 0.8,
                                 dssim_weight: float = 0.2) -> torch.Tensor:
    """
    Color loss with the sky swapped for a flat background.

    ``rendered`` (premultiplied by ``alpha``) is composited over ``color``
    and compared with ``target`` whose sky pixels are replaced by the same
    color, so the Gaussians learn to leave the sky transparent.
    """
    color = torch.zeros(3, dtype=DTYPE) if color is None else as_tensor(color)
    prediction = composite_background(rendered, alpha, color)
    if sky_mask is not None:
        target = torch.where(sky_mask.bool().unsqueeze(-1), color.expand_as(target), target)
    return loss_color(prediction, target, l1_weight, dssim_weight)


# ---------------------------------------------------------------------------
# Normal terms
# ---------------------------------------------------------------------------

def loss_normal_consistency(normal: torch.Tensor, depth_normal: torch.Tensor,
                            alpha: torch.Tensor) -> torch.Tensor:
    """Mean ``1 - N . N_D`` over foreground pixels with a depth normal."""
    valid = foreground_mask(alpha) & (depth_normal.detach().norm(dim=-1) > 0.5)
    return masked_mean(1.0 - (normal * depth_normal).sum(-1), valid)


def loss_normal_prior(normal: torch.Tensor, prior: torch.Tensor, alpha: torch.Tensor,
                      valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean ``1 - N . N'`` over foreground pixels where the prior is defined."""
    mask = foreground_mask(alpha) & (prior.detach().norm(dim=-1) > 0.5)
    if valid is not None:
        mask = mask & valid.bool()
    return masked_mean(1.0 - (normal * prior.detach()).sum(-1), mask)


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    positive = sq > 0
    return torch.where(positive, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))


def _gradient_norm(image: torch.Tensor) -> torch.Tensor:
    """Forward-difference gradient magnitude on the (H-1, W-1) interior grid."""
    dx = image[:-1, 1:] - image[:-1, :-1]
    dy = image[1:, :-1] - image[:-1, :-1]
    return _safe_norm((dx * dx).sum(-1) + (dy * dy).sum(-1))


def loss_bilateral_smooth(normal: torch.Tensor, image: torch.Tensor,
                          mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``|grad N| * exp(-|grad I|)`` over masked pixels."""
    if normal.shape[0] < 2 or normal.shape[1] < 2:
        return _zero()
    weight = torch.exp(-_gradient_norm(image.detach()))
    return masked_mean(_gradient_norm(normal) * weight, mask[:-1, :-1].bool())


# ---------------------------------------------------------------------------
# Material and visibility terms
# ---------------------------------------------------------------------------

def loss_material(albedo: torch.Tensor, metallic: torch.Tensor, roughness: torch.Tensor,
                  albedo_prior: torch.Tensor, metallic_prior: torch.Tensor,
                  roughness_prior: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Sum of the mean absolute errors of albedo, metallic and roughness."""
    fg = foreground_mask(alpha)
    a = masked_mean((albedo - albedo_prior.detach()).abs().mean(-1), fg)
    m = masked_mean((metallic - metallic_prior.detach()).abs(), fg)
    r = masked_mean((roughness - roughness_prior.detach()).abs(), fg)
    return a + m + r


def loss_visibility(prediction: torch.Tensor, target: torch.Tensor,
                    mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Binary cross-entropy with the prediction clamped to [1e-6, 1 - 1e-6]."""
    _check_same("loss_visibility", prediction, target)
    p = prediction.clamp(BCE_EPS, 1.0 - BCE_EPS)
    y = target.detach()
    bce = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    if mask is None:
        return bce.mean()
    return masked_mean(bce, mask)


# ---------------------------------------------------------------------------
# Depth distortion
# ---------------------------------------------------------------------------

def distortion_from_weights(weights: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
    """
    Per-pixel ``sum_{i<j} 2 w_i w_j |z_i - z_j|`` in one front-to-back pass.

    ``depths`` must be non-decreasing along the contributor axis. With
    ``A_j = sum_{i<j} w_i`` and ``B_j = sum_{i<j} w_i z_i`` the pair sum is
    ``sum_j 2 w_j (z_j A_j - B_j)``.
    """
    cum_w = torch.cumsum(weights, dim=-1) - weights
    cum_wz = torch.cumsum(weights * depths, dim=-1) - weights * depths
    return (2.0 * weights * (depths * cum_w - cum_wz)).sum(-1)


def loss_depth_distortion(records: Iterable[BlendRecord], num_pixels: int) -> torch.Tensor:
    """Mean per-pixel distortion over an image of ``num_pixels`` pixels."""
    total = _zero()
    for record in records:
        total = total + distortion_from_weights(record.weights, record.depths).sum()
    return total / max(num_pixels, 1)


def aerial_cameras(aabb: AABB, count: int = 8, rng: Optional[np.random.Generator] = None,
                   resolution: int = 16, fov_y: float = 60.0) -> List[Camera]:
    """
    Cameras orbiting the box center from above.

    Azimuth is uniform, elevation uniform in [30, 80] degrees and the
    distance is 1.5 times the box diagonal.
    """
    rng = rng if rng is not None else np.random.default_rng()
    lo, hi = as_tensor(aabb[0]), as_tensor(aabb[1])
    center = 0.5 * (lo + hi)
    radius = AERIAL_RADIUS_FACTOR * aabb_diagonal((lo, hi))
    cameras = []
    for _ in range(count):
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        elevation = math.radians(rng.uniform(*AERIAL_ELEVATION))
        offset = torch.tensor([math.cos(elevation) * math.cos(azimuth),
                               math.cos(elevation) * math.sin(azimuth),
                               math.sin(elevation)], dtype=DTYPE)
        cameras.append(Camera.look_at(center + radius * offset, center, (0.0, 0.0, 1.0),
                                      width=resolution, height=resolution, fov_y=fov_y,
                                      near=0.01 * radius, far=4.0 * radius))
    return cameras


def distortion_regularizer(scene: GaussianScene, cameras: Sequence[Camera],
                           threads: int = 1) -> torch.Tensor:
    """Depth distortion averaged over ``cameras``."""
    if not cameras or len(scene) == 0:
        return _zero()
    total = _zero()
    for camera in cameras:
        out = render_channels(scene, camera, ["depth"], threads=threads, record_blend=True)
        total = total + loss_depth_distortion(out.records, camera.width * camera.height)
    return total / len(cameras)


# ---------------------------------------------------------------------------
# Stage totals
# ---------------------------------------------------------------------------

@dataclass
class LossBuffers:
    """Rendered buffers of one training view and its ground-truth image."""

    color: torch.Tensor
    alpha: torch.Tensor
    normal: torch.Tensor
    depth: torch.Tensor
    camera: Camera
    target: torch.Tensor
    background: Optional[torch.Tensor] = None
    shaded: Optional[torch.Tensor] = None
    albedo: Optional[torch.Tensor] = None
    roughness: Optional[torch.Tensor] = None
    metallic: Optional[torch.Tensor] = None
    fixed_visibility: Optional[torch.Tensor] = None
    editable_visibility: Optional[torch.Tensor] = None
    editable_target: Optional[torch.Tensor] = None
    distortion: Optional[torch.Tensor] = None
    novel: Optional[torch.Tensor] = None


def _stage1_terms(buffers: LossBuffers, priors: Optional["ViewPriors"],
                  weights: LossWeights) -> Dict[str, torch.Tensor]:
    sky = priors.sky_mask if priors is not None else None
    terms = {
        "color": loss_color_random_background(buffers.color, buffers.alpha, buffers.target, sky,
                                              buffers.background, weights.l1, weights.dssim),
    }
    depth_normal = normals_to_world(depth_to_normal(buffers.depth, buffers.camera),
                                    buffers.camera)
    terms["normal_consistency"] = loss_normal_consistency(buffers.normal, depth_normal,
                                                          buffers.alpha)
    if priors is not None and priors.normal is not None:
        terms["normal_prior"] = loss_normal_prior(buffers.normal, priors.normal, buffers.alpha)
    if priors is not None and priors.smooth_mask is not None:
        mask = priors.smooth_mask.bool() & foreground_mask(buffers.alpha)
        terms["bilateral"] = loss_bilateral_smooth(buffers.normal, buffers.target, mask)
    return terms


def _weighted(terms: Dict[str, torch.Tensor], weights: LossWeights) -> LossBreakdown:
    total = _zero()
    for name, value in terms.items():
        total = total + getattr(weights, name) * value
    return LossBreakdown(total=total, terms=terms)


def total_stage1(buffers: LossBuffers, priors: Optional["ViewPriors"],
                 weights: Optional[LossWeights] = None) -> LossBreakdown:
    """
    Geometry-stage objective.

    Weighted color, normal consistency, normal prior and bilateral
    smoothing terms. The prior terms are left out when the view has no
    normal prior or smooth-region mask.
    """
    weights = weights or LossWeights()
    return _weighted(_stage1_terms(buffers, priors, weights), weights)


def total_stage2(buffers: LossBuffers, priors: Optional["ViewPriors"],
                 weights: Optional[LossWeights] = None) -> LossBreakdown:
    """
    Decomposition-stage objective.

    The stage-one terms plus the shaded color loss, material prior loss,
    fixed and editable visibility cross-entropies, depth distortion and the
    novel-view color loss. Terms whose buffers or priors are missing are
    left out. The editable visibility target is ``buffers.editable_target``
    when set, otherwise the detached fixed visibility.
    """
    weights = weights or LossWeights()
    terms = _stage1_terms(buffers, priors, weights)
    fg = foreground_mask(buffers.alpha)
    if buffers.shaded is not None:
        terms["shaded"] = loss_color(buffers.shaded, buffers.target, weights.l1, weights.dssim)
    if (priors is not None and priors.albedo is not None and buffers.albedo is not None):
        terms["material"] = loss_material(buffers.albedo, buffers.metallic, buffers.roughness,
                                          priors.albedo, priors.metallic, priors.roughness,
                                          buffers.alpha)
    if buffers.fixed_visibility is not None:
        if priors is not None and priors.visibility is not None:
            terms["fixed_visibility"] = loss_visibility(buffers.fixed_visibility,
                                                        priors.visibility, fg)
        if buffers.editable_visibility is not None:
            target = buffers.editable_target
            if target is None:
                target = buffers.fixed_visibility.detach()
            terms["editable_visibility"] = loss_visibility(buffers.editable_visibility,
                                                           target.detach(), fg)
    if buffers.distortion is not None:
        terms["distortion"] = buffers.distortion
    if buffers.novel is not None:
        terms["novel"] = buffers.novel
    return _weighted(terms, weights)


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

class LossTrace:
    """Newline-delimited JSON log with one record per optimizer step."""

    def __init__(self, path: Union[str, Path, None]):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, step: int, stage: int, breakdown: LossBreakdown) -> Dict[str, Any]:
        record: Dict[str, Any] = {"step": step, "stage": stage}
        record.update(breakdown.as_floats())
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    @staticmethod
    def read(path: Union[str, Path]) -> List[Dict[str, Any]]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
