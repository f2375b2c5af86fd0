"""
Differentiable Gaussian shadow mapping.

The shadow map is the scene's blended depth seen from an orthographic
camera looking along the sun direction. Visibility of a shading point is a
sigmoid of its light-space depth margin, so gradients reach both the
receiver and the occluding Gaussians. A ray-traced opacity product over
all Gaussians serves as the reference oracle.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch

from .errors import InvalidParameterError
from .geometry import (
    AABB,
    DTYPE,
    Camera,
    DirectionalSun,
    GaussianScene,
    as_tensor,
    light_ortho_camera,
    quaternion_to_matrix,
    scene_aabb,
)
from .rasterizer import ALPHA_MAX, CUTOFF_SIGMA, GBuffer, RenderOutput, render_channels

logger = logging.getLogger(__name__)

SURFACE_ALPHA = 0.5
BASE_SHARPNESS = 50.0
BIAS_FRACTION = 0.005
NORMAL_OFFSET_FRACTION = 0.01
SLOPE_BIAS_FRACTION = 0.01
WARMUP_INTERVAL = 2000
MAX_SHARPNESS_FACTOR = 16.0
SAMPLING_MODES = ("nearest", "bilinear")


def sharpness_at(step: int, base_k: float, interval: int = WARMUP_INTERVAL,
                 max_factor: float = MAX_SHARPNESS_FACTOR) -> float:
    """Sharpness after ``step`` optimizer steps: doubles every ``interval``, capped."""
    if step < 0:
        raise InvalidParameterError("step must be non-negative")
    return base_k * min(2.0 ** (step // interval), max_factor)


@dataclass(frozen=True)
class DgsmConfig:
    """
    Sigmoid shadow test parameters.

    ``normal_offset`` and ``slope_bias`` push the receiver off its surface
    before the light-space lookup (normal offset and slope-scaled bias), in
    world units.
    """

    sharpness_k: float
    depth_bias: float = 0.0
    sampling: str = "bilinear"
    normal_offset: float = 0.0
    slope_bias: float = 0.0

    def __post_init__(self) -> None:
        if not (self.sharpness_k > 0 and math.isfinite(self.sharpness_k)):
            raise InvalidParameterError(f"sharpness_k must be positive, got {self.sharpness_k}")
        if self.depth_bias < 0 or self.normal_offset < 0 or self.slope_bias < 0:
            raise InvalidParameterError("shadow biases must be non-negative")
        if self.sampling not in SAMPLING_MODES:
            raise InvalidParameterError(f"unknown shadow-map sampling: {self.sampling}")

    @classmethod
    def for_scene(cls, diagonal: float, step: Optional[int] = None, *,
                  base_sharpness: float = BASE_SHARPNESS, bias_fraction: float = BIAS_FRACTION,
                  normal_offset_fraction: float = NORMAL_OFFSET_FRACTION,
                  slope_bias_fraction: float = SLOPE_BIAS_FRACTION,
                  interval: int = WARMUP_INTERVAL, max_factor: float = MAX_SHARPNESS_FACTOR,
                  sampling: str = "bilinear") -> "DgsmConfig":
        """
        Default configuration for a scene of the given diagonal length.

        ``k = base_sharpness / diagonal``, warmed up by :func:`sharpness_at`
        when ``step`` is given and at its final value otherwise.
        """
        if diagonal <= 0:
            raise InvalidParameterError("scene diagonal must be positive")
        base_k = base_sharpness / diagonal
        k = base_k * max_factor if step is None else sharpness_at(step, base_k, interval, max_factor)
        return cls(sharpness_k=k, depth_bias=bias_fraction * diagonal, sampling=sampling,
                   normal_offset=normal_offset_fraction * diagonal,
                   slope_bias=slope_bias_fraction * diagonal)


@dataclass(frozen=True)
class ShadowMap:
    """Light-space depth grid (``+inf`` where no surface) and its camera."""

    light_camera: Camera
    depth: torch.Tensor
    alpha: torch.Tensor
    render: Optional[RenderOutput] = None

    @property
    def resolution(self) -> int:
        return int(self.depth.shape[0])

    @property
    def sun_direction(self) -> torch.Tensor:
        return -self.light_camera.forward


def build_shadow_map(scene: GaussianScene, sun: DirectionalSun, resolution: int = 128,
                     threads: int = 1, aabb: Optional[AABB] = None) -> ShadowMap:
    """
    Render the scene's depth from the sun.

    The light camera comes from :func:`light_ortho_camera` over ``aabb``
    (default: the scene box). Texels whose accumulated alpha is below 0.5
    hold ``+inf``. An empty scene yields an all-``+inf`` map.

    Args:
        scene: Gaussians casting shadows.
        sun: Directional light; only its direction is used.
        resolution: Square map size in texels.
        threads: Tile worker threads for the depth render.
        aabb: Box the light frustum must contain.

    Returns:
        ShadowMap: Map plus the light-camera render (its ``means2d`` carry
        gradients for densification).
    """
    box = aabb if aabb is not None else scene_aabb(scene)
    camera = light_ortho_camera(sun, box, resolution)
    if len(scene) == 0:
        return ShadowMap(light_camera=camera,
                         depth=torch.full((resolution, resolution), math.inf, dtype=DTYPE),
                         alpha=torch.zeros(resolution, resolution, dtype=DTYPE))
    out = render_channels(scene, camera, ["depth"], threads=threads)
    surface = out.alpha.detach() >= SURFACE_ALPHA
    depth = torch.where(surface, out["depth"], torch.full_like(out["depth"], math.inf))
    return ShadowMap(light_camera=camera, depth=depth, alpha=out.alpha, render=out)


# ---------------------------------------------------------------------------
# Visibility tests
# ---------------------------------------------------------------------------

def dgsm_visibility(z: torch.Tensor, z_s: torch.Tensor, cfg: DgsmConfig) -> torch.Tensor:
    """``sigmoid(k * (z_s - (z - bias)))``; exactly 1 where ``z_s`` is ``+inf``."""
    z, z_s = as_tensor(z), as_tensor(z_s)
    return torch.sigmoid(cfg.sharpness_k * (z_s - (z - cfg.depth_bias)))


def hard_visibility(z: torch.Tensor, z_s: torch.Tensor, bias: float = 0.0) -> torch.Tensor:
    """Binary shadow-map test: 1 where ``z_s > z - bias``."""
    z, z_s = as_tensor(z), as_tensor(z_s)
    return (z_s > z - bias).to(DTYPE)


def sample_shadow_depth(shadow_map: ShadowMap, uv: torch.Tensor,
                        sampling: str = "bilinear") -> torch.Tensor:
    """
    Fetch ``z_s`` at (M, 2) light-space pixel coordinates.

    Points outside the map read ``+inf``. Bilinear lookups fill empty texels
    with twice the far plane and return ``+inf`` only when all four taps are
    empty.
    """
    depth = shadow_map.depth
    h, w = depth.shape
    u, v = uv[..., 0], uv[..., 1]
    inside = (u >= -0.5) & (u <= w - 0.5) & (v >= -0.5) & (v <= h - 0.5)
    inf = torch.full_like(u, math.inf)
    if sampling == "nearest":
        iu = torch.round(u.detach()).long().clamp(0, w - 1)
        iv = torch.round(v.detach()).long().clamp(0, h - 1)
        return torch.where(inside, depth[iv, iu], inf)
    if sampling != "bilinear":
        raise InvalidParameterError(f"unknown shadow-map sampling: {sampling}")
    empty = ~torch.isfinite(depth)
    filled = torch.where(empty, torch.full_like(depth, 2.0 * shadow_map.light_camera.far), depth)
    u0 = torch.floor(u.detach())
    v0 = torch.floor(v.detach())
    fu, fv = u - u0, v - v0
    iu0 = u0.long().clamp(0, w - 1)
    iu1 = (u0.long() + 1).clamp(0, w - 1)
    iv0 = v0.long().clamp(0, h - 1)
    iv1 = (v0.long() + 1).clamp(0, h - 1)
    blended = ((1 - fu) * (1 - fv) * filled[iv0, iu0] + fu * (1 - fv) * filled[iv0, iu1]
               + (1 - fu) * fv * filled[iv1, iu0] + fu * fv * filled[iv1, iu1])
    all_empty = empty[iv0, iu0] & empty[iv0, iu1] & empty[iv1, iu0] & empty[iv1, iu1]
    return torch.where(inside & ~all_empty, blended, inf)


def receiver_offset(normals: torch.Tensor, sun_direction: torch.Tensor,
                    cfg: DgsmConfig) -> torch.Tensor:
    """Normal-offset plus slope-scaled displacement applied before the lookup."""
    n = normals.detach()
    cos = (n * sun_direction).sum(-1, keepdim=True).clamp(1e-3, 1.0)
    sin = (1.0 - cos * cos).clamp_min(0.0).sqrt()
    tan = (sin / cos).clamp(max=2.0)
    return n * sin * cfg.normal_offset + sun_direction * tan * cfg.slope_bias


def visibility_from_shadow_map(points: torch.Tensor, shadow_map: ShadowMap, cfg: DgsmConfig,
                               normals: Optional[torch.Tensor] = None) -> torch.Tensor:
    """DGSM visibility of (M, 3) world points, optionally offset along ``normals``."""
    light = shadow_map.light_camera
    if normals is not None and (cfg.normal_offset > 0 or cfg.slope_bias > 0):
        points = points + receiver_offset(normals, shadow_map.sun_direction, cfg)
    uv, z = light.project_points(points)
    z_s = sample_shadow_depth(shadow_map, uv, cfg.sampling)
    return dgsm_visibility(z, z_s, cfg)


def editable_visibility_buffer(gbuffer: GBuffer, shadow_map: ShadowMap, camera: Camera,
                               cfg: DgsmConfig) -> torch.Tensor:
    """
    Per-pixel editable visibility ``V_e`` for a G-buffer.

    Foreground pixels are unprojected to world space, moved into light
    space and tested against the shadow map; background pixels read 1.

    Args:
        gbuffer: Buffers rendered from ``camera``.
        shadow_map: Map built for the current sun.
        camera: The G-buffer's camera.
        cfg: Sigmoid sharpness, bias and sampling.

    Returns:
        torch.Tensor: (H, W) visibility in (0, 1], differentiable in the
        G-buffer depth and in the shadow-map depth.
    """
    depth = gbuffer.depth
    fg = gbuffer.foreground & torch.isfinite(depth.detach())
    safe = torch.where(fg, depth, torch.ones_like(depth))
    points = camera.unproject(safe)
    h, w = depth.shape
    vis = visibility_from_shadow_map(points.reshape(-1, 3), shadow_map, cfg,
                                     normals=gbuffer.normal.reshape(-1, 3))
    return torch.where(fg, vis.reshape(h, w), torch.ones_like(depth))


# ---------------------------------------------------------------------------
# Ray-traced reference
# ---------------------------------------------------------------------------

def ray_traced_visibility_batch(scene: GaussianScene, points: torch.Tensor,
                                direction: torch.Tensor, t_min: float = 1e-3,
                                chunk: int = 512) -> torch.Tensor:
    """
    Opacity product along rays from ``points`` toward ``direction``.

    Each Gaussian is evaluated at the ray's point of closest approach in
    its own metric, ``t* = dᵀΣ⁻¹(μ - o) / dᵀΣ⁻¹d``, and counts only when
    ``t* > t_min``. ``V = prod(1 - min(opacity * g, 0.99))`` with ``g`` cut
    at 3 sigma, matching the rasterizer's footprint.

    Args:
        scene: Occluders.
        points: (M, 3) ray origins.
        direction: Unit 3-vector toward the light.
        t_min: Minimum ray parameter of a counted intersection.
        chunk: Points processed per batch.

    Returns:
        torch.Tensor: (M,) visibility in [0, 1].
    """
    points = as_tensor(points).reshape(-1, 3)
    d = as_tensor(direction)
    if len(scene) == 0:
        return torch.ones(points.shape[0], dtype=DTYPE)
    r = quaternion_to_matrix(scene.rotations)
    inv_var = 1.0 / (scene.scales * scene.scales)
    precision = (r * inv_var.unsqueeze(-2)) @ r.transpose(-1, -2)
    sd = precision @ d
    dsd = sd @ d
    out = []
    for start in range(0, points.shape[0], chunk):
        o = points[start:start + chunk]
        diff = scene.positions.unsqueeze(0) - o.unsqueeze(1)
        proj = (diff * sd).sum(-1)
        t_star = proj / dsd
        quad = torch.einsum("mni,nij,mnj->mn", diff, precision, diff)
        maha = (quad - proj * proj / dsd).clamp_min(0.0)
        inside = maha.detach() <= CUTOFF_SIGMA * CUTOFF_SIGMA
        g = torch.where(inside, torch.exp(-0.5 * maha), torch.zeros_like(maha))
        a = (scene.opacities * g).clamp(max=ALPHA_MAX)
        a = torch.where(t_star.detach() > t_min, a, torch.zeros_like(a))
        out.append(torch.prod(1.0 - a, dim=1))
    return torch.cat(out)


def ray_traced_visibility(scene: GaussianScene, point: torch.Tensor, direction: torch.Tensor,
                          t_min: float = 1e-3) -> torch.Tensor:
    """Single-ray form of :func:`ray_traced_visibility_batch`."""
    return ray_traced_visibility_batch(scene, as_tensor(point).view(1, 3), direction, t_min)[0]
