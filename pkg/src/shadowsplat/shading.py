"""
Physically based deferred shading.

The outgoing radiance of a foreground pixel is the sum of a sun term
``f_r * S_i * V * max(S_d . N, 0)``, a split-sum sky term whose diffuse part
is attenuated by the learnable ambient occlusion, and an indirect term from
an :class:`IndirectPredictor`. :func:`compose_final` gamma-encodes the sum
and composites it over the sky texture.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .environment import (EnvironmentMap, ggx_alpha, lookup_brdf, prefilter_environment,
                          procedural_sky, sample_equirect)
from .errors import InvalidParameterError
from .geometry import DTYPE, Camera, DirectionalSun, as_tensor, normalize
from .rasterizer import BACKGROUND_ALPHA, GBuffer

logger = logging.getLogger(__name__)

DIELECTRIC_F0 = 0.04
DOT_MIN = 1e-4
SPECULAR_DENOM_MIN = 1e-4
DEFAULT_GAMMA = 2.2
ENV_LEVELS = 5
FEATURE_CHANNELS = 14


# ---------------------------------------------------------------------------
# BRDF terms
# ---------------------------------------------------------------------------

def ggx_D(n_dot_h, roughness):
    """GGX normal distribution with ``α = max(roughness², 1e-3)``."""
    n_dot_h, roughness = as_tensor(n_dot_h), as_tensor(roughness)
    a2 = ggx_alpha(roughness) ** 2
    denom = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


def fresnel_schlick(h_dot_v, f0):
    """``F0 + (1 - F0)(1 - h.v)^5``."""
    h_dot_v, f0 = as_tensor(h_dot_v), as_tensor(f0)
    return f0 + (1.0 - f0) * (1.0 - h_dot_v) ** 5


def base_reflectance(albedo: torch.Tensor, metallic: torch.Tensor) -> torch.Tensor:
    """Metalness-workflow F0: 0.04 for dielectrics, albedo for metals."""
    m = metallic.unsqueeze(-1)
    return DIELECTRIC_F0 * (1.0 - m) + albedo * m


def smith_k_direct(roughness):
    return (ggx_alpha(as_tensor(roughness)) + 1.0) ** 2 / 8.0


def smith_k_ibl(roughness):
    return ggx_alpha(as_tensor(roughness)) ** 2 / 2.0


def geometry_smith(n_dot_v, n_dot_l, k):
    """Schlick-GGX masking-shadowing with dots clamped to [1e-4, 1]."""
    n_dot_v = as_tensor(n_dot_v).clamp(DOT_MIN, 1.0)
    n_dot_l = as_tensor(n_dot_l).clamp(DOT_MIN, 1.0)
    k = as_tensor(k)

    def g_sub(x):
        return x / (x * (1.0 - k) + k)

    return g_sub(n_dot_v) * g_sub(n_dot_l)


def brdf_components(albedo: torch.Tensor, roughness: torch.Tensor, metallic: torch.Tensor,
                    n: torch.Tensor, v: torch.Tensor, l: torch.Tensor
                    ) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Diffuse and specular lobes of the Cook-Torrance BRDF.

    Args:
        albedo: (..., 3) base color.
        roughness: (...) perceptual roughness.
        metallic: (...) metalness.
        n, v, l: (..., 3) unit normal, view and light directions.

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: ``(1 - m) a / π`` and
        ``D F G / max(4 (n.l)(n.v), 1e-4)``, both (..., 3).
    """
    n_dot_l = (n * l).sum(-1).clamp(DOT_MIN, 1.0)
    n_dot_v = (n * v).sum(-1).clamp(DOT_MIN, 1.0)
    h = normalize(v + l)
    n_dot_h = (n * h).sum(-1).clamp(0.0, 1.0)
    h_dot_v = (h * v).sum(-1).clamp(0.0, 1.0)
    d = ggx_D(n_dot_h, roughness)
    f = fresnel_schlick(h_dot_v.unsqueeze(-1), base_reflectance(albedo, metallic))
    g = geometry_smith(n_dot_v, n_dot_l, smith_k_direct(roughness))
    denom = (4.0 * n_dot_l * n_dot_v).clamp_min(SPECULAR_DENOM_MIN)
    specular = f * (d * g / denom).unsqueeze(-1)
    diffuse = (1.0 - metallic).unsqueeze(-1) * albedo / math.pi
    return diffuse, specular


def brdf_eval(albedo, roughness, metallic, n, v, l) -> torch.Tensor:
    """
    Cook-Torrance reflectance ``f_d + f_s`` per steradian.

    Examples:
        >>> brdf_eval([1, 1, 1], 1.0, 1.0, [0, 0, 1], [0, 0, 1], [0, 0, 1])[0] > 0
        tensor(True)
    """
    diffuse, specular = brdf_components(as_tensor(albedo), as_tensor(roughness),
                                        as_tensor(metallic), as_tensor(n), as_tensor(v),
                                        as_tensor(l))
    return diffuse + specular


# ---------------------------------------------------------------------------
# Lighting terms
# ---------------------------------------------------------------------------

def _check_resolution(gbuffer: GBuffer, name: str, buffer: torch.Tensor) -> None:
    if tuple(buffer.shape[:2]) != gbuffer.shape:
        raise InvalidParameterError(
            f"{name} is {tuple(buffer.shape[:2])} but the G-buffer is {gbuffer.shape}")


def sun_shade_components(gbuffer: GBuffer, sun: DirectionalSun, visibility: torch.Tensor
                         ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Diffuse and specular parts of :func:`sun_shade`."""
    _check_resolution(gbuffer, "visibility", visibility)
    n = gbuffer.normal
    l_dir = sun.direction.to(DTYPE).expand_as(n)
    cos = (n * l_dir).sum(-1)
    lit = gbuffer.foreground & (cos.detach() > 0)
    diffuse, specular = brdf_components(gbuffer.albedo, gbuffer.roughness, gbuffer.metallic,
                                        n, gbuffer.view_dirs, l_dir)
    factor = sun.intensity * (visibility * cos.clamp_min(0.0)).unsqueeze(-1)
    zero = torch.zeros_like(diffuse)
    mask = lit.unsqueeze(-1)
    return torch.where(mask, diffuse * factor, zero), torch.where(mask, specular * factor, zero)


def sun_shade(gbuffer: GBuffer, sun: DirectionalSun, visibility: torch.Tensor) -> torch.Tensor:
    """
    Direct sunlight ``f_r * S_i * V * max(S_d . N, 0)`` per foreground pixel.

    Raises:
        InvalidParameterError: If ``visibility`` does not match the G-buffer.
    """
    diffuse, specular = sun_shade_components(gbuffer, sun, visibility)
    return diffuse + specular


def reflect(view_dirs: torch.Tensor, normals: torch.Tensor) -> torch.Tensor:
    """Mirror direction of ``-v`` about ``n``."""
    return normalize(2.0 * (normals * view_dirs).sum(-1, keepdim=True) * normals - view_dirs)


def sky_shade_components(gbuffer: GBuffer, env: EnvironmentMap,
                         ao: Optional[torch.Tensor] = None
                         ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Diffuse (AO-attenuated) and specular split-sum sky terms."""
    ao = gbuffer.ambient_occlusion if ao is None else ao
    _check_resolution(gbuffer, "ambient occlusion", ao)
    n, v = gbuffer.normal, gbuffer.view_dirs
    irradiance = env.diffuse(n)
    diffuse = ((1.0 - gbuffer.metallic) * ao).unsqueeze(-1) * gbuffer.albedo * irradiance
    n_dot_v = (n * v).sum(-1).clamp(DOT_MIN, 1.0)
    scale, bias = lookup_brdf(n_dot_v, gbuffer.roughness)
    f0 = base_reflectance(gbuffer.albedo, gbuffer.metallic)
    prefiltered = env.specular(reflect(v, n), gbuffer.roughness)
    specular = prefiltered * (f0 * scale.unsqueeze(-1) + bias.unsqueeze(-1))
    mask = gbuffer.foreground.unsqueeze(-1)
    zero = torch.zeros_like(diffuse)
    return torch.where(mask, diffuse, zero), torch.where(mask, specular, zero)


def sky_shade(gbuffer: GBuffer, env: EnvironmentMap,
              ao: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Split-sum skylight: ``(1 - m) a E(N) ao + prefiltered(R, r) (F0 A + B)``.

    ``ao`` defaults to the G-buffer's blended ambient occlusion and only
    attenuates the diffuse term.
    """
    diffuse, specular = sky_shade_components(gbuffer, env, ao)
    return diffuse + specular


# ---------------------------------------------------------------------------
# Indirect light
# ---------------------------------------------------------------------------

def build_features(gbuffer: GBuffer, sun_radiance: torch.Tensor,
                   sky_radiance: torch.Tensor) -> torch.Tensor:
    """(H, W, 14) predictor input: N, A, R, M, L_sun, L_sky."""
    _check_resolution(gbuffer, "sun radiance", sun_radiance)
    _check_resolution(gbuffer, "sky radiance", sky_radiance)
    return torch.cat([gbuffer.normal, gbuffer.albedo, gbuffer.roughness.unsqueeze(-1),
                      gbuffer.metallic.unsqueeze(-1), sun_radiance, sky_radiance], -1)


class IndirectPredictor(nn.Module):
    """Maps (H, W, 14) features to non-negative (H, W, 3) indirect radiance."""

    kind = "abstract"

    def forward(self, features: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind}


class ZeroIndirectPredictor(IndirectPredictor):
    """No indirect light."""

    kind = "zero"

    def forward(self, features: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        return torch.zeros(*features.shape[:-1], 3, dtype=features.dtype)


class LocalLinearPredictor(IndirectPredictor):
    """
    Shared affine map over each pixel's feature neighbourhood.

    ``kernel_size=1`` is a per-pixel linear map, ``kernel_size=3`` a single
    3x3 convolution. The output is clamped at zero and masked by alpha.
    """

    kind = "local_linear"

    def __init__(self, kernel_size: int = 1):
        super().__init__()
        if kernel_size not in (1, 3):
            raise InvalidParameterError(f"kernel_size must be 1 or 3, got {kernel_size}")
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(
            torch.zeros(3, FEATURE_CHANNELS, kernel_size, kernel_size, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(3, dtype=DTYPE))

    @classmethod
    def identity_on_sun(cls, kernel_size: int = 1) -> "LocalLinearPredictor":
        """Predictor whose output reproduces the sun radiance channels."""
        predictor = cls(kernel_size)
        c = kernel_size // 2
        with torch.no_grad():
            for ch in range(3):
                predictor.weight[ch, 8 + ch, c, c] = 1.0
        return predictor

    def forward(self, features: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        x = features.permute(2, 0, 1).unsqueeze(0)
        y = F.conv2d(x, self.weight, self.bias, padding=self.kernel_size // 2)
        y = y[0].permute(1, 2, 0).clamp_min(0.0)
        return torch.where((alpha.detach() >= BACKGROUND_ALPHA).unsqueeze(-1), y,
                           torch.zeros_like(y))

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "kernel_size": self.kernel_size,
                "weight": self.weight.detach().flatten().tolist(),
                "bias": self.bias.detach().tolist()}


def predictor_from_dict(data: Dict[str, Any]) -> IndirectPredictor:
    kind = data.get("kind", "zero")
    if kind == ZeroIndirectPredictor.kind:
        return ZeroIndirectPredictor()
    if kind == LocalLinearPredictor.kind:
        predictor = LocalLinearPredictor(int(data.get("kernel_size", 1)))
        with torch.no_grad():
            if "weight" in data:
                predictor.weight.copy_(as_tensor(data["weight"]).view_as(predictor.weight))
            if "bias" in data:
                predictor.bias.copy_(as_tensor(data["bias"]))
        return predictor
    raise InvalidParameterError(f"unknown indirect predictor: {kind}")


def indirect_shade(predictor: IndirectPredictor, gbuffer: GBuffer, sun_radiance: torch.Tensor,
                   sky_radiance: torch.Tensor) -> torch.Tensor:
    """Indirect radiance predicted from the G-buffer and the direct terms."""
    features = build_features(gbuffer, sun_radiance, sky_radiance)
    return predictor(features, gbuffer.alpha)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def tonemap(radiance: torch.Tensor, gamma: float = DEFAULT_GAMMA) -> torch.Tensor:
    """Gamma-encode linear radiance into [0, 1]."""
    positive = radiance > 1e-10
    encoded = radiance.clamp_min(1e-10) ** (1.0 / gamma)
    return torch.where(positive, encoded, torch.zeros_like(encoded)).clamp(0.0, 1.0)


def sky_background(sky_texture: torch.Tensor, camera: Camera) -> torch.Tensor:
    """(H, W, 3) sky texture sampled along each pixel's viewing ray."""
    return sample_equirect(sky_texture, camera.ray_directions())


def compose_final(sun_radiance: torch.Tensor, sky_radiance: torch.Tensor,
                  indirect_radiance: torch.Tensor, alpha: torch.Tensor,
                  sky_texture: torch.Tensor, camera: Camera,
                  gamma: float = DEFAULT_GAMMA) -> torch.Tensor:
    """
    Final display image.

    ``alpha * tonemap(L_sun + L_sky + L_ind) + (1 - alpha) * sky(view ray)``.

    Raises:
        InvalidParameterError: If the buffers disagree in resolution.
    """
    shape = tuple(alpha.shape)
    for name, buf in (("sun", sun_radiance), ("sky", sky_radiance),
                      ("indirect", indirect_radiance)):
        if tuple(buf.shape[:2]) != shape:
            raise InvalidParameterError(f"{name} radiance is {tuple(buf.shape[:2])}, expected {shape}")
    tone = tonemap(sun_radiance + sky_radiance + indirect_radiance, gamma)
    a = alpha.unsqueeze(-1)
    return a * tone + (1.0 - a) * sky_background(sky_texture, camera)


# ---------------------------------------------------------------------------
# Lighting parameters
# ---------------------------------------------------------------------------

@dataclass
class LightingModel:
    """
    Everything that lights a scene.

    The sun direction is fixed; the sun intensity, environment texels,
    display-space sky texture and predictor weights are learnable.
    """

    sun_direction: torch.Tensor
    sun_intensity: torch.Tensor = field(default_factory=lambda: torch.ones(3, dtype=DTYPE))
    environment: torch.Tensor = field(default_factory=procedural_sky)
    sky_texture: Optional[torch.Tensor] = None
    predictor: IndirectPredictor = field(default_factory=ZeroIndirectPredictor)
    env_levels: int = ENV_LEVELS

    def __post_init__(self) -> None:
        self.sun_direction = normalize(as_tensor(self.sun_direction).detach())
        self.sun_intensity = as_tensor(self.sun_intensity)
        self.environment = as_tensor(self.environment)
        if self.sky_texture is None:
            self.sky_texture = tonemap(self.environment.detach()).clone()
        self.sky_texture = as_tensor(self.sky_texture)

    @property
    def sun(self) -> DirectionalSun:
        return DirectionalSun(direction=self.sun_direction, intensity=self.sun_intensity)

    def prefiltered(self) -> EnvironmentMap:
        return prefilter_environment(self.environment, levels=self.env_levels)

    def parameters(self) -> Dict[str, List[torch.Tensor]]:
        """Learnable tensors by optimizer group."""
        return {
            "sun_intensity": [self.sun_intensity],
            "environment": [self.environment, self.sky_texture],
            "predictor": list(self.predictor.parameters()),
        }

    def requires_grad_(self, flag: bool = True) -> "LightingModel":
        self.sun_intensity.requires_grad_(flag)
        self.environment.requires_grad_(flag)
        self.sky_texture.requires_grad_(flag)
        self.predictor.requires_grad_(flag)
        return self

    @torch.no_grad()
    def clamp_(self) -> "LightingModel":
        self.sun_intensity.clamp_(min=0.0)
        self.environment.clamp_(min=0.0)
        self.sky_texture.clamp_(0.0, 1.0)
        return self

    def clone(self) -> "LightingModel":
        predictor = predictor_from_dict(self.predictor.to_dict())
        return LightingModel(sun_direction=self.sun_direction.clone(),
                             sun_intensity=self.sun_intensity.detach().clone(),
                             environment=self.environment.detach().clone(),
                             sky_texture=self.sky_texture.detach().clone(),
                             predictor=predictor, env_levels=self.env_levels)

    def with_sun(self, direction=None, intensity=None) -> "LightingModel":
        """Copy with a new sun direction and/or intensity."""
        out = self.clone()
        if direction is not None:
            out.sun_direction = normalize(as_tensor(direction))
        if intensity is not None:
            out.sun_intensity = as_tensor(intensity).clone()
        return out

    def with_environment(self, environment: torch.Tensor,
                         sky_texture: Optional[torch.Tensor] = None) -> "LightingModel":
        """Copy lit by another environment; the sky texture follows unless given."""
        out = self.clone()
        out.environment = as_tensor(environment).clone()
        out.sky_texture = (tonemap(out.environment) if sky_texture is None
                           else as_tensor(sky_texture).clone())
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sun_direction": self.sun_direction.tolist(),
            "sun_intensity": self.sun_intensity.detach().tolist(),
            "env_levels": self.env_levels,
            "predictor": self.predictor.to_dict(),
        }
