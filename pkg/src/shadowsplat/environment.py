"""
Equirectangular environment maps and split-sum precomputation.

Directions are z-up. A texel (row i, column j) of an H x W map is centered
on longitude ``phi = ((j + 0.5) / W - 0.5) * 2π`` and colatitude
``theta = (i + 0.5) / H * π``. Lookups are bilinear, wrapping in longitude
and clamping in latitude.

Prefiltered levels and the irradiance map are fixed linear filters of the
base texels: each output texel is a weighted sum of bilinear taps at a
fixed Hammersley sample set. The taps are built once per map size and
cached, so filtering stays differentiable in the texels.
"""

import functools
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import InvalidInputError, InvalidParameterError
from .geometry import DTYPE, as_tensor, normalize

logger = logging.getLogger(__name__)

PREFILTER_SAMPLES = 64
IRRADIANCE_SAMPLES = 128
LUT_SIZE = 32
LUT_SAMPLES = 1024
MIN_ALPHA = 1e-3
CACHE_ENV = "SHADOWSPLAT_CACHE_DIR"


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------

def hammersley(count: int) -> np.ndarray:
    """(count, 2) Hammersley points: (i / count, bit-reversed i)."""
    bits = np.arange(count, dtype=np.uint32)
    bits = (bits << 16) | (bits >> 16)
    bits = ((bits & 0x55555555) << 1) | ((bits & 0xAAAAAAAA) >> 1)
    bits = ((bits & 0x33333333) << 2) | ((bits & 0xCCCCCCCC) >> 2)
    bits = ((bits & 0x0F0F0F0F) << 4) | ((bits & 0xF0F0F0F0) >> 4)
    bits = ((bits & 0x00FF00FF) << 8) | ((bits & 0xFF00FF00) >> 8)
    radical = bits.astype(np.float64) * 2.3283064365386963e-10
    return np.stack([np.arange(count, dtype=np.float64) / count, radical], axis=-1)


def ggx_alpha(roughness):
    """GGX width ``α = max(roughness², 1e-3)`` for floats, arrays or tensors."""
    if isinstance(roughness, torch.Tensor):
        return (roughness * roughness).clamp_min(MIN_ALPHA)
    return np.maximum(np.asarray(roughness, dtype=np.float64) ** 2, MIN_ALPHA)


def importance_sample_ggx(xi: np.ndarray, alpha) -> np.ndarray:
    """Tangent-space half vectors (..., S, 3) distributed by the GGX lobe."""
    a = np.asarray(alpha, dtype=np.float64)[..., None]
    phi = 2.0 * np.pi * xi[:, 0]
    cos_t = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (a * a - 1.0) * xi[:, 1]))
    sin_t = np.sqrt(np.clip(1.0 - cos_t * cos_t, 0.0, None))
    return np.stack([np.cos(phi) * sin_t, np.sin(phi) * sin_t, cos_t], axis=-1)


def cosine_sample_hemisphere(xi: np.ndarray) -> np.ndarray:
    phi = 2.0 * np.pi * xi[:, 0]
    r = np.sqrt(xi[:, 1])
    return np.stack([np.cos(phi) * r, np.sin(phi) * r, np.sqrt(1.0 - xi[:, 1])], axis=-1)


def tangent_frame(n: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Orthonormal tangent and bitangent for (..., 3) unit normals."""
    z_up = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE).expand_as(n)
    x_up = torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE).expand_as(n)
    up = torch.where(n[..., 2:3].abs() < 0.999, z_up, x_up)
    t = normalize(torch.linalg.cross(up, n))
    b = torch.linalg.cross(n, t)
    return t, b


# ---------------------------------------------------------------------------
# Equirectangular mapping
# ---------------------------------------------------------------------------

def texel_directions(height: int, width: int) -> torch.Tensor:
    """(H, W, 3) unit directions through texel centers."""
    i = torch.arange(height, dtype=DTYPE) + 0.5
    j = torch.arange(width, dtype=DTYPE) + 0.5
    theta = (i / height * math.pi).view(-1, 1)
    phi = ((j / width - 0.5) * 2.0 * math.pi).view(1, -1)
    return torch.stack([torch.sin(theta) * torch.cos(phi),
                        torch.sin(theta) * torch.sin(phi),
                        torch.cos(theta).expand(height, width)], -1)


def direction_to_texel(dirs: torch.Tensor, height: int, width: int
                       ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Continuous texel coordinates (u column, v row) of unit directions."""
    x, y = dirs[..., 0], dirs[..., 1]
    # atan2 has no derivative on the z axis
    pole = (x * x + y * y).detach() < 1e-20
    phi = torch.atan2(torch.where(pole, torch.zeros_like(y), y),
                      torch.where(pole, torch.ones_like(x), x))
    theta = torch.acos(dirs[..., 2].clamp(-1.0 + 1e-9, 1.0 - 1e-9))
    u = (phi / (2.0 * math.pi) + 0.5) * width - 0.5
    v = theta / math.pi * height - 0.5
    return u, v


def bilinear_taps(dirs: torch.Tensor, height: int, width: int
                  ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Flat texel indices (..., 4) and bilinear weights (..., 4) for directions."""
    u, v = direction_to_texel(dirs, height, width)
    u0 = torch.floor(u.detach())
    v0 = torch.floor(v.detach())
    fu, fv = u - u0, v - v0
    j0 = torch.remainder(u0.long(), width)
    j1 = torch.remainder(u0.long() + 1, width)
    i0 = v0.long().clamp(0, height - 1)
    i1 = (v0.long() + 1).clamp(0, height - 1)
    idx = torch.stack([i0 * width + j0, i0 * width + j1, i1 * width + j0, i1 * width + j1], -1)
    wts = torch.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], -1)
    return idx, wts


def sample_equirect(grid: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """
    Bilinear lookup of an (H, W, 3) equirect grid along (..., 3) unit directions.

    Differentiable in the grid texels (each output touches at most four
    texels with weights summing to one) and in the directions.
    """
    h, w, c = grid.shape
    idx, wts = bilinear_taps(dirs, h, w)
    flat = grid.reshape(-1, c)
    return (flat[idx] * wts.unsqueeze(-1)).sum(-2)


def sample_sky_texture(texture: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
    """Display-space sky color seen along ``direction``."""
    return sample_equirect(texture, normalize(as_tensor(direction)))


# ---------------------------------------------------------------------------
# Filter taps
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _specular_taps(height: int, width: int, roughness: float,
                   samples: int) -> Tuple[torch.Tensor, torch.Tensor]:
    n = texel_directions(height, width).reshape(-1, 1, 3)
    h_local = torch.from_numpy(importance_sample_ggx(hammersley(samples), ggx_alpha(roughness)))
    t, b = tangent_frame(n)
    h = normalize(t * h_local[:, 0:1] + b * h_local[:, 1:2] + n * h_local[:, 2:3])
    l_dir = normalize(2.0 * (n * h).sum(-1, keepdim=True) * h - n)
    n_dot_l = (l_dir * n).sum(-1).clamp_min(0.0)
    weight = n_dot_l / n_dot_l.sum(-1, keepdim=True).clamp_min(1e-12)
    idx, wts = bilinear_taps(l_dir, height, width)
    wts = wts * weight.unsqueeze(-1)
    return idx.reshape(height * width, -1), wts.reshape(height * width, -1)


@functools.lru_cache(maxsize=16)
def _irradiance_taps(height: int, width: int,
                     samples: int) -> Tuple[torch.Tensor, torch.Tensor]:
    n = texel_directions(height, width).reshape(-1, 1, 3)
    local = torch.from_numpy(cosine_sample_hemisphere(hammersley(samples)))
    t, b = tangent_frame(n)
    l_dir = normalize(t * local[:, 0:1] + b * local[:, 1:2] + n * local[:, 2:3])
    idx, wts = bilinear_taps(l_dir, height, width)
    wts = wts / samples
    return idx.reshape(height * width, -1), wts.reshape(height * width, -1)


def _apply_taps(grid: torch.Tensor, taps: Tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    h, w, c = grid.shape
    idx, wts = taps
    flat = grid.reshape(-1, c)
    return (flat[idx] * wts.unsqueeze(-1)).sum(-2).reshape(h, w, c)


# ---------------------------------------------------------------------------
# Environment map
# ---------------------------------------------------------------------------

@dataclass
class EnvironmentMap:
    """
    Linear-radiance sky as an equirect grid with its split-sum filters.

    ``levels[0]`` is the base map and ``levels[l]`` is GGX-filtered for
    roughness ``l / (L - 1)``; ``irradiance`` is the cosine-weighted mean
    radiance around each direction.
    """

    base: torch.Tensor
    levels: List[torch.Tensor] = field(default_factory=list)
    irradiance: Optional[torch.Tensor] = None

    @property
    def is_prefiltered(self) -> bool:
        return len(self.levels) >= 2 and self.irradiance is not None

    @property
    def resolution(self) -> Tuple[int, int]:
        return int(self.base.shape[0]), int(self.base.shape[1])

    def diffuse(self, normals: torch.Tensor) -> torch.Tensor:
        """Irradiance (as mean radiance) around (..., 3) normals."""
        if self.irradiance is None:
            raise InvalidParameterError("environment map is not prefiltered")
        return sample_equirect(self.irradiance, normals)

    def specular(self, dirs: torch.Tensor, roughness: torch.Tensor) -> torch.Tensor:
        """Prefiltered radiance along ``dirs``, interpolated between roughness levels."""
        if not self.is_prefiltered:
            raise InvalidParameterError("environment map is not prefiltered")
        count = len(self.levels)
        lvl = (roughness * (count - 1)).clamp(0.0, count - 1)
        lo = torch.floor(lvl.detach()).long().clamp(max=count - 2)
        frac = (lvl - lo.to(DTYPE)).unsqueeze(-1)
        samples = torch.stack([sample_equirect(level, dirs) for level in self.levels], 0)
        lower = samples.gather(0, lo.unsqueeze(0).unsqueeze(-1).expand(1, *samples.shape[1:]))[0]
        upper = samples.gather(0, (lo + 1).unsqueeze(0).unsqueeze(-1).expand(1, *samples.shape[1:]))[0]
        return lower * (1.0 - frac) + upper * frac


def prefilter_environment(env, levels: int = 5, samples: int = PREFILTER_SAMPLES,
                          irradiance_samples: int = IRRADIANCE_SAMPLES) -> EnvironmentMap:
    """
    Build the roughness chain and irradiance map of an environment.

    Args:
        env: :class:`EnvironmentMap` or an (H, W, 3) radiance tensor.
        levels: Number of roughness levels L (>= 2), level 0 being the base.
        samples: GGX samples per texel and level.
        irradiance_samples: Cosine-hemisphere samples per texel.

    Returns:
        EnvironmentMap: The same base with ``levels`` and ``irradiance``.

    Raises:
        InvalidParameterError: If ``levels < 2``.
        InvalidInputError: If the radiance holds non-finite values.

    Examples:
        >>> env = prefilter_environment(torch.full((8, 16, 3), 0.5), levels=2)
        >>> len(env.levels)
        2
    """
    base = env.base if isinstance(env, EnvironmentMap) else as_tensor(env)
    if levels < 2:
        raise InvalidParameterError(f"prefiltering needs at least 2 levels, got {levels}")
    if base.dim() != 3 or base.shape[-1] != 3:
        raise InvalidParameterError("environment map must be an (H, W, 3) grid")
    if not bool(torch.isfinite(base.detach()).all()):
        raise InvalidInputError("environment map holds non-finite radiance")
    h, w, _ = base.shape
    chain = [base]
    for level in range(1, levels):
        roughness = level / (levels - 1)
        chain.append(_apply_taps(base, _specular_taps(h, w, roughness, samples)))
    irradiance = _apply_taps(base, _irradiance_taps(h, w, irradiance_samples))
    return EnvironmentMap(base=base, levels=chain, irradiance=irradiance)


def procedural_sky(height: int = 16, width: int = 32,
                   zenith: Sequence[float] = (0.25, 0.45, 0.9),
                   horizon: Sequence[float] = (0.8, 0.85, 0.95),
                   ground: Sequence[float] = (0.3, 0.28, 0.25)) -> torch.Tensor:
    """Smooth zenith-to-horizon gradient with a darker ground hemisphere."""
    z = texel_directions(height, width)[..., 2:3]
    zen, hor, gnd = as_tensor(zenith), as_tensor(horizon), as_tensor(ground)
    up = z.clamp(0.0, 1.0).sqrt()
    down = (-4.0 * z).clamp(0.0, 1.0)
    sky = hor * (1 - up) + zen * up
    return torch.where(z >= 0, sky, hor * (1 - down) + gnd * down)


# ---------------------------------------------------------------------------
# Split-sum BRDF integration lookup
# ---------------------------------------------------------------------------

def integrate_brdf(size: int = LUT_SIZE, samples: int = LUT_SAMPLES) -> np.ndarray:
    """
    Monte-Carlo bake of the split-sum scale/bias terms.

    Returns a (size, size, 2) array indexed [n·v cell, roughness cell] at
    cell centers, holding (A, B) so that the specular response is
    ``F0 * A + B``.
    """
    centers = (np.arange(size, dtype=np.float64) + 0.5) / size
    n_dot_v = centers[:, None, None]
    alpha = ggx_alpha(centers)
    h = importance_sample_ggx(hammersley(samples), alpha)[None]
    v = np.stack([np.sqrt(1.0 - n_dot_v ** 2), np.zeros_like(n_dot_v), n_dot_v], axis=-1)
    v_dot_h = np.sum(v * h, axis=-1)
    l_dir = 2.0 * v_dot_h[..., None] * h - v
    n_dot_l = np.clip(l_dir[..., 2], 0.0, None)
    n_dot_h = np.clip(h[..., 2], 0.0, None)
    v_dot_h = np.clip(v_dot_h, 0.0, None)
    k = (alpha * alpha / 2.0)[None, :, None]

    def g_sub(x: np.ndarray) -> np.ndarray:
        return x / (x * (1.0 - k) + k)

    g = g_sub(n_dot_v) * g_sub(np.clip(n_dot_l, 1e-4, None))
    g_vis = g * v_dot_h / np.maximum(n_dot_h * n_dot_v, 1e-5)
    g_vis = np.where(n_dot_l > 0.0, g_vis, 0.0)
    fc = (1.0 - v_dot_h) ** 5
    a = np.mean((1.0 - fc) * g_vis, axis=-1)
    b = np.mean(fc * g_vis, axis=-1)
    return np.stack([a, b], axis=-1)


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "shadowsplat")


@functools.lru_cache(maxsize=4)
def brdf_lut(size: int = LUT_SIZE, samples: int = LUT_SAMPLES) -> torch.Tensor:
    """
    The (size, size, 2) split-sum lookup, baked once and cached on disk.

    The cache directory is ``$SHADOWSPLAT_CACHE_DIR`` or
    ``~/.cache/shadowsplat``. A cache that cannot be read or written only
    costs a re-bake.
    """
    path = cache_dir() / f"brdf_lut_{size}x{size}_{samples}.npy"
    if path.exists():
        try:
            table = np.load(path)
            if table.shape == (size, size, 2) and np.isfinite(table).all():
                return torch.from_numpy(table.astype(np.float64))
            logger.warning(f"Ignoring malformed BRDF lookup cache: {path}")
        except (OSError, ValueError) as e:
            logger.warning(f"Could not read BRDF lookup cache {path}: {e}")
    logger.debug(f"Baking {size}x{size} BRDF lookup with {samples} samples")
    table = integrate_brdf(size, samples)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, table)
    except OSError as e:
        logger.warning(f"Could not write BRDF lookup cache {path}: {e}")
    return torch.from_numpy(table)


def lookup_brdf(n_dot_v: torch.Tensor, roughness: torch.Tensor,
                lut: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Bilinear (A, B) lookup over cell centers; inputs broadcast together."""
    table = brdf_lut() if lut is None else lut
    size = table.shape[0]
    x = (n_dot_v * size - 0.5).clamp(0.0, size - 1)
    y = (roughness * size - 0.5).clamp(0.0, size - 1)
    x, y = torch.broadcast_tensors(x, y)
    x0 = torch.floor(x.detach()).long().clamp(max=size - 2) if size > 1 else torch.zeros_like(x).long()
    y0 = torch.floor(y.detach()).long().clamp(max=size - 2) if size > 1 else torch.zeros_like(y).long()
    fx = (x - x0.to(DTYPE)).unsqueeze(-1)
    fy = (y - y0.to(DTYPE)).unsqueeze(-1)
    x1 = (x0 + 1).clamp(max=size - 1)
    y1 = (y0 + 1).clamp(max=size - 1)
    value = ((1 - fx) * (1 - fy) * table[x0, y0] + fx * (1 - fy) * table[x1, y0]
             + (1 - fx) * fy * table[x0, y1] + fx * fy * table[x1, y1])
    return value[..., 0], value[..., 1]
