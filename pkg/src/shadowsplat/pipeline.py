"""
Deferred shading of a Gaussian scene: G-buffer, visibility, light terms and
final composition in one call.

Training, ground-truth generation, ``render`` and ``relight`` all go
through :func:`render_shaded`, so an image rendered for a dataset and the
same view re-rendered later take the same code path.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import torch

from .environment import EnvironmentMap
from .errors import InvalidParameterError
from .geometry import AABB, Camera, GaussianScene, aabb_diagonal, as_tensor, normalize, scene_aabb
from .rasterizer import ALL_CHANNELS, GBuffer, RenderOutput, render_channels
from .shading import (DEFAULT_GAMMA, LightingModel, compose_final, indirect_shade,
                      sky_shade, sun_shade)
from .shadow import (DgsmConfig, ShadowMap, build_shadow_map, editable_visibility_buffer,
                     ray_traced_visibility_batch)

logger = logging.getLogger(__name__)

VISIBILITY_MODES = ("fixed", "editable", "raytraced")
SHADOW_RESOLUTION = 128
RAY_OFFSET_FRACTION = 0.01
RAY_TMIN_FRACTION = 0.02


@dataclass
class ShadedRender:
    """A shaded view and the intermediate buffers that produced it."""

    image: torch.Tensor
    render: RenderOutput
    gbuffer: GBuffer
    visibility: torch.Tensor
    sun: torch.Tensor
    sky: torch.Tensor
    indirect: torch.Tensor
    shadow_map: Optional[ShadowMap] = None

    @property
    def radiance(self) -> torch.Tensor:
        return self.sun + self.sky + self.indirect


def raytraced_visibility_buffer(scene: GaussianScene, gbuffer: GBuffer, camera: Camera,
                                direction: torch.Tensor, diagonal: float) -> torch.Tensor:
    """
    Per-pixel opacity product toward the sun.

    Rays start one hundredth of the scene diagonal off the surface along
    the shading normal and ignore Gaussians closer than two hundredths, so
    the receiving surface does not shadow itself.
    """
    depth = gbuffer.depth
    fg = gbuffer.foreground & torch.isfinite(depth.detach())
    points = camera.unproject(torch.where(fg, depth, torch.ones_like(depth)))
    origins = points + gbuffer.normal.detach() * (RAY_OFFSET_FRACTION * diagonal)
    vis = ray_traced_visibility_batch(scene, origins.reshape(-1, 3), normalize(as_tensor(direction)),
                                      t_min=RAY_TMIN_FRACTION * diagonal)
    return torch.where(fg, vis.reshape(depth.shape), torch.ones_like(depth))


def render_shaded(scene: GaussianScene, lighting: LightingModel, camera: Camera,
                  visibility: str = "editable", dgsm: Optional[DgsmConfig] = None,
                  threads: int = 1, shadow_map: Optional[ShadowMap] = None,
                  environment: Optional[EnvironmentMap] = None,
                  shadow_resolution: int = SHADOW_RESOLUTION, aabb: Optional[AABB] = None,
                  gamma: float = DEFAULT_GAMMA, record_blend: bool = False) -> ShadedRender:
    """
    Shade ``scene`` under ``lighting`` as seen by ``camera``.

    Args:
        scene: Gaussians with materials.
        lighting: Sun, environment, sky texture and indirect predictor.
        camera: Target view.
        visibility: ``fixed`` uses the blended per-Gaussian visibility,
                    ``editable`` a shadow map with sigmoid test, ``raytraced``
                    the opacity product along sun rays.
        dgsm: Sigmoid test parameters; defaults to the fully sharpened
              scene-scaled configuration.
        threads: Tile worker threads.
        shadow_map: Reuse a map built for this scene and sun.
        environment: Reuse a prefiltered environment.
        shadow_resolution: Texels per side of a freshly built map.
        aabb: Box framing the light camera; defaults to the scene box.
        gamma: Display encoding exponent.
        record_blend: Keep blend weights of the camera render.

    Returns:
        ShadedRender: Display image (H, W, 3) and its ingredients.

    Raises:
        InvalidParameterError: On an unknown visibility mode.
    """
    if visibility not in VISIBILITY_MODES:
        raise InvalidParameterError(f"unknown visibility mode: {visibility}")
    render = render_channels(scene, camera, ALL_CHANNELS, threads=threads,
                             record_blend=record_blend)
    gbuffer = render.gbuffer
    box = aabb if aabb is not None else scene_aabb(scene)
    sun = lighting.sun
    if visibility == "fixed":
        vis = gbuffer.fixed_visibility
    elif visibility == "editable":
        if dgsm is None:
            dgsm = DgsmConfig.for_scene(aabb_diagonal(box))
        if shadow_map is None:
            shadow_map = build_shadow_map(scene, sun, shadow_resolution, threads=threads, aabb=box)
        vis = editable_visibility_buffer(gbuffer, shadow_map, camera, dgsm)
    else:
        vis = raytraced_visibility_buffer(scene, gbuffer, camera, sun.direction,
                                          aabb_diagonal(box))
    env = environment if environment is not None else lighting.prefiltered()
    l_sun = sun_shade(gbuffer, sun, vis)
    l_sky = sky_shade(gbuffer, env)
    l_ind = indirect_shade(lighting.predictor, gbuffer, l_sun, l_sky)
    image = compose_final(l_sun, l_sky, l_ind, gbuffer.alpha, lighting.sky_texture, camera, gamma)
    return ShadedRender(image=image, render=render, gbuffer=gbuffer, visibility=vis,
                        sun=l_sun, sky=l_sky, indirect=l_ind, shadow_map=shadow_map)
