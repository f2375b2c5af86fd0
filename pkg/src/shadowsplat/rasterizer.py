"""
Tile-based alpha-blending rasterizer for Gaussian scenes.

Forward passes are parallel over 16x16 tiles with a thread pool; each tile
blends its depth-sorted draw list front to back and the tiles are stitched
back together in fixed row-major order. Reverse mode goes through torch
autograd, so any loss built on a :class:`RenderOutput` differentiates back
to every Gaussian parameter.
"""

import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import torch

from .errors import InvalidParameterError
from .geometry import (
    DTYPE,
    SCENE_FIELDS,
    Camera,
    GaussianScene,
    ProjectedGaussians,
    mahalanobis_2d,
    normalize,
    project_gaussians,
)

logger = logging.getLogger(__name__)

TILE_SIZE = 16
CUTOFF_SIGMA = 3.0
ALPHA_MAX = 0.99
TRANSMITTANCE_MIN = 1e-4
BACKGROUND_ALPHA = 1e-4
# Extra screen-space slack (pixels) when testing ellipse boxes against tiles.
FOOTPRINT_PAD = 1e-3

CHANNEL_WIDTHS: Dict[str, int] = {
    "color": 3,
    "albedo": 3,
    "roughness": 1,
    "metallic": 1,
    "ambient_occlusion": 1,
    "fixed_visibility": 1,
    "normal": 3,
    "depth": 1,
}
GBUFFER_CHANNELS = ("albedo", "roughness", "metallic", "ambient_occlusion",
                    "fixed_visibility", "normal", "depth")
ALL_CHANNELS = tuple(CHANNEL_WIDTHS)

# Channel name -> scene attribute that is blended for it.
_SOURCE = {
    "color": "base_colors",
    "albedo": "albedo",
    "roughness": "roughness",
    "metallic": "metallic",
    "ambient_occlusion": "ambient_occlusion",
    "fixed_visibility": "fixed_visibility",
}


@dataclass
class DrawList:
    """Per-tile Gaussian indices sorted front to back (ties by index)."""

    width: int
    height: int
    tiles_x: int
    tiles_y: int
    indices: List[torch.Tensor]
    depths: List[torch.Tensor]
    tile_size: int = TILE_SIZE

    @property
    def num_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def tile_bounds(self, tile: int) -> Tuple[int, int, int, int]:
        """(x0, x1, y0, y1) pixel bounds of ``tile``, end exclusive."""
        ty, tx = divmod(tile, self.tiles_x)
        x0, y0 = tx * self.tile_size, ty * self.tile_size
        return x0, min(x0 + self.tile_size, self.width), y0, min(y0 + self.tile_size, self.height)

    def entries(self, tile: int) -> List[Tuple[int, float]]:
        return list(zip(self.indices[tile].tolist(), self.depths[tile].tolist()))

    def is_empty(self) -> bool:
        return all(len(i) == 0 for i in self.indices)


@dataclass
class BlendRecord:
    """Blend weights of one tile, kept for the depth distortion loss."""

    pixels: torch.Tensor
    weights: torch.Tensor
    depths: torch.Tensor


@dataclass
class GBuffer:
    """Per-pixel geometry and material buffers for deferred shading."""

    normal: torch.Tensor
    albedo: torch.Tensor
    roughness: torch.Tensor
    metallic: torch.Tensor
    fixed_visibility: torch.Tensor
    depth: torch.Tensor
    alpha: torch.Tensor
    ambient_occlusion: torch.Tensor
    view_dirs: torch.Tensor
    camera: Camera

    @property
    def foreground(self) -> torch.Tensor:
        return self.alpha.detach() >= BACKGROUND_ALPHA

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.alpha.shape[0]), int(self.alpha.shape[1])


@dataclass
class RenderOutput:
    """Rendered channels plus the per-Gaussian screen data of one pass."""

    channels: Dict[str, torch.Tensor]
    alpha: torch.Tensor
    camera: Camera
    means2d: torch.Tensor
    radii: torch.Tensor
    visible: torch.Tensor
    draw_list: Optional[DrawList] = None
    records: List[BlendRecord] = field(default_factory=list)

    def __getitem__(self, name: str) -> torch.Tensor:
        if name == "alpha":
            return self.alpha
        return self.channels[name]

    @property
    def gbuffer(self) -> GBuffer:
        missing = [c for c in GBUFFER_CHANNELS if c not in self.channels]
        if missing:
            raise InvalidParameterError(f"render is missing G-buffer channels: {missing}")
        ch = self.channels
        return GBuffer(
            normal=ch["normal"],
            albedo=ch["albedo"],
            roughness=ch["roughness"],
            metallic=ch["metallic"],
            fixed_visibility=ch["fixed_visibility"],
            depth=ch["depth"],
            alpha=self.alpha,
            ambient_occlusion=ch["ambient_occlusion"],
            view_dirs=-self.camera.ray_directions(),
            camera=self.camera,
        )


# ---------------------------------------------------------------------------
# Draw lists
# ---------------------------------------------------------------------------

def _project(scene: GaussianScene, camera: Camera) -> ProjectedGaussians:
    if len(scene) == 0:
        empty = torch.zeros(0, dtype=DTYPE)
        return ProjectedGaussians(means2d=torch.zeros(0, 2, dtype=DTYPE),
                                  cov2d=torch.zeros(0, 2, 2, dtype=DTYPE), depths=empty,
                                  visible=torch.zeros(0, dtype=torch.bool))
    return project_gaussians(scene.positions, scene.covariances(), camera)


def _footprint(proj: ProjectedGaussians) -> Tuple[torch.Tensor, torch.Tensor]:
    cov = proj.cov2d.detach()
    rx = CUTOFF_SIGMA * cov[:, 0, 0].clamp_min(0).sqrt()
    ry = CUTOFF_SIGMA * cov[:, 1, 1].clamp_min(0).sqrt()
    return rx, ry


def _draw_list_from_projection(proj: ProjectedGaussians, camera: Camera) -> DrawList:
    width, height = camera.width, camera.height
    tiles_x = math.ceil(width / TILE_SIZE)
    tiles_y = math.ceil(height / TILE_SIZE)
    means = proj.means2d.detach()
    depths = proj.depths.detach()
    rx, ry = _footprint(proj)
    x0 = torch.arange(tiles_x, dtype=DTYPE) * TILE_SIZE
    x1 = torch.clamp(x0 + TILE_SIZE - 1, max=width - 1)
    y0 = torch.arange(tiles_y, dtype=DTYPE) * TILE_SIZE
    y1 = torch.clamp(y0 + TILE_SIZE - 1, max=height - 1)
    mx, my = means[:, 0:1], means[:, 1:2]
    pad_x, pad_y = rx.unsqueeze(1) + FOOTPRINT_PAD, ry.unsqueeze(1) + FOOTPRINT_PAD
    overlap_x = (mx + pad_x >= x0) & (mx - pad_x <= x1)
    overlap_y = (my + pad_y >= y0) & (my - pad_y <= y1)
    visible = proj.visible

    indices: List[torch.Tensor] = []
    tile_depths: List[torch.Tensor] = []
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            members = torch.nonzero(visible & overlap_x[:, tx] & overlap_y[:, ty]).flatten()
            if members.numel() == 0:
                indices.append(members)
                tile_depths.append(torch.zeros(0, dtype=DTYPE))
                continue
            # members are ascending, a stable sort keeps index order on ties
            order = torch.sort(depths[members], stable=True).indices
            indices.append(members[order])
            tile_depths.append(depths[members[order]])
    return DrawList(width=width, height=height, tiles_x=tiles_x, tiles_y=tiles_y,
                    indices=indices, depths=tile_depths)


def build_draw_list(scene: GaussianScene, camera: Camera) -> DrawList:
    """
    Cull, bin and depth-sort the scene's Gaussians into 16x16 tiles.

    A Gaussian lands in every tile its 3-sigma ellipse box overlaps; it is
    dropped when its mean lies outside ``near < z < far``.

    Args:
        scene: Gaussians to bin.
        camera: View to bin them for.

    Returns:
        DrawList: Per-tile index lists in (depth, index) order.

    Examples:
        >>> dl = build_draw_list(GaussianScene.empty(), camera)
        >>> dl.is_empty()
        True
    """
    with torch.no_grad():
        return _draw_list_from_projection(_project(scene, camera), camera)


# ---------------------------------------------------------------------------
# Blending
# ---------------------------------------------------------------------------

def blend_pixels(pixels: torch.Tensor, means: torch.Tensor, cov: torch.Tensor,
                 opacities: torch.Tensor, attrs: torch.Tensor
                 ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Front-to-back blend of K sorted Gaussians over P pixels.

    Returns the blended attributes (P, C), accumulated alpha (P,) and the
    per-contribution weights ``alpha_i * T_i`` (P, K).
    """
    d = pixels.unsqueeze(1) - means.unsqueeze(0)
    maha = mahalanobis_2d(d, cov.unsqueeze(0))
    inside = maha.detach() <= CUTOFF_SIGMA * CUTOFF_SIGMA
    g = torch.where(inside, torch.exp(-0.5 * maha), torch.zeros_like(maha))
    a = (opacities.unsqueeze(0) * g).clamp(max=ALPHA_MAX)
    transmit = torch.cumprod(1.0 - a, dim=1)
    before = torch.cat([torch.ones_like(transmit[:, :1]), transmit[:, :-1]], dim=1)
    keep = before.detach() >= TRANSMITTANCE_MIN
    weights = torch.where(keep, a * before, torch.zeros_like(a))
    return weights @ attrs, weights.sum(1), weights


def _attribute_matrix(scene: GaussianScene, camera: Camera, channels: Sequence[str],
                      depths: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, slice]]:
    columns: List[torch.Tensor] = []
    slices: Dict[str, slice] = {}
    offset = 0
    for name in channels:
        if name == "normal":
            n = scene.normals()
            toward = camera.view_directions(scene.positions.detach())
            flip = (n * toward).sum(-1, keepdim=True) < 0
            value = torch.where(flip, -n, n)
        elif name == "depth":
            value = depths.unsqueeze(-1)
        else:
            value = getattr(scene, _SOURCE[name])
            if value.dim() == 1:
                value = value.unsqueeze(-1)
        columns.append(value)
        width = CHANNEL_WIDTHS[name]
        slices[name] = slice(offset, offset + width)
        offset += width
    if not columns:
        return torch.zeros(len(scene), 0, dtype=DTYPE), slices
    return torch.cat(columns, dim=-1), slices


def _finish_channels(raw: torch.Tensor, alpha: torch.Tensor,
                     slices: Mapping[str, slice]) -> Dict[str, torch.Tensor]:
    fg = alpha.detach() >= BACKGROUND_ALPHA
    out: Dict[str, torch.Tensor] = {}
    for name, sl in slices.items():
        value = raw[..., sl]
        if name == "normal":
            value = torch.where(fg.unsqueeze(-1), normalize(value), torch.zeros_like(value))
        elif name == "depth":
            value = value.squeeze(-1)
            value = torch.where(fg, value / alpha.clamp_min(BACKGROUND_ALPHA),
                                torch.full_like(value, math.inf))
        else:
            value = torch.where(fg.unsqueeze(-1), value, torch.zeros_like(value))
            if CHANNEL_WIDTHS[name] == 1:
                value = value.squeeze(-1)
        out[name] = value
    return out


def _check_channels(channels: Optional[Iterable[str]]) -> Tuple[str, ...]:
    names = tuple(channels) if channels is not None else ALL_CHANNELS
    unknown = [c for c in names if c not in CHANNEL_WIDTHS]
    if unknown:
        raise InvalidParameterError(f"unknown render channels: {unknown}")
    return names


def render_channels(scene: GaussianScene, camera: Camera,
                    channels: Optional[Iterable[str]] = None, threads: int = 1,
                    record_blend: bool = False, draw_list: Optional[DrawList] = None
                    ) -> RenderOutput:
    """
    Alpha-blend per-Gaussian attributes into per-pixel buffers.

    Each pixel accumulates ``sum_i c_i * a_i * T_i`` over its tile's
    front-to-back list with ``a_i = min(opacity_i * g_i, 0.99)``, ``g_i`` the
    2D Gaussian weight inside the 3-sigma ellipse, and stops once the
    transmittance ``T`` falls below 1e-4. Pixels with accumulated alpha
    below 1e-4 are background: material channels read zero, normals zero
    and depth ``+inf``.

    Args:
        scene: Gaussians to render (read only).
        camera: Target view.
        channels: Subset of :data:`CHANNEL_WIDTHS`; defaults to all.
        threads: Worker threads over tiles. Results are stitched in fixed
                 tile order, so any thread count gives the same layout.
        record_blend: Keep per-tile blend weights for the distortion loss.
        draw_list: Reuse a draw list built for this scene and camera.

    Returns:
        RenderOutput: Channels (H, W[, C]), alpha (H, W), screen-space
        means (gradient retained when differentiable) and radii.

    Examples:
        >>> out = render_channels(scene, camera, ["color"])
        >>> out["color"].shape
        torch.Size([64, 64, 3])
    """
    names = _check_channels(channels)
    proj = _project(scene, camera)
    means2d = proj.means2d
    if means2d.requires_grad:
        means2d.retain_grad()
    if draw_list is None:
        with torch.no_grad():
            draw_list = _draw_list_from_projection(proj, camera)
    attrs, slices = _attribute_matrix(scene, camera, names, proj.depths)
    width_total = attrs.shape[-1]
    grid = camera.pixel_grid()
    grad_enabled = torch.is_grad_enabled()
    opacities = scene.opacities

    def blend_tile(tile: int) -> Tuple[torch.Tensor, torch.Tensor, Optional[BlendRecord]]:
        with torch.set_grad_enabled(grad_enabled):
            x0, x1, y0, y1 = draw_list.tile_bounds(tile)
            h, w = y1 - y0, x1 - x0
            idx = draw_list.indices[tile]
            if idx.numel() == 0:
                return (torch.zeros(h, w, width_total, dtype=DTYPE),
                        torch.zeros(h, w, dtype=DTYPE), None)
            pix = grid[y0:y1, x0:x1].reshape(-1, 2)
            values, alpha, weights = blend_pixels(pix, means2d[idx], proj.cov2d[idx],
                                                  opacities[idx], attrs[idx])
            record = None
            if record_blend:
                rows = torch.arange(y0, y1).unsqueeze(1) * camera.width
                flat = (rows + torch.arange(x0, x1).unsqueeze(0)).reshape(-1)
                record = BlendRecord(pixels=flat, weights=weights, depths=proj.depths[idx])
            return values.reshape(h, w, width_total), alpha.reshape(h, w), record

    tiles = range(draw_list.num_tiles)
    if threads > 1 and draw_list.num_tiles > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(blend_tile, tiles))
    else:
        results = [blend_tile(t) for t in tiles]

    rows_v, rows_a = [], []
    for ty in range(draw_list.tiles_y):
        row = results[ty * draw_list.tiles_x:(ty + 1) * draw_list.tiles_x]
        rows_v.append(torch.cat([r[0] for r in row], dim=1))
        rows_a.append(torch.cat([r[1] for r in row], dim=1))
    raw = torch.cat(rows_v, dim=0)
    alpha = torch.cat(rows_a, dim=0)
    rx, ry = _footprint(proj)
    radii = torch.where(proj.visible, torch.maximum(rx, ry), torch.zeros_like(rx))
    return RenderOutput(
        channels=_finish_channels(raw, alpha, slices),
        alpha=alpha,
        camera=camera,
        means2d=means2d,
        radii=radii,
        visible=proj.visible,
        draw_list=draw_list,
        records=[r[2] for r in results if r[2] is not None],
    )


def render_gbuffer(scene: GaussianScene, camera: Camera, threads: int = 1,
                   record_blend: bool = False) -> RenderOutput:
    """Render every channel; ``.gbuffer`` of the result feeds shading."""
    return render_channels(scene, camera, ALL_CHANNELS, threads=threads, record_blend=record_blend)


def render_reference(scene: GaussianScene, camera: Camera,
                     channels: Optional[Iterable[str]] = None) -> RenderOutput:
    """
    Tile-free brute-force blender used as a test oracle.

    Every visible Gaussian is blended at every pixel in global
    (depth, index) order; Gaussians outside a pixel's 3-sigma ellipse
    contribute a factor of exactly one to the transmittance.
    """
    names = _check_channels(channels)
    proj = _project(scene, camera)
    attrs, slices = _attribute_matrix(scene, camera, names, proj.depths)
    h, w = camera.height, camera.width
    idx = torch.nonzero(proj.visible).flatten()
    if idx.numel() == 0:
        raw = torch.zeros(h, w, attrs.shape[-1], dtype=DTYPE)
        alpha = torch.zeros(h, w, dtype=DTYPE)
    else:
        order = torch.sort(proj.depths.detach()[idx], stable=True).indices
        idx = idx[order]
        pix = camera.pixel_grid().reshape(-1, 2)
        values, alpha_flat, _ = blend_pixels(pix, proj.means2d[idx], proj.cov2d[idx],
                                             scene.opacities[idx], attrs[idx])
        raw = values.reshape(h, w, -1)
        alpha = alpha_flat.reshape(h, w)
    rx, ry = _footprint(proj)
    return RenderOutput(channels=_finish_channels(raw, alpha, slices), alpha=alpha,
                        camera=camera, means2d=proj.means2d,
                        radii=torch.where(proj.visible, torch.maximum(rx, ry), torch.zeros_like(rx)),
                        visible=proj.visible)


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------

def render_backward(scene: GaussianScene, camera: Camera, adjoints: Mapping[str, torch.Tensor],
                    threads: int = 1) -> Dict[str, torch.Tensor]:
    """
    Per-Gaussian gradients of ``sum(channel * adjoint)`` over all channels.

    The forward pass is recomputed on leaf copies of every scene attribute
    and differentiated with autograd. Non-finite channel values (background
    depth) contribute nothing.

    Args:
        scene: Scene to differentiate.
        camera: View rendered.
        adjoints: Per-pixel adjoint for each channel (``"alpha"`` allowed),
                  shaped exactly like the rendered channel.
        threads: Tile worker threads.

    Returns:
        Dict[str, torch.Tensor]: Gradient for every scene field, shaped like
        the field.

    Raises:
        InvalidParameterError: If an adjoint does not match its channel.
    """
    names = [n for n in adjoints if n != "alpha"]
    _check_channels(names)
    leaf_scene, leaves = scene.with_leaves(name for name, _ in SCENE_FIELDS)
    with torch.enable_grad():
        out = render_channels(leaf_scene, camera, names, threads=threads)
        total = torch.zeros((), dtype=DTYPE)
        for name, adjoint in adjoints.items():
            value = out[name]
            adjoint = torch.as_tensor(adjoint, dtype=DTYPE)
            if tuple(adjoint.shape) != tuple(value.shape):
                raise InvalidParameterError(
                    f"adjoint for {name} has shape {tuple(adjoint.shape)}, "
                    f"expected {tuple(value.shape)}")
            safe = torch.where(torch.isfinite(value), value, torch.zeros_like(value))
            total = total + (safe * adjoint).sum()
        if not total.requires_grad:
            return {name: torch.zeros_like(t) for name, t in leaves.items()}
        grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
    return {name: (g if g is not None else torch.zeros_like(leaves[name]))
            for name, g in zip(leaves, grads)}


# ---------------------------------------------------------------------------
# Depth-derived normals
# ---------------------------------------------------------------------------

def _difference(points: torch.Tensor, valid: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Derivative along dim 0: central inside, one-sided at both ends."""
    n = points.shape[0]
    if n < 2:
        return torch.zeros_like(points), torch.zeros_like(valid)
    first = points[1:2] - points[0:1]
    last = points[n - 1:n] - points[n - 2:n - 1]
    parts = [first]
    ok = [valid[1:2]]
    if n > 2:
        parts.append(0.5 * (points[2:] - points[:-2]))
        ok.append(valid[2:] & valid[:-2])
    parts.append(last)
    ok.append(valid[n - 2:n - 1])
    return torch.cat(parts, 0), torch.cat(ok, 0) & valid


def camera_space_points(depth: torch.Tensor, camera: Camera) -> torch.Tensor:
    """(H, W, 3) camera-space points of a depth map (non-finite depth read as 0)."""
    z = torch.where(torch.isfinite(depth), depth, torch.zeros_like(depth))
    grid = camera.pixel_grid()
    fx, fy = camera.focal
    x = (grid[..., 0] - camera.cx) / fx
    y = (grid[..., 1] - camera.cy) / fy
    if not camera.is_orthographic:
        x, y = x * z, y * z
    return torch.stack([x, y, z], -1)


def depth_to_normal(depth: torch.Tensor, camera: Camera) -> torch.Tensor:
    """
    Camera-space normals from the gradient of a depth map.

    Each pixel is unprojected; ``N_D = normalize(dP/dx x dP/dy)`` with
    central differences (one-sided on the border) and the sign chosen to
    face the camera. Pixels lacking a finite neighbor in either direction,
    or non-finite themselves, get a zero normal.

    Args:
        depth: (H, W) camera-space depth, ``+inf`` for background.
        camera: Camera the depth was rendered from.

    Returns:
        torch.Tensor: (H, W, 3) unit normals or zeros.
    """
    points = camera_space_points(depth, camera)
    valid = torch.isfinite(depth)
    dy, ok_y = _difference(points, valid)
    dx, ok_x = _difference(points.transpose(0, 1), valid.transpose(0, 1))
    dx, ok_x = dx.transpose(0, 1), ok_x.transpose(0, 1)
    n = normalize(torch.linalg.cross(dx, dy))
    if camera.is_orthographic:
        toward = torch.tensor([0.0, 0.0, -1.0], dtype=DTYPE).expand_as(points)
    else:
        toward = -points
    n = torch.where(((n * toward).sum(-1, keepdim=True) < 0), -n, n)
    ok = (ok_x & ok_y).unsqueeze(-1)
    return torch.where(ok, n, torch.zeros_like(n))


def normals_to_world(normals: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Rotate (..., 3) camera-space normals into world space."""
    return normals @ camera.rotation
