"""
Supervision providers.

Everything the decomposition stage learns from besides the photographs
comes through this module: per-view material, visibility, normal and mask
priors, the iterative material refinement protocol and novel-view samples
from jittered cameras. The synthetic providers derive all of it from a
ground-truth scene and corrupt it in a seeded, reproducible way.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError, InvalidParameterError, PriorProviderError
from .geometry import DTYPE, Camera, GaussianScene, aabb_diagonal, as_tensor, scene_aabb
from .images import read_pfm_tensor, read_png, write_pfm, write_png
from .pipeline import raytraced_visibility_buffer, render_shaded
from .rasterizer import render_channels
from .shading import LightingModel

logger = logging.getLogger(__name__)

MAX_NOISE_STEP = 1000
SKY_ALPHA = 0.5
SMOOTH_LABELS = (0, 1)
JITTER_TRANSLATION = 0.1
JITTER_ROLL = 90.0
JITTER_PITCH = (0.0, 30.0)
NOVEL_INTERVAL = 2000
NOVEL_WEIGHT = 0.2


# ---------------------------------------------------------------------------
# Prior records
# ---------------------------------------------------------------------------

@dataclass
class MaterialMaps:
    """Screen-space albedo (H, W, 3), metallic (H, W) and roughness (H, W)."""

    albedo: torch.Tensor
    metallic: torch.Tensor
    roughness: torch.Tensor

    def clamp(self) -> "MaterialMaps":
        return MaterialMaps(self.albedo.clamp(0.0, 1.0), self.metallic.clamp(0.0, 1.0),
                            self.roughness.clamp(0.0, 1.0))

    def distance(self, other: "MaterialMaps") -> float:
        """Summed mean absolute difference of the three maps."""
        return float((self.albedo - other.albedo).abs().mean()
                     + (self.metallic - other.metallic).abs().mean()
                     + (self.roughness - other.roughness).abs().mean())


@dataclass
class ViewPriors:
    """Supervision maps of one training view; any of them may be absent."""

    albedo: Optional[torch.Tensor] = None
    metallic: Optional[torch.Tensor] = None
    roughness: Optional[torch.Tensor] = None
    visibility: Optional[torch.Tensor] = None
    normal: Optional[torch.Tensor] = None
    sky_mask: Optional[torch.Tensor] = None
    smooth_mask: Optional[torch.Tensor] = None

    @property
    def materials(self) -> Optional[MaterialMaps]:
        if self.albedo is None or self.metallic is None or self.roughness is None:
            return None
        return MaterialMaps(self.albedo, self.metallic, self.roughness)

    def with_materials(self, maps: MaterialMaps) -> "ViewPriors":
        return replace(self, albedo=maps.albedo, metallic=maps.metallic, roughness=maps.roughness)


_PFM_MAPS = ("albedo", "metallic", "roughness", "visibility", "normal")
_PNG_MASKS = ("sky_mask", "smooth_mask")


@dataclass
class PriorBundle:
    """Per-view priors keyed by view index."""

    views: Dict[int, ViewPriors] = field(default_factory=dict)

    def __getitem__(self, view: int) -> ViewPriors:
        return self.views[view]

    def get(self, view: int) -> Optional[ViewPriors]:
        return self.views.get(view)

    def __len__(self) -> int:
        return len(self.views)

    def material_maps(self) -> Dict[int, MaterialMaps]:
        return {v: p.materials for v, p in self.views.items() if p.materials is not None}

    def with_materials(self, maps: Mapping[int, MaterialMaps]) -> "PriorBundle":
        views = dict(self.views)
        for v, m in maps.items():
            views[v] = views.get(v, ViewPriors()).with_materials(m)
        return PriorBundle(views)

    def save(self, root: Union[str, Path]) -> None:
        """Write ``view_XXXX/<map>.pfm`` and ``view_XXXX/<mask>.png`` files."""
        root = Path(root)
        for view, priors in sorted(self.views.items()):
            folder = root / f"view_{view:04d}"
            for name in _PFM_MAPS:
                value = getattr(priors, name)
                if value is not None:
                    write_pfm(folder / f"{name}.pfm", value)
            for name in _PNG_MASKS:
                value = getattr(priors, name)
                if value is not None:
                    write_png(folder / f"{name}.png", value.to(DTYPE))

    @classmethod
    def load(cls, root: Union[str, Path]) -> "PriorBundle":
        """
        Read a bundle written by :meth:`save`.

        Raises:
            InvalidInputError: If ``root`` is not a directory.
        """
        root = Path(root)
        if not root.is_dir():
            raise InvalidInputError(f"prior directory not found: {root}")
        views: Dict[int, ViewPriors] = {}
        for folder in sorted(root.glob("view_*")):
            try:
                view = int(folder.name.split("_", 1)[1])
            except ValueError:
                logger.warning(f"Skipping unrecognized prior folder: {folder}")
                continue
            values: Dict[str, torch.Tensor] = {}
            for name in _PFM_MAPS:
                path = folder / f"{name}.pfm"
                if path.exists():
                    values[name] = read_pfm_tensor(path)
            for name in _PNG_MASKS:
                path = folder / f"{name}.png"
                if path.exists():
                    values[name] = torch.from_numpy(read_png(path) > 0.5)
            views[view] = ViewPriors(**values)
        return cls(views)


# ---------------------------------------------------------------------------
# Screen-space ground truth
# ---------------------------------------------------------------------------

def render_material_maps(scene: GaussianScene, camera: Camera, threads: int = 1) -> MaterialMaps:
    """Rasterize the scene's albedo, metallic and roughness."""
    out = render_channels(scene, camera, ["albedo", "metallic", "roughness"], threads=threads)
    return MaterialMaps(out["albedo"], out["metallic"], out["roughness"])


def sky_mask(scene: GaussianScene, camera: Camera, threads: int = 1) -> torch.Tensor:
    """Pixels the scene leaves mostly transparent."""
    out = render_channels(scene, camera, [], threads=threads)
    return out.alpha.detach() < SKY_ALPHA


def smooth_mask(scene: GaussianScene, camera: Camera, threads: int = 1) -> torch.Tensor:
    """Pixels whose dominant semantic class is ground or building."""
    if len(scene) == 0:
        return torch.zeros(camera.height, camera.width, dtype=torch.bool)
    one_hot = F.one_hot(scene.labels.clamp(0, 2), 3).to(DTYPE)
    out = render_channels(scene.replace(base_colors=one_hot), camera, ["color"], threads=threads)
    label = out["color"].detach().argmax(-1)
    smooth = torch.zeros_like(label, dtype=torch.bool)
    for cls in SMOOTH_LABELS:
        smooth |= label == cls
    return smooth & (out.alpha.detach() >= SKY_ALPHA)


def visibility_prior(gt_scene: GaussianScene, camera: Camera, sun_direction,
                     threads: int = 1) -> torch.Tensor:
    """
    Binary sun visibility ``V'`` of the visible surface.

    The ray-traced opacity product toward the sun, thresholded at 0.5.
    Background pixels read 1.
    """
    with torch.no_grad():
        gbuffer = render_channels(gt_scene, camera, threads=threads).gbuffer
        vis = raytraced_visibility_buffer(gt_scene, gbuffer, camera, as_tensor(sun_direction),
                                          aabb_diagonal(scene_aabb(gt_scene)))
    return (vis >= 0.5).to(DTYPE)


def ground_truth_priors(gt_scene: GaussianScene, lighting: LightingModel,
                        cameras: Sequence[Camera], threads: int = 1) -> PriorBundle:
    """Exact priors for every camera (materials, normals, visibility, masks)."""
    views = {}
    with torch.no_grad():
        for i, camera in enumerate(cameras):
            out = render_channels(gt_scene, camera, ["albedo", "metallic", "roughness", "normal"],
                                  threads=threads)
            views[i] = ViewPriors(
                albedo=out["albedo"], metallic=out["metallic"], roughness=out["roughness"],
                visibility=visibility_prior(gt_scene, camera, lighting.sun_direction, threads),
                normal=out["normal"],
                sky_mask=out.alpha < SKY_ALPHA,
                smooth_mask=smooth_mask(gt_scene, camera, threads),
            )
    return PriorBundle(views)


# ---------------------------------------------------------------------------
# Material prior providers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionConfig:
    """
    Error model of the synthetic provider.

    ``bias`` is the amplitude of a smooth random field varying over
    ``blur_radius`` pixels, ``noise`` the standard deviation of white noise.
    """

    bias: float = 0.0
    blur_radius: float = 4.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.bias < 0 or self.noise < 0 or self.blur_radius <= 0:
            raise InvalidParameterError("corruption amplitudes must be >= 0 and radius > 0")


class MaterialPriorProvider(ABC):
    """Predicts material maps of a view from its photograph and a condition."""

    @abstractmethod
    def refine(self, view: int, image: torch.Tensor, condition: Optional[MaterialMaps],
               noise_step: int) -> MaterialMaps:
        """
        Material maps for ``view``.

        ``condition`` is the current screen-space estimate, or ``None`` for
        the unconditioned first prediction. ``noise_step`` in [0, 1000]
        sets how much of the condition is discarded.
        """


def noise_weight(noise_step: int) -> float:
    """Share of the fresh prediction, ``t / 1000`` clamped to [0, 1]."""
    return min(max(noise_step / MAX_NOISE_STEP, 0.0), 1.0)


class SyntheticPriorProvider(MaterialPriorProvider):
    """
    Ground truth plus seeded, spatially correlated errors.

    ``refine`` returns ``β (GT + error) + (1 - β) condition`` with
    ``β = t / 1000``, clamped to [0, 1]. Each call draws a fresh error from
    ``(seed, view, call count)``, so a new provider with the same seed
    reproduces the same sequence.
    """

    def __init__(self, ground_truth: Mapping[int, MaterialMaps],
                 corruption: Optional[CorruptionConfig] = None):
        self.ground_truth = dict(ground_truth)
        self.corruption = corruption or CorruptionConfig()
        self._calls: Dict[int, int] = {}

    def _smooth_field(self, rng: np.random.Generator, shape: Tuple[int, ...]) -> torch.Tensor:
        h, w = shape[0], shape[1]
        channels = shape[2] if len(shape) == 3 else 1
        radius = self.corruption.blur_radius
        gh, gw = int(math.ceil(h / radius)) + 1, int(math.ceil(w / radius)) + 1
        coarse = torch.from_numpy(rng.uniform(-1.0, 1.0, size=(1, channels, gh, gw)))
        fine = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=True)[0]
        fine = fine.permute(1, 2, 0)
        return fine if len(shape) == 3 else fine[..., 0]

    def _error(self, rng: np.random.Generator, like: torch.Tensor) -> torch.Tensor:
        c = self.corruption
        shape = tuple(like.shape)
        error = torch.zeros_like(like)
        if c.bias > 0:
            error = error + c.bias * self._smooth_field(rng, shape)
        if c.noise > 0:
            error = error + torch.from_numpy(rng.normal(0.0, c.noise, size=shape))
        return error

    def refine(self, view: int, image: torch.Tensor, condition: Optional[MaterialMaps],
               noise_step: int) -> MaterialMaps:
        if view not in self.ground_truth:
            raise PriorProviderError(f"no ground-truth materials for view {view}")
        gt = self.ground_truth[view]
        count = self._calls.get(view, 0)
        self._calls[view] = count + 1
        rng = np.random.default_rng([self.corruption.seed, view, count])
        if condition is None:
            condition = MaterialMaps(
                torch.from_numpy(rng.uniform(0.0, 1.0, size=tuple(gt.albedo.shape))),
                torch.from_numpy(rng.uniform(0.0, 1.0, size=tuple(gt.metallic.shape))),
                torch.from_numpy(rng.uniform(0.0, 1.0, size=tuple(gt.roughness.shape))),
            )
        beta = noise_weight(noise_step)

        def blend(truth: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
            noisy = truth + self._error(rng, truth)
            return beta * noisy + (1.0 - beta) * cond.detach().to(DTYPE)

        return MaterialMaps(blend(gt.albedo, condition.albedo),
                            blend(gt.metallic, condition.metallic),
                            blend(gt.roughness, condition.roughness)).clamp()


def synthetic_prior_provider(ground_truth: Mapping[int, MaterialMaps],
                             corruption: Optional[CorruptionConfig] = None
                             ) -> SyntheticPriorProvider:
    return SyntheticPriorProvider(ground_truth, corruption)


# ---------------------------------------------------------------------------
# Iterative refinement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefinementSchedule:
    """``cycles`` refreshes, one every ``period`` steps, at ``noise_step``."""

    cycles: int = 3
    period: int = 500
    noise_step: int = 600
    initial_noise_step: int = 1000

    def __post_init__(self) -> None:
        if self.cycles < 0 or self.period <= 0:
            raise InvalidParameterError("refinement needs cycles >= 0 and period > 0")
        if not (0 <= self.noise_step <= MAX_NOISE_STEP
                and 0 <= self.initial_noise_step <= MAX_NOISE_STEP):
            raise InvalidParameterError("noise steps must lie in [0, 1000]")

    def refresh_steps(self) -> List[int]:
        return [self.period * (n + 1) for n in range(self.cycles)]


class MaterialRefinement:
    """
    Drives the material priors through their refresh cycles.

    The stage-2 trainer calls :meth:`initial` once, then :meth:`refresh`
    whenever :meth:`due` says so. ``history`` records one entry per
    refresh with the mean absolute change of the priors.
    """

    def __init__(self, provider: MaterialPriorProvider, schedule: RefinementSchedule):
        self.provider = provider
        self.schedule = schedule
        self.refreshes = 0
        self.history: List[Dict[str, float]] = []
        self.current: Dict[int, MaterialMaps] = {}

    def due(self, step: int) -> bool:
        return (step > 0 and step % self.schedule.period == 0
                and self.refreshes < self.schedule.cycles)

    def _predict(self, images: Mapping[int, torch.Tensor],
                 conditions: Mapping[int, Optional[MaterialMaps]],
                 noise_step: int) -> Dict[int, MaterialMaps]:
        maps = {}
        for view, image in images.items():
            try:
                maps[view] = self.provider.refine(view, image, conditions.get(view), noise_step)
            except PriorProviderError:
                raise
            except Exception as e:
                raise PriorProviderError(f"material prior failed on view {view}: {e}") from e
        return maps

    def initial(self, images: Mapping[int, torch.Tensor]) -> Dict[int, MaterialMaps]:
        """Unconditioned first prediction for every view."""
        self.current = self._predict(images, {}, self.schedule.initial_noise_step)
        logger.info(f"Initial material priors for {len(self.current)} views")
        return self.current

    def refresh(self, step: int, images: Mapping[int, torch.Tensor],
                rendered: Mapping[int, MaterialMaps]) -> Dict[int, MaterialMaps]:
        """New priors conditioned on the current rasterized materials."""
        maps = self._predict(images, rendered, self.schedule.noise_step)
        change = float(np.mean([maps[v].distance(self.current[v]) for v in maps
                                if v in self.current])) if self.current else float("nan")
        self.refreshes += 1
        self.history.append({"step": step, "cycle": self.refreshes, "change": change})
        logger.info(f"Refreshed material priors at step {step} "
                    f"(cycle {self.refreshes}/{self.schedule.cycles}, change {change:.4f})")
        self.current = maps
        return maps


def iterative_material_refinement(provider: MaterialPriorProvider,
                                  images: Mapping[int, torch.Tensor],
                                  render_maps: Callable[[int], MaterialMaps],
                                  optimize: Callable[[Dict[int, MaterialMaps], int], None],
                                  schedule: RefinementSchedule) -> List[Dict[int, MaterialMaps]]:
    """
    Run the refresh protocol with an external optimization callback.

    Each cycle optimizes for ``period`` steps under the current priors, then
    rasterizes the materials of every view and asks the provider for new
    priors conditioned on them.

    Returns:
        List of prior sets, the initial prediction first.
    """
    refinement = MaterialRefinement(provider, schedule)
    sequence = [refinement.initial(images)]
    step = 0
    for _ in range(schedule.cycles):
        optimize(refinement.current, schedule.period)
        step += schedule.period
        rendered = {view: render_maps(view) for view in images}
        sequence.append(refinement.refresh(step, images, rendered))
    return sequence


# ---------------------------------------------------------------------------
# Novel views
# ---------------------------------------------------------------------------

def _axis_rotation(axis: int, degrees: float) -> torch.Tensor:
    c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
    if axis == 0:
        rows = [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]]
    else:
        rows = [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]
    return torch.tensor(rows, dtype=DTYPE)


def camera_jitter(camera: Camera, rng: Any, translation: float = JITTER_TRANSLATION,
                  roll: float = JITTER_ROLL,
                  pitch: Tuple[float, float] = JITTER_PITCH) -> Camera:
    """
    Perturbed copy of ``camera`` with the same intrinsics.

    The center moves up to ``translation`` along the camera's right and
    forward axes, the view rolls within ±``roll`` degrees and tilts upward
    by ``pitch`` degrees.

    Args:
        camera: Source camera.
        rng: Anything with ``uniform(low, high)``, e.g. ``numpy.random.Generator``.
    """
    right = float(rng.uniform(-translation, translation))
    forward = float(rng.uniform(-translation, translation))
    roll_deg = float(rng.uniform(-roll, roll))
    pitch_deg = float(rng.uniform(pitch[0], pitch[1]))
    r = camera.rotation
    center = camera.center + right * r[0] + forward * r[2]
    rotation = _axis_rotation(0, pitch_deg) @ _axis_rotation(2, roll_deg) @ r
    return camera.with_pose(rotation, -rotation @ center)


class InpaintOracle(ABC):
    """Repairs a novel-view render using a reference training image."""

    @abstractmethod
    def complete(self, rendered: torch.Tensor, reference: torch.Tensor,
                 camera: Camera) -> torch.Tensor:
        ...


class IdentityInpaintOracle(InpaintOracle):
    """Returns the render unchanged."""

    def complete(self, rendered: torch.Tensor, reference: torch.Tensor,
                 camera: Camera) -> torch.Tensor:
        return rendered


class GroundTruthInpaintOracle(InpaintOracle):
    """Replaces the render with the ground-truth scene seen from the same camera."""

    def __init__(self, gt_scene: GaussianScene, lighting: LightingModel, threads: int = 1,
                 visibility: str = "editable"):
        self.gt_scene = gt_scene
        self.lighting = lighting
        self.threads = threads
        self.visibility = visibility

    def complete(self, rendered: torch.Tensor, reference: torch.Tensor,
                 camera: Camera) -> torch.Tensor:
        with torch.no_grad():
            return render_shaded(self.gt_scene, self.lighting, camera, self.visibility,
                                 threads=self.threads).image


class AlphaSkySegmenter:
    """Sky mask from the coverage of a reference scene."""

    def __init__(self, scene: GaussianScene, threads: int = 1):
        self.scene = scene
        self.threads = threads

    def __call__(self, camera: Camera) -> torch.Tensor:
        with torch.no_grad():
            return sky_mask(self.scene, camera, self.threads)


@dataclass
class NovelSample:
    """A pseudo ground-truth image for a jittered camera."""

    image: torch.Tensor
    camera: Camera
    source_view: int
    sky_mask: Optional[torch.Tensor] = None
    weight: float = NOVEL_WEIGHT


def novel_view_supervision(scene: GaussianScene, lighting: LightingModel, camera: Camera,
                           reference: torch.Tensor, oracle: InpaintOracle,
                           segmenter: Optional[Callable[[Camera], torch.Tensor]],
                           rng: Any, source_view: int = 0, threads: int = 1,
                           visibility: str = "fixed") -> Optional[NovelSample]:
    """
    Render a jittered view, repair it and mask its sky.

    Returns ``None`` (after logging) when the oracle fails or returns an
    image of the wrong size.
    """
    jittered = camera_jitter(camera, rng)
    with torch.no_grad():
        rendered = render_shaded(scene, lighting, jittered, visibility, threads=threads).image
        try:
            image = oracle.complete(rendered, reference, jittered)
        except Exception as e:
            logger.warning(f"Inpaint oracle failed for view {source_view}: {e}")
            return None
        if tuple(image.shape) != tuple(rendered.shape):
            logger.warning(f"Inpaint oracle returned {tuple(image.shape)} for view "
                           f"{source_view}, expected {tuple(rendered.shape)}")
            return None
        mask = segmenter(jittered) if segmenter is not None else None
    return NovelSample(image=image.detach(), camera=jittered, source_view=source_view,
                       sky_mask=mask)


class NovelViewSet:
    """Novel-view samples, one per training camera, regenerated on an interval."""

    def __init__(self, oracle: InpaintOracle,
                 segmenter: Optional[Callable[[Camera], torch.Tensor]] = None,
                 interval: int = NOVEL_INTERVAL, seed: int = 0):
        if interval <= 0:
            raise InvalidParameterError("novel-view interval must be positive")
        self.oracle = oracle
        self.segmenter = segmenter
        self.interval = interval
        self.rng = np.random.default_rng(seed)
        self.samples: List[NovelSample] = []
        self.generation = 0

    def due(self, step: int) -> bool:
        return not self.samples or step % self.interval == 0

    def regenerate(self, scene: GaussianScene, lighting: LightingModel,
                   cameras: Sequence[Camera], images: Sequence[torch.Tensor],
                   threads: int = 1, visibility: str = "fixed") -> List[NovelSample]:
        samples = []
        for i, (camera, image) in enumerate(zip(cameras, images)):
            sample = novel_view_supervision(scene, lighting, camera, image, self.oracle,
                                            self.segmenter, self.rng, i, threads, visibility)
            if sample is not None:
                samples.append(sample)
        self.samples = samples
        self.generation += 1
        logger.info(f"Generated {len(samples)} novel-view samples (set {self.generation})")
        return samples

    def pick(self, step: int) -> Optional[NovelSample]:
        if not self.samples:
            return None
        return self.samples[step % len(self.samples)]
