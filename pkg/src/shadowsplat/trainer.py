"""
Two-stage training.

Stage 1 fits geometry and base colors to the photographs. Stage 2 fits
materials, visibility and lighting through the deferred shading pipeline,
with periodically refreshed material priors, novel-view supervision and a
depth distortion regularizer seen from aerial cameras.
"""

import logging
import pickle
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from tqdm import tqdm

from .config import TrainConfig
from .errors import InvalidInputError, NumericalFailureError, PriorProviderError
from .geometry import DTYPE, SCENE_FIELDS, Camera, GaussianScene, aabb_diagonal, scene_aabb
from .losses import (LossBreakdown, LossBuffers, LossTrace, aerial_cameras, distortion_regularizer,
                     loss_color, total_stage1, total_stage2)
from .optimizer import (GEOMETRY_GROUPS, STAGE1_GROUPS, STAGE2_GROUPS, DensifyStats,
                        SceneOptimizer, densify_and_prune, densify_due)
from .pipeline import render_shaded
from .priors import (AlphaSkySegmenter, GroundTruthInpaintOracle, IdentityInpaintOracle,
                     MaterialPriorProvider, MaterialRefinement, NovelViewSet, PriorBundle,
                     ViewPriors, render_material_maps)
from .rasterizer import render_channels
from .shading import (LightingModel, LocalLinearPredictor, ZeroIndirectPredictor,
                      predictor_from_dict)
from .shadow import build_shadow_map, editable_visibility_buffer

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class TrainingView:
    """A training camera, its photograph and its dataset index."""

    index: int
    camera: Camera
    image: torch.Tensor


@dataclass
class StageResult:
    scene: GaussianScene
    lighting: Optional[LightingModel]
    steps: int
    trace: List[Dict[str, Any]] = field(default_factory=list)
    densify_events: List[Dict[str, int]] = field(default_factory=list)
    refinement_history: List[Dict[str, float]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: int
    step: int
    scene: GaussianScene
    lighting: Optional[LightingModel]
    optimizer_state: Optional[dict] = None


def _scene_state(scene: GaussianScene) -> Dict[str, Any]:
    state: Dict[str, Any] = {name: t.detach().clone() for name, t in scene.tensors().items()}
    state["labels"] = scene.labels.clone()
    state["aabb"] = None if scene.aabb is None else [t.clone() for t in scene.aabb]
    return state


def _lighting_state(lighting: Optional[LightingModel]) -> Optional[Dict[str, Any]]:
    if lighting is None:
        return None
    return {
        "sun_direction": lighting.sun_direction.clone(),
        "sun_intensity": lighting.sun_intensity.detach().clone(),
        "environment": lighting.environment.detach().clone(),
        "sky_texture": lighting.sky_texture.detach().clone(),
        "env_levels": lighting.env_levels,
        "predictor": lighting.predictor.to_dict(),
    }


def save_checkpoint(path: PathLike, stage: int, step: int, scene: GaussianScene,
                    lighting: Optional[LightingModel],
                    optimizer: Optional[SceneOptimizer] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "stage": stage,
        "step": step,
        "scene": _scene_state(scene),
        "lighting": _lighting_state(lighting),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }, path)
    logger.info(f"Checkpoint written: {path}")
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        InvalidInputError: If the file is missing or not a checkpoint.
    """
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"checkpoint not found: {path}")
    try:
        data = torch.load(path, weights_only=False)
        s = data["scene"]
        aabb = None if s["aabb"] is None else (s["aabb"][0], s["aabb"][1])
        scene = GaussianScene(**{name: s[name] for name, _ in SCENE_FIELDS},
                              labels=s["labels"], aabb=aabb)
        light = data["lighting"]
        lighting = None
        if light is not None:
            lighting = LightingModel(sun_direction=light["sun_direction"],
                                     sun_intensity=light["sun_intensity"],
                                     environment=light["environment"],
                                     sky_texture=light["sky_texture"],
                                     predictor=predictor_from_dict(light["predictor"]),
                                     env_levels=light["env_levels"])
        return Checkpoint(stage=int(data["stage"]), step=int(data["step"]), scene=scene,
                          lighting=lighting, optimizer_state=data.get("optimizer"))
    except (KeyError, TypeError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise InvalidInputError(f"{path} is not a valid checkpoint: {e}")


def checkpoint_path(out_dir: PathLike, stage: int, step: int) -> Path:
    return Path(out_dir) / f"stage{stage}" / f"checkpoint_{step}.pt"


# ---------------------------------------------------------------------------
# Shared loop pieces
# ---------------------------------------------------------------------------

def _check_finite(breakdown: LossBreakdown, stage: int, step: int, scene: GaussianScene,
                  lighting: Optional[LightingModel], optimizer: SceneOptimizer,
                  out_dir: Optional[PathLike]) -> None:
    if bool(torch.isfinite(breakdown.total.detach())):
        return
    saved = None
    if out_dir is not None:
        saved = str(save_checkpoint(Path(out_dir) / f"stage{stage}" / f"diverged_{step}.pt",
                                    stage, step, scene, lighting, optimizer))
    bad = [k for k, v in breakdown.terms.items() if not bool(torch.isfinite(v.detach()))]
    raise NumericalFailureError(f"stage {stage} loss is not finite at step {step} "
                                f"(terms: {', '.join(bad) or 'total'})", checkpoint=saved)


def _view_order(rng: np.random.Generator, count: int, steps: int) -> List[int]:
    order: List[int] = []
    while len(order) < steps:
        order.extend(int(i) for i in rng.permutation(count))
    return order[:steps]


def _progress(steps: int, start: int, desc: str) -> tqdm:
    return tqdm(total=steps, initial=start, desc=desc, disable=sys.stdout is None)


def _priors_for(priors: Optional[PriorBundle], view: TrainingView) -> Optional[ViewPriors]:
    return priors.get(view.index) if priors is not None else None


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def train_stage1(scene: GaussianScene, views: Sequence[TrainingView], cfg: TrainConfig,
                 priors: Optional[PriorBundle] = None, out_dir: Optional[PathLike] = None,
                 trace: Optional[LossTrace] = None,
                 resume: Optional[Checkpoint] = None) -> StageResult:
    """
    Fit geometry and base colors to the training photographs.

    Each step renders one view's colors, normals and depth, applies the
    stage-1 objective and updates positions, rotations, scales, opacities
    and base colors. Densification runs at positive multiples of
    ``cfg.densify.interval`` up to ``cfg.densify.stop``.

    Args:
        scene: Initial Gaussians; not modified.
        views: Training views.
        cfg: Run configuration.
        priors: Optional normal priors and sky/smooth masks per view index.
        out_dir: Directory for checkpoints, or ``None`` for none.
        trace: Loss log receiving one record per step.
        resume: Continue from this stage-1 checkpoint.

    Returns:
        StageResult: The optimized scene and the run's records.

    Raises:
        InvalidInputError: Without training views.
        NumericalFailureError: If the loss stops being finite.
    """
    if not views:
        raise InvalidInputError("stage 1 needs at least one training view")
    trace = trace if trace is not None else LossTrace(None)
    start = 0
    if resume is not None:
        scene, start = resume.scene, resume.step
    work = scene.clone()
    box = scene_aabb(work)
    diagonal = aabb_diagonal(box)
    optimizer = SceneOptimizer(work, None, cfg.lr, STAGE1_GROUPS, total_steps=cfg.stage1_steps)
    if resume is not None and resume.optimizer_state is not None:
        optimizer.load_state_dict(resume.optimizer_state)
    stats = DensifyStats(len(work))
    generator = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    order = _view_order(rng, len(views), cfg.stage1_steps)
    result = StageResult(scene=work, lighting=None, steps=cfg.stage1_steps, trace=trace.records)

    with _progress(cfg.stage1_steps, start, "Stage 1") as pbar:
        for step in range(start + 1, cfg.stage1_steps + 1):
            view = views[order[step - 1]]
            camera = view.camera
            out = render_channels(optimizer.scene, camera, ["color", "normal", "depth"],
                                  threads=cfg.threads)
            background = torch.from_numpy(rng.uniform(0.0, 1.0, size=3))
            buffers = LossBuffers(color=out["color"], alpha=out.alpha, normal=out["normal"],
                                  depth=out["depth"], camera=camera, target=view.image,
                                  background=background)
            breakdown = total_stage1(buffers, _priors_for(priors, view), cfg.weights)
            _check_finite(breakdown, 1, step, optimizer.scene, None, optimizer, out_dir)
            breakdown.total.backward()
            stats.add(out.means2d, out.visible, out.radii)
            optimizer.step(step)
            optimizer.zero_grad()
            if densify_due(step, cfg.densify):
                event = densify_and_prune(optimizer, stats, cfg.densify, diagonal,
                                          max(camera.width, camera.height), generator)
                result.densify_events.append({"stage": 1, "step": step, **event})
            record = trace.append(step, 1, breakdown)
            if out_dir is not None and step % cfg.checkpoint_interval == 0:
                result.checkpoints.append(save_checkpoint(
                    checkpoint_path(out_dir, 1, step), 1, step, optimizer.scene, None, optimizer))
            pbar.set_postfix(loss=f"{record['total']:.4f}", n=len(optimizer.scene))
            pbar.update(1)

    result.scene = optimizer.scene
    logger.info(f"Stage 1 finished with {len(result.scene)} Gaussians")
    return result


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def make_novel_views(cfg: TrainConfig, gt_scene: Optional[GaussianScene],
                     gt_lighting: Optional[LightingModel]) -> Optional[NovelViewSet]:
    """Novel-view supervision per the config, or ``None`` when disabled."""
    if not cfg.novel.enabled:
        return None
    if cfg.novel.oracle == "ground_truth":
        if gt_scene is None or gt_lighting is None:
            logger.warning("Novel views need a ground-truth scene; using the identity oracle")
            oracle: Any = IdentityInpaintOracle()
        else:
            oracle = GroundTruthInpaintOracle(gt_scene, gt_lighting, cfg.threads)
    else:
        oracle = IdentityInpaintOracle()
    segmenter = AlphaSkySegmenter(gt_scene, cfg.threads) if gt_scene is not None else None
    return NovelViewSet(oracle, segmenter, cfg.novel.interval, cfg.seed)


def _prepare_predictor(lighting: LightingModel, cfg: TrainConfig) -> None:
    if isinstance(lighting.predictor, ZeroIndirectPredictor) and cfg.predictor == "local_linear":
        lighting.predictor = LocalLinearPredictor(cfg.predictor_kernel)


def train_stage2(scene: GaussianScene, lighting: LightingModel, views: Sequence[TrainingView],
                 priors: Optional[PriorBundle], cfg: TrainConfig,
                 provider: Optional[MaterialPriorProvider] = None,
                 novel: Optional[NovelViewSet] = None, out_dir: Optional[PathLike] = None,
                 trace: Optional[LossTrace] = None,
                 resume: Optional[Checkpoint] = None) -> StageResult:
    """
    Fit materials, visibility and lighting through the shading pipeline.

    The sun direction never changes. Groups named in ``cfg.frozen`` stay
    fixed; positions stop moving after ``cfg.freeze_positions_after``
    steps. When geometry moves, the shadow map is rebuilt every step and
    its light-camera gradients drive densification; when it is frozen the
    map is built once.

    Args:
        scene: Stage-1 Gaussians; not modified.
        lighting: Initial lighting; not modified.
        views: Training views.
        priors: Normal, visibility and mask priors per view index; material
                priors too unless ``provider`` replaces them.
        cfg: Run configuration.
        provider: Material prior provider refreshed on ``cfg.refinement``.
        novel: Novel-view supervision, regenerated on its interval.
        out_dir: Directory for checkpoints, or ``None`` for none.
        trace: Loss log receiving one record per step.
        resume: Continue from this stage-2 checkpoint.

    Returns:
        StageResult: Optimized scene, lighting and the run's records.

    Raises:
        InvalidInputError: Without training views.
        NumericalFailureError: If the loss stops being finite.
        PriorProviderError: If the provider fails; a checkpoint is written first.
    """
    if not views:
        raise InvalidInputError("stage 2 needs at least one training view")
    trace = trace if trace is not None else LossTrace(None)
    start = 0
    if resume is not None:
        scene, start = resume.scene, resume.step
        lighting = resume.lighting if resume.lighting is not None else lighting
    work = scene.clone()
    light = lighting.clone()
    _prepare_predictor(light, cfg)
    box = scene.aabb if scene.aabb is not None else scene_aabb(work)
    diagonal = aabb_diagonal(box)
    groups = [g for g in STAGE2_GROUPS if g not in cfg.frozen]
    optimizer = SceneOptimizer(work, light, cfg.lr, groups, total_steps=cfg.stage2_steps,
                               freeze_positions_after=cfg.freeze_positions_after)
    if resume is not None and resume.optimizer_state is not None:
        optimizer.load_state_dict(resume.optimizer_state)
    geometry_frozen = all(g in cfg.frozen for g in GEOMETRY_GROUPS)
    environment_frozen = "environment" in cfg.frozen
    stats = DensifyStats(len(work))
    generator = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    order = _view_order(rng, len(views), cfg.stage2_steps)
    aerial = (aerial_cameras(box, cfg.aerial.count, rng, cfg.aerial.resolution)
              if cfg.weights.distortion > 0 and cfg.aerial.count > 0 else [])
    result = StageResult(scene=work, lighting=light, steps=cfg.stage2_steps, trace=trace.records)

    current = priors if priors is not None else PriorBundle()
    refinement = None
    if provider is not None:
        refinement = MaterialRefinement(provider, cfg.refinement)
        images = {v.index: v.image for v in views}
        current = current.with_materials(_guard(lambda: refinement.initial(images), 0,
                                                optimizer, out_dir))

    cached_map = None
    cached_env = light.prefiltered() if environment_frozen else None

    with _progress(cfg.stage2_steps, start, "Stage 2") as pbar:
        for step in range(start + 1, cfg.stage2_steps + 1):
            view = views[order[step - 1]]
            camera = view.camera
            dgsm = cfg.dgsm.at(diagonal, step)
            if refinement is not None and refinement.due(step):
                rendered = {v.index: _material_maps(optimizer.scene, v.camera, cfg.threads)
                            for v in views}
                maps = _guard(lambda: refinement.refresh(step, images, rendered), step,
                              optimizer, out_dir)
                current = current.with_materials(maps)
            if novel is not None and novel.due(step):
                novel.regenerate(optimizer.scene, light, [v.camera for v in views],
                                 [v.image for v in views], cfg.threads, cfg.visibility)

            shadow_map = cached_map
            if shadow_map is None:
                shadow_map = build_shadow_map(optimizer.scene, light.sun,
                                              cfg.dgsm.shadow_resolution, cfg.threads, box)
                if geometry_frozen:
                    cached_map = shadow_map
            env = cached_env if cached_env is not None else light.prefiltered()
            shaded = render_shaded(optimizer.scene, light, camera, cfg.visibility, dgsm,
                                   cfg.threads, shadow_map, env, aabb=box)
            render, gbuffer = shaded.render, shaded.gbuffer
            editable = (shaded.visibility if cfg.visibility == "editable"
                        else editable_visibility_buffer(gbuffer, shadow_map, camera, dgsm))
            distortion = (distortion_regularizer(optimizer.scene, [aerial[step % len(aerial)]],
                                                 cfg.threads) if aerial else None)
            novel_term = _novel_term(novel, step, optimizer.scene, light, cfg, dgsm, env, box)
            buffers = LossBuffers(
                color=render["color"], alpha=render.alpha, normal=render["normal"],
                depth=render["depth"], camera=camera, target=view.image,
                background=torch.from_numpy(rng.uniform(0.0, 1.0, size=3)),
                shaded=shaded.image, albedo=gbuffer.albedo, roughness=gbuffer.roughness,
                metallic=gbuffer.metallic, fixed_visibility=gbuffer.fixed_visibility,
                editable_visibility=editable, distortion=distortion, novel=novel_term)
            breakdown = total_stage2(buffers, current.get(view.index), cfg.weights)
            _check_finite(breakdown, 2, step, optimizer.scene, light, optimizer, out_dir)
            breakdown.total.backward()
            if shadow_map.render is not None and cached_map is None:
                stats.add(shadow_map.render.means2d, shadow_map.render.visible,
                          shadow_map.render.radii)
            optimizer.step(step)
            optimizer.zero_grad()
            if not geometry_frozen and densify_due(step, cfg.densify):
                event = densify_and_prune(optimizer, stats, cfg.densify, diagonal,
                                          cfg.dgsm.shadow_resolution, generator)
                result.densify_events.append({"stage": 2, "step": step, **event})
            record = trace.append(step, 2, breakdown)
            if out_dir is not None and step % cfg.checkpoint_interval == 0:
                result.checkpoints.append(save_checkpoint(
                    checkpoint_path(out_dir, 2, step), 2, step, optimizer.scene, light, optimizer))
            pbar.set_postfix(loss=f"{record['total']:.4f}", n=len(optimizer.scene))
            pbar.update(1)

    result.scene = optimizer.scene
    result.lighting = light
    if refinement is not None:
        result.refinement_history = list(refinement.history)
    logger.info(f"Stage 2 finished; sun intensity {light.sun_intensity.detach().tolist()}")
    return result


def _material_maps(scene: GaussianScene, camera: Camera, threads: int):
    with torch.no_grad():
        return render_material_maps(scene, camera, threads)


def _guard(call, step: int, optimizer: SceneOptimizer, out_dir: Optional[PathLike]):
    """Run a provider call; checkpoint before letting its failure through."""
    try:
        return call()
    except PriorProviderError as e:
        if out_dir is not None:
            e.checkpoint = str(save_checkpoint(Path(out_dir) / "stage2" / f"provider_failed_{step}.pt",
                                               2, step, optimizer.scene, optimizer.lighting,
                                               optimizer))
        raise


def _novel_term(novel: Optional[NovelViewSet], step: int, scene: GaussianScene,
                lighting: LightingModel, cfg: TrainConfig, dgsm, env, box) -> Optional[torch.Tensor]:
    if novel is None:
        return None
    sample = novel.pick(step)
    if sample is None:
        return None
    image = render_shaded(scene, lighting, sample.camera, cfg.visibility, dgsm, cfg.threads,
                          environment=env, shadow_resolution=cfg.dgsm.shadow_resolution,
                          aabb=box).image
    target = sample.image
    if sample.sky_mask is not None:
        target = torch.where(sample.sky_mask.bool().unsqueeze(-1), image.detach(), target)
    return loss_color(image, target.to(DTYPE), cfg.weights.l1, cfg.weights.dssim)


# ---------------------------------------------------------------------------
# Both stages
# ---------------------------------------------------------------------------

def train(scene: GaussianScene, lighting: LightingModel, views: Sequence[TrainingView],
          cfg: TrainConfig, priors: Optional[PriorBundle] = None,
          provider: Optional[MaterialPriorProvider] = None,
          novel: Optional[NovelViewSet] = None, stages: str = "all",
          out_dir: Optional[PathLike] = None) -> StageResult:
    """
    Run stage 1, stage 2 or both, writing ``loss_trace.jsonl`` to ``out_dir``.

    ``stages`` is ``"1"``, ``"2"`` or ``"all"``.
    """
    trace = LossTrace(Path(out_dir) / "loss_trace.jsonl" if out_dir is not None else None)
    result = StageResult(scene=scene, lighting=lighting, steps=0)
    if stages in ("1", "all"):
        result = train_stage1(scene, views, cfg, priors, out_dir, trace)
        scene = result.scene
    if stages in ("2", "all"):
        stage1_events = result.densify_events
        result = train_stage2(scene, lighting, views, priors, cfg, provider, novel, out_dir, trace)
        result.densify_events = stage1_events + result.densify_events
    return result
