"""
Parameter updates: adaptive-moment steps over named groups, range
restoration after every step, and densification surgery that keeps the
optimizer moments aligned with the Gaussians.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import torch

from .config import DensifyConfig, LearningRates
from .errors import InvalidParameterError
from .geometry import DTYPE, SCENE_FIELDS, GaussianScene, quaternion_to_matrix
from .shading import LightingModel

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6

SCENE_GROUPS = tuple(name for name, _ in SCENE_FIELDS)
LIGHT_GROUPS = ("sun_intensity", "environment", "predictor")
GEOMETRY_GROUPS = ("positions", "rotations", "scales", "opacities")
STAGE1_GROUPS = GEOMETRY_GROUPS + ("base_colors",)
STAGE2_GROUPS = SCENE_GROUPS + LIGHT_GROUPS


# ---------------------------------------------------------------------------
# Plain adaptive-moment step
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """First and second moments per parameter plus the step counter."""

    step: int = 0
    exp_avg: List[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: List[torch.Tensor] = field(default_factory=list)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[Optional[torch.Tensor]],
              state: OptimState, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS
              ) -> Sequence[torch.Tensor]:
    """
    One bias-corrected Adam update, in place.

    The update rule of :class:`SceneOptimizer`, which runs it per group
    through ``torch.optim.Adam``; this form works on bare tensors with an
    explicit :class:`OptimState`.

    A parameter whose gradient is missing or non-finite is left untouched
    and its moments are not advanced.

    Raises:
        InvalidParameterError: If a gradient's shape differs from its parameter.
    """
    b1, b2 = betas
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise InvalidParameterError(f"gradient shape {tuple(g.shape)} does not match "
                                            f"parameter {tuple(p.shape)}")
            if not bool(torch.isfinite(g).all()):
                logger.warning(f"Skipping parameter {i}: non-finite gradient")
                continue
            state.exp_avg[i].mul_(b1).add_(g, alpha=1 - b1)
            state.exp_avg_sq[i].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = state.exp_avg[i] / (1 - b1 ** t)
            v_hat = state.exp_avg_sq[i] / (1 - b2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return params


# ---------------------------------------------------------------------------
# Scene optimizer
# ---------------------------------------------------------------------------

def _group_lr(name: str, lr: LearningRates) -> float:
    if name == "positions":
        return lr.position
    if name == "rotations":
        return lr.rotation
    if name == "scales":
        return lr.scale
    if name == "opacities":
        return lr.opacity
    if name == "base_colors":
        return lr.base_color
    if name == "sun_intensity":
        return lr.sun_intensity
    if name == "environment":
        return lr.environment
    if name == "predictor":
        return lr.predictor
    return lr.material


class SceneOptimizer:
    """
    Adam over named groups of a scene and its lighting.

    Each scene field is its own group so densification can concatenate or
    prune its moments. After every step the scene invariants are restored
    (unit ranges, normalized quaternions, positive scales) and lighting is
    clamped to its valid range.

    Args:
        scene: Scene whose tensors become leaves requiring gradients.
        lighting: Lighting model, or ``None`` for geometry-only training.
        lr: Learning rates per group.
        groups: Names of the groups to optimize.
        total_steps: Length of the position learning-rate decay.
        freeze_positions_after: Step after which positions stop moving.
    """

    def __init__(self, scene: GaussianScene, lighting: Optional[LightingModel],
                 lr: LearningRates, groups: Iterable[str], total_steps: int = 1,
                 freeze_positions_after: Optional[int] = None):
        self.scene = scene
        self.lighting = lighting
        self.lr = lr
        self.total_steps = max(int(total_steps), 1)
        self.freeze_positions_after = freeze_positions_after
        self.groups = [g for g in groups]
        unknown = [g for g in self.groups if g not in STAGE2_GROUPS]
        if unknown:
            raise InvalidParameterError(f"unknown optimizer groups: {unknown}")
        if lighting is None and any(g in LIGHT_GROUPS for g in self.groups):
            raise InvalidParameterError("lighting groups need a lighting model")
        param_groups = []
        for name in self.groups:
            params = self._tensors(name)
            for p in params:
                p.requires_grad_(True)
            if params:
                param_groups.append({"params": params, "lr": _group_lr(name, lr), "name": name})
        self.optimizer = torch.optim.Adam(param_groups, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.skipped = 0

    def _tensors(self, name: str) -> List[torch.Tensor]:
        if name in SCENE_GROUPS:
            t = getattr(self.scene, name).detach().clone()
            setattr(self.scene, name, t)
            return [t]
        assert self.lighting is not None
        if name == "sun_intensity":
            self.lighting.sun_intensity = self.lighting.sun_intensity.detach().clone()
            return [self.lighting.sun_intensity]
        if name == "environment":
            self.lighting.environment = self.lighting.environment.detach().clone()
            self.lighting.sky_texture = self.lighting.sky_texture.detach().clone()
            return [self.lighting.environment, self.lighting.sky_texture]
        return list(self.lighting.predictor.parameters())

    def param_group(self, name: str) -> Optional[dict]:
        for group in self.optimizer.param_groups:
            if group["name"] == name:
                return group
        return None

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def position_lr(self, step: int) -> float:
        """Exponential decay from ``lr.position`` to ``lr.position * final_factor``."""
        t = min(max(step / self.total_steps, 0.0), 1.0)
        factor = max(self.lr.position_final_factor, 1e-12)
        return self.lr.position * math.exp(t * math.log(factor))

    def step(self, step: int) -> None:
        """Apply one update for optimizer step ``step`` and restore invariants."""
        group = self.param_group("positions")
        if group is not None:
            group["lr"] = self.position_lr(step)
            if self.freeze_positions_after is not None and step >= self.freeze_positions_after:
                for p in group["params"]:
                    p.grad = None
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                    logger.warning(f"Step {step}: non-finite gradient in {group['name']}, skipped")
                    p.grad = None
                    self.skipped += 1
        self.optimizer.step()
        self.scene.clamp_()
        if self.lighting is not None:
            self.lighting.clamp_()

    # -- surgery ------------------------------------------------------------

    def _replace_param(self, group: dict, tensor: torch.Tensor, state_fn) -> None:
        old = group["params"][0]
        stored = self.optimizer.state.get(old, None)
        new = tensor.detach().requires_grad_(True)
        if stored:
            stored["exp_avg"] = state_fn(stored["exp_avg"])
            stored["exp_avg_sq"] = state_fn(stored["exp_avg_sq"])
            del self.optimizer.state[old]
            self.optimizer.state[new] = stored
        group["params"][0] = new
        setattr(self.scene, group["name"], new)

    def cat_tensors(self, extension: GaussianScene) -> None:
        """Append Gaussians; their moments start at zero."""
        for name in SCENE_GROUPS:
            ext = getattr(extension, name).detach()
            group = self.param_group(name)
            joined = torch.cat([getattr(self.scene, name).detach(), ext], 0)
            if group is None:
                setattr(self.scene, name, joined)
                continue
            self._replace_param(group, joined,
                                lambda s, e=ext: torch.cat([s, torch.zeros_like(e)], 0))
        self.scene.labels = torch.cat([self.scene.labels, extension.labels], 0)

    def prune(self, keep: torch.Tensor) -> None:
        """Keep only the Gaussians where ``keep`` is true."""
        for name in SCENE_GROUPS:
            group = self.param_group(name)
            kept = getattr(self.scene, name).detach()[keep]
            if group is None:
                setattr(self.scene, name, kept)
                continue
            self._replace_param(group, kept, lambda s: s[keep])
        self.scene.labels = self.scene.labels[keep]

    def state_dict(self) -> dict:
        return self.optimizer.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state)


# ---------------------------------------------------------------------------
# Densification
# ---------------------------------------------------------------------------

class DensifyStats:
    """Accumulated screen-space gradient norms and maximum radii per Gaussian."""

    def __init__(self, count: int):
        self.reset(count)

    def reset(self, count: int) -> None:
        self.grad_accum = torch.zeros(count, dtype=DTYPE)
        self.denom = torch.zeros(count, dtype=DTYPE)
        self.max_radii = torch.zeros(count, dtype=DTYPE)

    def add(self, means2d: torch.Tensor, visible: torch.Tensor,
            radii: Optional[torch.Tensor] = None) -> None:
        """Record one pass; ``means2d`` must have had its gradient retained."""
        if means2d.grad is None or means2d.shape[0] != self.grad_accum.shape[0]:
            return
        norm = means2d.grad.detach().norm(dim=-1)
        norm = torch.where(torch.isfinite(norm), norm, torch.zeros_like(norm))
        vis = visible.detach()
        self.grad_accum[vis] += norm[vis]
        self.denom[vis] += 1
        if radii is not None:
            self.max_radii = torch.maximum(self.max_radii, radii.detach().to(DTYPE))

    def average(self) -> torch.Tensor:
        avg = self.grad_accum / self.denom
        return torch.where(torch.isfinite(avg), avg, torch.zeros_like(avg))


def _sample_offsets(scene: GaussianScene, mask: torch.Tensor, repeats: int,
                    generator: torch.Generator) -> torch.Tensor:
    scales = scene.scales.detach()[mask].repeat(repeats, 1)
    rot = quaternion_to_matrix(scene.rotations.detach()[mask]).repeat(repeats, 1, 1)
    local = torch.randn(scales.shape, dtype=DTYPE, generator=generator) * scales
    return (rot @ local.unsqueeze(-1)).squeeze(-1)


def densify_and_prune(optimizer: SceneOptimizer, stats: DensifyStats, cfg: DensifyConfig,
                      extent: float, image_size: int,
                      generator: Optional[torch.Generator] = None) -> Dict[str, int]:
    """
    Clone, split and prune Gaussians, then reset the statistics.

    Gaussians whose average screen gradient reaches ``cfg.grad_threshold``
    are cloned (shifted by a sample of their own footprint) when their
    largest scale is at most ``split_fraction * extent`` and otherwise
    split into two children with scales divided by 1.6. Gaussians with
    opacity below ``min_opacity`` or a screen radius above
    ``max_screen_fraction * image_size`` are removed.

    Returns:
        Counts of cloned, split and pruned Gaussians.
    """
    generator = generator if generator is not None else torch.Generator().manual_seed(0)
    scene = optimizer.scene
    n = len(scene)
    grads = stats.average()
    if grads.shape[0] != n:
        grads = torch.zeros(n, dtype=DTYPE)
    big = scene.scales.detach().max(dim=-1).values > cfg.split_fraction * extent
    hot = grads >= cfg.grad_threshold
    clone_mask = hot & ~big
    split_mask = hot & big

    radii = stats.max_radii if stats.max_radii.shape[0] == n else torch.zeros(n, dtype=DTYPE)

    cloned = int(clone_mask.sum())
    if cloned:
        copy = scene.select(clone_mask).clone()
        copy.positions = copy.positions + _sample_offsets(scene, clone_mask, 1, generator)
        optimizer.cat_tensors(copy)
        radii = torch.cat([radii, torch.zeros(cloned, dtype=DTYPE)])

    split = int(split_mask.sum())
    if split:
        padded = torch.cat([split_mask, torch.zeros(cloned, dtype=torch.bool)])
        parents = optimizer.scene.select(padded)
        children = parents.select(torch.arange(split).repeat(SPLIT_CHILDREN)).clone()
        children.positions = children.positions + _sample_offsets(optimizer.scene, padded,
                                                                  SPLIT_CHILDREN, generator)
        children.scales = children.scales / SPLIT_SCALE_DIVISOR
        optimizer.cat_tensors(children)
        keep = torch.cat([~padded, torch.ones(len(children), dtype=torch.bool)])
        optimizer.prune(keep)
        radii = torch.cat([radii, torch.zeros(len(children), dtype=DTYPE)])[keep]

    scene = optimizer.scene
    prune_mask = (scene.opacities.detach() < cfg.min_opacity) | (
        radii > cfg.max_screen_fraction * image_size)
    pruned = int(prune_mask.sum())
    if pruned:
        optimizer.prune(~prune_mask)
    stats.reset(len(optimizer.scene))
    if cloned or split or pruned:
        logger.info(f"Densified: {cloned} cloned, {split} split, {pruned} pruned "
                    f"({len(optimizer.scene)} Gaussians)")
    return {"cloned": cloned, "split": split, "pruned": pruned}


def densify_due(step: int, cfg: DensifyConfig) -> bool:
    """True at positive multiples of the interval up to the stop step."""
    return cfg.enabled and 0 < step <= cfg.stop and step % cfg.interval == 0
