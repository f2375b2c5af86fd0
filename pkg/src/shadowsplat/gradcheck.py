"""
Finite-difference verification of the analytic gradients.

Analytic gradients come from one reverse pass; numeric ones from centered
differences, one parameter at a time. A parameter passes when
``|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)``.
"""

import logging
import sys
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from .errors import InvalidParameterError, NumericalFailureError
from .geometry import SCENE_FIELDS, Camera, GaussianScene, aabb_diagonal, scene_aabb
from .losses import LossBuffers, LossWeights, loss_color, total_stage1, total_stage2
from .pipeline import render_shaded
from .priors import ViewPriors
from .shading import LightingModel
from .shadow import DgsmConfig, build_shadow_map

logger = logging.getLogger(__name__)

LOSS_NAMES = ("zero", "color", "shaded", "stage1", "stage2")
DEFAULT_SAMPLES = 500
DEFAULT_EPS = 1e-6
MIN_PASS_RATE = 0.99
GRADCHECK_SHADOW_RESOLUTION = 16

LossFn = Callable[[GaussianScene, LightingModel], torch.Tensor]


@dataclass
class ParameterCheck:
    group: str
    index: int
    analytic: float
    numeric: float
    abs_error: float
    rel_error: float
    passed: bool


@dataclass
class GradcheckReport:
    """Per-parameter comparison and the overall pass rate."""

    loss: str
    rtol: float
    atol: float
    checks: List[ParameterCheck] = field(default_factory=list)

    @property
    def pass_rate(self) -> float:
        if not self.checks:
            return 1.0
        return sum(c.passed for c in self.checks) / len(self.checks)

    @property
    def failures(self) -> List[ParameterCheck]:
        return [c for c in self.checks if not c.passed]

    def require(self, min_pass_rate: float = MIN_PASS_RATE) -> "GradcheckReport":
        """
        Raises:
            NumericalFailureError: If the pass rate is below ``min_pass_rate``.
        """
        if self.pass_rate < min_pass_rate:
            raise NumericalFailureError(
                f"gradient check of {self.loss} passed {self.pass_rate:.2%} of "
                f"{len(self.checks)} parameters (need {min_pass_rate:.0%})")
        return self

    def to_dict(self) -> Dict[str, object]:
        return {"loss": self.loss, "rtol": self.rtol, "atol": self.atol,
                "checked": len(self.checks), "pass_rate": self.pass_rate,
                "failures": [asdict(c) for c in self.failures]}


def compare(analytic: float, numeric: float, rtol: float, atol: float
            ) -> Tuple[float, float, bool]:
    """Absolute error, relative error and the pass verdict."""
    abs_error = abs(analytic - numeric)
    scale = max(abs(analytic), abs(numeric))
    rel_error = abs_error / scale if scale > 0 else 0.0
    return abs_error, rel_error, abs_error <= atol + rtol * scale


def central_difference(func: Callable[[], torch.Tensor], tensor: torch.Tensor, index: int,
                       eps: float = DEFAULT_EPS) -> float:
    """Centered difference of ``func`` in one flat entry of ``tensor``, restored afterwards."""
    flat = tensor.data.view(-1)
    original = float(flat[index])
    with torch.no_grad():
        flat[index] = original + eps
        f_plus = float(func())
        flat[index] = original - eps
        f_minus = float(func())
        flat[index] = original
    return (f_plus - f_minus) / (2 * eps)


# ---------------------------------------------------------------------------
# Losses under test
# ---------------------------------------------------------------------------

def synthetic_target(camera: Camera, seed: int = 0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(0.0, 1.0, size=(camera.height, camera.width, 3)))


def synthetic_priors(camera: Camera, seed: int = 0) -> ViewPriors:
    """Random material, binary visibility and unit normal priors."""
    rng = np.random.default_rng([seed, 1])
    h, w = camera.height, camera.width
    normal = torch.from_numpy(rng.normal(size=(h, w, 3)))
    return ViewPriors(
        albedo=torch.from_numpy(rng.uniform(0.0, 1.0, size=(h, w, 3))),
        metallic=torch.from_numpy(rng.uniform(0.0, 1.0, size=(h, w))),
        roughness=torch.from_numpy(rng.uniform(0.0, 1.0, size=(h, w))),
        visibility=torch.from_numpy((rng.uniform(size=(h, w)) > 0.5).astype(np.float64)),
        normal=normal / normal.norm(dim=-1, keepdim=True),
    )


def make_loss(name: str, camera: Camera, target: Optional[torch.Tensor] = None,
              priors: Optional[ViewPriors] = None, weights: Optional[LossWeights] = None,
              threads: int = 1, shadow_resolution: int = GRADCHECK_SHADOW_RESOLUTION,
              seed: int = 0) -> LossFn:
    """
    Closure evaluating the named loss of a scene and lighting seen by ``camera``.

    Stop-gradient targets (the editable visibility target of ``stage2``) are
    taken from the first evaluation and held fixed afterwards, so finite
    differences around that point see the same constants as the reverse pass.

    Raises:
        InvalidParameterError: For an unknown loss name.
    """
    if name not in LOSS_NAMES:
        raise InvalidParameterError(f"unknown loss {name}; choose from {', '.join(LOSS_NAMES)}")
    target = target if target is not None else synthetic_target(camera, seed)
    priors = priors if priors is not None else synthetic_priors(camera, seed)
    weights = weights or LossWeights()
    frozen: Dict[str, torch.Tensor] = {}

    def zero(scene: GaussianScene, lighting: LightingModel) -> torch.Tensor:
        total = 0.0 * lighting.sun_intensity.sum()
        for t in scene.tensors().values():
            total = total + (t * 0.0).sum()
        return total

    def evaluate(scene: GaussianScene, lighting: LightingModel) -> torch.Tensor:
        box = scene_aabb(scene)
        dgsm = DgsmConfig.for_scene(aabb_diagonal(box))
        shadow_map = build_shadow_map(scene, lighting.sun, shadow_resolution, threads, box)
        shaded = render_shaded(scene, lighting, camera, "editable", dgsm, threads, shadow_map,
                               aabb=box)
        if name == "shaded":
            return loss_color(shaded.image, target, weights.l1, weights.dssim)
        render = shaded.render
        if name == "color":
            return loss_color(render["color"], target, weights.l1, weights.dssim)
        g = shaded.gbuffer
        buffers = LossBuffers(color=render["color"], alpha=render.alpha, normal=render["normal"],
                              depth=render["depth"], camera=camera, target=target)
        if name == "stage1":
            return total_stage1(buffers, priors, weights).total
        buffers.shaded = shaded.image
        buffers.albedo, buffers.roughness, buffers.metallic = g.albedo, g.roughness, g.metallic
        buffers.fixed_visibility = g.fixed_visibility
        buffers.editable_visibility = shaded.visibility
        if "editable_target" not in frozen:
            frozen["editable_target"] = g.fixed_visibility.detach().clone()
        buffers.editable_target = frozen["editable_target"]
        return total_stage2(buffers, priors, weights).total

    return zero if name == "zero" else evaluate


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------

def _parameters(scene: GaussianScene, lighting: LightingModel) -> Dict[str, torch.Tensor]:
    params = {name: getattr(scene, name) for name, _ in SCENE_FIELDS}
    params["sun_intensity"] = lighting.sun_intensity
    params["environment"] = lighting.environment
    params["sky_texture"] = lighting.sky_texture
    for pname, p in lighting.predictor.named_parameters():
        params[f"predictor.{pname}"] = p
    return params


def gradcheck(scene: GaussianScene, lighting: LightingModel, camera: Camera,
              loss: Union[str, LossFn] = "stage2", rtol: float = 1e-3, atol: float = 1e-6,
              samples: int = DEFAULT_SAMPLES, eps: float = DEFAULT_EPS, seed: int = 0,
              threads: int = 1, target: Optional[torch.Tensor] = None,
              priors: Optional[ViewPriors] = None) -> GradcheckReport:
    """
    Compare analytic and finite-difference gradients of a loss.

    Every float parameter of the scene and lighting is a candidate; when
    there are more than ``samples`` of them a seeded uniform subset is
    checked. Failures are logged with both values.

    Args:
        scene: Gaussians; copied, not modified.
        lighting: Lighting; copied, not modified.
        camera: View the loss is evaluated in.
        loss: A name from ``LOSS_NAMES`` or ``fn(scene, lighting) -> scalar``.
        rtol, atol: Pass tolerances.
        samples: Number of parameters checked at most.
        eps: Finite-difference step.
        seed: Sampling and synthetic-target seed.
        threads: Tile worker threads.
        target: Photograph for the color terms; random by default.
        priors: Priors for the stage losses; random by default.

    Returns:
        GradcheckReport: Per-parameter errors and the pass rate.
    """
    if samples < 1:
        raise InvalidParameterError("samples must be positive")
    name = loss if isinstance(loss, str) else getattr(loss, "__name__", "custom")
    fn = make_loss(loss, camera, target, priors, threads=threads, seed=seed) \
        if isinstance(loss, str) else loss

    work, _ = scene.replace(aabb=scene_aabb(scene)).with_leaves([n for n, _ in SCENE_FIELDS])
    light = lighting.clone().requires_grad_(True)
    params = _parameters(work, light)

    value = fn(work, light)
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    analytic = {k: (g if g is not None else torch.zeros_like(p)).detach().reshape(-1)
                for (k, p), g in zip(params.items(), grads)}

    candidates = [(k, i) for k, p in params.items() for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    if len(candidates) > samples:
        picks = np.sort(rng.choice(len(candidates), size=samples, replace=False))
        candidates = [candidates[int(i)] for i in picks]
    logger.info(f"Checking {len(candidates)} of {sum(p.numel() for p in params.values())} "
                f"parameters of {name}")

    report = GradcheckReport(loss=name, rtol=rtol, atol=atol)
    with torch.no_grad():
        for group, index in tqdm(candidates, desc="Gradient check", disable=sys.stdout is None):
            numeric = central_difference(lambda: fn(work, light), params[group], index, eps)
            a = float(analytic[group][index])
            abs_error, rel_error, passed = compare(a, numeric, rtol, atol)
            report.checks.append(ParameterCheck(group, index, a, numeric, abs_error, rel_error,
                                                passed))
            if not passed:
                logger.warning(f"Gradient mismatch in {group}[{index}]: analytic {a:.6e}, "
                               f"numeric {numeric:.6e}")
    logger.info(f"Gradient check of {name}: {report.pass_rate:.2%} passed")
    return report
