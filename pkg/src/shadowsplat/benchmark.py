import logging
import time
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import torch

from .geometry import DirectionalSun, GaussianScene, aabb_diagonal, scene_aabb
from .pipeline import RAY_OFFSET_FRACTION, RAY_TMIN_FRACTION
from .shadow import DgsmConfig, build_shadow_map, ray_traced_visibility_batch, visibility_from_shadow_map

logger = logging.getLogger(__name__)

DEFAULT_POINTS = 4096
AGREEMENT_POINTS = 64


class ShadowBenchmark:
    """Timing and agreement of shadow-map visibility against ray-traced visibility."""

    def __init__(self, scene: GaussianScene, sun: DirectionalSun, resolution: int = 128,
                 threads: int = 1, repeats: int = 3):
        self.scene = scene
        self.sun = sun
        self.resolution = resolution
        self.threads = threads
        self.repeats = max(int(repeats), 1)
        self.box = scene_aabb(scene)
        self.diagonal = aabb_diagonal(self.box)
        self.results: List[Dict[str, Any]] = []

    def surface_points(self, count: int = DEFAULT_POINTS, seed: int = 0):
        """
        Receivers on the Gaussians' surfaces.

        Each point is a Gaussian center jittered within its footprint and
        lifted off the surface along its normal.
        """
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            index = torch.from_numpy(rng.integers(0, len(self.scene), size=count))
            r = self.scene.rotation_matrices()[index]
            scales = self.scene.scales[index]
            local = torch.from_numpy(rng.uniform(-1.0, 1.0, size=(count, 3))) * scales
            local = torch.where(scales == scales.min(dim=-1, keepdim=True).values,
                                torch.zeros_like(local), local)
            normals = self.scene.normals()[index]
            points = self.scene.positions[index] + (r @ local.unsqueeze(-1)).squeeze(-1)
        return points, normals

    def _time(self, name: str, fn: Callable[[], torch.Tensor], count: int) -> Dict[str, Any]:
        logger.info(f"Starting benchmark: {name}")
        durations = []
        value = None
        for _ in range(self.repeats):
            start = time.perf_counter()
            with torch.no_grad():
                value = fn()
            durations.append(time.perf_counter() - start)
        best = min(durations)
        result = {"method": name, "duration": best, "points": count,
                  "points_per_second": count / best if best > 0 else float("inf"),
                  "visibility": value}
        logger.info(f"Benchmark {name} completed in {best:.3f}s")
        return result

    def run(self, count: int = DEFAULT_POINTS, seed: int = 0) -> Dict[str, Any]:
        """
        Time both methods over ``count`` receivers and compare them.

        Returns:
            Dictionary with per-method results, the speedup of the shadow
            map over ray tracing and the mean absolute visibility difference
            over the first 64 points.
        """
        points, normals = self.surface_points(count, seed)
        cfg = DgsmConfig.for_scene(self.diagonal)
        direction = self.sun.direction

        def dgsm() -> torch.Tensor:
            shadow_map = build_shadow_map(self.scene, self.sun, self.resolution, self.threads,
                                          self.box)
            return visibility_from_shadow_map(points, shadow_map, cfg, normals=normals)

        def traced() -> torch.Tensor:
            origins = points + normals * (RAY_OFFSET_FRACTION * self.diagonal)
            return ray_traced_visibility_batch(self.scene, origins, direction,
                                               t_min=RAY_TMIN_FRACTION * self.diagonal)

        self.results = [self._time("Shadow map (DGSM)", dgsm, count),
                        self._time("Ray traced", traced, count)]
        shadow, ray = self.results
        n = min(AGREEMENT_POINTS, count)
        agreement = float((shadow["visibility"][:n] - ray["visibility"][:n]).abs().mean())
        return {
            "gaussians": len(self.scene),
            "resolution": self.resolution,
            "results": [{k: v for k, v in r.items() if k != "visibility"} for r in self.results],
            "speedup": ray["duration"] / shadow["duration"] if shadow["duration"] > 0 else float("inf"),
            "mean_abs_difference": agreement,
        }


def format_results(report: Dict[str, Any]) -> str:
    """Formatted benchmark table."""
    lines = ["=" * 70, "SHADOW VISIBILITY BENCHMARK", "=" * 70,
             f"   • {report['gaussians']} Gaussians",
             f"   • {report['resolution']}x{report['resolution']} shadow map", "",
             f"{'Method':<24} {'Duration (s)':<14} {'Points':<10} {'Points/s':<12}",
             "-" * 70]
    for r in report["results"]:
        lines.append(f"{r['method']:<24} {r['duration']:<14.4f} {r['points']:<10} "
                     f"{r['points_per_second']:<12.0f}")
    lines += ["", f"Speedup of shadow map over ray tracing: {report['speedup']:.1f}x",
              f"Mean |V_shadow - V_ray| over {AGREEMENT_POINTS} points: "
              f"{report['mean_abs_difference']:.4f}", "=" * 70]
    return "\n".join(lines)


def run_benchmark(scene: GaussianScene, sun: DirectionalSun, resolution: int = 128,
                  threads: int = 1, count: int = DEFAULT_POINTS, seed: int = 0,
                  repeats: int = 3, out: Optional[Callable[[str], None]] = print) -> Dict[str, Any]:
    """Run the shadow benchmark and print its table."""
    report = ShadowBenchmark(scene, sun, resolution, threads, repeats).run(count, seed)
    if out is not None:
        out(format_results(report))
    return report
