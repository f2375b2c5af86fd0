import torch

from shadowsplat.benchmark import ShadowBenchmark, format_results, run_benchmark
from shadowsplat.geometry import DirectionalSun
from shadowsplat.synthetic import SyntheticSpec, build_scene


def test_surface_points_lie_on_gaussians():
    """Receivers stay within each Gaussian's footprint plane."""
    scene = build_scene(SyntheticSpec())
    bench = ShadowBenchmark(scene, DirectionalSun.from_vector((0, 0, 1)))
    points, normals = bench.surface_points(32, seed=1)
    assert points.shape == (32, 3) and normals.shape == (32, 3)
    assert torch.allclose(normals.norm(dim=-1), torch.ones(32, dtype=torch.float64))
    again, _ = bench.surface_points(32, seed=1)
    assert torch.equal(points, again)


def test_run_benchmark():
    """Both methods are timed and agree on the box scene."""
    lines = []
    report = run_benchmark(build_scene(SyntheticSpec()), DirectionalSun.from_vector((0.4, 0.3, 0.866)),
                           resolution=128, count=64, repeats=1, out=lines.append)
    assert [r["method"] for r in report["results"]] == ["Shadow map (DGSM)", "Ray traced"]
    assert all(r["duration"] > 0 and r["points"] == 64 for r in report["results"])
    assert report["speedup"] > 0
    assert report["mean_abs_difference"] <= 0.1
    assert "Speedup" in lines[0]
    assert lines[0] == format_results(report)
