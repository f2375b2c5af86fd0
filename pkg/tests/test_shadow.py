import math

import numpy as np
import pytest
import torch

from shadowsplat.benchmark import ShadowBenchmark
from shadowsplat.errors import InvalidParameterError
from shadowsplat.geometry import (
    DirectionalSun,
    GaussianPrimitive,
    GaussianScene,
    aabb_diagonal,
    scene_aabb,
)
from shadowsplat.pipeline import RAY_OFFSET_FRACTION, RAY_TMIN_FRACTION
from shadowsplat.rasterizer import render_gbuffer
from shadowsplat.shadow import (
    DgsmConfig,
    build_shadow_map,
    dgsm_visibility,
    editable_visibility_buffer,
    hard_visibility,
    ray_traced_visibility,
    ray_traced_visibility_batch,
    sample_shadow_depth,
    sharpness_at,
    visibility_from_shadow_map,
)
from shadowsplat.synthetic import BoxSpec, SyntheticSpec, build_scene, point_in_box_shadow
from tests.helpers import ground_plane, top_camera


def box_scene():
    return build_scene(SyntheticSpec())


class TestSharpnessSchedule:
    """Warm-up of the sigmoid sharpness."""

    def test_doubles_every_interval_until_cap(self):
        assert sharpness_at(0, 10.0) == 10.0
        assert sharpness_at(1999, 10.0) == 10.0
        assert sharpness_at(2000, 10.0) == 20.0
        assert sharpness_at(4000, 10.0) == 40.0
        assert sharpness_at(100000, 10.0) == 160.0

    def test_negative_step(self):
        with pytest.raises(InvalidParameterError):
            sharpness_at(-1, 10.0)

    def test_scene_scaled_defaults(self):
        cfg = DgsmConfig.for_scene(2.0)
        assert cfg.sharpness_k == pytest.approx(25.0 * 16)
        assert cfg.depth_bias == pytest.approx(0.01)
        assert DgsmConfig.for_scene(2.0, step=0).sharpness_k == pytest.approx(25.0)

    def test_invalid_config(self):
        with pytest.raises(InvalidParameterError):
            DgsmConfig(sharpness_k=0.0)
        with pytest.raises(InvalidParameterError):
            DgsmConfig(sharpness_k=1.0, depth_bias=-1.0)
        with pytest.raises(InvalidParameterError):
            DgsmConfig(sharpness_k=1.0, sampling="cubic")


class TestSigmoidTest:
    """Soft shadow-map comparison."""

    def test_equal_depth_is_half(self):
        cfg = DgsmConfig(sharpness_k=50.0)
        assert float(dgsm_visibility(torch.tensor(2.0), torch.tensor(2.0), cfg)) == pytest.approx(0.5)

    def test_closed_form(self):
        cfg = DgsmConfig(sharpness_k=40.0)
        v = dgsm_visibility(torch.tensor(1.0), torch.tensor(1.1), cfg)
        assert float(v) == pytest.approx(0.98201, abs=1e-5)

    def test_empty_texel_is_lit(self):
        cfg = DgsmConfig(sharpness_k=50.0, depth_bias=0.1)
        assert float(dgsm_visibility(torch.tensor(3.0), torch.tensor(math.inf), cfg)) == 1.0

    def test_far_behind_occluder(self):
        cfg = DgsmConfig(sharpness_k=1e4, depth_bias=0.01)
        v = dgsm_visibility(torch.tensor(3.0), torch.tensor(3.0 - 0.02), cfg)
        assert float(v) < 1e-12

    def test_hard_limit(self):
        gen = torch.Generator().manual_seed(0)
        z = torch.rand(1000, generator=gen, dtype=torch.float64) * 5
        z_s = torch.rand(1000, generator=gen, dtype=torch.float64) * 5
        keep = (z_s - z).abs() >= 1e-4
        soft = dgsm_visibility(z[keep], z_s[keep], DgsmConfig(sharpness_k=1e6))
        assert float((soft - hard_visibility(z[keep], z_s[keep])).abs().max()) <= 0.01


class TestShadowMap:
    """Depth rendering from the sun."""

    def test_empty_scene(self):
        sm = build_shadow_map(GaussianScene.empty(), DirectionalSun.from_vector((0, 0, 1)), 16)
        assert bool(torch.isinf(sm.depth).all())
        assert sm.resolution == 16

    def test_ground_from_above(self):
        scene = GaussianScene.from_primitives(ground_plane())
        sm = build_shadow_map(scene, DirectionalSun.from_vector((0, 0, 1)), 32)
        distance = float(sm.light_camera.world_to_camera(torch.zeros(1, 3, dtype=torch.float64))[0, 2])
        finite = torch.isfinite(sm.depth)
        assert bool(finite[16, 16])
        assert torch.allclose(sm.depth[finite], torch.full_like(sm.depth[finite], distance), atol=1e-3)
        assert torch.allclose(sm.sun_direction, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))

    def test_sampling(self):
        scene = GaussianScene.from_primitives(ground_plane())
        sm = build_shadow_map(scene, DirectionalSun.from_vector((0, 0, 1)), 32)
        outside = sample_shadow_depth(sm, torch.tensor([[-5.0, 3.0], [40.0, 3.0]], dtype=torch.float64))
        assert bool(torch.isinf(outside).all())
        center = torch.tensor([[16.0, 16.0]], dtype=torch.float64)
        assert torch.allclose(sample_shadow_depth(sm, center, "nearest"), sm.depth[16, 16].view(1))
        assert torch.allclose(sample_shadow_depth(sm, center, "bilinear"), sm.depth[16, 16].view(1))
        with pytest.raises(InvalidParameterError):
            sample_shadow_depth(sm, center, "cubic")


class TestEditableVisibility:
    """Per-pixel visibility from the shadow map."""

    def test_unoccluded_ground_is_lit(self):
        scene = GaussianScene.from_primitives(ground_plane(size=4.0))
        sun = DirectionalSun.from_vector((0.3, 0.0, 1.0))
        camera = top_camera(16, 16, height_above=2.0, fov_y=40.0)
        cfg = DgsmConfig.for_scene(aabb_diagonal(scene_aabb(scene)))
        g = render_gbuffer(scene, camera).gbuffer
        vis = editable_visibility_buffer(g, build_shadow_map(scene, sun, 128), camera, cfg)
        assert bool(g.foreground.all())
        assert float(vis.min()) >= 0.99

    def test_box_umbra_and_lit_ground(self):
        scene = box_scene()
        box = BoxSpec()
        sun_dir = (1.0, 0.0, 1.0)
        sun = DirectionalSun.from_vector(sun_dir)
        camera = top_camera(32, 32, height_above=4.0, fov_y=60.0)
        cfg = DgsmConfig.for_scene(aabb_diagonal(scene_aabb(scene)))
        g = render_gbuffer(scene, camera).gbuffer
        vis = editable_visibility_buffer(g, build_shadow_map(scene, sun, 128), camera, cfg)
        points = camera.unproject(torch.where(g.foreground, g.depth, torch.ones_like(g.depth)))

        umbra, lit = [], []

        def shadowed(p, margin):
            return {point_in_box_shadow((p[0] + dx, p[1] + dy, 0.0), box, sun_dir)
                    for dx in (-margin, 0.0, margin) for dy in (-margin, 0.0, margin)}

        for i in range(32):
            for j in range(32):
                p = points[i, j].tolist()
                if not bool(g.foreground[i, j]) or abs(p[2]) > 0.02:
                    continue
                if max(abs(p[0]), abs(p[1])) > 1.1 or max(abs(p[0]), abs(p[1])) < 0.45:
                    continue
                if shadowed(p, 0.1) == {True}:
                    umbra.append(float(vis[i, j]))
                elif shadowed(p, 0.4) == {False}:
                    lit.append(float(vis[i, j]))
        assert umbra and lit
        assert max(umbra) <= 0.1
        assert min(lit) >= 0.9

    def test_gradient_reaches_occluder(self):
        scene, leaves = box_scene().with_leaves(["positions"])
        sun = DirectionalSun.from_vector((1.0, 0.0, 1.0))
        camera = top_camera(24, 24, height_above=4.0, fov_y=50.0)
        cfg = DgsmConfig.for_scene(aabb_diagonal(scene_aabb(scene)))
        g = render_gbuffer(scene, camera).gbuffer
        vis = editable_visibility_buffer(g, build_shadow_map(scene, sun, 64), camera, cfg)
        vis.sum().backward()
        box = scene.labels == 1
        assert float(leaves["positions"].grad[box].abs().sum()) > 0.0


class TestRayTracedVisibility:
    """Opacity product along sun rays."""

    def test_empty_scene(self):
        v = ray_traced_visibility(GaussianScene.empty(), torch.zeros(3), torch.tensor([0.0, 0.0, 1.0]))
        assert float(v) == 1.0

    def test_single_gaussian_on_ray(self):
        scene = GaussianScene.from_primitives([GaussianPrimitive(position=(0.0, 0.0, 1.0),
                                                                 opacity=0.8)])
        v = ray_traced_visibility(scene, torch.zeros(3), torch.tensor([0.0, 0.0, 1.0]))
        assert float(v) == pytest.approx(0.2)

    def test_occluder_behind_origin_ignored(self):
        scene = GaussianScene.from_primitives([GaussianPrimitive(position=(0.0, 0.0, -1.0),
                                                                 opacity=0.8)])
        v = ray_traced_visibility(scene, torch.zeros(3), torch.tensor([0.0, 0.0, 1.0]))
        assert float(v) == pytest.approx(1.0)

    def test_agrees_with_shadow_map_on_box_scene(self):
        scene = box_scene()
        sun = DirectionalSun.from_vector((0.4, 0.3, 0.866))
        diagonal = aabb_diagonal(scene_aabb(scene))
        points, normals = ShadowBenchmark(scene, sun).surface_points(64, seed=0)
        sm = build_shadow_map(scene, sun, 128)
        with torch.no_grad():
            v_e = visibility_from_shadow_map(points, sm, DgsmConfig.for_scene(diagonal), normals)
            v_ray = ray_traced_visibility_batch(scene, points + normals * RAY_OFFSET_FRACTION * diagonal,
                                                sun.direction, t_min=RAY_TMIN_FRACTION * diagonal)
        assert float((v_e - v_ray).abs().mean()) <= 0.1
        assert np.isfinite(v_e.numpy()).all()
