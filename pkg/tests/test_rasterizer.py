import math

import pytest
import torch

from shadowsplat.errors import InvalidParameterError
from shadowsplat.geometry import SCENE_FIELDS, Camera, GaussianPrimitive, GaussianScene
from shadowsplat.gradcheck import compare
from shadowsplat.rasterizer import (
    build_draw_list,
    depth_to_normal,
    render_backward,
    render_channels,
    render_gbuffer,
    render_reference,
)
from tests.helpers import front_camera, random_scene


def axis_camera(size=9, focal=10.0):
    """Camera at the origin looking down +z; pixel (size // 2, size // 2) is on the axis."""
    return Camera(kind="perspective", width=size, height=size, rotation=torch.eye(3),
                  translation=torch.zeros(3), fx=focal, fy=focal)


def splat(z, opacity, color, scale=0.05):
    return GaussianPrimitive(position=(0.0, 0.0, z), scale=(scale, scale, scale),
                             opacity=opacity, base_color=color)


class TestDrawList:
    """Culling, tile binning and depth ordering."""

    def test_empty_scene(self):
        draw_list = build_draw_list(GaussianScene.empty(), front_camera(32, 32))
        assert draw_list.num_tiles == 4
        assert draw_list.is_empty()

    def test_behind_camera_is_dropped(self):
        scene = GaussianScene.from_primitives([splat(-3.0, 0.9, (1, 1, 1))])
        assert build_draw_list(scene, axis_camera()).is_empty()

    def test_front_to_back_order(self):
        scene = GaussianScene.from_primitives([splat(2.0, 0.5, (1, 1, 1)),
                                               splat(1.0, 0.5, (0, 0, 0))])
        draw_list = build_draw_list(scene, axis_camera())
        assert [i for i, _ in draw_list.entries(0)] == [1, 0]
        assert [d for _, d in draw_list.entries(0)] == pytest.approx([1.0, 2.0])

    def test_equal_depth_ties_by_index(self):
        scene = GaussianScene.from_primitives([splat(2.0, 0.5, (1, 1, 1))] * 3)
        assert [i for i, _ in build_draw_list(scene, axis_camera()).entries(0)] == [0, 1, 2]


class TestBlending:
    """Front-to-back alpha compositing."""

    def test_single_term(self):
        scene = GaussianScene.from_primitives([splat(5.0, 0.7, (1.0, 0.0, 0.0))])
        out = render_channels(scene, axis_camera(), ["color"])
        assert torch.allclose(out["color"][4, 4], torch.tensor([0.7, 0.0, 0.0], dtype=torch.float64))
        assert float(out.alpha[4, 4]) == pytest.approx(0.7)

    def test_two_terms(self):
        scene = GaussianScene.from_primitives([splat(3.0, 0.5, (1.0, 1.0, 1.0)),
                                               splat(6.0, 0.5, (0.0, 0.0, 0.0))])
        out = render_channels(scene, axis_camera(), ["color"])
        assert torch.allclose(out["color"][4, 4], torch.full((3,), 0.5, dtype=torch.float64))
        assert float(out.alpha[4, 4]) == pytest.approx(0.75)

    def test_matches_tile_free_reference(self):
        scene = random_scene(20, seed=7)
        camera = front_camera(8, 8)
        out = render_channels(scene, camera, ["color", "albedo", "normal", "depth"])
        ref = render_reference(scene, camera, ["color", "albedo", "normal", "depth"])
        assert torch.allclose(out.alpha, ref.alpha, atol=1e-12)
        for name in ("color", "albedo", "normal"):
            assert torch.allclose(out[name], ref[name], atol=1e-12)
        finite = torch.isfinite(ref["depth"])
        assert torch.equal(finite, torch.isfinite(out["depth"]))
        assert torch.allclose(out["depth"][finite], ref["depth"][finite], atol=1e-10)

    def test_multi_tile_reference_and_threads(self):
        scene = random_scene(25, seed=8, spread=1.2)
        camera = front_camera(40, 24)
        single = render_channels(scene, camera, ["color"], threads=1)
        threaded = render_channels(scene, camera, ["color"], threads=4)
        ref = render_reference(scene, camera, ["color"])
        assert torch.equal(single["color"], threaded["color"])
        assert torch.allclose(single["color"], ref["color"], atol=1e-12)

    def test_background_conventions(self):
        out = render_gbuffer(GaussianScene.empty(), front_camera(4, 4))
        assert bool(torch.isinf(out["depth"]).all())
        assert float(out["normal"].abs().sum()) == 0.0
        assert float(out.alpha.sum()) == 0.0

    def test_gbuffer_ranges(self):
        out = render_gbuffer(random_scene(15, seed=9), front_camera(16, 16))
        g = out.gbuffer
        fg = g.foreground
        assert bool(fg.any())
        assert torch.allclose(g.normal[fg].norm(dim=-1), torch.ones(int(fg.sum()), dtype=torch.float64))
        assert float(g.roughness.max()) <= 1.0 and float(g.albedo.min()) >= 0.0
        assert bool((out.radii[out.visible] > 0).all())

    def test_unknown_channel(self):
        with pytest.raises(InvalidParameterError):
            render_channels(random_scene(2), front_camera(), ["emission"])

    def test_record_blend(self):
        out = render_channels(random_scene(6, seed=1), front_camera(8, 8), ["depth"],
                              record_blend=True)
        assert len(out.records) == 1
        record = out.records[0]
        assert record.weights.shape[0] == 64


class TestBackward:
    """Reverse-mode gradients of rendered channels."""

    def test_zero_adjoint(self):
        scene = random_scene(5, seed=3)
        camera = front_camera(8, 8)
        grads = render_backward(scene, camera, {"color": torch.zeros(8, 8, 3)})
        for g in grads.values():
            assert float(g.abs().sum()) == 0.0

    def test_color_gradient_is_blend_weight(self):
        scene = GaussianScene.from_primitives([splat(5.0, 0.7, (1.0, 0.0, 0.0))])
        adjoint = torch.zeros(9, 9, 3, dtype=torch.float64)
        adjoint[4, 4] = 1.0
        grads = render_backward(scene, axis_camera(), {"color": adjoint})
        assert torch.allclose(grads["base_colors"][0], torch.full((3,), 0.7, dtype=torch.float64))

    def test_adjoint_shape_checked(self):
        with pytest.raises(InvalidParameterError):
            render_backward(random_scene(2), front_camera(8, 8), {"color": torch.zeros(4, 4, 3)})

    def test_matches_finite_differences(self):
        scene = random_scene(10, seed=11)
        camera = front_camera(8, 8)
        gen = torch.Generator().manual_seed(12)
        adjoint = {"color": torch.randn(8, 8, 3, generator=gen, dtype=torch.float64),
                   "alpha": torch.randn(8, 8, generator=gen, dtype=torch.float64)}
        analytic = render_backward(scene, camera, adjoint)

        def objective():
            out = render_channels(scene, camera, ["color"])
            return float((out["color"] * adjoint["color"]).sum() + (out.alpha * adjoint["alpha"]).sum())

        checks = []
        for name, _ in SCENE_FIELDS:
            flat = getattr(scene, name).view(-1)
            for i in range(flat.numel()):
                original = float(flat[i])
                eps = 1e-4 * max(1.0, abs(original))
                flat[i] = original + eps
                plus = objective()
                flat[i] = original - eps
                minus = objective()
                flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                checks.append(compare(float(analytic[name].view(-1)[i]), numeric, 1e-3, 1e-6)[2])
        assert sum(checks) / len(checks) >= 0.97


class TestDepthNormals:
    """Normals from the depth gradient."""

    def test_fronto_parallel_plane(self):
        camera = axis_camera(8, 20.0)
        normals = depth_to_normal(torch.full((8, 8), 5.0, dtype=torch.float64), camera)
        expected = torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64).expand(8, 8, 3)
        assert torch.allclose(normals, expected, atol=1e-12)

    def test_tilted_plane(self):
        camera = axis_camera(8, 20.0)
        y = (camera.pixel_grid()[..., 1] - camera.cy) / camera.fy
        depth = 5.0 / (1.0 - y)
        normals = depth_to_normal(depth, camera)
        expected = torch.tensor([0.0, math.sqrt(0.5), -math.sqrt(0.5)], dtype=torch.float64)
        assert torch.allclose(normals[1:-1, 1:-1], expected.expand(6, 6, 3), atol=1e-3)

    def test_single_pixel(self):
        camera = axis_camera(1)
        normals = depth_to_normal(torch.full((1, 1), 2.0, dtype=torch.float64), camera)
        assert float(normals.abs().sum()) == 0.0

    def test_background_has_zero_normal(self):
        depth = torch.full((4, 4), 3.0, dtype=torch.float64)
        depth[0, 0] = math.inf
        normals = depth_to_normal(depth, axis_camera(4))
        assert float(normals[0, 0].abs().sum()) == 0.0
