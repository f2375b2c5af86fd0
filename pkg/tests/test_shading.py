import math

import pytest
import torch

from shadowsplat.environment import prefilter_environment
from shadowsplat.errors import InvalidParameterError
from shadowsplat.geometry import DirectionalSun, GaussianScene
from shadowsplat.pipeline import render_shaded
from shadowsplat.rasterizer import GBuffer
from shadowsplat.shading import (
    LightingModel,
    LocalLinearPredictor,
    ZeroIndirectPredictor,
    brdf_components,
    compose_final,
    fresnel_schlick,
    geometry_smith,
    ggx_D,
    indirect_shade,
    predictor_from_dict,
    sky_shade_components,
    smith_k_direct,
    smith_k_ibl,
    sun_shade,
    tonemap,
)
from tests.helpers import front_camera, ground_plane, top_camera


def flat_gbuffer(size=4, albedo=0.5, roughness=0.5, metallic=0.0, ao=1.0, alpha=1.0):
    """Every pixel faces +z and is viewed head-on."""
    camera = top_camera(size, size)

    def full(value, *tail):
        return torch.full((size, size, *tail), float(value), dtype=torch.float64)

    up = torch.zeros(size, size, 3, dtype=torch.float64)
    up[..., 2] = 1.0
    return GBuffer(normal=up, albedo=full(albedo, 3), roughness=full(roughness),
                   metallic=full(metallic), fixed_visibility=full(1.0), depth=full(4.0),
                   alpha=full(alpha), ambient_occlusion=full(ao), view_dirs=up.clone(),
                   camera=camera)


class TestBrdfTerms:
    """Closed-form values of the microfacet terms."""

    def test_ggx_distribution(self):
        assert float(ggx_D(1.0, 1.0)) == pytest.approx(1.0 / math.pi)

    def test_fresnel(self):
        assert float(fresnel_schlick(1.0, 0.04)) == pytest.approx(0.04)
        assert float(fresnel_schlick(0.0, 0.04)) == pytest.approx(1.0)
        assert float(fresnel_schlick(0.5, 0.04)) == pytest.approx(0.07)

    def test_smith_remapping(self):
        assert float(smith_k_direct(1.0)) == pytest.approx(0.5)
        assert float(smith_k_ibl(1.0)) == pytest.approx(0.5)
        assert float(geometry_smith(1.0, 1.0, 0.5)) == pytest.approx(1.0)

    def test_metal_has_no_diffuse(self):
        z = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
        diffuse, specular = brdf_components(torch.tensor([0.9, 0.6, 0.2], dtype=torch.float64),
                                            torch.tensor(0.3, dtype=torch.float64),
                                            torch.tensor(1.0, dtype=torch.float64), z, z, z)
        assert float(diffuse.abs().sum()) == 0.0
        assert bool((specular > 0).all())


class TestSunShading:
    """Direct sun term."""

    def test_lambertian_head_on(self):
        g = flat_gbuffer(metallic=0.0, roughness=1.0)
        sun = DirectionalSun.from_vector((0, 0, 1), intensity=(2.0, 2.0, 2.0))
        diffuse, _ = brdf_components(g.albedo, g.roughness, g.metallic, g.normal, g.view_dirs,
                                     g.normal)
        radiance = sun_shade(g, sun, torch.ones(4, 4, dtype=torch.float64))
        assert float(diffuse[0, 0, 0]) == pytest.approx(0.5 / math.pi)
        assert float(radiance[0, 0, 0]) > 2.0 * 0.5 / math.pi

    def test_shadowed_and_backlit_pixels_are_dark(self):
        g = flat_gbuffer()
        lit = DirectionalSun.from_vector((0, 0, 1))
        assert float(sun_shade(g, lit, torch.zeros(4, 4, dtype=torch.float64)).abs().sum()) == 0.0
        below = DirectionalSun.from_vector((0, 0, -1))
        assert float(sun_shade(g, below, torch.ones(4, 4, dtype=torch.float64)).abs().sum()) == 0.0

    def test_visibility_scales_linearly(self):
        g = flat_gbuffer()
        sun = DirectionalSun.from_vector((0.3, 0.0, 1.0))
        full = sun_shade(g, sun, torch.ones(4, 4, dtype=torch.float64))
        half = sun_shade(g, sun, torch.full((4, 4), 0.5, dtype=torch.float64))
        assert torch.allclose(half, 0.5 * full)

    def test_background_is_unlit(self):
        g = flat_gbuffer(alpha=0.0)
        radiance = sun_shade(g, DirectionalSun.from_vector((0, 0, 1)),
                             torch.ones(4, 4, dtype=torch.float64))
        assert float(radiance.abs().sum()) == 0.0

    def test_visibility_shape_checked(self):
        with pytest.raises(InvalidParameterError):
            sun_shade(flat_gbuffer(), DirectionalSun.from_vector((0, 0, 1)), torch.ones(3, 3))


class TestSkyShading:
    """Split-sum sky term."""

    @pytest.fixture(scope="class")
    def constant_env(self):
        return prefilter_environment(torch.full((8, 16, 3), 1.5, dtype=torch.float64), levels=3,
                                     samples=32, irradiance_samples=64)

    def test_constant_environment_is_lambertian(self, constant_env):
        g = flat_gbuffer(albedo=0.4)
        diffuse, _ = sky_shade_components(g, constant_env)
        assert torch.allclose(diffuse, torch.full_like(diffuse, 0.4 * 1.5), atol=2e-3)

    def test_ambient_occlusion_only_dims_diffuse(self, constant_env):
        open_sky = sky_shade_components(flat_gbuffer(ao=1.0), constant_env)
        occluded = sky_shade_components(flat_gbuffer(ao=0.0), constant_env)
        assert float(occluded[0].abs().sum()) == 0.0
        assert torch.allclose(open_sky[1], occluded[1])

    def test_metal_has_no_diffuse(self, constant_env):
        diffuse, specular = sky_shade_components(flat_gbuffer(metallic=1.0), constant_env)
        assert float(diffuse.abs().sum()) == 0.0
        assert float(specular.min()) > 0.0


class TestIndirect:
    """Learnable indirect predictors."""

    def test_zero_predictor(self):
        g = flat_gbuffer()
        sun = torch.rand(4, 4, 3, dtype=torch.float64)
        out = indirect_shade(ZeroIndirectPredictor(), g, sun, torch.zeros_like(sun))
        assert float(out.abs().sum()) == 0.0

    @pytest.mark.parametrize("kernel_size", [1, 3])
    def test_identity_on_sun(self, kernel_size):
        g = flat_gbuffer()
        sun = torch.rand(4, 4, 3, dtype=torch.float64)
        sky = torch.rand(4, 4, 3, dtype=torch.float64)
        out = indirect_shade(LocalLinearPredictor.identity_on_sun(kernel_size), g, sun, sky)
        assert torch.allclose(out, sun)

    def test_masked_by_alpha(self):
        g = flat_gbuffer(alpha=0.0)
        sun = torch.ones(4, 4, 3, dtype=torch.float64)
        out = indirect_shade(LocalLinearPredictor.identity_on_sun(), g, sun, sun)
        assert float(out.abs().sum()) == 0.0

    def test_serialization(self):
        predictor = LocalLinearPredictor.identity_on_sun(3)
        restored = predictor_from_dict(predictor.to_dict())
        assert torch.equal(restored.weight, predictor.weight)
        assert isinstance(predictor_from_dict({"kind": "zero"}), ZeroIndirectPredictor)

    def test_invalid_predictors(self):
        with pytest.raises(InvalidParameterError):
            LocalLinearPredictor(kernel_size=2)
        with pytest.raises(InvalidParameterError):
            predictor_from_dict({"kind": "mlp"})


class TestComposition:
    """Tone mapping and sky compositing."""

    def test_tonemap(self):
        values = tonemap(torch.tensor([0.0, 0.25, 1.0, 4.0], dtype=torch.float64))
        assert values.tolist() == pytest.approx([0.0, 0.5326, 1.0, 1.0], abs=1e-4)

    def test_transparent_pixel_shows_sky(self):
        camera = front_camera(4, 4)
        zero = torch.zeros(4, 4, 3, dtype=torch.float64)
        sky = torch.full((8, 16, 3), 0.3, dtype=torch.float64)
        image = compose_final(zero + 5.0, zero, zero, torch.zeros(4, 4, dtype=torch.float64),
                              sky, camera)
        assert torch.allclose(image, torch.full_like(image, 0.3))

    def test_opaque_pixel_ignores_sky(self):
        camera = front_camera(4, 4)
        zero = torch.zeros(4, 4, 3, dtype=torch.float64)
        sky = torch.full((8, 16, 3), 0.3, dtype=torch.float64)
        image = compose_final(zero + 0.25, zero, zero, torch.ones(4, 4, dtype=torch.float64),
                              sky, camera)
        assert torch.allclose(image, torch.full_like(image, 0.25 ** (1 / 2.2)))

    def test_buffer_shapes_checked(self):
        zero = torch.zeros(4, 4, 3, dtype=torch.float64)
        with pytest.raises(InvalidParameterError):
            compose_final(zero, torch.zeros(2, 2, 3), zero, torch.ones(4, 4), zero, front_camera(4, 4))


class TestLightingModel:
    """Lighting parameters and edits."""

    def test_sky_follows_environment(self):
        lighting = LightingModel(sun_direction=(0, 0, 2))
        assert torch.allclose(lighting.sun_direction, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))
        assert torch.allclose(lighting.sky_texture, tonemap(lighting.environment))
        env = torch.full((8, 16, 3), 0.25, dtype=torch.float64)
        edited = lighting.with_environment(env)
        assert torch.allclose(edited.sky_texture, tonemap(env))

    def test_sun_edit_keeps_original(self):
        lighting = LightingModel(sun_direction=(0, 0, 1))
        edited = lighting.with_sun(direction=(1, 0, 1), intensity=(3.0, 3.0, 3.0))
        assert float(edited.sun_direction[0]) == pytest.approx(math.sqrt(0.5))
        assert float(lighting.sun_direction[0]) == 0.0
        assert float(lighting.sun_intensity[0]) == 1.0

    def test_parameter_groups(self):
        lighting = LightingModel(sun_direction=(0, 0, 1), predictor=LocalLinearPredictor())
        groups = lighting.parameters()
        assert set(groups) == {"sun_intensity", "environment", "predictor"}
        assert len(groups["predictor"]) == 2

    def test_clamp(self):
        lighting = LightingModel(sun_direction=(0, 0, 1), sun_intensity=(-1.0, 2.0, 0.5))
        lighting.clamp_()
        assert lighting.sun_intensity.tolist() == [0.0, 2.0, 0.5]


class TestShadedRender:
    """End-to-end deferred shading."""

    def test_empty_scene_is_sky(self):
        lighting = LightingModel(sun_direction=(0, 0, 1))
        out = render_shaded(GaussianScene.empty(), lighting, front_camera(6, 6))
        assert out.image.shape == (6, 6, 3)
        assert float(out.render.alpha.abs().sum()) == 0.0
        assert float(out.image.min()) > 0.0

    @pytest.mark.parametrize("mode", ["fixed", "editable", "raytraced"])
    def test_visibility_modes(self, mode):
        scene = GaussianScene.from_primitives(ground_plane(size=1.0))
        lighting = LightingModel(sun_direction=(0.0, 0.0, 1.0))
        out = render_shaded(scene, lighting, top_camera(8, 8, height_above=2.0, fov_y=20.0),
                            visibility=mode)
        assert float(out.visibility.min()) >= 0.95
        assert float(out.image.min()) >= 0.0 and float(out.image.max()) <= 1.0

    def test_unknown_mode(self):
        with pytest.raises(InvalidParameterError):
            render_shaded(GaussianScene.empty(), LightingModel(sun_direction=(0, 0, 1)),
                          front_camera(), visibility="soft")
