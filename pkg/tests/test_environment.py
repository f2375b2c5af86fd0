import math

import numpy as np
import pytest
import torch

from shadowsplat.environment import (
    EnvironmentMap,
    brdf_lut,
    cache_dir,
    direction_to_texel,
    hammersley,
    lookup_brdf,
    prefilter_environment,
    procedural_sky,
    sample_equirect,
    texel_directions,
)
from shadowsplat.errors import InvalidInputError, InvalidParameterError


def test_hammersley_points():
    """Hammersley points are stratified in the first coordinate and lie in [0, 1)."""
    points = hammersley(8)
    assert points.shape == (8, 2)
    assert np.allclose(points[:, 0], np.arange(8) / 8)
    assert np.allclose(points[:4, 1], [0.0, 0.5, 0.25, 0.75])
    assert (points >= 0).all() and (points < 1).all()


class TestEquirect:
    """Direction to texel mapping and lookups."""

    def test_texel_centers_map_back(self):
        dirs = texel_directions(4, 8)
        u, v = direction_to_texel(dirs, 4, 8)
        assert torch.allclose(u, torch.arange(8, dtype=torch.float64).expand(4, 8), atol=1e-9)
        assert torch.allclose(v, torch.arange(4, dtype=torch.float64).view(4, 1).expand(4, 8),
                              atol=1e-9)

    def test_directions_are_unit(self):
        dirs = texel_directions(6, 12)
        assert torch.allclose(dirs.norm(dim=-1), torch.ones(6, 12, dtype=torch.float64))

    def test_constant_grid(self):
        grid = torch.full((8, 16, 3), 0.3, dtype=torch.float64)
        dirs = torch.nn.functional.normalize(torch.randn(50, 3, dtype=torch.float64), dim=-1)
        assert torch.allclose(sample_equirect(grid, dirs), torch.full((50, 3), 0.3, dtype=torch.float64))

    def test_pole_lookup_is_finite(self):
        grid = procedural_sky()
        up = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64, requires_grad=True)
        value = sample_equirect(grid, up)
        value.sum().backward()
        assert bool(torch.isfinite(up.grad).all())


class TestPrefilter:
    """Split-sum environment filtering."""

    def test_constant_environment(self):
        env = prefilter_environment(torch.full((8, 16, 3), 2.0, dtype=torch.float64), levels=3,
                                    samples=32, irradiance_samples=64)
        assert env.is_prefiltered
        assert len(env.levels) == 3
        normals = texel_directions(8, 16)
        assert torch.allclose(env.diffuse(normals), torch.full((8, 16, 3), 2.0, dtype=torch.float64),
                              atol=2e-3)
        rough = torch.full((8, 16), 0.7, dtype=torch.float64)
        assert torch.allclose(env.specular(normals, rough),
                              torch.full((8, 16, 3), 2.0, dtype=torch.float64), atol=2e-3)

    def test_level_zero_is_base(self):
        sky = procedural_sky(8, 16)
        env = prefilter_environment(sky, levels=2, samples=16, irradiance_samples=16)
        dirs = texel_directions(8, 16)
        smooth = env.specular(dirs, torch.zeros(8, 16, dtype=torch.float64))
        assert torch.allclose(smooth, sky, atol=1e-9)

    def test_too_few_levels(self):
        with pytest.raises(InvalidParameterError):
            prefilter_environment(procedural_sky(), levels=1)

    def test_non_finite_radiance(self):
        sky = procedural_sky(4, 8)
        sky[0, 0, 0] = math.nan
        with pytest.raises(InvalidInputError):
            prefilter_environment(sky)

    def test_unfiltered_map_refuses_lookups(self):
        env = EnvironmentMap(base=procedural_sky(4, 8))
        with pytest.raises(InvalidParameterError):
            env.diffuse(torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64))

    def test_procedural_sky_shape(self):
        sky = procedural_sky(16, 32)
        assert sky.shape == (16, 32, 3)
        assert float(sky.min()) > 0.0
        # zenith is bluer than the ground
        assert float(sky[0, 0, 2]) > float(sky[-1, 0, 2])


class TestBrdfLookup:
    """Baked split-sum scale and bias."""

    def test_bounds(self):
        table = brdf_lut()
        assert table.shape == (32, 32, 2)
        assert float(table.min()) >= 0.0
        assert float(table.sum(-1).max()) <= 1.05

    def test_smooth_head_on_reflects_everything(self):
        a, b = lookup_brdf(torch.tensor(1.0, dtype=torch.float64),
                           torch.tensor(0.0, dtype=torch.float64))
        assert float(a + b) == pytest.approx(1.0, abs=0.05)

    def test_cached_on_disk(self):
        brdf_lut()
        assert (cache_dir() / "brdf_lut_32x32_1024.npy").exists()

    def test_lookup_at_cell_centers(self):
        table = torch.arange(2 * 2 * 2, dtype=torch.float64).view(2, 2, 2)
        a, b = lookup_brdf(torch.tensor([0.25, 0.75], dtype=torch.float64),
                           torch.tensor([0.75, 0.25], dtype=torch.float64), lut=table)
        assert a.tolist() == pytest.approx([2.0, 4.0])
        assert b.tolist() == pytest.approx([3.0, 5.0])
