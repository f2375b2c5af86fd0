import logging
import math

import numpy as np
import pytest
import torch

from shadowsplat.errors import InvalidInputError, InvalidParameterError, PriorProviderError
from shadowsplat.geometry import GaussianScene
from shadowsplat.priors import (
    CorruptionConfig,
    GroundTruthInpaintOracle,
    IdentityInpaintOracle,
    InpaintOracle,
    MaterialMaps,
    MaterialPriorProvider,
    MaterialRefinement,
    NovelViewSet,
    PriorBundle,
    RefinementSchedule,
    SyntheticPriorProvider,
    ViewPriors,
    camera_jitter,
    ground_truth_priors,
    iterative_material_refinement,
    novel_view_supervision,
    sky_mask,
    synthetic_prior_provider,
    visibility_prior,
)
from shadowsplat.metrics import psnr
from shadowsplat.pipeline import render_shaded
from shadowsplat.rasterizer import render_gbuffer
from shadowsplat.shading import LightingModel
from shadowsplat.synthetic import BoxSpec, SyntheticSpec, build_scene, point_in_box_shadow
from tests.helpers import front_camera, ground_plane, random_scene, top_camera


def maps(value, shape=(6, 6)):
    return MaterialMaps(torch.full((*shape, 3), value, dtype=torch.float64),
                        torch.full(shape, value, dtype=torch.float64),
                        torch.full(shape, value, dtype=torch.float64))


class MockZeroRng:
    """Every draw sits at zero or at the lower bound of a range excluding zero."""

    def uniform(self, low, high):
        return 0.0 if low <= 0.0 <= high else low


class MockFailingProvider(MaterialPriorProvider):
    def refine(self, view, image, condition, noise_step):
        raise RuntimeError("model crashed")


class MockFailingOracle(InpaintOracle):
    def complete(self, rendered, reference, camera):
        raise RuntimeError("inpainting failed")


class MockCroppingOracle(InpaintOracle):
    def complete(self, rendered, reference, camera):
        return rendered[1:, 1:]


class TestSyntheticProvider:
    """Blend of ground truth and the conditioning maps."""

    def test_pure_ground_truth(self):
        gt = maps(0.8)
        provider = synthetic_prior_provider({0: gt})
        out = provider.refine(0, torch.zeros(6, 6, 3), maps(0.2), 1000)
        assert torch.equal(out.albedo, gt.albedo)
        assert torch.equal(out.roughness, gt.roughness)

    def test_pure_condition(self):
        provider = synthetic_prior_provider({0: maps(0.8)})
        out = provider.refine(0, torch.zeros(6, 6, 3), maps(0.2), 0)
        assert torch.allclose(out.metallic, torch.full((6, 6), 0.2, dtype=torch.float64))

    def test_default_noise_step_blend(self):
        provider = synthetic_prior_provider({0: maps(0.8)})
        out = provider.refine(0, torch.zeros(6, 6, 3), maps(0.2), 600)
        assert torch.allclose(out.albedo, torch.full((6, 6, 3), 0.6 * 0.8 + 0.4 * 0.2,
                                                     dtype=torch.float64))

    def test_missing_view(self):
        provider = synthetic_prior_provider({0: maps(0.8)})
        with pytest.raises(PriorProviderError):
            provider.refine(3, torch.zeros(6, 6, 3), None, 1000)

    def test_corruption_is_seeded_and_in_range(self):
        corruption = CorruptionConfig(bias=0.2, blur_radius=2.0, noise=0.05, seed=7)
        a = synthetic_prior_provider({0: maps(0.5)}, corruption)
        b = synthetic_prior_provider({0: maps(0.5)}, corruption)
        first = a.refine(0, torch.zeros(6, 6, 3), None, 1000)
        assert torch.equal(first.albedo, b.refine(0, torch.zeros(6, 6, 3), None, 1000).albedo)
        assert not torch.equal(first.albedo, maps(0.5).albedo)
        assert float(first.albedo.min()) >= 0.0 and float(first.albedo.max()) <= 1.0
        second = a.refine(0, torch.zeros(6, 6, 3), None, 1000)
        assert not torch.equal(first.albedo, second.albedo)

    def test_invalid_corruption(self):
        with pytest.raises(InvalidParameterError):
            CorruptionConfig(bias=-0.1)


class TestRefinementSchedule:
    """Refresh cycles of the material priors."""

    def _events(self, schedule, total_steps):
        refinement = MaterialRefinement(synthetic_prior_provider({0: maps(0.5)}), schedule)
        images = {0: torch.zeros(6, 6, 3)}
        refinement.initial(images)
        for step in range(1, total_steps + 1):
            if refinement.due(step):
                refinement.refresh(step, images, {0: maps(0.3)})
        return [h["step"] for h in refinement.history]

    def test_three_cycles(self):
        schedule = RefinementSchedule(cycles=3, period=6000, noise_step=600)
        assert schedule.refresh_steps() == [6000, 12000, 18000]
        assert self._events(schedule, 20000) == [6000, 12000, 18000]

    def test_single_cycle(self):
        assert self._events(RefinementSchedule(cycles=1, period=500), 2000) == [500]

    def test_invalid_schedule(self):
        with pytest.raises(InvalidParameterError):
            RefinementSchedule(period=0)
        with pytest.raises(InvalidParameterError):
            RefinementSchedule(noise_step=1200)

    def test_provider_failure_is_wrapped(self):
        refinement = MaterialRefinement(MockFailingProvider(), RefinementSchedule())
        with pytest.raises(PriorProviderError):
            refinement.initial({0: torch.zeros(6, 6, 3)})

    def test_converges_when_materials_follow_priors(self):
        gt = {0: maps(0.8), 1: maps(0.1)}
        provider = synthetic_prior_provider(gt)
        schedule = RefinementSchedule(cycles=4, period=10, noise_step=600, initial_noise_step=0)
        fitted = {}

        def optimize(priors, steps):
            fitted.update(priors)

        sequence = iterative_material_refinement(provider, {0: torch.zeros(6, 6, 3),
                                                            1: torch.zeros(6, 6, 3)},
                                                 lambda view: fitted[view], optimize, schedule)
        assert len(sequence) == 5
        changes = [np.mean([sequence[n + 1][v].distance(sequence[n][v]) for v in gt])
                   for n in range(4)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(changes, changes[1:]))
        error = [np.mean([s[v].distance(gt[v]) for v in gt]) for s in sequence]
        assert error[-1] < 0.05 * error[0]

    @pytest.mark.slow
    def test_refresh_cycles_beat_single_prediction(self):
        """Three refreshes against a biased, noisy provider gain at least 1 dB of albedo PSNR."""
        rng = np.random.default_rng(5)
        gt = {v: MaterialMaps(torch.from_numpy(rng.uniform(0.35, 0.65, size=(32, 32, 3))),
                              torch.from_numpy(rng.uniform(0.35, 0.65, size=(32, 32))),
                              torch.from_numpy(rng.uniform(0.35, 0.65, size=(32, 32))))
              for v in range(4)}
        images = {v: torch.zeros(32, 32, 3, dtype=torch.float64) for v in gt}

        def albedo_psnr(cycles):
            provider = SyntheticPriorProvider(gt, CorruptionConfig(bias=0.15, noise=0.05, seed=11))
            fitted = {}
            sequence = iterative_material_refinement(
                provider, images, lambda view: fitted[view],
                lambda priors, steps: fitted.update(priors),
                RefinementSchedule(cycles=cycles, period=1))
            return np.mean([psnr(sequence[-1][v].albedo, gt[v].albedo) for v in gt])

        assert albedo_psnr(3) >= albedo_psnr(0) + 1.0


class TestCameraJitter:
    """Perturbed training cameras."""

    def test_zero_draws_keep_camera(self):
        camera = front_camera(8, 8)
        jittered = camera_jitter(camera, MockZeroRng())
        assert torch.allclose(jittered.rotation, camera.rotation)
        assert torch.allclose(jittered.translation, camera.translation)
        assert jittered.fx == camera.fx and jittered.cy == camera.cy

    def test_sample_bounds(self):
        camera = front_camera(8, 8)
        rng = np.random.default_rng(0)
        r = camera.rotation
        for _ in range(10000):
            jittered = camera_jitter(camera, rng)
            delta = jittered.center - camera.center
            assert abs(float(delta @ r[0])) <= 0.1 + 1e-9
            assert abs(float(delta @ r[2])) <= 0.1 + 1e-9
            assert abs(float(delta @ r[1])) <= 1e-9
            relative = jittered.rotation @ r.T
            pitch = math.degrees(math.asin(max(-1.0, min(1.0, float(relative[1, 2])))))
            assert -1e-9 <= pitch <= 30.0 + 1e-9
            identity = jittered.rotation @ jittered.rotation.T
            assert torch.allclose(identity, torch.eye(3, dtype=torch.float64), atol=1e-6)


class TestNovelViews:
    """Pseudo ground truth from jittered cameras."""

    def _setup(self):
        scene = random_scene(6, seed=2)
        lighting = LightingModel(sun_direction=(0.2, -0.5, 1.0))
        camera = front_camera(8, 8)
        return scene, lighting, camera

    def test_identity_oracle_returns_render(self):
        scene, lighting, camera = self._setup()
        sample = novel_view_supervision(scene, lighting, camera, torch.zeros(8, 8, 3),
                                        IdentityInpaintOracle(), None, np.random.default_rng(1))
        with torch.no_grad():
            expected = render_shaded(scene, lighting, sample.camera, "fixed").image
        assert torch.allclose(sample.image, expected)
        assert sample.weight == pytest.approx(0.2)
        assert sample.sky_mask is None

    def test_ground_truth_oracle(self):
        scene, lighting, camera = self._setup()
        gt_scene = random_scene(6, seed=3)
        oracle = GroundTruthInpaintOracle(gt_scene, lighting, visibility="fixed")
        sample = novel_view_supervision(scene, lighting, camera, torch.zeros(8, 8, 3), oracle,
                                        lambda cam: sky_mask(gt_scene, cam),
                                        np.random.default_rng(2))
        with torch.no_grad():
            expected = render_shaded(gt_scene, lighting, sample.camera, "fixed").image
        assert torch.allclose(sample.image, expected)
        assert sample.sky_mask.dtype == torch.bool

    @pytest.mark.parametrize("oracle", [MockFailingOracle(), MockCroppingOracle()])
    def test_bad_oracle_skips_sample(self, oracle, caplog):
        scene, lighting, camera = self._setup()
        with caplog.at_level(logging.WARNING, logger="shadowsplat"):
            sample = novel_view_supervision(scene, lighting, camera, torch.zeros(8, 8, 3), oracle,
                                            None, np.random.default_rng(3))
        assert sample is None
        assert "oracle" in caplog.text.lower()

    def test_regeneration_interval(self):
        scene, lighting, camera = self._setup()
        novel = NovelViewSet(IdentityInpaintOracle(), interval=2000, seed=4)
        assert novel.due(1)
        novel.regenerate(scene, lighting, [camera, camera], [torch.zeros(8, 8, 3)] * 2)
        assert novel.generation == 1
        assert not novel.due(1999)
        assert novel.due(2000)
        assert novel.pick(3).source_view == 1

    def test_invalid_interval(self):
        with pytest.raises(InvalidParameterError):
            NovelViewSet(IdentityInpaintOracle(), interval=0)


class TestVisibilityPrior:
    """Binary ray-traced sun visibility."""

    def test_unoccluded_plane(self):
        scene = GaussianScene.from_primitives(ground_plane(size=2.0))
        camera = top_camera(8, 8, height_above=2.0, fov_y=30.0)
        vis = visibility_prior(scene, camera, (0.3, 0.2, 1.0))
        assert bool((vis == 1.0).all())

    def test_box_umbra(self):
        scene = build_scene(SyntheticSpec())
        sun = (1.0, 0.0, 1.0)
        camera = top_camera(24, 24, height_above=4.0, fov_y=50.0)
        vis = visibility_prior(scene, camera, sun)
        assert set(vis.unique().tolist()) <= {0.0, 1.0}
        g = render_gbuffer(scene, camera).gbuffer
        points = camera.unproject(torch.where(g.foreground, g.depth, torch.ones_like(g.depth)))
        checked = 0
        for i in range(24):
            for j in range(24):
                p = points[i, j].tolist()
                if abs(p[2]) > 0.02 or not bool(g.foreground[i, j]):
                    continue
                near = {point_in_box_shadow((p[0] + dx, p[1] + dy, 0.0), BoxSpec(), sun)
                        for dx in (-0.15, 0.0, 0.15) for dy in (-0.15, 0.0, 0.15)}
                if near == {True}:
                    assert float(vis[i, j]) == 0.0
                    checked += 1
        assert checked > 0


class TestPriorBundle:
    """Per-view prior files."""

    def test_save_and_load(self, tmp_path):
        scene = random_scene(5, seed=1)
        lighting = LightingModel(sun_direction=(0, 0, 1))
        bundle = ground_truth_priors(scene, lighting, [front_camera(6, 6), top_camera(6, 6)])
        bundle.save(tmp_path / "priors")
        assert (tmp_path / "priors" / "view_0001" / "albedo.pfm").exists()
        loaded = PriorBundle.load(tmp_path / "priors")
        assert len(loaded) == 2
        assert torch.allclose(loaded[1].albedo, bundle[1].albedo.float().double(), atol=1e-6)
        assert torch.equal(loaded[0].sky_mask, bundle[0].sky_mask)
        assert set(loaded.material_maps()) == {0, 1}

    def test_with_materials(self):
        bundle = PriorBundle({0: ViewPriors(visibility=torch.ones(6, 6))})
        updated = bundle.with_materials({0: maps(0.4)})
        assert updated[0].visibility is not None
        assert updated[0].materials is not None
        assert bundle[0].materials is None

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InvalidInputError):
            PriorBundle.load(tmp_path / "nothing")
