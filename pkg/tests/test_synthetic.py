import json
import math

import pytest
import torch

from shadowsplat.errors import InvalidInputError, InvalidParameterError
from shadowsplat.sceneio import load_dataset, load_scene
from shadowsplat.synthetic import (
    BoxSpec,
    GroundSpec,
    LightSpec,
    SyntheticSpec,
    ViewSpec,
    build_scene,
    gaussian_visibility,
    generate_synthetic_scene,
    initial_scene,
    load_synthetic_spec,
    point_in_box_shadow,
    ring_cameras,
    split_tag,
)


def ground_only():
    return SyntheticSpec(ground=GroundSpec(size=2.0), boxes=[])


class TestBuildScene:
    """Surface sampling into Gaussians."""

    def test_default_scene(self):
        scene = build_scene(SyntheticSpec())
        assert 30 <= len(scene) <= 2000
        assert set(scene.labels.tolist()) == {0, 1}
        assert bool((scene.fixed_visibility == 1.0).all())
        # every Gaussian is flat
        assert bool((scene.scales.min(dim=-1).values < 0.1 * scene.scales.max(dim=-1).values).all())

    def test_deterministic(self):
        a, b = build_scene(SyntheticSpec()), build_scene(SyntheticSpec())
        for name, tensor in a.tensors().items():
            assert torch.equal(tensor, getattr(b, name))

    def test_ground_normals_point_up(self):
        scene = build_scene(ground_only())
        assert torch.allclose(scene.normals()[:, 2].abs(), torch.ones(len(scene), dtype=torch.float64))

    def test_gaussian_count_bounds(self):
        with pytest.raises(InvalidParameterError):
            build_scene(SyntheticSpec(ground=None, boxes=[]))
        with pytest.raises(InvalidParameterError):
            build_scene(SyntheticSpec(spacing=0.02))

    def test_invalid_spec(self):
        with pytest.raises(InvalidParameterError):
            SyntheticSpec(lightings=[LightSpec()] * 4)
        with pytest.raises(InvalidParameterError):
            SyntheticSpec(spacing=0.0)


class TestVisibility:
    """Ray-traced visibility of the generated scene."""

    def test_ground_only_is_lit(self):
        scene = build_scene(ground_only())
        vis = gaussian_visibility(scene, (0.4, 0.3, 0.866))
        assert float(vis.min()) >= 0.99

    def test_box_shadows_the_ground(self):
        scene = build_scene(SyntheticSpec())
        sun = (1.0, 0.0, 1.0)
        vis = gaussian_visibility(scene, sun)
        box = BoxSpec()
        ground = scene.labels == 0
        umbra = [i for i in torch.nonzero(ground).flatten().tolist()
                 if point_in_box_shadow(scene.positions[i].tolist(), box, sun)
                 and point_in_box_shadow((float(scene.positions[i, 0]) + 0.15,
                                          float(scene.positions[i, 1]), 0.0), box, sun)
                 and point_in_box_shadow((float(scene.positions[i, 0]) - 0.15,
                                          float(scene.positions[i, 1]), 0.0), box, sun)]
        assert umbra
        assert float(vis[umbra].max()) <= 0.1
        lit_ground = ground & (scene.positions[:, 0] > 0.5)
        assert float(vis[lit_ground].min()) >= 0.99
        roof = scene.positions[:, 2] > 0.55
        assert float(vis[roof].min()) >= 0.75

    def test_analytic_shadow_test(self):
        box = BoxSpec()
        assert point_in_box_shadow((0.6, 0.0, 0.0), box, (1.0, 0.0, 1.0)) is False
        assert point_in_box_shadow((-0.6, 0.0, 0.0), box, (1.0, 0.0, 1.0)) is True
        assert point_in_box_shadow((1.0, 1.0, 0.0), box, (0.0, 0.0, 1.0)) is False
        assert point_in_box_shadow((0.1, 0.1, 0.0), box, (0.0, 0.0, 1.0)) is True


class TestViews:
    """Camera rings and splits."""

    def test_ring_cameras(self):
        views = ViewSpec(count=4, radius=3.0, elevation=30.0, resolution=16)
        cameras = ring_cameras(views)
        assert len(cameras) == 4
        target = torch.tensor(views.target, dtype=torch.float64)
        for cam in cameras:
            assert float((cam.center - target).norm()) == pytest.approx(3.0)
            assert float(cam.center[2] - target[2]) == pytest.approx(1.5)
            assert (cam.width, cam.height) == (16, 16)

    def test_split_tags(self):
        assert [split_tag(i, 10) for i in range(10)].count("test") == 1
        assert split_tag(9, 10) == "test"
        assert split_tag(0, 10) == "train"
        assert {split_tag(i, 1) for i in range(5)} == {"train"}

    def test_initial_scene(self):
        gt = build_scene(SyntheticSpec())
        init = initial_scene(gt, 0.05, seed=3)
        assert len(init) == len(gt)
        offsets = init.positions - gt.positions
        assert 0.03 < float(offsets.std()) < 0.07
        assert torch.equal(initial_scene(gt, 0.05, seed=3).positions, init.positions)
        assert bool((init.albedo == 0.5).all())
        assert torch.equal(initial_scene(gt, 0.0, seed=0).positions, gt.positions)


class TestSpecFiles:
    """JSON scene descriptions."""

    def test_round_trip(self, tmp_path):
        spec = SyntheticSpec(ground=GroundSpec(size=2.5), boxes=[BoxSpec(center=(0.2, 0.0, 0.25))],
                             views=ViewSpec(count=6), spacing=0.2)
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(spec.to_dict()))
        assert load_synthetic_spec(path) == spec

    def test_partial_description(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps({"ground": None, "boxes": [{"size": [1, 1, 2]}]}))
        spec = load_synthetic_spec(path)
        assert spec.ground is None
        assert spec.boxes[0].size == (1, 1, 2)
        assert spec.views == ViewSpec()

    def test_invalid_description(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_synthetic_spec(tmp_path / "missing.json")
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"towers": []}))
        with pytest.raises(InvalidInputError):
            load_synthetic_spec(path)


@pytest.mark.integration
def test_generate_dataset(tmp_path):
    """A generated dataset loads back with images, scenes and priors."""
    spec = SyntheticSpec(ground=GroundSpec(size=2.0), boxes=[BoxSpec()],
                         lightings=[LightSpec(), LightSpec(sun_direction=(-0.6, 0.2, 0.775))],
                         views=ViewSpec(count=2, resolution=8), test_stride=2)
    generate_synthetic_scene(spec, tmp_path)
    dataset = load_dataset(tmp_path)
    assert [v.split for v in dataset.views] == ["train", "test"]
    assert dataset.lighting_names() == ["light_0", "light_1"]
    image = dataset.image(dataset.views[0])
    assert image.shape == (8, 8, 3)
    assert float(image.min()) >= 0.0 and float(image.max()) <= 1.0
    assert dataset.image(dataset.views[1], "light_1").shape == (8, 8, 3)

    gt = load_scene(tmp_path / "scene.json")
    init = load_scene(tmp_path / "init_scene.json")
    assert len(gt.scene) == len(init.scene)
    assert gt.aabb is not None
    assert float(gt.scene.fixed_visibility.min()) < 0.5
    assert torch.allclose(init.lighting.sun_direction, gt.lighting.sun_direction)

    priors = dataset.load_priors()
    view = priors.get(0)
    assert view.albedo.shape == (8, 8, 3)
    assert view.visibility.shape == (8, 8)
    assert math.isclose(float(dataset.lighting_model("light_1").sun_direction.norm()), 1.0)
