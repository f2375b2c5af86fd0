"""
Synthetic scenes for training and evaluation.

A scene description names a ground plane, boxes and spheres; each surface
becomes a layer of flat Gaussians whose shortest axis is the surface
normal. Ground-truth images are rendered under up to three lighting
configurations (the first for training, the others for relighting), and
every view gets its ground-truth material, normal, visibility and mask
buffers.
"""

import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from .environment import procedural_sky
from .errors import InvalidInputError, InvalidParameterError
from .geometry import (DTYPE, Camera, GaussianScene, aabb_diagonal, as_tensor,
                       matrix_to_quaternion, normalize, scene_aabb)
from .images import write_pfm, write_png
from .pipeline import RAY_OFFSET_FRACTION, RAY_TMIN_FRACTION, render_shaded
from .priors import ground_truth_priors
from .sceneio import Dataset, DatasetView, LightingRecord, save_scene
from .shading import LightingModel
from .shadow import ray_traced_visibility_batch

logger = logging.getLogger(__name__)

MIN_GAUSSIANS = 30
MAX_GAUSSIANS = 2000
MAX_LIGHTINGS = 3
THICKNESS_FRACTION = 0.02
FOOTPRINT_FRACTION = 0.6
INIT_OPACITY = 0.95
LABEL_GROUND, LABEL_BUILDING, LABEL_OBJECT = 0, 1, 2

Vec3 = Tuple[float, float, float]


@dataclass
class SurfaceMaterial:
    albedo: Vec3 = (0.5, 0.5, 0.5)
    roughness: float = 0.6
    metallic: float = 0.0


@dataclass
class GroundSpec:
    """Square plane on z = 0 with side ``size``."""

    size: float = 3.0
    material: SurfaceMaterial = field(default_factory=lambda: SurfaceMaterial((0.45, 0.45, 0.42),
                                                                             0.8, 0.0))


@dataclass
class BoxSpec:
    center: Vec3 = (0.0, 0.0, 0.3)
    size: Vec3 = (0.6, 0.6, 0.6)
    material: SurfaceMaterial = field(default_factory=lambda: SurfaceMaterial((0.7, 0.3, 0.2),
                                                                             0.5, 0.0))
    label: int = LABEL_BUILDING


@dataclass
class SphereSpec:
    center: Vec3 = (0.8, 0.6, 0.3)
    radius: float = 0.3
    material: SurfaceMaterial = field(default_factory=lambda: SurfaceMaterial((0.2, 0.4, 0.7),
                                                                             0.3, 0.5))
    label: int = LABEL_OBJECT


@dataclass
class LightSpec:
    """Sun and a procedural sky."""

    sun_direction: Vec3 = (0.4, 0.3, 0.866)
    sun_intensity: Vec3 = (3.0, 3.0, 3.0)
    zenith: Vec3 = (0.25, 0.45, 0.9)
    horizon: Vec3 = (0.8, 0.85, 0.95)
    ground: Vec3 = (0.3, 0.28, 0.25)

    def lighting(self) -> LightingModel:
        env = procedural_sky(zenith=self.zenith, horizon=self.horizon, ground=self.ground)
        return LightingModel(sun_direction=self.sun_direction,
                             sun_intensity=as_tensor(self.sun_intensity), environment=env)


def _default_lightings() -> List[LightSpec]:
    return [
        LightSpec(),
        LightSpec(sun_direction=(-0.6, 0.2, 0.775), sun_intensity=(3.2, 2.8, 2.4),
                  zenith=(0.3, 0.4, 0.8), horizon=(0.9, 0.75, 0.6)),
        LightSpec(sun_direction=(0.1, -0.7, 0.707), sun_intensity=(2.5, 2.6, 3.0),
                  zenith=(0.2, 0.35, 0.85), horizon=(0.7, 0.8, 0.9)),
    ]


@dataclass
class ViewSpec:
    """Cameras on a ring around ``target``."""

    count: int = 20
    radius: float = 3.5
    elevation: float = 35.0
    resolution: int = 32
    fov_y: float = 50.0
    target: Vec3 = (0.0, 0.0, 0.2)


@dataclass
class SyntheticSpec:
    """
    Description of a synthetic scene.

    ``spacing`` is the distance between neighbouring Gaussians on every
    surface. Every ``test_stride``-th camera is held out for testing.
    ``init_noise`` is the positional noise of the initial training scene.
    """

    ground: Optional[GroundSpec] = field(default_factory=GroundSpec)
    boxes: List[BoxSpec] = field(default_factory=lambda: [BoxSpec()])
    spheres: List[SphereSpec] = field(default_factory=list)
    lightings: List[LightSpec] = field(default_factory=_default_lightings)
    views: ViewSpec = field(default_factory=ViewSpec)
    spacing: float = 0.25
    test_stride: int = 10
    init_noise: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= len(self.lightings) <= MAX_LIGHTINGS:
            raise InvalidParameterError(f"between 1 and {MAX_LIGHTINGS} lightings are supported")
        if self.spacing <= 0 or self.test_stride < 1 or self.views.count < 1:
            raise InvalidParameterError("spacing, test stride and view count must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticSpec":
        """
        Build from a parsed description; absent keys keep their defaults.

        Raises:
            InvalidInputError: On unknown keys or wrong types.
        """
        try:
            data = dict(data)
            kwargs: Dict[str, Any] = {}
            if "ground" in data:
                g = data.pop("ground")
                kwargs["ground"] = None if g is None else _ground(g)
            if "boxes" in data:
                kwargs["boxes"] = [_with_material(BoxSpec, b) for b in data.pop("boxes")]
            if "spheres" in data:
                kwargs["spheres"] = [_with_material(SphereSpec, s) for s in data.pop("spheres")]
            if "lightings" in data:
                kwargs["lightings"] = [LightSpec(**_tuples(l)) for l in data.pop("lightings")]
            if "views" in data:
                kwargs["views"] = ViewSpec(**_tuples(data.pop("views")))
            kwargs.update(data)
            return cls(**kwargs)
        except TypeError as e:
            raise InvalidInputError(f"invalid scene description: {e}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _tuples(data: Dict[str, Any]) -> Dict[str, Any]:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}


def _with_material(cls, data: Dict[str, Any]):
    data = _tuples(data)
    if "material" in data:
        data["material"] = SurfaceMaterial(**_tuples(data["material"]))
    return cls(**data)


def _ground(data: Dict[str, Any]) -> GroundSpec:
    return _with_material(GroundSpec, data)


def load_synthetic_spec(path: Union[str, Path]) -> SyntheticSpec:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"scene description not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"scene description {path} is not valid JSON: {e}")
    return SyntheticSpec.from_dict(data)


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def _tangent_frame(n: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=1)


def _orientation(n: np.ndarray) -> List[float]:
    return matrix_to_quaternion(torch.from_numpy(_tangent_frame(n))).tolist()


@dataclass
class _Surfels:
    points: List[np.ndarray] = field(default_factory=list)
    normals: List[np.ndarray] = field(default_factory=list)
    footprints: List[Tuple[float, float]] = field(default_factory=list)
    materials: List[SurfaceMaterial] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)

    def add(self, point, normal, footprint, material, label) -> None:
        self.points.append(np.asarray(point, dtype=np.float64))
        self.normals.append(np.asarray(normal, dtype=np.float64))
        self.footprints.append(footprint)
        self.materials.append(material)
        self.labels.append(label)


def _grid(length: float, spacing: float) -> Tuple[np.ndarray, float]:
    count = max(2, int(round(length / spacing)))
    step = length / count
    return (np.arange(count) + 0.5) * step - 0.5 * length, step


def _add_rectangle(surfels: _Surfels, center, u_axis, v_axis, normal, size_u, size_v,
                   spacing, material, label) -> None:
    us, du = _grid(size_u, spacing)
    vs, dv = _grid(size_v, spacing)
    for u in us:
        for v in vs:
            point = np.asarray(center) + u * np.asarray(u_axis) + v * np.asarray(v_axis)
            surfels.add(point, normal, (du, dv), material, label)


def _add_box(surfels: _Surfels, box: BoxSpec, spacing: float) -> None:
    c = np.asarray(box.center, dtype=np.float64)
    half = 0.5 * np.asarray(box.size, dtype=np.float64)
    axes = np.eye(3)
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for sign in (1.0, -1.0):
            if axis == 2 and sign < 0 and c[2] - half[2] <= 1e-9:
                continue  # face resting on the ground
            normal = sign * axes[axis]
            _add_rectangle(surfels, c + normal * half[axis], axes[u], axes[v], normal,
                           2 * half[u], 2 * half[v], spacing, box.material, box.label)


def _add_sphere(surfels: _Surfels, sphere: SphereSpec, spacing: float) -> None:
    r = sphere.radius
    count = max(8, int(round(4 * math.pi * r * r / (spacing * spacing))))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    step = math.sqrt(4 * math.pi * r * r / count)
    for i in range(count):
        z = 1.0 - 2.0 * (i + 0.5) / count
        ring = math.sqrt(max(1.0 - z * z, 0.0))
        n = np.array([ring * math.cos(golden * i), ring * math.sin(golden * i), z])
        surfels.add(np.asarray(sphere.center) + r * n, n, (step, step), sphere.material,
                    sphere.label)


def build_scene(spec: SyntheticSpec) -> GaussianScene:
    """
    Gaussian scene for ``spec`` with visibility left at 1.

    Raises:
        InvalidParameterError: If the Gaussian count falls outside [30, 2000].
    """
    surfels = _Surfels()
    if spec.ground is not None:
        _add_rectangle(surfels, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                       (0.0, 0.0, 1.0), spec.ground.size, spec.ground.size, spec.spacing,
                       spec.ground.material, LABEL_GROUND)
    for box in spec.boxes:
        _add_box(surfels, box, spec.spacing)
    for sphere in spec.spheres:
        _add_sphere(surfels, sphere, spec.spacing)
    n = len(surfels.points)
    if not MIN_GAUSSIANS <= n <= MAX_GAUSSIANS:
        raise InvalidParameterError(f"scene description yields {n} Gaussians; "
                                    f"between {MIN_GAUSSIANS} and {MAX_GAUSSIANS} are supported")
    thickness = THICKNESS_FRACTION * spec.spacing
    scales = [(FOOTPRINT_FRACTION * du, FOOTPRINT_FRACTION * dv, thickness)
              for du, dv in surfels.footprints]
    albedo = torch.tensor([m.albedo for m in surfels.materials], dtype=DTYPE)
    return GaussianScene(
        positions=torch.from_numpy(np.stack(surfels.points)).to(DTYPE),
        rotations=torch.tensor([_orientation(nrm) for nrm in surfels.normals], dtype=DTYPE),
        scales=torch.tensor(scales, dtype=DTYPE),
        opacities=torch.full((n,), INIT_OPACITY, dtype=DTYPE),
        base_colors=albedo.clone(),
        albedo=albedo,
        roughness=torch.tensor([m.roughness for m in surfels.materials], dtype=DTYPE),
        metallic=torch.tensor([m.metallic for m in surfels.materials], dtype=DTYPE),
        ambient_occlusion=torch.ones(n, dtype=DTYPE),
        fixed_visibility=torch.ones(n, dtype=DTYPE),
        labels=torch.tensor(surfels.labels, dtype=torch.long),
    )


def gaussian_visibility(scene: GaussianScene, sun_direction) -> torch.Tensor:
    """Ray-traced sun visibility at every Gaussian center, lifted off its surface."""
    diagonal = aabb_diagonal(scene_aabb(scene))
    with torch.no_grad():
        origins = scene.positions + scene.normals() * (RAY_OFFSET_FRACTION * diagonal)
        return ray_traced_visibility_batch(scene, origins, normalize(as_tensor(sun_direction)),
                                           t_min=RAY_TMIN_FRACTION * diagonal)


def ring_cameras(views: ViewSpec) -> List[Camera]:
    cameras = []
    elevation = math.radians(views.elevation)
    target = np.asarray(views.target, dtype=np.float64)
    for i in range(views.count):
        azimuth = 2 * math.pi * i / views.count
        eye = target + views.radius * np.array([math.cos(elevation) * math.cos(azimuth),
                                                math.cos(elevation) * math.sin(azimuth),
                                                math.sin(elevation)])
        cameras.append(Camera.look_at(tuple(eye), tuple(target), (0.0, 0.0, 1.0),
                                      width=views.resolution, height=views.resolution,
                                      fov_y=views.fov_y))
    return cameras


def split_tag(index: int, stride: int) -> str:
    """Every ``stride``-th view, counting from the last of each block, is a test view."""
    if stride <= 1:
        return "train"
    return "test" if index % stride == stride - 1 else "train"


def initial_scene(gt_scene: GaussianScene, noise: float, seed: int) -> GaussianScene:
    """Ground truth with jittered positions and reset appearance."""
    rng = np.random.default_rng(seed)
    n = len(gt_scene)
    offsets = torch.from_numpy(rng.normal(0.0, noise, size=(n, 3))) if noise > 0 else 0.0
    gray = torch.full((n, 3), 0.5, dtype=DTYPE)
    return gt_scene.clone().replace(
        positions=gt_scene.positions.detach() + offsets,
        base_colors=gray.clone(),
        albedo=gray,
        roughness=torch.full((n,), 0.5, dtype=DTYPE),
        metallic=torch.zeros(n, dtype=DTYPE),
        ambient_occlusion=torch.ones(n, dtype=DTYPE),
        fixed_visibility=torch.ones(n, dtype=DTYPE),
    )


def initial_lighting(sun_direction) -> LightingModel:
    """Known sun direction, unit intensity, uniform gray sky."""
    env = torch.full((16, 32, 3), 0.5, dtype=DTYPE)
    return LightingModel(sun_direction=sun_direction, environment=env)


def generate_synthetic_scene(spec: SyntheticSpec, out_dir: Union[str, Path],
                             threads: int = 1) -> Dataset:
    """
    Build the scene, render every view under every lighting and write a dataset.

    Layout of ``out_dir``::

        scene.json, init_scene.json     ground truth and training start
        dataset.json                    cameras, splits, image paths
        <lighting>/view_XXXX.{png,pfm}  ground-truth images
        <lighting>/environment.pfm
        gt/view_XXXX/...                material, normal, visibility, masks

    Returns:
        Dataset: The dataset just written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = build_scene(spec)
    lightings = [light.lighting() for light in spec.lightings]
    scene.fixed_visibility = gaussian_visibility(scene, lightings[0].sun_direction)
    scene = scene.replace(aabb=scene_aabb(scene))
    cameras = ring_cameras(spec.views)
    logger.info(f"Synthetic scene: {len(scene)} Gaussians, {len(cameras)} views, "
                f"{len(lightings)} lightings")

    save_scene(out / "scene.json", scene, lightings[0])
    save_scene(out / "init_scene.json",
               initial_scene(scene, spec.init_noise, spec.seed),
               initial_lighting(lightings[0].sun_direction))
    with open(out / "spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1)

    records = []
    images: Dict[int, Dict[str, str]] = {i: {} for i in range(len(cameras))}
    for li, lighting in enumerate(lightings):
        name = f"light_{li}"
        write_pfm(out / name / "environment.pfm", lighting.environment)
        records.append(LightingRecord(name=name, sun_direction=lighting.sun_direction.tolist(),
                                      sun_intensity=lighting.sun_intensity.tolist(),
                                      environment=f"{name}/environment.pfm"))
        env = lighting.prefiltered()
        for i, camera in enumerate(tqdm(cameras, desc=f"Rendering {name}",
                                        disable=sys.stdout is None)):
            with torch.no_grad():
                image = render_shaded(scene, lighting, camera, "editable", threads=threads,
                                      environment=env).image
            write_pfm(out / name / f"view_{i:04d}.pfm", image)
            write_png(out / name / f"view_{i:04d}.png", image)
            images[i][name] = f"{name}/view_{i:04d}.pfm"

    priors = ground_truth_priors(scene, lightings[0], cameras, threads)
    priors.save(out / "gt")
    views = []
    for i, camera in enumerate(cameras):
        folder = f"gt/view_{i:04d}"
        buffers = {n: f"{folder}/{n}.pfm" for n in ("albedo", "metallic", "roughness",
                                                     "visibility", "normal")}
        buffers.update({n: f"{folder}/{n}.png" for n in ("sky_mask", "smooth_mask")})
        views.append(DatasetView(index=i, camera=camera, split=split_tag(i, spec.test_stride),
                                 images=images[i], buffers=buffers))
    dataset = Dataset(root=out, views=views, lightings=records, scene="scene.json",
                      init_scene="init_scene.json", priors="gt")
    dataset.save()
    logger.info(f"Wrote dataset to {out}")
    return dataset


def point_in_box_shadow(point: Sequence[float], box: BoxSpec, sun_direction: Sequence[float]) -> bool:
    """True when the ground point's ray toward the sun passes through the box."""
    d = np.asarray(sun_direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    o = np.asarray(point, dtype=np.float64)
    lo = np.asarray(box.center) - 0.5 * np.asarray(box.size)
    hi = np.asarray(box.center) + 0.5 * np.asarray(box.size)
    t_near, t_far = 0.0, np.inf
    for axis in range(3):
        if abs(d[axis]) < 1e-12:
            if not lo[axis] <= o[axis] <= hi[axis]:
                return False
            continue
        t0, t1 = (lo[axis] - o[axis]) / d[axis], (hi[axis] - o[axis]) / d[axis]
        t_near, t_far = max(t_near, min(t0, t1)), min(t_far, max(t0, t1))
    return bool(t_near <= t_far)
