"""
Scene and dataset files.

A scene file is JSON holding every Gaussian record, the sun, the scene box
and the indirect predictor; the environment map and sky texture live next
to it as PFM files. A dataset file lists cameras with their image paths,
split tags and ground-truth buffers.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch

from .errors import InvalidInputError, InvalidParameterError
from .geometry import AABB, Camera, GaussianPrimitive, GaussianScene, as_tensor
from .images import read_image, read_pfm_tensor, write_pfm
from .priors import PriorBundle
from .shading import LightingModel, predictor_from_dict

logger = logging.getLogger(__name__)

SCENE_VERSION = 1
DATASET_VERSION = 1
SPLITS = ("train", "test")

PathLike = Union[str, Path]


def _read_json(path: Path, what: str) -> Dict[str, Any]:
    if not path.is_file():
        raise InvalidInputError(f"{what} not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"{what} {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise InvalidInputError(f"{what} {path} must hold a JSON object")
    return data


def _check_version(data: Dict[str, Any], expected: int, path: Path) -> None:
    if "version" not in data:
        raise InvalidInputError(f"{path} has no version tag")
    if data["version"] != expected:
        raise InvalidInputError(f"{path} has unsupported version {data['version']}")


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

@dataclass
class SceneFile:
    """A scene with the lighting it was captured or optimized under."""

    scene: GaussianScene
    lighting: LightingModel

    @property
    def aabb(self) -> Optional[AABB]:
        return self.scene.aabb


def _primitive_record(p: GaussianPrimitive) -> Dict[str, Any]:
    return {
        "position": list(p.position),
        "rotation": list(p.rotation),
        "scale": list(p.scale),
        "opacity": p.opacity,
        "base_color": list(p.base_color),
        "albedo": list(p.albedo),
        "roughness": p.roughness,
        "metallic": p.metallic,
        "ambient_occlusion": p.ambient_occlusion,
        "fixed_visibility": p.fixed_visibility,
        "label": p.label,
    }


def _primitive_from_record(record: Dict[str, Any], index: int) -> GaussianPrimitive:
    try:
        p = GaussianPrimitive(
            position=tuple(float(v) for v in record["position"]),  # type: ignore[arg-type]
            rotation=tuple(float(v) for v in record["rotation"]),  # type: ignore[arg-type]
            scale=tuple(float(v) for v in record["scale"]),  # type: ignore[arg-type]
            opacity=float(record["opacity"]),
            base_color=tuple(float(v) for v in record["base_color"]),  # type: ignore[arg-type]
            albedo=tuple(float(v) for v in record["albedo"]),  # type: ignore[arg-type]
            roughness=float(record["roughness"]),
            metallic=float(record["metallic"]),
            ambient_occlusion=float(record.get("ambient_occlusion", 1.0)),
            fixed_visibility=float(record.get("fixed_visibility", 1.0)),
            label=int(record.get("label", 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidInputError(f"Gaussian record {index} is malformed: {e}")
    try:
        p.validate()
    except InvalidParameterError as e:
        raise InvalidInputError(f"Gaussian record {index} is invalid: {e}")
    return p


def save_scene(path: PathLike, scene: GaussianScene, lighting: LightingModel) -> Path:
    """
    Write ``scene`` and ``lighting`` to ``path`` plus two PFM side files.

    Returns:
        Path: The scene file written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    env_name = f"{path.stem}_environment.pfm"
    sky_name = f"{path.stem}_sky.pfm"
    write_pfm(path.parent / env_name, lighting.environment.detach())
    write_pfm(path.parent / sky_name, lighting.sky_texture.detach())
    data: Dict[str, Any] = {
        "version": SCENE_VERSION,
        "gaussians": [_primitive_record(p) for p in scene.to_primitives()],
        "sun": {"direction": lighting.sun_direction.tolist(),
                "intensity": lighting.sun_intensity.detach().tolist()},
        "environment": env_name,
        "sky_texture": sky_name,
        "env_levels": lighting.env_levels,
        "predictor": lighting.predictor.to_dict(),
        "aabb": ([scene.aabb[0].tolist(), scene.aabb[1].tolist()]
                 if scene.aabb is not None else None),
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
    logger.debug(f"Saved scene with {len(scene)} Gaussians to {path}")
    return path


def load_scene(path: PathLike) -> SceneFile:
    """
    Read a scene file written by :func:`save_scene`.

    Raises:
        InvalidInputError: If the file, a side file or a record is invalid.
    """
    path = Path(path)
    data = _read_json(path, "scene file")
    _check_version(data, SCENE_VERSION, path)
    records = data.get("gaussians")
    if not isinstance(records, list):
        raise InvalidInputError(f"{path} has no Gaussian list")
    aabb = None
    if data.get("aabb") is not None:
        lo, hi = data["aabb"]
        aabb = (as_tensor(lo), as_tensor(hi))
    scene = GaussianScene.from_primitives(
        [_primitive_from_record(r, i) for i, r in enumerate(records)], aabb=aabb)
    try:
        sun = data["sun"]
        environment = read_pfm_tensor(path.parent / data["environment"])
        sky = read_pfm_tensor(path.parent / data["sky_texture"])
        lighting = LightingModel(sun_direction=sun["direction"],
                                 sun_intensity=as_tensor(sun["intensity"]),
                                 environment=environment, sky_texture=sky,
                                 predictor=predictor_from_dict(data.get("predictor", {})),
                                 env_levels=int(data.get("env_levels", 5)))
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidInputError(f"scene file {path} has an invalid lighting record: {e}")
    logger.debug(f"Loaded scene with {len(scene)} Gaussians from {path}")
    return SceneFile(scene=scene, lighting=lighting)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class LightingRecord:
    """One capture lighting: sun and environment."""

    name: str
    sun_direction: List[float]
    sun_intensity: List[float]
    environment: str

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "sun_direction": self.sun_direction,
                "sun_intensity": self.sun_intensity, "environment": self.environment}


@dataclass
class DatasetView:
    """A camera with its images under each lighting and its split tag."""

    index: int
    camera: Camera
    split: str
    images: Dict[str, str]
    buffers: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"index": self.index, "split": self.split, "camera": self.camera.to_dict(),
                "images": self.images, "buffers": self.buffers}


@dataclass
class Dataset:
    """
    Views of one scene, with paths relative to ``root``.

    The first lighting is the training lighting; the rest are held out for
    relighting evaluation. ``priors`` names the directory of ground-truth
    buffers in :class:`PriorBundle` layout, if any.
    """

    root: Path
    views: List[DatasetView]
    lightings: List[LightingRecord]
    scene: Optional[str] = None
    init_scene: Optional[str] = None
    priors: Optional[str] = None

    @property
    def train_views(self) -> List[DatasetView]:
        return [v for v in self.views if v.split == "train"]

    @property
    def test_views(self) -> List[DatasetView]:
        return [v for v in self.views if v.split == "test"]

    def lighting_names(self) -> List[str]:
        return [record.name for record in self.lightings]

    def image(self, view: DatasetView, lighting: Optional[str] = None) -> torch.Tensor:
        """Ground-truth image of ``view``; the training lighting by default."""
        name = lighting if lighting is not None else self.lightings[0].name
        if name not in view.images:
            raise InvalidInputError(f"view {view.index} has no image under lighting {name}")
        return read_image(self.root / view.images[name])

    def lighting_model(self, name: Optional[str] = None) -> LightingModel:
        """Lighting record as a model; the predictor is left at zero."""
        record = self.lightings[0] if name is None else self._lighting(name)
        environment = read_pfm_tensor(self.root / record.environment)
        return LightingModel(sun_direction=record.sun_direction,
                             sun_intensity=as_tensor(record.sun_intensity),
                             environment=environment)

    def _lighting(self, name: str) -> LightingRecord:
        for record in self.lightings:
            if record.name == name:
                return record
        raise InvalidInputError(f"dataset has no lighting named {name}")

    def load_priors(self) -> Optional[PriorBundle]:
        if self.priors is None:
            return None
        return PriorBundle.load(self.root / self.priors)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": DATASET_VERSION,
            "scene": self.scene,
            "init_scene": self.init_scene,
            "priors": self.priors,
            "lightings": [record.to_dict() for record in self.lightings],
            "views": [view.to_dict() for view in self.views],
        }

    def save(self, path: Optional[PathLike] = None) -> Path:
        path = Path(path) if path is not None else self.root / "dataset.json"
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        return path


def _parse_view(record: Dict[str, Any]) -> DatasetView:
    split = record.get("split", "train")
    if split not in SPLITS:
        raise InvalidInputError(f"view {record.get('index')} has unknown split {split}")
    return DatasetView(index=int(record["index"]), camera=Camera.from_dict(record["camera"]),
                       split=split, images=dict(record["images"]),
                       buffers=dict(record.get("buffers", {})))


def load_dataset(path: PathLike) -> Dataset:
    """
    Read a dataset file; ``path`` may also be its directory.

    Raises:
        InvalidInputError: If the file is malformed, a referenced file is
                           missing or there is no training view.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    data = _read_json(path, "dataset file")
    _check_version(data, DATASET_VERSION, path)
    root = path.parent
    try:
        lightings = [LightingRecord(name=str(r["name"]), sun_direction=list(r["sun_direction"]),
                                    sun_intensity=list(r["sun_intensity"]),
                                    environment=str(r["environment"]))
                     for r in data["lightings"]]
        views = [_parse_view(r) for r in data["views"]]
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidInputError(f"dataset file {path} is malformed: {e}")
    if not lightings:
        raise InvalidInputError(f"dataset file {path} lists no lighting")
    dataset = Dataset(root=root, views=views, lightings=lightings, scene=data.get("scene"),
                      init_scene=data.get("init_scene"), priors=data.get("priors"))
    if not dataset.train_views:
        raise InvalidInputError(f"dataset file {path} has no training view")
    missing = [rel for view in views
               for rel in list(view.images.values()) + list(view.buffers.values())
               if not (root / rel).is_file()]
    missing += [r.environment for r in lightings if not (root / r.environment).is_file()]
    if missing:
        raise InvalidInputError(f"dataset {path} references missing files: {', '.join(missing[:5])}")
    logger.debug(f"Loaded dataset {path}: {len(dataset.train_views)} train, "
                 f"{len(dataset.test_views)} test views")
    return dataset
