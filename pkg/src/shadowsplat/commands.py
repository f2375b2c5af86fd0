"""Handlers behind each shadowsplat subcommand."""

import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import torch

from .benchmark import run_benchmark
from .config import TrainConfig, load_config
from .errors import InvalidInputError, InvalidParameterError
from .exporter import evaluate_directories, export_report, format_table, summarize
from .geometry import Camera, GaussianScene, aabb_diagonal, as_tensor, normalize, scene_aabb
from .gradcheck import gradcheck
from .images import read_pfm_tensor, save_visibility, write_pfm, write_png
from .pipeline import ShadedRender, render_shaded
from .priors import PriorBundle, synthetic_prior_provider
from .sceneio import Dataset, SceneFile, load_dataset, load_scene, save_scene
from .shading import LightingModel
from .shadow import build_shadow_map
from .synthetic import SyntheticSpec, generate_synthetic_scene, load_synthetic_spec
from .trainer import TrainingView, make_novel_views, train

GRADCHECK_VIEW = (1.0, -1.0, 0.8)
GRADCHECK_FOV = 50.0
RUN_FILE = "run.json"


def _seed(args: Any, fallback: int = 0) -> int:
    return args.seed if args.seed is not None else fallback


def _threads(args: Any, fallback: int = 1) -> int:
    threads = args.threads if args.threads is not None else fallback
    torch.set_num_threads(threads)
    return threads


def _dataset_for(args: Any) -> Dataset:
    """
    ``--data`` when given, otherwise the dataset next to the scene file, or
    the one recorded in ``run.json`` by the train run that wrote the scene.

    Raises:
        InvalidInputError: If ``run.json`` is unreadable.
    """
    if getattr(args, "data", None):
        return load_dataset(args.data)
    folder = Path(args.scene).parent
    run = folder / RUN_FILE
    if not (folder / "dataset.json").is_file() and run.is_file():
        try:
            with open(run) as fh:
                return load_dataset(json.load(fh)["data"])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise InvalidInputError(f"run record {run} is invalid: {e}")
    return load_dataset(folder)


def _write_image(path: Path, image: torch.Tensor) -> None:
    if path.suffix.lower() == ".pfm":
        write_pfm(path, image)
    else:
        write_png(path, image)


def _dump_gbuffer(folder: Path, shaded: ShadedRender) -> None:
    g = shaded.gbuffer
    for name in ("albedo", "roughness", "metallic", "normal", "depth", "alpha",
                 "ambient_occlusion", "fixed_visibility"):
        write_pfm(folder / f"{name}.pfm", getattr(g, name))
    write_pfm(folder / "visibility.pfm", shaded.visibility)
    save_visibility(folder / "visibility.png", shaded.visibility)
    write_png(folder / "normal.png", g.normal * 0.5 + 0.5)


# ---------------------------------------------------------------------------
# gen-scene
# ---------------------------------------------------------------------------

def run_gen_scene(args: Any, logger: logging.Logger) -> Dataset:
    spec = load_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    dataset = generate_synthetic_scene(spec, args.out, threads=_threads(args))
    logger.info("\n📊 Dataset Summary:")
    logger.info(f"   • {len(dataset.views)} views ({len(dataset.train_views)} train, "
                f"{len(dataset.test_views)} test)")
    logger.info(f"   • {len(dataset.lightings)} lightings: {', '.join(dataset.lighting_names())}")
    logger.info(f"   • written to {Path(args.out).resolve()}")
    return dataset


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config(args: Any) -> TrainConfig:
    cfg = load_config(args.config)
    changes: Dict[str, Any] = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _provider(cfg: TrainConfig, priors: Optional[PriorBundle], logger: logging.Logger):
    if cfg.provider.kind == "none":
        return None
    if cfg.provider.kind != "synthetic":
        raise InvalidInputError(f"unknown prior provider: {cfg.provider.kind}")
    maps = priors.material_maps() if priors is not None else {}
    if not maps:
        logger.warning("Dataset has no material buffers; training without a prior provider")
        return None
    return synthetic_prior_provider(maps, cfg.provider.corruption())


def run_train(args: Any, logger: logging.Logger) -> Path:
    cfg = _train_config(args)
    _threads(args, cfg.threads)
    torch.manual_seed(cfg.seed)
    dataset = load_dataset(args.data)
    if args.scene:
        start = load_scene(args.scene)
    elif dataset.init_scene:
        start = load_scene(dataset.root / dataset.init_scene)
    else:
        raise InvalidInputError("no --scene given and the dataset names no init_scene")
    views = [TrainingView(index=v.index, camera=v.camera, image=dataset.image(v))
             for v in dataset.train_views]
    priors = dataset.load_priors()
    gt: Optional[SceneFile] = load_scene(dataset.root / dataset.scene) if dataset.scene else None
    novel = make_novel_views(cfg, gt.scene if gt else None, gt.lighting if gt else None)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    with open(out / RUN_FILE, "w") as fh:
        json.dump({"version": 1, "data": str(dataset.root.resolve())}, fh, indent=2)
    logger.info(f"Training stage {args.stage} on {len(views)} views, "
                f"{len(start.scene)} Gaussians")
    result = train(start.scene, start.lighting, views, cfg, priors,
                   _provider(cfg, priors, logger), novel, args.stage, out)
    lighting = result.lighting if result.lighting is not None else start.lighting
    path = save_scene(out / "scene.json", result.scene, lighting)

    logger.info("\n📊 Training Summary:")
    logger.info(f"   • {result.steps} steps, {len(result.scene)} Gaussians")
    logger.info(f"   • {len(result.densify_events)} densification events")
    if result.trace:
        logger.info(f"   • final loss {result.trace[-1]['total']:.6f}")
    logger.info(f"   • scene written to {path}")
    return path


# ---------------------------------------------------------------------------
# render / relight
# ---------------------------------------------------------------------------

def _camera(args: Any) -> Camera:
    """``--camera`` as a dataset view index or a camera JSON file."""
    text = args.camera
    if text.isdigit():
        index = int(text)
        for view in _dataset_for(args).views:
            if view.index == index:
                return view.camera
        raise InvalidParameterError(f"dataset has no view {index}")
    path = Path(text)
    if not path.is_file():
        raise InvalidInputError(f"camera file not found: {path}")
    try:
        with open(path) as fh:
            return Camera.from_dict(json.load(fh))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise InvalidInputError(f"camera file {path} is invalid: {e}")


def run_render(args: Any, logger: logging.Logger) -> ShadedRender:
    threads = _threads(args)
    torch.manual_seed(_seed(args))
    loaded = load_scene(args.scene)
    camera = _camera(args)
    with torch.no_grad():
        shaded = render_shaded(loaded.scene, loaded.lighting, camera, "editable", threads=threads,
                               shadow_resolution=args.shadow_resolution)
    out = Path(args.out)
    _write_image(out, shaded.image)
    logger.info(f"Rendered {camera.width}x{camera.height} view to {out}")
    if args.gbuffer:
        _dump_gbuffer(Path(args.gbuffer), shaded)
        logger.info(f"G-buffer written to {args.gbuffer}")
    if args.shadowmap and shaded.shadow_map is not None:
        save_visibility(args.shadowmap, shaded.shadow_map.depth)
        logger.info(f"Shadow map written to {args.shadowmap}")
    return shaded


def relit_lighting(base: LightingModel, sun_direction=None, sun_intensity=None,
                   environment: Optional[torch.Tensor] = None) -> LightingModel:
    """
    ``base`` with a new sun and/or environment.

    The indirect predictor carries over; the sky texture follows a new
    environment.
    """
    lighting = base.with_sun(sun_direction, sun_intensity)
    if environment is not None:
        lighting = lighting.with_environment(environment)
    return lighting


def run_relight(args: Any, logger: logging.Logger) -> List[Path]:
    threads = _threads(args)
    torch.manual_seed(_seed(args))
    if not any([args.sun_dir, args.sun_intensity, args.env, args.lighting]):
        raise InvalidParameterError("relight needs --sun-dir, --sun-intensity, --env or --lighting")
    loaded = load_scene(args.scene)
    dataset = _dataset_for(args)
    sun_dir, sun_intensity, environment = args.sun_dir, args.sun_intensity, None
    if args.lighting:
        target = dataset.lighting_model(args.lighting)
        sun_dir = sun_dir or target.sun_direction
        sun_intensity = sun_intensity or target.sun_intensity
        environment = target.environment
    if args.env:
        environment = read_pfm_tensor(args.env)
    if sun_dir is not None and float(as_tensor(sun_dir).norm()) == 0.0:
        raise InvalidParameterError("sun direction must be non-zero")
    lighting = relit_lighting(loaded.lighting, sun_dir, sun_intensity, environment)

    scene = loaded.scene
    box = scene_aabb(scene)
    views = {"all": dataset.views, "train": dataset.train_views,
             "test": dataset.test_views}[args.views]
    out = Path(args.out)
    written = []
    with torch.no_grad():
        shadow_map = build_shadow_map(scene, lighting.sun, args.shadow_resolution, threads, box)
        env = lighting.prefiltered()
        save_visibility(out / "shadowmap.png", shadow_map.depth)
        for view in views:
            shaded = render_shaded(scene, lighting, view.camera, "editable", threads=threads,
                                   shadow_map=shadow_map, environment=env, aabb=box)
            stem = out / f"view_{view.index:04d}"
            write_pfm(stem.with_suffix(".pfm"), shaded.image)
            write_png(stem.with_suffix(".png"), shaded.image)
            written.append(stem.with_suffix(".pfm"))
    logger.info(f"Relit {len(written)} views to {out}")
    return written


# ---------------------------------------------------------------------------
# gradcheck / eval / bench-shadow
# ---------------------------------------------------------------------------

def gradcheck_camera(scene: GaussianScene, resolution: int) -> Camera:
    """Oblique view framing the whole scene."""
    lo, hi = scene_aabb(scene)
    center = (lo + hi) / 2
    eye = center + normalize(as_tensor(GRADCHECK_VIEW)) * aabb_diagonal((lo, hi))
    return Camera.look_at(tuple(eye.tolist()), tuple(center.tolist()), (0.0, 0.0, 1.0),
                          width=resolution, height=resolution, fov_y=GRADCHECK_FOV)


def run_gradcheck(args: Any, logger: logging.Logger):
    threads = _threads(args)
    seed = _seed(args)
    torch.manual_seed(seed)
    loaded = load_scene(args.scene)
    camera = gradcheck_camera(loaded.scene, args.resolution)
    report = gradcheck(loaded.scene, loaded.lighting, camera, args.loss, rtol=args.tol,
                       atol=args.atol, samples=args.samples, seed=seed, threads=threads)
    logger.info("\n📊 Gradient Check Summary:")
    logger.info(f"   • loss {report.loss}, {len(report.checks)} parameters checked")
    logger.info(f"   • {report.pass_rate:.2%} within rtol={report.rtol:g}, atol={report.atol:g}")
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        logger.info(f"Written to JSON: {path}")
    return report.require()


def run_eval(args: Any, logger: logging.Logger) -> Dict[str, Any]:
    rows, missing = evaluate_directories(args.pred, args.gt)
    if not rows:
        raise InvalidInputError(f"no prediction in {args.pred} matches an image in {args.gt}")
    summary = summarize(rows, missing)
    export_report(rows, summary, args.report)
    logger.info(format_table(rows, summary))
    return summary


def run_bench_shadow(args: Any, logger: logging.Logger) -> Dict[str, Any]:
    threads = _threads(args)
    loaded = load_scene(args.scene)
    if len(loaded.scene) == 0:
        raise InvalidInputError(f"scene {args.scene} has no Gaussians")
    return run_benchmark(loaded.scene, loaded.lighting.sun, args.resolution, threads,
                         count=args.points, seed=_seed(args), repeats=args.repeats,
                         out=logger.info)


HANDLERS: Dict[str, Callable[[Any, logging.Logger], Any]] = {
    "gen-scene": run_gen_scene,
    "train": run_train,
    "render": run_render,
    "relight": run_relight,
    "gradcheck": run_gradcheck,
    "eval": run_eval,
    "bench-shadow": run_bench_shadow,
}
