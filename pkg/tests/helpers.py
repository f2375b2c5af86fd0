"""Scene and camera builders shared by the tests."""

import math

import torch

from shadowsplat.geometry import Camera, GaussianPrimitive, GaussianScene


def front_camera(width=8, height=8, distance=5.0, fov_y=50.0):
    """Perspective camera on the -y axis looking at the origin."""
    return Camera.look_at((0.0, -distance, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                          width=width, height=height, fov_y=fov_y)


def top_camera(width=16, height=16, height_above=4.0, fov_y=60.0):
    """Perspective camera straight above the origin."""
    return Camera.look_at((0.0, 0.0, height_above), (0.0, 0.0, 0.0), (1.0, 0.0, 0.0),
                          width=width, height=height, fov_y=fov_y)


def random_scene(count, seed=0, spread=0.8, material=True):
    """Small isotropic-ish Gaussians scattered around the origin."""
    gen = torch.Generator().manual_seed(seed)

    def uniform(*shape, lo=0.0, hi=1.0):
        return lo + (hi - lo) * torch.rand(*shape, generator=gen, dtype=torch.float64)

    prims = []
    for _ in range(count):
        q = torch.randn(4, generator=gen, dtype=torch.float64)
        q = q / q.norm()
        prims.append(GaussianPrimitive(
            position=tuple(uniform(3, lo=-spread, hi=spread).tolist()),
            rotation=tuple(q.tolist()),
            scale=tuple(uniform(3, lo=0.15, hi=0.35).tolist()),
            opacity=float(uniform(1, lo=0.3, hi=0.9)),
            base_color=tuple(uniform(3).tolist()),
            albedo=tuple(uniform(3).tolist()) if material else (0.5, 0.5, 0.5),
            roughness=float(uniform(1, lo=0.2, hi=0.9)) if material else 0.5,
            metallic=float(uniform(1, hi=0.5)) if material else 0.0,
            ambient_occlusion=float(uniform(1, lo=0.6, hi=1.0)) if material else 1.0,
            fixed_visibility=float(uniform(1, lo=0.3, hi=1.0)) if material else 1.0,
        ))
    return GaussianScene.from_primitives(prims)


def flat_quaternion(normal_axis="z"):
    """Rotation whose smallest-scale axis (z of the local frame) points along ``normal_axis``."""
    if normal_axis == "z":
        return (1.0, 0.0, 0.0, 0.0)
    if normal_axis == "x":
        # 90 degrees about y maps local z to world x
        return (math.cos(math.pi / 4), 0.0, math.sin(math.pi / 4), 0.0)
    if normal_axis == "y":
        # -90 degrees about x maps local z to world y
        return (math.cos(math.pi / 4), -math.sin(math.pi / 4), 0.0, 0.0)
    raise ValueError(normal_axis)


def ground_plane(size=2.0, spacing=0.25, z=0.0, thickness=0.01, opacity=0.99):
    """Grid of flat Gaussians tiling a square in the z = ``z`` plane."""
    prims = []
    steps = int(round(size / spacing))
    for i in range(steps + 1):
        for j in range(steps + 1):
            x = -size / 2 + i * spacing
            y = -size / 2 + j * spacing
            prims.append(GaussianPrimitive(position=(x, y, z), scale=(spacing * 0.6,
                                                                      spacing * 0.6, thickness),
                                           opacity=opacity, base_color=(0.7, 0.7, 0.7),
                                           albedo=(0.7, 0.7, 0.7)))
    return prims
