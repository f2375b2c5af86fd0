"""
Gaussian primitives, cameras and screen-space projection.

Conventions used throughout the package:

- Tensors are ``torch.float64`` on the CPU.
- Quaternions are stored as (w, x, y, z).
- Cameras follow the OpenCV convention: x right, y down, z forward.
  ``rotation``/``translation`` map world points into camera space
  (``p_cam = R @ p_world + t``).
- Integer pixel coordinates are pixel centers; column ``u``, row ``v``.
- The world is z-up.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch

from .errors import InvalidParameterError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
SCREEN_DILATION = 0.3
MIN_SCALE = 1e-6
ORTHO_MARGIN = 1.05
UP_TIE_BREAK = 0.99

PERSPECTIVE = "perspective"
ORTHOGRAPHIC = "orthographic"

Vector = Union[Sequence[float], torch.Tensor]
AABB = Tuple[torch.Tensor, torch.Tensor]


def as_tensor(value: Any) -> torch.Tensor:
    """Convert ``value`` to a float64 tensor without copying when possible."""
    if isinstance(value, torch.Tensor):
        return value.to(DTYPE)
    return torch.as_tensor(value, dtype=DTYPE)


def normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return torch.nn.functional.normalize(v, dim=-1, eps=eps)


def _require_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not bool(torch.isfinite(t.detach()).all()):
            raise InvalidParameterError(f"{name}: non-finite input")


# ---------------------------------------------------------------------------
# Rotations and covariances
# ---------------------------------------------------------------------------

def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    The quaternion is normalized first, so gradients see the unit-sphere
    parameterization.
    """
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


def matrix_to_quaternion(matrix: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`quaternion_to_matrix` for a single 3x3 rotation."""
    m = as_tensor(matrix)
    trace = float(m[0, 0] + m[1, 1] + m[2, 2])
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + float(m[0, 0] - m[1, 1] - m[2, 2])) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + float(m[1, 1] - m[0, 0] - m[2, 2])) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + float(m[2, 2] - m[0, 0] - m[1, 1])) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    out = torch.stack([as_tensor(v) for v in q])
    return out / out.norm()


def covariance3d(rotation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """
    Build 3D covariances ``R S Sᵀ Rᵀ`` from quaternions and per-axis scales.

    Args:
        rotation: (..., 4) unit quaternions (w, x, y, z).
        scale: (..., 3) positive standard deviations in world units.

    Returns:
        torch.Tensor: (..., 3, 3) symmetric positive definite matrices.

    Raises:
        InvalidParameterError: If any input is non-finite.

    Examples:
        >>> covariance3d(torch.tensor([1., 0, 0, 0]), torch.tensor([1., 2, 3]))
        tensor([[1., 0., 0.],
                [0., 4., 0.],
                [0., 0., 9.]])
    """
    rotation = as_tensor(rotation)
    scale = as_tensor(scale)
    _require_finite("covariance3d", rotation, scale)
    m = quaternion_to_matrix(rotation) * scale.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


# ---------------------------------------------------------------------------
# Primitives and the scene container
# ---------------------------------------------------------------------------

@dataclass
class GaussianPrimitive:
    """One Gaussian with its appearance and material attributes."""

    position: Tuple[float, float, float]
    rotation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    scale: Tuple[float, float, float] = (0.1, 0.1, 0.1)
    opacity: float = 1.0
    base_color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    albedo: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    roughness: float = 0.5
    metallic: float = 0.0
    ambient_occlusion: float = 1.0
    fixed_visibility: float = 1.0
    label: int = 0

    @property
    def normal(self) -> Tuple[float, float, float]:
        """Unit axis of the smallest scale component."""
        r = quaternion_to_matrix(as_tensor(self.rotation))
        axis = int(torch.argmin(as_tensor(self.scale)))
        return tuple(float(v) for v in r[:, axis])  # type: ignore[return-value]

    def validate(self) -> None:
        """Raise :class:`InvalidParameterError` if an invariant is violated."""
        values = [*self.position, *self.rotation, *self.scale, self.opacity, *self.base_color,
                  *self.albedo, self.roughness, self.metallic, self.ambient_occlusion,
                  self.fixed_visibility]
        if not all(math.isfinite(v) for v in values):
            raise InvalidParameterError("primitive has non-finite fields")
        qnorm = math.sqrt(sum(c * c for c in self.rotation))
        if abs(qnorm - 1.0) > 1e-6:
            raise InvalidParameterError(f"quaternion norm {qnorm} is not 1")
        if min(self.scale) <= 0:
            raise InvalidParameterError(f"scale {self.scale} must be positive")
        unit = [self.opacity, *self.base_color, *self.albedo, self.roughness, self.metallic,
                self.ambient_occlusion, self.fixed_visibility]
        if min(unit) < 0 or max(unit) > 1:
            raise InvalidParameterError("unit-range attribute outside [0, 1]")


# (name, per-Gaussian width) of every float attribute carried by a scene.
SCENE_FIELDS: Tuple[Tuple[str, int], ...] = (
    ("positions", 3),
    ("rotations", 4),
    ("scales", 3),
    ("opacities", 1),
    ("base_colors", 3),
    ("albedo", 3),
    ("roughness", 1),
    ("metallic", 1),
    ("ambient_occlusion", 1),
    ("fixed_visibility", 1),
)
UNIT_RANGE_FIELDS = ("opacities", "base_colors", "albedo", "roughness", "metallic",
                     "ambient_occlusion", "fixed_visibility")
GEOMETRY_FIELDS = ("positions", "rotations", "scales", "opacities")
MATERIAL_FIELDS = ("albedo", "roughness", "metallic", "ambient_occlusion", "fixed_visibility")


@dataclass
class GaussianScene:
    """
    Struct-of-tensors container for N Gaussian primitives.

    Scalar attributes are stored as (N,) tensors, vectors as (N, k).
    ``labels`` holds the semantic class (0 ground/road, 1 building, 2 object)
    used for the smooth-region mask. ``aabb`` optionally pins the scene box
    used to frame the light camera; otherwise it is derived from the means.
    """

    positions: torch.Tensor
    rotations: torch.Tensor
    scales: torch.Tensor
    opacities: torch.Tensor
    base_colors: torch.Tensor
    albedo: torch.Tensor
    roughness: torch.Tensor
    metallic: torch.Tensor
    ambient_occlusion: torch.Tensor
    fixed_visibility: torch.Tensor
    labels: torch.Tensor
    aabb: Optional[AABB] = None

    def __post_init__(self) -> None:
        n = self.positions.shape[0]
        for name, width in SCENE_FIELDS:
            value = getattr(self, name)
            expected = (n,) if width == 1 else (n, width)
            if tuple(value.shape) != expected:
                raise InvalidParameterError(
                    f"scene field {name} has shape {tuple(value.shape)}, expected {expected}")
        if tuple(self.labels.shape) != (n,):
            raise InvalidParameterError("labels must have one entry per Gaussian")

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls.from_primitives([])

    @classmethod
    def from_primitives(cls, primitives: Iterable[GaussianPrimitive],
                        aabb: Optional[AABB] = None) -> "GaussianScene":
        prims = list(primitives)

        def column(attr: str, width: int) -> torch.Tensor:
            if not prims:
                return torch.zeros((0,) if width == 1 else (0, width), dtype=DTYPE)
            return torch.tensor([getattr(p, attr) for p in prims], dtype=DTYPE)

        return cls(
            positions=column("position", 3),
            rotations=column("rotation", 4),
            scales=column("scale", 3),
            opacities=column("opacity", 1),
            base_colors=column("base_color", 3),
            albedo=column("albedo", 3),
            roughness=column("roughness", 1),
            metallic=column("metallic", 1),
            ambient_occlusion=column("ambient_occlusion", 1),
            fixed_visibility=column("fixed_visibility", 1),
            labels=torch.tensor([p.label for p in prims], dtype=torch.long),
            aabb=aabb,
        )

    def to_primitives(self) -> List[GaussianPrimitive]:
        out = []
        d = {name: getattr(self, name).detach().tolist() for name, _ in SCENE_FIELDS}
        labels = self.labels.tolist()
        for i in range(len(self)):
            out.append(GaussianPrimitive(
                position=tuple(d["positions"][i]),
                rotation=tuple(d["rotations"][i]),
                scale=tuple(d["scales"][i]),
                opacity=d["opacities"][i],
                base_color=tuple(d["base_colors"][i]),
                albedo=tuple(d["albedo"][i]),
                roughness=d["roughness"][i],
                metallic=d["metallic"][i],
                ambient_occlusion=d["ambient_occlusion"][i],
                fixed_visibility=d["fixed_visibility"][i],
                label=int(labels[i]),
            ))
        return out

    def tensors(self) -> Dict[str, torch.Tensor]:
        """Float attributes by field name."""
        return {name: getattr(self, name) for name, _ in SCENE_FIELDS}

    def replace(self, **changes: Any) -> "GaussianScene":
        return dataclasses.replace(self, **changes)

    def clone(self) -> "GaussianScene":
        """Detached deep copy."""
        changes = {name: t.detach().clone() for name, t in self.tensors().items()}
        return self.replace(labels=self.labels.clone(), **changes)

    def with_leaves(self, fields: Iterable[str]) -> Tuple["GaussianScene", Dict[str, torch.Tensor]]:
        """Copy whose ``fields`` are fresh leaf tensors requiring gradients."""
        leaves = {name: getattr(self, name).detach().clone().requires_grad_(True) for name in fields}
        return self.replace(**leaves), leaves

    def select(self, index: torch.Tensor) -> "GaussianScene":
        """Sub-scene by boolean mask or integer index."""
        changes = {name: t[index] for name, t in self.tensors().items()}
        return self.replace(labels=self.labels[index], **changes)

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        changes = {name: torch.cat([t, getattr(other, name)], 0) for name, t in self.tensors().items()}
        return self.replace(labels=torch.cat([self.labels, other.labels], 0), **changes)

    def rotation_matrices(self) -> torch.Tensor:
        return quaternion_to_matrix(self.rotations)

    def covariances(self) -> torch.Tensor:
        return covariance3d(self.rotations, self.scales)

    def normals(self) -> torch.Tensor:
        """(N, 3) rotated axis of each Gaussian's smallest scale."""
        r = self.rotation_matrices()
        axis = torch.argmin(self.scales.detach(), dim=-1)
        return r.gather(2, axis.view(-1, 1, 1).expand(-1, 3, 1)).squeeze(-1)

    @torch.no_grad()
    def clamp_(self) -> "GaussianScene":
        """Restore every attribute invariant in place."""
        q = self.rotations
        norm = q.norm(dim=-1, keepdim=True)
        identity = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=q.dtype)
        q.copy_(torch.where(norm > 1e-12, q / norm.clamp_min(1e-12), identity))
        self.scales.clamp_(min=MIN_SCALE)
        for name in UNIT_RANGE_FIELDS:
            getattr(self, name).clamp_(0.0, 1.0)
        return self


def scene_aabb(scene: GaussianScene) -> AABB:
    """
    Axis-aligned box around the scene.

    Uses the pinned ``scene.aabb`` when present; otherwise the means padded
    by three times each Gaussian's largest scale. An empty scene without a
    pinned box gets the cube [-1, 1]^3.
    """
    if scene.aabb is not None:
        return as_tensor(scene.aabb[0]), as_tensor(scene.aabb[1])
    if len(scene) == 0:
        return -torch.ones(3, dtype=DTYPE), torch.ones(3, dtype=DTYPE)
    pos = scene.positions.detach()
    pad = 3.0 * scene.scales.detach().max(dim=-1, keepdim=True).values
    return (pos - pad).min(0).values, (pos + pad).max(0).values


def aabb_diagonal(aabb: AABB) -> float:
    return float((aabb[1] - aabb[0]).norm())


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass
class DirectionalSun:
    """Sun direction S_d (scene toward sun) and RGB intensity S_i."""

    direction: torch.Tensor
    intensity: torch.Tensor = field(default_factory=lambda: torch.ones(3, dtype=DTYPE))

    def __post_init__(self) -> None:
        self.direction = as_tensor(self.direction)
        if not isinstance(self.intensity, torch.Tensor):
            self.intensity = as_tensor(self.intensity)
        _require_finite("DirectionalSun", self.direction, self.intensity)
        if abs(float(self.direction.norm()) - 1.0) > 1e-6:
            raise InvalidParameterError("sun direction must be a unit vector")
        if bool((self.intensity.detach() < 0).any()):
            raise InvalidParameterError("sun intensity must be non-negative")

    @classmethod
    def from_vector(cls, direction: Vector, intensity: Vector = (1.0, 1.0, 1.0)) -> "DirectionalSun":
        d = as_tensor(direction)
        if float(d.norm()) == 0.0:
            raise InvalidParameterError("sun direction must be non-zero")
        return cls(direction=d / d.norm(), intensity=as_tensor(intensity))


@dataclass
class Camera:
    """
    Pinhole or orthographic camera.

    Perspective cameras use ``fx, fy, cx, cy`` in pixels. Orthographic
    cameras use ``extent``, the half-width of the view in world units, with
    square pixels of ``width / (2 * extent)`` pixels per unit.
    """

    kind: str
    width: int
    height: int
    rotation: torch.Tensor
    translation: torch.Tensor
    fx: float = 0.0
    fy: float = 0.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    extent: float = 0.0
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self) -> None:
        self.rotation = as_tensor(self.rotation).detach()
        self.translation = as_tensor(self.translation).detach()
        if self.kind not in (PERSPECTIVE, ORTHOGRAPHIC):
            raise InvalidParameterError(f"unknown camera kind: {self.kind}")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("camera resolution must be at least 1x1")
        if not (0 < self.near < self.far):
            raise InvalidParameterError(f"camera needs 0 < near < far, got {self.near}, {self.far}")
        if tuple(self.rotation.shape) != (3, 3) or tuple(self.translation.shape) != (3,):
            raise InvalidParameterError("camera pose must be a 3x3 rotation and a 3-vector")
        _require_finite("Camera", self.rotation, self.translation)
        err = (self.rotation @ self.rotation.T - torch.eye(3, dtype=DTYPE)).abs().max()
        if float(err) > 1e-6:
            raise InvalidParameterError("camera rotation is not orthonormal")
        if self.kind == PERSPECTIVE and (self.fx <= 0 or self.fy <= 0):
            raise InvalidParameterError("perspective camera needs positive focal lengths")
        if self.kind == ORTHOGRAPHIC and self.extent <= 0:
            raise InvalidParameterError("orthographic camera needs a positive extent")
        if self.cx is None:
            self.cx = (self.width - 1) / 2.0
        if self.cy is None:
            self.cy = (self.height - 1) / 2.0

    # -- construction -------------------------------------------------------

    @staticmethod
    def look_at_rotation(eye: Vector, target: Vector, up: Vector = (0.0, 0.0, 1.0)) -> torch.Tensor:
        """World-to-camera rotation with rows (right, down, forward)."""
        eye, target, up = as_tensor(eye), as_tensor(target), as_tensor(up)
        f = target - eye
        if float(f.norm()) == 0.0:
            raise InvalidParameterError("look_at: eye and target coincide")
        f = f / f.norm()
        x = torch.linalg.cross(f, up)
        if float(x.norm()) < 1e-9:
            raise InvalidParameterError("look_at: view direction parallel to up vector")
        x = x / x.norm()
        y = torch.linalg.cross(f, x)
        return torch.stack([x, y, f])

    @classmethod
    def look_at(cls, eye: Vector, target: Vector, up: Vector = (0.0, 0.0, 1.0), *,
                width: int, height: int, kind: str = PERSPECTIVE,
                fov_y: Optional[float] = None, focal: Optional[float] = None,
                extent: Optional[float] = None, near: float = 0.01, far: float = 100.0) -> "Camera":
        """
        Camera at ``eye`` looking at ``target``.

        Args:
            eye: Camera center in world space.
            target: Point the optical axis passes through.
            up: World up hint; must not be parallel to the view direction.
            width, height: Resolution in pixels.
            kind: ``"perspective"`` or ``"orthographic"``.
            fov_y: Vertical field of view in degrees (perspective).
            focal: Focal length in pixels, used instead of ``fov_y``.
            extent: Half-width in world units (orthographic).
            near, far: Clip planes.

        Returns:
            Camera: The configured camera.
        """
        rotation = cls.look_at_rotation(eye, target, up)
        translation = -rotation @ as_tensor(eye)
        if kind == ORTHOGRAPHIC:
            return cls(kind=kind, width=width, height=height, rotation=rotation,
                       translation=translation, extent=float(extent or 1.0), near=near, far=far)
        if focal is None:
            fov = math.radians(fov_y if fov_y is not None else 60.0)
            focal = (height / 2.0) / math.tan(fov / 2.0)
        return cls(kind=kind, width=width, height=height, rotation=rotation,
                   translation=translation, fx=float(focal), fy=float(focal), near=near, far=far)

    def with_pose(self, rotation: torch.Tensor, translation: torch.Tensor) -> "Camera":
        return dataclasses.replace(self, rotation=rotation, translation=translation)

    def with_resolution(self, width: int, height: int) -> "Camera":
        """Same view at another resolution (intrinsics rescaled)."""
        sx, sy = width / self.width, height / self.height
        if self.kind == ORTHOGRAPHIC:
            return dataclasses.replace(self, width=width, height=height,
                                       cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                                       extent=self.extent)
        return dataclasses.replace(self, width=width, height=height, fx=self.fx * sx,
                                   fy=self.fy * sy, cx=(self.cx + 0.5) * sx - 0.5,
                                   cy=(self.cy + 0.5) * sy - 0.5)

    # -- properties ---------------------------------------------------------

    @property
    def is_orthographic(self) -> bool:
        return self.kind == ORTHOGRAPHIC

    @property
    def pixels_per_unit(self) -> float:
        return self.width / (2.0 * self.extent)

    @property
    def focal(self) -> Tuple[float, float]:
        if self.is_orthographic:
            p = self.pixels_per_unit
            return p, p
        return self.fx, self.fy

    @property
    def center(self) -> torch.Tensor:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> torch.Tensor:
        return self.rotation[2]

    # -- transforms ---------------------------------------------------------

    def world_to_camera(self, points: torch.Tensor) -> torch.Tensor:
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: torch.Tensor) -> torch.Tensor:
        return (points - self.translation) @ self.rotation

    def project_points(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Pixel coordinates (..., 2) and camera-space depth (...,) of world points."""
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        fx, fy = self.focal
        if self.is_orthographic:
            u = fx * cam[..., 0] + self.cx
            v = fy * cam[..., 1] + self.cy
        else:
            zs = z.clamp_min(self.near)
            u = fx * cam[..., 0] / zs + self.cx
            v = fy * cam[..., 1] / zs + self.cy
        return torch.stack([u, v], -1), z

    def pixel_grid(self) -> torch.Tensor:
        """(H, W, 2) pixel-center coordinates (u, v)."""
        v, u = torch.meshgrid(torch.arange(self.height, dtype=DTYPE),
                              torch.arange(self.width, dtype=DTYPE), indexing="ij")
        return torch.stack([u, v], -1)

    def _camera_rays(self) -> torch.Tensor:
        grid = self.pixel_grid()
        fx, fy = self.focal
        x = (grid[..., 0] - self.cx) / fx
        y = (grid[..., 1] - self.cy) / fy
        return torch.stack([x, y, torch.ones_like(x)], -1)

    def ray_directions(self) -> torch.Tensor:
        """(H, W, 3) unit world-space viewing directions, camera toward scene."""
        if self.is_orthographic:
            return self.forward.expand(self.height, self.width, 3).clone()
        return normalize(self._camera_rays() @ self.rotation)

    def unproject(self, depth: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) world points for a camera-space depth map."""
        rays = self._camera_rays()
        if self.is_orthographic:
            cam = torch.stack([rays[..., 0], rays[..., 1], depth], -1)
        else:
            cam = rays * depth.unsqueeze(-1)
        return self.camera_to_world(cam)

    def view_directions(self, points: torch.Tensor) -> torch.Tensor:
        """Unit vectors from ``points`` toward the camera."""
        if self.is_orthographic:
            return (-self.forward).expand_as(points).clone()
        return normalize(self.center - points)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "extent": self.extent,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Camera":
        return cls(
            kind=data["kind"],
            width=int(data["width"]),
            height=int(data["height"]),
            rotation=as_tensor(data["rotation"]),
            translation=as_tensor(data["translation"]),
            fx=float(data.get("fx", 0.0)),
            fy=float(data.get("fy", 0.0)),
            cx=data.get("cx"),
            cy=data.get("cy"),
            extent=float(data.get("extent", 0.0)),
            near=float(data["near"]),
            far=float(data["far"]),
        )


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass
class ProjectedGaussians:
    """Screen-space footprint of every Gaussian for one camera."""

    means2d: torch.Tensor
    cov2d: torch.Tensor
    depths: torch.Tensor
    visible: torch.Tensor


def projection_jacobian(cam_points: torch.Tensor, camera: Camera) -> torch.Tensor:
    """(N, 2, 3) first-order projection Jacobian at camera-space points."""
    n = cam_points.shape[0]
    fx, fy = camera.focal
    if camera.is_orthographic:
        j = torch.zeros(n, 2, 3, dtype=DTYPE)
        j[:, 0, 0] = fx
        j[:, 1, 1] = fy
        return j
    x, y = cam_points[:, 0], cam_points[:, 1]
    z = cam_points[:, 2].clamp_min(camera.near)
    zero = torch.zeros_like(z)
    row0 = torch.stack([fx / z, zero, -fx * x / (z * z)], -1)
    row1 = torch.stack([zero, fy / z, -fy * y / (z * z)], -1)
    return torch.stack([row0, row1], -2)


def project_gaussians(positions: torch.Tensor, cov3d: torch.Tensor,
                      camera: Camera) -> ProjectedGaussians:
    """
    Project all Gaussians into ``camera``.

    ``cov2d = J W Σ Wᵀ Jᵀ + 0.3 I`` with J the projection Jacobian at the
    camera-space mean. Gaussians outside ``near < z < far`` are flagged
    not visible; their footprints stay finite.
    """
    cam = camera.world_to_camera(positions)
    depths = cam[:, 2]
    t = projection_jacobian(cam, camera) @ camera.rotation
    cov2d = t @ cov3d @ t.transpose(-1, -2)
    cov2d = cov2d + SCREEN_DILATION * torch.eye(2, dtype=DTYPE)
    means2d, _ = camera.project_points(positions)
    visible = (depths.detach() > camera.near) & (depths.detach() < camera.far)
    visible &= torch.isfinite(means2d.detach()).all(-1) & torch.isfinite(cov2d.detach()).flatten(1).all(-1)
    return ProjectedGaussians(means2d=means2d, cov2d=cov2d, depths=depths, visible=visible)


def project_gaussian(cov: torch.Tensor, position: torch.Tensor,
                     camera: Camera) -> Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Single-Gaussian projection: (mean2d, cov2d, depth), or None when culled."""
    proj = project_gaussians(as_tensor(position).view(1, 3), as_tensor(cov).view(1, 3, 3), camera)
    if not bool(proj.visible[0]):
        return None
    return proj.means2d[0], proj.cov2d[0], proj.depths[0]


def mahalanobis_2d(d: torch.Tensor, cov: torch.Tensor) -> torch.Tensor:
    """``dᵀ Σ⁻¹ d`` for (..., 2) offsets and broadcastable (..., 2, 2) covariances."""
    a = cov[..., 0, 0]
    b = cov[..., 0, 1]
    c = cov[..., 1, 1]
    det = a * c - b * b
    dx, dy = d[..., 0], d[..., 1]
    return (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det


def gaussian_weight_2d(x: torch.Tensor, mean: torch.Tensor, cov: torch.Tensor) -> torch.Tensor:
    """``exp(-½ dᵀ Σ⁻¹ d)`` with ``d = x - mean``."""
    return torch.exp(-0.5 * mahalanobis_2d(as_tensor(x) - as_tensor(mean), as_tensor(cov)))


# ---------------------------------------------------------------------------
# Light camera
# ---------------------------------------------------------------------------

def aabb_corners(aabb: AABB) -> torch.Tensor:
    lo, hi = aabb
    corners = [[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
               for i in range(8)]
    return torch.tensor([[float(c) for c in corner] for corner in corners], dtype=DTYPE)


def light_ortho_camera(sun: DirectionalSun, aabb: AABB, resolution: int = 128) -> Camera:
    """
    Orthographic camera looking along ``-S_d`` that frames ``aabb``.

    The eye sits two box radii from the box center toward the sun; the
    extent and clip planes contain every corner with a 5% margin. The up
    hint is world +z unless the sun is within ``acos(0.99)`` of the z axis,
    then world +x.

    Raises:
        InvalidParameterError: If the box is non-finite, inverted or a point.
    """
    lo, hi = as_tensor(aabb[0]), as_tensor(aabb[1])
    if not bool(torch.isfinite(lo).all() and torch.isfinite(hi).all()):
        raise InvalidParameterError("scene AABB is not finite")
    if bool((hi < lo).any()):
        raise InvalidParameterError("scene AABB is inverted")
    radius = 0.5 * float((hi - lo).norm())
    if radius <= 0.0:
        raise InvalidParameterError("scene AABB is degenerate")
    d = sun.direction.detach()
    up = (1.0, 0.0, 0.0) if abs(float(d[2])) > UP_TIE_BREAK else (0.0, 0.0, 1.0)
    c = 0.5 * (lo + hi)
    eye = c + d * 2.0 * radius
    rotation = Camera.look_at_rotation(eye, c, up)
    translation = -rotation @ eye
    cam = (aabb_corners((lo, hi)) - eye) @ rotation.T
    extent = float(cam[:, :2].abs().max()) * ORTHO_MARGIN
    if extent <= 0.0:
        extent = radius * ORTHO_MARGIN
    return Camera(kind=ORTHOGRAPHIC, width=resolution, height=resolution, rotation=rotation,
                  translation=translation, extent=extent,
                  near=2.0 * radius - ORTHO_MARGIN * radius,
                  far=2.0 * radius + ORTHO_MARGIN * radius)
