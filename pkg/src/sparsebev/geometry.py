"""Frames, rigid transforms, pinhole cameras, grid indexing and depth bins.

Conventions
-----------
* camera frame: +Z forward, +X right, +Y down
* ego frame:    +X forward, +Y left, +Z up
* grid cells are half-open, ``[origin + i*cell, origin + (i+1)*cell)``

Geometry is evaluated in float64. Scalar and vectorized entry points share
the same elementwise formulas so that both paths round identically; the
pooling index table relies on this to agree with the reference lift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

# Tolerances used across the package.
ROTATION_TOL = 1e-6
TRANSFORM_TOL = 1e-9
ROUNDTRIP_TOL = 1e-6
FEATURE_DTYPE = np.float32


class Vec3(NamedTuple):
    x: float
    y: float
    z: float


# R is indexed R[i][j] so that both numpy arrays and nested tuples of Python
# floats work; written out so that scalars and arrays round identically.
def _apply_rt(R, t, x, y, z):
    ox = R[0][0] * x + R[0][1] * y + R[0][2] * z + t[0]
    oy = R[1][0] * x + R[1][1] * y + R[1][2] * z + t[1]
    oz = R[2][0] * x + R[2][1] * y + R[2][2] * z + t[2]
    return ox, oy, oz


def _apply_rt_inverse(R, t, x, y, z):
    dx, dy, dz = x - t[0], y - t[1], z - t[2]
    ox = R[0][0] * dx + R[1][0] * dy + R[2][0] * dz
    oy = R[0][1] * dx + R[1][1] * dy + R[2][1] * dz
    oz = R[0][2] * dx + R[1][2] * dy + R[2][2] * dz
    return ox, oy, oz


def rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > ROTATION_TOL or abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        # Python-float copies for the scalar code paths
        object.__setattr__(self, "_R", tuple(tuple(float(c) for c in row) for row in R))
        object.__setattr__(self, "_t", tuple(float(c) for c in t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_z(yaw), translation)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def apply(self, points) -> np.ndarray:
        """Transform a point ``(3,)`` or a batch ``(N, 3)``."""
        p = np.asarray(points, dtype=np.float64)
        x, y, z = _apply_rt(self.rotation, self.translation, p[..., 0], p[..., 1], p[..., 2])
        return np.stack([x, y, z], axis=-1)

    def apply_inverse(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        x, y, z = _apply_rt_inverse(self.rotation, self.translation, p[..., 0], p[..., 1], p[..., 2])
        return np.stack([x, y, z], axis=-1)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "RigidTransform", atol: float = TRANSFORM_TOL) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    Rt = a.rotation.T
    return RigidTransform(Rt, -(Rt @ a.translation))


# Rotation taking camera axes (X right, Y down, Z forward) to an ego-forward
# looking camera (X forward, Y left, Z up).
_CAM_TO_EGO_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_ego: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @classmethod
    def looking(cls, yaw: float, *, width=704, height=256, hfov_deg=70.0,
                position=(0.0, 0.0, 1.6)) -> "CameraModel":
        """Level camera at ``position`` whose optical axis has ego yaw ``yaw``."""
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        R = rotation_z(yaw) @ _CAM_TO_EGO_BASE
        return cls(f, f, width / 2.0, height / 2.0, width, height, RigidTransform(R, position))

    def feature_shape(self, stride: int) -> tuple[int, int]:
        return -(-self.height // stride), -(-self.width // stride)

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_ego.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "cam_to_ego": self.cam_to_ego.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   RigidTransform.from_dict(d["cam_to_ego"]))


def default_camera_rig(n: int = 6, **kwargs) -> list[CameraModel]:
    """``n`` cameras at equal yaw increments, the first looking forward."""
    return [CameraModel.looking(2.0 * math.pi * i / n, **kwargs) for i in range(n)]


def ego_to_camera(points, cam: CameraModel):
    p = np.asarray(points, dtype=np.float64)
    return _apply_rt_inverse(cam.cam_to_ego.rotation, cam.cam_to_ego.translation,
                             p[..., 0], p[..., 1], p[..., 2])


def project(p, cam: CameraModel) -> Optional[tuple[float, float, float]]:
    """Pinhole projection of an ego-frame point; ``None`` outside the frustum."""
    u, v, z, ok = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), cam)
    if not ok[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def project_points(points, cam: CameraModel):
    """Vectorized :func:`project`. Returns ``(u, v, depth, valid)``."""
    x, y, z = ego_to_camera(points, cam)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x / z + cam.cx
        v = cam.fy * y / z + cam.cy
    valid = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, z, valid


def unproject(u: float, v: float, depth: float, cam: CameraModel) -> Vec3:
    """Ego-frame point seen at pixel ``(u, v)`` with camera depth ``depth``."""
    if not depth > 0:
        raise ValueError("depth must be positive")
    xc = (u - cam.cx) / cam.fx * depth
    yc = (v - cam.cy) / cam.fy * depth
    T = cam.cam_to_ego
    return Vec3(*_apply_rt(T._R, T._t, xc, yc, float(depth)))


def unproject_points(u, v, depth, cam: CameraModel):
    """Vectorized :func:`unproject`; returns ego-frame ``(x, y, z)`` arrays."""
    xc = (u - cam.cx) / cam.fx * depth
    yc = (v - cam.cy) / cam.fy * depth
    return _apply_rt(cam.cam_to_ego.rotation, cam.cam_to_ego.translation, xc, yc, depth)


@dataclass(frozen=True)
class DepthBins:
    d_min: float
    d_max: float
    count: int

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        if self.count < 1:
            raise ValueError("need at least one depth bin")

    @property
    def step(self) -> float:
        return (self.d_max - self.d_min) / self.count

    def center(self, i):
        return self.d_min + (i + 0.5) * self.step

    def centers(self) -> np.ndarray:
        return self.center(np.arange(self.count, dtype=np.float64))

    def index_of(self, depth):
        """Bin containing ``depth`` (equivalently, nearest bin center); -1 outside."""
        d = np.asarray(depth, dtype=np.float64)
        idx = np.floor((d - self.d_min) / self.step).astype(np.int64)
        idx = np.where((idx >= 0) & (idx < self.count), idx, -1)
        return int(idx) if idx.ndim == 0 else idx


def _ceil_div(extent: float, cell: float) -> int:
    # guard against 400/0.5 style quotients landing a hair above an integer
    return int(math.ceil(round(extent / cell, 9)))


@dataclass(frozen=True)
class GridSpec2D:
    origin_x: float
    origin_y: float
    cell_size: float
    nx: int
    ny: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")

    @classmethod
    def centered(cls, range_m: float, cell_size: float) -> "GridSpec2D":
        """Square grid covering ``[-range_m, range_m)`` on both axes."""
        n = _ceil_div(2.0 * range_m, cell_size)
        return cls(-range_m, -range_m, cell_size, n, n)

    @property
    def shape(self) -> tuple[int, int]:
        return self.nx, self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_center(self, ix, iy):
        return (self.origin_x + (ix + 0.5) * self.cell_size,
                self.origin_y + (iy + 0.5) * self.cell_size)

    def cells_of(self, x, y):
        """Vectorized cell lookup; returns ``(ix, iy, valid)``."""
        ix = np.floor((np.asarray(x) - self.origin_x) / self.cell_size).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin_y) / self.cell_size).astype(np.int64)
        valid = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return ix, iy, valid

    def strided(self, stride: int) -> "GridSpec2D":
        return GridSpec2D(self.origin_x, self.origin_y, self.cell_size * stride,
                          -(-self.nx // stride), -(-self.ny // stride))

    def to_dict(self) -> dict:
        return {"origin_x": self.origin_x, "origin_y": self.origin_y,
                "cell_size": self.cell_size, "nx": self.nx, "ny": self.ny}


@dataclass(frozen=True)
class VoxelSpec3D:
    origin: tuple[float, float, float]
    cell_x: float
    cell_y: float
    cell_z: float
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        if min(self.cell_x, self.cell_y, self.cell_z) <= 0:
            raise ValueError("voxel sizes must be positive")
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("voxel grid needs at least one cell per axis")

    @classmethod
    def centered(cls, range_m: float, cell=(0.075, 0.075, 0.2), z_range=(-1.0, 3.0)) -> "VoxelSpec3D":
        cx, cy, cz = cell
        return cls((-range_m, -range_m, z_range[0]), cx, cy, cz,
                   _ceil_div(2 * range_m, cx), _ceil_div(2 * range_m, cy),
                   _ceil_div(z_range[1] - z_range[0], cz))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.nx, self.ny, self.nz

    @property
    def cell(self) -> tuple[float, float, float]:
        return self.cell_x, self.cell_y, self.cell_z

    def voxels_of(self, points):
        p = np.asarray(points, dtype=np.float64)
        idx = np.floor((p - np.array(self.origin)) / np.array(self.cell)).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=-1)
        return idx, valid

    def voxel_center(self, idx) -> np.ndarray:
        return np.array(self.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * np.array(self.cell)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "cell": list(self.cell), "shape": list(self.shape)}


def bev_cell_of(p, grid: GridSpec2D) -> Optional[tuple[int, int]]:
    ix = math.floor((p[0] - grid.origin_x) / grid.cell_size)
    iy = math.floor((p[1] - grid.origin_y) / grid.cell_size)
    if 0 <= ix < grid.nx and 0 <= iy < grid.ny:
        return ix, iy
    return None


def voxel_of(p, spec: VoxelSpec3D) -> Optional[tuple[int, int, int]]:
    idx, ok = spec.voxels_of(np.asarray(p, dtype=np.float64).reshape(3))
    return tuple(int(i) for i in idx) if ok else None
