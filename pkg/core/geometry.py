"""
Triangle meshes, rigid similarity poses and pinhole cameras.

Conventions used across the toolkit:
- world space is right-handed and faces look toward +z;
- a camera's extrinsic pose maps world points into its frame, where +z runs
  along the optical axis, image x grows to the right and image y grows down;
- pixel (row r, col c) has its centre at (c + 0.5, r + 0.5).
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from core.exceptions import GeometryError, NonProjectableError

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-6


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unit vectors along `axis`; zero vectors stay zero."""
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v, dtype=np.float64), where=norm > 0)


def face_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Unnormalized triangle normals; their length is twice the triangle area."""
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    return np.cross(v1 - v0, v2 - v0)


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident triangle normals, normalized."""
    fn = face_normals(vertices, triangles)
    acc = np.zeros_like(vertices, dtype=np.float64)
    for k in range(3):
        np.add.at(acc, triangles[:, k], fn)
    normals = normalize(acc)
    # isolated vertices get an arbitrary but valid unit normal
    lonely = np.linalg.norm(normals, axis=1) == 0
    normals[lonely] = (0.0, 0.0, 1.0)
    return normals


@dataclass(frozen=True)
class Mesh:
    """A triangle mesh with per-vertex UVs and unit normals. Immutable after construction."""
    vertices: np.ndarray
    triangles: np.ndarray
    uv_coords: np.ndarray
    vertex_normals: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        uv = np.asarray(self.uv_coords, dtype=np.float64).reshape(-1, 2)
        normals = np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
        n = len(vertices)
        if len(uv) != n or len(normals) != n:
            raise GeometryError(f"Mesh has {n} vertices but {len(uv)} UVs and {len(normals)} normals")
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= n):
            raise GeometryError("Triangle index out of range")
        if n and np.abs(np.linalg.norm(normals, axis=1) - 1.0).max() > 1e-6:
            raise GeometryError("Vertex normals must be unit length")
        if n and (uv.min() < 0.0 or uv.max() > 1.0):
            raise GeometryError("UV coordinates must lie in [0,1]^2")
        for name, arr in (("vertices", vertices), ("triangles", triangles),
                          ("uv_coords", uv), ("vertex_normals", normals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_geometry(cls, vertices: np.ndarray, triangles: np.ndarray, uv_coords: np.ndarray) -> "Mesh":
        """Builds a mesh and derives its vertex normals from the triangles."""
        vertices = np.asarray(vertices, dtype=np.float64)
        triangles = np.asarray(triangles, dtype=np.int64)
        return cls(vertices, triangles, uv_coords, vertex_normals(vertices, triangles))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)


@dataclass(frozen=True)
class RigidPose:
    """Similarity transform x -> s * R x + t."""
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise GeometryError("R must be a proper rotation matrix")
        if not self.s > 0:
            raise GeometryError(f"Scale must be positive, got {self.s}")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", float(self.s))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_rotvec(cls, rotvec: np.ndarray, t: np.ndarray, s: float = 1.0) -> "RigidPose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), t, s)

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.R).as_rotvec()

    def transform(self, points: np.ndarray) -> np.ndarray:
        return self.s * (np.asarray(points) @ self.R.T) + self.t

    def rotate(self, directions: np.ndarray) -> np.ndarray:
        return np.asarray(directions) @ self.R.T

    def inverse(self) -> "RigidPose":
        R_inv = self.R.T
        return RigidPose(R_inv, -(R_inv @ self.t) / self.s, 1.0 / self.s)


def reorthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest proper rotation to `R` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def geodesic_angle(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Rotation angle in radians of R_aᵀ R_b."""
    cos = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


# --- Spherical parametrization of unit normals ---

def normal_to_spherical(n: np.ndarray, frame: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    (θ, φ) of unit vectors: θ is the polar angle from the frame's +z in [0, π],
    φ the azimuth in (−π, π]. At the poles φ is 0. `frame` maps local to world
    coordinates; identity by default.
    """
    n = normalize(np.asarray(n, dtype=np.float64))
    if frame is not None:
        n = n @ np.asarray(frame)  # Rᵀn, row-wise
    theta = np.arccos(np.clip(n[..., 2], -1.0, 1.0))
    rho = np.hypot(n[..., 0], n[..., 1])
    phi = np.where(rho > 0, np.arctan2(n[..., 1], n[..., 0]), 0.0)
    phi = np.where(phi == -np.pi, np.pi, phi)
    return theta, phi


def spherical_to_normal(theta: np.ndarray, phi: np.ndarray, frame: np.ndarray = None) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    n = np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)
    return n if frame is None else n @ np.asarray(frame).T


def spherical_jacobian(theta: np.ndarray, phi: np.ndarray, frame: np.ndarray = None) -> np.ndarray:
    """(..., 3, 2) ∂n/∂(θ, φ) of `spherical_to_normal`."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    d_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
    d_phi = np.stack([-st * sp, st * cp, np.zeros_like(st)], axis=-1)
    if frame is not None:
        d_theta = d_theta @ np.asarray(frame).T
        d_phi = d_phi @ np.asarray(frame).T
    return np.stack([d_theta, d_phi], axis=-1)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; `extrinsic` maps world points into the camera frame."""
    focal: float
    principal_point: Tuple[float, float]
    extrinsic: RigidPose
    resolution: Tuple[int, int]  # (width, height)

    def __post_init__(self):
        width, height = (int(v) for v in self.resolution)
        cx, cy = (float(v) for v in self.principal_point)
        if not self.focal > 0:
            raise GeometryError(f"Focal length must be positive, got {self.focal}")
        if width <= 0 or height <= 0:
            raise GeometryError(f"Invalid resolution {self.resolution}")
        if not (0.0 <= cx <= width and 0.0 <= cy <= height):
            raise GeometryError(f"Principal point ({cx}, {cy}) lies outside the {width}x{height} image")
        if abs(self.extrinsic.s - 1.0) > 1e-12:
            raise GeometryError("Camera extrinsics must not scale")
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "principal_point", (cx, cy))
        object.__setattr__(self, "resolution", (width, height))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.extrinsic.R.T @ self.extrinsic.t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return self.extrinsic.transform(points)

    def project_camera_frame(self, points_cam: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points; no depth check."""
        points_cam = np.asarray(points_cam, dtype=np.float64)
        xy = points_cam[..., :2] / points_cam[..., 2:3]
        return self.focal * xy + np.asarray(self.principal_point)

    def project_points(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Projects world points; returns (pixels, depths) without raising."""
        cam = self.to_camera(points)
        depth = cam[..., 2]
        safe = np.where(depth > NEAR_PLANE, depth, 1.0)
        pixels = self.focal * cam[..., :2] / safe[..., None] + np.asarray(self.principal_point)
        return pixels, depth


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 1.0, 0.0)) -> RigidPose:
    """
    World->camera pose for a camera at `eye` looking at `target`.

    World `up` maps to image up, i.e. camera -y.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = normalize(np.asarray(target, dtype=np.float64) - eye)
    right = normalize(np.cross(forward, np.asarray(up, dtype=np.float64)))
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return RigidPose(R, -R @ eye, 1.0)


def apply_pose(mesh: Mesh, pose: RigidPose) -> Mesh:
    """Returns the mesh with vertices s*R*v + t and normals rotated by R."""
    vertices = pose.transform(mesh.vertices)
    normals = normalize(pose.rotate(mesh.vertex_normals))
    return Mesh(vertices, mesh.triangles, mesh.uv_coords, normals)


def project(camera: Camera, point: np.ndarray) -> np.ndarray:
    """Projects one world point to pixel coordinates."""
    cam = camera.to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    if cam[2] <= NEAR_PLANE:
        raise NonProjectableError(f"Point at camera depth {cam[2]:.6g} cannot be projected")
    return camera.project_camera_frame(cam)
