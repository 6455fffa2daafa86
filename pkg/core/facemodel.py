"""
Linear (PCA) face model of shape and diffuse albedo.

    S   = S̄ + A_id x_id + A_exp x_exp
    C_d = C̄_d + A_alb x_alb

The real statistical bases are not redistributable, so `generate_synthetic_model`
builds a stand-in: an ellipsoidal face cap with a nose-like bump, smooth random
deformation bases and a speckled albedo mean.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial import Delaunay

from core.exceptions import DimensionError, FormatError, ParameterError
from core.geometry import Mesh, face_normals, vertex_normals
from core.io import read_container, write_container
from core.raster import rasterize_uv
from core.shading import sh_basis
from core import rng

logger = logging.getLogger(__name__)

# Angular extent of the face cap: azimuth around the vertical axis and elevation.
CAP_AZIMUTH = np.deg2rad(100.0)
CAP_ELEVATION = np.deg2rad(70.0)
NOSE_UV = (0.5, 0.55)
NOSE_HEIGHT = 0.25
NOSE_WIDTH = 0.07
ALBEDO_BASIS_SCALE = 8.0  # colour scale of the albedo sigmas, RMS per vertex
N_LANDMARKS = 17


@dataclass(frozen=True)
class ParametricModel:
    """PCA face model; vectors are laid out vertex-major as (x0, y0, z0, x1, ...)."""
    mean_shape: np.ndarray   # (3z,)
    mean_albedo: np.ndarray  # (3z,) RGB in [0, 255]
    basis_id: np.ndarray     # (3z, K_id)
    basis_exp: np.ndarray    # (3z, K_exp)
    basis_alb: np.ndarray    # (3z, K_alb)
    sigma_id: np.ndarray
    sigma_exp: np.ndarray
    sigma_alb: np.ndarray
    triangles: np.ndarray    # (T, 3)
    uv_coords: np.ndarray    # (z, 2)
    ellipsoid_axes: np.ndarray = field(default_factory=lambda: np.array([0.8, 1.0, 0.9]))
    seed: int = 0

    def __post_init__(self):
        z3 = len(self.mean_shape)
        for name, basis, sigma in (("id", self.basis_id, self.sigma_id),
                                   ("exp", self.basis_exp, self.sigma_exp),
                                   ("alb", self.basis_alb, self.sigma_alb)):
            if basis.shape[0] != z3:
                raise DimensionError(f"basis_{name} has {basis.shape[0]} rows, expected {z3}")
            if basis.shape[1] != len(sigma):
                raise DimensionError(f"basis_{name} has {basis.shape[1]} columns but {len(sigma)} sigmas")
            if np.any(np.asarray(sigma) <= 0):
                raise ParameterError(f"sigma_{name} entries must be positive")
        if len(self.mean_albedo) != z3:
            raise DimensionError("mean_albedo length does not match mean_shape")
        if self.mean_albedo.min() < 0 or self.mean_albedo.max() > 255:
            raise ParameterError("mean_albedo entries must lie in [0, 255]")
        for name in ("mean_shape", "mean_albedo", "basis_id", "basis_exp", "basis_alb",
                     "sigma_id", "sigma_exp", "sigma_alb", "uv_coords", "ellipsoid_axes"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        tris = np.array(self.triangles, dtype=np.int64)
        tris.setflags(write=False)
        object.__setattr__(self, "triangles", tris)

    @property
    def n_vertices(self) -> int:
        return len(self.mean_shape) // 3

    @property
    def k_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def k_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def k_alb(self) -> int:
        return self.basis_alb.shape[1]


@dataclass(frozen=True)
class FitCoefficients:
    x_id: np.ndarray
    x_exp: np.ndarray
    x_alb: np.ndarray

    @classmethod
    def zeros(cls, model: ParametricModel) -> "FitCoefficients":
        return cls(np.zeros(model.k_id), np.zeros(model.k_exp), np.zeros(model.k_alb))

    def check(self, model: ParametricModel) -> None:
        for name, vec, k in (("x_id", self.x_id, model.k_id),
                             ("x_exp", self.x_exp, model.k_exp),
                             ("x_alb", self.x_alb, model.k_alb)):
            if np.asarray(vec).shape != (k,):
                raise DimensionError(f"{name} has shape {np.asarray(vec).shape}, model expects ({k},)")


# --- Synthesis ---

def shape_vector(model: ParametricModel, c: FitCoefficients) -> np.ndarray:
    c.check(model)
    return model.mean_shape + model.basis_id @ c.x_id + model.basis_exp @ c.x_exp


def synthesize_shape(model: ParametricModel, c: FitCoefficients) -> Mesh:
    """Mesh of the affine shape combination with recomputed area-weighted normals."""
    vertices = shape_vector(model, c).reshape(-1, 3)
    return Mesh.from_geometry(vertices, model.triangles, model.uv_coords)


def vertex_albedo(model: ParametricModel, c: FitCoefficients, clamp: bool = True) -> np.ndarray:
    """(z, 3) per-vertex diffuse albedo; clamped to [0, 255] after the linear combination."""
    c.check(model)
    albedo = (model.mean_albedo + model.basis_alb @ c.x_alb).reshape(-1, 3)
    return np.clip(albedo, 0.0, 255.0) if clamp else albedo


def synthesize_albedo(model: ParametricModel, c: FitCoefficients, resolution: int = 512) -> np.ndarray:
    """(R, R, 3) UV diffuse map splatted from the per-vertex albedo; zero off the surface."""
    uv_raster = rasterize_uv(model.triangles, model.uv_coords, resolution)
    return uv_raster.interpolate(model.triangles, vertex_albedo(model, c))


def mean_mesh(model: ParametricModel) -> Mesh:
    return synthesize_shape(model, FitCoefficients.zeros(model))


# --- Synthetic generator ---

def _lattice_uv(z: int) -> np.ndarray:
    """Deterministic near-uniform point set in the unit square, corners included."""
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    if z <= 4:
        return corners[:z] if z == 4 else corners
    n = z - 4
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    i = np.arange(n)
    inner = np.stack([(i + 0.5) / n, np.mod(0.5 + i * golden, 1.0)], axis=1)
    inner = 0.02 + 0.96 * inner
    return np.vstack([corners, inner])


def _cap_point(uv: np.ndarray, axes: np.ndarray) -> np.ndarray:
    az = (uv[:, 0] - 0.5) * 2.0 * CAP_AZIMUTH
    el = (0.5 - uv[:, 1]) * 2.0 * CAP_ELEVATION
    a, b, c = axes
    return np.stack([a * np.cos(el) * np.sin(az), b * np.sin(el), c * np.cos(el) * np.cos(az)], axis=1)


def _nose_offset(uv: np.ndarray) -> np.ndarray:
    d2 = ((uv[:, 0] - NOSE_UV[0]) ** 2 + (uv[:, 1] - NOSE_UV[1]) ** 2) / (2 * NOSE_WIDTH ** 2)
    return NOSE_HEIGHT * np.exp(-d2)


def _smooth_fields(gen: np.random.Generator, pts: np.ndarray, n_fields: int, n_terms: int = 6) -> np.ndarray:
    """(n_fields, z, 3) random displacement fields built from low-frequency sinusoids."""
    fields = np.zeros((n_fields, len(pts), 3))
    for f in range(n_fields):
        for _ in range(n_terms):
            freq = gen.normal(0.0, 1.5, size=3)
            phase = gen.uniform(0, 2 * np.pi)
            direction = gen.normal(size=3)
            fields[f] += np.sin(pts @ freq + phase)[:, None] * direction[None, :]
    return fields


def _orthonormal_columns(fields: np.ndarray) -> np.ndarray:
    A = fields.reshape(len(fields), -1).T
    Q, R = np.linalg.qr(A)
    # fix column signs so the basis does not depend on LAPACK sign conventions
    Q = Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))[None, :]
    # one re-orthogonalisation pass tightens AᵀA = I to roundoff
    Q, _ = np.linalg.qr(Q)
    return Q * np.sign(np.where(Q.sum(axis=0) == 0, 1.0, Q.sum(axis=0)))[None, :]


def _shading_like_fields(mean_shape: np.ndarray, triangles: np.ndarray, mean_albedo: np.ndarray) -> np.ndarray:
    """
    (27, 3z) albedo directions a change of SH lighting imitates on the mean
    face: per colour channel and SH function, the mean albedo of that channel
    times the function of the vertex normal.
    """
    Y = sh_basis(vertex_normals(mean_shape, triangles))
    out = np.zeros((3, Y.shape[1], len(mean_shape), 3))
    for c in range(3):
        out[c, :, :, c] = (mean_albedo[:, c:c + 1] * Y).T
    return out.reshape(3 * Y.shape[1], -1)


def _project_out(fields: np.ndarray, constraints: np.ndarray) -> np.ndarray:
    A = fields.reshape(len(fields), -1).T
    Q, _ = np.linalg.qr(constraints.T)
    for _ in range(2):
        A = A - Q @ (Q.T @ A)
    return A.T.reshape(fields.shape)


def generate_synthetic_model(seed: int, z: int, k_id: int, k_exp: int, k_alb: int) -> ParametricModel:
    """
    Builds a deterministic synthetic face model.

    The mean shape is an ellipsoidal cap (Delaunay-triangulated in UV) with a
    nose-like bump. Identity fields deform the whole cap, expression fields only
    its lower third. All three bases are orthonormal. The albedo fields are made
    orthogonal to the shading-like fields of the mean face before
    orthonormalization, so that lighting and albedo coefficients cannot trade
    off in a fit. Sigmas are log-uniform in [0.3, 3.0]; albedo sigmas carry an
    extra factor ALBEDO_BASIS_SCALE·√(3z), so a coefficient of one sigma moves
    the vertex colours by ALBEDO_BASIS_SCALE times that draw, RMS.
    """
    if z < 4 or min(k_id, k_exp, k_alb) < 1:
        raise ParameterError(f"Invalid model size z={z}, K=({k_id}, {k_exp}, {k_alb})")
    if max(k_id, k_exp, k_alb) > 3 * z:
        raise ParameterError("Basis width exceeds the shape dimension")
    axes = np.array([0.8, 1.0, 0.9])

    uv = _lattice_uv(z)
    triangles = Delaunay(uv).simplices.astype(np.int64)
    base = _cap_point(uv, axes)
    radial = base / np.linalg.norm(base, axis=1, keepdims=True)
    mean_shape = base + _nose_offset(uv)[:, None] * radial

    # orient every triangle outward
    fn = face_normals(mean_shape, triangles)
    centroid = mean_shape[triangles].mean(axis=1)
    flip = np.einsum("ij,ij->i", fn, centroid) < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    # drop slivers the lattice leaves along the border
    area = np.linalg.norm(face_normals(mean_shape, triangles), axis=1)
    triangles = triangles[area > 1e-12]

    gen_id = rng.stream(seed, "facemodel.identity")
    basis_id = _orthonormal_columns(_smooth_fields(gen_id, mean_shape, k_id))

    gen_exp = rng.stream(seed, "facemodel.expression")
    exp_fields = _smooth_fields(gen_exp, mean_shape, k_exp)
    y = mean_shape[:, 1]
    lower = y.min() + (y.max() - y.min()) / 3.0
    falloff = 1.0 / (1.0 + np.exp((y - lower) / 0.05))
    exp_fields = exp_fields * falloff[None, :, None]
    exp_fields -= exp_fields.mean(axis=1, keepdims=True)
    basis_exp = _orthonormal_columns(exp_fields)

    gen_mean = rng.stream(seed, "facemodel.mean_albedo")
    skin = np.array([200.0, 150.0, 125.0])
    low = _smooth_fields(gen_mean, mean_shape / 2.0, 1, n_terms=4)[0]
    albedo = skin[None, :] + 10.0 * low
    n_moles = max(1, z // 150)
    moles = gen_mean.choice(z, size=min(n_moles, z), replace=False)
    albedo[moles] *= 0.45
    mean_albedo = np.clip(albedo, 0.0, 255.0)

    gen_alb = rng.stream(seed, "facemodel.albedo")
    alb_fields = _smooth_fields(gen_alb, mean_shape, k_alb)
    constraints = _shading_like_fields(mean_shape, triangles, mean_albedo)
    if 3 * z >= len(constraints) + 2 * k_alb:
        alb_fields = _project_out(alb_fields, constraints)
    basis_alb = _orthonormal_columns(alb_fields)

    gen_sigma = rng.stream(seed, "facemodel.sigma")
    sig = lambda k: np.exp(gen_sigma.uniform(np.log(0.3), np.log(3.0), size=k))

    model = ParametricModel(
        mean_shape=mean_shape.ravel(),
        mean_albedo=mean_albedo.ravel(),
        basis_id=basis_id,
        basis_exp=basis_exp,
        basis_alb=basis_alb,
        sigma_id=sig(k_id),
        sigma_exp=sig(k_exp),
        sigma_alb=sig(k_alb) * ALBEDO_BASIS_SCALE * np.sqrt(3 * z),
        triangles=triangles,
        uv_coords=uv,
        ellipsoid_axes=axes,
        seed=int(seed),
    )
    logger.info(f"Generated synthetic model: seed={seed}, z={z}, triangles={len(triangles)}, "
                f"K=({k_id}, {k_exp}, {k_alb})")
    return model


# --- Landmarks ---

def ellipsoid_offset(model: ParametricModel) -> np.ndarray:
    """Per-vertex algebraic offset of the mean shape from the model's base ellipsoid."""
    pts = model.mean_shape.reshape(-1, 3)
    return np.sqrt(((pts / model.ellipsoid_axes) ** 2).sum(axis=1)) - 1.0


# UV anchors of the remaining landmarks: brow line, eye corners, cheeks, mouth, chin.
_LANDMARK_ANCHORS = np.array([
    [0.35, 0.35], [0.65, 0.35], [0.40, 0.45], [0.60, 0.45],
    [0.30, 0.60], [0.70, 0.60], [0.42, 0.72], [0.58, 0.72],
    [0.50, 0.80], [0.50, 0.30],
])


def landmark_vertices(model: ParametricModel) -> List[int]:
    """
    Fixed landmark vertex list of the model.

    Order: min/max along x, y and z of the mean shape, the bump apex, then the
    vertices nearest to the UV anchors above. Duplicates are skipped, so tiny
    models may yield fewer than N_LANDMARKS indices.
    """
    pts = model.mean_shape.reshape(-1, 3)
    candidates: List[int] = []
    for axis in range(3):
        candidates += [int(np.argmin(pts[:, axis])), int(np.argmax(pts[:, axis]))]
    candidates.append(int(np.argmax(ellipsoid_offset(model))))
    for anchor in _LANDMARK_ANCHORS:
        candidates.append(int(np.argmin(np.linalg.norm(model.uv_coords - anchor, axis=1))))
    seen: List[int] = []
    for idx in candidates:
        if idx not in seen:
            seen.append(idx)
    if len(seen) < N_LANDMARKS:
        # fill up from the vertices farthest from those already chosen
        dist = np.min(np.linalg.norm(pts[:, None] - pts[seen][None], axis=2), axis=1)
        for idx in np.argsort(-dist, kind="stable"):
            if len(seen) >= min(N_LANDMARKS, model.n_vertices):
                break
            if int(idx) not in seen:
                seen.append(int(idx))
    return seen


# --- Serialization ---

_ARRAYS = ("mean_shape", "mean_albedo", "basis_id", "basis_exp", "basis_alb",
           "sigma_id", "sigma_exp", "sigma_alb", "triangles", "uv_coords", "ellipsoid_axes")


def save_model(model: ParametricModel, path: Union[str, Path]) -> None:
    meta = {
        "seed": model.seed,
        "vertices": model.n_vertices,
        "triangles": len(model.triangles),
        "k_id": model.k_id,
        "k_exp": model.k_exp,
        "k_alb": model.k_alb,
    }
    write_container(path, "model", meta, {name: getattr(model, name) for name in _ARRAYS})


def load_model(path: Union[str, Path]) -> ParametricModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Model file not found: {path}")
    meta, arrays = read_container(path, "model")
    try:
        z = int(meta["vertices"])
        return ParametricModel(
            mean_shape=arrays["mean_shape"].reshape(3 * z),
            mean_albedo=arrays["mean_albedo"].reshape(3 * z),
            basis_id=arrays["basis_id"].reshape(3 * z, int(meta["k_id"])),
            basis_exp=arrays["basis_exp"].reshape(3 * z, int(meta["k_exp"])),
            basis_alb=arrays["basis_alb"].reshape(3 * z, int(meta["k_alb"])),
            sigma_id=arrays["sigma_id"].ravel(),
            sigma_exp=arrays["sigma_exp"].ravel(),
            sigma_alb=arrays["sigma_alb"].ravel(),
            triangles=arrays["triangles"].reshape(-1, 3).astype(np.int64),
            uv_coords=arrays["uv_coords"].reshape(z, 2),
            ellipsoid_axes=arrays["ellipsoid_axes"].ravel(),
            seed=int(meta["seed"]),
        )
    except (KeyError, ValueError) as e:
        raise FormatError(f"Malformed model file {path}: {e}") from e
