"""
Stage 3: per-texel normal correction with the reflectance held fixed, and a
least-squares vertex update that follows the refined normal field.

    E(δ_n) = Σ_view Σ_visible ‖I_view − I_total(n ⊕ δ_n)‖² + w1 ‖Δ δ_n‖₁ + w2 ‖δ_n‖²

Normals are stored in model space and parametrized by (θ, φ) in a fixed
refinement frame whose polar axis is perpendicular to the face direction, so
face normals sit near the equator and away from the coordinate poles.
"""

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse
from scipy.sparse.linalg import lsqr
from scipy.spatial.transform import Rotation

from configs.settings import PipelineConfig, get_settings
from core.exceptions import GeometryError, SolverError
from core.facemodel import FitCoefficients, ParametricModel, synthesize_shape
from core.geometry import Mesh, face_normals, normal_to_spherical, normalize, spherical_jacobian, spherical_to_normal
from core.optim import laplacian_l1, run_adam
from core.raster import uv_sample
from core.shading import DominantLight, SHLighting, dominant_direction, dominant_intensity, shade_total, shading_gradients
from pipeline.fitting import FittingReport, bake_maps, fit_two_views, initial_pose
from pipeline.states import (
    FitState,
    FrameObservation,
    FramePairSet,
    LandmarkSet,
    NormalCorrection,
    ReflectanceState,
    ViewInput,
)

logger = logging.getLogger(__name__)

__all__ = [
    "REFINE_FRAME",
    "normal_to_spherical",
    "spherical_to_normal",
    "model_normals",
    "refine_energy",
    "refine_normals",
    "corrected_normals",
    "solve_vertex_offsets",
    "update_vertices",
    "albedo_from_maps",
    "process_new_frames",
]

REFINE_FRAME = Rotation.from_euler("y", 90.0, degrees=True).as_matrix()


def model_normals(frame: FrameObservation) -> np.ndarray:
    """Model-space normal map of a frame: R_tᵀ n_t on the surface, zero elsewhere."""
    normals = np.asarray(frame.normal) @ frame.state.pose.R
    normals[~frame.surface] = 0.0
    return normals


@dataclass
class _ViewRefine:
    idx: np.ndarray
    observed: np.ndarray
    view_vec: np.ndarray
    albedo: np.ndarray
    specular: np.ndarray
    intensity: np.ndarray


class RefineObjective:
    """Refinement energy of one frame with the reflectance and the dominant light frozen."""

    def __init__(self, frames: FramePairSet, reflectance: ReflectanceState,
                 config: PipelineConfig, timestamp: Optional[int] = None):
        self.config = config
        frame = frames.frames[0] if timestamp is None else frames.frame(timestamp)
        self.frame = frame
        self.resolution = frames.resolution
        self.surface = np.asarray(frame.surface).ravel()
        self.lighting: SHLighting = reflectance.lighting
        self.world_frame = frame.state.pose.R @ REFINE_FRAME

        base = model_normals(frame).reshape(-1, 3)
        theta, phi = normal_to_spherical(np.where(self.surface[:, None], base, (0.0, 0.0, 1.0)), REFINE_FRAME)
        self.theta0, self.phi0 = theta, phi

        direction = dominant_direction(reflectance.lighting)
        self.dom = DominantLight.dark(1) if direction is None else DominantLight(direction, np.zeros((1, 1, 3)))
        world = np.asarray(frame.normal).reshape(-1, 3)
        albedo = (np.asarray(frames.base_diffuse) + reflectance.delta_diffuse).reshape(-1, 3)
        spec = np.asarray(reflectance.specular).ravel()
        self.views: List[_ViewRefine] = []
        for name in sorted(frame.views):
            samples = frame.views[name]
            idx = np.flatnonzero(samples.visible)
            intensity = (np.zeros((len(idx), 3)) if direction is None
                         else dominant_intensity(reflectance.lighting, direction, world[idx], config.intensity_epsilon))
            self.views.append(_ViewRefine(
                idx,
                samples.observed.reshape(-1, 3)[idx],
                samples.view_vec.reshape(-1, 3)[idx],
                albedo[idx],
                spec[idx],
                intensity,
            ))

    def normals(self, delta: np.ndarray) -> np.ndarray:
        """World-space corrected normals, (R², 3)."""
        d = delta.reshape(-1, 2)
        return spherical_to_normal(self.theta0 + d[:, 0], self.phi0 + d[:, 1], self.world_frame)

    def photometric(self, delta: np.ndarray, need_grad: bool = False):
        d = delta.reshape(-1, 2)
        m = self.config.shininess
        energy = 0.0
        grad = np.zeros_like(d)
        for vr in self.views:
            theta = self.theta0[vr.idx] + d[vr.idx, 0]
            phi = self.phi0[vr.idx] + d[vr.idx, 1]
            n = spherical_to_normal(theta, phi, self.world_frame)
            zero = np.zeros_like(vr.albedo)
            rendered = shade_total(vr.albedo, zero, vr.specular, n, vr.view_vec, self.lighting, self.dom,
                                   m, intensity=vr.intensity)
            r = vr.observed - rendered
            energy += float(np.sum(r * r))
            if need_grad:
                J = spherical_jacobian(theta, phi, self.world_frame)
                g = shading_gradients(vr.albedo, zero, vr.specular, n, vr.view_vec, self.lighting, self.dom, m,
                                      intensity=vr.intensity, normal_jacobian=J)
                per = -2.0 * np.einsum("nc,nca->na", r, g.d_spherical)
                for a in range(2):
                    grad[:, a] += np.bincount(vr.idx, weights=per[:, a], minlength=len(d))
        return energy, (grad if need_grad else None)

    def __call__(self, delta: np.ndarray, need_grad: bool = True):
        R = self.resolution
        d = delta.reshape(R, R, 2)
        e_p, g_p = self.photometric(d, need_grad)
        e_l, g_l = laplacian_l1(d, self.config.smooth_l1_epsilon)
        on = self.surface.reshape(R, R)[..., None]
        e_q = float(np.sum(np.where(on, d * d, 0.0)))
        energy = e_p + self.config.w_1 * e_l + self.config.w_2 * e_q
        if not need_grad:
            return energy, None
        grad = g_p.reshape(R, R, 2) + self.config.w_1 * g_l + self.config.w_2 * np.where(on, 2.0 * d, 0.0)
        return energy, grad


def refine_energy(
    delta: NormalCorrection,
    frames: FramePairSet,
    reflectance: ReflectanceState,
    config: Optional[PipelineConfig] = None,
    timestamp: Optional[int] = None,
) -> float:
    """Photometric residual with corrected normals plus the Laplacian and magnitude penalties on (Δθ, Δφ)."""
    config = config or get_settings()
    return RefineObjective(frames, reflectance, config, timestamp)(delta.delta, need_grad=False)[0]


def corrected_normals(frame: FrameObservation, delta: NormalCorrection) -> np.ndarray:
    """Model-space normal map after applying `delta`; zero off the surface."""
    base = model_normals(frame)
    surface = np.asarray(frame.surface)
    theta, phi = normal_to_spherical(np.where(surface[..., None], base, (0.0, 0.0, 1.0)), REFINE_FRAME)
    out = spherical_to_normal(theta + delta.delta[..., 0], phi + delta.delta[..., 1], REFINE_FRAME)
    out[~surface] = 0.0
    return out


class RefineReport(BaseModel):
    timestamp: int = Field(..., description="Frame the correction belongs to")
    initial_energy: float
    final_energy: float
    lr_halvings: int = 0
    trace: List[float] = Field(default_factory=list, description="Best energy after each Adam step")
    seconds: float = 0.0

    def trace_rows(self) -> List[dict]:
        return [{"iteration": i, "energy": e} for i, e in enumerate([self.initial_energy] + self.trace)]


def refine_normals(
    frames: FramePairSet,
    reflectance: ReflectanceState,
    config: Optional[PipelineConfig] = None,
    timestamp: Optional[int] = None,
) -> Tuple[NormalCorrection, np.ndarray, RefineReport]:
    """
    Adam descent on `refine_energy` from δ_n = 0.

    Returns the correction, the refined model-space normal map and a report
    whose trace never increases.
    """
    config = config or get_settings()
    started = time.perf_counter()
    obj = RefineObjective(frames, reflectance, config, timestamp)
    R = obj.resolution

    def energy_grad(x):
        e, g = obj(x.reshape(R, R, 2))
        return e, g.ravel()

    try:
        x, adam = run_adam(energy_grad, np.zeros(R * R * 2), config.refine_iters, lr=config.adam_lr_normals,
                           beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
                           patience=config.adam_patience, project=lambda v: np.clip(v, -np.pi, np.pi),
                           name="stage3-normals")
    except SolverError as e:
        logger.error(f"Normal refinement of frame {obj.frame.timestamp} aborted: {e}", exc_info=True)
        e.diagnostics["timestamp"] = obj.frame.timestamp
        raise

    correction = NormalCorrection(x.reshape(R, R, 2))
    refined = corrected_normals(obj.frame, correction)
    surface = np.asarray(obj.frame.surface)
    lengths = np.linalg.norm(refined[surface], axis=1)
    if len(lengths) and np.abs(lengths - 1.0).max() > 1e-9:
        raise SolverError("Refined normals lost unit length",
                          diagnostics={"max_deviation": float(np.abs(lengths - 1.0).max())})

    report = RefineReport(timestamp=obj.frame.timestamp, initial_energy=adam.initial_energy,
                          final_energy=adam.final_energy, lr_halvings=adam.lr_halvings, trace=adam.trace,
                          seconds=time.perf_counter() - started)
    rms = float(np.sqrt(np.mean(x ** 2))) if x.size else 0.0
    logger.info(f"Stage-3 frame {report.timestamp}: energy {report.initial_energy:.6g} -> "
                f"{report.final_energy:.6g}, offset RMS {rms:.3g} rad, {report.seconds:.2f}s")
    return correction, refined, report


# --- Vertex update ---

def solve_vertex_offsets(mesh: Mesh, targets: np.ndarray, tikhonov: float = 0.1) -> np.ndarray:
    """
    Offsets o along the vertex normals such that every triangle's edges are
    orthogonal to its target normal, in the least-squares sense:

        t_f · (X_b + o_b n_b − X_a − o_a n_a) = 0   for both edges (a, b) of f

    plus √tikhonov · o = 0. Rows of `targets` that are not unit vectors are
    skipped. Vertices constrained by nothing get a zero offset.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (mesh.n_triangles, 3):
        raise GeometryError(f"Expected {mesh.n_triangles} target normals, got {targets.shape}")
    valid = np.abs(np.linalg.norm(targets, axis=1) - 1.0) < 1e-6
    tri = mesh.triangles[valid]
    t = targets[valid]
    X, N = mesh.vertices, mesh.vertex_normals
    n_v = mesh.n_vertices

    rows, cols, vals, rhs = [], [], [], []
    for k, (a, b) in enumerate(((0, 1), (0, 2))):
        va, vb = tri[:, a], tri[:, b]
        row = np.arange(len(tri)) * 2 + k
        rows += [row, row]
        cols += [vb, va]
        vals += [np.einsum("ij,ij->i", t, N[vb]), -np.einsum("ij,ij->i", t, N[va])]
        rhs.append(-np.einsum("ij,ij->i", t, X[vb] - X[va]))
    n_rows = 2 * len(tri)
    if tikhonov > 0:
        rows.append(n_rows + np.arange(n_v))
        cols.append(np.arange(n_v))
        vals.append(np.full(n_v, np.sqrt(tikhonov)))
        rhs.append(np.zeros(n_v))
        n_rows += n_v

    b = np.zeros(n_rows)
    edge_rhs = np.stack(rhs[:2], axis=1).ravel()
    b[:2 * len(tri)] = edge_rhs
    if not n_rows or not np.any(b):
        return np.zeros(n_v)
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n_rows, n_v))
    solution = lsqr(A, b, atol=1e-14, btol=1e-14, iter_lim=20 * n_v)
    offsets = solution[0]
    constrained = np.zeros(n_v, dtype=bool)
    constrained[tri.ravel()] = True
    offsets[~constrained] = 0.0
    logger.debug(f"Vertex update: lsqr stop {solution[1]} after {solution[2]} iterations, "
                 f"max |offset| {np.abs(offsets).max():.3g}")
    return offsets


def triangle_targets(mesh: Mesh, normal_map: np.ndarray) -> np.ndarray:
    """Refined normal sampled at each triangle's UV centroid; zero rows where the map is empty."""
    centroids = np.clip(mesh.uv_coords[mesh.triangles].mean(axis=1), 0.0, 1.0)
    sampled = uv_sample(np.asarray(normal_map, dtype=np.float64), centroids)
    norm = np.linalg.norm(sampled, axis=1)
    out = np.zeros_like(sampled)
    ok = norm > 0.5
    out[ok] = sampled[ok] / norm[ok, None]
    return out


def update_vertices(mesh: Mesh, normal_map: np.ndarray, tikhonov: float = 0.1) -> Mesh:
    """Moves every vertex along its normal so the triangle normals follow the model-space `normal_map`."""
    offsets = solve_vertex_offsets(mesh, triangle_targets(mesh, normal_map), tikhonov)
    vertices = mesh.vertices + offsets[:, None] * mesh.vertex_normals
    return Mesh.from_geometry(vertices, mesh.triangles, mesh.uv_coords)


def normal_mismatch(mesh: Mesh, targets: np.ndarray) -> float:
    """Mean angle in radians between triangle normals and their valid targets."""
    valid = np.linalg.norm(targets, axis=1) > 0.5
    fn = face_normals(mesh.vertices, mesh.triangles)[valid]
    cos = np.clip(np.einsum("ij,ij->i", fn, normalize(targets[valid])), -1.0, 1.0)
    return float(np.mean(np.arccos(cos))) if len(cos) else 0.0


# --- Tracking ---

@dataclass(frozen=True)
class TrackResult:
    state: FitState
    fit: FittingReport
    refine: RefineReport
    correction: NormalCorrection
    normal_map: np.ndarray
    mesh: Mesh


def albedo_from_maps(model: ParametricModel, diffuse: np.ndarray) -> np.ndarray:
    """Albedo coefficients whose vertex colours best match a UV diffuse map (least squares)."""
    diffuse = np.asarray(diffuse, dtype=np.float64)
    covered = (diffuse.sum(axis=2) > 0).astype(np.float64)
    weight = uv_sample(covered, model.uv_coords)
    colors = uv_sample(diffuse * covered[..., None], model.uv_coords)
    mean = model.mean_albedo.reshape(-1, 3)
    target = np.where((weight > 1e-6)[:, None], colors / np.maximum(weight, 1e-6)[:, None], mean)
    return model.basis_alb.T @ (target - mean).ravel()


def process_new_frames(
    views: Sequence[ViewInput],
    landmarks: LandmarkSet,
    model: ParametricModel,
    reflectance: ReflectanceState,
    base_diffuse: np.ndarray,
    init: Optional[FitState] = None,
    config: Optional[PipelineConfig] = None,
    timestamp: int = 0,
) -> TrackResult:
    """
    Recovers geometry for a new frame pair with the albedos frozen.

    Runs Stage 1 with x_alb fixed, bakes the frame, refines its normals
    against the stored reflectance and updates the vertices. The reflectance
    maps are only read.

    `init` warm-starts the fit; without it the pose comes from the landmarks
    and x_alb is projected from the stored diffuse map (C_d + δ_Cd). The
    stored lighting replaces any initial lighting.
    """
    config = config or get_settings()
    if init is None:
        pose, _ = initial_pose(model, views, landmarks)
        x_alb = albedo_from_maps(model, np.asarray(base_diffuse) + reflectance.delta_diffuse)
        init = FitState(FitCoefficients(np.zeros(model.k_id), np.zeros(model.k_exp), x_alb), pose,
                        reflectance.lighting)
    else:
        init = FitState(init.coeffs, init.pose, reflectance.lighting)
    state, fit_report = fit_two_views(model, views, landmarks, config, init=init, freeze_albedo=True)
    _, frame = bake_maps(state, views, model, resolution=reflectance.specular.shape[0],
                         timestamp=timestamp, threads=config.threads)
    frames = FramePairSet([frame], base_diffuse)
    correction, normal_map, refine_report = refine_normals(frames, reflectance, config)
    mesh = update_vertices(synthesize_shape(model, state.coeffs), normal_map, config.vertex_tikhonov)
    return TrackResult(state=state, fit=fit_report, refine=refine_report, correction=correction,
                       normal_map=normal_map, mesh=mesh)
