"""
Stage 1: two-view model fitting and UV baking.

    E(X) = E_con(X) + w_l · E_lan(X) + w_r · E_reg(X)

The unknowns X are packed into one vector

    [x_id | x_exp | x_alb | ω (3) | t (3) | log s | l (27) | I_a (3)]

where ω is the rotation vector of R. Gauss-Newton steps on ω are left
perturbations R ← exp([δ]×) R, and the scale lives in log space so it stays
positive. The photo-consistency Jacobian flows through shading only (lighting,
albedo and the rotation of normals); the coverage mask is frozen per step.
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial.transform import Rotation

from configs.settings import PipelineConfig, get_settings
from core.exceptions import FittingDegenerateError, ParameterError
from core.facemodel import (
    FitCoefficients,
    ParametricModel,
    synthesize_shape,
    vertex_albedo,
)
from core.geometry import NEAR_PLANE, Camera, Mesh, RigidPose, apply_pose, normalize
from core.optim import GaussNewtonReport, LeastSquaresProblem, gauss_newton
from core.raster import UVRaster, front_facing, rasterize, rasterize_uv, sample_image
from core.renderer import render_stage1
from core.shading import SH_COUNT, SHLighting, irradiance, sh_basis, sh_gradient
from pipeline.states import BakedMaps, FitState, FrameObservation, LandmarkSet, ViewInput, ViewSamples

logger = logging.getLogger(__name__)

MIN_LANDMARKS = 6


def _skew(v: np.ndarray) -> np.ndarray:
    """(..., 3, 3) cross-product matrices."""
    v = np.asarray(v)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
        np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
        np.stack([-v[..., 1], v[..., 0], z], axis=-1),
    ], axis=-2)


# --- Parameter packing ---

@dataclass(frozen=True)
class ParameterLayout:
    k_id: int
    k_exp: int
    k_alb: int

    @property
    def id(self) -> slice:
        return slice(0, self.k_id)

    @property
    def exp(self) -> slice:
        return slice(self.k_id, self.k_id + self.k_exp)

    @property
    def alb(self) -> slice:
        start = self.k_id + self.k_exp
        return slice(start, start + self.k_alb)

    @property
    def rot(self) -> slice:
        start = self.k_id + self.k_exp + self.k_alb
        return slice(start, start + 3)

    @property
    def trans(self) -> slice:
        start = self.rot.stop
        return slice(start, start + 3)

    @property
    def log_scale(self) -> int:
        return self.trans.stop

    @property
    def sh(self) -> slice:
        start = self.log_scale + 1
        return slice(start, start + 3 * SH_COUNT)

    @property
    def ambient(self) -> slice:
        start = self.sh.stop
        return slice(start, start + 3)

    @property
    def size(self) -> int:
        return self.ambient.stop

    def indices(self, *blocks: str) -> np.ndarray:
        parts = []
        for name in blocks:
            if name == "log_scale":
                parts.append(np.array([self.log_scale]))
            else:
                s = getattr(self, name)
                parts.append(np.arange(s.start, s.stop))
        return np.concatenate(parts)

    def pack(self, state: FitState) -> np.ndarray:
        x = np.zeros(self.size)
        x[self.id] = state.coeffs.x_id
        x[self.exp] = state.coeffs.x_exp
        x[self.alb] = state.coeffs.x_alb
        x[self.rot] = state.pose.rotvec()
        x[self.trans] = state.pose.t
        x[self.log_scale] = np.log(state.pose.s)
        x[self.sh] = state.lighting.coeffs.ravel()
        x[self.ambient] = state.lighting.ambient
        return x

    def unpack(self, x: np.ndarray) -> FitState:
        coeffs = FitCoefficients(x[self.id].copy(), x[self.exp].copy(), x[self.alb].copy())
        pose = RigidPose.from_rotvec(x[self.rot], x[self.trans], float(np.exp(x[self.log_scale])))
        lighting = SHLighting(x[self.sh].reshape(3, SH_COUNT), np.maximum(x[self.ambient], 0.0))
        return FitState(coeffs, pose, lighting)

    def retract(self, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """x ⊕ Δ: additive everywhere except the rotation, which composes on the left."""
        out = x + delta
        rot = Rotation.from_rotvec(delta[self.rot]) * Rotation.from_rotvec(x[self.rot])
        out[self.rot] = rot.as_rotvec()
        return out


def layout_for(model: ParametricModel) -> ParameterLayout:
    return ParameterLayout(model.k_id, model.k_exp, model.k_alb)


# --- Energies ---

def regularization_energy(coeffs: FitCoefficients, model: ParametricModel) -> float:
    """Σ (x/σ)² over identity, expression and albedo coefficients."""
    coeffs.check(model)
    return float(np.sum((coeffs.x_id / model.sigma_id) ** 2)
                 + np.sum((coeffs.x_exp / model.sigma_exp) ** 2)
                 + np.sum((coeffs.x_alb / model.sigma_alb) ** 2))


def _landmark_terms(
    state: FitState,
    model: ParametricModel,
    landmarks: LandmarkSet,
    cameras: Dict[str, Camera],
    penalty: float,
) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Per view: (F, 2) reprojection differences and an (F,) behind-camera flag."""
    mesh_pts = synthesize_shape(model, state.coeffs).vertices
    out = {}
    for view in sorted(landmarks.indices):
        cam = cameras[view]
        world = state.pose.transform(mesh_pts[landmarks.indices[view]])
        pixels, depth = cam.project_points(world)
        behind = depth <= NEAR_PLANE
        diff = np.where(behind[:, None], 0.0, pixels - landmarks.positions[view])
        out[view] = (diff, behind)
    return out


def landmark_energy(
    state: FitState,
    model: ParametricModel,
    landmarks: LandmarkSet,
    cameras: Dict[str, Camera],
    penalty: float = 1e6,
) -> float:
    """Σ_view mean squared pixel distance between landmarks and projected model vertices."""
    total = 0.0
    for diff, behind in _landmark_terms(state, model, landmarks, cameras, penalty).values():
        if len(diff) == 0:
            continue
        per_point = np.where(behind, penalty, np.sum(diff * diff, axis=1))
        total += float(per_point.sum()) / len(diff)
    return total


def _photo_pixels(state: FitState, model: ParametricModel, view: ViewInput, threads: int = 1):
    mesh = synthesize_shape(model, state.coeffs)
    out = render_stage1(mesh, state.pose, view.camera, state.lighting,
                        vertex_albedo(model, state.coeffs, clamp=False), threads)
    return mesh, out


def photo_consistency(
    state: FitState,
    model: ParametricModel,
    views: Sequence[ViewInput],
    threads: int = 1,
) -> float:
    """
    Σ_view mean over the face mask of ‖I_ren(p) − I_view(p)‖², with I_ren the
    ambient + SH diffuse rendering (unclamped).
    """
    total = 0.0
    for view in views:
        mesh, out = _photo_pixels(state, model, view, threads)
        n_pix = int(out.mask.sum())
        if n_pix == 0:
            raise FittingDegenerateError(f"Face mask of view '{view.name}' is empty")
        rendered = _stage1_colors(state, model, mesh, out)
        diff = rendered - view.image[out.mask]
        total += float(np.sum(diff * diff)) / n_pix
    return total


def _stage1_colors(state: FitState, model: ParametricModel, mesh: Mesh, out) -> np.ndarray:
    corners = mesh.triangles[out.tri_id[out.mask]]
    albedo = np.einsum("nk,nkc->nc", out.bary[out.mask],
                       vertex_albedo(model, state.coeffs, clamp=False)[corners])
    return state.lighting.ambient + albedo * irradiance(state.lighting, out.normal[out.mask])


# --- The least-squares problem ---

class FittingReport(BaseModel):
    stages: Dict[str, GaussNewtonReport] = Field(default_factory=dict, description="Solver report per stage")
    energies: Dict[str, float] = Field(default_factory=dict, description="Full energy after each stage")
    warnings: List[str] = Field(default_factory=list, description="Non-fatal issues met while fitting")
    seconds: float = Field(0.0, description="Wall-clock time of the whole fit")

    def trace_rows(self) -> List[dict]:
        rows = []
        for stage, rep in self.stages.items():
            rows += [{"stage": stage, "iteration": s.iteration, "cost": s.cost,
                      "damping": s.damping, "accepted": s.accepted} for s in rep.trace]
        return rows


class _FitProblem:
    """Residuals and Jacobians of the Stage-1 energy over a subset of active parameters."""

    def __init__(
        self,
        model: ParametricModel,
        views: Sequence[ViewInput],
        landmarks: LandmarkSet,
        config: PipelineConfig,
        active: np.ndarray,
        base: np.ndarray,
        use_photo: bool,
    ):
        self.model = model
        self.views = list(views)
        self.cameras = {v.name: v.camera for v in views}
        self.landmarks = landmarks
        self.config = config
        self.layout = layout_for(model)
        self.active = active
        self.base = base.copy()
        self.use_photo = use_photo and config.w_con > 0
        self.basis = np.hstack([model.basis_id, model.basis_exp])  # (3z, K_id + K_exp)
        self._cache_x = None
        self._cache = None

    def full(self, x_active: np.ndarray) -> np.ndarray:
        x = self.base.copy()
        x[self.active] = x_active
        return x

    def retract(self, x_active: np.ndarray, delta: np.ndarray) -> np.ndarray:
        full_delta = np.zeros(self.layout.size)
        full_delta[self.active] = delta
        x = self.layout.retract(self.full(x_active), full_delta)
        return x[self.active]

    def _evaluate(self, x_active: np.ndarray):
        if self._cache_x is not None and np.array_equal(self._cache_x, x_active):
            return self._cache
        x = self.full(x_active)
        r, J = self._assemble(x)
        self._cache_x, self._cache = x_active.copy(), (r, J)
        return r, J

    def residual(self, x_active: np.ndarray) -> np.ndarray:
        return self._evaluate(x_active)[0]

    def jacobian(self, x_active: np.ndarray) -> np.ndarray:
        return self._evaluate(x_active)[1][:, self.active]

    def problem(self) -> LeastSquaresProblem:
        return LeastSquaresProblem(self.residual, self.jacobian, len(self.active), self.retract)

    def _assemble(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        L = self.layout
        state = L.unpack(x)
        blocks_r, blocks_J = [], []

        # landmarks
        shape = synthesize_shape(self.model, state.coeffs).vertices
        R, s = state.pose.R, state.pose.s
        for view in sorted(self.landmarks.indices):
            idx = self.landmarks.indices[view]
            if len(idx) == 0:
                continue
            cam = self.cameras[view]
            w = np.sqrt(self.config.w_l / len(idx))
            p = shape[idx]
            sRp = s * p @ R.T
            world = sRp + state.pose.t
            Y = cam.to_camera(world)
            behind = Y[:, 2] <= NEAR_PLANE
            zs = np.where(behind, 1.0, Y[:, 2])
            proj = cam.focal * Y[:, :2] / zs[:, None] + np.asarray(cam.principal_point)
            res = np.where(behind[:, None], np.sqrt(self.config.landmark_penalty / 2.0),
                           proj - self.landmarks.positions[view])
            # ∂(u, v)/∂Y
            dP = np.zeros((len(idx), 2, 3))
            dP[:, 0, 0] = cam.focal / zs
            dP[:, 1, 1] = cam.focal / zs
            dP[:, 0, 2] = -cam.focal * Y[:, 0] / zs ** 2
            dP[:, 1, 2] = -cam.focal * Y[:, 1] / zs ** 2
            dPX = dP @ cam.extrinsic.R  # ∂(u, v)/∂X
            J = np.zeros((len(idx), 2, L.size))
            rows = np.stack([3 * idx, 3 * idx + 1, 3 * idx + 2], axis=1)
            dX_dc = s * np.einsum("ij,njk->nik", R, self.basis[rows])
            J[:, :, :L.k_id + L.k_exp] = dPX @ dX_dc
            J[:, :, L.rot] = dPX @ -_skew(sRp)
            J[:, :, L.trans] = dPX
            J[:, :, L.log_scale] = np.einsum("nij,nj->ni", dPX, sRp)
            J[behind] = 0.0
            blocks_r.append(w * res.ravel())
            blocks_J.append(w * J.reshape(-1, L.size))

        # regularizer
        sigma = np.concatenate([self.model.sigma_id, self.model.sigma_exp, self.model.sigma_alb])
        coeff_idx = L.indices("id", "exp", "alb")
        wr = np.sqrt(self.config.w_r)
        blocks_r.append(wr * x[coeff_idx] / sigma)
        Jr = np.zeros((len(coeff_idx), L.size))
        Jr[np.arange(len(coeff_idx)), coeff_idx] = wr / sigma
        blocks_J.append(Jr)

        if self.use_photo:
            for view in self.views:
                r_v, J_v = self._photo_block(state, view)
                blocks_r.append(r_v)
                blocks_J.append(J_v)

        return np.concatenate(blocks_r), np.vstack(blocks_J)

    def _photo_block(self, state: FitState, view: ViewInput) -> Tuple[np.ndarray, np.ndarray]:
        L = self.layout
        mesh, out = _photo_pixels(state, self.model, view, self.config.threads)
        mask = out.mask
        n_pix = int(mask.sum())
        if n_pix == 0:
            raise FittingDegenerateError(f"Face mask of view '{view.name}' is empty")
        w = np.sqrt(self.config.w_con / n_pix)
        corners = mesh.triangles[out.tri_id[mask]]
        bary = out.bary[mask]
        albedo_v = vertex_albedo(self.model, state.coeffs, clamp=False)
        albedo = np.einsum("nk,nkc->nc", bary, albedo_v[corners])
        n = out.normal[mask]
        light = state.lighting
        basis = sh_basis(n)
        E = basis @ light.coeffs.T
        rendered = light.ambient + albedo * E
        res = w * (rendered - view.image[mask])  # (N, 3)

        J = np.zeros((n_pix, 3, L.size))
        for c in range(3):
            J[:, c, L.ambient.start + c] = 1.0
            J[:, c, L.sh.start + c * SH_COUNT:L.sh.start + (c + 1) * SH_COUNT] = albedo[:, c:c + 1] * basis
            # albedo coefficients through the barycentric blend of the corner rows
            rows = 3 * corners + c
            J[:, c, L.alb] = np.einsum("nk,nkj->nj", bary, self.model.basis_alb[rows]) * E[:, c:c + 1]
        # rotation of normals: ∂n/∂δ = −[n]×
        grad_e = np.einsum("ck,nkj->ncj", light.coeffs, sh_gradient(n))
        J[:, :, L.rot] = albedo[:, :, None] * np.einsum("ncj,njk->nck", grad_e, -_skew(n))
        return res.ravel(), w * J.reshape(-1, L.size)


def total_energy(
    state: FitState,
    model: ParametricModel,
    views: Sequence[ViewInput],
    landmarks: LandmarkSet,
    config: PipelineConfig,
) -> float:
    """E_con + w_l·E_lan + w_r·E_reg."""
    cameras = {v.name: v.camera for v in views}
    energy = config.w_l * landmark_energy(state, model, landmarks, cameras, config.landmark_penalty)
    energy += config.w_r * regularization_energy(state.coeffs, model)
    if config.w_con > 0:
        energy += config.w_con * photo_consistency(state, model, views, config.threads)
    return energy


# --- Initialization ---

def _projection_matrix(cam: Camera) -> np.ndarray:
    K = np.array([[cam.focal, 0.0, cam.principal_point[0]],
                  [0.0, cam.focal, cam.principal_point[1]],
                  [0.0, 0.0, 1.0]])
    return K @ np.hstack([cam.extrinsic.R, cam.extrinsic.t[:, None]])


def triangulate(cam_a: Camera, cam_b: Camera, pix_a: np.ndarray, pix_b: np.ndarray) -> np.ndarray:
    """Linear (DLT) triangulation of corresponding pixels; returns (N, 3) world points."""
    Pa, Pb = _projection_matrix(cam_a), _projection_matrix(cam_b)
    points = []
    for (xa, ya), (xb, yb) in zip(pix_a, pix_b):
        A = np.stack([xa * Pa[2] - Pa[0], ya * Pa[2] - Pa[1], xb * Pb[2] - Pb[0], yb * Pb[2] - Pb[1]])
        _, _, Vt = np.linalg.svd(A)
        X = Vt[-1]
        points.append(X[:3] / X[3])
    return np.array(points)


def similarity_procrustes(src: np.ndarray, dst: np.ndarray) -> RigidPose:
    """Least-squares similarity dst ≈ s R src + t (Umeyama)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    U, S, Vt = np.linalg.svd(b.T @ a)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / np.sum(a * a))
    return RigidPose(R, mu_d - s * R @ mu_s, s)


def baseline_is_degenerate(cam_a: Camera, cam_b: Camera) -> bool:
    """True when the two cameras share a viewpoint, so triangulation is ill-posed."""
    baseline = np.linalg.norm(cam_a.center - cam_b.center)
    scale = max(np.linalg.norm(cam_a.center), np.linalg.norm(cam_b.center), 1.0)
    return baseline < 1e-3 * scale


def _single_view_pose(model_pts: np.ndarray, cam: Camera, pixels: np.ndarray) -> RigidPose:
    # face the camera: model +z toward the camera, model +y toward image up
    R = cam.extrinsic.R.T @ np.diag([1.0, -1.0, -1.0])
    depth = float(np.linalg.norm(cam.center))
    spread_2d = np.sqrt(np.mean(np.sum((pixels - pixels.mean(axis=0)) ** 2, axis=1)))
    centered = model_pts - model_pts.mean(axis=0)
    spread_3d = np.sqrt(np.mean(np.sum(centered[:, :2] ** 2, axis=1)))
    s = max(spread_2d * depth / (cam.focal * max(spread_3d, 1e-9)), 1e-3)
    ray = np.append((pixels.mean(axis=0) - np.asarray(cam.principal_point)) / cam.focal, 1.0)
    target = cam.extrinsic.inverse().transform(ray * depth)
    return RigidPose(R, target - s * R @ model_pts.mean(axis=0), s)


def initial_pose(
    model: ParametricModel,
    views: Sequence[ViewInput],
    landmarks: LandmarkSet,
) -> Tuple[RigidPose, List[str]]:
    """Closed-form pose from triangulated landmarks; single-view fallback on degenerate rigs."""
    warnings: List[str] = []
    mean_pts = model.mean_shape.reshape(-1, 3)
    va, vb = views[0], views[1] if len(views) > 1 else views[0]
    common = np.intersect1d(landmarks.indices.get(va.name, []), landmarks.indices.get(vb.name, []))
    if va is not vb and len(common) >= 3 and not baseline_is_degenerate(va.camera, vb.camera):
        lookup_a = {int(i): p for i, p in zip(landmarks.indices[va.name], landmarks.positions[va.name])}
        lookup_b = {int(i): p for i, p in zip(landmarks.indices[vb.name], landmarks.positions[vb.name])}
        pix_a = np.array([lookup_a[int(i)] for i in common])
        pix_b = np.array([lookup_b[int(i)] for i in common])
        world = triangulate(va.camera, vb.camera, pix_a, pix_b)
        if np.all(np.isfinite(world)):
            return similarity_procrustes(mean_pts[common], world), warnings
    warnings.append("degenerate camera pair: initializing the pose from a single view")
    logger.warning(warnings[-1])
    idx = landmarks.indices[va.name]
    return _single_view_pose(mean_pts[idx], va.camera, landmarks.positions[va.name]), warnings


def initial_lighting(model: ParametricModel, views: Sequence[ViewInput]) -> SHLighting:
    """DC-only lighting matching the mean image brightness to the mean albedo."""
    mean_albedo = model.mean_albedo.reshape(-1, 3).mean(axis=0)
    lit = [v.image[v.image.sum(axis=2) > 0] for v in views]
    lit = np.concatenate([p for p in lit if len(p)]) if any(len(p) for p in lit) else np.zeros((1, 3))
    dc = lit.mean(axis=0) / np.maximum(mean_albedo, 1.0) / sh_basis(np.array([0.0, 0.0, 1.0]))[0]
    coeffs = np.zeros((3, SH_COUNT))
    coeffs[:, 0] = dc
    return SHLighting(coeffs, np.zeros(3))


# --- Driver ---

def fit_two_views(
    model: ParametricModel,
    views: Sequence[ViewInput],
    landmarks: LandmarkSet,
    config: Optional[PipelineConfig] = None,
    init: Optional[FitState] = None,
    freeze_albedo: bool = False,
) -> Tuple[FitState, FittingReport]:
    """
    Staged Stage-1 fit: (a) pose from landmarks, (b) pose + identity + expression
    with the regularizer, then lighting and albedo alone on the fixed geometry,
    and (c) the full energy with every unknown.

    `init` warm-starts every unknown; `freeze_albedo` keeps x_alb fixed, as
    tracking of new frames with known reflectance requires.
    """
    config = config or get_settings()
    started = time.perf_counter()
    report = FittingReport()
    cameras = {v.name: v.camera for v in views}
    landmarks.check(model, cameras)
    for view in views:
        if len(landmarks.indices.get(view.name, [])) < MIN_LANDMARKS:
            raise ParameterError(f"View '{view.name}' needs at least {MIN_LANDMARKS} landmarks")
    if len(views) >= 2 and baseline_is_degenerate(views[0].camera, views[1].camera):
        report.warnings.append("degenerate camera pair: both views share a viewpoint")
        logger.warning(report.warnings[-1])

    L = layout_for(model)
    if init is None:
        pose, warns = initial_pose(model, views, landmarks)
        report.warnings += [w for w in warns if w not in report.warnings]
        init = FitState(FitCoefficients.zeros(model), pose, initial_lighting(model, views))
    x = L.pack(init)

    frozen_alb = [] if not freeze_albedo else ["alb"]
    stages = [
        ("pose", ("rot", "trans", "log_scale"), False),
        ("shape", ("id", "exp", "rot", "trans", "log_scale"), False),
        ("appearance", tuple(b for b in ("alb", "sh", "ambient") if b not in frozen_alb), True),
        ("full", tuple(b for b in ("id", "exp", "alb", "rot", "trans", "log_scale", "sh", "ambient")
                       if b not in frozen_alb), True),
    ]
    for name, blocks, use_photo in stages:
        if use_photo and config.w_con <= 0:
            blocks = tuple(b for b in blocks if b not in ("alb", "sh", "ambient"))
        if not blocks:
            continue
        active = L.indices(*blocks)
        fp = _FitProblem(model, views, landmarks, config, active, x, use_photo)
        x_active, gn_report = gauss_newton(fp.problem(), x[active], config.gn_max_iters,
                                           config.gn_damping, config.gn_tol)
        x = fp.full(x_active)
        report.stages[name] = gn_report
        report.energies[name] = total_energy(L.unpack(x), model, views, landmarks, config)
        logger.info(f"Stage-1 '{name}': cost {gn_report.initial_cost:.6g} -> {gn_report.final_cost:.6g} "
                    f"in {gn_report.iterations} iterations ({gn_report.reason})")

    state = L.unpack(x)
    report.seconds = time.perf_counter() - started
    logger.info(f"Stage-1 fit finished in {report.seconds:.2f}s, full energy {report.energies['full']:.6g}")
    return state, report


# --- Baking ---

DEPTH_TOLERANCE_PIXELS = 4.0


def _view_samples(
    posed: Mesh,
    uv_raster: UVRaster,
    positions: np.ndarray,
    view: ViewInput,
    threads: int,
) -> ViewSamples:
    cam = view.camera
    res = uv_raster.resolution
    mask = uv_raster.mask
    pixels = np.zeros((res, res, 2))
    view_vec = np.zeros((res, res, 3))
    observed = np.zeros((res, res, 3))
    visible = np.zeros((res, res), dtype=bool)

    pts = positions[mask]
    pix, depth = cam.project_points(pts)
    facing = front_facing(posed, cam)[uv_raster.tri_id[mask]]
    inside = (depth > NEAR_PLANE) & (pix[:, 0] >= 0) & (pix[:, 0] < cam.width) \
        & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height)

    zbuf = rasterize(posed, RigidPose.identity(), cam, threads=threads)
    col = np.clip(np.floor(pix[:, 0]).astype(np.int64), 0, cam.width - 1)
    row = np.clip(np.floor(pix[:, 1]).astype(np.int64), 0, cam.height - 1)
    hit = zbuf.mask[row, col]
    ref = np.where(hit, zbuf.depth[row, col], -np.inf)
    tol = DEPTH_TOLERANCE_PIXELS * depth / cam.focal
    unoccluded = hit & (depth <= ref + tol)

    vis = facing & inside & unoccluded
    visible[mask] = vis
    pixels[mask] = pix
    view_vec[mask] = normalize(cam.center - pts)
    obs = np.zeros((len(pts), 3))
    obs[vis] = sample_image(view.image, pix[vis])
    observed[mask] = obs
    return ViewSamples(visible, pixels, view_vec, observed)


def bake_maps(
    state: FitState,
    views: Sequence[ViewInput],
    model: ParametricModel,
    resolution: Optional[int] = None,
    timestamp: int = 0,
    threads: int = 1,
    uv_raster: Optional[UVRaster] = None,
) -> Tuple[BakedMaps, FrameObservation]:
    """
    Bakes the fitted frame into UV space.

    Returns the BakedMaps (PCA diffuse, model-space geometric normals, texels
    visible in every view) and the FrameObservation Stage 2 consumes
    (world normals, per-view visibility, projections, view vectors and
    sampled image colors).
    """
    resolution = resolution or get_settings().uv_resolution
    if uv_raster is None:
        uv_raster = rasterize_uv(model.triangles, model.uv_coords, resolution, threads)
    mesh = synthesize_shape(model, state.coeffs)
    posed = apply_pose(mesh, state.pose)

    normal = normalize(uv_raster.interpolate(mesh.triangles, mesh.vertex_normals))
    positions = uv_raster.interpolate(mesh.triangles, posed.vertices)
    world_normal = normalize(state.pose.rotate(normal))
    world_normal[~uv_raster.mask] = 0.0

    samples = {v.name: _view_samples(posed, uv_raster, positions, v, threads) for v in views}
    frame = FrameObservation(timestamp, state, world_normal, uv_raster.mask, samples)
    coverage = frame.overlap()
    diffuse = uv_raster.interpolate(model.triangles, vertex_albedo(model, state.coeffs))
    baked = BakedMaps(diffuse, normal, coverage)
    logger.info(f"Baked frame {timestamp}: {int(uv_raster.mask.sum())} surface texels, "
                f"{int(coverage.sum())} visible in all views")
    return baked, frame


def average_fit_states(states: Sequence[FitState], baked: Sequence[BakedMaps]) -> Tuple[SHLighting, np.ndarray]:
    """Mean SH lighting, mean ambient and mean baked diffuse map over all fitted frames."""
    if not states:
        raise ParameterError("Nothing to average")
    coeffs = np.mean([s.lighting.coeffs for s in states], axis=0)
    ambient = np.mean([s.lighting.ambient for s in states], axis=0)
    diffuse = np.mean([b.diffuse for b in baked], axis=0)
    return SHLighting(coeffs, ambient), diffuse
