"""
Gradient checks and invariant checks that run without pytest.

`run_selftest` is what the `selftest` subcommand executes; the test suite
reuses the small synthetic frame builder below.
"""

import logging
import time
from typing import Callable, List, Optional

import numpy as np
from scipy.spatial.transform import Rotation
from pydantic import BaseModel, Field

from configs.settings import PipelineConfig, get_settings
from core.facemodel import FitCoefficients
from core.geometry import RigidPose, normalize, spherical_jacobian, spherical_to_normal
from core.optim import (
    LeastSquaresProblem,
    check_gradient,
    gauss_newton,
    raster_laplacian,
    raster_laplacian_adjoint,
)
from core.rng import stream
from core.shading import (
    DominantLight,
    SHLighting,
    directional_light_sh,
    irradiance,
    rotate_sh,
    sh_basis,
    shade_total,
    shading_gradients,
)
from pipeline.georefine import RefineObjective
from pipeline.reflectance import ReflectanceObjective
from pipeline.states import FitState, FrameObservation, FramePairSet, ReflectanceState, ViewSamples

logger = logging.getLogger(__name__)

Y00 = 0.28209479177387814
BAND_SUM = 9.0 / (4.0 * np.pi)


class CheckResult(BaseModel):
    name: str = Field(..., description="Check identifier")
    passed: bool
    value: float = Field(..., description="Measured worst error")
    threshold: float = Field(..., description="Largest accepted error")
    seconds: float = 0.0


class SelftestReport(BaseModel):
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> List[str]:
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value:.3g} (limit {c.threshold:.3g}, {c.seconds:.2f}s)"
                for c in self.checks]


# --- Synthetic inputs ---

def sample_lighting(seed: int = 0) -> SHLighting:
    gen = stream(seed, "selftest.lighting")
    direction = normalize(np.array([gen.uniform(-0.5, 0.5), gen.uniform(0.0, 0.5), 1.0]))
    coeffs = directional_light_sh(direction, gen.uniform(0.6, 0.9, size=3))
    coeffs[:, 0] += 0.5
    return SHLighting(coeffs, gen.uniform(5.0, 15.0, size=3))


def synthetic_frame_set(seed: int = 0, resolution: int = 6, n_frames: int = 1,
                        lighting: Optional[SHLighting] = None) -> FramePairSet:
    """
    A FramePairSet built directly in UV space: random front-facing normals,
    two slightly converging views with random visibility and random colors.
    """
    gen = stream(seed, "selftest.frames")
    R = resolution
    lighting = lighting or sample_lighting(seed)
    state = FitState(FitCoefficients(np.zeros(1), np.zeros(1), np.zeros(1)), RigidPose.identity(), lighting)
    frames = []
    for t in range(n_frames):
        normal = normalize(np.stack([gen.uniform(-0.5, 0.5, (R, R)), gen.uniform(-0.5, 0.5, (R, R)),
                                     np.ones((R, R))], axis=-1))
        views = {}
        for name, x in (("left", -0.3), ("right", 0.3)):
            view_vec = normalize(np.array([x, 0.0, 1.0]) + gen.normal(0.0, 0.05, (R, R, 3)))
            visible = gen.uniform(size=(R, R)) < 0.8
            observed = np.where(visible[..., None], gen.uniform(60.0, 200.0, (R, R, 3)), 0.0)
            views[name] = ViewSamples(visible, np.zeros((R, R, 2)), view_vec, observed)
        frames.append(FrameObservation(t, state, normal, np.ones((R, R), dtype=bool), views))
    return FramePairSet(frames, gen.uniform(80.0, 200.0, (R, R, 3)))


def random_reflectance(frames: FramePairSet, seed: int = 0) -> ReflectanceState:
    gen = stream(seed, "selftest.reflectance")
    R = frames.resolution
    lighting = frames.frames[0].state.lighting
    return ReflectanceState(gen.uniform(-20.0, 20.0, (R, R, 3)), gen.uniform(0.0, 100.0, (R, R)), lighting)


# --- Checks ---

def _timed(name: str, threshold: float, fn: Callable[[], float]) -> CheckResult:
    started = time.perf_counter()
    value = float(fn())
    return CheckResult(name=name, passed=bool(value < threshold), value=value, threshold=threshold,
                       seconds=time.perf_counter() - started)


def _relative_floor(grad: np.ndarray) -> float:
    return 1e-6 * max(1.0, float(np.max(np.abs(grad))))


def shading_gradient_error(n_configs: int = 1000, seed: int = 0, m: float = 5.0) -> float:
    """Worst relative error of every shade_total partial over random configurations."""
    gen = stream(seed, "selftest.shading")
    worst = 0.0
    done = 0
    while done < n_configs:
        light = SHLighting(gen.normal(0.0, 0.5, (3, 9)) + np.array([1.5] + [0.0] * 8), gen.uniform(1, 20, 3))
        direction = normalize(gen.normal(size=3))
        theta, phi = gen.uniform(0.3, np.pi - 0.3), gen.uniform(-np.pi, np.pi)
        v = normalize(gen.normal(size=3))
        h = normalize(direction + v)
        if abs(spherical_to_normal(theta, phi) @ h) < 0.05:
            continue  # too close to the lobe kink
        C_d, delta = gen.uniform(50, 200, 3), gen.uniform(-20, 20, 3)
        C_s, intensity = float(gen.uniform(0, 200)), gen.uniform(0, 2, 3)
        weights = gen.normal(size=3)
        dom = DominantLight(direction, np.zeros((1, 1, 3)))

        def pack(d, cs, coeffs, amb, th, ph):
            return np.concatenate([d, [cs], coeffs.ravel(), amb, [th, ph]])

        def f(x):
            lt = SHLighting(x[4:31].reshape(3, 9), x[31:34])
            n = spherical_to_normal(x[34], x[35])
            return float(weights @ shade_total(C_d, x[:3], x[3], n, v, lt, dom, m, intensity=intensity))

        def grad(x):
            lt = SHLighting(x[4:31].reshape(3, 9), x[31:34])
            n = spherical_to_normal(x[34], x[35])
            g = shading_gradients(C_d, x[:3], x[3], n, v, lt, dom, m, intensity=intensity,
                                  normal_jacobian=spherical_jacobian(x[34], x[35]))
            return pack(weights * g.d_delta, weights @ g.d_specular,
                        weights[:, None] * g.d_coeffs, weights * g.d_ambient, *(weights @ g.d_spherical))

        x = pack(delta, C_s, light.coeffs, light.ambient, theta, phi)
        worst = max(worst, check_gradient(f, grad, x, step=1e-5, floor=_relative_floor(grad(x))))
        done += 1
    return worst


def reflectance_gradient_error(seed: int = 0, config: Optional[PipelineConfig] = None) -> float:
    """Worst relative error of the Stage-2 block gradients on a small synthetic frame set."""
    config = config or get_settings()
    frames = synthetic_frame_set(seed, resolution=5)
    state = random_reflectance(frames, seed)
    obj = ReflectanceObjective(frames, config)
    obj.prepare(state.lighting)
    delta, spec, light = state.delta_diffuse.ravel(), state.specular.ravel(), state.lighting
    lam_s, lam_h = config.lambda_s, config.lambda_h

    def total(d, s, lt):
        e_o = obj.data(d, s, lt)[0]
        e_s = obj.specular_difference(s)[0]
        e_h = obj.smoothness(d, s)[0]
        return e_o + lam_s * e_s + lam_h * e_h

    def grad_delta(d):
        _, (g, _, _) = obj.data(d, spec, light, need_grad=True)
        return (g + lam_h * obj.smoothness(d, spec)[1]).ravel()

    def grad_spec(s):
        _, (_, g, _) = obj.data(delta, s, light, need_grad=True)
        return g + lam_s * obj.specular_difference(s, need_grad=True)[1] + lam_h * obj.smoothness(delta, s)[2]

    def grad_light(v):
        _, (_, _, g) = obj.data(delta, spec, SHLighting.from_vector(v, clamp_ambient=False), need_grad=True)
        return g

    checks = [
        (lambda d: total(d, spec, light), grad_delta, delta),
        (lambda s: total(delta, s, light), grad_spec, spec),
        (lambda v: total(delta, spec, SHLighting.from_vector(v, clamp_ambient=False)), grad_light,
         light.to_vector()),
    ]
    return max(check_gradient(f, g, x, step=1e-4, floor=_relative_floor(g(x))) for f, g, x in checks)


def refine_gradient_error(seed: int = 0, config: Optional[PipelineConfig] = None) -> float:
    """Worst relative error of the refinement-energy gradient on a small synthetic frame set."""
    config = config or get_settings()
    frames = synthetic_frame_set(seed, resolution=4)
    reflectance = random_reflectance(frames, seed)
    obj = RefineObjective(frames, reflectance, config)
    R = frames.resolution
    x = stream(seed, "selftest.refine").normal(0.0, 0.05, R * R * 2)

    def f(v):
        return obj(v.reshape(R, R, 2), need_grad=False)[0]

    def g(v):
        return obj(v.reshape(R, R, 2))[1].ravel()

    return check_gradient(f, g, x, step=1e-4, floor=_relative_floor(g(x)))


def sh_identity_error(n: int = 10000, seed: int = 0) -> float:
    gen = stream(seed, "selftest.sh")
    normals = normalize(gen.normal(size=(n, 3)))
    basis = sh_basis(normals)
    return max(float(np.abs(basis[:, 0] - Y00).max()), float(np.abs((basis ** 2).sum(axis=1) - BAND_SUM).max()))


def rotation_equivariance_error(seed: int = 0, n: int = 2000) -> float:
    """|E_rotated(R n) − E(n)| for diffuse irradiance under a random rotation."""
    gen = stream(seed, "selftest.rotation")
    light = sample_lighting(seed)
    rot = Rotation.from_quat(normalize(gen.normal(size=4))).as_matrix()
    rotated = SHLighting(rotate_sh(light.coeffs, rot), light.ambient)
    normals = normalize(gen.normal(size=(n, 3)))
    return float(np.abs(irradiance(rotated, normals @ rot.T) - irradiance(light, normals)).max())


def laplacian_adjoint_error(seed: int = 0) -> float:
    gen = stream(seed, "selftest.laplacian")
    a, b = gen.normal(size=(7, 6, 3)), gen.normal(size=(7, 6, 3))
    lhs = float(np.sum(raster_laplacian(a) * b))
    rhs = float(np.sum(a * raster_laplacian_adjoint(b)))
    return abs(lhs - rhs) / max(1.0, abs(lhs))


def linear_gauss_newton_error(seed: int = 0) -> float:
    """Gauss-Newton on a linear problem against the direct least-squares solution."""
    gen = stream(seed, "selftest.gauss_newton")
    A, b = gen.normal(size=(40, 6)), gen.normal(size=40)
    problem = LeastSquaresProblem(lambda x: A @ x - b, lambda x: A, 6)
    x, _ = gauss_newton(problem, np.zeros(6), max_iters=20, damping=1e-12, tol=0.0)
    direct = np.linalg.lstsq(A, b, rcond=None)[0]
    return float(np.abs(x - direct).max())


def run_selftest(config: Optional[PipelineConfig] = None, n_configs: int = 1000, seed: int = 0) -> SelftestReport:
    config = config or get_settings()
    report = SelftestReport()
    report.checks.append(_timed("shading_gradients", 1e-4, lambda: shading_gradient_error(n_configs, seed,
                                                                                           config.shininess)))
    report.checks.append(_timed("reflectance_gradients", 1e-4, lambda: reflectance_gradient_error(seed, config)))
    report.checks.append(_timed("refine_gradients", 1e-4, lambda: refine_gradient_error(seed, config)))
    report.checks.append(_timed("sh_identities", 1e-9, lambda: sh_identity_error(seed=seed)))
    report.checks.append(_timed("sh_rotation_equivariance", 1e-3, lambda: rotation_equivariance_error(seed)))
    report.checks.append(_timed("laplacian_adjoint", 1e-12, lambda: laplacian_adjoint_error(seed)))
    report.checks.append(_timed("linear_gauss_newton", 1e-8, lambda: linear_gauss_newton_error(seed)))
    for line in report.lines():
        logger.info(line)
    return report
