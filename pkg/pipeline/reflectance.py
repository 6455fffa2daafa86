"""
Stage 2: reflectance inference over several frame pairs.

Minimizes E_O + λ_S·E_S + λ_H·E_H over Y = {δ_Cd, C_s, l, I_a} subject to
0 ≤ C_d + δ_Cd ≤ 255 and 0 ≤ C_s ≤ 255, by block-coordinate descent:
lighting first, then the specular map, then the diffuse displacement.

The specular block solves δ_Cd and C_s jointly per texel before polishing C_s
with Adam, so C_s follows only the view-dependent part of the residual.

All residuals live in UV space. A texel contributes to the data term once per
view that sees it; the specular-difference term compares the two views of a
texel seen by both. The dominant light is re-extracted from the current
lighting at the start of every block and held fixed while Adam runs.
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from configs.settings import PipelineConfig, get_settings
from core.exceptions import SolverError
from core.optim import laplacian_l1, project_box, run_adam
from core.shading import SH_COUNT, SHLighting, dominant_direction, dominant_intensity, sh_basis, specular_lobe
from pipeline.states import FramePairSet, ReflectanceState

logger = logging.getLogger(__name__)

BLOCKS = ("lighting", "specular", "diffuse")
SPECULAR_RIDGE = 1e-3


def overlap_mask(frames: FramePairSet, t: int) -> np.ndarray:
    """Texels visible in every view at timestamp `t`."""
    return frames.frame(t).overlap()


@dataclass
class _ViewTerms:
    idx: np.ndarray        # flat texel indices
    basis: np.ndarray      # (N, 9) SH basis at n_t
    intensity: np.ndarray  # (N, 3) dominant-light intensity
    lobe: np.ndarray       # (N,) (n·h)^m
    observed: np.ndarray   # (N, 3)


@dataclass
class _PairTerms:
    idx: np.ndarray
    intensity: np.ndarray    # (N, 3)
    lobe_diff: np.ndarray    # (N,) lobe_left − lobe_right
    observed_diff: np.ndarray  # (N, 3)


class ReflectanceObjective:
    """E_O, E_S, E_H and their gradients for a fixed dominant light."""

    def __init__(self, frames: FramePairSet, config: PipelineConfig):
        self.frames = frames
        self.config = config
        self.resolution = frames.resolution
        self.base = frames.base_diffuse.reshape(-1, 3)
        self.views: List[_ViewTerms] = []
        self.pairs: List[_PairTerms] = []

    def prepare(self, lighting: SHLighting) -> None:
        """Caches per-sample shading factors for the dominant light of `lighting`."""
        m, eps = self.config.shininess, self.config.intensity_epsilon
        direction = dominant_direction(lighting)
        self.views, self.pairs = [], []
        for frame in self.frames.frames:
            normals = frame.normal.reshape(-1, 3)
            lobes = {}
            for name in sorted(frame.views):
                samples = frame.views[name]
                idx = np.flatnonzero(samples.visible)
                n = normals[idx]
                if direction is None:
                    intensity, lobe = np.zeros((len(idx), 3)), np.zeros(len(idx))
                else:
                    intensity = dominant_intensity(lighting, direction, n, eps)
                    lobe = specular_lobe(n, samples.view_vec.reshape(-1, 3)[idx], direction, m)
                self.views.append(_ViewTerms(idx, sh_basis(n), intensity, lobe,
                                             samples.observed.reshape(-1, 3)[idx]))
                full_lobe = np.zeros(self.resolution ** 2)
                full_lobe[idx] = lobe
                lobes[name] = full_lobe
            names = sorted(frame.views)
            if len(names) < 2:
                continue
            both = np.flatnonzero(frame.overlap())
            if len(both) == 0:
                logger.warning(f"Frame {frame.timestamp}: views share no visible texel; "
                               f"it adds nothing to the specular-difference term")
                continue
            left, right = frame.views[names[0]], frame.views[names[1]]
            n = normals[both]
            intensity = (dominant_intensity(lighting, direction, n, eps) if direction is not None
                         else np.zeros((len(both), 3)))
            self.pairs.append(_PairTerms(
                both,
                intensity,
                lobes[names[0]][both] - lobes[names[1]][both],
                left.observed.reshape(-1, 3)[both] - right.observed.reshape(-1, 3)[both],
            ))

    # --- energies ---

    def data(self, delta: np.ndarray, spec: np.ndarray, lighting: SHLighting, need_grad: bool = False):
        """E_O and, on request, its gradients w.r.t. δ (R²·3), C_s (R²) and the lighting vector (30)."""
        delta = delta.reshape(-1, 3)
        spec = spec.ravel()
        albedo_map = self.base + delta
        energy = 0.0
        g_delta = np.zeros_like(albedo_map)
        g_spec = np.zeros(len(spec))
        g_light = np.zeros((3, SH_COUNT))
        g_amb = np.zeros(3)
        for vt in self.views:
            albedo = albedo_map[vt.idx]
            E = vt.basis @ lighting.coeffs.T
            rendered = lighting.ambient + albedo * E + vt.intensity * (spec[vt.idx] * vt.lobe)[:, None]
            r = vt.observed - rendered
            energy += float(np.sum(r * r))
            if need_grad:
                for c in range(3):
                    g_delta[:, c] += np.bincount(vt.idx, weights=-2.0 * r[:, c] * E[:, c], minlength=len(spec))
                g_spec += np.bincount(vt.idx, weights=-2.0 * np.sum(r * vt.intensity, axis=1) * vt.lobe,
                                      minlength=len(spec))
                g_light += (-2.0 * r * albedo).T @ vt.basis
                g_amb += -2.0 * r.sum(axis=0)
        grads = (g_delta, g_spec, np.concatenate([g_light.ravel(), g_amb])) if need_grad else None
        return energy, grads

    def specular_difference(self, spec: np.ndarray, need_grad: bool = False):
        spec = spec.ravel()
        energy = 0.0
        g_spec = np.zeros(len(spec))
        for pt in self.pairs:
            q = pt.observed_diff - pt.intensity * (spec[pt.idx] * pt.lobe_diff)[:, None]
            energy += float(np.sum(q * q))
            if need_grad:
                g_spec += np.bincount(pt.idx, weights=-2.0 * np.sum(q * pt.intensity, axis=1) * pt.lobe_diff,
                                      minlength=len(spec))
        return energy, (g_spec if need_grad else None)

    def texel_solve(
        self,
        lighting: SHLighting,
        delta: np.ndarray,
        spec: np.ndarray,
        ridge: float = SPECULAR_RIDGE,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Per-texel minimizer of E_O + λ_S·E_S over (δ_Cd, C_s) at fixed lighting.

        Each texel is a 4-unknown least-squares problem; δ_Cd is eliminated
        first, so C_s is driven only by the part of the residual that changes
        between observations. `ridge` (relative to the C_s curvature) pulls
        texels without view-dependent evidence toward zero. Results are clipped
        to the boxes; texels no view sees keep their current values.
        """
        n = len(self.base)
        H_d, H_x, b_d = np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3))
        H_s, b_s = np.zeros(n), np.zeros(n)
        for vt in self.views:
            E = vt.basis @ lighting.coeffs.T
            a = vt.intensity * vt.lobe[:, None]
            y = vt.observed - lighting.ambient - self.base[vt.idx] * E
            for c in range(3):
                H_d[:, c] += np.bincount(vt.idx, weights=E[:, c] * E[:, c], minlength=n)
                H_x[:, c] += np.bincount(vt.idx, weights=E[:, c] * a[:, c], minlength=n)
                b_d[:, c] += np.bincount(vt.idx, weights=E[:, c] * y[:, c], minlength=n)
            H_s += np.bincount(vt.idx, weights=np.sum(a * a, axis=1), minlength=n)
            b_s += np.bincount(vt.idx, weights=np.sum(a * y, axis=1), minlength=n)
        lam = self.config.lambda_s
        for pt in self.pairs:
            q = pt.intensity * pt.lobe_diff[:, None]
            H_s += lam * np.bincount(pt.idx, weights=np.sum(q * q, axis=1), minlength=n)
            b_s += lam * np.bincount(pt.idx, weights=np.sum(q * pt.observed_diff, axis=1), minlength=n)

        seen = np.all(H_d > 0, axis=1)
        safe = np.where(seen[:, None], H_d, 1.0)
        schur = np.maximum(H_s - np.sum(H_x * H_x / safe, axis=1), 0.0) + ridge * H_s
        rhs = b_s - np.sum(H_x * b_d / safe, axis=1)
        solved = np.divide(rhs, schur, out=np.zeros(n), where=schur > 0)
        spec = np.where(seen, np.clip(solved, 0.0, 255.0), np.asarray(spec, dtype=np.float64).ravel())
        solved_delta = np.clip((b_d - H_x * spec[:, None]) / safe, -self.base, 255.0 - self.base)
        delta = np.where(seen[:, None], solved_delta, np.asarray(delta, dtype=np.float64).reshape(-1, 3))
        return delta, spec

    def smoothness(self, delta: np.ndarray, spec: np.ndarray):
        R = self.resolution
        e_d, g_d = laplacian_l1(delta.reshape(R, R, 3), self.config.smooth_l1_epsilon)
        e_s, g_s = laplacian_l1(spec.reshape(R, R), self.config.smooth_l1_epsilon)
        return e_d + e_s, g_d.reshape(-1, 3), g_s.ravel()

    def terms(self, state: ReflectanceState) -> Dict[str, float]:
        e_o, _ = self.data(state.delta_diffuse, state.specular, state.lighting)
        e_s, _ = self.specular_difference(state.specular)
        e_h, _, _ = self.smoothness(state.delta_diffuse, state.specular)
        total = e_o + self.config.lambda_s * e_s + self.config.lambda_h * e_h
        return {"E_O": e_o, "E_S": e_s, "E_H": e_h, "total": total}


def _objective(frames: FramePairSet, state: ReflectanceState, config: PipelineConfig) -> ReflectanceObjective:
    obj = ReflectanceObjective(frames, config)
    obj.prepare(state.lighting)
    return obj


def data_energy(state: ReflectanceState, frames: FramePairSet, config: Optional[PipelineConfig] = None) -> float:
    """Σ_t Σ_view Σ_visible ‖I_view − I_total(Y)‖² over UV texels."""
    config = config or get_settings()
    return _objective(frames, state, config).data(state.delta_diffuse, state.specular, state.lighting)[0]


def specular_difference_energy(state: ReflectanceState, frames: FramePairSet,
                               config: Optional[PipelineConfig] = None) -> float:
    """Σ_t Σ_overlap ‖(I_l − I_r) − (I_s,l − I_s,r)‖²; independent of δ_Cd and I_a."""
    config = config or get_settings()
    return _objective(frames, state, config).specular_difference(state.specular)[0]


def smoothness_energy(state: ReflectanceState, epsilon: float = 1e-3) -> float:
    """Smoothed-L1 norm of the Laplacians of δ_Cd (per channel) and C_s."""
    R = state.specular.shape[0]
    e_d, _ = laplacian_l1(state.delta_diffuse.reshape(R, R, 3), epsilon)
    e_s, _ = laplacian_l1(state.specular, epsilon)
    return e_d + e_s


# --- Driver ---

class PassRecord(BaseModel):
    pass_index: int = Field(..., alias="pass", description="Block pass index, 0 for the initial state")
    E_O: float
    E_S: float
    E_H: float
    total: float

    model_config = {"populate_by_name": True}


class ReflectanceReport(BaseModel):
    passes: List[PassRecord] = Field(default_factory=list, description="Energies after each block pass")
    rollbacks: List[str] = Field(default_factory=list, description="Blocks whose update was discarded")
    converged: bool = Field(False, description="True if the relative pass decrease fell below tolerance")
    seconds: float = Field(0.0, description="Wall-clock time of Stage 2")

    def trace_rows(self) -> List[dict]:
        return [p.model_dump(by_alias=True) for p in self.passes]


def _check_box(state: ReflectanceState, base: np.ndarray) -> None:
    albedo = base + state.delta_diffuse
    tol = 1e-9
    if albedo.min() < -tol or albedo.max() > 255 + tol or state.specular.min() < -tol or state.specular.max() > 255 + tol:
        raise SolverError("Box constraints violated after a block update",
                          diagnostics={"albedo_range": (float(albedo.min()), float(albedo.max())),
                                       "specular_range": (float(state.specular.min()), float(state.specular.max()))})


def _run_block(
    block: str,
    obj: ReflectanceObjective,
    state: ReflectanceState,
    config: PipelineConfig,
) -> ReflectanceState:
    lam_s, lam_h = config.lambda_s, config.lambda_h
    adam = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
                patience=config.adam_patience, name=f"stage2-{block}")
    base = obj.base

    if block == "lighting":
        delta, spec = state.delta_diffuse, state.specular

        def energy_grad(v):
            light = SHLighting.from_vector(v)
            e, (_, _, g) = obj.data(delta, spec, light, need_grad=True)
            return e, g

        def project(v):
            v = v.copy()
            v[27:] = np.maximum(v[27:], 0.0)
            return v

        v, _ = run_adam(energy_grad, state.lighting.to_vector(), config.adam_steps_per_block,
                        lr=config.adam_lr_lighting, project=project, **adam)
        return ReflectanceState(delta, spec, SHLighting.from_vector(v))

    if block == "specular":
        light = state.lighting
        delta, start = obj.texel_solve(light, state.delta_diffuse, state.specular)
        delta = delta.reshape(state.delta_diffuse.shape)

        def energy_grad(v):
            e_o, (_, g_o, _) = obj.data(delta, v, light, need_grad=True)
            e_s, g_s = obj.specular_difference(v, need_grad=True)
            R = obj.resolution
            e_h, g_h = laplacian_l1(v.reshape(R, R), config.smooth_l1_epsilon)
            e_hd, _ = laplacian_l1(np.asarray(delta).reshape(R, R, 3), config.smooth_l1_epsilon)
            return e_o + lam_s * e_s + lam_h * (e_h + e_hd), g_o + lam_s * g_s + lam_h * g_h.ravel()

        v, _ = run_adam(energy_grad, start, config.adam_steps_per_block,
                        lr=config.adam_lr_maps, project=lambda v: project_box(v, 0.0, 255.0), **adam)
        return ReflectanceState(delta, v.reshape(state.specular.shape), light)

    spec, light = state.specular, state.lighting
    lo, hi = (-base).ravel(), (255.0 - base).ravel()

    def energy_grad(v):
        e_o, (g_o, _, _) = obj.data(v, spec, light, need_grad=True)
        e_s, _ = obj.specular_difference(spec)
        e_h, g_h, _ = obj.smoothness(v, spec)
        return e_o + lam_s * e_s + lam_h * e_h, (g_o + lam_h * g_h).ravel()

    v, _ = run_adam(energy_grad, state.delta_diffuse.ravel(), config.adam_steps_per_block,
                    lr=config.adam_lr_maps, project=lambda v: project_box(v, lo, hi), **adam)
    return ReflectanceState(v.reshape(state.delta_diffuse.shape), spec, light)


def infer_reflectance(
    frames: FramePairSet,
    lighting: SHLighting,
    config: Optional[PipelineConfig] = None,
    use_specular: bool = True,
) -> Tuple[ReflectanceState, ReflectanceReport]:
    """
    Block-coordinate estimation of δ_Cd, C_s and the shared lighting.

    Starts from δ_Cd = 0, C_s = 0 and the given (frame-averaged) lighting.
    A block update is kept only if it lowers the total energy, so the per-pass
    totals never increase. With `use_specular` false the specular map stays
    zero and its block is skipped.
    """
    config = config or get_settings()
    started = time.perf_counter()
    state = ReflectanceState.initial(frames.resolution, lighting)
    report = ReflectanceReport()
    base = frames.base_diffuse

    obj = _objective(frames, state, config)
    terms = obj.terms(state)
    report.passes.append(PassRecord(pass_index=0, **terms))
    logger.info(f"Stage-2 start: E_O={terms['E_O']:.6g} E_S={terms['E_S']:.6g} E_H={terms['E_H']:.6g}")
    blocks = [b for b in BLOCKS if use_specular or b != "specular"]

    try:
        for p in range(1, config.block_passes + 1):
            previous = terms["total"]
            for block in blocks:
                obj = _objective(frames, state, config)
                candidate = _run_block(block, obj, state, config)
                cand_terms = _objective(frames, candidate, config).terms(candidate)
                if cand_terms["total"] <= terms["total"]:
                    state, terms = candidate, cand_terms
                else:
                    report.rollbacks.append(f"pass {p}: {block}")
                    logger.debug(f"Stage-2 pass {p}: {block} block rolled back "
                                 f"({cand_terms['total']:.6g} > {terms['total']:.6g})")
                _check_box(state, base)
            report.passes.append(PassRecord(pass_index=p, **terms))
            logger.info(f"Stage-2 pass {p}: total {terms['total']:.6g} (E_O={terms['E_O']:.6g}, "
                        f"E_S={terms['E_S']:.6g}, E_H={terms['E_H']:.6g})")
            if previous > 0 and (previous - terms["total"]) / previous < config.pass_tol:
                report.converged = True
                break
    except SolverError as e:
        logger.error(f"Stage 2 aborted: {e}", exc_info=True)
        e.diagnostics.update({
            "delta_diffuse": np.array(state.delta_diffuse),
            "specular": np.array(state.specular),
            "lighting": state.lighting.to_vector(),
        })
        raise

    report.seconds = time.perf_counter() - started
    logger.info(f"Stage 2 finished in {report.seconds:.2f}s after {len(report.passes) - 1} passes")
    return state, report


def refined_diffuse(frames: FramePairSet, state: ReflectanceState) -> np.ndarray:
    """C_d + δ_Cd."""
    return np.asarray(frames.base_diffuse) + state.delta_diffuse
