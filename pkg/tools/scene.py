"""
Synthetic scenes with full ground truth.

A scene is one subject (identity and albedo fixed) seen at several timestamps
by a left, a right and a held-out camera under one global lighting. The
diffuse albedo carries detail outside the PCA span, the specular albedo is a
smooth base with localized highlights and the normals may carry a
high-frequency bump field, so each pipeline stage has something to recover.

Directory layout written by `write_scene`:

    scene.json                manifest (parameters, views, timestamps, file map)
    model.rcm                 parametric model
    cameras.txt               all three cameras
    frames/<t>/<view>.png     8-bit renders
    landmarks/<t>.txt         exact landmark projections of the input views
    truth/lighting.txt        shared SH lighting
    truth/diffuse.frm         full diffuse albedo (PCA part + detail)
    truth/detail.frm          the detail alone
    truth/specular.frm        scalar specular albedo
    truth/state_<t>.rfs       per-frame coefficients, pose and lighting
    truth/normal_<t>.frm      per-frame model-space shading normals
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from configs.settings import PipelineConfig, get_settings
from core.exceptions import FormatError, ParameterError
from core.facemodel import (
    FitCoefficients,
    ParametricModel,
    generate_synthetic_model,
    landmark_vertices,
    load_model,
    save_model,
    synthesize_albedo,
    synthesize_shape,
)
from core.geometry import NEAR_PLANE, Camera, RigidPose, apply_pose, look_at, normalize
from core.io import (
    read_cameras,
    read_landmarks,
    read_lighting,
    read_png,
    read_raster,
    to_uint8,
    write_cameras,
    write_landmarks,
    write_lighting,
    write_png,
    write_raster,
)
from core.raster import rasterize_uv, texel_centers
from core.renderer import render_view
from core.rng import stream
from core.shading import SHLighting, directional_light_sh
from pipeline.georefine import REFINE_FRAME, normal_to_spherical, spherical_to_normal
from pipeline.states import FitState, LandmarkSet, ViewInput, load_fit_state, save_fit_state

logger = logging.getLogger(__name__)

INPUT_VIEWS = ("left", "right")
HELDOUT_VIEW = "heldout"
CAMERA_DISTANCE = 4.0
MANIFEST = "scene.json"


class ScenePlan(BaseModel):
    """Generation parameters of a synthetic scene."""
    seed: int = Field(0, ge=0, description="Root seed of every random stream of the scene")
    n_frames: int = Field(3, ge=1, description="Number of timestamps")
    specular_strength: float = Field(1.0, ge=0, le=2, description="Scale of the specular albedo")
    detail_strength: float = Field(1.0, ge=0, le=4, description="Scale of the non-PCA diffuse detail")
    noise_sigma: float = Field(0.0, ge=0, le=50, description="Gaussian pixel noise before quantization")
    bump_strength: float = Field(0.0, ge=0, le=0.5, description="Amplitude in radians of the normal bump field")
    resolution: int = Field(512, ge=3, description="UV raster side length")
    image_width: int = Field(192, ge=8)
    image_height: int = Field(192, ge=8)
    rig_yaw_deg: float = Field(20.0, ge=0, lt=90)
    heldout_yaw_offset_deg: float = Field(0.0)
    yaw_sweep_deg: float = Field(25.0, ge=0, lt=90)
    model_vertices: int = Field(642, ge=4)
    k_id: int = Field(8, ge=1)
    k_exp: int = Field(4, ge=1)
    k_alb: int = Field(8, ge=1)
    shininess: float = Field(5.0, gt=0)
    intensity_epsilon: float = Field(0.1, gt=0)

    @classmethod
    def from_config(cls, config: PipelineConfig, **overrides) -> "ScenePlan":
        fields = {name: getattr(config, name) for name in cls.model_fields if hasattr(config, name)}
        fields["resolution"] = config.uv_resolution
        fields.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**fields)
        except ValidationError as e:
            err = e.errors()[0]
            raise ParameterError(f"Invalid scene parameter {err['loc'][0]}: {err['msg']}") from e


@dataclass(frozen=True)
class SyntheticScene:
    plan: ScenePlan
    model: ParametricModel
    cameras: Dict[str, Camera]
    states: List[FitState]
    lighting: SHLighting
    true_diffuse: np.ndarray          # (R, R, 3)
    true_detail: np.ndarray           # (R, R, 3)
    true_specular: np.ndarray         # (R, R)
    true_normals: List[np.ndarray]    # per frame (R, R, 3), model space
    images: List[Dict[str, np.ndarray]]
    landmarks: List[Dict[str, List[Tuple[int, float, float]]]]

    @property
    def timestamps(self) -> List[int]:
        return list(range(len(self.states)))

    def views(self, t: int, names: Sequence[str] = INPUT_VIEWS) -> List[ViewInput]:
        return [ViewInput(name, self.images[t][name], self.cameras[name]) for name in names]

    def landmark_set(self, t: int) -> LandmarkSet:
        return LandmarkSet.from_records(self.landmarks[t])


# --- Ground-truth construction ---

def rig_cameras(plan: ScenePlan) -> Dict[str, Camera]:
    """Left and right cameras at ±rig yaw on a circle about the head, held-out camera between them."""
    focal = 1.25 * plan.image_width
    pp = (plan.image_width / 2.0, plan.image_height / 2.0)
    res = (plan.image_width, plan.image_height)
    yaws = {"left": -plan.rig_yaw_deg, "right": plan.rig_yaw_deg, HELDOUT_VIEW: plan.heldout_yaw_offset_deg}
    cameras = {}
    for name, yaw in yaws.items():
        a = np.deg2rad(yaw)
        eye = CAMERA_DISTANCE * np.array([np.sin(a), 0.0, np.cos(a)])
        cameras[name] = Camera(focal, pp, look_at(eye, np.zeros(3)), res)
    return cameras


def _bounded_normal(gen: np.random.Generator, sigma: np.ndarray, spread: float = 0.8) -> np.ndarray:
    return np.clip(gen.normal(0.0, spread, size=len(sigma)), -2.0, 2.0) * sigma


def scene_lighting(seed: int) -> SHLighting:
    """A frontal key light plus a soft fill, perturbed within small band-1/band-2 limits."""
    gen = stream(seed, "scene.lighting")
    direction = normalize(np.array([gen.uniform(-0.6, 0.6), gen.uniform(0.1, 0.5), 1.0]))
    color = gen.uniform(0.45, 0.65, size=3)
    coeffs = directional_light_sh(direction, color)
    coeffs[:, 0] += gen.uniform(0.05, 0.1) / 0.28209479177387814
    coeffs[:, 1:] += gen.uniform(-0.02, 0.02, size=(3, 8))
    ambient = gen.uniform(6.0, 14.0, size=3)
    return SHLighting(coeffs, ambient)


def frame_poses(plan: ScenePlan) -> List[RigidPose]:
    gen = stream(plan.seed, "scene.poses")
    yaws = np.linspace(-plan.yaw_sweep_deg, plan.yaw_sweep_deg, plan.n_frames) if plan.n_frames > 1 else [0.0]
    poses = []
    for yaw in yaws:
        pitch = gen.uniform(-4.0, 4.0)
        rotvec = np.deg2rad(np.array([pitch, yaw, 0.0]))
        poses.append(RigidPose.from_rotvec(rotvec, gen.normal(0.0, 0.02, size=3), 1.0))
    return poses


def specular_truth(plan: ScenePlan) -> np.ndarray:
    """Smooth base plus Gaussian highlights on forehead, nose and cheeks, scaled by the specular strength."""
    gen = stream(plan.seed, "scene.specular")
    uv = texel_centers(plan.resolution)
    u, v = uv[..., 0], uv[..., 1]
    base = 0.35 + 0.15 * np.sin(2 * np.pi * (u * gen.uniform(0.8, 1.5) + gen.uniform())) \
        * np.cos(2 * np.pi * (v * gen.uniform(0.8, 1.5) + gen.uniform()))
    spots = np.array([[0.5, 0.3], [0.5, 0.52], [0.35, 0.6], [0.65, 0.6]]) + gen.uniform(-0.03, 0.03, size=(4, 2))
    highlights = np.zeros_like(u)
    for (su, sv), amp in zip(spots, gen.uniform(0.3, 0.5, size=len(spots))):
        highlights += amp * np.exp(-((u - su) ** 2 + (v - sv) ** 2) / (2 * 0.05 ** 2))
    return np.clip(90.0 * plan.specular_strength * np.clip(base + highlights, 0.0, 1.0), 0.0, 255.0)


def detail_truth(plan: ScenePlan) -> np.ndarray:
    """High-frequency albedo detail that no PCA combination reproduces."""
    gen = stream(plan.seed, "scene.detail")
    uv = texel_centers(plan.resolution)
    u, v = uv[..., 0], uv[..., 1]
    pattern = np.sin(2 * np.pi * (12 * u + gen.uniform())) * np.sin(2 * np.pi * (9 * v + gen.uniform()))
    tint = gen.uniform(0.7, 1.0, size=3)
    return 12.0 * plan.detail_strength * pattern[..., None] * tint


def bump_normals(normals: np.ndarray, surface: np.ndarray, plan: ScenePlan) -> np.ndarray:
    """Perturbs a model-space normal map by a bump field expressed as spherical offsets."""
    if plan.bump_strength == 0:
        return normals
    gen = stream(plan.seed, "scene.bump")
    uv = texel_centers(plan.resolution)
    u, v = uv[..., 0], uv[..., 1]
    p1, p2 = gen.uniform(0, 2 * np.pi, size=2)
    d_theta = plan.bump_strength * np.sin(2 * np.pi * 14 * u + p1) * np.cos(2 * np.pi * 11 * v)
    d_phi = plan.bump_strength * np.cos(2 * np.pi * 13 * u) * np.sin(2 * np.pi * 12 * v + p2)
    safe = np.where(surface[..., None], normals, (0.0, 0.0, 1.0))
    theta, phi = normal_to_spherical(safe, REFINE_FRAME)
    out = spherical_to_normal(theta + d_theta, phi + d_phi, REFINE_FRAME)
    out[~surface] = 0.0
    return out


def project_landmarks(model: ParametricModel, state: FitState, cameras: Dict[str, Camera],
                      views: Sequence[str] = INPUT_VIEWS) -> Dict[str, List[Tuple[int, float, float]]]:
    """Exact projections of the landmark vertices that land in front of each camera and inside its image."""
    mesh = apply_pose(synthesize_shape(model, state.coeffs), state.pose)
    indices = landmark_vertices(model)
    out = {}
    for name in views:
        cam = cameras[name]
        pix, depth = cam.project_points(mesh.vertices[indices])
        ok = (depth > NEAR_PLANE) & (pix[:, 0] >= 0) & (pix[:, 0] <= cam.width) \
            & (pix[:, 1] >= 0) & (pix[:, 1] <= cam.height)
        out[name] = [(int(i), float(p[0]), float(p[1])) for i, p, keep in zip(indices, pix, ok) if keep]
    return out


def render_truth(scene: SyntheticScene, t: int, camera: Camera, threads: int = 1) -> np.ndarray:
    """Noise-free float render of frame `t` from the stored ground truth."""
    state = scene.states[t]
    mesh = synthesize_shape(scene.model, state.coeffs)
    normal_map = scene.true_normals[t] if scene.plan.bump_strength > 0 else None
    out = render_view(mesh, state.pose, camera, scene.lighting, scene.true_diffuse, scene.true_specular,
                      normal_map, scene.plan.shininess, scene.plan.intensity_epsilon, threads)
    return out.color


def _quantize(image: np.ndarray, sigma: float, seed: int, t: int, view: str) -> np.ndarray:
    if sigma > 0:
        image = image + stream(seed, f"scene.noise.{t}.{view}").normal(0.0, sigma, size=image.shape)
    return to_uint8(image).astype(np.float64)


def generate_scene(
    seed: int = 0,
    n_frames: int = 3,
    specular_strength: float = 1.0,
    detail_strength: float = 1.0,
    noise_sigma: float = 0.0,
    bump_strength: float = 0.0,
    config: Optional[PipelineConfig] = None,
) -> SyntheticScene:
    """
    Samples a subject, a lighting and a pose sweep, then renders every view.

    Coefficients are drawn within ±2σ, head yaw sweeps the configured arc over
    the frames and images get Gaussian noise before 8-bit quantization.
    """
    config = config or get_settings()
    plan = ScenePlan.from_config(config, seed=seed, n_frames=n_frames, specular_strength=specular_strength,
                                 detail_strength=detail_strength, noise_sigma=noise_sigma,
                                 bump_strength=bump_strength)
    model = generate_synthetic_model(plan.seed, plan.model_vertices, plan.k_id, plan.k_exp, plan.k_alb)
    cameras = rig_cameras(plan)
    lighting = scene_lighting(plan.seed)

    gen = stream(plan.seed, "scene.coefficients")
    x_id = _bounded_normal(gen, model.sigma_id)
    x_alb = _bounded_normal(gen, model.sigma_alb)
    states = [FitState(FitCoefficients(x_id, _bounded_normal(gen, model.sigma_exp), x_alb), pose, lighting)
              for pose in frame_poses(plan)]

    pca_diffuse = synthesize_albedo(model, states[0].coeffs, plan.resolution)
    detail = detail_truth(plan)
    diffuse = np.clip(pca_diffuse + detail, 0.0, 255.0)
    specular = specular_truth(plan)

    uv_raster = rasterize_uv(model.triangles, model.uv_coords, plan.resolution, config.threads)
    normals = []
    for state in states:
        mesh = synthesize_shape(model, state.coeffs)
        geometric = normalize(uv_raster.interpolate(mesh.triangles, mesh.vertex_normals))
        normals.append(bump_normals(geometric, uv_raster.mask, plan))

    scene = SyntheticScene(plan, model, cameras, states, lighting, diffuse, detail, specular, normals,
                           images=[], landmarks=[])
    for t, state in enumerate(states):
        frame = {}
        for name, cam in cameras.items():
            frame[name] = _quantize(render_truth(scene, t, cam, config.threads), plan.noise_sigma, plan.seed, t, name)
        scene.images.append(frame)
        scene.landmarks.append(project_landmarks(model, state, cameras))
    logger.info(f"Generated scene seed={plan.seed}: {plan.n_frames} frames, specular {plan.specular_strength}, "
                f"detail {plan.detail_strength}, bump {plan.bump_strength}, noise {plan.noise_sigma}")
    return scene


# --- Scene directories ---

def write_scene(scene: SyntheticScene, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    for sub in ("frames", "landmarks", "truth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_model(scene.model, out / "model.rcm")
    write_cameras(scene.cameras, out / "cameras.txt")
    write_lighting(scene.lighting.coeffs, scene.lighting.ambient, out / "truth" / "lighting.txt")
    write_raster(scene.true_diffuse, out / "truth" / "diffuse.frm")
    write_raster(scene.true_detail, out / "truth" / "detail.frm")
    write_raster(scene.true_specular, out / "truth" / "specular.frm")
    for t in scene.timestamps:
        (out / "frames" / str(t)).mkdir(exist_ok=True)
        for name, image in scene.images[t].items():
            write_png(image, out / "frames" / str(t) / f"{name}.png")
        write_landmarks(scene.landmarks[t], out / "landmarks" / f"{t}.txt")
        save_fit_state(scene.states[t], out / "truth" / f"state_{t}.rfs")
        write_raster(scene.true_normals[t], out / "truth" / f"normal_{t}.frm")
    manifest = {
        "plan": scene.plan.model_dump(),
        "timestamps": scene.timestamps,
        "input_views": list(INPUT_VIEWS),
        "heldout_view": HELDOUT_VIEW,
        "model": "model.rcm",
        "cameras": "cameras.txt",
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote scene to {out}")
    return out


def read_manifest(scene_dir: Union[str, Path]) -> dict:
    path = Path(scene_dir) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"Scene manifest not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"Malformed scene manifest {path}: {e}") from e


def load_frame_inputs(scene_dir: Union[str, Path], t: int,
                      views: Sequence[str] = INPUT_VIEWS) -> Tuple[List[ViewInput], LandmarkSet]:
    """The calibrated images and landmarks of one timestamp; only input data, no ground truth."""
    root = Path(scene_dir)
    cameras = read_cameras(root / "cameras.txt")
    inputs = []
    for name in views:
        if name not in cameras:
            raise FormatError(f"Camera '{name}' missing from {root / 'cameras.txt'}")
        png = root / "frames" / str(t) / f"{name}.png"
        if not png.is_file():
            raise FileNotFoundError(f"Image not found: {png}")
        inputs.append(ViewInput(name, read_png(png), cameras[name]))
    records = read_landmarks(root / "landmarks" / f"{t}.txt")
    return inputs, LandmarkSet.from_records({v: records.get(v, []) for v in views})


def load_scene(scene_dir: Union[str, Path]) -> SyntheticScene:
    root = Path(scene_dir)
    manifest = read_manifest(root)
    plan = ScenePlan(**manifest["plan"])
    model = load_model(root / manifest["model"])
    cameras = read_cameras(root / manifest["cameras"])
    coeffs, ambient = read_lighting(root / "truth" / "lighting.txt")
    states, normals, images, landmarks = [], [], [], []
    for t in manifest["timestamps"]:
        states.append(load_fit_state(root / "truth" / f"state_{t}.rfs"))
        normals.append(read_raster(root / "truth" / f"normal_{t}.frm"))
        images.append({name: read_png(root / "frames" / str(t) / f"{name}.png") for name in cameras})
        landmarks.append(read_landmarks(root / "landmarks" / f"{t}.txt"))
    return SyntheticScene(
        plan, model, cameras, states, SHLighting(coeffs, ambient),
        read_raster(root / "truth" / "diffuse.frm"),
        read_raster(root / "truth" / "detail.frm"),
        read_raster(root / "truth" / "specular.frm"),
        normals, images, landmarks,
    )
