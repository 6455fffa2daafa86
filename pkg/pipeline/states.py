"""
State containers passed between the three pipeline stages.

Array-valued states are frozen dataclasses; their arrays are made read-only
on construction so a state handed to the next stage cannot be mutated in place.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from core.exceptions import DimensionError, FormatError, GeometryError, ParameterError
from core.facemodel import FitCoefficients, ParametricModel
from core.geometry import Camera, RigidPose
from core.io import read_container, write_container
from core.shading import SHLighting


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FitState:
    """The Stage-1 unknowns of one frame pair: PCA coefficients, rigid pose and lighting."""
    coeffs: FitCoefficients
    pose: RigidPose
    lighting: SHLighting


@dataclass(frozen=True)
class ViewInput:
    """One calibrated input image."""
    name: str
    image: np.ndarray  # (H, W, 3) float, 8-bit range
    camera: Camera

    def __post_init__(self):
        image = _frozen(self.image)
        if image.shape != (self.camera.height, self.camera.width, 3):
            raise DimensionError(f"View '{self.name}' image has shape {image.shape}, camera expects "
                                 f"({self.camera.height}, {self.camera.width}, 3)")
        object.__setattr__(self, "image", image)


@dataclass(frozen=True)
class LandmarkSet:
    """Detected 2D landmarks per view, each tied to a model vertex."""
    indices: Dict[str, np.ndarray]    # view -> (F,) vertex indices
    positions: Dict[str, np.ndarray]  # view -> (F, 2) pixel positions

    @classmethod
    def from_records(cls, records: Dict[str, Sequence[Tuple[int, float, float]]]) -> "LandmarkSet":
        indices = {v: np.array([r[0] for r in items], dtype=np.int64) for v, items in records.items()}
        positions = {v: np.array([[r[1], r[2]] for r in items], dtype=np.float64).reshape(-1, 2)
                     for v, items in records.items()}
        return cls(indices, positions)

    def to_records(self) -> Dict[str, List[Tuple[int, float, float]]]:
        return {v: [(int(i), float(p[0]), float(p[1])) for i, p in zip(self.indices[v], self.positions[v])]
                for v in self.indices}

    def check(self, model: ParametricModel, cameras: Dict[str, Camera]) -> None:
        for view, idx in self.indices.items():
            if len(idx) and (idx.min() < 0 or idx.max() >= model.n_vertices):
                raise GeometryError(f"Landmark vertex index out of range in view '{view}'")
            cam = cameras.get(view)
            if cam is None:
                raise GeometryError(f"Landmarks given for unknown view '{view}'")
            pos = self.positions[view]
            if len(pos) and (pos.min() < 0 or pos[:, 0].max() > cam.width or pos[:, 1].max() > cam.height):
                raise GeometryError(f"Landmark positions of view '{view}' fall outside the image")


@dataclass(frozen=True)
class BakedMaps:
    """UV maps baked from a Stage-1 fit: PCA diffuse albedo, model-space normals, two-view coverage."""
    diffuse: np.ndarray   # (R, R, 3)
    normal: np.ndarray    # (R, R, 3) unit on covered texels, zero elsewhere
    coverage: np.ndarray  # (R, R) bool

    def __post_init__(self):
        object.__setattr__(self, "diffuse", _frozen(self.diffuse))
        object.__setattr__(self, "normal", _frozen(self.normal))
        object.__setattr__(self, "coverage", _frozen(self.coverage, bool))

    @property
    def resolution(self) -> int:
        return self.diffuse.shape[0]


@dataclass(frozen=True)
class ViewSamples:
    """What one camera sees of the UV surface at one timestamp."""
    visible: np.ndarray   # (R, R) bool: front-facing, unoccluded and inside the image
    pixels: np.ndarray    # (R, R, 2) projection of each texel's surface point
    view_vec: np.ndarray  # (R, R, 3) unit surface -> camera
    observed: np.ndarray  # (R, R, 3) image color at the projection, zero where not visible

    def __post_init__(self):
        object.__setattr__(self, "visible", _frozen(self.visible, bool))
        for name in ("pixels", "view_vec", "observed"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))


@dataclass(frozen=True)
class FrameObservation:
    """One timestamp of a frame-pair sequence, already resolved into UV space."""
    timestamp: int
    state: FitState
    normal: np.ndarray      # (R, R, 3) world-space normal n_t, zero off-surface
    surface: np.ndarray     # (R, R) bool: texels on the mesh
    views: Dict[str, ViewSamples]

    def __post_init__(self):
        object.__setattr__(self, "normal", _frozen(self.normal))
        object.__setattr__(self, "surface", _frozen(self.surface, bool))

    def overlap(self) -> np.ndarray:
        masks = [v.visible for v in self.views.values()]
        out = masks[0].copy()
        for m in masks[1:]:
            out &= m
        return out


@dataclass(frozen=True)
class FramePairSet:
    """Stage-2 input: timestamped observations plus the base diffuse map C_d they share."""
    frames: List[FrameObservation]
    base_diffuse: np.ndarray  # (R, R, 3)

    def __post_init__(self):
        if not self.frames:
            raise DimensionError("A frame set needs at least one timestamp")
        object.__setattr__(self, "base_diffuse", _frozen(self.base_diffuse))

    @property
    def resolution(self) -> int:
        return self.base_diffuse.shape[0]

    def frame(self, timestamp: int) -> FrameObservation:
        for f in self.frames:
            if f.timestamp == timestamp:
                return f
        raise ParameterError(f"No frame with timestamp {timestamp}; available: {[f.timestamp for f in self.frames]}")


@dataclass(frozen=True)
class ReflectanceState:
    """Stage-2 unknowns: diffuse displacement, scalar specular albedo and shared lighting."""
    delta_diffuse: np.ndarray  # (R, R, 3)
    specular: np.ndarray       # (R, R)
    lighting: SHLighting

    def __post_init__(self):
        delta = _frozen(self.delta_diffuse)
        spec = _frozen(self.specular)
        if delta.shape[:2] != spec.shape or delta.ndim != 3:
            raise DimensionError(f"Map shapes disagree: delta {delta.shape}, specular {spec.shape}")
        object.__setattr__(self, "delta_diffuse", delta)
        object.__setattr__(self, "specular", spec)

    @classmethod
    def initial(cls, resolution: int, lighting: SHLighting) -> "ReflectanceState":
        return cls(np.zeros((resolution, resolution, 3)), np.zeros((resolution, resolution)), lighting)


@dataclass(frozen=True)
class NormalCorrection:
    """Per-texel (Δθ, Δφ) offsets in the refinement frame."""
    delta: np.ndarray  # (R, R, 2)

    def __post_init__(self):
        delta = _frozen(self.delta)
        if delta.ndim != 3 or delta.shape[2] != 2:
            raise DimensionError(f"Normal correction must have shape (R, R, 2), got {delta.shape}")
        object.__setattr__(self, "delta", delta)

    @classmethod
    def zeros(cls, resolution: int) -> "NormalCorrection":
        return cls(np.zeros((resolution, resolution, 2)))


# --- Fit-state files ---

def save_fit_state(state: FitState, path: Union[str, Path]) -> None:
    meta = {"k_id": len(state.coeffs.x_id), "k_exp": len(state.coeffs.x_exp), "k_alb": len(state.coeffs.x_alb)}
    arrays = {
        "x_id": state.coeffs.x_id,
        "x_exp": state.coeffs.x_exp,
        "x_alb": state.coeffs.x_alb,
        "R": state.pose.R,
        "t": state.pose.t,
        "s": np.array([state.pose.s]),
        "sh": state.lighting.coeffs,
        "ambient": state.lighting.ambient,
    }
    write_container(path, "fitstate", meta, arrays)


def load_fit_state(path: Union[str, Path]) -> FitState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Fit state file not found: {path}")
    _, arrays = read_container(path, "fitstate")
    try:
        coeffs = FitCoefficients(arrays["x_id"].ravel(), arrays["x_exp"].ravel(), arrays["x_alb"].ravel())
        pose = RigidPose(arrays["R"].reshape(3, 3), arrays["t"].ravel(), float(arrays["s"].ravel()[0]))
        lighting = SHLighting(arrays["sh"].reshape(3, 9), arrays["ambient"].ravel())
    except KeyError as e:
        raise FormatError(f"Fit state {path} lacks array {e}") from e
    return FitState(coeffs, pose, lighting)
