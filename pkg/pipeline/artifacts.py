"""
Stage output directories.

    fit/      manifest.json, state_<t>.rfs, baked_diffuse_<t>.frm,
              baked_normal_<t>.frm, coverage_<t>.frm
    infer/    manifest.json, diffuse_refined.frm, base_diffuse.frm,
              delta_diffuse.frm, specular.frm, lighting.txt
    refine/   normal_<t>.frm, correction_<t>.frm, mesh_<t>.mesh (+ state_<t>.rfs when tracking)

Stage-1 directories record the inputs they were fitted from (an input directory
or an explicit model, image pair, camera file and landmark file), so a
later stage re-bakes the frames it needs instead of storing every UV sample.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from configs.settings import PipelineConfig
from core.exceptions import FormatError, ParameterError
from core.facemodel import load_model
from core.io import (
    read_cameras,
    read_landmarks,
    read_lighting,
    read_png,
    read_raster,
    write_lighting,
    write_mesh,
    write_raster,
)
from core.shading import SHLighting
from pipeline.sequence import SequenceState, bake_node, new_sequence
from pipeline.states import (
    FramePairSet,
    LandmarkSet,
    NormalCorrection,
    ReflectanceState,
    ViewInput,
    load_fit_state,
    save_fit_state,
)
from tools.scene import INPUT_VIEWS, load_frame_inputs
from tools.scene import read_manifest as read_scene_manifest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MANIFEST = "manifest.json"
PAIR_TIMESTAMP = 0


def write_manifest(out_dir: PathLike, payload: dict) -> None:
    path = Path(out_dir) / MANIFEST
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(directory: PathLike) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"Stage manifest not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"Malformed stage manifest {path}: {e}") from e


def write_trace(rows: Iterable[dict], path: PathLike) -> None:
    """Writes an energy trace as CSV; columns follow the first row's keys."""
    df = pd.DataFrame(list(rows))
    df.to_csv(path, index=False)
    logger.info(f"Wrote {len(df)} trace rows to {path}")


class InputSources(BaseModel):
    """Where a fit's inputs live: a directory laid out like a scene, or one explicit frame pair."""
    model: str = Field(..., description="Parametric model file")
    cameras: str = Field(..., description="Camera file holding the left and right cameras")
    directory: Optional[str] = Field(None, description="Input directory with frames/ and landmarks/")
    left: Optional[str] = Field(None, description="Left image of an explicit pair")
    right: Optional[str] = Field(None, description="Right image of an explicit pair")
    landmarks: Optional[str] = Field(None, description="Landmark file of an explicit pair")

    @classmethod
    def from_directory(cls, input_dir: PathLike, model: Optional[PathLike] = None) -> "InputSources":
        root = Path(input_dir).resolve()
        model_path = Path(model).resolve() if model else root / "model.rcm"
        return cls(model=str(model_path), cameras=str(root / "cameras.txt"), directory=str(root))

    @classmethod
    def from_pair(cls, model: PathLike, left: PathLike, right: PathLike, cameras: PathLike,
                  landmarks: PathLike) -> "InputSources":
        return cls(model=str(Path(model).resolve()), cameras=str(Path(cameras).resolve()),
                   left=str(Path(left).resolve()), right=str(Path(right).resolve()),
                   landmarks=str(Path(landmarks).resolve()))

    @property
    def is_pair(self) -> bool:
        return self.directory is None

    def timestamps(self) -> List[int]:
        if self.is_pair:
            return [PAIR_TIMESTAMP]
        root = Path(self.directory)
        if (root / "scene.json").is_file():
            return list(read_scene_manifest(root)["timestamps"])
        return [0]

    def load(self, timestamps: Sequence[int], model: Optional[PathLike] = None):
        """Model and per-timestamp (views, landmarks); `model` replaces the recorded model file."""
        parametric = load_model(model or self.model)
        if not self.is_pair:
            return parametric, {t: load_frame_inputs(self.directory, t) for t in timestamps}
        unknown = [t for t in timestamps if t != PAIR_TIMESTAMP]
        if unknown:
            raise ParameterError(f"An explicit frame pair only has timestamp {PAIR_TIMESTAMP}, not {unknown}")
        cameras = read_cameras(self.cameras)
        views = []
        for name, png in zip(INPUT_VIEWS, (self.left, self.right)):
            if name not in cameras:
                raise FormatError(f"Camera '{name}' missing from {self.cameras}")
            if not Path(png).is_file():
                raise FileNotFoundError(f"Image not found: {png}")
            views.append(ViewInput(name, read_png(png), cameras[name]))
        records = read_landmarks(self.landmarks)
        landmarks = LandmarkSet.from_records({v: records.get(v, []) for v in INPUT_VIEWS})
        return parametric, {PAIR_TIMESTAMP: (views, landmarks)}


def sources_of(manifest: dict) -> InputSources:
    return InputSources(**manifest["inputs"])


# --- Stage 1 ---

def save_stage1(state: SequenceState, sources: InputSources, out_dir: PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, fit in state["states"].items():
        save_fit_state(fit, out / f"state_{t}.rfs")
        baked = state["baked"][t]
        write_raster(baked.diffuse, out / f"baked_diffuse_{t}.frm")
        write_raster(baked.normal, out / f"baked_normal_{t}.frm")
        write_raster(baked.coverage.astype(np.float64), out / f"coverage_{t}.frm")
    write_manifest(out, {
        "inputs": sources.model_dump(),
        "timestamps": sorted(state["states"]),
        "resolution": state["config"].uv_resolution,
        "warnings": {str(t): r.warnings for t, r in state["fit_reports"].items()},
    })
    return out


def load_stage1(fit_dir: PathLike, config: PipelineConfig,
                timestamps: Optional[Sequence[int]] = None,
                model: Optional[PathLike] = None) -> SequenceState:
    """Reloads fitted states and re-bakes their frames; `timestamps` selects a subset."""
    manifest = read_manifest(fit_dir)
    available = manifest["timestamps"]
    chosen = list(available) if timestamps is None else list(timestamps)
    missing = [t for t in chosen if t not in available]
    if missing:
        raise ParameterError(f"Timestamps {missing} were not fitted in {fit_dir}; available: {available}")
    if int(manifest["resolution"]) != config.uv_resolution:
        config = config.model_copy(update={"uv_resolution": int(manifest["resolution"])})
    parametric, inputs = sources_of(manifest).load(chosen, model)
    state = new_sequence(parametric, inputs, config)
    state["states"] = {t: load_fit_state(Path(fit_dir) / f"state_{t}.rfs") for t in chosen}
    state.update(bake_node(state))
    return state


# --- Stage 2 ---

def save_reflectance(frame_set: FramePairSet, reflectance: ReflectanceState, fit_dir: PathLike,
                     out_dir: PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = np.asarray(frame_set.base_diffuse)
    write_raster(base + reflectance.delta_diffuse, out / "diffuse_refined.frm")
    write_raster(base, out / "base_diffuse.frm")
    write_raster(reflectance.delta_diffuse, out / "delta_diffuse.frm")
    write_raster(reflectance.specular, out / "specular.frm")
    write_lighting(reflectance.lighting.coeffs, reflectance.lighting.ambient, out / "lighting.txt")
    write_manifest(out, {
        "fit": str(Path(fit_dir).resolve()),
        "timestamps": [f.timestamp for f in frame_set.frames],
    })
    return out


def load_reflectance(infer_dir: PathLike) -> Tuple[ReflectanceState, np.ndarray, dict]:
    """(reflectance, base diffuse C_d, manifest) of a Stage-2 directory."""
    root = Path(infer_dir)
    manifest = read_manifest(root)
    coeffs, ambient = read_lighting(root / "lighting.txt")
    reflectance = ReflectanceState(read_raster(root / "delta_diffuse.frm"), read_raster(root / "specular.frm"),
                                   SHLighting(coeffs, ambient))
    return reflectance, read_raster(root / "base_diffuse.frm"), manifest


def write_diagnostics(diagnostics: Dict[str, object], out_dir: PathLike) -> List[Path]:
    """Dumps the array-valued entries of a SolverError's diagnostics as rasters."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key, value in diagnostics.items():
        arr = np.asarray(value) if isinstance(value, np.ndarray) else None
        if arr is None or arr.ndim == 0:
            continue
        path = out / f"diagnostic_{key}.frm"
        write_raster(arr.reshape(arr.shape[0], -1) if arr.ndim == 1 or arr.ndim > 3 else arr, path)
        written.append(path)
    return written


# --- Stage 3 ---

def save_refined(t: int, correction: NormalCorrection, normal_map: np.ndarray, mesh, out_dir: PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_raster(normal_map, out / f"normal_{t}.frm")
    write_raster(correction.delta, out / f"correction_{t}.frm")
    write_mesh(mesh, out / f"mesh_{t}.mesh")
