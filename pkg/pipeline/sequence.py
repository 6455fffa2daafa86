"""
Multi-frame orchestration of the three stages.

Each node reads what it needs from a shared SequenceState and returns only
the keys it produces; `run_nodes` merges those updates in order. The CLI and
the comparison harness compose the same nodes.
"""

import logging
import time
from typing import Callable, Dict, List, Sequence, Tuple, TypedDict

import numpy as np

from configs.settings import PipelineConfig
from core.facemodel import ParametricModel, synthesize_shape
from core.geometry import Mesh
from core.raster import rasterize_uv
from core.shading import SHLighting
from pipeline.fitting import FittingReport, average_fit_states, bake_maps, fit_two_views
from pipeline.georefine import RefineReport, refine_normals, update_vertices
from pipeline.reflectance import ReflectanceReport, infer_reflectance
from pipeline.states import (
    BakedMaps,
    FitState,
    FrameObservation,
    FramePairSet,
    LandmarkSet,
    NormalCorrection,
    ReflectanceState,
    ViewInput,
)

logger = logging.getLogger(__name__)

FrameInputs = Tuple[List[ViewInput], LandmarkSet]


class SequenceState(TypedDict, total=False):
    """Everything the stages hand to one another for one subject."""

    model: ParametricModel
    config: PipelineConfig
    inputs: Dict[int, FrameInputs]
    """Per timestamp: the calibrated input views and their landmarks."""

    use_specular: bool
    """False forces C_s = 0 in Stage 2 (the no-specular variant)."""

    states: Dict[int, FitState]
    fit_reports: Dict[int, FittingReport]
    baked: Dict[int, BakedMaps]
    frames: Dict[int, FrameObservation]

    frame_set: FramePairSet
    init_lighting: SHLighting
    reflectance: ReflectanceState
    reflectance_report: ReflectanceReport

    corrections: Dict[int, NormalCorrection]
    normal_maps: Dict[int, np.ndarray]
    refine_reports: Dict[int, RefineReport]
    meshes: Dict[int, Mesh]


Node = Callable[[SequenceState], dict]


def fit_node(state: SequenceState) -> dict:
    """Stage 1 on every timestamp."""
    logger.info("--- Node: Two-view fitting ---")
    model, config = state["model"], state["config"]
    states, reports = {}, {}
    for t in sorted(state["inputs"]):
        views, landmarks = state["inputs"][t]
        states[t], reports[t] = fit_two_views(model, views, landmarks, config)
    return {"states": states, "fit_reports": reports}


def bake_node(state: SequenceState) -> dict:
    logger.info("--- Node: UV baking ---")
    model, config = state["model"], state["config"]
    uv_raster = rasterize_uv(model.triangles, model.uv_coords, config.uv_resolution, config.threads)
    baked, frames = {}, {}
    for t in sorted(state["states"]):
        views, _ = state["inputs"][t]
        baked[t], frames[t] = bake_maps(state["states"][t], views, model, config.uv_resolution,
                                        timestamp=t, threads=config.threads, uv_raster=uv_raster)
    return {"baked": baked, "frames": frames}


def average_node(state: SequenceState) -> dict:
    """Stage-2 initialization: mean lighting and mean baked diffuse over the fitted frames."""
    logger.info("--- Node: Frame averaging ---")
    order = sorted(state["states"])
    lighting, diffuse = average_fit_states([state["states"][t] for t in order], [state["baked"][t] for t in order])
    return {"init_lighting": lighting, "frame_set": FramePairSet([state["frames"][t] for t in order], diffuse)}


def reflectance_node(state: SequenceState) -> dict:
    logger.info("--- Node: Reflectance inference ---")
    reflectance, report = infer_reflectance(state["frame_set"], state["init_lighting"], state["config"],
                                            use_specular=state.get("use_specular", True))
    return {"reflectance": reflectance, "reflectance_report": report}


def refine_node(state: SequenceState) -> dict:
    """Stage 3 on every timestamp, followed by the vertex update."""
    logger.info("--- Node: Geometry refinement ---")
    model, config = state["model"], state["config"]
    corrections, normal_maps, reports, meshes = {}, {}, {}, {}
    for frame in state["frame_set"].frames:
        t = frame.timestamp
        corrections[t], normal_maps[t], reports[t] = refine_normals(state["frame_set"], state["reflectance"],
                                                                    config, timestamp=t)
        mesh = synthesize_shape(model, state["states"][t].coeffs)
        meshes[t] = update_vertices(mesh, normal_maps[t], config.vertex_tikhonov)
    return {"corrections": corrections, "normal_maps": normal_maps, "refine_reports": reports, "meshes": meshes}


STAGE1 = (fit_node, bake_node)
FULL = (fit_node, bake_node, average_node, reflectance_node, refine_node)


def run_nodes(state: SequenceState, nodes: Sequence[Node]) -> SequenceState:
    """Runs `nodes` in order, merging each node's update into `state`."""
    for node in nodes:
        started = time.perf_counter()
        state.update(node(state))
        logger.info(f"{node.__name__} finished in {time.perf_counter() - started:.2f}s")
    return state


def new_sequence(model: ParametricModel, inputs: Dict[int, FrameInputs], config: PipelineConfig,
                 use_specular: bool = True, **extra) -> SequenceState:
    state: SequenceState = {"model": model, "config": config, "inputs": dict(inputs), "use_specular": use_specular}
    state.update(extra)
    return state
