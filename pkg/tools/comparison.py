"""
Held-out-view comparison of the pipeline variants on a synthetic scene.

    pca_only          Stage 1 alone (PCA albedo, SH diffuse)
    ours_no_specular  Stages 1-3 with the specular albedo forced to zero
    ours_specular     the full pipeline

Each variant renders the held-out camera for every frame and is scored over
the pixels covered by both the true face and the Stage-1 face. When an output
directory is given the renders, truths and regions are stored so that
`evaluate_artifacts` can recompute the same report without rerunning anything.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from configs.settings import PipelineConfig, get_settings
from core.exceptions import ParameterError, ReconstructionError
from core.facemodel import synthesize_shape, vertex_albedo
from core.io import read_raster, write_png, write_raster
from core.raster import rasterize
from core.renderer import render_stage1, render_view
from pipeline.sequence import STAGE1, average_node, new_sequence, reflectance_node, refine_node, run_nodes
from tools.metrics import METHODS, EvalReport, EvalRow, rmse_psnr
from tools.scene import HELDOUT_VIEW, INPUT_VIEWS, SyntheticScene

logger = logging.getLogger(__name__)

RUN_MANIFEST = "comparison.json"


def _score(seed: int, method: str, t: int, render: np.ndarray, truth: np.ndarray, region: np.ndarray) -> EvalRow:
    rmse, psnr = rmse_psnr(render, truth, region)
    return EvalRow(seed=seed, frame=t, method=method, rmse=rmse, psnr=psnr, pixels=int(region.sum()))


def _failed(seed: int, method: str, t: int, error: Exception) -> EvalRow:
    return EvalRow(seed=seed, frame=t, method=method, status=f"failed: {type(error).__name__}: {error}")


def run_comparison(
    scene: SyntheticScene,
    methods: Sequence[str] = METHODS,
    config: Optional[PipelineConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """Runs every requested variant and scores its held-out renders; a failing stage yields annotated rows."""
    config = config or get_settings()
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ParameterError(f"Unknown comparison methods: {unknown}")
    seed = scene.plan.seed
    camera = scene.cameras[HELDOUT_VIEW]
    frames = scene.timestamps
    truths = {t: scene.images[t][HELDOUT_VIEW] for t in frames}
    renders: Dict[str, Dict[int, np.ndarray]] = {m: {} for m in methods}
    failures: Dict[str, str] = {}
    report = EvalReport()

    inputs = {t: (scene.views(t, INPUT_VIEWS), scene.landmark_set(t)) for t in frames}
    base = new_sequence(scene.model, inputs, config)
    try:
        base = run_nodes(base, STAGE1)
    except ReconstructionError as e:
        logger.error(f"Stage 1 failed on scene {seed}: {e}", exc_info=True)
        for m in methods:
            failures[m] = f"{type(e).__name__}: {e}"
            for t in frames:
                report.add(_failed(seed, m, t, e))
        return _finish(report, out_dir, seed, methods, frames, renders, truths, {}, failures)

    regions = {}
    for t in frames:
        truth_state, fit_state = scene.states[t], base["states"][t]
        truth_mask = rasterize(synthesize_shape(scene.model, truth_state.coeffs), truth_state.pose, camera).mask
        fitted = synthesize_shape(scene.model, fit_state.coeffs)
        regions[t] = truth_mask & rasterize(fitted, fit_state.pose, camera).mask

    if "pca_only" in methods:
        for t in frames:
            s = base["states"][t]
            out = render_stage1(synthesize_shape(scene.model, s.coeffs), s.pose, camera, s.lighting,
                                vertex_albedo(scene.model, s.coeffs), threads=config.threads)
            renders["pca_only"][t] = out.color

    ours = [m for m in methods if m != "pca_only"]
    if ours:
        base = run_nodes(base, (average_node,))
    for method in ours:
        state = dict(base)
        state["use_specular"] = method == "ours_specular"
        try:
            state = run_nodes(state, (reflectance_node, refine_node))
        except ReconstructionError as e:
            logger.error(f"Variant {method} failed on scene {seed}: {e}", exc_info=True)
            failures[method] = f"{type(e).__name__}: {e}"
            continue
        refl = state["reflectance"]
        diffuse = np.asarray(state["frame_set"].base_diffuse) + refl.delta_diffuse
        specular = refl.specular if state["use_specular"] else None
        for t in frames:
            out = render_view(state["meshes"][t], state["states"][t].pose, camera, refl.lighting, diffuse,
                              specular, state["normal_maps"][t], config.shininess, config.intensity_epsilon,
                              config.threads)
            renders[method][t] = out.color

    return _finish(report, out_dir, seed, methods, frames, renders, truths, regions, failures)


def _score_all(report: EvalReport, seed: int, methods, frames, renders, truths, regions, failures) -> EvalReport:
    for method in methods:
        for t in frames:
            if method in failures:
                if not any(r.method == method and r.frame == t for r in report.rows):
                    report.add(EvalRow(seed=seed, frame=t, method=method, status=f"failed: {failures[method]}"))
                continue
            try:
                report.add(_score(seed, method, t, renders[method][t], truths[t], regions[t]))
            except ReconstructionError as e:
                report.add(_failed(seed, method, t, e))
    return report.with_aggregates()


def _finish(report, out_dir, seed, methods, frames, renders, truths, regions, failures) -> EvalReport:
    report = _score_all(report, seed, methods, frames, renders, truths, regions, failures)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t in frames:
            write_raster(truths[t], out / f"truth_{t}.frm")
            if t in regions:
                write_raster(regions[t].astype(np.float64), out / f"region_{t}.frm")
            for method in methods:
                if t in renders[method]:
                    write_raster(renders[method][t], out / f"{method}_{t}.frm")
                    write_png(renders[method][t], out / f"{method}_{t}.png")
        manifest = {"seed": seed, "methods": list(methods), "frames": list(frames), "failures": failures}
        (out / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        report.write_csv(out / "report.csv")
        report.write_chart(out / "report.html")
    logger.info(f"Comparison on scene {seed}:\n{report.table()}")
    return report


def evaluate_artifacts(run_dir: Union[str, Path]) -> EvalReport:
    """Recomputes the report of a stored comparison run from its renders, truths and regions."""
    root = Path(run_dir)
    path = root / RUN_MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"Comparison manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    seed, methods, frames = manifest["seed"], manifest["methods"], manifest["frames"]
    failures = manifest.get("failures", {})
    truths = {t: read_raster(root / f"truth_{t}.frm") for t in frames}
    regions = {t: read_raster(root / f"region_{t}.frm") > 0.5 for t in frames if (root / f"region_{t}.frm").is_file()}
    renders = {m: {t: read_raster(root / f"{m}_{t}.frm") for t in frames if (root / f"{m}_{t}.frm").is_file()}
               for m in methods}
    report = EvalReport()
    for m in methods:
        if m in failures:
            continue
        missing = [t for t in frames if t not in renders[m] or t not in regions]
        if missing:
            failures[m] = f"missing artifacts for frames {missing}"
    return _score_all(report, seed, methods, frames, renders, truths, regions, failures)
