"""
Command-line entry point of the reconstruction pipeline.

    gen       synthesize a scene directory with full ground truth
    fit       Stage 1 on the frames of an input directory, or on one explicit pair
    infer     Stage 2 on a fit directory
    refine    Stage 3 on chosen frames of a fit directory
    track     geometry for new frame pairs against stored reflectance
    render    held-out (or sweep) images from any pipeline state
    eval      run the method comparison, or recompute a stored one
    selftest  gradient checks and invariant suites

Every command accepts the stage weights and iteration budgets as flags (`--w-l`,
`--lambda-s`, `--gn-iters`, ...) on top of `--config`; commands that load a
model accept `--model` in place of the recorded one.

Failures print one line `error: kind=<Name> message=<json string>` and exit 1;
argparse usage errors exit 2.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from configs.settings import PipelineConfig, load_config  # noqa: E402
from core.exceptions import FormatError, ParameterError, ReconstructionError, SolverError  # noqa: E402
from core.facemodel import load_model, synthesize_shape, vertex_albedo  # noqa: E402
from core.io import read_cameras, read_mesh, read_raster, write_png  # noqa: E402
from core.renderer import render_sweep, render_stage1, render_view  # noqa: E402
from pipeline.artifacts import (  # noqa: E402
    InputSources,
    load_reflectance,
    load_stage1,
    read_manifest,
    save_refined,
    save_reflectance,
    save_stage1,
    sources_of,
    write_diagnostics,
    write_trace,
)
from pipeline.georefine import process_new_frames  # noqa: E402
from pipeline.sequence import STAGE1, average_node, new_sequence, reflectance_node, refine_node, run_nodes  # noqa: E402
from pipeline.states import FramePairSet, load_fit_state, save_fit_state  # noqa: E402
from tools.comparison import evaluate_artifacts, run_comparison  # noqa: E402
from tools.metrics import METHODS  # noqa: E402
from tools.scene import HELDOUT_VIEW, generate_scene, load_scene, write_scene  # noqa: E402
from tools.selftest import run_selftest  # noqa: E402

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
logger = logging.getLogger("app.main")

Handler = Callable[[argparse.Namespace, PipelineConfig], int]

# flag, config field, type
CONFIG_FLAGS: Tuple[Tuple[str, str, type], ...] = (
    ("--w-l", "w_l", float),
    ("--w-r", "w_r", float),
    ("--w-con", "w_con", float),
    ("--lambda-s", "lambda_s", float),
    ("--lambda-h", "lambda_h", float),
    ("--w-1", "w_1", float),
    ("--w-2", "w_2", float),
    ("--gn-iters", "gn_max_iters", int),
    ("--adam-steps", "adam_steps_per_block", int),
    ("--passes", "block_passes", int),
    ("--refine-iters", "refine_iters", int),
)


def _timestamps(sources: InputSources, requested: Optional[Sequence[int]]) -> List[int]:
    return sorted(set(requested)) if requested else sources.timestamps()


def _fit_sources(args: argparse.Namespace) -> InputSources:
    if args.input is None:
        return InputSources.from_pair(args.model, args.left, args.right, args.cameras, args.landmarks)
    return InputSources.from_directory(args.input, args.model)


def _trace(args: argparse.Namespace, rows: List[dict]) -> None:
    if args.log:
        write_trace(rows, args.log)


# --- Subcommands ---

def cmd_gen(args: argparse.Namespace, config: PipelineConfig) -> int:
    seed = config.seed if args.seed is None else args.seed
    scene = generate_scene(seed=seed, n_frames=args.frames, specular_strength=args.specular,
                           detail_strength=args.detail, noise_sigma=args.noise, bump_strength=args.bump,
                           config=config)
    out = write_scene(scene, args.out)
    print(f"scene {out}")
    return 0


def cmd_fit(args: argparse.Namespace, config: PipelineConfig) -> int:
    sources = _fit_sources(args)
    model, inputs = sources.load(_timestamps(sources, args.frames))
    state = run_nodes(new_sequence(model, inputs, config), STAGE1)
    out = save_stage1(state, sources, args.out)
    rows = []
    for t, report in sorted(state["fit_reports"].items()):
        rows += [{"frame": t, **row} for row in report.trace_rows()]
        for warning in report.warnings:
            logger.warning(f"Frame {t}: {warning}")
    _trace(args, rows)
    print(f"fit {out}")
    return 0


def cmd_infer(args: argparse.Namespace, config: PipelineConfig) -> int:
    state = load_stage1(args.fit, config, args.frames, model=args.model)
    state["use_specular"] = not args.no_specular
    try:
        state = run_nodes(state, (average_node, reflectance_node))
    except SolverError as e:
        paths = write_diagnostics(e.diagnostics, Path(args.out) / "diagnostics")
        logger.error(f"Reflectance inference diverged; wrote {len(paths)} diagnostic rasters")
        raise
    out = save_reflectance(state["frame_set"], state["reflectance"], args.fit, args.out)
    _trace(args, state["reflectance_report"].trace_rows())
    print(f"infer {out}")
    return 0


def cmd_refine(args: argparse.Namespace, config: PipelineConfig) -> int:
    reflectance, base, manifest = load_reflectance(args.infer)
    fit_dir = args.fit or manifest["fit"]
    state = load_stage1(fit_dir, config, args.frames or manifest["timestamps"], model=args.model)
    order = sorted(state["frames"])
    state.update(frame_set=FramePairSet([state["frames"][t] for t in order], base), reflectance=reflectance)
    state = run_nodes(state, (refine_node,))
    rows = []
    for t in order:
        save_refined(t, state["corrections"][t], state["normal_maps"][t], state["meshes"][t], args.out)
        rows += [{"frame": t, **row} for row in state["refine_reports"][t].trace_rows()]
    _trace(args, rows)
    print(f"refine {args.out}")
    return 0


def cmd_track(args: argparse.Namespace, config: PipelineConfig) -> int:
    sources = InputSources.from_directory(args.input, args.model)
    reflectance, base, manifest = load_reflectance(args.infer)
    model, inputs = sources.load(_timestamps(sources, args.frames))
    fit_manifest = read_manifest(manifest["fit"])
    previous = load_fit_state(Path(manifest["fit"]) / f"state_{fit_manifest['timestamps'][0]}.rfs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for t in sorted(inputs):
        views, landmarks = inputs[t]
        result = process_new_frames(views, landmarks, model, reflectance, base, init=previous,
                                    config=config, timestamp=t)
        save_fit_state(result.state, out / f"state_{t}.rfs")
        save_refined(t, result.correction, result.normal_map, result.mesh, out)
        rows += [{"frame": t, **row} for row in result.fit.trace_rows()]
        rows += [{"frame": t, "stage": "refine", **row} for row in result.refine.trace_rows()]
        previous = result.state
    _trace(args, rows)
    print(f"track {out}")
    return 0


def cmd_render(args: argparse.Namespace, config: PipelineConfig) -> int:
    fit_dir = Path(args.fit)
    sources = sources_of(read_manifest(fit_dir))
    cameras = read_cameras(sources.cameras)
    if args.view not in cameras:
        raise FormatError(f"Camera '{args.view}' missing from {sources.cameras}")
    camera = cameras[args.view]
    model = load_model(args.model or sources.model)
    state_path = fit_dir / f"state_{args.frame}.rfs"
    if args.refine and (Path(args.refine) / f"state_{args.frame}.rfs").is_file():
        state_path = Path(args.refine) / f"state_{args.frame}.rfs"
    state = load_fit_state(state_path)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.infer is None:
        if args.sweep:
            raise ParameterError("A sweep needs the UV maps of an infer directory")
        image = render_stage1(synthesize_shape(model, state.coeffs), state.pose, camera, state.lighting,
                              vertex_albedo(model, state.coeffs), threads=config.threads).color
        write_png(image, out)
        print(f"render {out}")
        return 0

    reflectance, base, _ = load_reflectance(args.infer)
    mesh, normal_map = synthesize_shape(model, state.coeffs), None
    if args.refine:
        mesh = read_mesh(Path(args.refine) / f"mesh_{args.frame}.mesh")
        normal_map = read_raster(Path(args.refine) / f"normal_{args.frame}.frm")
    diffuse = np.asarray(base) + reflectance.delta_diffuse
    specular = None if args.no_specular else reflectance.specular
    if args.sweep:
        images = render_sweep(mesh, state.pose, camera, reflectance.lighting, diffuse, specular, normal_map,
                              yaw_range=(-config.yaw_sweep_deg, config.yaw_sweep_deg), steps=args.sweep,
                              shininess=config.shininess, intensity_epsilon=config.intensity_epsilon,
                              threads=config.threads)
        for k, image in enumerate(images):
            write_png(image, out.with_name(f"{out.stem}_{k}{out.suffix or '.png'}"))
        print(f"render {len(images)} views {out.parent}")
        return 0
    image = render_view(mesh, state.pose, camera, reflectance.lighting, diffuse, specular, normal_map,
                        config.shininess, config.intensity_epsilon, config.threads).color
    write_png(image, out)
    print(f"render {out}")
    return 0


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    if args.run:
        report = evaluate_artifacts(args.run)
        target = Path(args.out) if args.out else Path(args.run) / "report.csv"
        report.write_csv(target)
    else:
        scene = load_scene(args.scene)
        if args.model:
            scene = replace(scene, model=load_model(args.model))
        report = run_comparison(scene, args.methods, config, out_dir=args.out)
    print(report.table())
    return 0


def cmd_selftest(args: argparse.Namespace, config: PipelineConfig) -> int:
    report = run_selftest(config, n_configs=args.configs, seed=config.seed)
    for line in report.lines():
        print(line)
    if not report.passed:
        failed = [c.name for c in report.checks if not c.passed]
        _print_error("SelftestFailure", f"failed checks: {', '.join(failed)}")
        return 1
    return 0


COMMANDS: Dict[str, Handler] = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "infer": cmd_infer,
    "refine": cmd_refine,
    "track": cmd_track,
    "render": cmd_render,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
}


# --- Argument parsing ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Config file of KEY=value lines")
    common.add_argument("--threads", type=int, help="Upper bound on worker threads")
    common.add_argument("--log", help="CSV path for the per-stage energy trace")
    common.add_argument("--verbose", action="store_true", help="Debug-level logging")
    tuning = common.add_argument_group("stage weights and budgets (override the config file)")
    for flag, field, kind in CONFIG_FLAGS:
        tuning.add_argument(flag, dest=field, type=kind, help=PipelineConfig.model_fields[field].description)

    with_model = argparse.ArgumentParser(add_help=False)
    with_model.add_argument("--model", help="Parametric model file replacing the recorded one")

    parser = argparse.ArgumentParser(prog="facerecon", description="Multi-frame face reflectance and geometry")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="Generate a synthetic scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--specular", type=float, default=1.0, help="Specular strength")
    p.add_argument("--detail", type=float, default=1.0, help="Diffuse detail strength")
    p.add_argument("--noise", type=float, default=0.0, help="Pixel noise sigma (8-bit units)")
    p.add_argument("--bump", type=float, default=0.0, help="Fine-normal perturbation in radians")

    p = sub.add_parser("fit", parents=[common, with_model], help="Stage 1: two-view model fitting")
    p.add_argument("input", nargs="?", help="Input directory laid out like a scene directory")
    pair = p.add_argument_group("explicit frame pair (instead of an input directory; needs --model)")
    pair.add_argument("--left", help="Left image (PNG)")
    pair.add_argument("--right", help="Right image (PNG)")
    pair.add_argument("--cameras", help="Camera file with 'left' and 'right' entries")
    pair.add_argument("--landmarks", help="Landmark file of the pair")
    p.add_argument("--frames", type=int, nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", parents=[common, with_model], help="Stage 2: reflectance inference")
    p.add_argument("fit")
    p.add_argument("--frames", type=int, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--no-specular", action="store_true", help="Force the specular albedo to zero")

    p = sub.add_parser("refine", parents=[common, with_model], help="Stage 3: normal and vertex refinement")
    p.add_argument("infer")
    p.add_argument("--fit", help="Fit directory; defaults to the one the infer directory came from")
    p.add_argument("--frames", type=int, nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("track", parents=[common, with_model], help="Geometry for new frames with frozen reflectance")
    p.add_argument("input")
    p.add_argument("--infer", required=True)
    p.add_argument("--frames", type=int, nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", parents=[common, with_model], help="Render a view from any pipeline state")
    p.add_argument("fit")
    p.add_argument("--infer")
    p.add_argument("--refine")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--view", default=HELDOUT_VIEW)
    p.add_argument("--no-specular", action="store_true")
    p.add_argument("--sweep", type=int, default=0, help="Number of orbiting views instead of one image")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common, with_model], help="Held-out comparison of the pipeline variants")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--scene", help="Scene directory to run the comparison on")
    source.add_argument("--run", help="Stored comparison run to recompute")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--out")

    p = sub.add_parser("selftest", parents=[common], help="Gradient checks and invariants")
    p.add_argument("--configs", type=int, default=1000, help="Random shading configurations to check")
    return parser


def _print_error(kind: str, message: str) -> None:
    print(f"error: kind={kind} message={json.dumps(message)}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT,
                        stream=sys.stderr)
    if args.command == "eval" and args.scene and not args.out:
        parser.error("eval --scene needs --out")
    if args.command == "fit":
        pair = [args.left, args.right, args.cameras, args.landmarks]
        if args.input is not None and any(p is not None for p in pair):
            parser.error("fit takes an input directory or --left/--right/--cameras/--landmarks, not both")
        if args.input is None and (any(p is None for p in pair) or args.model is None):
            parser.error("fit without an input directory needs --model, --left, --right, --cameras and --landmarks")
    overrides = {field: getattr(args, field) for _, field, _ in CONFIG_FLAGS}
    overrides["threads"] = args.threads
    try:
        config = load_config(args.config, overrides)
        logger.info(f"--- Command: {args.command} ---")
        return COMMANDS[args.command](args, config)
    except (ReconstructionError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        _print_error(type(e).__name__, str(e))
        return 1
    except Exception as e:
        logger.debug("Unexpected failure", exc_info=True)
        _print_error(type(e).__name__, str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
