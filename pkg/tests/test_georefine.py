import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from configs.settings import PipelineConfig
from core.exceptions import DimensionError, GeometryError
from core.facemodel import FitCoefficients, mean_mesh, synthesize_albedo, synthesize_shape
from core.geometry import face_normals, normalize
from core.raster import rasterize
from core.renderer import render_view
from pipeline.georefine import (
    RefineObjective,
    albedo_from_maps,
    corrected_normals,
    model_normals,
    normal_mismatch,
    process_new_frames,
    refine_energy,
    refine_normals,
    solve_vertex_offsets,
    update_vertices,
)
from pipeline.states import NormalCorrection, ReflectanceState
from tools.metrics import rmse_psnr
from tools.scene import HELDOUT_VIEW, generate_scene
from tools.selftest import random_reflectance, refine_gradient_error, synthetic_frame_set


@pytest.fixture
def quick_config():
    return PipelineConfig(refine_iters=40)


def _targets(mesh):
    return normalize(face_normals(mesh.vertices, mesh.triangles))


# --- Energy ---

def test_penalties_of_a_uniform_offset(quick_config):
    R = 5
    frames = synthetic_frame_set(0, resolution=R)
    obj = RefineObjective(frames, random_reflectance(frames, 0), quick_config)
    delta = np.full((R, R, 2), 0.1)
    penalties = obj(delta, need_grad=False)[0] - obj.photometric(delta)[0]
    eps = quick_config.smooth_l1_epsilon
    expected = quick_config.w_1 * 2 * R * R * eps + quick_config.w_2 * 2 * R * R * 0.01
    assert penalties == pytest.approx(expected, rel=1e-9)


def test_refine_energy_at_zero_is_photometric(quick_config):
    R = 5
    frames = synthetic_frame_set(1, resolution=R)
    reflectance = random_reflectance(frames, 1)
    obj = RefineObjective(frames, reflectance, quick_config)
    zero = NormalCorrection.zeros(R)
    floor = quick_config.w_1 * 2 * R * R * quick_config.smooth_l1_epsilon
    assert refine_energy(zero, frames, reflectance, quick_config) == \
        pytest.approx(obj.photometric(zero.delta)[0] + floor, rel=1e-12)


def test_gradient_matches_finite_differences():
    assert refine_gradient_error(seed=0) < 1e-4


# --- Corrected normals ---

def test_zero_correction_keeps_normals():
    frames = synthetic_frame_set(2, resolution=6)
    frame = frames.frames[0]
    out = corrected_normals(frame, NormalCorrection.zeros(6))
    np.testing.assert_allclose(out, model_normals(frame), atol=1e-10)


def test_corrected_normals_are_unit():
    frames = synthetic_frame_set(3, resolution=6)
    delta = NormalCorrection(np.random.default_rng(3).normal(0.0, 0.2, (6, 6, 2)))
    out = corrected_normals(frames.frames[0], delta)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-12)


def test_correction_shape_is_checked():
    with pytest.raises(DimensionError):
        NormalCorrection(np.zeros((4, 4, 3)))


# --- Descent ---

def test_refinement_never_increases_the_energy(quick_config):
    frames = synthetic_frame_set(4, resolution=6)
    correction, normal_map, report = refine_normals(frames, random_reflectance(frames, 4), quick_config)
    assert all(b <= a for a, b in zip(report.trace, report.trace[1:]))
    assert report.final_energy <= report.initial_energy
    np.testing.assert_allclose(np.linalg.norm(normal_map, axis=-1), 1.0, atol=1e-9)
    assert correction.delta.shape == (6, 6, 2)
    assert report.trace_rows()[0] == {"iteration": 0, "energy": report.initial_energy}


# --- Vertex update ---

def test_consistent_normals_leave_vertices_in_place(small_model):
    mesh = mean_mesh(small_model)
    offsets = solve_vertex_offsets(mesh, _targets(mesh))
    assert np.abs(offsets).max() < 1e-8


def test_empty_targets_give_zero_offsets(small_model):
    mesh = mean_mesh(small_model)
    np.testing.assert_array_equal(solve_vertex_offsets(mesh, np.zeros((mesh.n_triangles, 3))), 0.0)


def test_target_count_is_checked(small_model):
    mesh = mean_mesh(small_model)
    with pytest.raises(GeometryError):
        solve_vertex_offsets(mesh, np.zeros((mesh.n_triangles - 1, 3)))


def test_tilted_targets_pull_the_triangles(small_model):
    mesh = mean_mesh(small_model)
    tilt = Rotation.from_euler("y", 5.0, degrees=True).as_matrix()
    targets = _targets(mesh) @ tilt.T
    offsets = solve_vertex_offsets(mesh, targets, tikhonov=1e-3)
    moved = type(mesh).from_geometry(mesh.vertices + offsets[:, None] * mesh.vertex_normals,
                                     mesh.triangles, mesh.uv_coords)
    assert normal_mismatch(moved, targets) < normal_mismatch(mesh, targets)


def test_vertex_solve_is_deterministic(small_model):
    mesh = mean_mesh(small_model)
    base = _targets(mesh)
    gen = np.random.default_rng(9)
    a = normalize(base + gen.normal(0.0, 0.05, base.shape))
    o1 = solve_vertex_offsets(mesh, a, tikhonov=0.5)
    o2 = solve_vertex_offsets(mesh, a, tikhonov=0.5)
    np.testing.assert_allclose(o1, o2)
    assert np.abs(o1).max() > 0


def test_update_vertices_keeps_topology(small_model):
    mesh = mean_mesh(small_model)
    normal_map = np.zeros((16, 16, 3))
    moved = update_vertices(mesh, normal_map)
    np.testing.assert_array_equal(moved.vertices, mesh.vertices)
    np.testing.assert_array_equal(moved.triangles, mesh.triangles)


# --- Whole sequence ---

@pytest.mark.slow
def test_full_sequence_on_a_small_scene(small_scene, small_config):
    from pipeline.sequence import FULL, new_sequence, run_nodes

    inputs = {t: (small_scene.views(t), small_scene.landmark_set(t)) for t in small_scene.timestamps}
    state = run_nodes(new_sequence(small_scene.model, inputs, small_config), FULL)
    assert set(state["meshes"]) == set(small_scene.timestamps)
    totals = [p.total for p in state["reflectance_report"].passes]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    for t, report in state["refine_reports"].items():
        assert report.final_energy <= report.initial_energy
        surface = np.asarray(state["frames"][t].surface)
        np.testing.assert_allclose(np.linalg.norm(state["normal_maps"][t][surface], axis=1), 1.0, atol=1e-9)


# --- Tracking ---

def test_albedo_from_maps_recovers_the_coefficients(small_model):
    x_alb = 0.5 * small_model.sigma_alb * np.array([1.0, -1.0, 0.5, -0.5])
    coeffs = FitCoefficients(np.zeros(small_model.k_id), np.zeros(small_model.k_exp), x_alb)
    found = albedo_from_maps(small_model, synthesize_albedo(small_model, coeffs, 256))
    assert np.linalg.norm(found - x_alb) < 0.05 * np.linalg.norm(x_alb)


def _true_reflectance(scene):
    R = scene.plan.resolution
    return ReflectanceState(np.zeros((R, R, 3)), scene.true_specular, scene.lighting)


@pytest.mark.slow
def test_tracking_seeds_albedo_from_the_stored_maps(small_scene, small_config):
    reflectance = _true_reflectance(small_scene)
    result = process_new_frames(small_scene.views(1), small_scene.landmark_set(1), small_scene.model,
                                reflectance, small_scene.true_diffuse, config=small_config, timestamp=1)
    expected = albedo_from_maps(small_scene.model, small_scene.true_diffuse)
    np.testing.assert_array_equal(result.state.coeffs.x_alb, expected)
    np.testing.assert_array_equal(reflectance.specular, small_scene.true_specular)


@pytest.mark.slow
def test_tracking_recovers_a_new_expression(small_scene, small_config):
    truth = small_scene.states[1].coeffs.x_exp
    assert not np.allclose(truth, small_scene.states[0].coeffs.x_exp)
    result = process_new_frames(small_scene.views(1), small_scene.landmark_set(1), small_scene.model,
                                _true_reflectance(small_scene), small_scene.true_diffuse, config=small_config,
                                timestamp=1)
    found = result.state.coeffs.x_exp
    assert np.sqrt(np.mean((found - truth) ** 2)) < 0.1 * np.sqrt(np.mean(truth ** 2))


# --- Bump recovery ---

def _angular_error(normals, truth, region):
    cos = np.clip(np.einsum("ij,ij->i", normals[region], truth[region]), -1.0, 1.0)
    return float(np.mean(np.arccos(cos)))


@pytest.mark.slow
def test_refinement_recovers_a_bump_field(small_config):
    from pipeline.sequence import FULL, new_sequence, run_nodes

    config = small_config.model_copy(update={"image_width": 192, "image_height": 192, "uv_resolution": 128,
                                             "adam_steps_per_block": 100, "refine_iters": 100})
    scene = generate_scene(seed=5, n_frames=2, specular_strength=0.5, detail_strength=0.0,
                           bump_strength=0.25, noise_sigma=0.0, config=config)
    inputs = {t: (scene.views(t), scene.landmark_set(t)) for t in scene.timestamps}
    state = run_nodes(new_sequence(scene.model, inputs, config), FULL)
    refl = state["reflectance"]
    diffuse = np.asarray(state["frame_set"].base_diffuse) + refl.delta_diffuse
    camera = scene.cameras[HELDOUT_VIEW]

    for t in scene.timestamps:
        frame = state["frames"][t]
        seen = np.zeros(frame.surface.shape, dtype=bool)
        for samples in frame.views.values():
            seen |= samples.visible
        baked = _angular_error(state["baked"][t].normal, scene.true_normals[t], seen)
        refined = _angular_error(state["normal_maps"][t], scene.true_normals[t], seen)
        assert refined <= 0.6 * baked

        fit = state["states"][t]
        before_mesh = synthesize_shape(scene.model, fit.coeffs)
        region = rasterize(synthesize_shape(scene.model, scene.states[t].coeffs), scene.states[t].pose,
                           camera).mask & rasterize(before_mesh, fit.pose, camera).mask
        truth = scene.images[t][HELDOUT_VIEW]
        before = render_view(before_mesh, fit.pose, camera, refl.lighting, diffuse, refl.specular, None,
                             config.shininess, config.intensity_epsilon).color
        after = render_view(state["meshes"][t], fit.pose, camera, refl.lighting, diffuse, refl.specular,
                            state["normal_maps"][t], config.shininess, config.intensity_epsilon).color
        assert rmse_psnr(after, truth, region)[0] <= rmse_psnr(before, truth, region)[0]
