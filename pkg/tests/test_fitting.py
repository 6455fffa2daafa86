import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from core.exceptions import GeometryError, ParameterError
from core.facemodel import FitCoefficients, synthesize_albedo, synthesize_shape, vertex_albedo
from core.geometry import RigidPose, geodesic_angle
from core.io import to_uint8
from core.renderer import render_stage1
from core.shading import SHLighting
from pipeline.fitting import (
    bake_maps,
    fit_two_views,
    landmark_energy,
    layout_for,
    photo_consistency,
    regularization_energy,
    similarity_procrustes,
    total_energy,
    triangulate,
)
from pipeline.states import FitState, LandmarkSet, ViewInput
from tools.scene import generate_scene


def _dc_light(level=2.0, ambient=5.0):
    coeffs = np.zeros((3, 9))
    coeffs[:, 0] = level
    return SHLighting(coeffs, np.full(3, ambient))


def _mean_albedo_state(scene, t=0, lighting=None):
    truth = scene.states[t]
    coeffs = FitCoefficients(truth.coeffs.x_id, truth.coeffs.x_exp, np.zeros(scene.model.k_alb))
    return FitState(coeffs, truth.pose, lighting or _dc_light())


def _stage1_views(scene, state, offset=0.0):
    mesh = synthesize_shape(scene.model, state.coeffs)
    albedo = vertex_albedo(scene.model, state.coeffs)
    views = []
    for name in ("left", "right"):
        cam = scene.cameras[name]
        out = render_stage1(mesh, state.pose, cam, state.lighting, albedo)
        views.append(ViewInput(name, out.color + offset, cam))
    return views


# --- Energies ---

def test_landmarks_of_the_true_state_cost_nothing(small_scene):
    cameras = {n: small_scene.cameras[n] for n in ("left", "right")}
    energy = landmark_energy(small_scene.states[0], small_scene.model, small_scene.landmark_set(0), cameras)
    assert energy == pytest.approx(0.0, abs=1e-12)


def test_landmark_shift_costs_its_squared_length(small_scene):
    records = small_scene.landmarks[0]
    shifted = dict(records, left=[(i, u + 3.0, v + 4.0) for i, u, v in records["left"]])
    cameras = {n: small_scene.cameras[n] for n in ("left", "right")}
    energy = landmark_energy(small_scene.states[0], small_scene.model, LandmarkSet.from_records(shifted), cameras)
    assert energy == pytest.approx(25.0, rel=1e-9)


def test_regularizer_counts_one_per_sigma(small_model):
    c = FitCoefficients(small_model.sigma_id.copy(), -small_model.sigma_exp, 2.0 * small_model.sigma_alb)
    expected = small_model.k_id + small_model.k_exp + 4.0 * small_model.k_alb
    assert regularization_energy(c, small_model) == pytest.approx(expected)
    assert regularization_energy(FitCoefficients.zeros(small_model), small_model) == 0.0


def test_photo_consistency_of_a_uniform_offset(small_scene):
    state = _mean_albedo_state(small_scene)
    views = _stage1_views(small_scene, state)
    assert photo_consistency(state, small_scene.model, views) == pytest.approx(0.0, abs=1e-12)
    shifted = _stage1_views(small_scene, state, offset=10.0)
    # 3 channels × 10² per view, two views
    assert photo_consistency(state, small_scene.model, shifted) == pytest.approx(600.0, rel=1e-9)


def test_total_energy_is_the_weighted_sum(small_scene, small_config):
    state = _mean_albedo_state(small_scene)
    views = _stage1_views(small_scene, state, offset=3.0)
    landmarks = small_scene.landmark_set(0)
    cameras = {v.name: v.camera for v in views}
    expected = small_config.w_l * landmark_energy(state, small_scene.model, landmarks, cameras) \
        + small_config.w_r * regularization_energy(state.coeffs, small_scene.model) \
        + small_config.w_con * photo_consistency(state, small_scene.model, views)
    assert total_energy(state, small_scene.model, views, landmarks, small_config) == pytest.approx(expected)


# --- Parameter packing ---

def test_layout_pack_unpack(small_model):
    layout = layout_for(small_model)
    gen = np.random.default_rng(4)
    state = FitState(
        FitCoefficients(gen.normal(size=4), gen.normal(size=2), gen.normal(size=4)),
        RigidPose.from_rotvec([0.1, -0.2, 0.05], [0.3, 0.0, -0.1], 1.7),
        SHLighting(gen.normal(size=(3, 9)), [1.0, 2.0, 3.0]),
    )
    x = layout.pack(state)
    assert len(x) == layout.size == 4 + 2 + 4 + 3 + 3 + 1 + 27 + 3
    back = layout.unpack(x)
    np.testing.assert_allclose(back.pose.R, state.pose.R, atol=1e-12)
    assert back.pose.s == pytest.approx(1.7)
    np.testing.assert_array_equal(back.lighting.coeffs, state.lighting.coeffs)


def test_retract_composes_rotation_on_the_left(small_model):
    layout = layout_for(small_model)
    x = np.zeros(layout.size)
    x[layout.rot] = [0.0, 0.3, 0.0]
    delta = np.zeros(layout.size)
    delta[layout.rot] = [0.2, 0.0, 0.0]
    out = layout.retract(x, delta)
    expected = Rotation.from_rotvec([0.2, 0.0, 0.0]) * Rotation.from_rotvec([0.0, 0.3, 0.0])
    np.testing.assert_allclose(Rotation.from_rotvec(out[layout.rot]).as_matrix(), expected.as_matrix(), atol=1e-12)


# --- Initialization ---

def test_triangulation_recovers_points(small_scene):
    gen = np.random.default_rng(5)
    points = gen.uniform(-0.5, 0.5, size=(10, 3))
    left, right = small_scene.cameras["left"], small_scene.cameras["right"]
    pix_l, _ = left.project_points(points)
    pix_r, _ = right.project_points(points)
    np.testing.assert_allclose(triangulate(left, right, pix_l, pix_r), points, atol=1e-6)


def test_procrustes_recovers_a_similarity():
    gen = np.random.default_rng(6)
    src = gen.normal(size=(12, 3))
    pose = RigidPose.from_rotvec([0.3, -0.1, 0.4], [1.0, 2.0, -0.5], 1.3)
    found = similarity_procrustes(src, pose.transform(src))
    np.testing.assert_allclose(found.R, pose.R, atol=1e-10)
    np.testing.assert_allclose(found.t, pose.t, atol=1e-10)
    assert found.s == pytest.approx(1.3)


# --- Validation ---

def test_too_few_landmarks(small_scene, small_config):
    records = {name: items[:4] for name, items in small_scene.landmarks[0].items()}
    with pytest.raises(ParameterError):
        fit_two_views(small_scene.model, small_scene.views(0), LandmarkSet.from_records(records), small_config)


def test_landmark_index_out_of_range(small_scene, small_config):
    records = dict(small_scene.landmarks[0])
    records["left"] = [(small_scene.model.n_vertices + 5, 10.0, 10.0)] + records["left"]
    with pytest.raises(GeometryError):
        fit_two_views(small_scene.model, small_scene.views(0), LandmarkSet.from_records(records), small_config)


def test_shared_viewpoint_warns(small_scene, small_config):
    left = small_scene.views(0, ["left"])[0]
    views = [left, ViewInput("right", left.image, left.camera)]
    records = {"left": small_scene.landmarks[0]["left"], "right": small_scene.landmarks[0]["left"]}
    config = small_config.model_copy(update={"w_con": 0.0, "gn_max_iters": 5})
    _, report = fit_two_views(small_scene.model, views, LandmarkSet.from_records(records), config)
    assert any("degenerate" in w for w in report.warnings)


# --- Baking ---

def test_baked_maps_of_the_true_state(small_scene, small_config):
    state = small_scene.states[0]
    baked, frame = bake_maps(state, small_scene.views(0), small_scene.model, small_config.uv_resolution)
    assert baked.resolution == small_config.uv_resolution
    assert baked.coverage.any()
    assert not (baked.coverage & ~frame.surface).any()
    for samples in frame.views.values():
        assert not (baked.coverage & ~samples.visible).any()
    norms = np.linalg.norm(baked.normal[frame.surface], axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)
    np.testing.assert_allclose(baked.diffuse, synthesize_albedo(small_scene.model, state.coeffs,
                                                                small_config.uv_resolution))


def test_baked_colors_match_the_images(small_scene, small_config):
    baked, frame = bake_maps(small_scene.states[0], small_scene.views(0), small_scene.model,
                             small_config.uv_resolution)
    samples = frame.views["left"]
    np.testing.assert_array_equal(samples.observed[~samples.visible], 0.0)
    assert samples.observed[samples.visible].max() > 0


# --- Closed loop ---

def _scene_diameter(scene, t=0):
    mesh = synthesize_shape(scene.model, scene.states[t].coeffs)
    return float(np.linalg.norm(np.ptp(mesh.vertices, axis=0)))


def _self_rendered_views(scene, t=0):
    """8-bit renders by the Stage-1 image model itself, so the fit can reach the quantization floor."""
    state = scene.states[t]
    mesh = synthesize_shape(scene.model, state.coeffs)
    albedo = vertex_albedo(scene.model, state.coeffs, clamp=False)
    views = []
    for name in ("left", "right"):
        cam = scene.cameras[name]
        out = render_stage1(mesh, state.pose, cam, scene.lighting, albedo)
        views.append(ViewInput(name, to_uint8(out.color).astype(np.float64), cam))
    return views


@pytest.mark.slow
def test_fit_recovers_the_pose(small_scene, small_config):
    state, report = fit_two_views(small_scene.model, small_scene.views(0), small_scene.landmark_set(0),
                                  small_config)
    truth = small_scene.states[0].pose
    assert geodesic_angle(state.pose.R, truth.R) < 1e-2
    assert np.linalg.norm(state.pose.t - truth.t) < 0.01 * _scene_diameter(small_scene)
    assert state.pose.s == pytest.approx(truth.s, rel=0.01)
    for rep in report.stages.values():
        assert rep.final_cost <= rep.initial_cost
    assert set(report.energies) == {"pose", "shape", "appearance", "full"}
    assert report.trace_rows()


@pytest.mark.slow
@pytest.mark.parametrize("seed", [11, 12, 13])
def test_fit_of_self_rendered_scenes(seed, small_config):
    config = small_config.model_copy(update={"gn_max_iters": 40})
    scene = generate_scene(seed=seed, n_frames=1, specular_strength=0.0, detail_strength=0.0,
                           noise_sigma=0.0, config=config)
    views = _self_rendered_views(scene)
    state, _ = fit_two_views(scene.model, views, scene.landmark_set(0), config)

    truth = scene.states[0]
    assert geodesic_angle(state.pose.R, truth.pose.R) < 1e-2
    assert np.linalg.norm(state.pose.t - truth.pose.t) < 0.01 * _scene_diameter(scene)
    error = state.lighting.coeffs - scene.lighting.coeffs
    assert np.sqrt(np.mean(error ** 2)) / np.sqrt(np.mean(scene.lighting.coeffs ** 2)) < 0.05
    # photo_consistency sums three channels per view; rounding to 8 bits alone gives 1/12 per channel
    per_channel = photo_consistency(state, scene.model, views) / (3 * len(views))
    assert per_channel <= 0.25


def test_fit_keeps_a_frozen_albedo(small_scene, small_config):
    config = small_config.model_copy(update={"gn_max_iters": 3})
    init = small_scene.states[0]
    state, report = fit_two_views(small_scene.model, small_scene.views(0), small_scene.landmark_set(0),
                                  config, init=init, freeze_albedo=True)
    np.testing.assert_array_equal(state.coeffs.x_alb, init.coeffs.x_alb)
    assert "appearance" in report.stages
