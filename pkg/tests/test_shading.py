import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from core.exceptions import DimensionError, ParameterError
from core.shading import (
    DominantLight,
    SHLighting,
    directional_light_sh,
    extract_dominant_light,
    rotate_sh,
    shade_ambient,
    shade_diffuse,
    shade_specular,
    shade_total,
    sh_basis,
    shading_gradients,
)
from tools.selftest import sample_lighting, shading_gradient_error

Y00 = 0.28209479177387814


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _angle_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.dot(_unit(a), _unit(b)), -1.0, 1.0)))


# --- sh_basis ---

def test_dc_component_is_constant():
    gen = np.random.default_rng(0)
    n = gen.normal(size=(50, 3))
    np.testing.assert_allclose(sh_basis(n)[:, 0], Y00)


def test_pole_values():
    b = sh_basis(np.array([0.0, 0.0, 1.0]))
    assert b[1] == pytest.approx(0.0)
    assert b[3] == pytest.approx(0.0)
    assert b[2] == pytest.approx(0.4886025, abs=1e-7)


def test_parity():
    n = _unit([0.3, -0.5, 0.8])
    b, b_neg = sh_basis(n), sh_basis(-n)
    np.testing.assert_allclose(b_neg[1:4], -b[1:4])
    np.testing.assert_allclose(b_neg[[0, 4, 5, 6, 7, 8]], b[[0, 4, 5, 6, 7, 8]])


def test_addition_theorem():
    gen = np.random.default_rng(1)
    n = gen.normal(size=(1000, 3))
    np.testing.assert_allclose((sh_basis(n) ** 2).sum(axis=1), 9.0 / (4.0 * np.pi), atol=1e-9)


# --- SHLighting ---

def test_lighting_validation():
    with pytest.raises(DimensionError):
        SHLighting(np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(ParameterError):
        SHLighting(np.zeros((3, 9)), [-1.0, 0.0, 0.0])
    light = SHLighting(np.zeros((3, 9)), [2.0])
    np.testing.assert_array_equal(light.ambient, [2.0, 2.0, 2.0])


def test_lighting_vector_layout():
    light = sample_lighting(3)
    back = SHLighting.from_vector(light.to_vector())
    np.testing.assert_array_equal(back.coeffs, light.coeffs)
    np.testing.assert_array_equal(back.ambient, light.ambient)
    clamped = SHLighting.from_vector(np.concatenate([np.zeros(27), [-1.0, 2.0, 3.0]]))
    np.testing.assert_array_equal(clamped.ambient, [0.0, 2.0, 3.0])


# --- Diffuse ---

def test_zero_light_gives_zero_diffuse():
    out = shade_diffuse(np.array([120.0, 80.0, 60.0]), _unit([0.2, 0.1, 1.0]), SHLighting.zeros())
    np.testing.assert_array_equal(out, 0.0)


def test_dc_only_light_is_normal_independent():
    coeffs = np.zeros((3, 9))
    coeffs[:, 0] = 2.0
    light = SHLighting(coeffs, np.zeros(3))
    albedo = np.array([100.0, 50.0, 25.0])
    for n in ([0, 0, 1], [1, 0, 0], [0.3, -0.4, 0.2]):
        np.testing.assert_allclose(shade_diffuse(albedo, _unit(n), light), albedo * 2.0 * Y00)


def test_diffuse_is_linear_in_albedo():
    light, n = sample_lighting(1), _unit([0.1, 0.2, 0.9])
    albedo = np.array([90.0, 70.0, 40.0])
    np.testing.assert_allclose(shade_diffuse(2 * albedo, n, light), 2 * shade_diffuse(albedo, n, light))


# --- Specular ---

def _dom(direction=(0.0, 0.0, 1.0), level=1.0):
    return DominantLight(_unit(direction), np.full((2, 2, 3), level))


def test_specular_at_mirror_configuration():
    dom = _dom(level=3.0)
    n = np.array([0.0, 0.0, 1.0])
    out = shade_specular(40.0, n, n, dom, uv=np.array([0.5, 0.5]), m=5.0)
    np.testing.assert_allclose(out, 3.0 * 40.0)


def test_specular_half_cosine():
    # light and view both along +z so h = +z; n·h = 0.5
    n = np.array([np.sqrt(0.75), 0.0, 0.5])
    out = shade_specular(10.0, n, np.array([0.0, 0.0, 1.0]), _dom(), uv=np.array([0.5, 0.5]), m=5.0)
    np.testing.assert_allclose(out, 10.0 * 0.03125)


def test_specular_vanishes_below_horizon():
    n = np.array([np.sqrt(1 - 0.09), 0.0, -0.3])
    out = shade_specular(10.0, n, np.array([0.0, 0.0, 1.0]), _dom(), uv=np.array([0.5, 0.5]), m=5.0)
    np.testing.assert_array_equal(out, 0.0)


def test_specular_needs_positive_shininess():
    with pytest.raises(ParameterError):
        shade_specular(1.0, [0, 0, 1.0], [0, 0, 1.0], _dom(), uv=np.array([0.5, 0.5]), m=0.0)


# --- Total ---

def test_total_without_specular_is_lambertian():
    light, dom = sample_lighting(2), _dom()
    n, v = _unit([0.2, -0.1, 1.0]), _unit([0.0, 0.3, 1.0])
    albedo = np.array([150.0, 110.0, 90.0])
    out = shade_total(albedo, np.zeros(3), 0.0, n, v, light, dom, uv=np.array([0.5, 0.5]))
    np.testing.assert_allclose(out, light.ambient + shade_diffuse(albedo, n, light))


def test_ambient_alone():
    light = SHLighting(np.zeros((3, 9)), [5.0, 6.0, 7.0])
    out = shade_total(np.array([100.0, 100.0, 100.0]), np.zeros(3), 0.0, _unit([0, 0, 1.0]),
                      _unit([0, 0, 1.0]), light, _dom(), uv=np.array([0.5, 0.5]))
    np.testing.assert_allclose(out, [5.0, 6.0, 7.0])
    np.testing.assert_array_equal(shade_ambient(light, (2,)).shape, (2, 3))


def test_total_is_sum_of_components():
    light, dom = sample_lighting(4), _dom(direction=(0.2, 0.3, 1.0), level=2.0)
    n, v = _unit([0.1, 0.2, 1.0]), _unit([0.3, 0.0, 1.0])
    albedo, delta, spec = np.array([120.0, 90.0, 70.0]), np.array([3.0, -2.0, 1.0]), 35.0
    uv = np.array([0.4, 0.6])
    total = shade_total(albedo, delta, spec, n, v, light, dom, uv=uv)
    parts = light.ambient + shade_diffuse(albedo + delta, n, light) + shade_specular(spec, n, v, dom, uv=uv)
    np.testing.assert_allclose(total, parts, atol=1e-12)


# --- Dominant light ---

def _directional(direction, color=(0.8, 0.8, 0.8)):
    return SHLighting(directional_light_sh(_unit(direction), np.array(color)), np.zeros(3))


def test_directional_light_direction_is_recovered():
    normals = np.tile([0.0, 0.0, 1.0], (4, 4, 1))
    dom = extract_dominant_light(_directional([0.0, 0.0, 1.0]), normals)
    assert _angle_deg(dom.direction, [0.0, 0.0, 1.0]) < 1.0
    assert (dom.intensity_map > 0).all()


def test_dc_only_light_is_dark():
    coeffs = np.zeros((3, 9))
    coeffs[:, 0] = 1.0
    dom = extract_dominant_light(SHLighting(coeffs, np.zeros(3)), np.tile([0.0, 0.0, 1.0], (3, 3, 1)))
    np.testing.assert_array_equal(dom.intensity_map, 0.0)


def test_invalid_normals_get_zero_intensity():
    normals = np.tile([0.0, 0.0, 1.0], (3, 3, 1))
    normals[0, 0] = 0.0
    dom = extract_dominant_light(_directional([0.1, 0.2, 1.0]), normals)
    np.testing.assert_array_equal(dom.intensity_map[0, 0], 0.0)
    assert (dom.intensity_map[1, 1] > 0).all()


def test_dominant_direction_rotates_with_the_light():
    light = _directional([0.3, 0.2, 1.0])
    Q = Rotation.from_rotvec([0.2, -0.4, 0.3]).as_matrix()
    rotated = SHLighting(rotate_sh(light.coeffs, Q), np.zeros(3))
    normals = np.tile([0.0, 0.0, 1.0], (2, 2, 1))
    d = extract_dominant_light(light, normals).direction
    d_rot = extract_dominant_light(rotated, normals).direction
    assert _angle_deg(d_rot, Q @ d) < 1.0


# --- Gradients ---

def test_gradient_closed_forms():
    light = sample_lighting(5)
    dom = _dom(direction=(0.1, 0.1, 1.0), level=1.5)
    n, v = _unit([0.1, 0.0, 1.0]), _unit([0.0, 0.1, 1.0])
    g = shading_gradients(np.array([100.0, 90.0, 80.0]), np.zeros(3), 20.0, n, v, light, dom,
                          intensity=np.full(3, 1.5))
    lobe = shade_specular(1.0, n, v, dom, intensity=np.ones(3))
    np.testing.assert_allclose(g.d_specular, 1.5 * lobe)
    np.testing.assert_allclose(g.d_delta, sh_basis(n) @ light.coeffs.T)


def test_gradients_match_finite_differences():
    assert shading_gradient_error(n_configs=200, seed=0) < 1e-4
