import numpy as np
import pytest

from core.exceptions import OutOfRangeError
from core.geometry import Camera, Mesh, RigidPose
from core.raster import rasterize, rasterize_uv, texel_centers, uv_sample


def _camera(size=16, focal=16.0):
    return Camera(focal, (size / 2.0, size / 2.0), RigidPose.identity(), (size, size))


def _quad(z, uv_value=0.0, half=10.0):
    """Two triangles covering [-half, half]^2 at depth z, facing the camera at the origin."""
    vertices = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    triangles = np.array([[0, 2, 1], [0, 3, 2]])
    uv = np.full((4, 2), uv_value)
    normals = np.tile([0.0, 0.0, -1.0], (4, 1))
    return Mesh(vertices, triangles, uv, normals)


def _merge(a: Mesh, b: Mesh) -> Mesh:
    n = a.n_vertices
    return Mesh(np.vstack([a.vertices, b.vertices]), np.vstack([a.triangles, b.triangles + n]),
                np.vstack([a.uv_coords, b.uv_coords]), np.vstack([a.vertex_normals, b.vertex_normals]))


# --- rasterize ---

def test_mesh_behind_camera_is_not_covered():
    out = rasterize(_quad(-2.0), RigidPose.identity(), _camera())
    assert not out.mask.any()
    assert np.isnan(out.depth).all()
    assert (out.tri_id == -1).all()


def test_frustum_filling_quad_covers_every_pixel():
    out = rasterize(_quad(1.0), RigidPose.identity(), _camera())
    assert out.mask.all()
    np.testing.assert_allclose(out.depth[out.mask], 1.0)
    np.testing.assert_allclose(np.linalg.norm(out.view_vec[out.mask], axis=1), 1.0)


def test_shared_edge_is_claimed_once():
    out = rasterize(_quad(1.0), RigidPose.identity(), _camera())
    # every pixel belongs to exactly one of the two triangles
    assert set(np.unique(out.tri_id)) == {0, 1}


def test_nearer_surface_wins():
    near = _quad(1.0, uv_value=0.25)
    far = _quad(2.0, uv_value=0.75)
    for mesh in (_merge(near, far), _merge(far, near)):
        out = rasterize(mesh, RigidPose.identity(), _camera())
        np.testing.assert_allclose(out.uv_lookup[out.mask], 0.25)


def test_threads_do_not_change_the_result():
    mesh = _quad(1.5, half=0.4)
    one = rasterize(mesh, RigidPose.from_rotvec([0.2, 0.1, 0.0], [0.0, 0.0, 0.0]), _camera(32), threads=1)
    many = rasterize(mesh, RigidPose.from_rotvec([0.2, 0.1, 0.0], [0.0, 0.0, 0.0]), _camera(32), threads=4)
    np.testing.assert_array_equal(one.mask, many.mask)
    np.testing.assert_array_equal(one.tri_id, many.tri_id)


# --- rasterize_uv ---

def test_uv_raster_of_unit_square_covers_everything():
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    raster = rasterize_uv(np.array([[0, 1, 2], [0, 2, 3]]), uv, 8)
    assert raster.mask.all()
    values = raster.interpolate(np.array([[0, 1, 2], [0, 2, 3]]), uv)
    np.testing.assert_allclose(values, texel_centers(8), atol=1e-12)


# --- uv_sample ---

def test_texel_centre_returns_texel():
    gen = np.random.default_rng(1)
    raster = gen.uniform(size=(5, 7))
    centres = texel_centers(7)
    # non-square raster: build its own centres
    i, j = 3, 5
    uv = np.array([(j + 0.5) / 7, (i + 0.5) / 5])
    assert uv_sample(raster, uv) == pytest.approx(raster[i, j])
    assert centres.shape == (7, 7, 2)


def test_constant_map():
    raster = np.full((4, 4, 3), 42.0)
    out = uv_sample(raster, np.array([[0.0, 0.0], [0.3, 0.9], [1.0, 1.0]]))
    np.testing.assert_allclose(out, 42.0)


def test_bilinear_midpoint():
    raster = np.array([[0.0, 100.0]])
    assert uv_sample(raster, np.array([0.5, 0.5])) == pytest.approx(50.0)


def test_out_of_range_uv():
    with pytest.raises(OutOfRangeError):
        uv_sample(np.zeros((3, 3)), np.array([1.2, 0.5]))
    with pytest.raises(OutOfRangeError):
        uv_sample(np.zeros((3, 3)), np.array([np.nan, 0.5]))
