"""
Image assembly: rasterize a posed mesh, look up its UV maps and shade every
covered pixel. Background pixels stay black; colors are clamped to [0, 255]
only here, at the image-buffer write.

Normal maps are stored in model space and rotated by the pose at render time,
so one baked map serves every frame of a sequence.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from core.geometry import Camera, Mesh, RigidPose, look_at, normalize
from core.raster import RenderOutput, rasterize, uv_sample
from core.shading import (
    SHLighting,
    dominant_direction,
    dominant_intensity,
    irradiance,
    specular_lobe,
)

logger = logging.getLogger(__name__)


def _assemble(out: RenderOutput, color: np.ndarray) -> RenderOutput:
    buffer = np.zeros(out.mask.shape + (3,))
    buffer[out.mask] = np.clip(color, 0.0, 255.0)
    out.color = buffer
    return out


def shade_pixels(
    light: SHLighting,
    albedo: np.ndarray,
    normals: np.ndarray,
    view: Optional[np.ndarray] = None,
    specular: Optional[np.ndarray] = None,
    shininess: float = 5.0,
    intensity_epsilon: float = 0.1,
) -> np.ndarray:
    """Unclamped total shading of a list of surface samples; specular is skipped when `specular` is None."""
    color = light.ambient + albedo * irradiance(light, normals)
    if specular is None:
        return color
    direction = dominant_direction(light)
    if direction is None:
        return color
    intensity = dominant_intensity(light, direction, normals, intensity_epsilon)
    lobe = specular_lobe(normals, view, direction, shininess)
    return color + intensity * (specular * lobe)[:, None]


def render_view(
    mesh: Mesh,
    pose: RigidPose,
    camera: Camera,
    light: SHLighting,
    diffuse_map: np.ndarray,
    specular_map: Optional[np.ndarray] = None,
    normal_map: Optional[np.ndarray] = None,
    shininess: float = 5.0,
    intensity_epsilon: float = 0.1,
    threads: int = 1,
) -> RenderOutput:
    """
    Full I_total rendering of a textured mesh.

    Albedo comes from `diffuse_map`, the specular albedo from `specular_map`
    and the shading normal from `normal_map` when given, else from the
    interpolated geometric normal.
    """
    out = rasterize(mesh, pose, camera, threads=threads)
    if not out.mask.any():
        return out
    uv = np.clip(out.uv_lookup[out.mask], 0.0, 1.0)
    albedo = uv_sample(diffuse_map, uv)
    if normal_map is not None:
        normals = normalize(pose.rotate(uv_sample(normal_map, uv)))
    else:
        normals = out.normal[out.mask]
    specular = uv_sample(specular_map, uv) if specular_map is not None else None
    color = shade_pixels(light, albedo, normals, out.view_vec[out.mask], specular, shininess, intensity_epsilon)
    return _assemble(out, color)


def render_stage1(
    mesh: Mesh,
    pose: RigidPose,
    camera: Camera,
    light: SHLighting,
    vertex_albedo: np.ndarray,
    threads: int = 1,
) -> RenderOutput:
    """Ambient + SH diffuse rendering with per-vertex albedo and geometric normals."""
    out = rasterize(mesh, pose, camera, threads=threads)
    if not out.mask.any():
        return out
    corners = mesh.triangles[out.tri_id[out.mask]]
    albedo = np.einsum("nk,nkc->nc", out.bary[out.mask], np.asarray(vertex_albedo)[corners])
    color = shade_pixels(light, albedo, out.normal[out.mask])
    return _assemble(out, color)


def orbit_camera(camera: Camera, center: np.ndarray, yaw_deg: float) -> Camera:
    """The camera moved on a circle about the vertical axis through `center`, still looking at it."""
    center = np.asarray(center, dtype=np.float64)
    Ry = Rotation.from_euler("y", yaw_deg, degrees=True).as_matrix()
    eye = center + Ry @ (camera.center - center)
    return Camera(camera.focal, camera.principal_point, look_at(eye, center), camera.resolution)


def render_sweep(
    mesh: Mesh,
    pose: RigidPose,
    camera: Camera,
    light: SHLighting,
    diffuse_map: np.ndarray,
    specular_map: Optional[np.ndarray] = None,
    normal_map: Optional[np.ndarray] = None,
    yaw_range: Sequence[float] = (-35.0, 35.0),
    steps: int = 8,
    shininess: float = 5.0,
    intensity_epsilon: float = 0.1,
    threads: int = 1,
) -> List[np.ndarray]:
    """Novel views from a virtual camera orbiting the head; returns one color buffer per yaw."""
    center = pose.transform(mesh.vertices.mean(axis=0))
    images = []
    for yaw in np.linspace(yaw_range[0], yaw_range[1], steps):
        cam = orbit_camera(camera, center, float(yaw))
        out = render_view(mesh, pose, cam, light, diffuse_map, specular_map, normal_map,
                          shininess, intensity_epsilon, threads)
        images.append(out.color)
    logger.info(f"Rendered a {steps}-view sweep over yaw {yaw_range[0]}..{yaw_range[1]} deg")
    return images
