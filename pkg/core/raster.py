"""
Z-buffer software rasterizer and UV-space sampling.

Coverage is decided at pixel centres with a top-left style tie-break on shared
edges, so two triangles sharing an edge never both claim a pixel. Every
attribute (UV, depth, normal, position) is interpolated perspective-correctly.
The same scan routine rasterizes triangles in UV space, where it degenerates
to affine barycentrics.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from core.exceptions import OutOfRangeError
from core.geometry import NEAR_PLANE, Camera, Mesh, RigidPose, apply_pose, normalize

logger = logging.getLogger(__name__)


@dataclass
class RenderOutput:
    """
    Per-pixel buffers of one rendered view.

    Geometric attributes are NaN wherever `mask` is false; `tri_id` is -1 there.
    `color` is left at zero by `rasterize` and filled by the renderer.
    """
    color: np.ndarray      # (H, W, 3)
    mask: np.ndarray       # (H, W) bool
    depth: np.ndarray      # (H, W) camera-frame z
    uv_lookup: np.ndarray  # (H, W, 2)
    view_vec: np.ndarray   # (H, W, 3) unit, surface -> camera
    normal: np.ndarray     # (H, W, 3) unit world-space interpolated normal
    position: np.ndarray   # (H, W, 3) world-space surface point
    tri_id: np.ndarray     # (H, W) int
    bary: np.ndarray       # (H, W, 3) perspective-correct barycentrics


@dataclass
class UVRaster:
    """Triangle coverage of a UV raster: which triangle owns each texel and where."""
    mask: np.ndarray    # (R, R) bool
    tri_id: np.ndarray  # (R, R) int, -1 off-surface
    bary: np.ndarray    # (R, R, 3)

    @property
    def resolution(self) -> int:
        return self.mask.shape[0]

    def interpolate(self, triangles: np.ndarray, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Barycentric interpolation of per-vertex `values` onto covered texels."""
        values = np.asarray(values, dtype=np.float64)
        out_shape = self.mask.shape + values.shape[1:]
        out = np.full(out_shape, fill, dtype=np.float64)
        idx = triangles[self.tri_id[self.mask]]
        weights = self.bary[self.mask]
        gathered = values[idx]  # (N, 3, ...)
        out[self.mask] = np.einsum("nk,nk...->n...", weights, gathered)
        return out


# --- Scan conversion ---

def _owns_edge(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # A shared edge appears with opposite directions in its two triangles, so
    # exactly one of them owns the pixels lying on it.
    return (dy > 0) | ((dy == 0) & (dx < 0))


def _scan_band(
    screen: np.ndarray,
    depth: np.ndarray,
    width: int,
    row_start: int,
    row_stop: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterizes all triangles into rows [row_start, row_stop) of a z-buffer."""
    rows = row_stop - row_start
    zbuf = np.full((rows, width), np.inf)
    tri_id = np.full((rows, width), -1, dtype=np.int64)
    bary = np.zeros((rows, width, 3))
    inv_depth = 1.0 / depth

    for k in range(len(screen)):
        (x0, y0), (x1, y1), (x2, y2) = screen[k]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0 or not np.isfinite(area):
            continue
        sign = 1.0 if area > 0 else -1.0

        xs = screen[k, :, 0]
        ys = screen[k, :, 1]
        c_lo = max(int(np.ceil(xs.min() - 0.5)), 0)
        c_hi = min(int(np.floor(xs.max() - 0.5)), width - 1)
        r_lo = max(int(np.ceil(ys.min() - 0.5)), row_start)
        r_hi = min(int(np.floor(ys.max() - 0.5)), row_stop - 1)
        if c_lo > c_hi or r_lo > r_hi:
            continue

        px = np.arange(c_lo, c_hi + 1) + 0.5
        py = np.arange(r_lo, r_hi + 1)[:, None] + 0.5

        # edge i is the edge opposite vertex i
        ax = np.array([x1, x2, x0])
        ay = np.array([y1, y2, y0])
        bx = np.array([x2, x0, x1])
        by = np.array([y2, y0, y1])
        w = [sign * ((bx[i] - ax[i]) * (py - ay[i]) - (by[i] - ay[i]) * (px - ax[i])) for i in range(3)]
        owns = _owns_edge(sign * (bx - ax), sign * (by - ay))
        inside = np.ones(w[0].shape, dtype=bool)
        for i in range(3):
            inside &= (w[i] > 0) | ((w[i] == 0) & owns[i])
        if not inside.any():
            continue

        lam = np.stack(w, axis=-1) / (sign * area)
        q = lam * inv_depth[k]
        q_sum = q.sum(axis=-1)
        z = 1.0 / q_sum
        b = q / q_sum[..., None]

        sub = (slice(r_lo - row_start, r_hi - row_start + 1), slice(c_lo, c_hi + 1))
        closer = inside & (z < zbuf[sub])
        if not closer.any():
            continue
        zbuf[sub] = np.where(closer, z, zbuf[sub])
        tri_id[sub] = np.where(closer, k, tri_id[sub])
        bary[sub] = np.where(closer[..., None], b, bary[sub])

    return zbuf, tri_id, bary


def _scan(screen: np.ndarray, depth: np.ndarray, height: int, width: int, threads: int = 1):
    """Scanline bands are independent, so the result does not depend on `threads`."""
    n_bands = max(1, min(int(threads), height))
    edges = np.linspace(0, height, n_bands + 1).astype(int)
    bands = [(edges[i], edges[i + 1]) for i in range(n_bands) if edges[i + 1] > edges[i]]
    if n_bands == 1:
        parts = [_scan_band(screen, depth, width, *bands[0])]
    else:
        with ThreadPoolExecutor(max_workers=n_bands) as pool:
            parts = list(pool.map(lambda rs: _scan_band(screen, depth, width, *rs), bands))
    zbuf = np.concatenate([p[0] for p in parts], axis=0)
    tri_id = np.concatenate([p[1] for p in parts], axis=0)
    bary = np.concatenate([p[2] for p in parts], axis=0)
    return zbuf, tri_id, bary


# --- Image-space rasterization ---

def empty_render(height: int, width: int) -> RenderOutput:
    nan3 = np.full((height, width, 3), np.nan)
    return RenderOutput(
        color=np.zeros((height, width, 3)),
        mask=np.zeros((height, width), dtype=bool),
        depth=np.full((height, width), np.nan),
        uv_lookup=np.full((height, width, 2), np.nan),
        view_vec=nan3.copy(),
        normal=nan3.copy(),
        position=nan3.copy(),
        tri_id=np.full((height, width), -1, dtype=np.int64),
        bary=np.zeros((height, width, 3)),
    )


def front_facing(mesh: Mesh, camera: Camera) -> np.ndarray:
    """Triangles in front of the near plane whose normal faces the camera."""
    cam_pts = camera.to_camera(mesh.vertices)
    tri_pts = cam_pts[mesh.triangles]
    in_front = (tri_pts[:, :, 2] > NEAR_PLANE).all(axis=1)
    fn = np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0])
    facing = np.einsum("ij,ij->i", fn, -tri_pts[:, 0]) > 0
    return in_front & facing


def rasterize(mesh: Mesh, pose: RigidPose, camera: Camera, threads: int = 1) -> RenderOutput:
    """
    Rasterizes the posed mesh into `camera` with a z-buffer.

    Back-facing triangles and triangles crossing the near plane are skipped.
    """
    height, width = camera.height, camera.width
    out = empty_render(height, width)
    if mesh.n_triangles == 0:
        return out

    posed = apply_pose(mesh, pose)
    keep = np.flatnonzero(front_facing(posed, camera))
    if len(keep) == 0:
        logger.debug("No front-facing triangle in front of the camera.")
        return out

    tris = posed.triangles[keep]
    cam_pts = camera.to_camera(posed.vertices)
    screen = camera.project_camera_frame(cam_pts[tris])
    zbuf, local_id, bary = _scan(screen, cam_pts[tris][:, :, 2], height, width, threads)

    mask = local_id >= 0
    tri_id = np.full((height, width), -1, dtype=np.int64)
    tri_id[mask] = keep[local_id[mask]]
    corners = posed.triangles[tri_id[mask]]
    b = bary[mask]

    out.mask = mask
    out.tri_id = tri_id
    out.bary = np.where(mask[..., None], bary, 0.0)
    out.depth[mask] = zbuf[mask]
    out.uv_lookup[mask] = np.einsum("nk,nkc->nc", b, posed.uv_coords[corners])
    out.normal[mask] = normalize(np.einsum("nk,nkc->nc", b, posed.vertex_normals[corners]))
    position = np.einsum("nk,nkc->nc", b, posed.vertices[corners])
    out.position[mask] = position
    out.view_vec[mask] = normalize(camera.center - position)
    logger.debug(f"Rasterized {len(keep)} triangles covering {int(mask.sum())} pixels.")
    return out


# --- UV-space rasterization ---

def rasterize_uv(triangles: np.ndarray, uv_coords: np.ndarray, resolution: int, threads: int = 1) -> UVRaster:
    """Rasterizes the UV layout of a triangle list into a resolution x resolution raster."""
    triangles = np.asarray(triangles, dtype=np.int64)
    if len(triangles) == 0:
        return UVRaster(
            mask=np.zeros((resolution, resolution), dtype=bool),
            tri_id=np.full((resolution, resolution), -1, dtype=np.int64),
            bary=np.zeros((resolution, resolution, 3)),
        )
    screen = np.asarray(uv_coords, dtype=np.float64)[triangles] * resolution
    depth = np.ones(triangles.shape)
    _, tri_id, bary = _scan(screen, depth, resolution, resolution, threads)
    return UVRaster(mask=tri_id >= 0, tri_id=tri_id, bary=bary)


# --- Sampling ---

def _bilinear(raster: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    height, width = raster.shape[:2]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    xa, xb = np.clip(x0, 0, width - 1), np.clip(x0 + 1, 0, width - 1)
    ya, yb = np.clip(y0, 0, height - 1), np.clip(y0 + 1, 0, height - 1)
    if raster.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = raster[ya, xa] * (1 - fx) + raster[ya, xb] * fx
    bottom = raster[yb, xa] * (1 - fx) + raster[yb, xb] * fx
    return top * (1 - fy) + bottom * fy


def uv_sample(raster: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """
    Bilinear lookup of a UV raster; edge texels clamp.

    `uv` may be a single coordinate or any (..., 2) array. Texel (i, j) of an
    H x W raster is centred at ((j + 0.5)/W, (i + 0.5)/H).
    """
    raster = np.asarray(raster, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    if np.any(~np.isfinite(uv)) or uv.min() < 0.0 or uv.max() > 1.0:
        raise OutOfRangeError("UV coordinates must lie in [0,1]^2")
    height, width = raster.shape[:2]
    return _bilinear(raster, uv[..., 0] * width - 0.5, uv[..., 1] * height - 0.5)


def sample_image(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Bilinear lookup at pixel positions (x, y); positions off the image clamp to the border."""
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    pixels = np.asarray(pixels, dtype=np.float64)
    return _bilinear(image, pixels[..., 0] - 0.5, pixels[..., 1] - 0.5)


def texel_centers(resolution: int) -> np.ndarray:
    """(R, R, 2) UV coordinates of texel centres."""
    c = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(c, c)
    return np.stack([u, v], axis=-1)
