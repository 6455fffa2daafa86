"""
File formats.

- Mesh (`.mesh`): line-oriented text. A `# rcmesh 1` first line, then the four
  sections `vertices N`, `triangles T`, `uvs N`, `normals N`, each followed by
  its rows of whitespace-separated decimals.
- Float raster (`.frm`): 16-byte little-endian header (magic `RCF8`, uint32
  width, uint32 height, uint32 channels) followed by width*height*channels
  little-endian float64 values in row-major (row, col, channel) order.
- Container (`.rcm` models, `.rfs` fit states): ASCII header lines
  `RCCONTAINER 1 <kind>`, any number of `meta <key> <value>`, one
  `array <name> <rows> <cols>` per array, then `END`; the arrays follow as
  little-endian float64 in declared order.
- Cameras: one camera per line, `name focal cx cy width height` then the nine
  row-major rotation entries and the three translation entries.
- Landmarks: one landmark per line, `view vertex_index x y`.
- Lighting: `ambient r g b` followed by one `sh` line of nine coefficients per
  colour channel.
- Images: 8-bit RGB PNG.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from PIL import Image

from core.exceptions import FormatError
from core.geometry import Camera, Mesh, RigidPose

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RASTER_MAGIC = b"RCF8"
CONTAINER_MAGIC = "RCCONTAINER 1"


def _fmt(values) -> str:
    return " ".join(f"{float(v)!r}" for v in np.ravel(values))


# --- Meshes ---

def write_mesh(mesh: Mesh, path: PathLike) -> None:
    lines = ["# rcmesh 1", f"vertices {mesh.n_vertices}"]
    lines += [_fmt(v) for v in mesh.vertices]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [" ".join(str(int(i)) for i in t) for t in mesh.triangles]
    lines.append(f"uvs {mesh.n_vertices}")
    lines += [_fmt(uv) for uv in mesh.uv_coords]
    lines.append(f"normals {mesh.n_vertices}")
    lines += [_fmt(n) for n in mesh.vertex_normals]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path: PathLike) -> Mesh:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    sections: Dict[str, np.ndarray] = {}
    i = 0
    try:
        while i < len(lines):
            name, count = lines[i].split()
            count = int(count)
            rows = [list(map(float, ln.split())) for ln in lines[i + 1:i + 1 + count]]
            if len(rows) != count:
                raise FormatError(f"Section '{name}' of {path} is truncated")
            sections[name] = np.array(rows, dtype=np.float64).reshape(count, -1) if count else np.zeros((0, 0))
            i += 1 + count
        return Mesh(
            sections["vertices"].reshape(-1, 3),
            sections["triangles"].astype(np.int64).reshape(-1, 3),
            sections["uvs"].reshape(-1, 2),
            sections["normals"].reshape(-1, 3),
        )
    except (KeyError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"Malformed mesh file {path}: {e}") from e


# --- Float rasters ---

def write_raster(raster: np.ndarray, path: PathLike) -> None:
    raster = np.asarray(raster, dtype="<f8")
    if raster.ndim == 2:
        raster = raster[..., None]
    height, width, channels = raster.shape
    header = RASTER_MAGIC + struct.pack("<III", width, height, channels)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(raster).tobytes())


def read_raster(path: PathLike) -> np.ndarray:
    """Reads a float raster; single-channel rasters come back as (H, W)."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RASTER_MAGIC:
        raise FormatError(f"{path} is not a float raster (bad magic)")
    width, height, channels = struct.unpack("<III", data[4:16])
    expected = 16 + 8 * width * height * channels
    if len(data) != expected:
        raise FormatError(f"{path} holds {len(data)} bytes, expected {expected}")
    raster = np.frombuffer(data, dtype="<f8", offset=16).reshape(height, width, channels).astype(np.float64)
    return raster[..., 0] if channels == 1 else raster


# --- Containers ---

def write_container(path: PathLike, kind: str, meta: Dict[str, object], arrays: Dict[str, np.ndarray]) -> None:
    header = [f"{CONTAINER_MAGIC} {kind}"]
    header += [f"meta {key} {value}" for key, value in meta.items()]
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        arr2 = arr.reshape(arr.shape[0] if arr.ndim else 1, -1) if arr.size else arr.reshape(0, 0)
        header.append(f"array {name} {arr2.shape[0]} {arr2.shape[1]}")
        blobs.append(np.ascontiguousarray(arr2).tobytes())
    header.append("END")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        for blob in blobs:
            f.write(blob)


def read_container(path: PathLike, kind: str) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    marker = data.find(b"\nEND\n")
    if marker < 0:
        raise FormatError(f"{path} has no container header terminator")
    header = data[:marker].decode("ascii").splitlines()
    if not header or header[0] != f"{CONTAINER_MAGIC} {kind}":
        raise FormatError(f"{path} is not a '{kind}' container")
    meta: Dict[str, str] = {}
    layout: List[Tuple[str, int, int]] = []
    for line in header[1:]:
        parts = line.split(maxsplit=2)
        if parts[0] == "meta":
            meta[parts[1]] = parts[2] if len(parts) > 2 else ""
        elif parts[0] == "array":
            rows, cols = map(int, parts[2].split())
            layout.append((parts[1], rows, cols))
        else:
            raise FormatError(f"Unexpected header line '{line}' in {path}")
    offset = marker + len(b"\nEND\n")
    arrays: Dict[str, np.ndarray] = {}
    for name, rows, cols in layout:
        n = rows * cols
        if offset + 8 * n > len(data):
            raise FormatError(f"Array '{name}' of {path} is truncated")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(rows, cols).astype(np.float64)
        offset += 8 * n
    return meta, arrays


# --- Images ---

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)


def write_png(image: np.ndarray, path: PathLike) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64)


# --- Cameras, landmarks, lighting ---

def write_cameras(cameras: Dict[str, Camera], path: PathLike) -> None:
    lines = []
    for name, cam in cameras.items():
        values = [cam.focal, *cam.principal_point, *cam.resolution, *cam.extrinsic.R.ravel(), *cam.extrinsic.t]
        lines.append(f"{name} " + " ".join(repr(float(v)) for v in values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cameras(path: PathLike) -> Dict[str, Camera]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Camera file not found: {path}")
    cameras: Dict[str, Camera] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, *rest = line.split()
        if len(rest) != 17:
            raise FormatError(f"Camera line for '{name}' in {path} has {len(rest)} values, expected 17")
        v = list(map(float, rest))
        extrinsic = RigidPose(np.array(v[5:14]).reshape(3, 3), np.array(v[14:17]), 1.0)
        cameras[name] = Camera(v[0], (v[1], v[2]), extrinsic, (int(v[3]), int(v[4])))
    return cameras


def write_landmarks(landmarks: Dict[str, List[Tuple[int, float, float]]], path: PathLike) -> None:
    lines = [f"{view} {idx} {x!r} {y!r}" for view, items in landmarks.items() for idx, x, y in items]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_landmarks(path: PathLike) -> Dict[str, List[Tuple[int, float, float]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Landmark file not found: {path}")
    out: Dict[str, List[Tuple[int, float, float]]] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        try:
            view, idx, x, y = line.split()
            out.setdefault(view, []).append((int(idx), float(x), float(y)))
        except ValueError as e:
            raise FormatError(f"Malformed landmark line '{line}' in {path}") from e
    return out


def write_lighting(coeffs: np.ndarray, ambient: np.ndarray, path: PathLike) -> None:
    lines = ["ambient " + _fmt(ambient)]
    lines += ["sh " + _fmt(row) for row in np.asarray(coeffs).reshape(3, 9)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_lighting(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Lighting file not found: {path}")
    ambient, rows = None, []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("ambient"):
            ambient = np.array(line.split()[1:], dtype=np.float64)
        elif line.startswith("sh"):
            rows.append(np.array(line.split()[1:], dtype=np.float64))
    if ambient is None or len(rows) != 3 or any(len(r) != 9 for r in rows) or len(ambient) != 3:
        raise FormatError(f"Malformed lighting file {path}")
    return np.stack(rows), ambient
