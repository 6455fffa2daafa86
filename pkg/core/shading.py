"""
Shading model: ambient + SH diffuse + single-lobe Blinn-Phong specular.

    I_total(p) = I_a + (C_d + δ_Cd)(p) · Σ_k l_k φ_k(n(p)) + L(p) · C_s(p) · max(0, n·h)^m

Real spherical harmonics of bands 0..2 are used without the Condon-Shortley
phase, in the order (Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22):

    Y00  = 1/(2√π)                 Y2-2 = ½√(15/π) xy
    Y1-1 = √(3/4π) y               Y2-1 = ½√(15/π) yz
    Y10  = √(3/4π) z               Y20  = ¼√(5/π) (3z² − 1)
    Y11  = √(3/4π) x               Y21  = ½√(15/π) xz
                                   Y22  = ¼√(15/π) (x² − y²)

Every function broadcasts over leading array dimensions, so the same code
shades a single point, a pixel buffer or a list of texels.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.exceptions import DimensionError, ParameterError
from core.geometry import normalize
from core.raster import uv_sample

logger = logging.getLogger(__name__)

SH_COUNT = 9
_K0 = 0.5 * np.sqrt(1.0 / np.pi)
_K1 = np.sqrt(3.0 / (4.0 * np.pi))
_K2 = 0.5 * np.sqrt(15.0 / np.pi)
_K3 = 0.25 * np.sqrt(5.0 / np.pi)
_K4 = 0.25 * np.sqrt(15.0 / np.pi)

# Clamped-cosine convolution weights per band (irradiance of a distant light).
_COSINE_LOBE = np.array([np.pi] + [2.0 * np.pi / 3.0] * 3 + [np.pi / 4.0] * 5)

# Rec. 709 luma weights used to pick the dominant direction from RGB lighting.
LUMINANCE = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class SHLighting:
    """Nine SH coefficients per colour channel plus a per-channel ambient term."""
    coeffs: np.ndarray   # (3, 9)
    ambient: np.ndarray  # (3,)

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=np.float64)
        ambient = np.array(self.ambient, dtype=np.float64).reshape(-1)
        if coeffs.shape != (3, SH_COUNT):
            raise DimensionError(f"SH coefficients must have shape (3, 9), got {coeffs.shape}")
        if ambient.shape == (1,):
            ambient = np.repeat(ambient, 3)
        if ambient.shape != (3,):
            raise DimensionError(f"Ambient must hold 3 channels, got {ambient.shape}")
        if np.any(ambient < 0):
            raise ParameterError("Ambient must be non-negative")
        coeffs.setflags(write=False)
        ambient.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "ambient", ambient)

    @classmethod
    def zeros(cls) -> "SHLighting":
        return cls(np.zeros((3, SH_COUNT)), np.zeros(3))

    def to_vector(self) -> np.ndarray:
        """Flat (30,) layout: 27 coefficients channel-major, then 3 ambient values."""
        return np.concatenate([self.coeffs.ravel(), self.ambient])

    @classmethod
    def from_vector(cls, vec: np.ndarray, clamp_ambient: bool = True) -> "SHLighting":
        vec = np.asarray(vec, dtype=np.float64)
        ambient = np.maximum(vec[27:30], 0.0) if clamp_ambient else vec[27:30]
        return cls(vec[:27].reshape(3, SH_COUNT), ambient)


@dataclass(frozen=True)
class DominantLight:
    """Single distant light distilled from SH lighting; drives the specular lobe."""
    direction: np.ndarray      # (3,) unit
    intensity_map: np.ndarray  # (R, R, 3) non-negative, UV space

    def __post_init__(self):
        direction = np.array(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
            raise ParameterError("Dominant light direction must be unit length")
        intensity = np.array(self.intensity_map, dtype=np.float64)
        if intensity.ndim == 2:
            intensity = np.repeat(intensity[..., None], 3, axis=2)
        if np.any(intensity < 0) or not np.all(np.isfinite(intensity)):
            raise ParameterError("Dominant light intensity must be finite and non-negative")
        direction.setflags(write=False)
        intensity.setflags(write=False)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "intensity_map", intensity)

    @classmethod
    def dark(cls, resolution: int) -> "DominantLight":
        return cls(np.array([0.0, 0.0, 1.0]), np.zeros((resolution, resolution, 3)))

    def intensity_at(self, uv: np.ndarray) -> np.ndarray:
        return uv_sample(self.intensity_map, uv)


# --- SH basis ---

def sh_basis(n: np.ndarray) -> np.ndarray:
    """(..., 9) real SH basis values; inputs are normalized first."""
    n = normalize(np.asarray(n, dtype=np.float64))
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, _K0),
        _K1 * y,
        _K1 * z,
        _K1 * x,
        _K2 * x * y,
        _K2 * y * z,
        _K3 * (3.0 * z * z - 1.0),
        _K2 * x * z,
        _K4 * (x * x - y * y),
    ], axis=-1)


def sh_gradient(n: np.ndarray) -> np.ndarray:
    """(..., 9, 3) partials of the basis polynomials w.r.t. the Cartesian components of a unit n."""
    n = np.asarray(n, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero = np.zeros_like(x)
    rows = [
        (zero, zero, zero),
        (zero, _K1 + zero, zero),
        (zero, zero, _K1 + zero),
        (_K1 + zero, zero, zero),
        (_K2 * y, _K2 * x, zero),
        (zero, _K2 * z, _K2 * y),
        (zero, zero, 6.0 * _K3 * z),
        (_K2 * z, zero, _K2 * x),
        (2.0 * _K4 * x, -2.0 * _K4 * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def irradiance(light: SHLighting, n: np.ndarray) -> np.ndarray:
    """(..., 3) SH irradiance Σ_k l_k φ_k(n) per channel."""
    return sh_basis(n) @ light.coeffs.T


def directional_light_sh(direction: np.ndarray, color: np.ndarray) -> np.ndarray:
    """(3, 9) SH irradiance coefficients of a distant directional light of the given RGB color."""
    basis = sh_basis(np.asarray(direction, dtype=np.float64))
    return np.outer(np.asarray(color, dtype=np.float64), _COSINE_LOBE * basis)


def fibonacci_sphere(n_samples: int) -> np.ndarray:
    """(N, 3) near-uniform unit vectors."""
    i = np.arange(n_samples) + 0.5
    z = 1.0 - 2.0 * i / n_samples
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def rotate_sh(coeffs: np.ndarray, rotation: np.ndarray, n_samples: int = 512) -> np.ndarray:
    """
    Coefficients of the lighting rotated by `rotation`: f'(ω) = f(Rᵀω).

    Bands 0..2 are closed under rotation, so a least-squares re-projection on
    sample directions recovers the rotated coefficients to roundoff.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    dirs = fibonacci_sphere(n_samples)
    basis = sh_basis(dirs)
    values = sh_basis(dirs @ np.asarray(rotation)) @ coeffs.T  # row ω · R equals Rᵀω
    solved, *_ = np.linalg.lstsq(basis, values, rcond=None)
    return solved.T


# --- Shading terms ---

def shade_ambient(light: SHLighting, shape: tuple = ()) -> np.ndarray:
    return np.broadcast_to(light.ambient, tuple(shape) + (3,)).copy()


def shade_diffuse(C_d: np.ndarray, n: np.ndarray, light: SHLighting) -> np.ndarray:
    """Albedo times SH irradiance per channel; not clamped."""
    return np.asarray(C_d, dtype=np.float64) * irradiance(light, n)


def half_vector(direction: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit bisector of light and view; zero where they cancel."""
    return normalize(np.asarray(direction, dtype=np.float64) + np.asarray(v, dtype=np.float64))


def specular_lobe(n: np.ndarray, v: np.ndarray, direction: np.ndarray, m: float) -> np.ndarray:
    """(...,) max(0, n·h)^m; exactly 0 where n·h ≤ 0 or L + v = 0."""
    h = half_vector(direction, v)
    ndoth = np.einsum("...i,...i->...", np.asarray(n, dtype=np.float64), h)
    return np.where(ndoth > 0, np.maximum(ndoth, 0.0) ** m, 0.0)


def shade_specular(
    C_s: np.ndarray,
    n: np.ndarray,
    v: np.ndarray,
    dom: DominantLight,
    uv: Optional[np.ndarray] = None,
    m: float = 5.0,
    intensity: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Blinn-Phong specular L(p)·C_s·(n·h)^m, colored by the light.

    L(p) is looked up in the dominant light's intensity map at `uv`, or taken
    from `intensity` when the caller already holds per-texel values.
    """
    if m <= 0:
        raise ParameterError(f"Shininess must be positive, got {m}")
    if intensity is None:
        if uv is None:
            raise ParameterError("shade_specular needs either uv or intensity")
        intensity = dom.intensity_at(uv)
    lobe = specular_lobe(n, v, dom.direction, m)
    return np.asarray(intensity) * (np.asarray(C_s, dtype=np.float64) * lobe)[..., None]


def shade_total(
    C_d: np.ndarray,
    delta_Cd: np.ndarray,
    C_s: np.ndarray,
    n: np.ndarray,
    v: np.ndarray,
    light: SHLighting,
    dom: DominantLight,
    m: float = 5.0,
    uv: Optional[np.ndarray] = None,
    intensity: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Ambient + diffuse of the displaced albedo + specular; clamping is left to image assembly."""
    C_d = np.asarray(C_d, dtype=np.float64) + np.asarray(delta_Cd, dtype=np.float64)
    diffuse = shade_diffuse(C_d, n, light)
    specular = shade_specular(C_s, n, v, dom, uv=uv, m=m, intensity=intensity)
    return light.ambient + diffuse + specular


# --- Dominant light ---

def dominant_direction(light: SHLighting) -> Optional[np.ndarray]:
    """Optimal linear direction from the band-1 luminance coefficients; None when they vanish."""
    lum = LUMINANCE @ light.coeffs
    d = np.array([lum[3], lum[1], lum[2]])
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        return None
    return d / norm


def dominant_intensity(light: SHLighting, direction: np.ndarray, n: np.ndarray, epsilon: float = 0.1) -> np.ndarray:
    """(..., 3) max(0, E(n)) / max(epsilon, d · n) per channel."""
    n = np.asarray(n, dtype=np.float64)
    num = np.maximum(irradiance(light, n), 0.0)
    den = np.maximum(epsilon, n @ np.asarray(direction))
    return num / den[..., None]


def extract_dominant_light(
    light: SHLighting,
    normal_map: np.ndarray,
    epsilon: float = 0.1,
) -> DominantLight:
    """
    Dominant direction plus a per-texel intensity map.

    intensity(p) = max(0, E(n(p))) / max(epsilon, d · n(p)) per channel, where E
    is the full SH irradiance. Texels without a valid normal get zero
    intensity. Lighting without a linear band yields a dark light.
    """
    normal_map = np.asarray(normal_map, dtype=np.float64)
    resolution = normal_map.shape[0]
    direction = dominant_direction(light)
    if direction is None:
        logger.debug("SH lighting has no linear band; specular term disabled.")
        return DominantLight.dark(resolution)
    valid = np.all(np.isfinite(normal_map), axis=-1)
    valid &= np.linalg.norm(np.where(valid[..., None], normal_map, 0.0), axis=-1) > 0.5
    intensity = np.zeros(normal_map.shape[:2] + (3,))
    intensity[valid] = dominant_intensity(light, direction, normal_map[valid], epsilon)
    return DominantLight(direction, intensity)


# --- Derivatives ---

@dataclass
class ShadingGradients:
    """Partials of shade_total per output channel c."""
    d_delta: np.ndarray     # (..., 3) ∂out_c/∂δ_c
    d_specular: np.ndarray  # (..., 3) ∂out_c/∂C_s
    d_coeffs: np.ndarray    # (..., 3, 9) ∂out_c/∂l_{c,k}
    d_ambient: np.ndarray   # (..., 3) ∂out_c/∂I_a,c
    d_normal: np.ndarray    # (..., 3, 3) ∂out_c/∂n_j, light intensity held fixed
    d_spherical: Optional[np.ndarray] = None  # (..., 3, 2) ∂out_c/∂(θ, φ)


def shading_gradients(
    C_d: np.ndarray,
    delta_Cd: np.ndarray,
    C_s: np.ndarray,
    n: np.ndarray,
    v: np.ndarray,
    light: SHLighting,
    dom: DominantLight,
    m: float = 5.0,
    uv: Optional[np.ndarray] = None,
    intensity: Optional[np.ndarray] = None,
    normal_jacobian: Optional[np.ndarray] = None,
) -> ShadingGradients:
    """
    Analytic partials of `shade_total`.

    `normal_jacobian` (..., 3, 2) is ∂n/∂(θ, φ) of the caller's spherical
    parametrization; when given, the spherical partials are filled in. At the
    n·h = 0 kink the specular contribution to every partial is 0.
    """
    n = np.asarray(n, dtype=np.float64)
    if intensity is None:
        intensity = dom.intensity_at(uv)
    albedo = np.asarray(C_d, dtype=np.float64) + np.asarray(delta_Cd, dtype=np.float64)
    C_s = np.asarray(C_s, dtype=np.float64)
    basis = sh_basis(n)

    h = half_vector(dom.direction, v)
    ndoth = np.einsum("...i,...i->...", n, h)
    pos = ndoth > 0
    lobe = np.where(pos, np.maximum(ndoth, 0.0) ** m, 0.0)
    dlobe = np.where(pos, m * np.maximum(ndoth, 0.0) ** (m - 1.0), 0.0)

    d_delta = basis @ light.coeffs.T
    d_specular = intensity * lobe[..., None]
    d_coeffs = albedo[..., :, None] * basis[..., None, :]
    d_ambient = np.ones_like(d_delta)

    # ∂E_c/∂n = Σ_k l_ck ∇φ_k
    grad_e = np.einsum("ck,...kj->...cj", light.coeffs, sh_gradient(n))
    d_normal = albedo[..., None] * grad_e
    d_normal = d_normal + (intensity * (C_s * dlobe)[..., None])[..., None] * h[..., None, :]

    d_spherical = None
    if normal_jacobian is not None:
        d_spherical = np.einsum("...cj,...ja->...ca", d_normal, normal_jacobian)
    return ShadingGradients(d_delta, d_specular, d_coeffs, d_ambient, d_normal, d_spherical)
