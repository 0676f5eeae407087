"""Spectral reconstruction of 2D spinodoid phase fields.

A target amplitude spectrum (a ring of radius ``k`` in the discrete frequency
plane, optionally with angular sectors removed or retained) filters a white
noise image; the filtered field is then cut at a quantile to produce a binary
microstructure with an exact volume fraction.

Array convention: fields are ``(ny, nx)`` arrays, row index = y, column
index = x. Frequencies are measured in wave cycles per domain edge. The
rotation angle ``gamma`` is measured counterclockwise from the vertical (+y)
axis, so ``gamma = pi/2`` points along -x (the same axis as +x).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "SpinodoidClass",
    "SpinodoidDescriptor",
    "frequency_grid",
    "ring_amplitude",
    "angular_mask",
    "build_target_spectrum",
    "coverage_fraction",
    "sample_white_noise",
    "spectral_filter",
    "reconstruct_phase_field",
    "binarize",
    "generate",
]

SQRT2_2 = math.sqrt(2.0) / 2.0
DEFAULT_SIGMA_R = 1.0
# half-width of the radial support, in units of sigma_r
SUPPORT_WIDTH = 3.0
_ANGLE_TOL = 1e-12


class SpinodoidClass(str, enum.Enum):
    ISOTROPIC = "isotropic"
    MONOCLINIC = "monoclinic"
    ORTHOTROPIC = "orthotropic"

    @property
    def index(self) -> int:
        return list(SpinodoidClass).index(self)


@dataclass(frozen=True)
class SpinodoidDescriptor:
    """Geometric descriptors of one spinodoid microstructure.

    ``gamma`` is ignored for the isotropic class and the anisotropy indices
    are only read for the class they belong to. ``k`` must be positive; the
    design range 10..30 is enforced where designs are sampled, not here, so
    that small grids remain usable.
    """

    kind: SpinodoidClass
    rho_m: float
    k: float
    gamma: float = 0.0
    alpha_mon: float | None = None
    alpha1_ort: float | None = None
    alpha2_ort: float | None = None
    normalized: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", SpinodoidClass(self.kind))
        if not 0.0 <= self.rho_m <= 1.0:
            raise ValueError(f"rho_m={self.rho_m} outside [0, 1]")
        if not (math.isfinite(self.k) and self.k > 0):
            raise ValueError(f"k={self.k} must be positive")
        if self.kind is SpinodoidClass.ISOTROPIC:
            return
        if not 0.0 <= self.gamma <= math.pi:
            raise ValueError(f"gamma={self.gamma} outside [0, pi]")
        if self.kind is SpinodoidClass.MONOCLINIC:
            if self.alpha_mon is None or not 0.0 <= self.alpha_mon <= 1.0:
                raise ValueError(f"alpha_mon={self.alpha_mon} outside [0, 1]")
        else:
            for name in ("alpha1_ort", "alpha2_ort"):
                a = getattr(self, name)
                if a is None or not 0.0 <= a <= 1.0:
                    raise ValueError(f"{name}={a} outside [0, 1]")

    def with_gamma(self, gamma: float) -> "SpinodoidDescriptor":
        return replace(self, gamma=gamma)


def frequency_grid(nx: int, ny: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer frequencies (cycles per domain edge) in FFT order, shape (ny, nx)."""
    fx = np.fft.fftfreq(nx, d=1.0 / nx)
    fy = np.fft.fftfreq(ny, d=1.0 / ny)
    return np.meshgrid(fx, fy)


def _axial_distance(theta: np.ndarray, direction: float) -> np.ndarray:
    """Angle between lines (period pi), in [0, pi/2]."""
    d = np.mod(theta - direction + 0.5 * np.pi, np.pi) - 0.5 * np.pi
    return np.abs(d)


def ring_amplitude(k: float, nx: int, ny: int, sigma_r: float = DEFAULT_SIGMA_R) -> np.ndarray:
    """Gaussian ring of radius ``k`` truncated to ``|r - k| <= 3 sigma_r``.

    The zero-frequency bin and the Nyquist row/column are zero so that the
    amplitude stays exactly Hermitian on even grids.
    """
    fx, fy = frequency_grid(nx, ny)
    r = np.hypot(fx, fy)
    amp = np.exp(-((r - k) ** 2) / (2.0 * sigma_r**2))
    amp[np.abs(r - k) > SUPPORT_WIDTH * sigma_r] = 0.0
    amp[0, 0] = 0.0
    if nx % 2 == 0:
        amp[:, nx // 2] = 0.0
    if ny % 2 == 0:
        amp[ny // 2, :] = 0.0
    return amp


def angular_mask(desc: SpinodoidDescriptor, nx: int, ny: int) -> np.ndarray:
    """Boolean retention mask over the frequency grid for the descriptor's class.

    Monoclinic removes the antipodal sector pair of half-width
    ``arcsin(alpha_mon)`` centred on the axis at ``gamma`` from vertical.
    Orthotropic keeps the sector pairs of half-width ``arccos(alpha_i)``
    centred on that axis (``alpha1``) and on its perpendicular (``alpha2``).
    """
    fx, fy = frequency_grid(nx, ny)
    if desc.kind is SpinodoidClass.ISOTROPIC:
        return np.ones(fx.shape, dtype=bool)
    theta = np.arctan2(fy, fx)
    axis = desc.gamma + 0.5 * np.pi
    if desc.kind is SpinodoidClass.MONOCLINIC:
        half = math.asin(desc.alpha_mon)
        return ~(_axial_distance(theta, axis) < half - _ANGLE_TOL)
    half1 = math.acos(desc.alpha1_ort)
    half2 = math.acos(desc.alpha2_ort)
    keep1 = _axial_distance(theta, axis) <= half1 + _ANGLE_TOL
    keep2 = _axial_distance(theta, axis + 0.5 * np.pi) <= half2 + _ANGLE_TOL
    return keep1 | keep2


def build_target_spectrum(
    desc: SpinodoidDescriptor, nx: int, ny: int, sigma_r: float = DEFAULT_SIGMA_R
) -> np.ndarray:
    """Target amplitude ``|F[phi_T]|`` on the (ny, nx) FFT grid."""
    if nx % 2 or ny % 2:
        raise ValueError(f"grid {nx}x{ny} must have even dimensions")
    if desc.k >= min(nx, ny) / 2:
        raise ValueError(f"k={desc.k} at or above Nyquist for a {nx}x{ny} grid")
    return ring_amplitude(desc.k, nx, ny, sigma_r) * angular_mask(desc, nx, ny)


def coverage_fraction(amplitude: np.ndarray, k: float, sigma_r: float = DEFAULT_SIGMA_R) -> float:
    """Fraction of the ring's support bins that carry nonzero amplitude."""
    ny, nx = amplitude.shape
    support = ring_amplitude(k, nx, ny, sigma_r) > 0
    return float(np.count_nonzero(amplitude[support] > 0) / np.count_nonzero(support))


def sample_white_noise(seed: int, nx: int, ny: int) -> np.ndarray:
    """I.i.d. uniform [0, 1) noise image, deterministic in ``seed``."""
    return np.random.default_rng(seed).random((ny, nx))


def spectral_filter(amplitude: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Complex field ``F^-1[amplitude * F[noise]]``."""
    if amplitude.shape != noise.shape:
        raise ValueError(f"shape mismatch: spectrum {amplitude.shape} vs noise {noise.shape}")
    return np.fft.ifft2(amplitude * np.fft.fft2(noise))


def reconstruct_phase_field(
    desc: SpinodoidDescriptor, noise: np.ndarray, sigma_r: float = DEFAULT_SIGMA_R
) -> np.ndarray:
    """Filter ``noise`` with the descriptor's target spectrum.

    Returns the real part of the filtered field shifted so its minimum is
    zero. The shift only moves the zero-frequency bin, so the non-DC spectrum
    stays inside the target ring and the binarization (a quantile cut) is
    unaffected.
    """
    noise = np.asarray(noise, dtype=float)
    if noise.ndim != 2:
        raise ValueError("noise must be a 2D field")
    ny, nx = noise.shape
    amp = build_target_spectrum(desc, nx, ny, sigma_r)
    phi = spectral_filter(amp, noise).real
    return phi - phi.min()


def binarize(phase: np.ndarray, rho_m: float) -> tuple[np.ndarray, float]:
    """Cut ``phase`` so that exactly ``floor(rho_m * N)`` pixels are solid.

    Solid (1) where the phase is at or below the cut. Ties at the cut are
    resolved by row-major pixel index, lowest first.
    """
    if not 0.0 <= rho_m <= 1.0:
        raise ValueError(f"rho_m={rho_m} outside [0, 1]")
    flat = np.asarray(phase, dtype=float).ravel()
    n = flat.size
    count = min(n, int(math.floor(rho_m * n + 1e-9)))
    order = np.argsort(flat, kind="stable")
    bits = np.zeros(n, dtype=np.uint8)
    bits[order[:count]] = 1
    if count > 0:
        cut = float(flat[order[count - 1]])
    else:
        cut = float(np.nextafter(flat[order[0]], -np.inf))
    return bits.reshape(np.shape(phase)), cut


def generate(
    desc: SpinodoidDescriptor, seed: int, resolution: int = 100, sigma_r: float = DEFAULT_SIGMA_R
) -> tuple[np.ndarray, np.ndarray]:
    """Noise -> phase field -> binary image for one descriptor. Returns (phase, bits)."""
    noise = sample_white_noise(seed, resolution, resolution)
    phase = reconstruct_phase_field(desc, noise, sigma_r)
    bits, _ = binarize(phase, desc.rho_m)
    return phase, bits
