import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinodoid.generation import (
    SpinodoidClass,
    SpinodoidDescriptor,
    angular_mask,
    binarize,
    build_target_spectrum,
    coverage_fraction,
    generate,
    reconstruct_phase_field,
    ring_amplitude,
    sample_white_noise,
    spectral_filter,
)

ISO, MONO, ORTHO = SpinodoidClass


def naive_dft2(a, sign):
    """O(N^2) double sum; sign=-1 forward, +1 inverse (unnormalized)."""
    ny, nx = a.shape
    y = np.arange(ny)
    x = np.arange(nx)
    Wy = np.exp(sign * 2j * np.pi * np.outer(y, y) / ny)
    Wx = np.exp(sign * 2j * np.pi * np.outer(x, x) / nx)
    out = np.zeros((ny, nx), dtype=complex)
    for u in range(ny):
        for v in range(nx):
            out[u, v] = np.sum(a * Wy[u][:, None] * Wx[v][None, :])
    return out


def radial_power(field, bands):
    F = np.abs(np.fft.fft2(field - field.mean())) ** 2
    ny, nx = field.shape
    fx = np.fft.fftfreq(nx, 1 / nx)
    fy = np.fft.fftfreq(ny, 1 / ny)
    r = np.hypot(*np.meshgrid(fx, fy))
    return np.array([F[(r >= lo) & (r < hi)].mean() for lo, hi in bands])


# -- spectrum ---------------------------------------------------------------


def test_isotropic_ring_covers_every_angle():
    amp = build_target_spectrum(SpinodoidDescriptor(ISO, 0.5, 10), 128, 128)
    assert coverage_fraction(amp, 10) == 1.0
    fx = np.fft.fftfreq(128, 1 / 128)
    r = np.hypot(*np.meshgrid(fx, fx))
    assert np.all(amp[np.abs(r - 10) > 3.0] == 0)


@pytest.mark.parametrize("gamma", [0.0, 0.4, 2.9])
def test_zero_monoclinic_index_removes_nothing(gamma):
    iso = build_target_spectrum(SpinodoidDescriptor(ISO, 0.5, 12), 64, 64)
    mono = build_target_spectrum(SpinodoidDescriptor(MONO, 0.5, 12, gamma=gamma, alpha_mon=0.0), 64, 64)
    np.testing.assert_array_equal(iso, mono)


def test_orthotropic_sectors_at_quarter_turn_tile_the_ring():
    a = math.sqrt(2) / 2
    for gamma in (0.0, 0.3, 1.2):
        desc = SpinodoidDescriptor(ORTHO, 0.5, 15, gamma=gamma, alpha1_ort=a, alpha2_ort=a)
        amp = build_target_spectrum(desc, 100, 100)
        assert coverage_fraction(amp, 15) == pytest.approx(1.0, abs=1e-12)


def test_monoclinic_sector_is_measured_from_vertical():
    desc = SpinodoidDescriptor(MONO, 0.5, 20, gamma=0.0, alpha_mon=0.5)
    mask = angular_mask(desc, 100, 100)
    fx = np.fft.fftfreq(100, 1 / 100)
    FX, FY = np.meshgrid(fx, fx)
    # wave vectors along y are removed, along x kept
    assert not mask[(FX == 0) & (FY == 20)].any()
    assert mask[(FX == 20) & (FY == 0)].all()


def test_removed_fraction_follows_monoclinic_index():
    for alpha in (0.3, 0.6, 0.9):
        desc = SpinodoidDescriptor(MONO, 0.5, 25, gamma=0.7, alpha_mon=alpha)
        amp = build_target_spectrum(desc, 200, 200)
        removed = 1 - coverage_fraction(amp, 25)
        # sector pair of half-width asin(alpha) out of the full ring
        assert removed == pytest.approx(2 * math.asin(alpha) / math.pi, abs=0.03)


def test_k_at_nyquist_rejected():
    with pytest.raises(ValueError):
        build_target_spectrum(SpinodoidDescriptor(ISO, 0.5, 50), 100, 100)


def test_descriptor_validation():
    with pytest.raises(ValueError):
        SpinodoidDescriptor(ISO, 1.2, 10)
    with pytest.raises(ValueError):
        SpinodoidDescriptor(ISO, 0.5, -1)
    with pytest.raises(ValueError):
        SpinodoidDescriptor(MONO, 0.5, 10, gamma=4.0, alpha_mon=0.5)
    with pytest.raises(ValueError):
        SpinodoidDescriptor(ORTHO, 0.5, 10, alpha1_ort=0.8)


# -- noise ------------------------------------------------------------------


def test_noise_is_seeded():
    a = sample_white_noise(3, 64, 64)
    np.testing.assert_array_equal(a, sample_white_noise(3, 64, 64))
    b = sample_white_noise(4, 64, 64)
    assert np.mean(a != b) > 0.99


def test_noise_spectrum_is_flat():
    field = sample_white_noise(11, 256, 256)
    bands = [(lo, lo + 16) for lo in range(1, 120, 16)]
    p = radial_power(field, bands)
    assert np.all(np.abs(p / p.mean() - 1) < 0.2)


# -- filtering ----------------------------------------------------------------


def test_filter_of_zero_noise_is_zero():
    amp = ring_amplitude(3, 16, 16)
    assert not np.any(spectral_filter(amp, np.zeros((16, 16))))


def test_filter_matches_brute_force_dft():
    rng = np.random.default_rng(0)
    noise = rng.random((8, 8))
    amp = rng.random((8, 8))
    expected = naive_dft2(amp * naive_dft2(noise, -1), +1) / 64
    got = spectral_filter(amp, noise)
    assert np.max(np.abs(got - expected)) <= 1e-10 * np.max(np.abs(expected))


def test_ensemble_spectra_agree_between_seeds():
    desc = SpinodoidDescriptor(ISO, 0.5, 20)
    bands = [(18, 20), (20, 22)]
    p1 = radial_power(reconstruct_phase_field(desc, sample_white_noise(1, 256, 256)), bands)
    p2 = radial_power(reconstruct_phase_field(desc, sample_white_noise(2, 256, 256)), bands)
    assert np.all(np.abs(p1 / p2 - 1) < 0.15)


def test_phase_field_energy_sits_in_the_ring():
    desc = SpinodoidDescriptor(MONO, 0.6, 18, gamma=1.0, alpha_mon=0.7)
    phi = reconstruct_phase_field(desc, sample_white_noise(5, 100, 100))
    P = np.abs(np.fft.fft2(phi)) ** 2
    P[0, 0] = 0
    band = build_target_spectrum(desc, 100, 100) > 0
    assert P[band].sum() / P.sum() > 0.9


def test_phase_field_minimum_is_zero():
    phi = reconstruct_phase_field(SpinodoidDescriptor(ISO, 0.5, 10), sample_white_noise(0, 50, 50))
    assert phi.min() == 0.0


# -- binarization -------------------------------------------------------------


def test_constant_field_fills_lowest_indices_first():
    bits, _ = binarize(np.ones((4, 5)), 0.5)
    flat = bits.ravel()
    assert flat.sum() == 10
    assert flat[:10].all() and not flat[10:].any()


def test_ramp_keeps_smallest_values():
    ramp = np.arange(100.0).reshape(10, 10)
    bits, cut = binarize(ramp, 0.3)
    assert bits.sum() == 30
    assert np.all(bits.ravel()[:30] == 1)
    assert cut == 29.0


def test_volume_fraction_exact_on_random_field():
    field = np.random.default_rng(2).random((100, 100))
    bits, _ = binarize(field, 0.7)
    assert abs(bits.mean() - 0.7) <= 1e-4


def test_solid_is_at_or_below_cut():
    field = np.random.default_rng(3).normal(size=(30, 30))
    bits, cut = binarize(field, 0.4)
    assert np.all(field[bits == 1] <= cut)
    assert np.all(field[bits == 0] > cut)


def test_generate_is_deterministic():
    desc = SpinodoidDescriptor(ORTHO, 0.45, 14, gamma=0.5, alpha1_ort=0.8, alpha2_ort=0.75)
    a = generate(desc, 9, 64)
    b = generate(desc, 9, 64)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@settings(max_examples=25, deadline=None)
@given(rho=st.floats(0.0, 1.0), seed=st.integers(0, 2**31))
def test_binarize_count_property(rho, seed):
    field = np.random.default_rng(seed).random((20, 20))
    bits, _ = binarize(field, rho)
    assert bits.sum() == math.floor(rho * 400 + 1e-9)


@settings(max_examples=15, deadline=None)
@given(
    k=st.floats(5, 30),
    gamma=st.floats(0, math.pi),
    alpha=st.floats(0, 1),
)
def test_monoclinic_spectrum_is_symmetric(k, gamma, alpha):
    # Hermitian symmetry keeps the filtered field real
    amp = build_target_spectrum(SpinodoidDescriptor(MONO, 0.5, k, gamma=gamma, alpha_mon=alpha), 64, 64)
    flipped = np.roll(amp[::-1, ::-1], 1, axis=(0, 1))
    np.testing.assert_array_equal(amp, flipped)
