import numpy as np
import pytest
import scipy.fft

from speckgeist.sindex import accumulate_frames
from speckgeist.sinit import project_energy_preserving, recursive_phase, synthesize_image
from speckgeist.sobjective import phase_of_object
from speckgeist.sutils import InvalidArgument, wrap_phase


def test_point_source_recursion_is_zero(small_index):
    delta = np.zeros((16, 16))
    delta[0, 0] = 1.0
    data = accumulate_frames([delta], small_index)
    np.testing.assert_array_equal(recursive_phase(data, small_index), 0.0)


def test_recursion_reproduces_true_phase(small_index, noiseless_data, true_phase):
    phi = recursive_phase(noiseless_data, small_index, seed_phase=true_phase)
    np.testing.assert_allclose(wrap_phase(phi - true_phase), 0.0, atol=1e-8)


def test_recursion_from_zero_seeds_is_consistent(small_index, noiseless_data):
    # zero seeds pick another linear phase ramp, which the triplets cannot see
    phi = recursive_phase(noiseless_data, small_index)
    residual = wrap_phase(small_index.A @ phi - noiseless_data.beta)
    np.testing.assert_allclose(residual, 0.0, atol=1e-8)


def test_synthesize_flat_modulus_gives_delta(small_index):
    image = synthesize_image(np.zeros(small_index.n), np.ones(256), small_index.map)
    expected = np.zeros(256)
    expected[0] = 1.0
    np.testing.assert_allclose(image, expected, atol=1e-12)


def test_synthesize_round_trip_of_band_limited_image(small_index, rng):
    spectrum = scipy.fft.fft2(rng.uniform(0, 1, (16, 16))) * small_index.map.disc_mask()
    o = np.real(scipy.fft.ifft2(spectrum))
    phi = phase_of_object(o, small_index.map)
    modulus = np.abs(scipy.fft.fft2(o)).reshape(-1)
    image, residue = synthesize_image(phi, modulus, small_index.map, return_residue=True)
    np.testing.assert_allclose(image, o.reshape(-1), atol=1e-8)
    assert residue < 1e-10 * np.linalg.norm(o)


def test_projection_examples():
    np.testing.assert_allclose(project_energy_preserving(np.array([3.0, -1.0]), 0.0), [2.0, 0.0])
    o = np.array([0.5, 1.0, 2.0])
    np.testing.assert_array_equal(project_energy_preserving(o, 0.0), o)
    with pytest.raises(InvalidArgument):
        project_energy_preserving(np.array([1.0, -2.0]))


def _bisection_projection(o):
    lo, hi = o.min() - 1.0, o.max()
    for _ in range(200):
        tau = 0.5 * (lo + hi)
        if np.maximum(o - tau, 0).sum() > o.sum():
            lo = tau
        else:
            hi = tau
    return np.maximum(o - 0.5 * (lo + hi), 0)


def test_projection_matches_bisection(rng):
    for _ in range(10):
        o = rng.standard_normal(50) + 0.3
        if o.sum() <= 0:
            continue
        eps = 1e-4
        out = project_energy_preserving(o, eps)
        np.testing.assert_allclose(out - eps, _bisection_projection(o), atol=1e-9)
        assert out.sum() == pytest.approx(o.sum() + eps * o.size)
        assert out.min() == pytest.approx(eps)
