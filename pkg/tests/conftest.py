import numpy as np
import pytest
import scipy.fft
import scipy.sparse as sp

from speckgeist.sindex import accumulate_frames, build_index, build_phase_map
from speckgeist.sobjective import ObjEval


@pytest.fixture
def rng():
    return np.random.default_rng(20240707)


@pytest.fixture(scope="session")
def small_index():
    return build_index(build_phase_map(16, 5.0), 3.0)


@pytest.fixture(scope="session")
def toy_image():
    rng = np.random.default_rng(7)
    return rng.uniform(0.5, 1.5, (16, 16))


@pytest.fixture(scope="session")
def noiseless_data(small_index, toy_image):
    """Bispectrum data of a single noiseless frame of toy_image."""
    return accumulate_frames([toy_image], small_index)


@pytest.fixture(scope="session")
def true_phase(small_index, toy_image):
    return np.angle(small_index.map.sample(scipy.fft.fft2(toy_image)))


class Quadratic(object):
    """E(y) = 1/2 (y - c)^T H (y - c) for a sparse SPD H."""

    def __init__(self, H, c, factorable=True):
        self.H = sp.csr_matrix(H)
        self.c = np.asarray(c, dtype=float)
        self.size = len(self.c)
        if factorable:
            self.normal_matrix = self.H

    def value(self, y):
        d = y - self.c
        return 0.5 * float(d @ (self.H @ d))

    def evaluate(self, y):
        d = y - self.c
        g = self.H @ d
        return ObjEval(0.5 * float(d @ g), g, lambda v: self.H @ v)

    def minimizer(self):
        return self.c.copy()


@pytest.fixture
def quadratic_factory():
    return Quadratic


def tridiagonal(n, diag=4.0, off=-1.0):
    return sp.diags([off * np.ones(n - 1), diag * np.ones(n), off * np.ones(n - 1)], [-1, 0, 1]).tocsr()


@pytest.fixture
def tridiag():
    return tridiagonal
