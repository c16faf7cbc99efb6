# sindex.py - frequency triplet index, phase index map and the sparse operator A
#
# Frequencies are integer offsets (i, j) from D.C.; (i, j) lives at grid
# position (i mod N, j mod N) of an unshifted N x N FFT. Unknown phases are
# kept for the half plane i > 0 or (i == 0 and j > 0); the other half is
# reached through phi(-i, -j) = -phi(i, j).

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft
import scipy.sparse as sp

from .sutils import InvalidArgument, wrap_phase

logger = logging.getLogger(__name__)

# Standard deviation guard and weight floor for the SNR weights.
WEIGHT_DELTA = 1e-8
WEIGHT_FLOOR = 1e-8


def disc_coords(radius):
    """All nonzero integer coordinates with i*i + j*j <= radius**2, raster order."""
    r = int(math.floor(radius))
    span = np.arange(-r, r + 1)
    ii, jj = np.meshgrid(span, span, indexing="ij")
    keep = (ii * ii + jj * jj <= radius * radius) & ((ii != 0) | (jj != 0))
    return np.stack([ii[keep], jj[keep]], axis=1)


def raster_key(coords, span):
    # lexicographic (i, j) as a single integer; span must exceed 2 * max |j|
    coords = np.asarray(coords)
    return coords[..., 0] * span + coords[..., 1]


@dataclass(frozen=True)
class PhaseIndexMap:
    image_side: int
    recovery_radius: float
    coords: np.ndarray
    index_grid: np.ndarray
    sign_grid: np.ndarray

    @property
    def n(self):
        return len(self.coords)

    @cached_property
    def flat_index(self):
        """Positions of the half-plane coordinates in a flattened N x N grid."""
        N = self.image_side
        return (self.coords[:, 0] % N) * N + (self.coords[:, 1] % N)

    @cached_property
    def conj_flat_index(self):
        N = self.image_side
        return (-self.coords[:, 0] % N) * N + (-self.coords[:, 1] % N)

    @cached_property
    def radii(self):
        return np.hypot(self.coords[:, 0], self.coords[:, 1])

    def coord_to_index(self, i, j):
        """Return (k, sign) for frequency (i, j), or None when it carries no unknown."""
        N = self.image_side
        if i * i + j * j > self.recovery_radius**2 or (i == 0 and j == 0):
            return None
        k = int(self.index_grid[i % N, j % N])
        if k < 0:
            return None
        return (k, int(self.sign_grid[i % N, j % N]))

    def sample(self, grid):
        """Values of an N x N grid at the unknown coordinates."""
        return np.asarray(grid).reshape(-1)[self.flat_index]

    def embed(self, phi):
        """Spread phi over an N x N grid using the conjugate symmetry; zero elsewhere."""
        N = self.image_side
        grid = np.zeros(N * N)
        grid[self.flat_index] = phi
        grid[self.conj_flat_index] = -np.asarray(phi)
        return grid.reshape(N, N)

    def disc_mask(self):
        """Boolean N x N mask of the recovery disc, D.C. included."""
        N = self.image_side
        mask = np.zeros(N * N, dtype=bool)
        mask[self.flat_index] = True
        mask[self.conj_flat_index] = True
        mask[0] = True
        return mask.reshape(N, N)


def build_phase_map(image_side, recovery_radius):
    if image_side <= 0:
        raise InvalidArgument("image side must be positive, found %s" % image_side)
    if not (0 < recovery_radius < image_side / 2.0):
        raise InvalidArgument(
            "recovery radius %s outside (0, %s)" % (recovery_radius, image_side / 2.0)
        )
    disc = disc_coords(recovery_radius)
    upper = (disc[:, 0] > 0) | ((disc[:, 0] == 0) & (disc[:, 1] > 0))
    coords = disc[upper]
    if len(coords) == 0:
        raise InvalidArgument(
            "recovery radius %s holds no phase unknowns" % recovery_radius
        )

    N = image_side
    index_grid = np.full((N, N), -1, dtype=np.int64)
    sign_grid = np.zeros((N, N), dtype=np.int8)
    k = np.arange(len(coords))
    index_grid[coords[:, 0] % N, coords[:, 1] % N] = k
    sign_grid[coords[:, 0] % N, coords[:, 1] % N] = 1
    index_grid[-coords[:, 0] % N, -coords[:, 1] % N] = k
    sign_grid[-coords[:, 0] % N, -coords[:, 1] % N] = -1
    index_grid.setflags(write=False)
    sign_grid.setflags(write=False)
    coords.setflags(write=False)
    return PhaseIndexMap(N, float(recovery_radius), coords, index_grid, sign_grid)


@dataclass(frozen=True)
class BispectrumIndex:
    """Triplets (u, v, u + v) and the operator A with (A phi)_r = phi(u) + phi(v) - phi(u + v)."""

    triplets: np.ndarray  # m x 2 x 2: triplets[r, 0] = u, triplets[r, 1] = v
    A: sp.csr_matrix
    map: PhaseIndexMap
    recovery_radius: float
    inner_radius: float

    @property
    def m(self):
        return len(self.triplets)

    @property
    def n(self):
        return self.map.n

    @cached_property
    def slots(self):
        """(k, sign) arrays of the u, v and u + v legs: ku, su, kv, sv, kw, sw."""
        N = self.map.image_side
        u = self.triplets[:, 0]
        v = self.triplets[:, 1]
        w = u + v
        out = []
        for leg in (u, v, w):
            k = self.map.index_grid[leg[:, 0] % N, leg[:, 1] % N]
            s = self.map.sign_grid[leg[:, 0] % N, leg[:, 1] % N].astype(float)
            out.extend([k, s])
        return tuple(out)

    @cached_property
    def grid_positions(self):
        """Flattened N x N positions of u, v and u + v."""
        N = self.map.image_side
        u = self.triplets[:, 0]
        v = self.triplets[:, 1]
        w = u + v
        return tuple((leg[:, 0] % N) * N + (leg[:, 1] % N) for leg in (u, v, w))

    def triplet_phase(self, phi):
        """phi(u) + phi(v) - phi(u + v) summed leg by leg, without A."""
        ku, su, kv, sv, kw, sw = self.slots
        phi = np.asarray(phi)
        return su * phi[ku] + sv * phi[kv] - sw * phi[kw]


def operator_from_triplets(map, triplets):
    N = map.image_side
    m = len(triplets)
    u = triplets[:, 0]
    v = triplets[:, 1]
    w = u + v
    rows = np.repeat(np.arange(m), 3)
    cols = np.empty(3 * m, dtype=np.int64)
    vals = np.empty(3 * m)
    for slot, (leg, sense) in enumerate(((u, 1.0), (v, 1.0), (w, -1.0))):
        cols[slot::3] = map.index_grid[leg[:, 0] % N, leg[:, 1] % N]
        vals[slot::3] = sense * map.sign_grid[leg[:, 0] % N, leg[:, 1] % N]
    A = sp.coo_matrix((vals, (rows, cols)), shape=(m, map.n)).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def build_index(map, inner_radius):
    if not (0 < inner_radius <= map.recovery_radius):
        raise InvalidArgument(
            "inner radius %s must lie in (0, %s]" % (inner_radius, map.recovery_radius)
        )
    R = map.recovery_radius
    u_all = disc_coords(R)
    v_all = disc_coords(inner_radius)
    span = 4 * int(math.ceil(R)) + 3

    # every (u, v) pair, v outer, u inner
    u = np.tile(u_all, (len(v_all), 1))
    v = np.repeat(v_all, len(u_all), axis=0)
    w = u + v
    w2 = w[:, 0] ** 2 + w[:, 1] ** 2
    keep = (w2 > 0) & (w2 <= R * R)

    # (u, v) and (v, u) are the same triplet when both fit the inner disc
    u2 = u[:, 0] ** 2 + u[:, 1] ** 2
    swapped = (u2 <= inner_radius**2) & (raster_key(u, span) > raster_key(v, span))
    keep &= ~swapped

    triplets = np.stack([u[keep], v[keep]], axis=1).astype(np.int64)
    triplets.setflags(write=False)
    A = operator_from_triplets(map, triplets)
    logger.info(
        "built bispectrum index: N=%d R=%g r=%g n=%d m=%d nnz=%d",
        map.image_side, R, inner_radius, map.n, len(triplets), A.nnz,
    )
    return BispectrumIndex(triplets, A, map, float(R), float(inner_radius))


@dataclass(frozen=True)
class BispectrumData:
    beta: np.ndarray
    weights: np.ndarray
    modulus: np.ndarray
    n_frames: int = 1


def triplet_bispectrum(spectrum, index):
    """I(u) I(v) conj(I(u + v)) of one frame spectrum at every triplet."""
    flat = np.asarray(spectrum).reshape(-1)
    pu, pv, pw = index.grid_positions
    return flat[pu] * flat[pv] * np.conj(flat[pw])


def accumulate_bispectrum(frame_ffts, index, modulus=None):
    """Average data bispectrum phase and SNR weights over frame spectra.

    frame_ffts may be any iterable of complex N x N spectra. The running
    mean and spread use Welford updates so frames are never held together.
    When ``modulus`` is not given, the root of the mean power spectrum of the
    frames is stored.
    """
    N = index.map.image_side
    count = 0
    mean = np.zeros(index.m, dtype=complex)
    spread = np.zeros(index.m)
    power = np.zeros((N, N))

    for spectrum in frame_ffts:
        spectrum = np.asarray(spectrum)
        if spectrum.shape != (N, N):
            raise InvalidArgument(
                "frame spectrum shape %s does not match image side %d"
                % (spectrum.shape, N)
            )
        b = triplet_bispectrum(spectrum, index)
        count += 1
        delta = b - mean
        mean += delta / count
        spread += np.real(delta * np.conj(b - mean))
        power += np.abs(spectrum) ** 2

    if count == 0:
        raise InvalidArgument("accumulate_bispectrum needs at least one frame")

    beta = wrap_phase(np.angle(mean))
    if count == 1 or not np.any(spread > 0):
        weights = np.ones(index.m)
    else:
        sigma = np.sqrt(spread / (2.0 * (count - 1)))
        weights = np.abs(mean) / (sigma + WEIGHT_DELTA)
        floored = weights < WEIGHT_FLOOR
        if np.any(floored):
            logger.warning("%d bispectrum weights floored", int(floored.sum()))
        weights = np.maximum(weights, WEIGHT_FLOOR)

    if modulus is None:
        modulus = np.sqrt(power / count).reshape(-1)
    else:
        modulus = np.asarray(modulus, dtype=float).reshape(-1)
    return BispectrumData(beta, weights, modulus, count)


def accumulate_frames(frames, index, modulus=None):
    """accumulate_bispectrum over real frames, transforming each on the fly."""
    spectra = (scipy.fft.fft2(np.asarray(frame, dtype=float)) for frame in frames)
    return accumulate_bispectrum(spectra, index, modulus)
