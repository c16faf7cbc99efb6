# sinit.py - warm starts: one recursive pass over the bispectrum, image
# synthesis from phase and modulus, and the energy preserving projection

import logging

import numpy as np
import scipy.fft

from .sutils import InvalidArgument, wrap_phase

logger = logging.getLogger(__name__)

SEED_RADIUS = 1.0
PROJECTION_BUMP = 1e-4


def recursive_phase(data, index, seed_phase=None):
    """Phase estimate from a single recursive pass.

    Unknowns with |u| <= 1 are seeded (zero unless seed_phase gives them)
    and the rest are visited by increasing radius. Each visited phase is the
    weighted circular mean of phi(u) + phi(v) - beta over the triplets whose
    u + v leg is that frequency and whose u and v legs are already known.
    Frequencies with no such triplet when visited stay at 0.
    """
    map = index.map
    n = map.n
    phi = np.zeros(n)
    known = np.zeros(n, dtype=bool)
    seeds = map.radii <= SEED_RADIUS
    known[seeds] = True
    if seed_phase is not None:
        phi[seeds] = np.asarray(seed_phase)[seeds]

    ku, su, kv, sv, kw, sw = index.slots
    order = np.argsort(kw, kind="stable")
    starts = np.searchsorted(kw[order], np.arange(n + 1))

    reached = int(seeds.sum())
    visit = np.lexsort((np.arange(n), map.radii))
    for k in visit:
        if known[k]:
            continue
        rows = order[starts[k]:starts[k + 1]]
        rows = rows[known[ku[rows]] & known[kv[rows]]]
        if len(rows) == 0:
            continue
        # estimate of phi at the u + v leg, then undo that leg's sign
        leg = su[rows] * phi[ku[rows]] + sv[rows] * phi[kv[rows]] - data.beta[rows]
        estimate = sw[rows] * leg
        phi[k] = np.angle(np.sum(data.weights[rows] * np.exp(1j * estimate)))
        known[k] = True
        reached += 1
    logger.info("recursive pass reached %d of %d phases", reached, n)
    return wrap_phase(phi)


def synthesize_image(phi, modulus, map, return_residue=False):
    """Real image from the modulus and the conjugate-symmetric phase.

    The imaginary part of the inverse transform is discarded; its norm is
    logged and, with return_residue, returned alongside the image.
    """
    N = map.image_side
    modulus = np.asarray(modulus, dtype=float).reshape(N, N)
    spectrum = modulus * np.exp(1j * map.embed(phi))
    image = scipy.fft.ifft2(spectrum)
    residue = float(np.linalg.norm(np.imag(image)))
    logger.debug("synthesized image, imaginary residue %.3g", residue)
    real = np.real(image).reshape(-1)
    if return_residue:
        return real, residue
    return real


def project_energy_preserving(o, epsilon=PROJECTION_BUMP):
    """Nearest nonnegative image with the same pixel sum, then bumped by epsilon.

    Water filling: o_hat = max(o - tau, 0) with tau chosen so the sum is kept.
    """
    o = np.asarray(o, dtype=float)
    total = float(o.sum())
    if not total > 0:
        raise InvalidArgument("energy preserving projection needs positive flux, found %s" % total)
    if o.min() >= 0:
        projected = o.copy()
    else:
        u = np.sort(o.reshape(-1))[::-1]
        cumulative = np.cumsum(u)
        j = np.arange(1, u.size + 1)
        rho = np.flatnonzero(u - (cumulative - total) / j > 0)[-1]
        tau = (cumulative[rho] - total) / (rho + 1)
        projected = np.maximum(o - tau, 0.0)
    return projected + epsilon
