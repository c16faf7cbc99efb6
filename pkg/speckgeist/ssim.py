# ssim.py - synthetic short-exposure speckle frames and Fourier modulus recovery
#
# Single-layer Kolmogorov phase screens are synthesized in Fourier space with
# low-frequency subharmonics added. The telescope aperture is a centered disc
# of diameter N/2, so one cycle per aperture is half a cycle per grid.

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .sutils import InvalidArgument

logger = logging.getLogger(__name__)

MODULUS_DELTA = 1e-8
SUBHARMONIC_LEVELS = 3

OBJECT_STREAM = 0
STAR_STREAM = 1


@dataclass(frozen=True)
class SimulationConfig:
    image_side: int = 64
    n_frames: int = 50
    fried: float = 30.0
    photons_object: float = 3e6
    photons_star: float = 5000.0
    sigma_rn: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        N = self.image_side
        if N < 2 or N & (N - 1):
            raise InvalidArgument("image side must be a power of two, found %s" % N)
        if self.n_frames < 1:
            raise InvalidArgument("need at least one frame, found %s" % self.n_frames)
        if not self.fried > 0:
            raise InvalidArgument("D/r0 must be positive, found %s" % self.fried)
        if self.photons_object < 0 or self.photons_star < 0:
            raise InvalidArgument("photo-event counts must be nonnegative")
        if self.sigma_rn < 0:
            raise InvalidArgument("read-noise std must be nonnegative")


@dataclass
class FrameSet:
    frames: list = field(default_factory=list)
    kind: str = "object"

    @property
    def image_side(self):
        if not self.frames:
            raise InvalidArgument("%s frame set is empty" % self.kind)
        return self.frames[0].shape[0]

    def __len__(self):
        return len(self.frames)


def frame_streams(seed, kind, n_frames):
    """Independent counter-based generators, one per frame.

    Object and star data derive from different spawn keys, so equal seeds
    still give different noise for the two frame sets.
    """
    stream = OBJECT_STREAM if kind == "object" else STAR_STREAM
    root = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream,))
    return [np.random.Generator(np.random.Philox(child)) for child in root.spawn(n_frames)]


def aperture_mask(N):
    c = np.arange(N) - N / 2.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return (yy * yy + xx * xx <= (N / 4.0) ** 2).astype(float)


def kolmogorov_psd(f, fried):
    """Phase power per (cycle/aperture)^2 at radial frequency f in cycles/aperture."""
    with np.errstate(divide="ignore"):
        psd = 0.023 * fried ** (5.0 / 3.0) * f ** (-11.0 / 3.0)
    return np.where(f > 0, psd, 0.0)


def _subharmonics(N, fried, df, rng):
    # three levels of 3 x 3 subharmonic samples, each level a third of the
    # previous spacing; the center sample of every level is skipped
    c = np.arange(N) / (N / 2.0)  # grid position in aperture units
    yy, xx = np.meshgrid(c, c, indexing="ij")
    screen = np.zeros((N, N))
    for level in range(1, SUBHARMONIC_LEVELS + 1):
        dfp = df / 3.0**level
        for p in (-1, 0, 1):
            for q in (-1, 0, 1):
                if p == 0 and q == 0:
                    continue
                fy, fx = p * dfp, q * dfp
                amp = np.sqrt(kolmogorov_psd(np.hypot(fy, fx), fried)) * dfp
                coeff = amp * (rng.standard_normal() + 1j * rng.standard_normal())
                screen += np.real(coeff * np.exp(2j * np.pi * (fy * yy + fx * xx)))
    return screen - screen.mean()


def generate_phase_screen(N, fried, rng):
    if not fried > 0:
        raise InvalidArgument("D/r0 must be positive, found %s" % fried)
    df = 0.5  # one grid cycle is half a cycle per aperture
    k = scipy.fft.fftfreq(N, d=1.0 / N)
    ky, kx = np.meshgrid(k, k, indexing="ij")
    f = np.hypot(ky, kx) * df
    amp = np.sqrt(kolmogorov_psd(f, fried)) * df
    noise = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    screen = np.real(scipy.fft.fft2(amp * noise))
    screen += _subharmonics(N, fried, df, rng)
    return screen - screen.mean()


def generate_psf(screen, N):
    pupil = aperture_mask(N) * np.exp(1j * np.asarray(screen))
    psf = np.abs(scipy.fft.ifft2(pupil)) ** 2
    return psf / psf.sum()


def convolve_fft(image, psf):
    """Circular convolution; psf is centered at pixel (0, 0)."""
    out = np.real(scipy.fft.ifft2(scipy.fft.fft2(image) * scipy.fft.fft2(psf)))
    return out


def make_satellite(N):
    """Piecewise-constant satellite-like test object on an N x N grid."""
    obj = np.zeros((N, N))
    s = N / 64.0
    c = N // 2

    def box(y0, y1, x0, x1, value):
        obj[int(c + y0 * s):int(c + y1 * s), int(c + x0 * s):int(c + x1 * s)] = value

    box(-6, 6, -4, 4, 1.0)  # body
    box(-3, 3, -20, -5, 0.6)  # solar panels
    box(-3, 3, 5, 20, 0.6)
    box(-1, 1, -5, -4, 0.8)  # booms
    box(-1, 1, 4, 5, 0.8)
    box(-12, -6, -1, 1, 0.9)  # antenna
    box(-13, -12, -3, 3, 0.7)
    box(2, 4, -2, 2, 0.3)  # darker instrument bay
    return obj


def _one_frame(obj_normalized, N, fried, photons, sigma_rn, rng):
    psf = generate_psf(generate_phase_screen(N, fried, rng), N)
    intensity = np.clip(photons * convolve_fft(obj_normalized, psf), 0.0, None)
    frame = rng.poisson(intensity).astype(float)
    if sigma_rn > 0:
        frame += rng.normal(0.0, sigma_rn, size=(N, N))
    return frame


def simulate_frames(obj, cfg, kind="object", workers=1):
    """Short-exposure frames of obj (kind="object") or of a point star.

    Each frame draws its own screen and noise from its own stream, so the
    result does not depend on ``workers``.
    """
    N = cfg.image_side
    if kind == "object":
        photons = cfg.photons_object
        obj = np.asarray(obj, dtype=float).reshape(N, N)
    elif kind == "star":
        photons = cfg.photons_star
        obj = np.zeros((N, N))
        obj[0, 0] = 1.0
    else:
        raise InvalidArgument("frame kind must be object or star, found %s" % kind)
    if photons < 0:
        raise InvalidArgument("photo-event count must be nonnegative, found %s" % photons)
    if np.any(obj < 0):
        raise InvalidArgument("object must be nonnegative")
    total = obj.sum()
    normalized = obj / total if total > 0 else obj

    streams = frame_streams(cfg.rng_seed, kind, cfg.n_frames)

    def work(rng):
        return _one_frame(normalized, N, cfg.fried, photons, cfg.sigma_rn, rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(work, streams))
    else:
        frames = [work(rng) for rng in streams]
    logger.info("simulated %d %s frames (N=%d, D/r0=%g)", len(frames), kind, N, cfg.fried)
    return FrameSet(frames, kind)


def mean_frame(frame_set):
    return np.mean(np.stack(frame_set.frames), axis=0)


def mean_power(frame_set):
    power = np.zeros(frame_set.frames[0].shape)
    for frame in frame_set.frames:
        power += np.abs(scipy.fft.fft2(frame)) ** 2
    return power / len(frame_set)


def recover_modulus(object_frames, star_frames):
    """Labeyrie estimate of the object's Fourier modulus, flattened to N*N.

    The ratio of mean object and star power spectra is square-rooted and
    scaled so its D.C. value equals the mean total flux of the object frames.
    """
    if object_frames.image_side != star_frames.image_side:
        raise InvalidArgument("object and star frames differ in size")
    ratio = mean_power(object_frames) / (mean_power(star_frames) + MODULUS_DELTA)
    modulus = np.sqrt(np.maximum(ratio, 0.0))
    flux = np.mean([frame.sum() for frame in object_frames.frames])
    if modulus[0, 0] > 0:
        modulus = modulus * (flux / modulus[0, 0])
    return np.maximum(modulus, 0.0).reshape(-1)
