# sexperiment.py - the experiment harness: simulate, build the problem,
# warm start, optimize, score and write everything under output_dir
#
# Layout under output_dir:
#   index_N<N>_R<R>_r<r>.bidx              cached bispectrum index
#   <formulation>_<method>_<reg>/run<k>/   report.csv, solution.pgm, solution.bimg
#                                          (gradient.bimg, residual.bimg with debug_dumps)
#   summary.csv, experiment.md

import logging
import os
import os.path
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.fft
from scipy.stats import spearmanr

from . import sio
from .sconfig import TV_EPS_FRACTION
from .sindex import accumulate_frames, build_index, build_phase_map
from .sinit import project_energy_preserving, recursive_phase, synthesize_image
from .sobjective import ImageProblem, PhaseProblem
from .soptim import optimize
from .ssim import make_satellite, recover_modulus, simulate_frames
from .sutils import FormatError, InvalidArgument, ensure_dir
from .sversion import __version__

logger = logging.getLogger(__name__)

# (formulation, method, regularizer, table label)
PHASE_ROSTER = [
    (f, m, "none", m) for f in ("E1phi", "E2phi") for m in ("GD", "LBFGS", "GN")
]
IMAGE_ROSTER = [
    (f, m, reg, label)
    for f in ("E1obj", "E2obj")
    for m, reg, label in (
        ("GD", "penalty", "GD+"),
        ("LBFGS", "penalty", "LBFGS+"),
        ("GN", "penalty", "GN+"),
        ("PGD", "discrete_gradient", "PGD-grad"),
        ("PGD", "total_variation", "PGD-TV"),
        ("PGN", "discrete_gradient", "PGN-grad"),
        ("PGN", "total_variation", "PGN-TV"),
    )
]
COMPARE_ROSTER = PHASE_ROSTER + IMAGE_ROSTER

SWEEP_ROSTER = [
    ("E1phi", "GN", "none", "GN-E1phi"),
    ("E2phi", "GN", "none", "GN-E2phi"),
    ("E1obj", "PGN", "total_variation", "PGN-TV-E1obj"),
    ("E2obj", "PGN", "total_variation", "PGN-TV-E2obj"),
]
SWEEP_PARAMETERS = {"fried": "fried", "radius": "recovery_radius", "noise": "sigma_rn"}
SWEEP_VALUES = {
    "fried": (10.0, 20.0, 30.0, 40.0, 50.0),
    # R = N/2 aliases (32, 0) onto (-32, 0), so the last radius stops short of it
    "radius": (16.0, 20.0, 24.0, 28.0, 31.5),
    "noise": (1.0, 3.0, 5.0, 7.0, 9.0),
}

GRIDSEARCH_ALPHAS = {
    "penalty": (1e1, 1e2, 1e3, 1e4, 1e5),
    "discrete_gradient": (1e-4, 1e-3, 1e-2, 1e-1, 1.0),
    "total_variation": (1e2, 1e3, 1e4, 1e5, 1e6),
}


# -- metrics -----------------------------------------------------------------


def _as_grid(o, N=None):
    o = np.asarray(o, dtype=float)
    if o.ndim == 1:
        N = N or int(round(np.sqrt(o.size)))
        o = o.reshape(N, N)
    return o


def relative_error(o_rec, o_true):
    """Relative error after the best circular shift, 180 degree turn and scale.

    For each candidate c (o_rec and its point reflection) the correlation
    <o_true, roll(c, s)> over every shift s comes from one FFT product; the
    best least-squares scale then leaves ||o_true||^2 - corr^2 / ||c||^2.
    """
    t = _as_grid(o_true)
    o = _as_grid(o_rec, t.shape[0])
    if o.shape != t.shape:
        raise InvalidArgument("images of shape %s and %s differ" % (o.shape, t.shape))
    tt = float(np.sum(t * t))
    if not tt > 0:
        raise InvalidArgument("reference image has zero norm")
    cc = float(np.sum(o * o))
    if cc == 0:
        return 1.0
    T = scipy.fft.fft2(t)
    best = 0.0
    for candidate in (o, np.flip(o)):
        corr = np.real(scipy.fft.ifft2(T * np.conj(scipy.fft.fft2(candidate))))
        best = max(best, float(np.max(corr * corr)))
    return float(np.sqrt(max(tt - best / cc, 0.0) / tt))


def relative_error_raw(o_rec, o_true):
    t = _as_grid(o_true)
    o = _as_grid(o_rec, t.shape[0])
    norm = np.linalg.norm(t)
    if not norm > 0:
        raise InvalidArgument("reference image has zero norm")
    return float(np.linalg.norm(o - t) / norm)


@dataclass
class MetricsRow:
    label: str
    min_rof: float
    min_re: float
    min_re_raw: float
    initial_re: float
    iterations: float
    total_seconds: float
    seconds_per_iteration: float
    ls_per_iteration: float
    termination: str = ""

    @classmethod
    def from_report(cls, label, report, initial_re):
        iterations = report.iterations
        seconds = report.seconds[-1]
        return cls(
            label=label,
            min_rof=float(np.min(report.rof)),
            min_re=float(np.nanmin(report.re)) if np.any(np.isfinite(report.re)) else np.nan,
            min_re_raw=(
                float(np.nanmin(report.re_raw)) if np.any(np.isfinite(report.re_raw)) else np.nan
            ),
            initial_re=initial_re,
            iterations=iterations,
            total_seconds=seconds,
            seconds_per_iteration=seconds / iterations if iterations else 0.0,
            ls_per_iteration=float(np.mean(report.ls_iters[1:])) if iterations else 0.0,
            termination=report.termination,
        )


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow))


def summarize(rows):
    """Mean of the numeric columns; the most frequent termination reason."""
    if not rows:
        raise InvalidArgument("nothing to summarize")
    values = {}
    for name in METRICS_COLUMNS[1:-1]:
        values[name] = float(np.mean([getattr(row, name) for row in rows]))
    reason = Counter(row.termination for row in rows).most_common(1)[0][0]
    return MetricsRow(rows[0].label, termination=reason, **values)


def metrics_rows(rows):
    return [tuple(getattr(row, name) for name in METRICS_COLUMNS) for row in rows]


# -- data preparation --------------------------------------------------------


@dataclass
class PreparedData:
    truth: np.ndarray
    data: object
    phi0: np.ndarray
    o_init: np.ndarray
    o_proj: np.ndarray
    initial_re: float
    projected_re: float


def load_or_build_index(cfg, directory=None):
    """Bispectrum index for cfg, read from the BIDX cache when it is there."""
    directory = ensure_dir(directory or cfg.output_dir)
    path = os.path.join(
        directory, sio.bidx_filename(cfg.image_side, cfg.recovery_radius, cfg.inner_radius)
    )
    if os.path.exists(path):
        try:
            index = sio.load_index(path)
            if index.inner_radius == cfg.inner_radius:
                return index, path
        except FormatError as error:
            logger.warning("ignoring bad index cache %s: %s", path, error)
    index = build_index(build_phase_map(cfg.image_side, cfg.recovery_radius), cfg.inner_radius)
    sio.save_index(path, index)
    return index, path


def true_object(cfg):
    """The satellite scaled to the expected photo-events per frame."""
    obj = make_satellite(cfg.image_side)
    return obj * (cfg.photons_object / obj.sum())


def unit_flux_modulus(modulus):
    modulus = np.asarray(modulus, dtype=float).reshape(-1)
    if not modulus[0] > 0:
        raise InvalidArgument("recovered modulus has no D.C. term")
    return modulus / modulus[0]


def prepare_data(cfg, index, repeat=0):
    """Frames, bispectrum data and the warm starts for one repeat.

    Images are handled at unit flux: the truth is normalized to sum 1 and
    the modulus to a D.C. value of 1, so every synthesized image sums to 1.
    DEFAULT_ALPHA is tuned for that scale. The projection bump cfg.epsilon
    is relative to the mean pixel.
    """
    sim = cfg.simulation(repeat)
    photons = true_object(cfg)
    truth = photons / photons.sum()
    objects = simulate_frames(photons, sim, "object")
    stars = simulate_frames(None, sim, "star")
    # no phase is recovered outside the disc, so no modulus is kept there either
    modulus = recover_modulus(objects, stars) * index.map.disc_mask().reshape(-1)
    modulus = unit_flux_modulus(modulus)
    data = accumulate_frames(objects.frames, index, modulus)
    phi0 = recursive_phase(data, index)
    o_init = synthesize_image(phi0, modulus, index.map)
    o_proj = project_energy_preserving(o_init, cfg.epsilon * o_init.sum() / o_init.size)
    return PreparedData(
        truth,
        data,
        phi0,
        o_init,
        o_proj,
        relative_error(o_init, truth),
        relative_error(o_proj, truth),
    )


def build_problem(cfg, index, prepared):
    """(problem, starting point) for the formulation named by cfg."""
    if cfg.is_phase:
        return PhaseProblem(index, prepared.data, cfg.variant), prepared.phi0.copy()
    tv_eps = cfg.tv_eps
    if tv_eps is None:
        tv_eps = TV_EPS_FRACTION * float(np.max(prepared.o_init))
    problem = ImageProblem(
        index,
        prepared.data,
        cfg.variant,
        regularizer=cfg.regularizer,
        alpha=cfg.resolved_alpha(),
        tv_eps=tv_eps,
        include_d2=cfg.include_d2,
    )
    return problem, prepared.o_proj.copy()


def solve(cfg, index, prepared):
    """Run the configured optimizer; returns (solution image, y, RunReport)."""
    problem, y0 = build_problem(cfg, index, prepared)
    truth = prepared.truth

    def errors(y):
        image = problem.to_image(y)
        return relative_error(image, truth), relative_error_raw(image, truth)

    y, report = optimize(problem, y0, cfg.optimizer(), errors)
    return problem.to_image(y), y, report, problem


def write_run(directory, cfg, image, y, report, problem):
    ensure_dir(directory)
    N = cfg.image_side
    sio.write_report_csv(os.path.join(directory, "report.csv"), report)
    sio.write_pgm(os.path.join(directory, "solution.pgm"), image.reshape(N, N))
    sio.write_bimg(os.path.join(directory, "solution.bimg"), image.reshape(N, N))
    if cfg.debug_dumps:
        ev = problem.evaluate(y)
        sio.write_bimg(os.path.join(directory, "gradient.bimg"), ev.gradient)
        sio.write_bimg(os.path.join(directory, "residual.bimg"), problem.residual(y))


def _run_repeat(cfg, entries, repeat, index_path):
    # one repeat: simulate once, then run every roster entry on that data
    index = sio.load_index(index_path)
    prepared = prepare_data(cfg, index, repeat)
    rows = []
    for formulation, method, regularizer, label in entries:
        run_cfg = cfg.replace(formulation=formulation, method=method, regularizer=regularizer)
        image, y, report, problem = solve(run_cfg, index, prepared)
        directory = os.path.join(cfg.output_dir, run_cfg.label, "run%d" % repeat)
        write_run(directory, run_cfg, image, y, report, problem)
        rows.append(MetricsRow.from_report(label, report, prepared.initial_re))
        logger.info(
            "repeat %d %s: min RE %.4f (initial %.4f), %s",
            repeat, run_cfg.label, rows[-1].min_re, prepared.initial_re, report.termination,
        )
    return prepared.initial_re, prepared.projected_re, rows


def run_roster(cfg, entries):
    """Every entry on every repeat; returns [(initial_re, projected_re, rows)] per repeat."""
    cfg.validate()
    for formulation, method, regularizer, _ in entries:
        cfg.replace(formulation=formulation, method=method, regularizer=regularizer).validate()
    ensure_dir(cfg.output_dir)
    _, index_path = load_or_build_index(cfg)
    repeats = range(cfg.n_repeats)
    if cfg.workers > 1 and cfg.n_repeats > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [
                pool.submit(_run_repeat, cfg, entries, k, index_path) for k in repeats
            ]
            return [future.result() for future in futures]
    return [_run_repeat(cfg, entries, k, index_path) for k in repeats]


def write_notes(cfg, title, header, rows):
    body = "# %s\n\nspeckgeist %s\n\n%s\n" % (title, __version__, sio.markdown_table(header, rows))
    sio.write_notes(os.path.join(cfg.output_dir, "experiment.md"), cfg.as_dict(), body)


def run_experiment(cfg):
    """The configured (formulation, method, regularizer) over cfg.n_repeats repeats.

    Returns one MetricsRow per repeat; summary.csv holds those rows followed
    by their mean.
    """
    entry = (cfg.formulation, cfg.method, cfg.regularizer, cfg.label)
    results = run_roster(cfg, [entry])
    rows = [repeat_rows[0] for _, _, repeat_rows in results]
    table = metrics_rows(rows + [summarize(rows)])
    sio.write_csv(os.path.join(cfg.output_dir, "summary.csv"), METRICS_COLUMNS, table)
    write_notes(cfg, "Experiment %s" % cfg.label, METRICS_COLUMNS, table)
    return rows


def compare(cfg, roster=None):
    """The method comparison table: one averaged MetricsRow per roster entry."""
    roster = roster or COMPARE_ROSTER
    results = run_roster(cfg, roster)
    summary = []
    for i, (formulation, _, _, label) in enumerate(roster):
        row = summarize([repeat_rows[i] for _, _, repeat_rows in results])
        row.label = "%s %s" % (formulation, label)
        summary.append(row)
    table = metrics_rows(summary)
    sio.write_csv(os.path.join(cfg.output_dir, "summary.csv"), METRICS_COLUMNS, table)
    write_notes(cfg, "Method comparison", METRICS_COLUMNS, table)
    return summary


@dataclass
class SweepRow:
    value: float
    initial: float
    projected: float
    gn_e1phi: float
    gn_e2phi: float
    pgn_tv_e1obj: float
    pgn_tv_e2obj: float


SWEEP_COLUMNS = tuple(f.name for f in fields(SweepRow))


def run_robustness_sweep(cfg, parameter, values=None):
    """Mean registered RE of the warm starts and four solvers per parameter value."""
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidArgument(
            "sweep parameter must be one of %s, found %s" % (", ".join(SWEEP_PARAMETERS), parameter)
        )
    values = SWEEP_VALUES[parameter] if values is None else values
    field = SWEEP_PARAMETERS[parameter]
    table = []
    for value in values:
        sweep_cfg = cfg.replace(
            **{field: value, "output_dir": os.path.join(cfg.output_dir, "%s_%g" % (parameter, value))}
        )
        results = run_roster(sweep_cfg, SWEEP_ROSTER)
        columns = [
            np.mean([repeat_rows[i].min_re for _, _, repeat_rows in results])
            for i in range(len(SWEEP_ROSTER))
        ]
        table.append(
            SweepRow(
                float(value),
                float(np.mean([initial for initial, _, _ in results])),
                float(np.mean([projected for _, projected, _ in results])),
                *[float(c) for c in columns],
            )
        )
        logger.info("sweep %s=%g: %s", parameter, value, table[-1])
    ensure_dir(cfg.output_dir)
    sio.write_csv(
        os.path.join(cfg.output_dir, "sweep_%s.csv" % parameter),
        SWEEP_COLUMNS,
        [tuple(asdict(row).values()) for row in table],
    )
    return table


def sweep_trend(table, column):
    """Spearman rank correlation of a sweep column against the swept value."""
    if len(table) < 2:
        return float("nan")
    values = [row.value for row in table]
    errors = [getattr(row, column) for row in table]
    rho, _ = spearmanr(values, errors)
    return float(rho)


def gridsearch(cfg, alphas=None):
    """Run the configured image formulation for each alpha; best RE first.

    Returns (alpha, mean min RE) pairs sorted by RE.
    """
    if cfg.is_phase or cfg.regularizer == "none":
        raise InvalidArgument("grid search needs an image formulation with a regularizer")
    alphas = alphas or GRIDSEARCH_ALPHAS[cfg.regularizer]
    scores = []
    for alpha in alphas:
        grid_cfg = cfg.replace(
            alpha=float(alpha), output_dir=os.path.join(cfg.output_dir, "alpha_%g" % alpha)
        )
        rows = run_experiment(grid_cfg)
        scores.append((float(alpha), float(np.mean([row.min_re for row in rows]))))
    scores.sort(key=lambda pair: pair[1])
    ensure_dir(cfg.output_dir)
    sio.write_csv(os.path.join(cfg.output_dir, "gridsearch.csv"), ("alpha", "min_re"), scores)
    logger.info("best alpha for %s: %g (RE %.4f)", cfg.label, scores[0][0], scores[0][1])
    return scores