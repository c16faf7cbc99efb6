# scli.py - speckgeist command line: simulate, recover, compare, sweep,
# gridsearch and selftest
#
# Exit codes: 0 success, 2 configuration error, 3 numerical failure.

import argparse
import os.path
import sys

import numpy as np

from . import sexperiment, sio
from .sconfig import FORMULATIONS, resolve_config
from .sindex import accumulate_frames, build_index, build_phase_map
from .sobjective import (
    REGULARIZERS,
    ImageProblem,
    PhaseProblem,
    adjoint_test,
    evaluate_regularizer,
    gradient_check,
    phase_of_object,
)
from .soptim import METHODS
from .ssim import mean_frame, recover_modulus, simulate_frames
from .sutils import (
    ConfigurationError,
    InvalidArgument,
    NumericalBreakdown,
    configure_logging,
    ensure_dir,
)
from .sversion import __version__

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

ADJOINT_TOL = 1e-10
MIN_GRADIENT_ORDER = 1.8

# (flag, field, help); values are parsed by sconfig so the types live in one place
CONFIG_FLAGS = [
    ("--image-side", "image_side", "image side N (power of two)"),
    ("--frames", "n_frames", "frames per data set"),
    ("--fried", "fried", "turbulence strength D/r0"),
    ("--photons-object", "photons_object", "expected photo-events per object frame"),
    ("--photons-star", "photons_star", "expected photo-events per star frame"),
    ("--sigma-rn", "sigma_rn", "read noise standard deviation (counts)"),
    ("--seed", "rng_seed", "random seed; repeat k uses seed + k"),
    ("--radius", "recovery_radius", "recovery radius R (pixels)"),
    ("--inner-radius", "inner_radius", "radius bounding the v leg of each triplet"),
    ("--alpha", "alpha", "regularization weight (default depends on --reg)"),
    ("--tv-eps", "tv_eps", "total variation smoothing (default 1e-3 max of the initial image)"),
    ("--epsilon", "epsilon", "bump added after the energy preserving projection"),
    ("--max-iter", "max_iter", "optimizer iteration limit"),
    ("--tol-obj-change", "tol_obj_change", "relative objective change tolerance"),
    ("--tol-step-norm", "tol_step_norm", "step norm tolerance"),
    ("--tol-newton-decrement", "tol_newton_decrement", "Newton decrement tolerance"),
    ("--armijo-c", "armijo_c", "sufficient decrease constant"),
    ("--armijo-max-backtracks", "armijo_max_backtracks", "line search backtrack limit"),
    ("--lbfgs-memory", "lbfgs_memory", "L-BFGS curvature pairs kept"),
    ("--cg-rel-tol", "cg_rel_tol", "relative residual tolerance of the CG solves"),
    ("--cg-max-iter", "cg_max_iter", "CG iteration limit"),
    ("--repeats", "n_repeats", "independent simulated problems"),
    ("--workers", "workers", "worker processes for the repeats"),
    ("--out", "output_dir", "output directory"),
]


def get_argparse(add_help=True):
    parser = argparse.ArgumentParser(add_help=add_help)
    parser.add_argument("--config", help="config file (.yaml, .md or key = value text)")
    parser.add_argument(
        "--log-level",
        default="WARNING",
        help="logging level (DEBUG, INFO, WARNING, ...)",
    )
    for flag, field, text in CONFIG_FLAGS:
        parser.add_argument(flag, dest=field, default=argparse.SUPPRESS, help=text)
    parser.add_argument(
        "--formulation", choices=FORMULATIONS, default=argparse.SUPPRESS, help="objective"
    )
    parser.add_argument("--method", choices=METHODS, default=argparse.SUPPRESS, help="optimizer")
    parser.add_argument(
        "--reg", dest="regularizer", choices=REGULARIZERS, default=argparse.SUPPRESS,
        help="regularizer of the image formulations",
    )
    parser.add_argument(
        "--include-d2", dest="include_d2", action="store_const", const=True,
        default=argparse.SUPPRESS, help="curvature term max(D2, 0) in the E2 image Hessian",
    )
    parser.add_argument(
        "--debug-dumps", dest="debug_dumps", action="store_const", const=True,
        default=argparse.SUPPRESS, help="write gradient.bimg and residual.bimg per run",
    )
    return parser


def parse_options(argv=None):
    common = get_argparse(add_help=False)
    parser = argparse.ArgumentParser(prog="speckgeist", description="bispectrum phase recovery")
    parser.add_argument("--version", action="version", version="speckgeist %s" % __version__)
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="write simulated frames")
    simulate.add_argument(
        "--save-frames", action="store_const", const=True, default=False,
        help="also write every frame as a PGM",
    )
    commands.add_parser("recover", parents=[common], help="run one configured recovery")
    commands.add_parser("compare", parents=[common], help="run the method comparison roster")
    sweep = commands.add_parser("sweep", parents=[common], help="robustness sweep")
    sweep.add_argument(
        "--parameter", choices=sorted(sexperiment.SWEEP_PARAMETERS), required=True,
        help="parameter to sweep",
    )
    sweep.add_argument("--values", nargs="+", type=float, help="sweep values")
    grid = commands.add_parser("gridsearch", parents=[common], help="regularization grid search")
    grid.add_argument("--alphas", nargs="+", type=float, help="alpha values to try")
    commands.add_parser("selftest", parents=[common], help="adjoint and gradient checks")
    return parser.parse_args(argv)


def config_from_args(args):
    skip = {"command", "config", "log_level", "save_frames", "parameter", "values", "alphas"}
    overrides = {key: value for key, value in vars(args).items() if key not in skip}
    return resolve_config(args.config, overrides)


def print_rows(header, rows):
    print(",".join(header))
    for row in rows:
        print(",".join("%.6g" % v if isinstance(v, float) else str(v) for v in row))


# -- subcommands -------------------------------------------------------------


def do_simulate(cfg, args):
    out = ensure_dir(cfg.output_dir)
    sim = cfg.simulation()
    truth = sexperiment.true_object(cfg)
    objects = simulate_frames(truth, sim, "object", workers=cfg.workers)
    stars = simulate_frames(None, sim, "star", workers=cfg.workers)
    sio.write_pgm(os.path.join(out, "truth.pgm"), truth)
    sio.write_bimg(os.path.join(out, "truth.bimg"), truth)
    sio.write_pgm(os.path.join(out, "mean_object.pgm"), mean_frame(objects))
    sio.write_pgm(os.path.join(out, "mean_star.pgm"), mean_frame(stars))
    N = cfg.image_side
    sio.write_bimg(os.path.join(out, "modulus.bimg"), recover_modulus(objects, stars).reshape(N, N))
    if args.save_frames:
        for k, frame in enumerate(objects.frames):
            sio.write_pgm(os.path.join(out, "object_%03d.pgm" % k), frame)
        for k, frame in enumerate(stars.frames):
            sio.write_pgm(os.path.join(out, "star_%03d.pgm" % k), frame)
    print("Wrote %d object and %d star frames to %s" % (len(objects), len(stars), out))
    return EXIT_OK


def do_recover(cfg, args):
    rows = sexperiment.run_experiment(cfg)
    print_rows(sexperiment.METRICS_COLUMNS, sexperiment.metrics_rows(rows))
    return EXIT_OK


def do_compare(cfg, args):
    rows = sexperiment.compare(cfg)
    print_rows(sexperiment.METRICS_COLUMNS, sexperiment.metrics_rows(rows))
    return EXIT_OK


def do_sweep(cfg, args):
    table = sexperiment.run_robustness_sweep(cfg, args.parameter, args.values)
    print_rows(sexperiment.SWEEP_COLUMNS, [tuple(vars(row).values()) for row in table])
    for column in sexperiment.SWEEP_COLUMNS[1:]:
        print("# spearman %s: %.3f" % (column, sexperiment.sweep_trend(table, column)))
    return EXIT_OK


def do_gridsearch(cfg, args):
    scores = sexperiment.gridsearch(cfg, args.alphas)
    print_rows(("alpha", "min_re"), scores)
    return EXIT_OK


def selftest(seed=0, image_side=16, radius=5.0, inner_radius=3.0, trials=10):
    """Adjoint test of d phi / d o and Taylor checks of every gradient.

    Returns a list of (name, measured, passed).
    """
    rng = np.random.default_rng(seed)
    N = image_side
    index = build_index(build_phase_map(N, radius), inner_radius)
    truth = rng.uniform(0.5, 1.5, (N, N))
    data = accumulate_frames([truth], index)
    results = []

    worst = 0.0
    for _ in range(trials):
        o = rng.uniform(0.5, 1.5, N * N)
        q = rng.standard_normal(N * N)
        r = rng.standard_normal(index.n)
        worst = max(worst, adjoint_test(o, q, r, index.map))
    results.append(("adjoint", worst, worst <= ADJOINT_TOL))

    hs = (1e-2, 1e-3, 1e-4, 1e-5)
    # near the true phases no residual sits close to a wrap
    phi = phase_of_object(truth, index.map) + 0.01 * rng.standard_normal(index.n)
    d = rng.standard_normal(index.n)
    d /= np.linalg.norm(d)
    for variant in ("E1", "E2"):
        problem = PhaseProblem(index, data, variant)
        _, order = gradient_check(problem.value, problem.evaluate(phi).gradient, phi, d, hs)
        results.append(("gradient %s(phi)" % variant, order, order >= MIN_GRADIENT_ORDER))

    o = truth.reshape(-1) + 0.01 * rng.standard_normal(N * N)
    d = rng.standard_normal(N * N)
    d /= np.linalg.norm(d)
    for variant in ("E1", "E2"):
        problem = ImageProblem(index, data, variant)
        _, order = gradient_check(problem.value, problem.evaluate(o).gradient, o, d, hs)
        results.append(("gradient %s(o)" % variant, order, order >= MIN_GRADIENT_ORDER))
    for name in REGULARIZERS[1:]:

        def value(x, name=name):
            return evaluate_regularizer(name, x, 1.0, 1e-1, N).value

        gradient = evaluate_regularizer(name, o - 1.0, 1.0, 1e-1, N).gradient
        _, order = gradient_check(value, gradient, o - 1.0, d, hs)
        results.append(("gradient %s" % name, order, order >= MIN_GRADIENT_ORDER))
    return results


def do_selftest(cfg, args):
    results = selftest(seed=cfg.rng_seed)
    for name, measured, passed in results:
        print("%-28s %12.4g  %s" % (name, measured, "ok" if passed else "FAILED"))
    if all(passed for _, _, passed in results):
        return EXIT_OK
    print("selftest failed")
    return EXIT_NUMERICAL


COMMANDS = {
    "simulate": do_simulate,
    "recover": do_recover,
    "compare": do_compare,
    "sweep": do_sweep,
    "gridsearch": do_gridsearch,
    "selftest": do_selftest,
}


def main(argv=None):
    args = parse_options(argv)
    configure_logging(args.log_level)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigurationError, InvalidArgument) as error:
        print("Configuration error: %s" % error)
        return EXIT_CONFIG
    except NumericalBreakdown as error:
        print("Numerical failure: %s" % error)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
