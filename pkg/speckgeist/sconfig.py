# sconfig.py - experiment configuration
#
# Settings come from the ExperimentConfig defaults, then an optional config
# file, then explicit command-line flags. A config file is read according to
# its extension: .yaml/.yml is a flat YAML mapping, .md is the frontmatter of
# an experiment.md written by an earlier run, and anything else is flat
# "key = value" text.

import dataclasses
import logging
import math
import os.path
import typing
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import frontmatter
import tatsu
import yaml

from .sobjective import REGULARIZERS
from .soptim import METHODS, PROJECTED_METHODS, OptimizerConfig
from .ssim import SimulationConfig
from .sutils import ConfigurationError, InvalidArgument

logger = logging.getLogger(__name__)

FORMULATIONS = ("E1phi", "E2phi", "E1obj", "E2obj")
PHASE_FORMULATIONS = ("E1phi", "E2phi")
PHASE_METHODS = ("GD", "LBFGS", "GN")

# regularization weights for images at unit flux
DEFAULT_ALPHA = {
    "none": 0.0,
    "penalty": 1e3,
    "discrete_gradient": 1e-2,
    "total_variation": 1e4,
}
TV_EPS_FRACTION = 1e-3

ALIASES = {
    "frames": "n_frames",
    "radius": "recovery_radius",
    "inner": "inner_radius",
    "seed": "rng_seed",
    "reg": "regularizer",
    "out": "output_dir",
    "repeats": "n_repeats",
}

GRAMMAR = r"""@@grammar::SCONFIG
@@whitespace :: /[\t ]+/

start = lines:{ line } $ ;

line = [ entry:entry ] [ comment ] eol ;

entry = key:key '=' value:value ;

key = /[A-Za-z_][A-Za-z0-9_\-]*/ ;

value = /[^\n#]*[^\s#]/ ;

comment = /#[^\n]*/ ;

eol = /\n/ ;
"""


@dataclass(frozen=True)
class ExperimentConfig:
    # simulation
    image_side: int = 64
    n_frames: int = 50
    fried: float = 30.0
    photons_object: float = 3e6
    photons_star: float = 5000.0
    sigma_rn: float = 5.0
    rng_seed: int = 0
    # index
    recovery_radius: float = 24.0
    inner_radius: float = 5.0
    # problem
    formulation: str = "E1phi"
    method: str = "GN"
    regularizer: str = "none"
    alpha: Optional[float] = None
    tv_eps: Optional[float] = None
    include_d2: bool = False
    epsilon: float = 1e-4
    # optimizer
    max_iter: int = 100
    tol_obj_change: float = 1e-4
    tol_step_norm: float = 1e-4
    tol_newton_decrement: float = 1e-3
    armijo_c: float = 1e-4
    armijo_max_backtracks: int = 25
    armijo_shrink: float = 0.5
    lbfgs_memory: int = 5
    cg_rel_tol: float = 1e-1
    cg_max_iter: int = 50
    # harness
    n_repeats: int = 1
    workers: int = 1
    output_dir: str = "results"
    debug_dumps: bool = False

    @property
    def label(self):
        return "%s_%s_%s" % (self.formulation, self.method, self.regularizer)

    @property
    def is_phase(self):
        return self.formulation in PHASE_FORMULATIONS

    @property
    def variant(self):
        return self.formulation[:2]

    def resolved_alpha(self):
        if self.alpha is not None:
            return self.alpha
        return DEFAULT_ALPHA[self.regularizer]

    def simulation(self, repeat=0):
        return SimulationConfig(
            image_side=self.image_side,
            n_frames=self.n_frames,
            fried=self.fried,
            photons_object=self.photons_object,
            photons_star=self.photons_star,
            sigma_rn=self.sigma_rn,
            rng_seed=self.rng_seed + repeat,
        )

    def optimizer(self):
        bounded = self.method in PROJECTED_METHODS
        return OptimizerConfig(
            method=self.method,
            max_iter=self.max_iter,
            tol_obj_change=self.tol_obj_change,
            tol_step_norm=self.tol_step_norm,
            tol_newton_decrement=self.tol_newton_decrement,
            armijo_c=self.armijo_c,
            armijo_max_backtracks=self.armijo_max_backtracks,
            armijo_shrink=self.armijo_shrink,
            lbfgs_memory=self.lbfgs_memory,
            cg_rel_tol=self.cg_rel_tol,
            cg_max_iter=self.cg_max_iter,
            lower_bound=0.0 if bounded else -math.inf,
            upper_bound=math.inf,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def as_dict(self):
        return dataclasses.asdict(self)

    def validate(self):
        """Raise ConfigurationError for an unusable or mismatched configuration."""
        if self.formulation not in FORMULATIONS:
            raise ConfigurationError("unknown formulation %s" % self.formulation)
        if self.method not in METHODS:
            raise ConfigurationError("unknown method %s" % self.method)
        if self.regularizer not in REGULARIZERS:
            raise ConfigurationError("unknown regularizer %s" % self.regularizer)
        if self.is_phase:
            if self.method not in PHASE_METHODS:
                raise ConfigurationError(
                    "method %s does not apply to formulation %s" % (self.method, self.formulation)
                )
            if self.regularizer != "none":
                raise ConfigurationError(
                    "regularizer %s does not apply to formulation %s"
                    % (self.regularizer, self.formulation)
                )
        elif self.regularizer == "penalty" and self.method in PROJECTED_METHODS:
            raise ConfigurationError(
                "regularizer penalty pairs with unconstrained methods, not %s" % self.method
            )
        if self.alpha is not None and self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative, found %s" % self.alpha)
        if self.tv_eps is not None and not self.tv_eps > 0:
            raise ConfigurationError("tv_eps must be positive, found %s" % self.tv_eps)
        if not (0 < self.recovery_radius < self.image_side / 2.0):
            raise ConfigurationError(
                "recovery radius %s outside (0, %s)" % (self.recovery_radius, self.image_side / 2.0)
            )
        if not (0 < self.inner_radius <= self.recovery_radius):
            raise ConfigurationError(
                "inner radius %s must lie in (0, %s]" % (self.inner_radius, self.recovery_radius)
            )
        if self.n_repeats < 1 or self.workers < 1:
            raise ConfigurationError("n_repeats and workers must be at least 1")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be nonnegative, found %s" % self.epsilon)
        try:
            self.simulation()
            self.optimizer()
        except InvalidArgument as error:
            raise ConfigurationError(str(error))
        return self


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def field_name(key):
    name = str(key).strip().replace("-", "_")
    name = ALIASES.get(name, name)
    if name not in FIELD_TYPES:
        raise ConfigurationError("unknown configuration key %s" % key)
    return name


def coerce(name, value):
    """Convert value (text or YAML scalar) to the type of field name."""
    kind = FIELD_TYPES[name]
    optional = typing.get_origin(kind) is typing.Union
    if optional:
        kind = [t for t in typing.get_args(kind) if t is not type(None)][0]
    if optional and (value is None or str(value).strip().lower() in ("", "none", "null")):
        return None
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "yes", "on", "1"):
                return True
            if text in ("false", "no", "off", "0"):
                return False
            raise ValueError(value)
        if kind is int:
            number = float(value)
            if number != int(number):
                raise ValueError(value)
            return int(number)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError("bad value %r for %s" % (value, name))


@lru_cache(maxsize=1)
def _parser():
    return tatsu.compile(GRAMMAR)


class KeyValueSemantics(object):
    def entry(self, ast):
        return (ast.key, ast.value.strip())

    def line(self, ast):
        return ast.get("entry") if isinstance(ast, dict) else None

    def start(self, ast):
        return [entry for entry in ast.lines if entry]


def parse_key_values(text):
    if not text.endswith("\n"):
        text += "\n"
    try:
        entries = _parser().parse(text, semantics=KeyValueSemantics())
    except tatsu.exceptions.FailedParse as error:
        raise ConfigurationError("cannot parse configuration: %s" % error)
    return dict(entries)


def load_config_file(filepath):
    """Raw settings from a config file, keyed by field name."""
    if not os.path.exists(filepath):
        raise ConfigurationError("config file %s does not exist" % filepath)
    if filepath.endswith(".yaml") or filepath.endswith(".yml"):
        with open(filepath) as infile:
            try:
                raw = yaml.safe_load(infile) or {}
            except yaml.YAMLError as error:
                raise ConfigurationError("cannot parse %s: %s" % (filepath, error))
    elif filepath.endswith(".md"):
        raw = dict(frontmatter.load(filepath).metadata)
    else:
        with open(filepath) as infile:
            raw = parse_key_values(infile.read())
    if not isinstance(raw, dict):
        raise ConfigurationError("%s does not hold a flat mapping" % filepath)
    settings = {}
    for key, value in raw.items():
        name = field_name(key)
        settings[name] = coerce(name, value)
    logger.info("read %d settings from %s", len(settings), filepath)
    return settings


def resolve_config(file_path=None, overrides=None, base=None):
    """Defaults (or base), then the file, then explicit overrides; validated."""
    config = base or ExperimentConfig()
    if file_path:
        config = config.replace(**load_config_file(file_path))
    changes = {}
    for key, value in (overrides or {}).items():
        name = field_name(key)
        changes[name] = coerce(name, value)
    return config.replace(**changes).validate()
