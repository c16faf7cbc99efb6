# sutils.py - errors and small helpers shared by the speckgeist tools

import logging
import math
import os
import os.path

import numpy as np

TWO_PI = 2.0 * math.pi


class SpeckleError(Exception):
    def __init__(self, message):
        self.message = message

    def __str__(self):
        return self.message


class InvalidArgument(SpeckleError, ValueError):
    pass


class ConfigurationError(SpeckleError):
    pass


class NumericalBreakdown(SpeckleError):
    pass


class FactorizationError(NumericalBreakdown):
    pass


class LineSearchFailure(SpeckleError):
    pass


class FormatError(SpeckleError):
    pass


def wrap_phase(x):
    """Reduce phase(s) to the half-open interval [-pi, pi).

    Works on scalars and arrays. ``np.round`` rounds half to even, so an
    input of exactly +pi lands on +pi and is mapped to -pi afterwards.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("wrap_phase requires finite input")
    wrapped = x - TWO_PI * np.round(x / TWO_PI)
    wrapped = np.where(wrapped >= math.pi, wrapped - TWO_PI, wrapped)
    wrapped = np.where(wrapped < -math.pi, wrapped + TWO_PI, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def configure_logging(level="WARNING"):
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def ensure_dir(path):
    if not os.path.exists(path):
        os.makedirs(path)
    return path
