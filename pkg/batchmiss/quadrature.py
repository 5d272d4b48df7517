"""Gauss-Legendre moments of a Gaussian scalar tilted by a logistic weight.

For s ~ N(m, v) and weight w(s) = expit(offset + slope·s) this computes
log ∫ w φ, E(s | tilt) and var(s | tilt) on the interval m ± 8√v, doubling the
node count until successive rules agree.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre
from scipy import special

HALF_WIDTH_SD = 8.0
START_NODES = 16
MAX_NODES = 4096
RTOL = 1e-8


class QuadratureError(ArithmeticError):
    """Raised when node doubling fails to reach the requested tolerance."""


@dataclass(frozen=True)
class TiltedScalarMoments:
    # log of ∫ w(s) φ(s) ds, i.e. log Pr(M = 1)
    log_mass: float
    mean: float
    var: float
    nodes: int


@lru_cache(maxsize=16)
def _legendre_rule(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = legendre.leggauss(nodes)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def moments_with_nodes(
    mean: float, var: float, offset: float, slope: float, nodes: int
) -> TiltedScalarMoments:
    """Evaluate the tilted moments with a fixed ``nodes``-point rule."""
    if not var > 0:
        raise ValueError(f"variance of s must be positive, got {var}")
    sd = math.sqrt(var)
    half = HALF_WIDTH_SD * sd
    x, w = _legendre_rule(nodes)
    s = mean + half * x
    log_terms = (
        np.log(w)
        + math.log(half)
        + special.log_expit(offset + slope * s)
        - 0.5 * ((s - mean) / sd) ** 2
        - math.log(sd)
        - 0.5 * math.log(2.0 * math.pi)
    )
    log_mass = float(special.logsumexp(log_terms))
    weights = np.exp(log_terms - log_mass)
    m1 = float(weights @ s)
    v1 = float(weights @ (s - m1) ** 2)
    return TiltedScalarMoments(log_mass=log_mass, mean=m1, var=v1, nodes=nodes)


def _agree(a: TiltedScalarMoments, b: TiltedScalarMoments, sd: float, rtol: float) -> bool:
    return (
        abs(a.log_mass - b.log_mass) <= rtol
        and abs(a.mean - b.mean) <= rtol * max(abs(b.mean), sd)
        and abs(a.var - b.var) <= rtol * max(b.var, sd * sd * rtol)
    )


def logistic_gaussian_moments(
    mean: float,
    var: float,
    offset: float,
    slope: float,
    *,
    start_nodes: int = START_NODES,
    max_nodes: int = MAX_NODES,
    rtol: float = RTOL,
) -> TiltedScalarMoments:
    """Moments of s ~ N(mean, var) reweighted by expit(offset + slope·s)."""
    sd = math.sqrt(var) if var > 0 else 0.0
    previous = moments_with_nodes(mean, var, offset, slope, start_nodes)
    nodes = start_nodes
    while nodes < max_nodes:
        nodes *= 2
        current = moments_with_nodes(mean, var, offset, slope, nodes)
        if _agree(previous, current, sd, rtol):
            return current
        previous = current
    raise QuadratureError(
        f"logistic-Gaussian quadrature did not converge within {max_nodes} nodes "
        f"(mean={mean:.4g}, var={var:.4g}, offset={offset:.4g}, slope={slope:.4g})"
    )
