"""Safety measure, safe-action selection and the interpolation baseline.

An action is safe when the probability of a nonnegative q value exceeds the
threshold; among safe actions the one with the highest expected q wins.  When
nothing passes the gate the decision reports every configuration's safety so
the caller can trigger tactile exploration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dem import DEM
from .forest import QHistogram
from .gp import GaussMixture, GaussPred

DEFAULT_EPSILON = 0.8


@dataclass(frozen=True)
class Chosen:
    config: int
    expected_q: float
    safety: float


@dataclass(frozen=True)
class NoSafeAction:
    safety_by_config: dict


def _gauss_safety(mean: float, variance: float) -> float:
    if variance <= 0.0:
        if mean > 0.0:
            return 1.0
        if mean < 0.0:
            return 0.0
        return 0.5
    z = mean / math.sqrt(variance)
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def safety(qpdf) -> float:
    """Probability that q >= 0 under the (marginalized) QPDF.

    Histograms integrate the mass above zero, pro-rating the bin that
    straddles zero linearly; Gaussians use the normal CDF.
    """
    if isinstance(qpdf, GaussPred):
        return _gauss_safety(qpdf.mean, qpdf.variance)
    if isinstance(qpdf, GaussMixture):
        return float(np.mean([_gauss_safety(m, v)
                              for m, v in zip(qpdf.means, qpdf.variances)]))
    edges, mass = qpdf.edges, qpdf.mass
    if edges[0] >= 0.0:
        return 1.0
    if edges[-1] <= 0.0:
        return 0.0
    k = int(np.searchsorted(edges, 0.0, side="right") - 1)
    above = float(mass[k + 1:].sum())
    frac = (edges[k + 1] - 0.0) / (edges[k + 1] - edges[k])
    return min(1.0, above + frac * float(mass[k]))


def expected_q(qpdf) -> float:
    if isinstance(qpdf, GaussPred):
        return qpdf.mean
    if isinstance(qpdf, GaussMixture):
        return float(np.mean(qpdf.means))
    return qpdf.mean()


def select_action(qpdfs: dict, epsilon: float = DEFAULT_EPSILON):
    """Pick the safest-best configuration, or report that none qualifies.

    Restricts to configurations with safety strictly above ``epsilon`` and
    returns the one with the highest expected q (ties toward the lowest
    configuration id).  ``epsilon = 0`` disables the gate for any QPDF with
    positive mass above zero, recovering the plain argmax policy.
    """
    if not qpdfs:
        raise ValueError("no configurations supplied")
    safeties = {c: safety(qpdfs[c]) for c in sorted(qpdfs)}
    best = None
    for c in sorted(qpdfs):
        if safeties[c] > epsilon:
            eq = expected_q(qpdfs[c])
            if best is None or eq > best[1]:
                best = (c, eq)
    if best is None:
        return NoSafeAction(safeties)
    return Chosen(best[0], best[1], safeties[best[0]])


def argmax_config(qpdfs: dict) -> int:
    """Plain highest-expected-q configuration, no safety gate."""
    best_c, best_q = None, -np.inf
    for c in sorted(qpdfs):
        eq = expected_q(qpdfs[c])
        if eq > best_q:
            best_c, best_q = c, eq
    return best_c


def lsq_interpolate(dem: DEM) -> DEM:
    """Fill missing bins from a least-squares plane over the observed ones.

    With no observed bins at all the fit degenerates to flat zero terrain.
    Filled heights are estimates and are not snapped to the sensor's vertical
    quantization.
    """
    if dem.fully_observed():
        return dem
    rr, cc = np.meshgrid(np.arange(dem.rows), np.arange(dem.cols), indexing="ij")
    obs = ~dem.missing
    heights = dem.heights.copy()
    if not obs.any():
        heights[:] = 0.0
    else:
        A = np.column_stack([rr[obs], cc[obs], np.ones(int(obs.sum()))])
        coef, *_ = np.linalg.lstsq(A, dem.heights[obs], rcond=None)
        fit = coef[0] * rr + coef[1] * cc + coef[2]
        heights[dem.missing] = fit[dem.missing]
    return DEM(heights, np.zeros_like(dem.missing),
               dem.resolution, dem.vertical_resolution)
