"""Ground-truth bivariate distribution used to validate copula recovery.

The target is an equal-weight mixture of two Clayton copulas
(theta = 9.75 and theta = -0.99) coupling a Gamma(1.99) marginal and a
Double Weibull(c=3) marginal.

Note on theta = -0.99: a Clayton copula this close to the lower Frechet
bound puts almost all of its mass within ~1e-30 of the curve
``u**0.99 + v**0.99 = 1``.  Float64 points drawn from it sit off that curve
by rounding error, so pointwise density evaluation on such points is not
reliable.  :func:`sample_ground_truth_with_density` therefore also returns
the exact log density along the generating path, computed from the latent
uniforms instead of the rounded output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernels
from .data import TimeSeriesWindow

logger = logging.getLogger(__name__)

LOG_FLOOR = -745.0  # log of the smallest positive float64


@dataclass(frozen=True)
class ClaytonCopula:
    theta: float

    def __post_init__(self):
        if self.theta == 0:
            raise ValueError("theta = 0 is the independence copula; use it explicitly")
        if self.theta < -1:
            raise ValueError(f"Clayton theta must be >= -1, got {self.theta}")

    def cdf(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        th = self.theta
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            s = np.power(u, -th) + np.power(v, -th) - 1.0
            out = np.power(np.maximum(s, 0.0), -1.0 / th)
        # boundary values are exact by definition
        out = np.where(u <= 0, 0.0, out)
        out = np.where(v <= 0, 0.0, out)
        out = np.where(u >= 1, np.clip(v, 0, 1), out)
        out = np.where(v >= 1, np.clip(u, 0, 1), out)
        return out

    def logpdf(self, u, v):
        return _kernels.clayton_logpdf(self.theta, u, v)

    def pdf(self, u, v):
        return np.exp(self.logpdf(u, v))

    def conditional_inverse(self, u, w):
        """Solve dC/du(u, v) = w for v (conditional distribution method)."""
        return _kernels.clayton_conditional_inverse(self.theta, u, w)

    def exact_logpdf_on_path(self, u, w):
        """Log density at ``(u, conditional_inverse(u, w))`` from the latents.

        Uses ``s = u**-theta * w**(-theta / (1 + theta))`` which holds exactly
        on the sampling path, so no cancellation occurs.
        """
        th = self.theta
        u = np.asarray(u, dtype=np.float64)
        v = self.conditional_inverse(u, w)
        log_s = -th * np.log(u) - th / (1.0 + th) * np.log(w)
        return math.log1p(th) + (-th - 1.0) * (np.log(u) + np.log(v)) + (-2.0 - 1.0 / th) * log_s

    def sample(self, n, rng):
        u = rng.random(n)
        w = rng.random(n)
        return np.column_stack([u, self.conditional_inverse(u, w)])

    def kendall_tau(self):
        return self.theta / (self.theta + 2.0)


def clayton_density(theta, u, v):
    """Clayton copula density; zero outside the support."""
    return ClaytonCopula(theta).pdf(u, v)


@dataclass(frozen=True)
class ClaytonMixture:
    thetas: tuple = (9.75, -0.99)
    weights: tuple = (0.5, 0.5)

    @property
    def components(self):
        return [ClaytonCopula(t) for t in self.thetas]

    def logpdf(self, u, v):
        parts = [math.log(w) + c.logpdf(u, v) for w, c in zip(self.weights, self.components)]
        return np.logaddexp.reduce(np.stack(parts), axis=0)

    def pdf(self, u, v):
        return np.exp(self.logpdf(u, v))

    def cdf(self, u, v):
        return sum(w * c.cdf(u, v) for w, c in zip(self.weights, self.components))

    def sample(self, n, rng, return_labels=False, return_exact_logpdf=False):
        labels = rng.choice(len(self.thetas), size=n, p=np.asarray(self.weights))
        u = rng.random(n)
        w = rng.random(n)
        v = np.empty(n)
        exact = np.empty(n)
        for k, comp in enumerate(self.components):
            idx = labels == k
            v[idx] = comp.conditional_inverse(u[idx], w[idx])
            if return_exact_logpdf:
                own = math.log(self.weights[k]) + comp.exact_logpdf_on_path(u[idx], w[idx])
                others = [
                    math.log(self.weights[j]) + other.logpdf(u[idx], v[idx])
                    for j, other in enumerate(self.components)
                    if j != k
                ]
                exact[idx] = np.logaddexp.reduce(np.stack([own, *others]), axis=0)
        out = [np.column_stack([u, v])]
        if return_labels:
            out.append(labels)
        if return_exact_logpdf:
            out.append(exact)
        return out[0] if len(out) == 1 else tuple(out)


@dataclass(frozen=True)
class GroundTruthBivariate:
    copula: ClaytonMixture = field(default_factory=ClaytonMixture)
    gamma_shape: float = 1.99
    weibull_c: float = 3.0

    @property
    def marginals(self):
        return [stats.gamma(self.gamma_shape), stats.dweibull(self.weibull_c)]

    def to_unit(self, points):
        points = np.asarray(points, dtype=np.float64)
        m1, m2 = self.marginals
        return np.column_stack([m1.cdf(points[:, 0]), m2.cdf(points[:, 1])])

    def marginal_logpdf(self, points):
        points = np.asarray(points, dtype=np.float64)
        m1, m2 = self.marginals
        return m1.logpdf(points[:, 0]) + m2.logpdf(points[:, 1])

    def logpdf(self, points, return_flags=False):
        """Pointwise joint log density (copula density times marginal densities)."""
        uv = self.to_unit(points)
        eps = np.finfo(np.float64).tiny
        u = np.clip(uv[:, 0], eps, 1 - 1e-16)
        v = np.clip(uv[:, 1], eps, 1 - 1e-16)
        with np.errstate(divide="ignore"):
            lc = self.copula.logpdf(u, v)
        out = lc + self.marginal_logpdf(points)
        floored = ~np.isfinite(out) | (out < LOG_FLOOR)
        if floored.any():
            logger.warning("ground-truth density underflow at %d points; log-floor applied", int(floored.sum()))
        out = np.where(floored, LOG_FLOOR, out)
        return (out, floored) if return_flags else out

    def sample(self, n, seed, return_exact_logpdf=False):
        rng = np.random.default_rng(seed)
        uv, exact_c = self.copula.sample(n, rng, return_exact_logpdf=True)
        m1, m2 = self.marginals
        points = np.column_stack([m1.ppf(uv[:, 0]), m2.ppf(uv[:, 1])])
        if return_exact_logpdf:
            return points, exact_c + self.marginal_logpdf(points)
        return points


GROUND_TRUTH = GroundTruthBivariate()


def sample_ground_truth(n, seed):
    """Draw ``n`` points from the reference bivariate distribution."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return GROUND_TRUTH.sample(n, seed)


def sample_ground_truth_with_density(n, seed):
    """Like :func:`sample_ground_truth` but also returns the exact log density
    of every draw, evaluated from the latent uniforms."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return GROUND_TRUTH.sample(n, seed, return_exact_logpdf=True)


def ground_truth_nll(points, return_flags=False):
    """Mean negative log density of ``points`` under the reference distribution."""
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    lp, flags = GROUND_TRUTH.logpdf(points, return_flags=True)
    nll = float(-lp.mean())
    return (nll, flags) if return_flags else nll


def points_to_windows(points):
    """Wrap each bivariate point as a two-token window with both values missing."""
    points = np.asarray(points, dtype=np.float64)
    series = np.array([0, 1])
    times = np.zeros(2)
    mask = np.zeros(2, dtype=bool)
    return [TimeSeriesWindow(series, times, p, mask=mask, sort=False) for p in points]


def binned_copula_nll_bound(uv, n_bins, copula=None):
    """Best mean copula NLL reachable by a conditional histogram with ``n_bins``.

    For a bivariate copula whose second factor is a histogram conditioned
    on the exact value of the first coordinate (and whose first factor is
    uniform), the optimum assigns each bin its true conditional mass.  This
    is the resolution floor of the histogram parametrisation and is reported
    next to the pointwise oracle.
    """
    copula = copula or GROUND_TRUTH.copula
    uv = np.asarray(uv, dtype=np.float64)
    u, v = uv[:, 0], uv[:, 1]
    idx = np.minimum((v * n_bins).astype(int), n_bins - 1)
    lo = idx / n_bins
    hi = (idx + 1) / n_bins
    mass = conditional_cdf(copula, u, hi) - conditional_cdf(copula, u, lo)
    return float(-np.mean(np.log(n_bins * np.maximum(mass, 1e-300))))


def conditional_cdf(copula, u, v):
    """P(V <= v | U = u) for a Clayton copula or a mixture of them."""
    if isinstance(copula, ClaytonMixture):
        return sum(w * conditional_cdf(c, u, v) for w, c in zip(copula.weights, copula.components))
    th = copula.theta
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.empty(np.broadcast(u, v).shape)
    u, v = np.broadcast_arrays(u, v)
    inside = (v > 0) & (v < 1)
    out[v <= 0] = 0.0
    out[v >= 1] = 1.0
    uu = u[inside]
    vv = v[inside]
    a = -th * np.log(uu)
    b = -th * np.log(vv)
    if th > 0:
        lse = np.logaddexp(a, b)
        log_s = lse + np.log1p(-np.exp(-lse))
        res = np.exp((-th - 1.0) * np.log(uu) + (-1.0 / th - 1.0) * log_s)
    else:
        s = np.expm1(a) + np.exp(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            res = np.where(s > 0, np.exp((-th - 1.0) * np.log(uu) + (-1.0 / th - 1.0) * np.log(np.maximum(s, 1e-300))), 0.0)
    out[inside] = res
    return out
