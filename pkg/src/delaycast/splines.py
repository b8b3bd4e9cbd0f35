"""Penalized cubic and cyclic-cubic regression spline bases.

Two constructions are provided:

* a natural cubic regression spline (zero second derivative beyond the
  boundary knots, hence exactly linear extrapolation) with knots at empirical
  quantiles and the integrated-squared-second-derivative penalty;
* a cyclic cubic regression spline parameterized by its values at equispaced
  knots, with value, first and second derivative matching across the period
  boundary.

Bases are built once and shared read-only. The smoothness prior is a
partially proper multivariate normal: rank(S)/2 * log(tau) - tau/2 * c'Sc on
the penalized directions plus a proper Normal(0, ridge_sd^2) on each penalty
null-space direction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "SmoothnessParam",
    "SplineBasis",
    "SplinePriorTerms",
    "build_cubic_basis",
    "build_cyclic_basis",
    "center_basis",
    "spline_log_prior",
]

KIND_CUBIC = "cubic_linear_tail"
KIND_CYCLIC = "cyclic"

_NULL_TOL = 1e-8


@dataclass(frozen=True)
class SmoothnessParam:
    """Penalty scale in both parameterizations: tau = sigma**-2."""

    sigma: float
    tau: float

    def __post_init__(self):
        if not (self.sigma > 0.0 and self.tau > 0.0):
            raise ConfigError("sigma and tau must be > 0")
        if abs(self.tau - self.sigma**-2.0) > 1e-9 * self.tau:
            raise ConfigError("tau must equal sigma**-2")

    @classmethod
    def from_sigma(cls, sigma: float) -> "SmoothnessParam":
        return cls(sigma=float(sigma), tau=float(sigma) ** -2.0)

    @classmethod
    def from_tau(cls, tau: float) -> "SmoothnessParam":
        return cls(sigma=float(tau) ** -0.5, tau=float(tau))


@dataclass(frozen=True)
class SplineBasis:
    """Design matrix, penalty and enough metadata to evaluate at new points."""

    design: np.ndarray
    penalty: np.ndarray
    knots: np.ndarray
    kind: str
    centered: bool
    null_dim: int
    points: np.ndarray = field(repr=False)
    extrapolation_range: tuple[float, float] = (-np.inf, np.inf)
    period: float | None = None
    constraint: np.ndarray | None = field(default=None, repr=False)
    interp_map: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_basis(self) -> int:
        return self.design.shape[1]

    def evaluate(self, x) -> np.ndarray:
        """Design rows at arbitrary points inside the extrapolation range."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.extrapolation_range
        if np.any(x < lo) or np.any(x > hi):
            raise ConfigError(
                f"evaluation points outside the extrapolation range [{lo}, {hi}]"
            )
        if self.kind == KIND_CUBIC:
            rows = _cubic_rows(x, self.knots)
        else:
            rows = _cyclic_rows(x, self.knots, self.period, self.interp_map)
        if self.constraint is not None:
            rows = rows @ self.constraint
        return rows

    def export_csv(self, design_path, penalty_path=None) -> None:
        """Write the design (and optionally penalty) for external cross-checks."""
        with open(design_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["point"] + [f"b{j}" for j in range(self.n_basis)])
            for x, row in zip(self.points, self.design):
                writer.writerow([repr(float(x))] + [repr(float(v)) for v in row])
        if penalty_path is not None:
            with open(penalty_path, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle)
                writer.writerow([f"b{j}" for j in range(self.n_basis)])
                for row in self.penalty:
                    writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# natural cubic basis: columns [1, x, N_1 .. N_{K-2}], all linear beyond the
# boundary knots
# ---------------------------------------------------------------------------


def _cubic_rows(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    n_knots = knots.size
    last = knots[-1]

    def d_k(k: int) -> np.ndarray:
        num = np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - last, 0.0) ** 3
        return num / (last - knots[k])

    d_last = d_k(n_knots - 2)
    cols = [np.ones_like(x), x]
    for k in range(n_knots - 2):
        cols.append(d_k(k) - d_last)
    return np.column_stack(cols)


def _cubic_second_derivative_rows(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    n_knots = knots.size
    last = knots[-1]

    def d2_k(k: int) -> np.ndarray:
        num = 6.0 * np.maximum(x - knots[k], 0.0) - 6.0 * np.maximum(x - last, 0.0)
        return num / (last - knots[k])

    d2_last = d2_k(n_knots - 2)
    cols = [np.zeros_like(x), np.zeros_like(x)]
    for k in range(n_knots - 2):
        cols.append(d2_k(k) - d2_last)
    return np.column_stack(cols)


def build_cubic_basis(points, n_basis: int, extrapolation_range=None) -> SplineBasis:
    """Natural cubic regression spline with knots at quantiles of the points.

    The penalty is the integrated squared second derivative over the knot
    range, assembled exactly (Simpson per inter-knot interval is exact for the
    piecewise-quadratic integrand). Its null space is {1, x}.
    """
    points = np.atleast_1d(np.asarray(points, dtype=float))
    if points.size == 0:
        raise ConfigError("points must be non-empty")
    if n_basis < 3:
        raise ConfigError("n_basis must be >= 3")
    distinct = np.unique(points)
    if n_basis > distinct.size:
        raise ConfigError(
            f"n_basis {n_basis} exceeds the number of distinct points ({distinct.size})"
        )
    knots = np.quantile(distinct, np.linspace(0.0, 1.0, n_basis))
    if np.any(np.diff(knots) <= 0.0):
        raise ConfigError("quantile knots collide; reduce n_basis")
    design = _cubic_rows(points, knots)
    penalty = np.zeros((n_basis, n_basis))
    for a, b in zip(knots[:-1], knots[1:]):
        mid = 0.5 * (a + b)
        nodes = _cubic_second_derivative_rows(np.array([a, mid, b]), knots)
        h = b - a
        # Simpson: exact for the quadratic products of piecewise-linear f''
        penalty += (h / 6.0) * (
            np.outer(nodes[0], nodes[0])
            + 4.0 * np.outer(nodes[1], nodes[1])
            + np.outer(nodes[2], nodes[2])
        )
    penalty = 0.5 * (penalty + penalty.T)
    rng = extrapolation_range if extrapolation_range is not None else (-np.inf, np.inf)
    return SplineBasis(
        design=design,
        penalty=penalty,
        knots=knots,
        kind=KIND_CUBIC,
        centered=False,
        null_dim=2,
        points=points,
        extrapolation_range=(float(rng[0]), float(rng[1])),
    )


# ---------------------------------------------------------------------------
# cyclic cubic basis: parameterized by knot values, periodic in value and in
# the first two derivatives
# ---------------------------------------------------------------------------


def _cyclic_matrices(knots: np.ndarray, period: float):
    k = knots.size
    widths = np.empty(k)
    widths[:-1] = np.diff(knots)
    widths[-1] = knots[0] + period - knots[-1]
    b_mat = np.zeros((k, k))
    d_mat = np.zeros((k, k))
    for j in range(k):
        prev = (j - 1) % k
        nxt = (j + 1) % k
        h_prev = widths[prev]
        h_here = widths[j]
        b_mat[j, prev] += h_prev / 6.0
        b_mat[j, j] += (h_prev + h_here) / 3.0
        b_mat[j, nxt] += h_here / 6.0
        d_mat[j, prev] += 1.0 / h_prev
        d_mat[j, j] += -1.0 / h_prev - 1.0 / h_here
        d_mat[j, nxt] += 1.0 / h_here
    return b_mat, d_mat, widths


def _cyclic_rows(x: np.ndarray, knots: np.ndarray, period: float, interp_map: np.ndarray) -> np.ndarray:
    k = knots.size
    origin = knots[0]
    u = np.mod(x - origin, period) + origin
    widths = np.empty(k)
    widths[:-1] = np.diff(knots)
    widths[-1] = knots[0] + period - knots[-1]
    idx = np.searchsorted(knots, u, side="right") - 1
    idx = np.clip(idx, 0, k - 1)
    nxt = (idx + 1) % k
    h = widths[idx]
    right_knot = knots[idx] + h
    t_minus = right_knot - u
    t_plus = u - knots[idx]
    rows = np.zeros((u.size, k))
    cols = np.arange(u.size)
    rows[cols, idx] += t_minus / h
    rows[cols, nxt] += t_plus / h
    w_minus = (t_minus**3 / h - h * t_minus) / 6.0
    w_plus = (t_plus**3 / h - h * t_plus) / 6.0
    rows += w_minus[:, None] * interp_map[idx]
    rows += w_plus[:, None] * interp_map[nxt]
    return rows


def build_cyclic_basis(points, n_basis: int, period: float, origin: float = 1.0) -> SplineBasis:
    """Cyclic cubic regression spline over [origin, origin + period].

    Knots are equispaced; the basis is the cardinal one in the knot values,
    with second derivatives eliminated through the periodic continuity
    conditions. The penalty D' B^-1 D integrates the squared second
    derivative over one period; its null space is the constants.
    """
    points = np.atleast_1d(np.asarray(points, dtype=float))
    if points.size == 0:
        raise ConfigError("points must be non-empty")
    if n_basis < 3:
        raise ConfigError("n_basis must be >= 3")
    if period <= 0.0:
        raise ConfigError("period must be > 0")
    knots = origin + np.arange(n_basis) * (period / n_basis)
    b_mat, d_mat, _ = _cyclic_matrices(knots, period)
    interp_map = np.linalg.solve(b_mat, d_mat)
    penalty = d_mat.T @ interp_map
    penalty = 0.5 * (penalty + penalty.T)
    design = _cyclic_rows(points, knots, period, interp_map)
    return SplineBasis(
        design=design,
        penalty=penalty,
        knots=knots,
        kind=KIND_CYCLIC,
        centered=False,
        null_dim=1,
        points=points,
        extrapolation_range=(-np.inf, np.inf),
        period=float(period),
        interp_map=interp_map,
    )


# ---------------------------------------------------------------------------
# centering constraint and the smoothness prior
# ---------------------------------------------------------------------------


def center_basis(basis: SplineBasis) -> SplineBasis:
    """Apply the sum-to-zero constraint by reparametrization (dimension drops by 1)."""
    if basis.centered:
        raise ConfigError("basis is already centered")
    sums = basis.design.sum(axis=0)
    norm = np.linalg.norm(sums)
    if norm < 1e-12:
        raise ConfigError("design columns already sum to zero; nothing to center")
    q_full, _ = np.linalg.qr(sums[:, None] / norm, mode="complete")
    transform = q_full[:, 1:]
    design = basis.design @ transform
    penalty = transform.T @ basis.penalty @ transform
    penalty = 0.5 * (penalty + penalty.T)
    eigvals = np.linalg.eigvalsh(penalty)
    tol = max(eigvals.max(), 0.0) * _NULL_TOL + 1e-14
    null_dim = int(np.sum(eigvals < tol))
    return SplineBasis(
        design=design,
        penalty=penalty,
        knots=basis.knots,
        kind=basis.kind,
        centered=True,
        null_dim=null_dim,
        points=basis.points,
        extrapolation_range=basis.extrapolation_range,
        period=basis.period,
        constraint=transform,
        interp_map=basis.interp_map,
    )


class SplinePriorTerms:
    """Precomputed pieces of the smoothness prior for one penalty matrix."""

    def __init__(self, penalty: np.ndarray, ridge_sd: float = 10.0):
        penalty = np.asarray(penalty, dtype=float)
        eigvals, eigvecs = np.linalg.eigh(penalty)
        tol = max(eigvals.max(), 0.0) * _NULL_TOL + 1e-14
        keep = eigvals > tol
        self.penalty = penalty
        self.rank = int(np.sum(keep))
        self.null_vectors = eigvecs[:, ~keep]
        self.log_pseudo_det = float(np.sum(np.log(eigvals[keep]))) if self.rank else 0.0
        self.ridge_sd = float(ridge_sd)
        n_null = self.null_vectors.shape[1]
        self._const = (
            0.5 * self.log_pseudo_det
            - 0.5 * self.rank * np.log(2.0 * np.pi)
            - n_null * (0.5 * np.log(2.0 * np.pi) + np.log(self.ridge_sd))
        )

    def log_density(self, coefs: np.ndarray, tau: float) -> float:
        if tau <= 0.0:
            raise ConfigError("tau must be > 0")
        quad = float(coefs @ self.penalty @ coefs)
        out = 0.5 * self.rank * np.log(tau) - 0.5 * tau * quad + self._const
        if self.null_vectors.shape[1]:
            proj = self.null_vectors.T @ coefs
            out -= 0.5 * float(proj @ proj) / self.ridge_sd**2
        return out


def spline_log_prior(coefs, penalty, smooth: SmoothnessParam, ridge_sd: float = 10.0) -> float:
    """Log prior of spline coefficients under the penalized-MVN construction.

    rank(S)/2 * log(tau) - tau/2 * c'Sc over the penalized directions, plus a
    proper Normal(0, ridge_sd^2) per penalty null-space direction (constant
    normalizing terms included).
    """
    coefs = np.atleast_1d(np.asarray(coefs, dtype=float))
    penalty = np.asarray(penalty, dtype=float)
    if penalty.shape != (coefs.size, coefs.size):
        raise ConfigError("penalty shape must match the coefficient length")
    return SplinePriorTerms(penalty, ridge_sd=ridge_sd).log_density(coefs, smooth.tau)
