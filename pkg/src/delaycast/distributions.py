"""Exact log-densities and samplers for the building-block distributions.

Everything is computed in log space through ``gammaln`` (counts can reach tens
of thousands, factorials are never formed). Discrete pmfs broadcast over numpy
arrays. Samplers take an explicit ``numpy.random.Generator`` so parallel chains
never share generator state.

The generalized-Dirichlet-multinomial pmf is implemented twice on purpose:
once in closed form and once as the product of its stick-breaking
Beta-Binomial conditionals. The two are kept as each other's oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import solve_triangular
from scipy.special import gammaln, xlog1py, xlogy

from .errors import ConfigError

__all__ = [
    "GDParams",
    "DelayMeanDispersion",
    "NegBinParams",
    "MVNParams",
    "reparam_mean_dispersion",
    "mean_dispersion_from_gd",
    "log_pmf_beta_binomial",
    "log_pmf_binomial",
    "log_pmf_poisson",
    "log_pmf_neg_binomial",
    "log_pmf_gdm",
    "log_pmf_gdm_conditional",
    "log_pmf_multinomial_stick",
    "log_pdf_generalized_dirichlet",
    "log_pdf_mvn",
    "log_pdf_inverse_wishart",
    "log_prior_density",
    "sample_beta_binomial",
    "sample_neg_binomial",
    "sample_gdm",
    "sample_generalized_dirichlet",
    "sample_multinomial_stick",
    "sample_mvn",
    "sample_inverse_wishart",
]

# Above this concentration, gammaln differences lose absolute precision to
# cancellation, so rising factorials are summed exactly instead.
_HUGE_CONCENTRATION = 1e6
_MAX_EXACT_TERMS = 100_000


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------


def _positive_vector(value, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ConfigError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ConfigError(f"{name} entries must be finite and > 0")
    return arr


@dataclass(frozen=True)
class GDParams:
    """Generalized-Dirichlet shape parameters, one (alpha, beta) pair per stick."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = _positive_vector(self.alpha, "alpha")
        beta = _positive_vector(self.beta, "beta")
        if alpha.size != beta.size:
            raise ConfigError("alpha and beta must have the same length")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def n_categories(self) -> int:
        return self.alpha.size + 1


@dataclass(frozen=True)
class DelayMeanDispersion:
    """Stick-breaking means in (0,1) and dispersions > 0, one pair per stick."""

    nu: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        phi = _positive_vector(self.phi, "phi")
        if nu.size != phi.size:
            raise ConfigError("nu and phi must have the same length")
        if np.any(nu <= 0.0) or np.any(nu >= 1.0):
            raise ConfigError("nu entries must lie strictly inside (0, 1)")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "phi", phi)


def reparam_mean_dispersion(md: DelayMeanDispersion) -> GDParams:
    """Map (nu, phi) to (alpha, beta) = (nu*phi, (1-nu)*phi)."""
    return GDParams(alpha=md.nu * md.phi, beta=(1.0 - md.nu) * md.phi)


def mean_dispersion_from_gd(params: GDParams) -> DelayMeanDispersion:
    """Inverse of :func:`reparam_mean_dispersion`."""
    total = params.alpha + params.beta
    return DelayMeanDispersion(nu=params.alpha / total, phi=total)


@dataclass(frozen=True)
class NegBinParams:
    """Negative-Binomial in mean/dispersion form: variance = mean + mean^2/dispersion."""

    mean: float
    dispersion: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and self.mean > 0.0):
            raise ConfigError("mean must be finite and > 0")
        if not self.dispersion > 0.0:
            raise ConfigError("dispersion must be > 0")


@dataclass(frozen=True)
class MVNParams:
    """Multivariate-Normal mean and covariance; covariance must admit a Cholesky factor."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ConfigError("covariance shape must match the mean length")
        asym = np.max(np.abs(cov - cov.T)) if cov.size else 0.0
        scale = max(np.max(np.abs(cov)), 1.0)
        if asym > 1e-12 * scale:
            raise ConfigError("covariance must be symmetric within 1e-12")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("covariance is not positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


# ---------------------------------------------------------------------------
# internal helpers
# ---------------------------------------------------------------------------


def _log_rising(conc, count):
    """log Gamma(conc + count) - log Gamma(conc) for integer count >= 0.

    For huge concentrations the product formula is summed term by term, which
    keeps absolute error at the 1e-13 level where plain gammaln differences
    would cancel catastrophically.
    """
    conc_b, count_b = np.broadcast_arrays(
        np.asarray(conc, dtype=float), np.asarray(count, dtype=float)
    )
    out = gammaln(conc_b + count_b) - gammaln(conc_b)
    exact = (conc_b > _HUGE_CONCENTRATION) & (count_b > 0) & (count_b <= _MAX_EXACT_TERMS)
    if np.any(exact):
        out = np.atleast_1d(out)
        conc_f = np.atleast_1d(conc_b)
        count_f = np.atleast_1d(count_b)
        for idx in zip(*np.nonzero(np.atleast_1d(exact))):
            a = conc_f[idx]
            k = int(count_f[idx])
            out[idx] = np.log(a + np.arange(k, dtype=float)).sum()
        out = out.reshape(conc_b.shape)
    if np.ndim(conc_b) == 0:
        return float(out)
    return out


def _check_counts(value, name: str):
    arr = np.asarray(value)
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise ValueError(f"{name} must be integer-valued")
    return arr.astype(float)


def _log_choose(n, z):
    return gammaln(n + 1.0) - gammaln(z + 1.0) - gammaln(n - z + 1.0)


def _maybe_scalar(x):
    return float(x) if np.ndim(x) == 0 else x


# ---------------------------------------------------------------------------
# log pmfs / pdfs
# ---------------------------------------------------------------------------


def log_pmf_beta_binomial(z, alpha, beta, n):
    """Beta-Binomial log pmf; finite for all valid (z, alpha, beta, n).

    Raises ValueError when z lies outside {0, ..., n} (a domain error, which is
    distinct from a log-probability of -inf).
    """
    z = _check_counts(z, "z")
    n = _check_counts(n, "n")
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(alpha <= 0.0) or np.any(beta <= 0.0):
        raise ValueError("alpha and beta must be > 0")
    if np.any(n < 0):
        raise ValueError("n must be >= 0")
    if np.any(z < 0) or np.any(z > n):
        raise ValueError("z must lie in {0, ..., n}")
    out = (
        _log_choose(n, z)
        + _log_rising(alpha, z)
        + _log_rising(beta, n - z)
        - _log_rising(alpha + beta, n)
    )
    return _maybe_scalar(out)


def log_pmf_binomial(y, n, pi):
    """Binomial log pmf via log-gamma, safe at pi = 0 and pi = 1."""
    y = _check_counts(y, "y")
    n = _check_counts(n, "n")
    pi = np.asarray(pi, dtype=float)
    if np.any((pi < 0.0) | (pi > 1.0)):
        raise ValueError("pi must lie in [0, 1]")
    if np.any(y < 0) or np.any(y > n):
        raise ValueError("y must lie in {0, ..., n}")
    out = _log_choose(n, y) + xlogy(y, pi) + xlog1py(n - y, -pi)
    return _maybe_scalar(out)


def log_pmf_poisson(y, rate):
    y = _check_counts(y, "y")
    rate = np.asarray(rate, dtype=float)
    if np.any(rate <= 0.0):
        raise ValueError("rate must be > 0")
    out = xlogy(y, rate) - rate - gammaln(y + 1.0)
    return _maybe_scalar(out)


def log_pmf_neg_binomial(y, mean, dispersion):
    """Negative-Binomial log pmf in mean/dispersion form.

    mean = lambda, variance = lambda + lambda^2/dispersion; dispersion -> inf
    recovers the Poisson.
    """
    y = _check_counts(y, "y")
    if np.any(y < 0):
        raise ValueError("y must be >= 0")
    lam = np.asarray(mean, dtype=float)
    theta = np.asarray(dispersion, dtype=float)
    if np.any(lam <= 0.0) or np.any(theta <= 0.0):
        raise ValueError("mean and dispersion must be > 0")
    out = (
        _log_rising(theta, y)
        - gammaln(y + 1.0)
        - theta * np.log1p(lam / theta)
        + y * (np.log(lam) - np.log(theta + lam))
    )
    return _maybe_scalar(out)


def _check_gdm_args(z, params: GDParams, y: int):
    z = _check_counts(z, "z")
    if z.ndim != 1 or z.size != params.n_categories:
        raise ValueError("z must be a vector of length len(alpha) + 1")
    if np.any(z < 0):
        raise ValueError("z entries must be >= 0")
    if int(round(float(z.sum()))) != int(y):
        raise ValueError("z must sum to y")
    return z


def log_pmf_gdm(z, params: GDParams, y: int) -> float:
    """Generalized-Dirichlet-Multinomial log pmf, closed form."""
    z = _check_gdm_args(z, params, y)
    a, b = params.alpha, params.beta
    tail = np.cumsum(z[::-1])[::-1]  # tail[i] = z_i + ... + z_k
    head = z[:-1]
    terms = (
        gammaln(head + a)
        + gammaln(tail[1:] + b)
        - (gammaln(a) + gammaln(b) - gammaln(a + b))
        - gammaln(head + 1.0)
        - gammaln(a + b + tail[:-1])
    )
    return float(gammaln(float(y) + 1.0) - gammaln(z[-1] + 1.0) + terms.sum())


def log_pmf_gdm_conditional(z, params: GDParams, y: int) -> float:
    """Same pmf as :func:`log_pmf_gdm`, via the Beta-Binomial conditional chain."""
    z = _check_gdm_args(z, params, y)
    total = 0.0
    remaining = float(y)
    for i in range(params.alpha.size):
        total += log_pmf_beta_binomial(z[i], params.alpha[i], params.beta[i], remaining)
        remaining -= z[i]
    return float(total)


def log_pmf_multinomial_stick(z, nu, y: int) -> float:
    """Multinomial log pmf with cell probabilities built by stick-breaking at nu.

    This is the dispersion -> inf limit of the GDM: a chain of Binomial
    conditionals with success probability nu_i on the remaining count.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    z = _check_counts(z, "z")
    if z.size != nu.size + 1:
        raise ValueError("z must be a vector of length len(nu) + 1")
    if np.any(z < 0):
        raise ValueError("z entries must be >= 0")
    if int(round(float(z.sum()))) != int(y):
        raise ValueError("z must sum to y")
    total = 0.0
    remaining = float(y)
    for i in range(nu.size):
        total += log_pmf_binomial(z[i], remaining, nu[i])
        remaining -= z[i]
    return float(total)


def _signed_power_log(exponent, value):
    # exponent * log(value) with the 0 * log(0) = 0 convention
    with np.errstate(divide="ignore"):
        lv = np.log(value)
    return np.where(exponent == 0.0, 0.0, exponent * lv)


def log_pdf_generalized_dirichlet(p, params: GDParams) -> float:
    """Generalized-Dirichlet log density on the simplex.

    The leading factor (sum of all components)^(beta_0 - alpha_1 - beta_1)
    multiplies 1 and is omitted; beta_0 never enters. Boundary components give
    -inf (or +inf for exponents < 0) under the 0*log(0) = 0 convention.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    a, b = params.alpha, params.beta
    if p.size != params.n_categories:
        raise ValueError("p must be a vector of length len(alpha) + 1")
    if np.any(p < 0.0):
        raise ValueError("p entries must be >= 0")
    if abs(p.sum() - 1.0) > 1e-10:
        raise ValueError("p must sum to 1 within 1e-10")
    tail = np.cumsum(p[::-1])[::-1]
    out = float(np.sum(_signed_power_log(a - 1.0, p[:-1])))
    out += float(_signed_power_log(b[-1] - 1.0, p[-1]))
    out -= float(np.sum(gammaln(a) + gammaln(b) - gammaln(a + b)))
    if a.size > 1:
        out += float(np.sum(_signed_power_log(b[:-1] - (a[1:] + b[1:]), tail[1:-1])))
    return out


def log_pdf_mvn(x, mean, cov) -> float | np.ndarray:
    """Multivariate-Normal log density; x may carry leading batch dimensions."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    p = mean.size
    chol = np.linalg.cholesky(cov)
    dev = np.reshape(x - mean, (-1, p))
    sol = solve_triangular(chol, dev.T, lower=True)
    quad = np.sum(sol**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * (p * np.log(2.0 * np.pi) + logdet + quad)
    if x.ndim == 1:
        return float(out[0])
    return out.reshape(x.shape[:-1])


def log_pdf_inverse_wishart(x, scale, df: float) -> float:
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if df <= p - 1:
        raise ConfigError("inverse-Wishart degrees of freedom must exceed dim - 1")
    return float(stats.invwishart.logpdf(np.asarray(x, dtype=float), df=df, scale=scale))


_PRIOR_KINDS = ("normal", "half_normal", "exponential", "log_normal", "inverse_wishart")


def log_prior_density(kind: str, hyper: dict, x) -> float:
    """Log density of one of the prior families used by the models.

    kind is one of 'normal' (mean, sd), 'half_normal' (sd), 'exponential'
    (rate), 'log_normal' (meanlog, sdlog), 'inverse_wishart' (scale, df).
    Values outside the support give -inf; bad hyperparameters raise
    ConfigError.
    """
    if kind == "normal":
        mean, sd = hyper["mean"], hyper["sd"]
        if sd <= 0.0:
            raise ConfigError("normal sd must be > 0")
        zscore = (x - mean) / sd
        return float(-0.5 * np.log(2.0 * np.pi) - np.log(sd) - 0.5 * zscore**2)
    if kind == "half_normal":
        sd = hyper["sd"]
        if sd <= 0.0:
            raise ConfigError("half-normal sd must be > 0")
        if x < 0.0:
            return -np.inf
        return float(np.log(2.0) - 0.5 * np.log(2.0 * np.pi) - np.log(sd) - 0.5 * (x / sd) ** 2)
    if kind == "exponential":
        rate = hyper["rate"]
        if rate <= 0.0:
            raise ConfigError("exponential rate must be > 0")
        if x < 0.0:
            return -np.inf
        return float(np.log(rate) - rate * x)
    if kind == "log_normal":
        meanlog, sdlog = hyper["meanlog"], hyper["sdlog"]
        if sdlog <= 0.0:
            raise ConfigError("log-normal sdlog must be > 0")
        if x <= 0.0:
            return -np.inf
        zscore = (np.log(x) - meanlog) / sdlog
        return float(
            -0.5 * np.log(2.0 * np.pi) - np.log(sdlog) - np.log(x) - 0.5 * zscore**2
        )
    if kind == "inverse_wishart":
        return log_pdf_inverse_wishart(x, hyper["scale"], hyper["df"])
    raise ConfigError(f"unknown prior kind {kind!r}; expected one of {_PRIOR_KINDS}")


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def sample_beta_binomial(alpha, beta, n, rng: np.random.Generator, size=None):
    p = rng.beta(alpha, beta, size=size)
    return rng.binomial(np.asarray(n, dtype=np.int64), p)


def sample_neg_binomial(mean, dispersion, rng: np.random.Generator, size=None):
    """Gamma-Poisson mixture draw; dispersion = inf degenerates to Poisson."""
    lam = np.asarray(mean, dtype=float)
    theta = np.asarray(dispersion, dtype=float)
    if np.all(np.isinf(theta)):
        return rng.poisson(np.broadcast_to(lam, size if size is not None else lam.shape))
    shape = theta
    rate_mean = rng.gamma(shape, lam / shape, size=size)
    return rng.poisson(rate_mean)


def _stick_shape(y, size):
    y_arr = np.asarray(y, dtype=np.int64)
    if np.any(y_arr < 0):
        raise ValueError("y must be >= 0")
    if size is None:
        shape = y_arr.shape
    elif np.isscalar(size):
        shape = (int(size),) + y_arr.shape
    else:
        shape = tuple(size) + y_arr.shape
    return np.broadcast_to(y_arr, shape).copy(), shape


def sample_gdm(params: GDParams, y, rng: np.random.Generator, size=None):
    """Draw delay-cell vectors from the GDM by sequential Beta-Binomial sticks.

    y may be a scalar or an array; ``size`` prepends extra replication axes.
    Rows always sum to y.
    """
    remaining, shape = _stick_shape(y, size)
    k = params.n_categories
    out = np.empty(shape + (k,), dtype=np.int64)
    for i in range(k - 1):
        p = rng.beta(params.alpha[i], params.beta[i], size=shape)
        z_i = rng.binomial(remaining, p)
        out[..., i] = z_i
        remaining -= z_i
    out[..., k - 1] = remaining
    return out


def sample_multinomial_stick(nu, y, rng: np.random.Generator, size=None):
    """Multinomial draw via Binomial stick-breaking at means nu (GDM phi -> inf limit)."""
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    remaining, shape = _stick_shape(y, size)
    k = nu.size + 1
    out = np.empty(shape + (k,), dtype=np.int64)
    for i in range(k - 1):
        z_i = rng.binomial(remaining, nu[i])
        out[..., i] = z_i
        remaining -= z_i
    out[..., k - 1] = remaining
    return out


def sample_generalized_dirichlet(params: GDParams, rng: np.random.Generator, size=None):
    """Simplex draws via independent Beta sticks."""
    k = params.n_categories
    if size is None:
        shape = ()
    elif np.isscalar(size):
        shape = (int(size),)
    else:
        shape = tuple(size)
    v = rng.beta(params.alpha, params.beta, size=shape + (k - 1,))
    out = np.empty(shape + (k,), dtype=float)
    stick = np.ones(shape)
    for i in range(k - 1):
        out[..., i] = stick * v[..., i]
        stick = stick * (1.0 - v[..., i])
    out[..., k - 1] = stick
    return out


def sample_mvn(mean, cov, rng: np.random.Generator, size=None):
    mean = np.asarray(mean, dtype=float)
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    p = mean.size
    if size is None:
        return mean + chol @ rng.standard_normal(p)
    n = int(size)
    return mean + rng.standard_normal((n, p)) @ chol.T


def sample_inverse_wishart(scale, df: float, rng: np.random.Generator):
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if df <= p - 1:
        raise ConfigError("inverse-Wishart degrees of freedom must exceed dim - 1")
    return stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
