"""Model variants for delayed-reporting counts: GDM, GLM, GLM+ and GDM-UR.

Each model assembles linear predictors from spline bases, exposes its
log-likelihood / log-posterior as sums of named terms, and describes itself to
the sampler as a list of update blocks. Data terms are organized so that each
block's conditional touches as few terms as possible:

* the total-count side (intercept, trend, seasonal, theta) reads one
  negative-binomial term over all rows;
* each modeled delay reads one term over the observed cells of its column;
* latent totals enter both, so the sweep that updates them invalidates all
  cached terms.

Unobserved delay-cell suffixes never appear as latent variables: the
stick-breaking conditional chain beyond the observed prefix integrates to
one, so partial rows contribute their prefix terms only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln, xlog1py, xlogy

from . import distributions as dist
from .errors import ConfigError
from .splines import (
    SmoothnessParam,
    SplineBasis,
    SplinePriorTerms,
    build_cubic_basis,
    build_cyclic_basis,
    center_basis,
)
from .triangle import ReportingTriangle

__all__ = [
    "GDM",
    "GLM",
    "GLMPLUS",
    "GDM_UR",
    "VARIANTS",
    "NormalPrior",
    "PriorConfig",
    "ModelSpec",
    "ParameterState",
    "Block",
    "LatentSweep",
    "RowVectorSweep",
    "GibbsStep",
    "build_model",
    "linear_predictor_total",
    "linear_predictor_delay",
    "gdm_log_likelihood",
    "glm_log_likelihood",
    "glmplus_log_likelihood",
    "gdm_ur_log_likelihood",
    "log_posterior",
]

GDM = "gdm"
GLM = "glm"
GLMPLUS = "glmplus"
GDM_UR = "gdm_ur"
VARIANTS = (GDM, GLM, GLMPLUS, GDM_UR)

# GDM-UR is unidentifiable without an informative reporting-rate prior; we
# treat anything wider than this (on the logit scale) as non-informative.
_MAX_INFORMATIVE_REPORTING_SD = 2.5


@dataclass(frozen=True)
class NormalPrior:
    mean: float
    sd: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and self.sd > 0.0 and np.isfinite(self.sd)):
            raise ConfigError("normal prior needs finite mean and sd > 0")


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of every prior block; defaults follow the case-study choices."""

    intercept_sd: float = 10.0
    psi_sd: float = 10.0
    theta_rate: float = 0.01
    phi_log_mean: float = 2.0
    phi_log_sd: float = float(np.sqrt(2.0))
    trend_smooth_sd: float = 1.0
    seasonal_smooth_sd: float = 1.0
    delay_smooth_sd: float = float(np.sqrt(2.0))
    dispersion_smooth_sd: float = float(np.sqrt(2.0))
    ridge_sd: float = 10.0

    def __post_init__(self):
        for name in dataclasses.asdict(self):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"prior setting {name} must be > 0")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model choice: variant, horizon, basis sizes and priors."""

    variant: str = GDM
    delay_horizon: int = 8
    trend_basis_dim: int = 10
    seasonal_basis_dim: int = 8
    delay_basis_dim: int = 6
    seasonal_period: float = 52.0
    max_forecast_horizon: int = 104
    multinomial_limit: bool = False
    poisson_cells: bool = False
    dispersion_time_spline: bool = False
    priors: PriorConfig = field(default_factory=PriorConfig)
    reporting_rate_prior: NormalPrior | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.delay_horizon < 1:
            raise ConfigError("delay_horizon must be >= 1")
        for name in ("trend_basis_dim", "seasonal_basis_dim", "delay_basis_dim"):
            dim = getattr(self, name)
            if dim != 0 and dim < 3:
                raise ConfigError(f"{name} must be 0 (omit the smooth) or >= 3")
        if self.seasonal_period <= 0.0:
            raise ConfigError("seasonal_period must be > 0")
        if self.max_forecast_horizon < 1:
            raise ConfigError("max_forecast_horizon must be >= 1")
        if self.multinomial_limit and self.variant not in (GDM, GDM_UR):
            raise ConfigError("multinomial_limit applies to the GDM variants only")
        if self.poisson_cells and self.variant not in (GLM, GLMPLUS):
            raise ConfigError("poisson_cells applies to the GLM variants only")
        if self.multinomial_limit and self.dispersion_time_spline:
            raise ConfigError("dispersion_time_spline is meaningless in the multinomial limit")
        if self.variant == GDM_UR:
            if self.reporting_rate_prior is None:
                raise ConfigError(
                    "the under-reporting variant requires an informative "
                    "reporting_rate_prior (the model is not identifiable without one)"
                )
            if self.reporting_rate_prior.sd > _MAX_INFORMATIVE_REPORTING_SD:
                raise ConfigError(
                    "reporting_rate_prior sd "
                    f"{self.reporting_rate_prior.sd} is too wide to be informative "
                    f"(must be <= {_MAX_INFORMATIVE_REPORTING_SD} on the logit scale)"
                )

    @property
    def n_delay_effects(self) -> int:
        """Delay columns carrying their own (psi, spline) effects."""
        return self.delay_horizon if self.variant in (GDM, GDM_UR) else self.delay_horizon + 1

    def psi_prior_means(self) -> np.ndarray:
        """Prior means for the delay intercepts.

        For the GDM variants the mode implies roughly equal expected shares
        across the D+1 cells: logit(1 / (D + 2 - d)). The GLM variants use 0.
        """
        if self.variant in (GDM, GDM_UR):
            d = np.arange(1, self.delay_horizon + 1, dtype=float)
            share = 1.0 / (self.delay_horizon + 2.0 - d)
            return np.log(share / (1.0 - share))
        return np.zeros(self.n_delay_effects)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        data = dict(data)
        if "priors" in data and isinstance(data["priors"], dict):
            data["priors"] = PriorConfig(**data["priors"])
        if data.get("reporting_rate_prior") is not None and isinstance(
            data["reporting_rate_prior"], dict
        ):
            data["reporting_rate_prior"] = NormalPrior(**data["reporting_rate_prior"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model settings: {sorted(unknown)}")
        return cls(**data)

    def to_yaml(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            yaml.safe_dump(self.to_dict(), handle, sort_keys=False)

    @classmethod
    def from_yaml(cls, path) -> "ModelSpec":
        with open(path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
        if not isinstance(data, dict):
            raise ConfigError("model spec document must be a mapping")
        return cls.from_dict(data)


@dataclass
class ParameterState:
    """One chain's current parameter values; exclusively owned by its chain."""

    iota: float = 0.0
    theta: float | np.ndarray | None = None
    psi: np.ndarray | None = None
    phi: np.ndarray | None = None
    trend_coefs: np.ndarray | None = None
    seasonal_coefs: np.ndarray | None = None
    delay_coefs: list[np.ndarray] | None = None
    dispersion_coefs: list[np.ndarray] | None = None
    sigma_trend: float | None = None
    sigma_seasonal: float | None = None
    sigma_delay: np.ndarray | None = None
    sigma_dispersion: np.ndarray | None = None
    latent_y: np.ndarray | None = None
    latent_x: np.ndarray | None = None
    pi_intercept: float | None = None
    log_mu: np.ndarray | None = None
    sigma_mat: np.ndarray | None = None

    def copy(self) -> "ParameterState":
        def dup(value):
            if isinstance(value, np.ndarray):
                return value.copy()
            if isinstance(value, list):
                return [v.copy() for v in value]
            return value

        return ParameterState(**{f.name: dup(getattr(self, f.name)) for f in dataclasses.fields(self)})


# ---------------------------------------------------------------------------
# update descriptors consumed by the sampler
# ---------------------------------------------------------------------------


@dataclass
class Block:
    """A random-walk Metropolis block: scalar or coefficient vector."""

    name: str
    get: object
    set: object
    term_keys: tuple = ()
    prior_keys: tuple = ()
    vector: bool = False
    positive: bool = False
    init_scale: float = 0.3


@dataclass
class LatentSweep:
    """Integer random-walk updates for one latent count per listed row."""

    name: str
    rows: np.ndarray
    get: object
    set: object
    lower: object
    upper: object
    row_target: object
    init_scale: float = 5.0


@dataclass
class RowVectorSweep:
    """Per-row vector random-walk updates (GLM+ latent log-means)."""

    name: str
    rows: np.ndarray
    dim: int
    get: object
    set: object
    row_target: object
    init_scale: float = 0.1


@dataclass
class GibbsStep:
    """Exact conditional draw (conjugate update)."""

    name: str
    draw: object


# ---------------------------------------------------------------------------
# fast internal log-pmf kernels (callers guarantee domain validity; violated
# bounds return -inf, the rejection semantics of the sampler)
# ---------------------------------------------------------------------------


def _nb_loglik(y, lam, theta) -> float:
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0.0):
        return -np.inf
    y = np.asarray(y, dtype=float)
    out = (
        gammaln(y + theta)
        - gammaln(theta)
        - gammaln(y + 1.0)
        - theta * np.log1p(lam / theta)
        + y * (np.log(lam) - np.log(theta + lam))
    )
    return float(np.sum(out))


def _poisson_loglik(y, lam) -> float:
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0.0):
        return -np.inf
    y = np.asarray(y, dtype=float)
    return float(np.sum(xlogy(y, lam) - lam - gammaln(y + 1.0)))


def _bb_loglik(z, alpha, beta, n) -> float:
    if np.any(n < z):
        return -np.inf
    z = np.asarray(z, dtype=float)
    n = np.asarray(n, dtype=float)
    out = (
        gammaln(n + 1.0)
        - gammaln(z + 1.0)
        - gammaln(n - z + 1.0)
        + gammaln(z + alpha)
        + gammaln(n - z + beta)
        - gammaln(n + alpha + beta)
        - (gammaln(alpha) + gammaln(beta) - gammaln(alpha + beta))
    )
    return float(np.sum(out))


def _binom_loglik(z, n, p) -> float:
    if np.any(n < z):
        return -np.inf
    z = np.asarray(z, dtype=float)
    n = np.asarray(n, dtype=float)
    out = (
        gammaln(n + 1.0)
        - gammaln(z + 1.0)
        - gammaln(n - z + 1.0)
        + xlogy(z, p)
        + xlog1py(n - z, -p)
    )
    return float(np.sum(out))


def _normal_logpdf(x, mean, sd) -> float:
    return float(-0.5 * np.log(2.0 * np.pi) - np.log(sd) - 0.5 * ((x - mean) / sd) ** 2)


def _half_normal_logpdf(x, sd) -> float:
    if x < 0.0:
        return -np.inf
    return float(np.log(2.0) - 0.5 * np.log(2.0 * np.pi) - np.log(sd) - 0.5 * (x / sd) ** 2)


def _exponential_logpdf(x, rate) -> float:
    if x < 0.0:
        return -np.inf
    return float(np.log(rate) - rate * x)


def _log_normal_logpdf(x, meanlog, sdlog) -> float:
    if x <= 0.0:
        return -np.inf
    z = (np.log(x) - meanlog) / sdlog
    return float(-0.5 * np.log(2.0 * np.pi) - np.log(sdlog) - np.log(x) - 0.5 * z * z)


# ---------------------------------------------------------------------------
# base model
# ---------------------------------------------------------------------------


class _BaseModel:
    variant: str = ""

    def __init__(self, spec: ModelSpec, tri: ReportingTriangle):
        if spec.variant != self.variant:
            raise ConfigError(f"spec variant {spec.variant!r} does not match {self.variant!r}")
        if tri.n_times > 0 and tri.n_delays != spec.delay_horizon + 1:
            raise ConfigError(
                f"triangle has {tri.n_delays} delay columns but the model needs "
                f"delay_horizon + 1 = {spec.delay_horizon + 1}; collapse the remainder first"
            )
        self.spec = spec
        self.tri = tri
        self.n_times = tri.n_times
        self.times = np.arange(1, tri.n_times + 1, dtype=float)
        self.trend_basis: SplineBasis | None = None
        self.seasonal_basis: SplineBasis | None = None
        self.delay_basis: SplineBasis | None = None
        if tri.n_times > 0:
            ext = (0.0, float(tri.n_times + spec.max_forecast_horizon))
            if spec.trend_basis_dim:
                self.trend_basis = center_basis(
                    build_cubic_basis(self.times, spec.trend_basis_dim, extrapolation_range=ext)
                )
            if spec.seasonal_basis_dim:
                self.seasonal_basis = center_basis(
                    build_cyclic_basis(self.times, spec.seasonal_basis_dim, spec.seasonal_period)
                )
            if spec.delay_basis_dim:
                self.delay_basis = center_basis(
                    build_cubic_basis(self.times, spec.delay_basis_dim, extrapolation_range=ext)
                )
        self._trend_prior = (
            SplinePriorTerms(self.trend_basis.penalty, spec.priors.ridge_sd)
            if self.trend_basis is not None
            else None
        )
        self._seasonal_prior = (
            SplinePriorTerms(self.seasonal_basis.penalty, spec.priors.ridge_sd)
            if self.seasonal_basis is not None
            else None
        )
        self._delay_prior = (
            SplinePriorTerms(self.delay_basis.penalty, spec.priors.ridge_sd)
            if self.delay_basis is not None
            else None
        )
        self.term_fns: dict = {}
        self.prior_fns: dict = {}
        self._schedule: list = []

    # -- predictors --------------------------------------------------------

    def total_log_rate(self, state: ParameterState) -> np.ndarray:
        """log lambda over the triangle rows."""
        pred = np.full(self.n_times, state.iota)
        if self.trend_basis is not None:
            pred = pred + self.trend_basis.design @ state.trend_coefs
        if self.seasonal_basis is not None:
            pred = pred + self.seasonal_basis.design @ state.seasonal_coefs
        return pred

    def total_log_rate_at(self, state: ParameterState, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        pred = np.full(times.size, state.iota)
        if self.trend_basis is not None:
            pred = pred + self.trend_basis.evaluate(times) @ state.trend_coefs
        if self.seasonal_basis is not None:
            pred = pred + self.seasonal_basis.evaluate(times) @ state.seasonal_coefs
        return pred

    def delay_predictor(self, state: ParameterState, d: int) -> np.ndarray:
        """Linear predictor of delay effect d (0-based) over the triangle rows."""
        pred = np.full(self.n_times, state.psi[d])
        if self.delay_basis is not None:
            pred = pred + self.delay_basis.design @ state.delay_coefs[d]
        return pred

    def delay_predictor_at(self, state: ParameterState, times, d: int) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        pred = np.full(times.size, state.psi[d])
        if self.delay_basis is not None:
            pred = pred + self.delay_basis.evaluate(times) @ state.delay_coefs[d]
        return pred

    # -- posterior assembly -------------------------------------------------

    def log_likelihood(self, state: ParameterState) -> float:
        total = 0.0
        for fn in self.term_fns.values():
            total += fn(state)
            if total == -np.inf:
                return -np.inf
        return total

    def log_prior(self, state: ParameterState) -> float:
        total = 0.0
        for fn in self.prior_fns.values():
            total += fn(state)
            if total == -np.inf:
                return -np.inf
        return total

    def log_posterior(self, state: ParameterState) -> float:
        like = self.log_likelihood(state)
        if like == -np.inf:
            return -np.inf
        prior = self.log_prior(state)
        return like + prior

    def update_schedule(self) -> list:
        return self._schedule

    def posterior_report(self, state: ParameterState) -> dict:
        """Per-term values, used to diagnose initialization failures."""
        report = {f"likelihood:{key}": fn(state) for key, fn in self.term_fns.items()}
        report.update({f"prior:{key}": fn(state) for key, fn in self.prior_fns.items()})
        return report

    # -- shared construction helpers ----------------------------------------

    def _register_total_side_blocks(self, nb_keys: tuple):
        spec = self.spec
        priors = spec.priors
        self.prior_fns["iota"] = lambda s: _normal_logpdf(s.iota, 0.0, priors.intercept_sd)
        self._schedule.append(
            Block(
                "iota",
                get=lambda s: s.iota,
                set=lambda s, v: setattr(s, "iota", float(v)),
                term_keys=nb_keys,
                prior_keys=("iota",),
                init_scale=0.1,
            )
        )
        if self.trend_basis is not None:
            self.prior_fns["trend"] = lambda s, terms=self._trend_prior: terms.log_density(
                s.trend_coefs, s.sigma_trend**-2.0
            )
            self.prior_fns["sigma_trend"] = lambda s: _half_normal_logpdf(
                s.sigma_trend, priors.trend_smooth_sd
            )
            self._schedule.append(
                Block(
                    "trend_coefs",
                    get=lambda s: s.trend_coefs,
                    set=lambda s, v: setattr(s, "trend_coefs", v),
                    term_keys=nb_keys,
                    prior_keys=("trend",),
                    vector=True,
                    init_scale=0.05,
                )
            )
            self._schedule.append(
                Block(
                    "sigma_trend",
                    get=lambda s: s.sigma_trend,
                    set=lambda s, v: setattr(s, "sigma_trend", float(v)),
                    prior_keys=("trend", "sigma_trend"),
                    positive=True,
                    init_scale=0.4,
                )
            )
        if self.seasonal_basis is not None:
            self.prior_fns["seasonal"] = lambda s, terms=self._seasonal_prior: terms.log_density(
                s.seasonal_coefs, s.sigma_seasonal**-2.0
            )
            self.prior_fns["sigma_seasonal"] = lambda s: _half_normal_logpdf(
                s.sigma_seasonal, priors.seasonal_smooth_sd
            )
            self._schedule.append(
                Block(
                    "seasonal_coefs",
                    get=lambda s: s.seasonal_coefs,
                    set=lambda s, v: setattr(s, "seasonal_coefs", v),
                    term_keys=nb_keys,
                    prior_keys=("seasonal",),
                    vector=True,
                    init_scale=0.05,
                )
            )
            self._schedule.append(
                Block(
                    "sigma_seasonal",
                    get=lambda s: s.sigma_seasonal,
                    set=lambda s, v: setattr(s, "sigma_seasonal", float(v)),
                    prior_keys=("seasonal", "sigma_seasonal"),
                    positive=True,
                    init_scale=0.4,
                )
            )

    def _register_delay_effect_blocks(self, d: int, term_key, with_phi: bool):
        """psi_d, spline coefs, smoothness sigma and (optionally) phi_d for one delay."""
        spec = self.spec
        priors = spec.priors
        psi_mean = float(self.spec.psi_prior_means()[d])
        self.prior_fns[f"psi_{d}"] = lambda s, m=psi_mean: _normal_logpdf(
            s.psi[d], m, priors.psi_sd
        )
        self._schedule.append(
            Block(
                f"psi[{d + 1}]",
                get=lambda s, d=d: s.psi[d],
                set=lambda s, v, d=d: s.psi.__setitem__(d, float(v)),
                term_keys=(term_key,),
                prior_keys=(f"psi_{d}",),
                init_scale=0.2,
            )
        )
        if self.delay_basis is not None:
            self.prior_fns[f"delay_{d}"] = lambda s, d=d, terms=self._delay_prior: terms.log_density(
                s.delay_coefs[d], s.sigma_delay[d] ** -2.0
            )
            self.prior_fns[f"sigma_delay_{d}"] = lambda s, d=d: _half_normal_logpdf(
                s.sigma_delay[d], priors.delay_smooth_sd
            )
            self._schedule.append(
                Block(
                    f"delay_coefs_{d + 1}",
                    get=lambda s, d=d: s.delay_coefs[d],
                    set=lambda s, v, d=d: s.delay_coefs.__setitem__(d, v),
                    term_keys=(term_key,),
                    prior_keys=(f"delay_{d}",),
                    vector=True,
                    init_scale=0.05,
                )
            )
            self._schedule.append(
                Block(
                    f"sigma_delay[{d + 1}]",
                    get=lambda s, d=d: s.sigma_delay[d],
                    set=lambda s, v, d=d: s.sigma_delay.__setitem__(d, float(v)),
                    prior_keys=(f"delay_{d}", f"sigma_delay_{d}"),
                    positive=True,
                    init_scale=0.4,
                )
            )
        if with_phi:
            self.prior_fns[f"phi_{d}"] = lambda s, d=d: _log_normal_logpdf(
                s.phi[d], priors.phi_log_mean, priors.phi_log_sd
            )
            self._schedule.append(
                Block(
                    f"phi[{d + 1}]",
                    get=lambda s, d=d: s.phi[d],
                    set=lambda s, v, d=d: s.phi.__setitem__(d, float(v)),
                    term_keys=(term_key,),
                    prior_keys=(f"phi_{d}",),
                    positive=True,
                    init_scale=0.3,
                )
            )

    def _init_common(self, state: ParameterState, rng: np.random.Generator):
        spec = self.spec
        if self.trend_basis is not None:
            state.trend_coefs = 0.01 * rng.standard_normal(self.trend_basis.n_basis)
            state.sigma_trend = 0.5 * np.exp(0.2 * rng.standard_normal())
        if self.seasonal_basis is not None:
            state.seasonal_coefs = 0.01 * rng.standard_normal(self.seasonal_basis.n_basis)
            state.sigma_seasonal = 0.5 * np.exp(0.2 * rng.standard_normal())
        n_eff = spec.n_delay_effects
        state.psi = spec.psi_prior_means() + 0.2 * rng.standard_normal(n_eff)
        if self.delay_basis is not None:
            state.delay_coefs = [
                0.01 * rng.standard_normal(self.delay_basis.n_basis) for _ in range(n_eff)
            ]
            state.sigma_delay = 0.5 * np.exp(0.2 * rng.standard_normal(n_eff))


# ---------------------------------------------------------------------------
# GDM: negative-binomial totals + Beta-Binomial stick-breaking delay chain
# ---------------------------------------------------------------------------


class GdmModel(_BaseModel):
    variant = GDM

    def __init__(self, spec: ModelSpec, tri: ReportingTriangle):
        super().__init__(spec, tri)
        d_horizon = spec.delay_horizon
        mask = tri.observed_mask
        cells = tri.cells
        cum_before = np.zeros_like(cells)
        if cells.shape[1] > 1:
            cum_before[:, 1:] = np.cumsum(cells[:, :-1], axis=1)
        self._obs_rows = []
        self._obs_z = []
        self._obs_cum = []
        self._obs_delay_design = []
        for d in range(d_horizon):
            rows = np.flatnonzero(mask[:, d])
            self._obs_rows.append(rows)
            self._obs_z.append(cells[rows, d].astype(np.int64))
            self._obs_cum.append(cum_before[rows, d].astype(np.int64))
            self._obs_delay_design.append(
                self.delay_basis.design[rows] if self.delay_basis is not None else None
            )
        # latent totals: every row that is not fully observed
        self._latent_rows = np.flatnonzero(~tri.totals_observed)
        self._prefix_sums = tri.prefix_sums
        self._row_d = []
        self._row_z = []
        self._row_cum = []
        for t in self._latent_rows:
            d_idx = np.flatnonzero(mask[t, :d_horizon])
            self._row_d.append(d_idx)
            self._row_z.append(cells[t, d_idx].astype(np.int64))
            self._row_cum.append(cum_before[t, d_idx].astype(np.int64))
        self._build_terms()
        self._build_schedule()

    # data terms ------------------------------------------------------------

    def _total_count_vector(self, state: ParameterState) -> np.ndarray:
        return state.latent_y

    def _nb_term(self, state: ParameterState) -> float:
        lam = np.exp(self.total_log_rate(state))
        return _nb_loglik(self._total_count_vector(state), lam, state.theta)

    def _phi_vector(self, state: ParameterState, d: int, rows) -> np.ndarray | float:
        if not self.spec.dispersion_time_spline or state.dispersion_coefs is None:
            return state.phi[d]
        basis = self.delay_basis
        return state.phi[d] * np.exp(basis.design[rows] @ state.dispersion_coefs[d])

    def _delay_term(self, state: ParameterState, d: int) -> float:
        rows = self._obs_rows[d]
        if rows.size == 0:
            return 0.0
        eta = np.full(rows.size, state.psi[d])
        if self.delay_basis is not None:
            eta = eta + self._obs_delay_design[d] @ state.delay_coefs[d]
        if not np.all(np.isfinite(eta)):
            return -np.inf
        nu = expit(eta)
        if np.any(nu <= 0.0) or np.any(nu >= 1.0):
            return -np.inf
        z = self._obs_z[d]
        n = self._total_count_vector(state)[rows] - self._obs_cum[d]
        if self.spec.multinomial_limit:
            return _binom_loglik(z, n, nu)
        phi = self._phi_vector(state, d, rows)
        return _bb_loglik(z, nu * phi, (1.0 - nu) * phi, n)

    def _build_terms(self):
        self.term_fns["nb"] = self._nb_term
        for d in range(self.spec.delay_horizon):
            self.term_fns[("delay", d)] = lambda s, d=d: self._delay_term(s, d)

    # latent-row machinery ----------------------------------------------------

    def _row_rate(self, state: ParameterState, t: int) -> float:
        pred = state.iota
        if self.trend_basis is not None:
            pred += float(self.trend_basis.design[t] @ state.trend_coefs)
        if self.seasonal_basis is not None:
            pred += float(self.seasonal_basis.design[t] @ state.seasonal_coefs)
        return np.exp(pred)

    def _row_prefix_loglik(self, state: ParameterState, i: int, y_t: int) -> float:
        d_idx = self._row_d[i]
        if d_idx.size == 0:
            return 0.0
        t = self._latent_rows[i]
        eta = state.psi[d_idx]
        if self.delay_basis is not None:
            coef_mat = np.stack([state.delay_coefs[d] for d in d_idx])
            eta = eta + coef_mat @ self.delay_basis.design[t]
        nu = expit(eta)
        if np.any(nu <= 0.0) or np.any(nu >= 1.0):
            return -np.inf
        n = y_t - self._row_cum[i]
        z = self._row_z[i]
        if self.spec.multinomial_limit:
            return _binom_loglik(z, n, nu)
        if not self.spec.dispersion_time_spline or state.dispersion_coefs is None:
            phi = state.phi[d_idx]
        else:
            row = self.delay_basis.design[t]
            phi = state.phi[d_idx] * np.exp(
                np.array([row @ state.dispersion_coefs[d] for d in d_idx])
            )
        return _bb_loglik(z, nu * phi, (1.0 - nu) * phi, n)

    def _latent_row_target(self, state: ParameterState, i: int) -> float:
        t = self._latent_rows[i]
        y_t = int(state.latent_y[t])
        lam = self._row_rate(state, t)
        val = _nb_loglik(y_t, lam, state.theta)
        if val == -np.inf:
            return val
        return val + self._row_prefix_loglik(state, i, y_t)

    # schedule ---------------------------------------------------------------

    def _nb_term_keys(self) -> tuple:
        return ("nb",)

    def _build_schedule(self):
        spec = self.spec
        priors = spec.priors
        self._register_total_side_blocks(self._nb_term_keys())
        self.prior_fns["theta"] = lambda s: _exponential_logpdf(s.theta, priors.theta_rate)
        self._schedule.append(
            Block(
                "theta",
                get=lambda s: s.theta,
                set=lambda s, v: setattr(s, "theta", float(v)),
                term_keys=self._nb_term_keys(),
                prior_keys=("theta",),
                positive=True,
                init_scale=0.3,
            )
        )
        for d in range(spec.delay_horizon):
            self._register_delay_effect_blocks(
                d, ("delay", d), with_phi=not spec.multinomial_limit
            )
            if spec.dispersion_time_spline and self.delay_basis is not None:
                self.prior_fns[f"dispersion_{d}"] = (
                    lambda s, d=d, terms=self._delay_prior: terms.log_density(
                        s.dispersion_coefs[d], s.sigma_dispersion[d] ** -2.0
                    )
                )
                self.prior_fns[f"sigma_dispersion_{d}"] = lambda s, d=d: _half_normal_logpdf(
                    s.sigma_dispersion[d], priors.dispersion_smooth_sd
                )
                self._schedule.append(
                    Block(
                        f"dispersion_coefs_{d + 1}",
                        get=lambda s, d=d: s.dispersion_coefs[d],
                        set=lambda s, v, d=d: s.dispersion_coefs.__setitem__(d, v),
                        term_keys=(("delay", d),),
                        prior_keys=(f"dispersion_{d}",),
                        vector=True,
                        init_scale=0.05,
                    )
                )
                self._schedule.append(
                    Block(
                        f"sigma_dispersion[{d + 1}]",
                        get=lambda s, d=d: s.sigma_dispersion[d],
                        set=lambda s, v, d=d: s.sigma_dispersion.__setitem__(d, float(v)),
                        prior_keys=(f"dispersion_{d}", f"sigma_dispersion_{d}"),
                        positive=True,
                        init_scale=0.4,
                    )
                )
        self._append_latent_sweeps()

    def _append_latent_sweeps(self):
        if self._latent_rows.size:
            self._schedule.append(
                LatentSweep(
                    "latent_y",
                    rows=self._latent_rows,
                    get=lambda s, i: int(s.latent_y[self._latent_rows[i]]),
                    set=lambda s, i, v: s.latent_y.__setitem__(self._latent_rows[i], int(v)),
                    lower=lambda s, i: int(self._prefix_sums[self._latent_rows[i]]),
                    upper=lambda s, i: None,
                    row_target=self._latent_row_target,
                    init_scale=5.0,
                )
            )

    # initialization / recording ----------------------------------------------

    def _completion_ratio(self, prefix_len: int) -> float:
        full = self.tri.totals_observed
        if not np.any(full) or prefix_len == 0:
            return 1.0
        cells = self.tri.cells[full]
        totals = cells.sum(axis=1)
        keep = totals > 0
        if not np.any(keep):
            return 1.0
        ratio = np.mean(cells[keep, :prefix_len].sum(axis=1) / totals[keep])
        return float(max(ratio, 0.02))

    def initial_state(self, rng: np.random.Generator) -> ParameterState:
        state = ParameterState()
        self._init_common(state, rng)
        full = self.tri.totals_observed
        if np.any(full):
            level = float(np.mean(self.tri.totals[full]))
        elif self.n_times:
            level = float(np.mean(self._prefix_sums))
        else:
            level = 1.0
        state.iota = np.log(level + 1.0) + 0.3 * rng.standard_normal()
        state.theta = 10.0 * np.exp(0.3 * rng.standard_normal())
        if not self.spec.multinomial_limit:
            # prior median of the Log-Normal dispersion prior
            state.phi = np.exp(self.spec.priors.phi_log_mean) * np.exp(
                0.3 * rng.standard_normal(self.spec.delay_horizon)
            )
        if self.spec.dispersion_time_spline and self.delay_basis is not None:
            state.dispersion_coefs = [
                0.01 * rng.standard_normal(self.delay_basis.n_basis)
                for _ in range(self.spec.delay_horizon)
            ]
            state.sigma_dispersion = 0.5 * np.exp(
                0.2 * rng.standard_normal(self.spec.delay_horizon)
            )
        latent_y = self.tri.totals.copy()
        for i, t in enumerate(self._latent_rows):
            prefix = int(self._prefix_sums[t])
            ratio = self._completion_ratio(int(self._row_d[i].size))
            guess = prefix / ratio if prefix else np.exp(state.iota)
            guess = int(np.ceil(guess * (1.0 + 0.15 * rng.random())))
            latent_y[t] = max(prefix, guess)
        state.latent_y = latent_y
        return state

    def record(self, state: ParameterState):
        params = {
            "iota": np.array([state.iota]),
            "theta": np.array([state.theta]),
            "psi": state.psi.copy(),
        }
        if state.phi is not None:
            params["phi"] = state.phi.copy()
        if self.trend_basis is not None:
            params["trend_coefs"] = state.trend_coefs.copy()
            params["sigma_trend"] = np.array([state.sigma_trend])
        if self.seasonal_basis is not None:
            params["seasonal_coefs"] = state.seasonal_coefs.copy()
            params["sigma_seasonal"] = np.array([state.sigma_seasonal])
        if self.delay_basis is not None:
            params["sigma_delay"] = state.sigma_delay.copy()
            for d in range(self.spec.n_delay_effects):
                params[f"delay_coefs_{d + 1}"] = state.delay_coefs[d].copy()
        if state.dispersion_coefs is not None:
            params["sigma_dispersion"] = state.sigma_dispersion.copy()
            for d in range(self.spec.delay_horizon):
                params[f"dispersion_coefs_{d + 1}"] = state.dispersion_coefs[d].copy()
        latents = {}
        if self._latent_rows.size:
            latents["latent_y"] = state.latent_y[self._latent_rows].astype(float)
        return params, latents

    def record_labels(self):
        params = {
            "iota": ["iota"],
            "theta": ["theta"],
            "psi": [f"psi[{d + 1}]" for d in range(self.spec.n_delay_effects)],
        }
        if not self.spec.multinomial_limit:
            params["phi"] = [f"phi[{d + 1}]" for d in range(self.spec.delay_horizon)]
        if self.trend_basis is not None:
            params["trend_coefs"] = [f"trend_coefs[{j}]" for j in range(self.trend_basis.n_basis)]
            params["sigma_trend"] = ["sigma_trend"]
        if self.seasonal_basis is not None:
            params["seasonal_coefs"] = [
                f"seasonal_coefs[{j}]" for j in range(self.seasonal_basis.n_basis)
            ]
            params["sigma_seasonal"] = ["sigma_seasonal"]
        if self.delay_basis is not None:
            params["sigma_delay"] = [
                f"sigma_delay[{d + 1}]" for d in range(self.spec.n_delay_effects)
            ]
            for d in range(self.spec.n_delay_effects):
                params[f"delay_coefs_{d + 1}"] = [
                    f"delay_coefs_{d + 1}[{j}]" for j in range(self.delay_basis.n_basis)
                ]
        if self.spec.dispersion_time_spline and self.delay_basis is not None:
            params["sigma_dispersion"] = [
                f"sigma_dispersion[{d + 1}]" for d in range(self.spec.delay_horizon)
            ]
            for d in range(self.spec.delay_horizon):
                params[f"dispersion_coefs_{d + 1}"] = [
                    f"dispersion_coefs_{d + 1}[{j}]" for j in range(self.delay_basis.n_basis)
                ]
        latents = {}
        if self._latent_rows.size:
            latents["latent_y"] = [f"y[{t + 1}]" for t in self._latent_rows]
        return params, latents


# ---------------------------------------------------------------------------
# GDM-UR: under-reported totals via binomial thinning of a latent true count
# ---------------------------------------------------------------------------


class GdmUrModel(GdmModel):
    variant = GDM_UR

    def _total_count_vector(self, state: ParameterState) -> np.ndarray:
        # the NB rate models the latent true counts, not the observed totals
        return state.latent_x

    def reporting_rate(self, state: ParameterState) -> float:
        return float(expit(state.pi_intercept))

    def _report_term(self, state: ParameterState) -> float:
        pi = self.reporting_rate(state)
        if not 0.0 <= pi <= 1.0:
            return -np.inf
        return _binom_loglik(state.latent_y, state.latent_x, pi)

    def _build_terms(self):
        self.term_fns["nb"] = self._nb_term
        self.term_fns["report"] = self._report_term
        for d in range(self.spec.delay_horizon):
            self.term_fns[("delay", d)] = lambda s, d=d: self._delay_term(s, d)

    def _build_schedule(self):
        super()._build_schedule()
        prior = self.spec.reporting_rate_prior
        self.prior_fns["pi_intercept"] = lambda s: _normal_logpdf(
            s.pi_intercept, prior.mean, prior.sd
        )
        self._schedule.append(
            Block(
                "pi_intercept",
                get=lambda s: s.pi_intercept,
                set=lambda s, v: setattr(s, "pi_intercept", float(v)),
                term_keys=("report",),
                prior_keys=("pi_intercept",),
                init_scale=0.2,
            )
        )

    def _latent_row_target(self, state: ParameterState, i: int) -> float:
        # conditional of latent y_t: binomial thinning + observed prefix cells
        t = self._latent_rows[i]
        y_t = int(state.latent_y[t])
        x_t = int(state.latent_x[t])
        if y_t > x_t:
            return -np.inf
        val = _binom_loglik(y_t, x_t, self.reporting_rate(state))
        if val == -np.inf:
            return val
        return val + self._row_prefix_loglik(state, i, y_t)

    def _true_count_target(self, state: ParameterState, i: int) -> float:
        t = int(i)
        x_t = int(state.latent_x[t])
        y_t = int(state.latent_y[t])
        if x_t < y_t:
            return -np.inf
        lam = self._row_rate(state, t)
        val = _nb_loglik(x_t, lam, state.theta)
        if val == -np.inf:
            return val
        return val + _binom_loglik(y_t, x_t, self.reporting_rate(state))

    def _append_latent_sweeps(self):
        all_rows = np.arange(self.n_times)
        if all_rows.size:
            self._schedule.append(
                LatentSweep(
                    "latent_x",
                    rows=all_rows,
                    get=lambda s, i: int(s.latent_x[i]),
                    set=lambda s, i, v: s.latent_x.__setitem__(i, int(v)),
                    lower=lambda s, i: int(s.latent_y[i]),
                    upper=lambda s, i: None,
                    row_target=lambda s, i: self._true_count_target(s, i),
                    init_scale=5.0,
                )
            )
        if self._latent_rows.size:
            self._schedule.append(
                LatentSweep(
                    "latent_y",
                    rows=self._latent_rows,
                    get=lambda s, i: int(s.latent_y[self._latent_rows[i]]),
                    set=lambda s, i, v: s.latent_y.__setitem__(self._latent_rows[i], int(v)),
                    lower=lambda s, i: int(self._prefix_sums[self._latent_rows[i]]),
                    upper=lambda s, i: int(s.latent_x[self._latent_rows[i]]),
                    row_target=self._latent_row_target,
                    init_scale=5.0,
                )
            )

    def initial_state(self, rng: np.random.Generator) -> ParameterState:
        state = super().initial_state(rng)
        prior = self.spec.reporting_rate_prior
        state.pi_intercept = prior.mean + 0.1 * rng.standard_normal()
        pi = max(self.reporting_rate(state), 0.05)
        state.latent_x = np.maximum(
            state.latent_y, np.round(state.latent_y / pi).astype(np.int64)
        )
        # the true-count rate sits above the observed level by 1/pi
        state.iota -= np.log(pi)
        return state

    def record(self, state: ParameterState):
        params, latents = super().record(state)
        params["pi_intercept"] = np.array([state.pi_intercept])
        latents["latent_x"] = state.latent_x.astype(float)
        return params, latents

    def record_labels(self):
        params, latents = super().record_labels()
        params["pi_intercept"] = ["pi_intercept"]
        latents["latent_x"] = [f"x[{t + 1}]" for t in range(self.n_times)]
        return params, latents


# ---------------------------------------------------------------------------
# GLM: conditionally independent negative-binomial cells
# ---------------------------------------------------------------------------


class GlmModel(_BaseModel):
    variant = GLM

    def __init__(self, spec: ModelSpec, tri: ReportingTriangle):
        super().__init__(spec, tri)
        mask = tri.observed_mask
        cells = tri.cells
        self._obs_rows = []
        self._obs_z = []
        self._obs_delay_design = []
        self._obs_trend_design = []
        self._obs_seasonal_design = []
        for d in range(spec.n_delay_effects):
            rows = np.flatnonzero(mask[:, d])
            self._obs_rows.append(rows)
            self._obs_z.append(cells[rows, d].astype(np.int64))
            self._obs_delay_design.append(
                self.delay_basis.design[rows] if self.delay_basis is not None else None
            )
            self._obs_trend_design.append(
                self.trend_basis.design[rows] if self.trend_basis is not None else None
            )
            self._obs_seasonal_design.append(
                self.seasonal_basis.design[rows] if self.seasonal_basis is not None else None
            )
        self._build_terms()
        self._build_schedule()

    def cell_log_mean(self, state: ParameterState, d: int) -> np.ndarray:
        rows = self._obs_rows[d]
        pred = np.full(rows.size, state.iota + state.psi[d])
        if self.trend_basis is not None:
            pred = pred + self._obs_trend_design[d] @ state.trend_coefs
        if self.seasonal_basis is not None:
            pred = pred + self._obs_seasonal_design[d] @ state.seasonal_coefs
        if self.delay_basis is not None:
            pred = pred + self._obs_delay_design[d] @ state.delay_coefs[d]
        return pred

    def _cells_term(self, state: ParameterState, d: int) -> float:
        rows = self._obs_rows[d]
        if rows.size == 0:
            return 0.0
        mu = np.exp(self.cell_log_mean(state, d))
        if self.spec.poisson_cells:
            return _poisson_loglik(self._obs_z[d], mu)
        return _nb_loglik(self._obs_z[d], mu, state.theta[d])

    def _build_terms(self):
        for d in range(self.spec.n_delay_effects):
            self.term_fns[("cells", d)] = lambda s, d=d: self._cells_term(s, d)

    def _build_schedule(self):
        spec = self.spec
        priors = spec.priors
        all_cells = tuple(("cells", d) for d in range(spec.n_delay_effects))
        self._register_total_side_blocks(all_cells)
        for d in range(spec.n_delay_effects):
            if not spec.poisson_cells:
                self.prior_fns[f"theta_{d}"] = lambda s, d=d: _exponential_logpdf(
                    s.theta[d], priors.theta_rate
                )
                self._schedule.append(
                    Block(
                        f"theta[{d + 1}]",
                        get=lambda s, d=d: s.theta[d],
                        set=lambda s, v, d=d: s.theta.__setitem__(d, float(v)),
                        term_keys=(("cells", d),),
                        prior_keys=(f"theta_{d}",),
                        positive=True,
                        init_scale=0.3,
                    )
                )
            self._register_delay_effect_blocks(d, ("cells", d), with_phi=False)

    def initial_state(self, rng: np.random.Generator) -> ParameterState:
        state = ParameterState()
        self._init_common(state, rng)
        observed = self.tri.cells[self.tri.observed_mask]
        level = float(np.mean(observed)) if observed.size else 1.0
        state.iota = np.log(level + 1.0) + 0.3 * rng.standard_normal()
        if not self.spec.poisson_cells:
            state.theta = 10.0 * np.exp(0.3 * rng.standard_normal(self.spec.n_delay_effects))
        return state

    def record(self, state: ParameterState):
        params = {"iota": np.array([state.iota]), "psi": state.psi.copy()}
        if state.theta is not None:
            params["theta"] = state.theta.copy()
        if self.trend_basis is not None:
            params["trend_coefs"] = state.trend_coefs.copy()
            params["sigma_trend"] = np.array([state.sigma_trend])
        if self.seasonal_basis is not None:
            params["seasonal_coefs"] = state.seasonal_coefs.copy()
            params["sigma_seasonal"] = np.array([state.sigma_seasonal])
        if self.delay_basis is not None:
            params["sigma_delay"] = state.sigma_delay.copy()
            for d in range(self.spec.n_delay_effects):
                params[f"delay_coefs_{d + 1}"] = state.delay_coefs[d].copy()
        return params, {}

    def record_labels(self):
        n_eff = self.spec.n_delay_effects
        params = {
            "iota": ["iota"],
            "psi": [f"psi[{d + 1}]" for d in range(n_eff)],
        }
        if not self.spec.poisson_cells:
            params["theta"] = [f"theta[{d + 1}]" for d in range(n_eff)]
        if self.trend_basis is not None:
            params["trend_coefs"] = [f"trend_coefs[{j}]" for j in range(self.trend_basis.n_basis)]
            params["sigma_trend"] = ["sigma_trend"]
        if self.seasonal_basis is not None:
            params["seasonal_coefs"] = [
                f"seasonal_coefs[{j}]" for j in range(self.seasonal_basis.n_basis)
            ]
            params["sigma_seasonal"] = ["sigma_seasonal"]
        if self.delay_basis is not None:
            params["sigma_delay"] = [f"sigma_delay[{d + 1}]" for d in range(n_eff)]
            for d in range(n_eff):
                params[f"delay_coefs_{d + 1}"] = [
                    f"delay_coefs_{d + 1}[{j}]" for j in range(self.delay_basis.n_basis)
                ]
        return params, {}


# ---------------------------------------------------------------------------
# GLM+: negative-binomial cells around a latent multivariate-log-normal mean
# ---------------------------------------------------------------------------


class GlmPlusModel(GlmModel):
    variant = GLMPLUS

    def __init__(self, spec: ModelSpec, tri: ReportingTriangle):
        # per-row observed-column lists for the latent log-mean updates
        super().__init__(spec, tri)
        mask = tri.observed_mask
        self._row_obs_d = [np.flatnonzero(mask[t]) for t in range(tri.n_times)]

    def nu_matrix(self, state: ParameterState) -> np.ndarray:
        """Predictor mean of the latent log-means, rows = times, cols = delays."""
        base = self.total_log_rate(state)
        cols = []
        for d in range(self.spec.n_delay_effects):
            col = np.full(self.n_times, state.psi[d])
            if self.delay_basis is not None:
                col = col + self.delay_basis.design @ state.delay_coefs[d]
            cols.append(col)
        return base[:, None] + np.column_stack(cols) if cols else base[:, None]

    def _mvn_term(self, state: ParameterState) -> float:
        if self.n_times == 0:
            return 0.0
        try:
            chol = np.linalg.cholesky(state.sigma_mat)
        except np.linalg.LinAlgError:
            return -np.inf
        dev = state.log_mu - self.nu_matrix(state)
        sols = solve_triangular(chol, dev.T, lower=True)
        quad = float(np.sum(sols**2))
        p = state.sigma_mat.shape[0]
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return -0.5 * (self.n_times * (p * np.log(2.0 * np.pi) + logdet) + quad)

    def _cells_term(self, state: ParameterState, d: int) -> float:
        rows = self._obs_rows[d]
        if rows.size == 0:
            return 0.0
        mu = np.exp(state.log_mu[rows, d])
        if self.spec.poisson_cells:
            return _poisson_loglik(self._obs_z[d], mu)
        return _nb_loglik(self._obs_z[d], mu, state.theta[d])

    def _build_terms(self):
        self.term_fns["mvn"] = self._mvn_term
        for d in range(self.spec.n_delay_effects):
            self.term_fns[("cells", d)] = lambda s, d=d: self._cells_term(s, d)

    def _log_mu_row_target(self, state: ParameterState, t: int) -> float:
        nu_row = np.full(self.spec.n_delay_effects, state.iota)
        if self.trend_basis is not None:
            nu_row = nu_row + float(self.trend_basis.design[t] @ state.trend_coefs)
        if self.seasonal_basis is not None:
            nu_row = nu_row + float(self.seasonal_basis.design[t] @ state.seasonal_coefs)
        for d in range(self.spec.n_delay_effects):
            nu_row[d] += state.psi[d]
            if self.delay_basis is not None:
                nu_row[d] += float(self.delay_basis.design[t] @ state.delay_coefs[d])
        val = dist.log_pdf_mvn(state.log_mu[t], nu_row, state.sigma_mat)
        obs_d = self._row_obs_d[t]
        if obs_d.size:
            mu = np.exp(state.log_mu[t, obs_d])
            z = self.tri.cells[t, obs_d]
            if self.spec.poisson_cells:
                val += _poisson_loglik(z, mu)
            else:
                val += _nb_loglik(z, mu, state.theta[obs_d])
        return val

    def _draw_sigma_mat(self, state: ParameterState, rng: np.random.Generator) -> None:
        p = self.spec.n_delay_effects
        resid = state.log_mu - self.nu_matrix(state)
        scale = np.eye(p) + resid.T @ resid
        df = (self.spec.delay_horizon + 2) + self.n_times
        state.sigma_mat = dist.sample_inverse_wishart(scale, df, rng)

    def _build_schedule(self):
        spec = self.spec
        self._register_total_side_blocks(("mvn",))
        for d in range(spec.n_delay_effects):
            if not spec.poisson_cells:
                self.prior_fns[f"theta_{d}"] = lambda s, d=d: _exponential_logpdf(
                    s.theta[d], spec.priors.theta_rate
                )
                self._schedule.append(
                    Block(
                        f"theta[{d + 1}]",
                        get=lambda s, d=d: s.theta[d],
                        set=lambda s, v, d=d: s.theta.__setitem__(d, float(v)),
                        term_keys=(("cells", d),),
                        prior_keys=(f"theta_{d}",),
                        positive=True,
                        init_scale=0.3,
                    )
                )
            self._register_delay_effect_blocks(d, "mvn", with_phi=False)
        p = spec.n_delay_effects
        self.prior_fns["sigma_mat"] = lambda s: dist.log_pdf_inverse_wishart(
            s.sigma_mat, np.eye(p), spec.delay_horizon + 2
        )
        if self.n_times:
            self._schedule.append(
                RowVectorSweep(
                    "log_mu",
                    rows=np.arange(self.n_times),
                    dim=p,
                    get=lambda s, t: s.log_mu[t].copy(),
                    set=lambda s, t, v: s.log_mu.__setitem__(t, v),
                    row_target=self._log_mu_row_target,
                    init_scale=0.1,
                )
            )
            self._schedule.append(GibbsStep("sigma_mat", draw=self._draw_sigma_mat))

    def initial_state(self, rng: np.random.Generator) -> ParameterState:
        state = super().initial_state(rng)
        p = self.spec.n_delay_effects
        state.sigma_mat = 0.1 * np.eye(p)
        state.log_mu = self.nu_matrix(state) + 0.05 * rng.standard_normal((self.n_times, p))
        return state

    def record(self, state: ParameterState):
        params, latents = super().record(state)
        params["Sigma"] = state.sigma_mat.reshape(-1).copy()
        if self.n_times:
            latents["log_mu"] = state.log_mu.reshape(-1).copy()
        return params, latents

    def record_labels(self):
        params, latents = super().record_labels()
        p = self.spec.n_delay_effects
        params["Sigma"] = [f"Sigma[{i + 1},{j + 1}]" for i in range(p) for j in range(p)]
        if self.n_times:
            latents["log_mu"] = [
                f"log_mu[{t + 1},{d + 1}]" for t in range(self.n_times) for d in range(p)
            ]
        return params, latents


# ---------------------------------------------------------------------------
# factory and operation-level wrappers
# ---------------------------------------------------------------------------

_MODEL_CLASSES = {GDM: GdmModel, GLM: GlmModel, GLMPLUS: GlmPlusModel, GDM_UR: GdmUrModel}


def build_model(spec: ModelSpec, tri: ReportingTriangle):
    return _MODEL_CLASSES[spec.variant](spec, tri)


def _resolve_model(spec, tri, model, expected=None):
    if expected is not None and spec.variant != expected:
        raise ConfigError(f"spec variant is {spec.variant!r}, expected {expected!r}")
    return model if model is not None else build_model(spec, tri)


def linear_predictor_total(state, spec, tri, t, model=None) -> float:
    """iota + trend + seasonal effect at time t; lambda_t = exp of this."""
    mdl = _resolve_model(spec, tri, model)
    return float(mdl.total_log_rate_at(state, [float(t)])[0])


def linear_predictor_delay(state, spec, tri, t, d, model=None) -> float:
    """psi_d + delay spline at time t on the logit (GDM) or log (GLM) scale; d is 1-based."""
    mdl = _resolve_model(spec, tri, model)
    if not 1 <= d <= spec.n_delay_effects:
        raise ConfigError(f"delay index d must lie in 1..{spec.n_delay_effects}")
    return float(mdl.delay_predictor_at(state, [float(t)], d - 1)[0])


def gdm_log_likelihood(state, spec, tri, model=None) -> float:
    return _resolve_model(spec, tri, model, GDM).log_likelihood(state)


def glm_log_likelihood(state, spec, tri, model=None) -> float:
    return _resolve_model(spec, tri, model, GLM).log_likelihood(state)


def glmplus_log_likelihood(state, spec, tri, model=None) -> float:
    return _resolve_model(spec, tri, model, GLMPLUS).log_likelihood(state)


def gdm_ur_log_likelihood(state, spec, tri, model=None) -> float:
    return _resolve_model(spec, tri, model, GDM_UR).log_likelihood(state)


def log_posterior(state, spec, tri, model=None) -> float:
    return _resolve_model(spec, tri, model).log_posterior(state)
