"""Nowcasts, forecasts, posterior replicates and model-checking statistics.

All operations are deterministic functions of a PosteriorSamples object: any
randomness they need is drawn from a generator derived from the fit's seed and
an operation-specific salt. Summaries use type-1 (inverted CDF) sample
quantiles throughout, so intervals are reproducible across platforms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError
from .mcmc import PosteriorSamples
from .models import GDM, GDM_UR, GLM, GLMPLUS, ModelSpec, build_model
from .triangle import ReportingTriangle
from .util import (
    SALT_COVERAGE,
    SALT_FORECAST,
    SALT_NOWCAST,
    SALT_REPLICATE,
    empirical_quantile,
    equal_tailed_interval,
    rng_for,
)

__all__ = [
    "PredictionSummary",
    "Replicates",
    "CovarianceCheck",
    "MeanVarCheck",
    "CoverageReport",
    "nowcast",
    "forecast",
    "replicate_insample",
    "ppc_covariance",
    "ppc_mean_var_sorted",
    "interval_coverage",
    "variance_identity_max_gap",
    "convergence_matrix",
]


# ---------------------------------------------------------------------------
# draw extraction helpers
# ---------------------------------------------------------------------------


def _op_rng(samples: PosteriorSamples, salt: int, rng=None) -> np.random.Generator:
    if rng is not None:
        return rng
    return rng_for(int(samples.meta.get("seed", 0)), salt)


def _flat(samples: PosteriorSamples, key: str) -> np.ndarray:
    return samples.flat(key)


def _lambda_draws(samples: PosteriorSamples, model, times) -> np.ndarray:
    """exp(total linear predictor) per draw at the requested times: (n_draws, n_times)."""
    times = np.asarray(times, dtype=float)
    pred = np.repeat(_flat(samples, "iota"), times.size, axis=1)
    if model.trend_basis is not None:
        pred = pred + _flat(samples, "trend_coefs") @ model.trend_basis.evaluate(times).T
    if model.seasonal_basis is not None:
        pred = pred + _flat(samples, "seasonal_coefs") @ model.seasonal_basis.evaluate(times).T
    return np.exp(pred)


def _delay_effect_draws(samples: PosteriorSamples, model, times, d: int) -> np.ndarray:
    """psi_d + delay spline effect per draw at the requested times (0-based d)."""
    times = np.asarray(times, dtype=float)
    pred = np.repeat(_flat(samples, "psi")[:, d : d + 1], times.size, axis=1)
    if model.delay_basis is not None:
        pred = pred + _flat(samples, f"delay_coefs_{d + 1}") @ model.delay_basis.evaluate(times).T
    return pred


def _nu_draws(samples: PosteriorSamples, model, times) -> np.ndarray:
    """Stick-breaking means per draw: (n_draws, n_times, n_modeled_delays)."""
    cols = [
        expit(_delay_effect_draws(samples, model, times, d))
        for d in range(model.spec.delay_horizon)
    ]
    return np.stack(cols, axis=2)


def _phi_draws(samples: PosteriorSamples, model) -> np.ndarray | None:
    if model.spec.multinomial_limit:
        return None
    return _flat(samples, "phi")


def _gdm_cell_chain(y, nu, phi, rng) -> np.ndarray:
    """Vectorized stick-breaking draws: y (...,), nu (..., D), phi None | (n_draws, D).

    Returns cells (..., D+1). phi rows broadcast over the time axis.
    """
    remaining = np.asarray(y, dtype=np.int64).copy()
    d_steps = nu.shape[-1]
    out = np.empty(remaining.shape + (d_steps + 1,), dtype=np.int64)
    for d in range(d_steps):
        nu_d = nu[..., d]
        if phi is None:
            p = nu_d
        else:
            phi_d = phi[:, d]
            while phi_d.ndim < nu_d.ndim:
                phi_d = phi_d[..., None]
            p = rng.beta(nu_d * phi_d, (1.0 - nu_d) * phi_d)
        z = rng.binomial(remaining, p)
        out[..., d] = z
        remaining -= z
    out[..., d_steps] = remaining
    return out


# ---------------------------------------------------------------------------
# prediction summaries
# ---------------------------------------------------------------------------


@dataclass
class PredictionSummary:
    """Per-time posterior predictive draws and equal-tailed interval summaries."""

    kind: str
    times: np.ndarray
    draws: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    intervals: dict
    degenerate: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            header = ["time", "mean", "median"]
            for level in self.intervals:
                header += [f"lower_{level}", f"upper_{level}"]
            header.append("degenerate")
            writer.writerow(header)
            for i, t in enumerate(self.times):
                row = [int(t), repr(float(self.mean[i])), repr(float(self.median[i]))]
                for level, (lo, hi) in self.intervals.items():
                    row += [repr(float(lo[i])), repr(float(hi[i]))]
                row.append(int(self.degenerate[i]))
                writer.writerow(row)


def _summarize(kind, times, draws, levels, degenerate=None) -> PredictionSummary:
    times = np.asarray(times)
    draws = np.asarray(draws)
    if degenerate is None:
        degenerate = np.zeros(times.size, dtype=bool)
    if times.size == 0:
        empty = np.array([])
        return PredictionSummary(kind, times, draws.reshape(0, 0), empty, empty, {}, degenerate)
    intervals = {}
    for level in levels:
        lo, hi = equal_tailed_interval(draws, level, axis=0)
        intervals[level] = (lo, hi)
    return PredictionSummary(
        kind=kind,
        times=times,
        draws=draws,
        mean=draws.mean(axis=0),
        median=empirical_quantile(draws, 0.5, axis=0),
        intervals=intervals,
        degenerate=degenerate,
    )


def _glm_cell_mean_draws(samples, model, times, d) -> np.ndarray:
    base = np.log(_lambda_draws(samples, model, times))
    return np.exp(base + _delay_effect_draws(samples, model, times, d))


def _cell_noise(mu, theta, poisson_cells, rng):
    if poisson_cells:
        return rng.poisson(mu)
    return rng.poisson(rng.gamma(theta, mu / theta))


def nowcast(
    samples: PosteriorSamples,
    spec: ModelSpec,
    tri: ReportingTriangle,
    levels=(0.5, 0.95),
    times=None,
    rng=None,
) -> PredictionSummary:
    """Posterior predictive distribution of the total y_t for partially
    observed rows.

    For the GDM variants the nowcast draws are the latent-total draws
    themselves; for GLM/GLM+ each unobserved cell is drawn from its predictive
    and summed with the observed prefix. Fully observed rows give a degenerate
    (flagged) point mass at the observed total.
    """
    model = build_model(spec, tri)
    rng = _op_rng(samples, SALT_NOWCAST, rng)
    full = tri.totals_observed
    if times is None:
        times = np.flatnonzero(~full) + 1
    times = np.atleast_1d(np.asarray(times, dtype=int))
    if np.any((times < 1) | (times > tri.n_times)):
        raise ConfigError("nowcast times must be rows of the triangle")
    n_draws = samples.n_chains * samples.n_kept
    draws = np.empty((n_draws, times.size), dtype=np.int64)
    degenerate = np.zeros(times.size, dtype=bool)
    latent_cols = {}
    if spec.variant in (GDM, GDM_UR) and "latent_y" in samples.latent_draws:
        labels = samples.labels["latent_y"]
        latent_cols = {label: j for j, label in enumerate(labels)}
        latent_flat = samples.flat("latent_y")
    for j, t in enumerate(times):
        row = t - 1
        if full[row]:
            degenerate[j] = True
            draws[:, j] = tri.totals[row]
            continue
        if spec.variant in (GDM, GDM_UR):
            draws[:, j] = latent_flat[:, latent_cols[f"y[{t}]"]].astype(np.int64)
        else:
            prefix = int(tri.prefix_sums[row])
            missing = np.flatnonzero(~tri.observed_mask[row])
            total = np.full(n_draws, prefix, dtype=np.int64)
            for d in missing:
                if spec.variant == GLM:
                    mu = _glm_cell_mean_draws(samples, model, [float(t)], d)[:, 0]
                else:
                    mu = np.exp(samples.flat("log_mu")[:, row * spec.n_delay_effects + d])
                theta = None if spec.poisson_cells else samples.flat("theta")[:, d]
                total += _cell_noise(mu, theta, spec.poisson_cells, rng)
            draws[:, j] = total
    return _summarize("nowcast", times, draws, levels, degenerate)


def forecast(
    samples: PosteriorSamples,
    spec: ModelSpec,
    tri: ReportingTriangle,
    horizon: int,
    levels=(0.5, 0.95),
    rng=None,
) -> PredictionSummary:
    """Posterior predictive totals for times beyond the triangle.

    The trend spline extrapolates linearly and the seasonal spline cyclically.
    For the GDM variants no delay-block parameter enters the forecast.
    """
    if horizon < 0:
        raise ConfigError("horizon must be >= 0")
    if horizon == 0:
        return _summarize("forecast", np.array([], dtype=int), np.empty((0, 0)), levels)
    model = build_model(spec, tri)
    rng = _op_rng(samples, SALT_FORECAST, rng)
    times = np.arange(tri.n_times + 1, tri.n_times + horizon + 1)
    lam = _lambda_draws(samples, model, times.astype(float))
    n_draws = lam.shape[0]
    if spec.variant in (GDM, GDM_UR):
        theta = samples.flat("theta")[:, 0][:, None]
        counts = rng.poisson(rng.gamma(theta, lam / theta))
        if spec.variant == GDM_UR:
            pi = expit(samples.flat("pi_intercept")[:, 0])[:, None]
            counts = rng.binomial(counts, np.broadcast_to(pi, counts.shape))
        draws = counts
    else:
        draws = np.zeros((n_draws, times.size), dtype=np.int64)
        sigma_chols = None
        if spec.variant == GLMPLUS:
            sig = samples.flat("Sigma").reshape(n_draws, spec.n_delay_effects, spec.n_delay_effects)
            sigma_chols = np.linalg.cholesky(sig)
        log_means = np.stack(
            [
                np.log(_glm_cell_mean_draws(samples, model, times.astype(float), d))
                for d in range(spec.n_delay_effects)
            ],
            axis=2,
        )  # (n_draws, n_times, k)
        if sigma_chols is not None:
            noise = rng.standard_normal(log_means.shape)
            log_means = log_means + np.einsum("dtk,djk->dtj", noise, sigma_chols)
        for d in range(spec.n_delay_effects):
            mu = np.exp(log_means[:, :, d])
            theta = None if spec.poisson_cells else samples.flat("theta")[:, d][:, None]
            draws += _cell_noise(mu, theta, spec.poisson_cells, rng)
    return _summarize("forecast", times, draws, levels)


# ---------------------------------------------------------------------------
# in-sample replicates and posterior predictive checks
# ---------------------------------------------------------------------------


@dataclass
class Replicates:
    """Replicate totals and delay cells over the fully observed window."""

    times: np.ndarray
    totals: np.ndarray  # (n_draws, n_window)
    cells: np.ndarray  # (n_draws, n_window, n_delays)


def replicate_insample(
    samples: PosteriorSamples, spec: ModelSpec, tri: ReportingTriangle, rng=None
) -> Replicates:
    """Draw one replicate triangle per kept draw from the fitted generative
    process, over the fully observed window."""
    model = build_model(spec, tri)
    rng = _op_rng(samples, SALT_REPLICATE, rng)
    window = np.flatnonzero(tri.totals_observed)
    if window.size == 0:
        raise ConfigError("no fully observed rows to replicate")
    times = (window + 1).astype(float)
    if spec.variant in (GDM, GDM_UR):
        lam = _lambda_draws(samples, model, times)
        theta = samples.flat("theta")[:, 0][:, None]
        totals = rng.poisson(rng.gamma(theta, lam / theta))
        if spec.variant == GDM_UR:
            pi = expit(samples.flat("pi_intercept")[:, 0])[:, None]
            totals = rng.binomial(totals, np.broadcast_to(pi, totals.shape))
        nu = _nu_draws(samples, model, times)
        cells = _gdm_cell_chain(totals, nu, _phi_draws(samples, model), rng)
    else:
        n_draws = samples.n_chains * samples.n_kept
        k = spec.n_delay_effects
        log_means = np.stack(
            [np.log(_glm_cell_mean_draws(samples, model, times, d)) for d in range(k)], axis=2
        )
        if spec.variant == GLMPLUS:
            sig = samples.flat("Sigma").reshape(n_draws, k, k)
            chols = np.linalg.cholesky(sig)
            noise = rng.standard_normal(log_means.shape)
            log_means = log_means + np.einsum("dtk,djk->dtj", noise, chols)
        cells = np.empty(log_means.shape, dtype=np.int64)
        for d in range(k):
            theta = None if spec.poisson_cells else samples.flat("theta")[:, d][:, None]
            cells[:, :, d] = _cell_noise(np.exp(log_means[:, :, d]), theta, spec.poisson_cells, rng)
        totals = cells.sum(axis=2)
    return Replicates(times=window + 1, totals=totals, cells=cells)


def _masked_cov(matrix: np.ndarray) -> np.ndarray:
    if matrix.shape[0] < 2:
        return np.full((matrix.shape[1], matrix.shape[1]), np.nan)
    return np.cov(matrix.T, ddof=1)


@dataclass
class CovarianceCheck:
    """Replicate-vs-observed covariance discrepancies for cells and proportions."""

    count_bias: np.ndarray
    count_log_mse: np.ndarray
    proportion_bias: np.ndarray
    proportion_log_mse: np.ndarray
    observed_count_cov: np.ndarray
    observed_proportion_cov: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["replicate", "count_bias", "count_log_mse", "proportion_bias", "proportion_log_mse"]
            )
            for i in range(self.count_bias.size):
                writer.writerow(
                    [
                        i,
                        repr(float(self.count_bias[i])),
                        repr(float(self.count_log_mse[i])),
                        repr(float(self.proportion_bias[i])),
                        repr(float(self.proportion_log_mse[i])),
                    ]
                )


def ppc_covariance(
    reps: Replicates, tri: ReportingTriangle, include_remainder: bool = True
) -> CovarianceCheck:
    """Per-replicate mean bias and log mean squared error of the covariance of
    the delay cells and of the per-cell proportions of the total.

    Rows with zero total are excluded from the proportion statistics. An
    exactly zero MSE is reported as the -inf sentinel rather than an error.
    """
    window = reps.times - 1
    obs_cells = tri.cells[window].astype(float)
    obs_totals = obs_cells.sum(axis=1)
    stop = None if include_remainder else -1
    obs_cov = _masked_cov(obs_cells[:, :stop])
    keep = obs_totals > 0
    obs_prop_cov = _masked_cov((obs_cells[keep] / obs_totals[keep, None])[:, :stop])
    n_draws = reps.totals.shape[0]
    count_bias = np.empty(n_draws)
    count_mse = np.empty(n_draws)
    prop_bias = np.empty(n_draws)
    prop_mse = np.empty(n_draws)
    for r in range(n_draws):
        cells = reps.cells[r].astype(float)
        totals = reps.totals[r].astype(float)
        cov = _masked_cov(cells[:, :stop])
        diff = cov - obs_cov
        count_bias[r] = diff.mean()
        count_mse[r] = np.mean(diff**2)
        keep_r = totals > 0
        prop = cells[keep_r] / totals[keep_r, None]
        pcov = _masked_cov(prop[:, :stop])
        pdiff = pcov - obs_prop_cov
        prop_bias[r] = pdiff.mean()
        prop_mse[r] = np.mean(pdiff**2)
    with np.errstate(divide="ignore"):
        count_log_mse = np.log(count_mse)
        prop_log_mse = np.log(prop_mse)
    return CovarianceCheck(
        count_bias=count_bias,
        count_log_mse=count_log_mse,
        proportion_bias=prop_bias,
        proportion_log_mse=prop_log_mse,
        observed_count_cov=obs_cov,
        observed_proportion_cov=obs_prop_cov,
    )


def variance_identity_max_gap(reps: Replicates) -> float:
    """Largest relative gap between Var(total) and the summed cell covariance
    matrix across replicates; an algebraic identity of sample moments."""
    worst = 0.0
    for r in range(reps.totals.shape[0]):
        totals = reps.totals[r].astype(float)
        if totals.size < 2:
            raise ConfigError("variance identity needs at least 2 window rows")
        var_total = float(np.var(totals, ddof=1))
        cov = np.cov(reps.cells[r].astype(float).T, ddof=1)
        gap = abs(var_total - float(np.sum(cov)))
        worst = max(worst, gap / max(var_total, 1e-12))
    return worst


@dataclass
class MeanVarCheck:
    """Replicate distributions of the sample mean/variance of totals plus the
    sorted-replicate envelope."""

    replicate_means: np.ndarray
    replicate_variances: np.ndarray
    observed_mean: float
    observed_variance: float
    sorted_mean: np.ndarray
    sorted_lower: np.ndarray
    sorted_upper: np.ndarray
    sorted_observed: np.ndarray
    level: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["rank", "sorted_mean", "sorted_lower", "sorted_upper", "sorted_observed"])
            for i in range(self.sorted_mean.size):
                writer.writerow(
                    [
                        i + 1,
                        repr(float(self.sorted_mean[i])),
                        repr(float(self.sorted_lower[i])),
                        repr(float(self.sorted_upper[i])),
                        repr(float(self.sorted_observed[i])),
                    ]
                )


def ppc_mean_var_sorted(reps: Replicates, tri: ReportingTriangle, level: float = 0.95) -> MeanVarCheck:
    window = reps.times - 1
    obs_totals = tri.cells[window].sum(axis=1).astype(float)
    totals = reps.totals.astype(float)
    sorted_reps = np.sort(totals, axis=1)
    lo, hi = equal_tailed_interval(sorted_reps, level, axis=0)
    return MeanVarCheck(
        replicate_means=totals.mean(axis=1),
        replicate_variances=np.var(totals, axis=1, ddof=1),
        observed_mean=float(obs_totals.mean()),
        observed_variance=float(np.var(obs_totals, ddof=1)),
        sorted_mean=sorted_reps.mean(axis=0),
        sorted_lower=lo,
        sorted_upper=hi,
        sorted_observed=np.sort(obs_totals),
        level=level,
    )


@dataclass
class CoverageReport:
    """Fraction of observed per-cell reporting proportions inside their
    posterior predictive intervals."""

    per_delay: np.ndarray
    overall: float
    level: float
    multinomial_limit: bool
    n_cells: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["delay", "coverage"])
            for d, val in enumerate(self.per_delay, start=1):
                writer.writerow([d, repr(float(val))])
            writer.writerow(["overall", repr(float(self.overall))])


def interval_coverage(
    samples: PosteriorSamples,
    spec: ModelSpec,
    tri: ReportingTriangle,
    multinomial_limit: bool = False,
    level: float = 0.95,
    rng=None,
) -> CoverageReport:
    """Predictive-interval coverage of the reporting proportions z/y over the
    fully observed window.

    Replicate cells are drawn conditional on each observed total, from the
    Beta-Binomial chain, or from its Binomial (multinomial-limit) version when
    the flag is set.
    """
    if spec.variant not in (GDM, GDM_UR):
        raise ConfigError("interval_coverage applies to the GDM variants")
    model = build_model(spec, tri)
    rng = _op_rng(samples, SALT_COVERAGE, rng)
    window = np.flatnonzero(tri.totals_observed & (tri.totals > 0))
    if window.size == 0:
        raise ConfigError("no fully observed rows with positive totals")
    times = (window + 1).astype(float)
    y_obs = tri.totals[window]
    nu = _nu_draws(samples, model, times)
    n_draws = nu.shape[0]
    phi = None if multinomial_limit else _phi_draws(samples, model)
    y_rep = np.broadcast_to(y_obs, (n_draws, window.size))
    cells = _gdm_cell_chain(y_rep, nu, phi, rng)
    props = cells / y_obs[None, :, None]
    lo, hi = equal_tailed_interval(props, level, axis=0)
    obs_prop = tri.cells[window] / y_obs[:, None]
    inside = (obs_prop >= lo) & (obs_prop <= hi)
    return CoverageReport(
        per_delay=inside.mean(axis=0),
        overall=float(inside.mean()),
        level=level,
        multinomial_limit=multinomial_limit,
        n_cells=int(inside.size),
    )


# ---------------------------------------------------------------------------
# derived-quantity matrix for convergence diagnostics
# ---------------------------------------------------------------------------


def convergence_matrix(
    samples: PosteriorSamples, spec: ModelSpec, tri: ReportingTriangle, stride: int = 10
):
    """Chains x draws x parameters array of the quantities used to gate
    convergence: every stride-th total rate, every stride-th delay effect,
    and the dispersion parameters.

    Returns (chains_array, labels).
    """
    model = build_model(spec, tri)
    m, n = samples.n_chains, samples.n_kept
    times = np.arange(1, tri.n_times + 1, stride, dtype=float)
    blocks = []
    labels: list[str] = []

    def add(name_fmt, values):  # values: (m, n, len(times))
        blocks.append(values)
        labels.extend(name_fmt(i) for i in range(values.shape[2]))

    iota = samples.draws["iota"][:, :, 0]
    pred = np.repeat(iota[:, :, None], times.size, axis=2)
    if model.trend_basis is not None:
        rows = model.trend_basis.evaluate(times)
        pred = pred + np.einsum("mnp,tp->mnt", samples.draws["trend_coefs"], rows)
    if model.seasonal_basis is not None:
        rows = model.seasonal_basis.evaluate(times)
        pred = pred + np.einsum("mnp,tp->mnt", samples.draws["seasonal_coefs"], rows)
    add(lambda i: f"lambda[{int(times[i])}]", np.exp(pred))
    if spec.variant in (GDM, GDM_UR, GLM):
        if model.delay_basis is not None:
            rows = model.delay_basis.evaluate(times)
            for d in range(spec.n_delay_effects):
                effect = np.einsum("mnp,tp->mnt", samples.draws[f"delay_coefs_{d + 1}"], rows)
                add(lambda i, d=d: f"delay_effect_{d + 1}[{int(times[i])}]", effect)
    else:
        log_mu = samples.latent_draws["log_mu"].reshape(m, n, tri.n_times, spec.n_delay_effects)
        sub = log_mu[:, :, :: stride, :].reshape(m, n, -1)
        blocks.append(sub)
        labels.extend(
            f"log_mu[{t},{d + 1}]"
            for t in range(1, tri.n_times + 1, stride)
            for d in range(spec.n_delay_effects)
        )
    if "theta" in samples.draws:
        blocks.append(samples.draws["theta"])
        labels.extend(samples.labels["theta"])
    if "phi" in samples.draws:
        blocks.append(samples.draws["phi"])
        labels.extend(samples.labels["phi"])
    return np.concatenate(blocks, axis=2), labels
