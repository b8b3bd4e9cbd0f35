"""Adaptive Metropolis-within-Gibbs engine, multi-chain driver and diagnostics.

The update schedule comes from the model (fixed order: intercept, trend
coefficients and their smoothness, seasonal ditto, dispersion(s), then the
per-delay blocks, then latent sweeps and conjugate steps). Scalars use an
adaptive random-walk tuned to 0.44 acceptance, coefficient vectors a jointly
adapted covariance proposal tuned to 0.234; positive parameters move on the
log scale with the Jacobian included. All adaptation diminishes within
burn-in and is frozen afterwards.

Everything is reproducible bit-for-bit given (seed, config, data): chains draw
their generators from spawned seed sequences, whether run sequentially or in a
process pool.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, eigh

from .errors import ConfigError, InitializationError
from .models import Block, GibbsStep, LatentSweep, ModelSpec, RowVectorSweep, build_model
from .triangle import ReportingTriangle
from .util import chain_seed_sequences

__all__ = [
    "SamplerConfig",
    "PosteriorSamples",
    "run_chains",
    "mpsrf",
    "mpsrf_from_chains",
    "effective_sample_size",
    "ess_from_chains",
]

SCHEMA_TAG = "delaycast-samples/1"


@dataclass(frozen=True)
class SamplerConfig:
    """Chain length, adaptation targets and seeds; defaults are desk-scale.

    ``paper_scale`` gives the long-run preset (4 chains of 400k iterations,
    200k burn-in, thin 20) used for final analyses.
    """

    n_chains: int = 4
    n_iterations: int = 20_000
    burn_in: int = 10_000
    thin: int = 5
    seed: int = 0
    target_accept_scalar: float = 0.44
    target_accept_block: float = 0.234
    adaptation_window: int = 50
    n_threads: int | None = None
    progress: bool = False

    def __post_init__(self):
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1 (>= 2 for convergence diagnostics)")
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        for name in ("target_accept_scalar", "target_accept_block"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.adaptation_window < 1:
            raise ConfigError("adaptation_window must be >= 1")
        if self.n_threads is not None and self.n_threads < 1:
            raise ConfigError("n_threads must be >= 1")

    @property
    def n_kept(self) -> int:
        return len(range(self.burn_in, self.n_iterations, self.thin))

    @classmethod
    def desk_scale(cls, **kwargs) -> "SamplerConfig":
        return cls(**kwargs)

    @classmethod
    def paper_scale(cls, **kwargs) -> "SamplerConfig":
        base = dict(n_chains=4, n_iterations=400_000, burn_in=200_000, thin=20)
        base.update(kwargs)
        return cls(**base)


# ---------------------------------------------------------------------------
# posterior sample container
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSamples:
    """Multi-chain, post-burn-in, thinned draws keyed by parameter block."""

    draws: dict
    latent_draws: dict
    labels: dict
    meta: dict

    @property
    def n_chains(self) -> int:
        any_key = next(iter(self.draws))
        return self.draws[any_key].shape[0]

    @property
    def n_kept(self) -> int:
        any_key = next(iter(self.draws))
        return self.draws[any_key].shape[1]

    def flat(self, key: str) -> np.ndarray:
        """Draws of one block with chains stacked: (n_chains * n_kept, dim)."""
        source = self.draws.get(key)
        if source is None:
            source = self.latent_draws.get(key)
        if source is None:
            raise KeyError(f"no draws recorded under {key!r}")
        m, n, dim = source.shape
        return source.reshape(m * n, dim)

    def component(self, label: str) -> np.ndarray:
        """Per-chain draws (n_chains, n_kept) of a single labelled component."""
        for key, names in self.labels.items():
            if label in names:
                j = names.index(label)
                source = self.draws.get(key, self.latent_draws.get(key))
                return source[:, :, j]
        raise KeyError(f"unknown parameter label {label!r}")

    def matrix(self, parameters=None) -> np.ndarray:
        """Stack selected components into a (n_chains, n_kept, p) array.

        Entries of ``parameters`` may be block keys or single component
        labels; None selects every non-latent block.
        """
        if parameters is None:
            parameters = list(self.draws)
        cols = []
        for entry in parameters:
            if entry in self.draws:
                cols.append(self.draws[entry])
            elif entry in self.latent_draws:
                cols.append(self.latent_draws[entry])
            else:
                cols.append(self.component(entry)[:, :, None])
        return np.concatenate(cols, axis=2)

    def matrix_labels(self, parameters=None) -> list[str]:
        if parameters is None:
            parameters = list(self.draws)
        out: list[str] = []
        for entry in parameters:
            if entry in self.draws or entry in self.latent_draws:
                out.extend(self.labels[entry])
            else:
                out.append(entry)
        return out

    def save(self, directory) -> None:
        """Persist as a directory of per-block CSV matrices plus metadata.

        Rows are (chain, draw, components...), appendable for checkpointing.
        """
        os.makedirs(directory, exist_ok=True)
        index = {
            "schema": SCHEMA_TAG,
            "meta": self.meta,
            "labels": self.labels,
            "param_keys": list(self.draws),
            "latent_keys": list(self.latent_draws),
            "n_chains": self.n_chains,
            "n_kept": self.n_kept,
        }
        with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as handle:
            json.dump(index, handle, indent=2, sort_keys=True)
        for key, array in list(self.draws.items()) + list(self.latent_draws.items()):
            path = os.path.join(directory, f"draws_{key}.csv")
            m, n, dim = array.shape
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(",".join(["chain", "draw"] + self.labels[key]) + "\n")
                for c in range(m):
                    for i in range(n):
                        row = ",".join(repr(float(v)) for v in array[c, i])
                        handle.write(f"{c},{i},{row}\n")

    @classmethod
    def load(cls, directory) -> "PosteriorSamples":
        with open(os.path.join(directory, "meta.json"), encoding="utf-8") as handle:
            index = json.load(handle)
        if index.get("schema") != SCHEMA_TAG:
            raise ConfigError(
                f"unsupported samples schema {index.get('schema')!r}; expected {SCHEMA_TAG!r}"
            )
        m, n = index["n_chains"], index["n_kept"]
        draws, latent = {}, {}
        for group, keys in (("params", index["param_keys"]), ("latents", index["latent_keys"])):
            for key in keys:
                path = os.path.join(directory, f"draws_{key}.csv")
                data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
                dim = data.shape[1] - 2
                array = np.empty((m, n, dim))
                for row in data:
                    array[int(row[0]), int(row[1])] = row[2:]
                (draws if group == "params" else latent)[key] = array
        return cls(draws=draws, latent_draws=latent, labels=index["labels"], meta=index["meta"])


# ---------------------------------------------------------------------------
# adaptive updates
# ---------------------------------------------------------------------------


def _adapt_rate(iteration: int) -> float:
    return min(0.25, (iteration + 1.0) ** -0.6)


class _ScalarState:
    __slots__ = ("log_scale",)

    def __init__(self, init_scale: float):
        self.log_scale = math.log(init_scale)


class _VectorState:
    def __init__(self, dim: int, init_scale: float):
        self.dim = dim
        self.log_scale = math.log(init_scale)
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))
        self.chol = np.eye(dim)
        self.empirical = False

    def observe(self, value: np.ndarray) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += np.outer(delta, value - self.mean)

    def refresh_proposal(self) -> None:
        if self.count < max(20, 2 * self.dim):
            return
        cov = self.m2 / (self.count - 1)
        jitter = 1e-8 + 1e-6 * float(np.mean(np.diag(cov)))
        cov = cov + jitter * np.eye(self.dim)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            # non-PD running estimate: fall back to its diagonal
            chol = np.diag(np.sqrt(np.maximum(np.diag(cov), jitter)))
        if not self.empirical:
            self.empirical = True
            self.log_scale = math.log(2.38 / math.sqrt(self.dim))
        self.chol = chol


class _ChainRunner:
    """Executes one chain's update schedule with per-block adaptation."""

    def __init__(self, model, cfg: SamplerConfig, rng: np.random.Generator):
        self.model = model
        self.cfg = cfg
        self.rng = rng
        self.cache: dict = {}
        self.scalar_states: dict[str, _ScalarState] = {}
        self.vector_states: dict[str, _VectorState] = {}
        self.sweep_states: dict[str, np.ndarray] = {}
        for item in model.update_schedule():
            if isinstance(item, Block):
                if item.vector:
                    dim = 0  # resolved lazily from the state
                    self.vector_states[item.name] = None
                else:
                    self.scalar_states[item.name] = _ScalarState(item.init_scale)
            elif isinstance(item, (LatentSweep, RowVectorSweep)):
                self.sweep_states[item.name] = np.full(len(item.rows), float(item.init_scale))

    # cached-term bookkeeping ------------------------------------------------

    def _target(self, block: Block, state) -> float:
        total = 0.0
        for key in block.term_keys:
            value = self.cache.get(key)
            if value is None:
                value = self.model.term_fns[key](state)
                self.cache[key] = value
            total += value
        for key in block.prior_keys:
            total += self.model.prior_fns[key](state)
        return total

    def _proposed(self, block: Block, state):
        terms = {key: self.model.term_fns[key](state) for key in block.term_keys}
        total = sum(terms.values())
        for key in block.prior_keys:
            total += self.model.prior_fns[key](state)
        return total, terms

    # individual updates ------------------------------------------------------

    def _update_scalar(self, block: Block, state, iteration: int) -> None:
        st = self.scalar_states[block.name]
        current = self._target(block, state)
        old = float(block.get(state))
        step = math.exp(st.log_scale) * self.rng.standard_normal()
        if block.positive:
            proposal = old * math.exp(step)
            log_jacobian = step
        else:
            proposal = old + step
            log_jacobian = 0.0
        block.set(state, proposal)
        proposed, new_terms = self._proposed(block, state)
        log_acc = proposed - current + log_jacobian
        if math.isnan(log_acc):
            log_acc = -math.inf
        accept_prob = math.exp(min(0.0, log_acc))
        if math.log(self.rng.random() + 1e-300) < log_acc:
            self.cache.update(new_terms)
        else:
            block.set(state, old)
        if iteration < self.cfg.burn_in:
            st.log_scale += _adapt_rate(iteration) * (accept_prob - self.cfg.target_accept_scalar)

    def _update_vector(self, block: Block, state, iteration: int) -> None:
        old = np.array(block.get(state), dtype=float)
        st = self.vector_states[block.name]
        if st is None:
            st = _VectorState(old.size, block.init_scale)
            self.vector_states[block.name] = st
        current = self._target(block, state)
        noise = st.chol @ self.rng.standard_normal(st.dim)
        proposal = old + math.exp(st.log_scale) * noise
        block.set(state, proposal)
        proposed, new_terms = self._proposed(block, state)
        log_acc = proposed - current
        if math.isnan(log_acc):
            log_acc = -math.inf
        accept_prob = math.exp(min(0.0, log_acc))
        if math.log(self.rng.random() + 1e-300) < log_acc:
            self.cache.update(new_terms)
        else:
            block.set(state, old)
        if iteration < self.cfg.burn_in:
            st.log_scale += _adapt_rate(iteration) * (accept_prob - self.cfg.target_accept_block)
            st.observe(np.array(block.get(state), dtype=float))
            if (iteration + 1) % self.cfg.adaptation_window == 0:
                st.refresh_proposal()

    def _update_latent_sweep(self, sweep: LatentSweep, state, iteration: int) -> None:
        scales = self.sweep_states[sweep.name]
        adapting = iteration < self.cfg.burn_in
        rate = _adapt_rate(iteration) if adapting else 0.0
        for i in range(len(sweep.rows)):
            step = int(round(scales[i] * self.rng.standard_normal()))
            accept_prob = self._latent_step(sweep, state, i, step)
            if adapting:
                scales[i] = max(
                    0.25,
                    scales[i] * math.exp(rate * (accept_prob - self.cfg.target_accept_scalar)),
                )
        self.cache.clear()

    def _latent_step(self, sweep: LatentSweep, state, i: int, step: int) -> float:
        old = sweep.get(state, i)
        if step == 0:
            return 1.0
        proposal = old + step
        if proposal < sweep.lower(state, i):
            return 0.0
        upper = sweep.upper(state, i)
        if upper is not None and proposal > upper:
            return 0.0
        current = sweep.row_target(state, i)
        sweep.set(state, i, proposal)
        proposed = sweep.row_target(state, i)
        log_acc = proposed - current
        if math.isnan(log_acc):
            log_acc = -math.inf
        accept_prob = math.exp(min(0.0, log_acc))
        if not math.log(self.rng.random() + 1e-300) < log_acc:
            sweep.set(state, i, old)
        return accept_prob

    def _update_row_vectors(self, sweep: RowVectorSweep, state, iteration: int) -> None:
        scales = self.sweep_states[sweep.name]
        adapting = iteration < self.cfg.burn_in
        rate = _adapt_rate(iteration) if adapting else 0.0
        for i, row in enumerate(sweep.rows):
            old = sweep.get(state, row)
            current = sweep.row_target(state, row)
            proposal = old + scales[i] * self.rng.standard_normal(sweep.dim)
            sweep.set(state, row, proposal)
            proposed = sweep.row_target(state, row)
            log_acc = proposed - current
            if math.isnan(log_acc):
                log_acc = -math.inf
            accept_prob = math.exp(min(0.0, log_acc))
            if not math.log(self.rng.random() + 1e-300) < log_acc:
                sweep.set(state, row, old)
            if adapting:
                scales[i] = max(
                    1e-4,
                    scales[i] * math.exp(rate * (accept_prob - self.cfg.target_accept_block)),
                )
        self.cache.clear()

    # one full Gibbs cycle ------------------------------------------------------

    def step(self, state, iteration: int) -> None:
        for item in self.model.update_schedule():
            if isinstance(item, Block):
                if item.vector:
                    self._update_vector(item, state, iteration)
                else:
                    self._update_scalar(item, state, iteration)
            elif isinstance(item, LatentSweep):
                self._update_latent_sweep(item, state, iteration)
            elif isinstance(item, RowVectorSweep):
                self._update_row_vectors(item, state, iteration)
            elif isinstance(item, GibbsStep):
                item.draw(state, self.rng)
                self.cache.clear()
            else:  # pragma: no cover - schedule bug
                raise ConfigError(f"unknown schedule item {item!r}")

    def scale_snapshot(self) -> dict:
        out = {name: st.log_scale for name, st in self.scalar_states.items()}
        out.update(
            {name: st.log_scale for name, st in self.vector_states.items() if st is not None}
        )
        out.update({name: list(map(float, sc)) for name, sc in self.sweep_states.items()})
        return out


# ---------------------------------------------------------------------------
# chain driver
# ---------------------------------------------------------------------------


def _run_single_chain(spec: ModelSpec, tri: ReportingTriangle, cfg: SamplerConfig, chain_index: int):
    model = build_model(spec, tri)
    rng = np.random.default_rng(chain_seed_sequences(cfg.seed, cfg.n_chains)[chain_index])
    state = None
    report = {}
    for _ in range(100):
        candidate = model.initial_state(rng)
        if np.isfinite(model.log_posterior(candidate)):
            state = candidate
            break
        report = model.posterior_report(candidate)
    if state is None:
        bad = {k: v for k, v in report.items() if not np.isfinite(v)}
        raise InitializationError(
            f"chain {chain_index}: log-posterior not finite after 100 initial draws; "
            f"non-finite terms: {bad}"
        )
    runner = _ChainRunner(model, cfg, rng)
    params0, latents0 = model.record(state)
    n_kept = cfg.n_kept
    param_store = {k: np.empty((n_kept, v.size)) for k, v in params0.items()}
    latent_store = {k: np.empty((n_kept, v.size)) for k, v in latents0.items()}
    kept = 0
    snapshot_at_burnin = None
    report_every = max(1, cfg.n_iterations // 10)
    for iteration in range(cfg.n_iterations):
        runner.step(state, iteration)
        if iteration == cfg.burn_in:
            snapshot_at_burnin = runner.scale_snapshot()
        if iteration >= cfg.burn_in and (iteration - cfg.burn_in) % cfg.thin == 0:
            params, latents = model.record(state)
            for k, v in params.items():
                param_store[k][kept] = v
            for k, v in latents.items():
                latent_store[k][kept] = v
            kept += 1
        if cfg.progress and (iteration + 1) % report_every == 0:
            print(
                f"[delaycast] chain {chain_index}: {iteration + 1}/{cfg.n_iterations}",
                flush=True,
            )
    return {
        "params": param_store,
        "latents": latent_store,
        "adaptation": {
            "at_burn_in": snapshot_at_burnin or runner.scale_snapshot(),
            "final": runner.scale_snapshot(),
        },
    }


def _chain_worker(payload):
    spec, tri, cfg, chain_index = payload
    return _run_single_chain(spec, tri, cfg, chain_index)


def run_chains(spec: ModelSpec, tri: ReportingTriangle, cfg: SamplerConfig) -> PosteriorSamples:
    """Run ``cfg.n_chains`` independent adaptive chains and merge their draws.

    Chains are reproducible bit-for-bit given (seed, config, data), whether
    they execute sequentially or across a process pool.
    """
    model = build_model(spec, tri)  # validates spec/triangle compatibility up front
    labels, latent_labels = model.record_labels()
    n_workers = cfg.n_threads if cfg.n_threads is not None else cfg.n_chains
    n_workers = max(1, min(n_workers, cfg.n_chains))
    payloads = [(spec, tri, cfg, c) for c in range(cfg.n_chains)]
    if n_workers == 1 or cfg.n_chains == 1:
        results = [_chain_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_chain_worker, payloads))
    draws = {
        key: np.stack([r["params"][key] for r in results]) for key in results[0]["params"]
    }
    latent_draws = {
        key: np.stack([r["latents"][key] for r in results]) for key in results[0]["latents"]
    }
    meta = {
        "variant": spec.variant,
        "seed": cfg.seed,
        "sampler": dataclasses.asdict(cfg),
        "model": spec.to_dict(),
        "n_kept_per_chain": cfg.n_kept,
        "adaptation": [r["adaptation"] for r in results],
    }
    return PosteriorSamples(
        draws=draws,
        latent_draws=latent_draws,
        labels={**labels, **latent_labels},
        meta=meta,
    )


# ---------------------------------------------------------------------------
# convergence diagnostics
# ---------------------------------------------------------------------------


def mpsrf_from_chains(chains) -> float:
    """Brooks-Gelman multivariate potential scale reduction factor.

    chains: array (n_chains, n_draws) or (n_chains, n_draws, n_params).
    MPSRF = (n-1)/n + ((m+1)/m) * lambda_max(W^{-1} B/n); the convergence
    gate used throughout the package is MPSRF < 1.05.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ConfigError("chains must be (n_chains, n_draws[, n_params])")
    m, n, p = x.shape
    if m < 2:
        raise ConfigError("need at least 2 chains")
    if n < 10:
        raise ConfigError("need at least 10 kept draws per chain")
    if p > n:
        raise ConfigError("parameter subset dimension must not exceed draws per chain")
    means = x.mean(axis=1)
    within = np.zeros((p, p))
    for j in range(m):
        dev = x[j] - means[j]
        within += dev.T @ dev / (n - 1)
    within /= m
    grand = means.mean(axis=0)
    dev_means = means - grand
    between_over_n = dev_means.T @ dev_means / (m - 1)
    ridge = 1e-12 * max(float(np.trace(within)) / p, 1e-12)
    for attempt in range(8):
        try:
            lam = eigh(between_over_n, within, eigvals_only=True)[-1]
            break
        except (LinAlgError, np.linalg.LinAlgError):
            if attempt == 0:
                warnings.warn(
                    "within-chain covariance is singular; ridge-regularizing", stacklevel=2
                )
            within = within + ridge * np.eye(p)
            ridge *= 100.0
    else:  # pragma: no cover - pathological input
        raise ConfigError("within-chain covariance could not be regularized")
    lam = max(float(lam), 0.0)
    return (n - 1.0) / n + ((m + 1.0) / m) * lam


def mpsrf(samples: PosteriorSamples, parameters=None) -> float:
    return mpsrf_from_chains(samples.matrix(parameters))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    centered = x - x.mean()
    size = 1
    while size < 2 * n:
        size *= 2
    transform = np.fft.rfft(centered, size)
    acov = np.fft.irfft(transform * np.conj(transform), size)[:n]
    return acov / n


def ess_from_chains(chains) -> float:
    """Effective sample size via Geyer's initial monotone positive sequence,
    estimated per chain and summed."""
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    total = 0.0
    degenerate = False
    for chain in x:
        n = chain.size
        acov = _autocovariance(chain)
        if acov[0] <= 0.0:
            degenerate = True
            continue
        pair_sums = []
        k = 0
        while 2 * k + 1 < n:
            gamma = acov[2 * k] + acov[2 * k + 1]
            if gamma <= 0.0:
                break
            pair_sums.append(gamma)
            k += 1
        for i in range(1, len(pair_sums)):
            pair_sums[i] = min(pair_sums[i], pair_sums[i - 1])
        iat = max(-1.0 + 2.0 * sum(pair_sums) / acov[0], 1.0)
        total += n / iat
    if degenerate:
        warnings.warn("degenerate (constant) chain: reporting ESS contribution 0", stacklevel=2)
    return float(total)


def effective_sample_size(samples: PosteriorSamples, parameter: str) -> float:
    return ess_from_chains(samples.component(parameter))
