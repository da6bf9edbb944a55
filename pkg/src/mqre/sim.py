"""Design-based Monte Carlo harness.

Each replicate generates a contaminated two-level finite population,
computes per-quantile census targets by fitting the unweighted estimator
to the whole population, draws an informative two-stage stratified sample
with exact inverse-inclusion weights, and fits the weighted estimator
(scaled unit weights), the unweighted estimator and, at q = 0.5, the
Gaussian random-intercept baseline. Reported per series: average relative
bias, mean point estimate, the Monte Carlo (empirical) standard error and
the mean sandwich standard error.

Replicates use independent counter-based RNG substreams, so reports are
bit-reproducible for a fixed seed and replicates may run in parallel.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from multiprocessing import get_context
from typing import Optional, Sequence

import numpy as np

from .core import fit_mqre
from .design import GroupedDesign
from .exceptions import SimulationError
from .influence import InfluenceFamily, InfluenceSpec
from .weights import WeightScaling, scale_design

__all__ = [
    "SimConfig",
    "Population",
    "SimRow",
    "SimReport",
    "generate_population",
    "informative_sample",
    "census_target",
    "run_monte_carlo",
    "consistency_study",
]

RNG_ALGORITHM = "philox4x64"

# population regression y = b0 + b1 * x + cluster effect + unit noise
TRUE_INTERCEPT = 100.0
TRUE_SLOPE = 2.0
X_RANGE = (0.0, 20.0)
# mixture components, second argument is a variance
GAMMA_CLEAN = (0.0, 1.0)
GAMMA_OUTLIER = (9.0, 20.0)
EPS_CLEAN = (0.0, 3.3)
EPS_OUTLIER = (10.0, 75.0)

PARAM_NAMES = ("intercept", "slope")
METHOD_WEIGHTED = "weighted-mqre"
METHOD_UNWEIGHTED = "mqre"
METHOD_LMM = "lmm"
_METHOD_LABELS = {
    METHOD_WEIGHTED: "Weighted-MQRE",
    METHOD_UNWEIGHTED: "MQRE",
    METHOD_LMM: "LMM",
}


@dataclass(frozen=True)
class SimConfig:
    """Population, design and replication settings for one study."""

    clusters_population: int = 170
    units_per_cluster: int = 50
    clusters_sampled: int = 100
    cluster_fractions: tuple[float, float, float] = (0.15, 0.65, 0.20)
    unit_fractions: tuple[float, float] = (0.75, 0.25)
    unit_rate: float = 0.3
    replications: int = 500
    quantiles: tuple[float, ...] = (0.1, 0.25, 0.5)
    c: float = 1.345
    family: InfluenceFamily = InfluenceFamily.HUBER
    scaling: WeightScaling = WeightScaling.METHOD2
    seed: int = 20240615
    contamination_gamma: float = 0.1
    contamination_eps: float = 0.1
    informative: bool = True
    tol: float = 1e-6
    max_iter: int = 200

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", InfluenceFamily(self.family))
        object.__setattr__(self, "scaling", WeightScaling(self.scaling))
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        if self.clusters_sampled > self.clusters_population:
            raise ValueError("cannot sample more clusters than the population holds")
        if abs(sum(self.cluster_fractions) - 1.0) > 1e-12:
            raise ValueError("cluster stratum fractions must sum to 1")
        if abs(sum(self.unit_fractions) - 1.0) > 1e-12:
            raise ValueError("unit stratum fractions must sum to 1")
        if not 0.0 < self.unit_rate <= 1.0:
            raise ValueError("unit sampling rate must be in (0, 1]")
        for prob in (self.contamination_gamma, self.contamination_eps):
            if not 0.0 <= prob < 1.0:
                raise ValueError("contamination probabilities must be in [0, 1)")
        if any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ValueError("quantiles must lie in (0, 1)")
        if self.replications < 1:
            raise ValueError("need at least one replication")

    def spec(self, q: float) -> InfluenceSpec:
        return InfluenceSpec(q=q, c=self.c, family=self.family)

    @property
    def units_sampled_per_cluster(self) -> int:
        return int(round(self.unit_rate * self.units_per_cluster))

    def to_dict(self) -> dict:
        return {
            "clusters_population": self.clusters_population,
            "units_per_cluster": self.units_per_cluster,
            "clusters_sampled": self.clusters_sampled,
            "cluster_fractions": list(self.cluster_fractions),
            "unit_fractions": list(self.unit_fractions),
            "unit_rate": self.unit_rate,
            "replications": self.replications,
            "quantiles": list(self.quantiles),
            "c": self.c,
            "family": self.family.value,
            "scaling": self.scaling.value,
            "seed": self.seed,
            "contamination_gamma": self.contamination_gamma,
            "contamination_eps": self.contamination_eps,
            "informative": self.informative,
            "tol": self.tol,
            "max_iter": self.max_iter,
        }


@dataclass
class Population:
    """Finite population with the random terms retained for stratification."""

    x: np.ndarray
    y: np.ndarray
    gamma: np.ndarray
    eps: np.ndarray
    cluster_of: np.ndarray
    M: int
    N: int


def replicate_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based substream for one replicate."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=key))
    )


def _mixture(
    rng: np.random.Generator,
    size: int,
    clean: tuple[float, float],
    outlier: tuple[float, float],
    contamination: float,
) -> np.ndarray:
    is_outlier = rng.random(size) < contamination
    mean = np.where(is_outlier, outlier[0], clean[0])
    sd = np.where(is_outlier, math.sqrt(outlier[1]), math.sqrt(clean[1]))
    return rng.normal(mean, sd)


def generate_population(config: SimConfig, rng: np.random.Generator) -> Population:
    """Draw one finite population under the contaminated mixture model."""
    M, N = config.clusters_population, config.units_per_cluster
    gamma = _mixture(rng, M, GAMMA_CLEAN, GAMMA_OUTLIER, config.contamination_gamma)
    x = rng.uniform(X_RANGE[0], X_RANGE[1], M * N)
    eps = _mixture(rng, M * N, EPS_CLEAN, EPS_OUTLIER, config.contamination_eps)
    cluster_of = np.repeat(np.arange(M), N)
    y = TRUE_INTERCEPT + TRUE_SLOPE * x + gamma[cluster_of] + eps
    return Population(x=x, y=y, gamma=gamma, eps=eps, cluster_of=cluster_of, M=M, N=N)


def _stratified_srs(
    rng: np.random.Generator, strata: list[np.ndarray], wanted: list[int]
) -> tuple[list[np.ndarray], list[float], int]:
    """Simple random samples of the requested sizes, one per stratum.

    When a stratum cannot supply its allocation the deficit moves to the
    stratum with the most remaining unsampled members. Returns the chosen
    index arrays, the realised inverse-inclusion weight per stratum and
    the number of shortfall events.
    """
    sizes = [len(s) for s in strata]
    take = [min(w, n) for w, n in zip(wanted, sizes)]
    shortfalls = sum(1 for w, t in zip(wanted, take) if t < w)
    deficit = sum(wanted) - sum(take)
    while deficit > 0:
        spare = [n - t for n, t in zip(sizes, take)]
        k = int(np.argmax(spare))
        if spare[k] <= 0:
            raise ValueError("not enough population members for the requested sample")
        extra = min(deficit, spare[k])
        take[k] += extra
        deficit -= extra
    chosen, weights = [], []
    for s, t, n in zip(strata, take, sizes):
        if t > 0:
            chosen.append(np.sort(rng.choice(s, size=t, replace=False)))
            weights.append(n / t)
        else:
            chosen.append(np.empty(0, dtype=np.intp))
            weights.append(0.0)
    return chosen, weights, shortfalls


def _allocation(total: int, fractions: Sequence[float]) -> list[int]:
    counts = [int(round(f * total)) for f in fractions[:-1]]
    counts.append(total - sum(counts))
    if min(counts) < 0:
        raise ValueError(f"fractions {fractions!r} do not split {total} sensibly")
    return counts


def informative_sample(
    population: Population, config: SimConfig, rng: np.random.Generator
) -> tuple[GroupedDesign, int]:
    """Two-stage stratified sample with exact inverse-inclusion weights.

    Clusters are stratified on the cluster effect (below -1, middle,
    above 1) and units within each sampled cluster on the sign of the
    unit noise, so both stages are informative. With
    ``config.informative`` off, both stages collapse to simple random
    sampling. Returns the grouped design and the shortfall-event count.
    """
    m = config.clusters_sampled
    n_j = config.units_sampled_per_cluster
    gamma = population.gamma
    if config.informative:
        cluster_strata = [
            np.flatnonzero(gamma < -1.0),
            np.flatnonzero((gamma >= -1.0) & (gamma <= 1.0)),
            np.flatnonzero(gamma > 1.0),
        ]
        cluster_want = _allocation(m, config.cluster_fractions)
    else:
        cluster_strata = [np.arange(population.M)]
        cluster_want = [m]
    chosen_clusters, cluster_weights, shortfalls = _stratified_srs(
        rng, cluster_strata, cluster_want
    )

    n_hi = int(round(config.unit_fractions[0] * n_j))
    blocks_X, blocks_y, blocks_w1, blocks_w2, blocks_id = [], [], [], [], []
    for stratum_idx, members in enumerate(chosen_clusters):
        for j in members:
            rows = np.flatnonzero(population.cluster_of == j)
            if config.informative:
                eps_j = population.eps[rows]
                unit_strata = [
                    rows[eps_j > 0.0],
                    rows[eps_j <= 0.0],
                ]
                unit_want = [n_hi, n_j - n_hi]
            else:
                unit_strata = [rows]
                unit_want = [n_j]
            units, unit_weights, short = _stratified_srs(rng, unit_strata, unit_want)
            shortfalls += short
            sel = np.concatenate(units)
            w1 = np.concatenate(
                [np.full(len(u), wt) for u, wt in zip(units, unit_weights)]
            )
            blocks_X.append(np.column_stack([np.ones(sel.size), population.x[sel]]))
            blocks_y.append(population.y[sel])
            blocks_w1.append(w1)
            blocks_w2.append(cluster_weights[stratum_idx])
            blocks_id.append(int(j))

    from .design import ClusterBlock

    design = GroupedDesign(
        [
            ClusterBlock(X=X, y=y, w1=w1, w2=w2, id=cid)
            for X, y, w1, w2, cid in zip(
                blocks_X, blocks_y, blocks_w1, blocks_w2, blocks_id
            )
        ]
    )
    return design, shortfalls


def population_design(population: Population) -> GroupedDesign:
    """The whole finite population as a unit-weight grouped design."""
    X = np.column_stack([np.ones(population.x.size), population.x])
    return GroupedDesign.from_arrays(
        X=X, y=population.y, cluster_ids=population.cluster_of.tolist()
    )


def census_target(
    population: Population,
    spec: InfluenceSpec,
    tol: float = 1e-6,
    max_iter: int = 200,
):
    """Finite-population parameter: the unweighted fit on every unit."""
    design = population_design(population)
    return fit_mqre(design, spec, tol=tol, max_iter=max_iter, compute_se=False)


@dataclass
class SimRow:
    method: str
    q: float
    parameter: str
    arb: float
    mean_estimate: float
    empirical_se: float
    mean_estimated_se: Optional[float]
    n_used: int
    n_failed: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "q": self.q,
            "parameter": self.parameter,
            "arb_percent": self.arb,
            "mean_estimate": self.mean_estimate,
            "empirical_se": self.empirical_se,
            "mean_estimated_se": self.mean_estimated_se,
            "n_used": self.n_used,
            "n_failed": self.n_failed,
        }


@dataclass
class SimReport:
    rows: list[SimRow]
    config: SimConfig
    shortfall_events: int
    failed_fits: int
    version: str
    rng_algorithm: str = RNG_ALGORITHM

    def row(self, method: str, q: float, parameter: str) -> SimRow:
        for row in self.rows:
            if (
                row.method == method
                and row.parameter == parameter
                and abs(row.q - q) < 1e-12
            ):
                return row
        raise KeyError((method, q, parameter))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "rng_algorithm": self.rng_algorithm,
            "config": self.config.to_dict(),
            "shortfall_events": self.shortfall_events,
            "failed_fits": self.failed_fits,
            "rows": [row.to_dict() for row in self.rows],
        }

    def format_arb_table(self) -> str:
        lines = [
            f"Average relative bias (%) and mean point estimates "
            f"over {self.config.replications} replications",
            f"{'method':<15}{'q':>6}"
            + "".join(f"{h:>18}" for h in (
                "ARB(intercept)", "mean(intercept)", "ARB(slope)", "mean(slope)")),
        ]
        for method in (METHOD_WEIGHTED, METHOD_UNWEIGHTED, METHOD_LMM):
            for q in self.config.quantiles:
                try:
                    b0 = self.row(method, q, "intercept")
                    b1 = self.row(method, q, "slope")
                except KeyError:
                    continue
                lines.append(
                    f"{_METHOD_LABELS[method]:<15}{q:>6.2f}"
                    f"{b0.arb:>18.3f}{b0.mean_estimate:>18.3f}"
                    f"{b1.arb:>18.3f}{b1.mean_estimate:>18.4f}"
                )
        return "\n".join(lines)

    def format_se_table(self) -> str:
        lines = [
            "Empirical and mean estimated standard errors (weighted fit)",
            f"{'q':>6}" + "".join(f"{h:>22}" for h in (
                "empirical(intercept)", "estimated(intercept)",
                "empirical(slope)", "estimated(slope)")),
        ]
        for q in self.config.quantiles:
            try:
                b0 = self.row(METHOD_WEIGHTED, q, "intercept")
                b1 = self.row(METHOD_WEIGHTED, q, "slope")
            except KeyError:
                continue
            est0 = "" if b0.mean_estimated_se is None else f"{b0.mean_estimated_se:.4f}"
            est1 = "" if b1.mean_estimated_se is None else f"{b1.mean_estimated_se:.4f}"
            lines.append(
                f"{q:>6.2f}{b0.empirical_se:>22.4f}{est0:>22}"
                f"{b1.empirical_se:>22.4f}{est1:>22}"
            )
        return "\n".join(lines)


@dataclass
class _ReplicateOutcome:
    targets: dict[float, np.ndarray] = field(default_factory=dict)
    estimates: dict[tuple[str, float], np.ndarray] = field(default_factory=dict)
    std_errors: dict[tuple[str, float], np.ndarray] = field(default_factory=dict)
    failures: list[tuple[str, float, str]] = field(default_factory=list)
    shortfalls: int = 0


def _run_replicate(config: SimConfig, rep: int) -> _ReplicateOutcome:
    out = _ReplicateOutcome()
    rng = replicate_rng(config.seed, rep)
    population = generate_population(config, rng)
    for q in config.quantiles:
        try:
            out.targets[q] = census_target(
                population, config.spec(q), tol=config.tol, max_iter=config.max_iter
            ).beta
        except Exception as exc:  # noqa: BLE001 - recorded, replicate excluded
            out.failures.append(("census", q, str(exc)))
    sample, out.shortfalls = informative_sample(population, config, rng)
    weighted = scale_design(sample, config.scaling)
    unweighted = sample.with_unit_weights()

    for q in config.quantiles:
        if q not in out.targets:
            continue
        try:
            fit = fit_mqre(
                weighted, config.spec(q), tol=config.tol, max_iter=config.max_iter
            )
            if fit.se is None:
                raise SimulationError(fit.inference_error or "no standard errors")
            out.estimates[(METHOD_WEIGHTED, q)] = fit.beta
            out.std_errors[(METHOD_WEIGHTED, q)] = fit.se
        except Exception as exc:  # noqa: BLE001
            out.failures.append((METHOD_WEIGHTED, q, str(exc)))
        try:
            fit = fit_mqre(
                unweighted,
                config.spec(q),
                tol=config.tol,
                max_iter=config.max_iter,
                compute_se=False,
            )
            out.estimates[(METHOD_UNWEIGHTED, q)] = fit.beta
        except Exception as exc:  # noqa: BLE001
            out.failures.append((METHOD_UNWEIGHTED, q, str(exc)))

    lmm_q = 0.5
    if lmm_q in out.targets:
        try:
            spec = InfluenceSpec(q=lmm_q, c=config.c, family=InfluenceFamily.IDENTITY)
            fit = fit_mqre(
                unweighted, spec, tol=config.tol, max_iter=config.max_iter,
                compute_se=False,
            )
            out.estimates[(METHOD_LMM, lmm_q)] = fit.beta
        except Exception as exc:  # noqa: BLE001
            out.failures.append((METHOD_LMM, lmm_q, str(exc)))
    return out


def _worker(args: tuple[SimConfig, int]) -> _ReplicateOutcome:
    return _run_replicate(*args)


def run_monte_carlo(
    config: SimConfig, workers: int = 1, progress: bool = False
) -> SimReport:
    """Run the full study; deterministic for a fixed seed.

    Replicates are independent; with ``workers > 1`` they run in separate
    processes and are aggregated in replicate order either way.
    """
    from . import __version__

    R = config.replications
    if workers > 1:
        with get_context("spawn").Pool(workers) as pool:
            outcomes = pool.map(
                _worker, [(config, r) for r in range(R)], chunksize=max(1, R // (8 * workers))
            )
    else:
        outcomes = []
        for r in range(R):
            outcomes.append(_run_replicate(config, r))
            if progress and (r + 1) % max(1, R // 20) == 0:
                print(f"replicate {r + 1}/{R}", file=sys.stderr)

    series: dict[tuple[str, float], list[tuple[np.ndarray, np.ndarray]]] = {}
    se_series: dict[tuple[str, float], list[np.ndarray]] = {}
    failures = 0
    shortfalls = 0
    for out in outcomes:
        shortfalls += out.shortfalls
        failures += len(out.failures)
        for (method, q), beta in out.estimates.items():
            target = out.targets[0.5 if method == METHOD_LMM else q]
            series.setdefault((method, q), []).append((beta, target))
            if (method, q) in out.std_errors:
                se_series.setdefault((method, q), []).append(out.std_errors[(method, q)])

    rows: list[SimRow] = []
    for (method, q), values in series.items():
        used = len(values)
        failed = R - used
        if failed > 0.05 * R:
            raise SimulationError(
                f"method {method!r} at q={q} failed in {failed}/{R} replicates"
            )
        est = np.array([v[0] for v in values])
        tgt = np.array([v[1] for v in values])
        ses = np.array(se_series.get((method, q), []))
        for k, name in enumerate(PARAM_NAMES):
            arb = float(np.mean((est[:, k] - tgt[:, k]) / tgt[:, k]) * 100.0)
            mean_est = float(np.mean(est[:, k]))
            emp_se = float(np.sqrt(np.mean((est[:, k] - mean_est) ** 2)))
            mean_se = float(np.mean(ses[:, k])) if ses.size else None
            rows.append(
                SimRow(
                    method=method,
                    q=q,
                    parameter=name,
                    arb=arb,
                    mean_estimate=mean_est,
                    empirical_se=emp_se,
                    mean_estimated_se=mean_se,
                    n_used=used,
                    n_failed=failed,
                )
            )

    order = {METHOD_WEIGHTED: 0, METHOD_UNWEIGHTED: 1, METHOD_LMM: 2}
    rows.sort(key=lambda r: (order[r.method], r.q, PARAM_NAMES.index(r.parameter)))
    return SimReport(
        rows=rows,
        config=config,
        shortfall_events=shortfalls,
        failed_fits=failures,
        version=__version__,
    )


def consistency_study(
    config: SimConfig,
    m_values: Sequence[int],
    replications: int,
    q: float = 0.5,
) -> list[float]:
    """Monte Carlo mean absolute intercept error at several sample sizes.

    Shares one population (and census target) per replicate across all
    cluster sample sizes, so the comparison isolates the effect of m.
    """
    sums = np.zeros(len(m_values))
    counts = np.zeros(len(m_values), dtype=int)
    spec = config.spec(q)
    for rep in range(replications):
        rng = replicate_rng(config.seed, rep, 0)
        population = generate_population(config, rng)
        target = census_target(
            population, spec, tol=config.tol, max_iter=config.max_iter
        ).beta
        for i, m in enumerate(m_values):
            cfg_m = SimConfig(**{**config.to_dict(), "clusters_sampled": int(m)})
            rng_m = replicate_rng(config.seed, rep, 1 + i)
            sample, _ = informative_sample(population, cfg_m, rng_m)
            weighted = scale_design(sample, config.scaling)
            try:
                fit = fit_mqre(
                    weighted, spec, tol=config.tol, max_iter=config.max_iter,
                    compute_se=False,
                )
            except Exception:  # noqa: BLE001 - rare fit failure, skip point
                continue
            sums[i] += abs(fit.beta[0] - target[0])
            counts[i] += 1
    if np.any(counts == 0):
        raise SimulationError("consistency study lost all replicates for some m")
    return list(sums / counts)
