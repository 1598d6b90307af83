"""Estimators that check the covariance, plateau, gap and tail behaviour of
the partition function and the lattice solution.

Every estimator returns a record with a ``row()`` (or ``rows()``) method
producing flat dictionaries for the CSV/JSON writers.
"""
import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy
from numpy.polynomial import legendre
from scipy import optimize, special, stats

from . import randutils
from .config import ExperimentConfig, config_hash, is_multiple
from .errors import InvalidArgumentError, MisalignmentError
from .lattice_she import InitialCondition, SHEGrid, lattice_field, run_to
from .mollifier import heat_kernel, heat_solve, sphere_area, v_radial
from .noise import TransformMode
from .parallel import map_chunks
from .polymer import (
    bridge_density_ratio,
    discrete_compensator,
    draw_paths,
    field_action,
    kernel_for,
    khasminskii_bound,
    make_field,
    occupation_steps,
    overlap_functional,
    partition_function,
    partition_horizons,
    rescaled_view,
)

Z95 = float(stats.norm.ppf(0.975))
MIN_FIT_POINTS = 4


def _mean_se(values) -> Tuple[float, float]:
    values = numpy.asarray(values, dtype=float)
    if len(values) < 2:
        return float(values.mean()), float("nan")
    return float(values.mean()), float(values.std(ddof=1) / numpy.sqrt(len(values)))


def _path_seed(config: ExperimentConfig, *tags: int) -> int:
    return randutils.derive_seed(config.seed, randutils.PATHS, *tags)


@dataclass
class CovarianceRecord:
    """Covariance of the partition function at separation ``x``, from the
    common-noise pair estimator and from the overlap exponential moment."""

    x: Tuple[float, ...]
    T: float
    beta: float
    pair: Optional[float] = None
    pair_se: Optional[float] = None
    overlap: Optional[float] = None
    overlap_se: Optional[float] = None
    config_hash: str = ""

    @property
    def distance(self) -> float:
        return float(numpy.linalg.norm(self.x))

    def rows(self) -> List[dict]:
        out = []
        for name, value, se in (("pair", self.pair, self.pair_se), ("overlap", self.overlap, self.overlap_se)):
            if value is not None:
                out.append(
                    {
                        "estimator": name,
                        "x": self.distance,
                        "value": value,
                        "se": se,
                        "T": self.T,
                        "beta": self.beta,
                        "config_hash": self.config_hash,
                    }
                )
        return out


def covariance_pair(
    config: ExperimentConfig, x, T: float = None, batches: int = None, *, M: int = None
) -> CovarianceRecord:
    """Sample covariance of ``(Z_T(0), Z_T(x))`` over noise batches. The two
    estimates of a batch read the same noise and draw their paths from
    separate streams, also at ``x = 0``."""
    T = config.T if T is None else T
    batches = config.stats.batches if batches is None else batches
    x = numpy.asarray(x, dtype=float).reshape(config.d)

    values = numpy.empty((batches, 2))
    for b in range(batches):
        noise = make_field(config, b)
        values[b, 0] = partition_function(config, noise, numpy.zeros(config.d), T, M=M, seed=_path_seed(config, b, 0)).value
        values[b, 1] = partition_function(config, noise, x, T, M=M, seed=_path_seed(config, b, 1)).value

    centered = values - values.mean(axis=0)
    products = centered[:, 0] * centered[:, 1]
    cov = float(products.sum() / (batches - 1))
    se = float(products.std(ddof=1) / numpy.sqrt(batches))
    logging.info(f"pair covariance |x|={numpy.linalg.norm(x):.3g}: {cov:.4g} +- {se:.2g}")
    return CovarianceRecord(tuple(x.tolist()), T, config.beta, pair=cov, pair_se=se, config_hash=config_hash(config))


def covariance_overlap(config: ExperimentConfig, x, T: float = None, M: int = None) -> CovarianceRecord:
    """``E_{x/sqrt(2)}[exp(beta^2 int_0^T V(sqrt(2) W))] - 1``."""
    T = config.T if T is None else T
    x = numpy.asarray(x, dtype=float).reshape(config.d)
    estimate = overlap_functional(config, x / numpy.sqrt(2.0), T, M=M)
    return CovarianceRecord(
        tuple(x.tolist()),
        T,
        config.beta,
        overlap=estimate.moment - 1.0,
        overlap_se=estimate.moment_se,
        config_hash=config_hash(config),
    )


def covariance_table(config: ExperimentConfig, separations: Sequence[float] = None, T: float = None) -> List[CovarianceRecord]:
    """Both estimators at ``s e_1`` for every separation ``s``."""
    separations = config.stats.separations if separations is None else separations
    records = []
    for s in separations:
        x = numpy.zeros(config.d)
        x[0] = s
        pair = covariance_pair(config, x, T)
        overlap = covariance_overlap(config, x, T)
        pair.overlap, pair.overlap_se = overlap.overlap, overlap.overlap_se
        records.append(pair)
    return records


@dataclass
class PowerLawFit:
    slope: float
    slope_ci: float
    amplitude: float
    points: int

    def row(self) -> dict:
        return {"slope": self.slope, "ci95": self.slope_ci, "amplitude": self.amplitude, "points": self.points}


def powerlaw_fit(distances, values, errors=None) -> PowerLawFit:
    """Weighted least squares of ``log value`` against ``log distance``.

    Nonpositive values cannot be fitted and are dropped with a warning.
    The weights are the relative errors ``se/value``.

    Raises
    ------
        InvalidArgumentError
            Fewer than MIN_FIT_POINTS positive points remain
    """
    distances = numpy.asarray(distances, dtype=float)
    values = numpy.asarray(values, dtype=float)
    errors = None if errors is None else numpy.asarray(errors, dtype=float)

    keep = values > 0
    if not keep.all():
        logging.warning(f"dropping {int((~keep).sum())} nonpositive covariance points from the fit")
    if keep.sum() < MIN_FIT_POINTS:
        raise InvalidArgumentError(f"power law fit needs at least {MIN_FIT_POINTS} positive points, got {int(keep.sum())}")

    r, c = numpy.log(distances[keep]), numpy.log(values[keep])
    sigma = None
    if errors is not None and numpy.all(errors[keep] > 0):
        sigma = errors[keep] / values[keep]

    params, pcov = optimize.curve_fit(
        lambda z, intercept, slope: intercept + slope * z,
        r,
        c,
        p0=(c[0], -1.0),
        sigma=sigma,
        absolute_sigma=sigma is not None,
    )
    ci = Z95 * float(numpy.sqrt(max(pcov[1, 1], 0.0))) if numpy.isfinite(pcov[1, 1]) else float("inf")
    return PowerLawFit(float(params[1]), ci, float(numpy.exp(params[0])), int(keep.sum()))


def sigma2_integrand(config: ExperimentConfig, y, T: float = None, *, M: int = None, beta: float = None) -> Tuple[float, float]:
    """``V(sqrt(2) y) E_y[exp(beta^2 int_0^T V(sqrt(2) W))]`` and its SE."""
    kernel = kernel_for(config.d, config.mollifier.dr)
    y = numpy.asarray(y, dtype=float).reshape(config.d)
    weight = float(v_radial(kernel, numpy.sqrt(2.0) * numpy.linalg.norm(y)))
    if weight == 0:
        return 0.0, 0.0
    estimate = overlap_functional(config, y, T, M=M, beta=beta, kernel=kernel)
    return weight * estimate.moment, weight * estimate.moment_se


@dataclass
class Sigma2Estimate:
    beta: float
    value: float
    se: float
    value_long: float
    se_long: float
    T: float
    diverging: bool

    def row(self) -> dict:
        return dict(self.__dict__)


def _sigma2_at(config, beta, T, M, order) -> Tuple[float, float]:
    nodes, weights = legendre.leggauss(order)
    reach = 1.0 / numpy.sqrt(2.0)
    radii = 0.5 * reach * (nodes + 1.0)
    weights = 0.5 * reach * weights * sphere_area(config.d) * radii ** (config.d - 1)

    total, variance = 0.0, 0.0
    for r, w in zip(radii, weights):
        y = numpy.zeros(config.d)
        y[0] = r
        value, se = sigma2_integrand(config, y, T, M=M, beta=beta)
        total += w * value
        variance += (w * se) ** 2
    return total, float(numpy.sqrt(variance))


def sigma2_relative(
    config: ExperimentConfig, beta: float = None, *, T: float = None, M: int = None, order: int = 16
) -> Sigma2Estimate:
    """``int dy V(sqrt(2) y) E_y[exp(beta^2 int V(sqrt(2) W))]`` without its
    dimensional constant, by Gauss-Legendre quadrature in ``|y|``.

    The value is computed at ``T`` and ``2T``; growth beyond three combined
    standard errors is reported as divergence.
    """
    beta = config.beta if beta is None else beta
    T = config.T if T is None else T
    if beta > 0 and beta >= khasminskii_bound(kernel_for(config.d, config.mollifier.dr)):
        logging.warning(f"beta={beta} is not below the Khas'minskii bound")

    value, se = _sigma2_at(config, beta, T, M, order)
    long_config = config.with_values(T=2 * T)
    value_long, se_long = _sigma2_at(long_config, beta, 2 * T, M, order)
    diverging = bool(value_long - value > 3 * numpy.hypot(se, se_long))
    if diverging:
        logging.warning(f"sigma^2 grows from {value:.4g} to {value_long:.4g} between T={T} and T={2 * T}")
    return Sigma2Estimate(beta, value, se, value_long, se_long, T, diverging)


@dataclass
class PlateauTable:
    horizons: Tuple[float, ...]
    second_moments: numpy.ndarray
    second_moment_ses: numpy.ndarray
    increments: numpy.ndarray
    increment_ses: numpy.ndarray
    batches: int

    def rows(self) -> List[dict]:
        out = []
        for i, T in enumerate(self.horizons):
            row = {"T": T, "second_moment": self.second_moments[i], "se": self.second_moment_ses[i]}
            if i > 0:
                row.update(increment=self.increments[i - 1], increment_se=self.increment_ses[i - 1])
            else:
                row.update(increment=float("nan"), increment_se=float("nan"))
            out.append(row)
        return out


def martingale_plateau(
    config: ExperimentConfig, horizons: Sequence[float] = None, batches: int = None, *, M: int = None
) -> PlateauTable:
    """``E[(Z_{T2} - Z_{T1})^2]`` for consecutive horizons, each batch
    sharing noise and paths across the horizons."""
    horizons = tuple(config.stats.horizons if horizons is None else horizons)
    batches = config.stats.batches if batches is None else batches
    values = numpy.empty((batches, len(horizons)))
    for b in range(batches):
        estimates = partition_horizons(config, make_field(config, b), numpy.zeros(config.d), horizons, M=M, seed=_path_seed(config, b))
        values[b] = [e.value for e in estimates]

    squares = values**2
    steps = numpy.diff(values, axis=1) ** 2
    table = PlateauTable(
        horizons,
        squares.mean(axis=0),
        squares.std(axis=0, ddof=1) / numpy.sqrt(batches),
        steps.mean(axis=0),
        steps.std(axis=0, ddof=1) / numpy.sqrt(batches),
        batches,
    )
    logging.info(f"plateau increments {numpy.array2string(table.increments, precision=4)}")
    return table


@dataclass
class GapRecord:
    """Per ``eps``: mean and variance over seeds of the lattice height minus
    its polymer decomposition and the noiseless reference."""

    variant: str
    eps: Tuple[float, ...]
    means: List[float]
    mean_ses: List[float]
    variances: List[float]
    references: List[float]
    seeds: int
    samples: Dict[float, numpy.ndarray] = field(default_factory=dict, repr=False)

    def rows(self) -> List[dict]:
        return [
            {
                "variant": self.variant,
                "eps": e,
                "mean": m,
                "se": s,
                "variance": v,
                "reference": r,
                "seeds": self.seeds,
            }
            for e, m, s, v, r in zip(self.eps, self.means, self.mean_ses, self.variances, self.references)
        ]


def _log_proxy(config, view, start, T, M, seed) -> float:
    estimate = partition_function(config.with_values(T=T), view, start, T, M=M, seed=seed)
    return float(estimate.log_value)


def theorem1_gap(
    config: ExperimentConfig,
    variant: str,
    t: float,
    x,
    eps_list: Sequence[float] = None,
    *,
    seeds: int = None,
    M: int = None,
    h0: Callable = None,
    h0_bound: float = None,
    x0=None,
    T_max: float = None,
) -> GapRecord:
    """Gap between the lattice height ``h_eps(t, x)`` and its polymer
    approximation, over ``seeds`` lattice noises per ``eps``.

    ``flat``: ``h - log Z(view at (t, 0); x/eps)``.
    ``general``: the same minus ``log ubar(t, x)`` from ``heat_solve``.
    ``droplet``: ``h - log Z(view at (t, 0); x/eps) - log Z(anchored view at
    x0; 0) - log rho(t, x - x0)``.

    The polymer terms are read from the lattice noise itself through the
    rescaled views, on the polymer grid ``(she.dt, she.spacing)``, and use
    ``T_max`` (default ``4 t / min(eps)^2``) as a stand-in for the infinite
    horizon.
    """
    eps_list = tuple(config.stats.eps_list if eps_list is None else eps_list)
    seeds = config.stats.batches if seeds is None else seeds
    M = config.M if M is None else M
    x = numpy.asarray(x, dtype=float).reshape(config.d)
    T_max = 4 * t / min(eps_list) ** 2 if T_max is None else T_max

    if variant == "flat":
        initial = InitialCondition.flat()
    elif variant == "general":
        if h0 is None:
            raise InvalidArgumentError("the general variant needs h0")
        initial = InitialCondition.general(h0, h0_bound)
    elif variant == "droplet":
        x0 = numpy.zeros(config.d) if x0 is None else numpy.asarray(x0, dtype=float).reshape(config.d)
        initial = InitialCondition.droplet(x0)
    else:
        raise InvalidArgumentError(f"unknown variant {variant!r}")

    polymer = config.with_values(delta=config.she.dt, a=config.she.spacing)
    if not is_multiple(T_max, polymer.delta):
        raise MisalignmentError("T_max must be a multiple of she.dt", T_max=T_max, dt=polymer.delta)

    if variant == "general":
        reference = float(numpy.log(heat_solve(initial.heat_state(config.d), t, x, strict=True)))
    elif variant == "droplet":
        reference = float(numpy.log(heat_kernel(t, x - x0)))
    else:
        reference = 0.0

    record = GapRecord(variant, eps_list, [], [], [], [], seeds)
    for eps in eps_list:
        grid = SHEGrid.create(config, eps=eps, t=t)
        gaps = numpy.empty(seeds)
        for b in range(seeds):
            noise = lattice_field(config, grid, b)
            snapshot = run_to(grid, t, initial, noise, digest=config_hash(config))
            _, h = snapshot.at(x)

            seed = _path_seed(config, b)
            gap = h - reference
            if config.beta != 0:
                view = rescaled_view(noise, eps, t, numpy.zeros(config.d))
                gap -= _log_proxy(polymer, view, x / eps, T_max, M, seed)
                if variant == "droplet":
                    anchored = rescaled_view(noise, eps, 0.0, x0, TransformMode.ANCHORED_SCALING)
                    gap -= _log_proxy(polymer, anchored, numpy.zeros(config.d), T_max, M, seed + 1)
            gaps[b] = gap

        mean, se = _mean_se(gaps)
        record.means.append(mean)
        record.mean_ses.append(se)
        record.variances.append(float(gaps.var(ddof=1)) if seeds > 1 else 0.0)
        record.references.append(reference)
        record.samples[eps] = gaps
        logging.info(f"{variant} gap eps={eps}: mean {mean:.4g} +- {se:.2g}, variance {record.variances[-1]:.4g}")

    return record


@dataclass
class NarrowWedgeRecord:
    t: float
    x: Tuple[float, ...]
    x0: Tuple[float, ...]
    eps: float
    rho: float
    factor: float
    factor_se: float

    @property
    def mean(self) -> float:
        return self.rho * self.factor

    def row(self) -> dict:
        return {
            "t": self.t,
            "eps": self.eps,
            "rho": self.rho,
            "factor": self.factor,
            "factor_se": self.factor_se,
            "u_mean": self.mean,
            "u_se": self.rho * self.factor_se,
        }


def narrow_wedge_mean(
    config: ExperimentConfig, t: float, x, x0=None, M: int = None, *, eps: float = None, batches: int = None
) -> NarrowWedgeRecord:
    """``E[u_eps(t, x)]`` for the droplet at ``x0`` as ``rho(t, x - x0)``
    times the mean bridge factor: the partition function of bridges from 0
    to ``(x - x0)/eps`` over ``t/eps^2``, on the noise rescaled around
    ``x0``."""
    eps = config.eps if eps is None else eps
    batches = config.stats.batches if batches is None else batches
    x = numpy.asarray(x, dtype=float).reshape(config.d)
    x0 = numpy.zeros(config.d) if x0 is None else numpy.asarray(x0, dtype=float).reshape(config.d)
    horizon = t / eps**2
    bridge_config = config.with_values(T=horizon)

    factors = numpy.empty(batches)
    for b in range(batches):
        view = rescaled_view(make_field(config, b, eps=eps), eps, 0.0, x0, TransformMode.ANCHORED_SCALING)
        factors[b] = partition_function(
            bridge_config, view, numpy.zeros(config.d), horizon, M=M, seed=_path_seed(config, b), end=(x - x0) / eps
        ).value

    factor, se = _mean_se(factors) if config.beta != 0 else (1.0, 0.0)
    record = NarrowWedgeRecord(t, tuple(x.tolist()), tuple(x0.tolist()), eps, float(heat_kernel(t, x - x0)), factor, se)
    logging.info(f"narrow wedge: bridge factor {factor:.4g} +- {se:.2g}, rho={record.rho:.4g}")
    return record


def wilson_interval(successes, trials: int, z: float = Z95) -> Tuple[numpy.ndarray, numpy.ndarray]:
    p = numpy.asarray(successes, dtype=float) / trials
    scale = 1 + z**2 / trials
    center = (p + z**2 / (2 * trials)) / scale
    half = z * numpy.sqrt(p * (1 - p) / trials + z**2 / (4 * trials**2)) / scale
    return numpy.clip(center - half, 0.0, 1.0), numpy.clip(center + half, 0.0, 1.0)


@dataclass
class TailRecord:
    """Lower tail of ``log Z`` over independent noises and the negative
    moments ``E[Z^-1]``, ``E[Z^-2]`` at two horizons; ``log_weights``
    holds the per-path log-weights behind every ``Z``."""

    T: float
    inner: int
    N: int
    thetas: Tuple[float, ...]
    counts: numpy.ndarray
    probabilities: numpy.ndarray
    lower: numpy.ndarray
    upper: numpy.ndarray
    c_hat: float
    log_c: float
    fitted: Tuple[float, ...]
    negative_moments: Dict[float, Tuple[float, float, float, float]]
    log_weights: Optional[numpy.ndarray] = field(default=None, repr=False)

    def rows(self) -> List[dict]:
        out = [
            {
                "kind": "tail",
                "T": self.T,
                "inner": self.inner,
                "theta": theta,
                "count": int(k),
                "p": p,
                "lower": lo,
                "upper": hi,
                "c_hat": self.c_hat,
            }
            for theta, k, p, lo, hi in zip(self.thetas, self.counts, self.probabilities, self.lower, self.upper)
        ]
        for T, (m1, s1, m2, s2) in self.negative_moments.items():
            out.append({"kind": "negative-moment", "T": T, "inner": self.inner, "m1": m1, "m1_se": s1, "m2": m2, "m2_se": s2})
        return out


def _tail_chunk(config, horizons, inner, lo, hi) -> numpy.ndarray:
    serial = config.with_values(workers=1)
    out = numpy.empty((hi - lo, len(horizons), inner))
    for i, b in enumerate(range(lo, hi)):
        estimates = partition_horizons(
            serial,
            make_field(config, b),
            numpy.zeros(config.d),
            horizons,
            M=inner,
            seed=_path_seed(config, b),
            retain=True,
        )
        out[i] = [e.log_weights for e in estimates]
    return out


def tail_key(inner: int, horizon: float) -> str:
    return f"logw/inner{inner}/T{horizon:g}"


def tail_study(
    config: ExperimentConfig,
    T: float = None,
    thetas: Sequence[float] = None,
    N: int = None,
    *,
    inner: int = None,
    min_count: int = 10,
    archive=None,
) -> TailRecord:
    """Empirical ``P[log Z_T <= -theta]`` from ``N`` noises, each ``Z_T``
    averaged over ``inner`` paths, with Wilson intervals and a fit of
    ``log p = log C - theta^2 / c``. Thetas with fewer than ``min_count``
    exceedances are left out of the fit. Negative moments are reported at
    ``T`` and ``2T`` from the same paths and noise.

    The per-path log-weights are kept on the record, shape ``(N, 2, inner)``,
    and written to ``archive`` when given, one ``(N, inner)`` array per
    horizon under ``tail_key(inner, horizon)``."""
    T = config.T if T is None else T
    thetas = tuple(config.stats.thetas if thetas is None else thetas)
    N = config.stats.realizations if N is None else N
    inner = config.stats.inner_small if inner is None else inner
    horizons = (T, 2 * T)

    kernel = functools.partial(_tail_chunk, config.with_values(T=2 * T), horizons, inner)
    log_weights = map_chunks(kernel, N, max(1, config.chunk // 16), config.workers)
    logs = special.logsumexp(log_weights, axis=2) - numpy.log(inner)
    if archive is not None:
        for i, horizon in enumerate(horizons):
            name = tail_key(inner, horizon)
            if archive.array_exists(name):
                archive.edit_array(name, log_weights[:, i, :])
            else:
                archive.add_array(name, log_weights[:, i, :])

    counts = numpy.array([(logs[:, 0] <= -theta).sum() for theta in thetas])
    probabilities = counts / N
    lower, upper = wilson_interval(counts, N)

    usable = counts >= min_count
    for theta in numpy.asarray(thetas)[~usable]:
        logging.warning(f"theta={theta} has fewer than {min_count} exceedances; left out of the envelope fit")

    c_hat, log_c = float("nan"), float("nan")
    if usable.sum() >= 2:
        slope, log_c = numpy.polyfit(numpy.asarray(thetas)[usable] ** 2, numpy.log(probabilities[usable]), 1)
        c_hat = float(-1.0 / slope) if slope < 0 else float("inf")
        log_c = float(log_c)

    moments = {}
    for i, horizon in enumerate(horizons):
        z = numpy.exp(logs[:, i])
        m1, s1 = _mean_se(1.0 / z)
        m2, s2 = _mean_se(z**-2.0)
        moments[horizon] = (m1, s1, m2, s2)

    record = TailRecord(
        T, inner, N, thetas, counts, probabilities, lower, upper, c_hat, log_c,
        tuple(float(t) for t in numpy.asarray(thetas)[usable]), moments, log_weights,
    )
    logging.info(f"tails T={T} inner={inner}: c_hat={c_hat:.4g}, E[1/Z]={moments[T][0]:.4g}")
    return record


@dataclass
class SplitRecord:
    T: float
    m: float
    X: Tuple[float, ...]
    gap: float
    gap_se: float
    middle_occupation: float
    middle_se: float
    bridge_gap: float
    bridge_gap_se: float
    batches: int

    def row(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "X"}


def _ratio_chunk(config, noise, m, T, X, seed, lo, hi) -> numpy.ndarray:
    paths = draw_paths(config, numpy.zeros(config.d), lo, hi, horizon=m, seed=seed, stream=randutils.PATHS)
    weights = numpy.exp(field_action(paths, noise, config.beta) - discrete_compensator(paths, config.beta, a=noise.a))
    # bridge pinned at X at time T
    ratio = bridge_density_ratio(paths.positions[:, -1, :], X, 2 * T, m)
    return weights * (ratio - 1.0)


def decorrelation_split(
    config: ExperimentConfig, T: float = None, m: float = None, *, X=None, batches: int = None, M: int = None
) -> SplitRecord:
    """Compare the bridge partition function from 0 to ``X`` over ``T`` with
    the product of two independent-looking factors: ``Z_m(0)`` on the noise
    and ``Z_m`` on the noise reversed from time ``T``, started at ``X``.

    Also reports the occupation ``int_m^{T-m} V(sqrt(2) W)`` of two-replica
    bridges, which transience makes small, and ``E_0[Phi_m (ratio - 1)]``,
    the error of replacing the bridge law by the free law up to time ``m``.

    Raises
    ------
        InvalidArgumentError
            m exceeds T/4
    """
    T = config.T if T is None else T
    m = config.stats.m if m is None else m
    batches = config.stats.batches if batches is None else batches
    M = config.M if M is None else M
    X = numpy.zeros(config.d) if X is None else numpy.asarray(X, dtype=float).reshape(config.d)
    if m > T / 4:
        raise InvalidArgumentError(f"m={m} exceeds T/4={T / 4}")
    if not is_multiple(m, config.delta):
        raise MisalignmentError("m must be a multiple of delta", m=m, delta=config.delta)

    origin = numpy.zeros(config.d)
    gaps, ratios = numpy.empty(batches), numpy.empty(batches)
    for b in range(batches):
        noise = make_field(config, b)
        seed = _path_seed(config, b)
        bridge = partition_function(config, noise, origin, T, M=M, seed=seed, end=X).value
        head = partition_function(config, noise, origin, m, M=M, seed=seed + 1).value
        tail = partition_function(config, rescaled_view(noise, 1.0, T, origin), X, m, M=M, seed=seed + 2).value
        gaps[b] = abs(bridge - head * tail)

        chunk = functools.partial(_ratio_chunk, config, noise, m, T, X, seed + 3)
        ratios[b] = map_chunks(chunk, M, config.chunk, config.workers).mean()

    kernel = kernel_for(config.d, config.mollifier.dr)
    replicas = draw_paths(config, origin, 0, M, horizon=T, seed=_path_seed(config, batches), stream=randutils.BRIDGES, end=origin)
    occupation = occupation_steps(replicas, kernel)
    k_m = int(round(m / config.delta))
    middle = occupation[:, k_m : occupation.shape[1] - k_m].sum(axis=1)

    record = SplitRecord(T, m, tuple(X.tolist()), *_mean_se(gaps), *_mean_se(middle), *_mean_se(ratios), batches)
    logging.info(f"split T={T} m={m}: L1 gap {record.gap:.4g} +- {record.gap_se:.2g}")
    return record


def split_second_moment(config: ExperimentConfig, T: float = None, m: float = None, M: int = None) -> Tuple[float, float]:
    """Bridge estimate of the squared error of the split::

        E^{T,0}_{0,0}[e^{b I(0,T)} - e^{b I(0,m)} e^{b I(T-m,T)}]

    with ``b = beta^2`` and ``I(s,t) = int_s^t V(sqrt(2) W)``."""
    T = config.T if T is None else T
    m = config.stats.m if m is None else m
    M = config.M if M is None else M
    if config.beta == 0:
        return 0.0, 0.0

    origin = numpy.zeros(config.d)
    paths = draw_paths(config, origin, 0, M, horizon=T, seed=config.seed, stream=randutils.BRIDGES, end=origin)
    occupation = occupation_steps(paths, kernel_for(config.d, config.mollifier.dr))
    k_m = int(round(m / config.delta))
    b = config.beta**2
    full = numpy.exp(b * occupation.sum(axis=1))
    ends = numpy.exp(b * (occupation[:, :k_m].sum(axis=1) + occupation[:, -k_m:].sum(axis=1)))
    return _mean_se(full - ends)


@dataclass
class AverageRecord:
    eps: float
    mean: float
    se: float
    variance: float
    limit: float

    def row(self) -> dict:
        return dict(self.__dict__)


def spatial_average(
    config: ExperimentConfig,
    f: Callable[[numpy.ndarray], numpy.ndarray],
    t: float,
    eps_list: Sequence[float] = None,
    *,
    seeds: int = None,
) -> List[AverageRecord]:
    """``sum a^d u_eps(t, x) f(x)`` on the lattice from a flat start, whose
    limit is ``int f``."""
    eps_list = tuple(config.stats.eps_list if eps_list is None else eps_list)
    seeds = config.stats.batches if seeds is None else seeds
    records = []
    for eps in eps_list:
        grid = SHEGrid.create(config, eps=eps, t=t)
        weights = grid.spacing**config.d * f(grid.positions().reshape(-1, config.d)).reshape(grid.u.shape)
        values = numpy.array(
            [
                float((run_to(grid, t, InitialCondition.flat(), lattice_field(config, grid, b), hopf=False).u * weights).sum())
                for b in range(seeds)
            ]
        )
        mean, se = _mean_se(values)
        records.append(AverageRecord(eps, mean, se, float(values.var(ddof=1)) if seeds > 1 else 0.0, float(weights.sum())))
    return records


def free_energy_sign(config: ExperimentConfig, T: float = None, batches: int = None, *, M: int = None) -> Tuple[float, float]:
    """Mean and SE of ``log Z_T`` over noises; negative for ``beta > 0``."""
    T = config.T if T is None else T
    batches = config.stats.batches if batches is None else batches
    logs = [
        partition_function(config, make_field(config, b), numpy.zeros(config.d), T, M=M, seed=_path_seed(config, b)).log_value
        for b in range(batches)
    ]
    mean, se = _mean_se(logs)
    if config.beta > 0 and mean >= 0:
        logging.warning(f"mean log Z = {mean:.4g} is not negative")
    return mean, se
