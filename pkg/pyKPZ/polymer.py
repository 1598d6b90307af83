"""Feynman-Kac Monte Carlo for the normalized partition function.

A sample is a discretized Brownian path ``W`` on the grid ``0, delta, ...,
T``. Against a noise field with the same time step, its action is::

    G = beta * sum_k delta * sum_j a^d phi(W_{k delta} - y_j) xi(k, j)

and the compensator ``c = beta^2/2 sum_k delta sum_j a^d phi(...)^2`` is
the exact conditional log-moment of ``G``. The weights ``exp(G - c)``
therefore have mean one at every discretization, so the estimator
``(1/M) sum exp(G_i - c_i)`` is unbiased.
"""
import functools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy
from scipy import integrate, special

from . import randutils
from .config import ExperimentConfig, config_hash, is_multiple, steps_for
from .errors import InvalidArgumentError, MisalignmentError, NumericOverflowError
from .mollifier import CovarianceKernel, MollifierSpec, heat_kernel, phi_eval, sphere_area, v_radial
from .noise import NoiseField, NoiseTransform, TransformedField, TransformMode
from .parallel import map_chunks

_KERNELS: Dict[Tuple[int, float], CovarianceKernel] = {}
_BLOCK = 2_000_000


@functools.lru_cache(maxsize=None)
def mollifier_for(d: int) -> MollifierSpec:
    return MollifierSpec(d)


def kernel_for(d: int, dr: float = 1e-3, archive=None) -> CovarianceKernel:
    """Tabulated ``V`` for dimension ``d``, built once per process."""
    key = (d, dr)
    if key not in _KERNELS:
        _KERNELS[key] = CovarianceKernel.build(mollifier_for(d), dr, archive=archive)
    return _KERNELS[key]


@dataclass
class BrownianPath:
    """A batch of discretized paths.

    Params
    -------
    positions : numpy.ndarray
        Shape (n, K+1, d), position at times ``0, delta, ..., K delta``
    delta : float
        Time step
    end : Optional[numpy.ndarray]
        Bridge endpoint, ``None`` for free paths
    """

    positions: numpy.ndarray
    delta: float
    end: Optional[numpy.ndarray] = None

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def steps(self) -> int:
        return self.positions.shape[1] - 1

    @property
    def horizon(self) -> float:
        return self.steps * self.delta

    def interpolate(self, s) -> numpy.ndarray:
        """Piecewise linear positions at times ``s``, shape (n, len(s), d)."""
        s = numpy.atleast_1d(numpy.asarray(s, dtype=float))
        grid = numpy.arange(self.steps + 1) * self.delta
        out = numpy.empty((self.count, len(s), self.positions.shape[2]))
        for i in range(self.count):
            for c in range(self.positions.shape[2]):
                out[i, :, c] = numpy.interp(s, grid, self.positions[i, :, c])
        return out


PathEnsemble = BrownianPath


def sample_path(config: ExperimentConfig, x, rng: numpy.random.Generator, *, horizon: float = None, n: int = 1) -> BrownianPath:
    """Gaussian walk from ``x`` with increments of variance ``delta`` per
    coordinate."""
    horizon = config.T if horizon is None else horizon
    steps = steps_for(horizon, config.delta)
    x = numpy.asarray(x, dtype=float).reshape(config.d)
    increments = rng.standard_normal((n, steps, config.d)) * numpy.sqrt(config.delta)
    positions = numpy.concatenate([numpy.zeros((n, 1, config.d)), numpy.cumsum(increments, axis=1)], axis=1)
    return BrownianPath(positions + x, config.delta)


def sample_bridge(config: ExperimentConfig, x, y, horizon: float, rng: numpy.random.Generator, *, n: int = 1) -> BrownianPath:
    """Bridge from ``x`` at time 0 to ``y`` at ``horizon``:
    ``W_s = x + B_s - (s/T)(B_T - (y - x))``. The endpoint is exact.

    Raises
    ------
        MisalignmentError
            ``horizon`` is not a multiple of ``delta``
    """
    if not is_multiple(horizon, config.delta):
        raise MisalignmentError("bridge horizon must be a multiple of delta", T=horizon, delta=config.delta)

    x = numpy.asarray(x, dtype=float).reshape(config.d)
    y = numpy.asarray(y, dtype=float).reshape(config.d)
    free = sample_path(config, numpy.zeros(config.d), rng, horizon=horizon, n=n).positions
    s = numpy.arange(free.shape[1]) * config.delta / horizon
    positions = x + free - s[None, :, None] * (free[:, -1:, :] - (y - x))
    positions[:, -1, :] = y
    return BrownianPath(positions, config.delta, y)


def draw_paths(
    config: ExperimentConfig, x, lo: int, hi: int, *, horizon: float, seed: int, stream: int, end=None
) -> BrownianPath:
    """Paths ``lo .. hi-1``, each from its own Philox stream."""
    positions = []
    for index in range(lo, hi):
        rng = randutils.sample_rng(seed, stream, index)
        if end is None:
            path = sample_path(config, x, rng, horizon=horizon)
        else:
            path = sample_bridge(config, x, end, horizon, rng)
        positions.append(path.positions[0])

    return BrownianPath(numpy.stack(positions), config.delta, None if end is None else numpy.asarray(end, dtype=float))


@functools.lru_cache(maxsize=None)
def stencil_offsets(a: float, d: int, reach: float = 0.5) -> numpy.ndarray:
    """Cell offsets, relative to the cell holding a point, of every cell
    that can come within ``reach`` of that point."""
    r = int(numpy.ceil(reach / a)) + 1
    axes = numpy.meshgrid(*([numpy.arange(-r, r + 1)] * d), indexing="ij")
    offsets = numpy.stack([g.ravel() for g in axes], axis=-1)
    gap = numpy.maximum(numpy.abs(offsets) - 1, 0) * a
    return offsets[numpy.sum(gap * gap, axis=1) < reach**2]


def _stencil(points: numpy.ndarray, a: float, spec: MollifierSpec) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """Cells near ``points`` (..., d) and the weights ``phi(point - center)``."""
    offsets = stencil_offsets(a, spec.d)
    cells = numpy.floor(points / a).astype(numpy.int64)[..., None, :] + offsets
    weights = phi_eval(spec, points[..., None, :] - (cells + 0.5) * a)
    return cells, weights


def _blocks(count: int, steps: int, width: int):
    block = max(1, _BLOCK // max(1, count * width))
    for lo in range(0, steps, block):
        yield lo, min(lo + block, steps)


def _check_grid(path: BrownianPath, noise):
    if not numpy.isclose(path.delta, noise.delta):
        raise MisalignmentError("path and noise time steps differ", path_delta=path.delta, noise_delta=noise.delta)


def step_terms(path: BrownianPath, noise, k0: int = 0) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """Per-slab pairing and squared norm of ``phi(W_k - .)``.

    Returns
    --------
    Tuple[numpy.ndarray, numpy.ndarray]
        ``g[i, k] = delta a^d sum_j phi(W_k - y_j) xi(k0 + k, j)`` and
        ``q[i, k] = delta a^d sum_j phi(W_k - y_j)^2``, both (n, K)
    """
    _check_grid(path, noise)
    spec = mollifier_for(noise.d)
    n, steps = path.count, path.steps
    g = numpy.zeros((n, steps))
    q = numpy.zeros((n, steps))
    volume = noise.cell_volume

    for lo, hi in _blocks(n, steps, len(stencil_offsets(noise.a, noise.d))):
        cells, weights = _stencil(path.positions[:, lo:hi, :], noise.a, spec)
        ks = numpy.broadcast_to((k0 + numpy.arange(lo, hi))[None, :, None], weights.shape)
        live = weights > 0
        xi = numpy.zeros_like(weights)
        xi[live] = noise.values(ks[live], cells[live])
        g[:, lo:hi] = volume * numpy.sum(weights * xi, axis=-1)
        q[:, lo:hi] = volume * numpy.sum(weights * weights, axis=-1)

    return g, q


def field_action(path: BrownianPath, noise, beta: float, *, k0: int = 0) -> numpy.ndarray:
    """``G`` for every path in the batch; only cells within 1/2 of the path
    are read.

    Raises
    ------
        MisalignmentError
            The path step differs from the noise time step
    """
    if beta == 0:
        _check_grid(path, noise)
        return numpy.zeros(path.count)

    g, _ = step_terms(path, noise, k0)
    return beta * g.sum(axis=1)


def discrete_compensator(path: BrownianPath, beta: float, *, a: float) -> numpy.ndarray:
    """``(beta^2/2) sum_k delta sum_j a^d phi(W_k - y_j)^2``, half the
    conditional variance of ``field_action`` on cells of side ``a``."""
    if beta == 0:
        return numpy.zeros(path.count)

    spec = mollifier_for(path.positions.shape[2])
    q = numpy.zeros(path.count)
    for lo, hi in _blocks(path.count, path.steps, len(stencil_offsets(a, spec.d))):
        _, weights = _stencil(path.positions[:, lo:hi, :], a, spec)
        q += path.delta * a**spec.d * numpy.sum(weights * weights, axis=(1, 2))
    return 0.5 * beta**2 * q


def continuum_compensator(beta: float, horizon: float, d: int) -> float:
    """``beta^2 T V(0) / 2``, the limit of the discrete compensator."""
    return 0.5 * beta**2 * horizon * mollifier_for(d).square_integral()


@dataclass
class PartitionEstimate:
    """Monte Carlo estimate of the partition function at one point and
    horizon. ``log_weights`` is kept only when requested."""

    value: float
    se: float
    M: int
    log_value: float
    horizon: float
    config_hash: str = ""
    log_weights: Optional[numpy.ndarray] = field(default=None, repr=False)

    def row(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "T": self.horizon,
            "Z": self.value,
            "se": self.se,
            "log_Z": self.log_value,
            "M": self.M,
        }


def summarize(log_weights: numpy.ndarray, horizon: float, *, digest: str = "", retain: bool = False) -> PartitionEstimate:
    """Mean and standard error of ``exp(log_weights)`` computed from the
    largest weight down.

    Raises
    ------
        NumericOverflowError
            A log-weight is not finite, or the mean overflows
    """
    log_weights = numpy.asarray(log_weights, dtype=float)
    bad = numpy.flatnonzero(~numpy.isfinite(log_weights))
    if len(bad):
        raise NumericOverflowError("non-finite log-weight", int(bad[0]))

    count = len(log_weights)
    top = float(log_weights.max())
    scaled = numpy.exp(log_weights - top)
    mean = float(scaled.mean())
    spread = float(scaled.std(ddof=1)) if count > 1 else 0.0

    with numpy.errstate(over="ignore"):
        scale = numpy.exp(top)
    value = scale * mean
    if not numpy.isfinite(value):
        raise NumericOverflowError("partition estimate overflows", int(numpy.argmax(log_weights)))

    return PartitionEstimate(
        value=value,
        se=scale * spread / numpy.sqrt(count),
        M=count,
        log_value=float(special.logsumexp(log_weights) - numpy.log(count)),
        horizon=horizon,
        config_hash=digest,
        log_weights=log_weights if retain else None,
    )


def _log_weight_chunk(config, noise, x, horizons, seed, stream, end, lo, hi) -> numpy.ndarray:
    longest = max(horizons)
    paths = draw_paths(config, x, lo, hi, horizon=longest, seed=seed, stream=stream, end=end)
    if config.beta == 0:
        _check_grid(paths, noise)
        return numpy.zeros((hi - lo, len(horizons)))

    g, q = step_terms(paths, noise)
    terms = numpy.cumsum(config.beta * g - 0.5 * config.beta**2 * q, axis=1)
    stops = [steps_for(h, config.delta) - 1 for h in horizons]
    return terms[:, stops]


def partition_horizons(
    config: ExperimentConfig,
    noise,
    x,
    horizons: Sequence[float],
    *,
    M: int = None,
    seed: int = None,
    stream: int = randutils.PATHS,
    end=None,
    retain: bool = False,
) -> List[PartitionEstimate]:
    """Estimates at several horizons from the same paths and noise, so that
    consecutive horizons differ only through the added slabs. Bridges
    (``end`` given) are pinned at the largest horizon."""
    M = config.M if M is None else M
    if M < 2:
        raise InvalidArgumentError(f"need at least 2 samples, got {M}")
    for h in horizons:
        if not is_multiple(h, config.delta):
            raise MisalignmentError("horizon must be a multiple of delta", T=h, delta=config.delta)

    seed = config.seed if seed is None else seed
    kernel = functools.partial(
        _log_weight_chunk, config, noise, numpy.asarray(x, dtype=float), tuple(horizons), seed, stream, end
    )
    log_weights = map_chunks(kernel, M, config.chunk, config.workers)
    digest = config_hash(config)
    return [
        summarize(log_weights[:, i], h, digest=digest, retain=retain) for i, h in enumerate(horizons)
    ]


def partition_function(config: ExperimentConfig, noise, x, T: float = None, **kwargs) -> PartitionEstimate:
    """Estimate the partition function at ``x`` and horizon ``T``.

    Params
    -------
    config : ExperimentConfig
        ``beta``, ``delta``, ``M``, ``seed``, ``chunk`` and ``workers`` are read
    noise : NoiseField or TransformedField
        Noise whose time step equals ``config.delta``
    x : array-like
        Starting point
    T : float
        Horizon, ``config.T`` by default
    **kwargs
        ``M``, ``seed`` and ``stream`` select the paths; ``end`` pins them
        as bridges; ``retain`` keeps the log-weights

    Returns
    --------
    PartitionEstimate
        Point estimate, standard error and sample count

    Raises
    ------
        NumericOverflowError
            A weight overflows; the offending sample index is attached
    """
    T = config.T if T is None else T
    estimate = partition_horizons(config, noise, x, [T], **kwargs)[0]
    logging.info(f"Z_T({numpy.asarray(x).tolist()}) T={T}: {estimate.value:.6g} +- {estimate.se:.2g}")
    return estimate


def make_field(config: ExperimentConfig, batch: int = 0, *, eps: float = 1.0, period: int = None) -> NoiseField:
    """Base noise for ``batch`` at refinement ``eps``: cells
    ``(delta eps^2, a eps)`` so that the transformed view at ``eps`` has the
    polymer cells ``(delta, a)``."""
    return NoiseField(
        randutils.derive_seed(config.seed, randutils.NOISE, batch),
        config.delta * eps**2,
        config.a * eps,
        config.d,
        period,
    )


def rescaled_view(base: NoiseField, eps: float, t: float, x, mode: TransformMode = TransformMode.DIFFUSIVE_REVERSAL) -> TransformedField:
    return TransformedField(base, NoiseTransform(eps, t, tuple(float(c) for c in numpy.ravel(x)), mode))


def occupation_steps(path: BrownianPath, kernel: CovarianceKernel) -> numpy.ndarray:
    """``delta V(sqrt(2) W_k)`` per slab, shape (n, K)."""
    r = numpy.sqrt(2.0) * numpy.linalg.norm(path.positions[:, :-1, :], axis=-1)
    return path.delta * v_radial(kernel, r)


@dataclass
class OverlapEstimate:
    """Overlap functional ``int_0^T V(sqrt(2) W_s) ds`` from one start.

    ``moment`` is the Monte Carlo mean of ``exp(beta^2 * overlap)``,
    ``tail_fraction`` the share of the occupation collected in the last
    tenth of the horizon.
    """

    mean: float
    se: float
    moment: float
    moment_se: float
    tail_fraction: float
    inside_fraction: float
    horizon: float
    M: int
    integrals: Optional[numpy.ndarray] = field(default=None, repr=False)


def _overlap_chunk(config, kernel, start, horizon, seed, stream, end, lo, hi) -> numpy.ndarray:
    paths = draw_paths(config, start, lo, hi, horizon=horizon, seed=seed, stream=stream, end=end)
    occupation = occupation_steps(paths, kernel)
    cut = int(numpy.floor(0.9 * paths.steps))
    inside = numpy.sqrt(2.0) * numpy.linalg.norm(paths.positions[:, cut:, :], axis=-1) < 1.0
    return numpy.stack(
        [occupation.sum(axis=1), occupation[:, cut:].sum(axis=1), inside.any(axis=1).astype(float)], axis=1
    )


def overlap_functional(
    config: ExperimentConfig,
    z,
    T: float = None,
    *,
    M: int = None,
    beta: float = None,
    seed: int = None,
    stream: int = randutils.PATHS,
    end=None,
    kernel: CovarianceKernel = None,
    retain: bool = False,
) -> OverlapEstimate:
    """Overlap integrals from ``z`` and the exponential moment
    ``E_z[exp(beta^2 int_0^T V(sqrt(2) W_s) ds)]``.

    A warning is logged when more than 1% of the occupation falls in the
    last tenth of the horizon, meaning ``T`` is too short to stand in for
    an infinite horizon.
    """
    T = config.T if T is None else T
    M = config.M if M is None else M
    beta = config.beta if beta is None else beta
    seed = config.seed if seed is None else seed
    kernel = kernel or kernel_for(config.d, config.mollifier.dr)

    chunk = functools.partial(
        _overlap_chunk, config, kernel, numpy.asarray(z, dtype=float), T, seed, stream, end
    )
    data = map_chunks(chunk, M, config.chunk, config.workers)
    integrals = data[:, 0]

    total = integrals.sum()
    tail_fraction = float(data[:, 1].sum() / total) if total > 0 else 0.0
    if tail_fraction > 0.01:
        logging.warning(
            f"overlap occupation in the last 10% of T={T} is {tail_fraction:.2%}; increase the horizon"
        )

    moments = numpy.exp(beta**2 * integrals)
    return OverlapEstimate(
        mean=float(integrals.mean()),
        se=float(integrals.std(ddof=1) / numpy.sqrt(M)),
        moment=float(moments.mean()),
        moment_se=float(moments.std(ddof=1) / numpy.sqrt(M)),
        tail_fraction=tail_fraction,
        inside_fraction=float(data[:, 2].mean()),
        horizon=T,
        M=M,
        integrals=integrals if retain else None,
    )


def _paired_chunk(config, kernel, x, horizon, seed, discrete, lo, hi) -> numpy.ndarray:
    first = draw_paths(config, numpy.zeros(config.d), 2 * lo, 2 * hi, horizon=horizon, seed=seed, stream=randutils.PAIRED)
    w1 = first.positions[0::2]
    w2 = first.positions[1::2] + x
    if not discrete:
        r = numpy.linalg.norm(w1[:, :-1] - w2[:, :-1], axis=-1)
        return config.delta * v_radial(kernel, r).sum(axis=1)

    spec = mollifier_for(config.d)
    a = config.a
    inner = numpy.zeros(hi - lo)
    steps = w1.shape[1] - 1
    for b_lo, b_hi in _blocks(hi - lo, steps, len(stencil_offsets(a, config.d))):
        cells, weights = _stencil(w1[:, b_lo:b_hi], a, spec)
        other = phi_eval(spec, w2[:, b_lo:b_hi, None, :] - (cells + 0.5) * a)
        inner += config.delta * a**config.d * numpy.sum(weights * other, axis=(1, 2))
    return inner


def second_moment_oracle(
    config: ExperimentConfig, x=None, T: float = None, *, M: int = None, discrete: bool = True, seed: int = None
) -> Tuple[float, float]:
    """Paired-path value of ``E[Z_T(0) Z_T(x)] - 1``.

    With ``discrete`` set the overlap of two paths is the cell sum
    ``sum delta a^d phi(W1 - y) phi(W2 - y)``, which makes the result the
    exact covariance of two discrete estimators on a common field.
    Otherwise the continuum overlap ``delta sum V(W1 - W2)`` is used.

    Returns
    --------
    Tuple[float, float]
        Estimate and standard error
    """
    T = config.T if T is None else T
    M = config.M if M is None else M
    seed = config.seed if seed is None else seed
    x = numpy.zeros(config.d) if x is None else numpy.asarray(x, dtype=float).reshape(config.d)
    kernel = None if discrete else kernel_for(config.d, config.mollifier.dr)

    chunk = functools.partial(_paired_chunk, config, kernel, x, T, seed, discrete)
    inner = map_chunks(chunk, M, config.chunk, config.workers)
    values = numpy.expm1(config.beta**2 * inner)
    return float(values.mean()), float(values.std(ddof=1) / numpy.sqrt(M))


def green_constant(d: int) -> float:
    """``Gamma(d/2 - 1) / (2 pi^{d/2})``, the Green kernel prefactor of
    Brownian motion with generator ``Laplacian/2``."""
    if d < 3:
        raise InvalidArgumentError(f"Green kernel diverges in dimension {d}")
    return special.gamma(d / 2 - 1) / (2 * numpy.pi ** (d / 2))


def green_occupation(kernel: CovarianceKernel, x_norm: float) -> float:
    """``E_x int_0^inf V(sqrt(2) W_s) ds`` at ``|x| = x_norm``. The spherical
    mean of ``|x - y|^{2-d}`` over ``|y| = r`` is ``max(|x|, r)^{2-d}``."""
    d = kernel.d
    reach = 1.0 / numpy.sqrt(2.0)

    def integrand(r):
        if r == 0:
            return 0.0
        return r ** (d - 1) * float(v_radial(kernel, numpy.sqrt(2.0) * r)) * max(x_norm, r) ** (2 - d)

    breaks = [x_norm] if 0 < x_norm < reach else None
    value, _ = integrate.quad(integrand, 0.0, reach, points=breaks, limit=200, epsabs=1e-12)
    return green_constant(d) * sphere_area(d) * value


def khasminskii_bound(kernel: CovarianceKernel) -> float:
    """``beta_K = (sup_x E_x int V(sqrt(2) W))^{-1/2}``; the supremum sits at
    the origin.

    Raises
    ------
        InvalidArgumentError
            d < 3
    """
    green_constant(kernel.d)
    beta_k = green_occupation(kernel, 0.0) ** -0.5
    logging.info(f"Khas'minskii bound d={kernel.d}: beta_K={beta_k:.6g}")
    return beta_k


def bridge_density_ratio(w_m, y, horizon: float, m: float) -> numpy.ndarray:
    """``rho_{T/2-m}(y - W_m) / rho_{T/2}(y)``, the density of a bridge
    pinned at ``y`` at time ``T/2`` relative to the free path, seen
    through its position at time ``m``."""
    w_m = numpy.asarray(w_m, dtype=float)
    y = numpy.asarray(y, dtype=float)
    return heat_kernel(horizon / 2 - m, y - w_m) / heat_kernel(horizon / 2, y)
