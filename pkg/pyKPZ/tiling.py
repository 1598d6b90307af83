"""Dyadic tiling of ``[0, 2^n] x [-2^n, 2^n]^d`` and the piecewise constant
lower bound of the path kernel ``phi_W(s, y) = phi(W_s - y)``.

A cube of level ``n`` is addressed by integers ``(i, x_1, ..., x_d)`` and
covers ``[i h, (i+1) h] x prod [x_c h, (x_c+1) h]`` with ``h = 2^-n``. The
lower bound is certified at a base level: center value minus the Lipschitz
constant of ``phi`` times the largest displacement of ``W_s - y`` inside
the cube. Coarser levels take the minimum over descendants, which keeps
every level below the true infimum and non-decreasing in ``n``.
"""
import functools
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy

from . import randutils
from .config import ExperimentConfig, config_hash, is_multiple
from .errors import InvalidArgumentError, MisalignmentError
from .mollifier import MollifierSpec, phi_eval
from .noise import NoiseField
from .parallel import map_chunks
from .polymer import BrownianPath, PartitionEstimate, draw_paths, khasminskii_bound, kernel_for, mollifier_for, stencil_offsets, summarize


@dataclass(frozen=True)
class DyadicTiling:
    n: int
    d: int

    @property
    def side(self) -> float:
        return 2.0 ** -self.n

    @property
    def volume(self) -> float:
        return self.side ** (self.d + 1)

    def contains(self, cubes) -> numpy.ndarray:
        """Whether each cube (..., d+1) lies in the tiled domain."""
        cubes = numpy.asarray(cubes)
        edge = 4**self.n
        time_ok = (cubes[..., 0] >= 0) & (cubes[..., 0] < edge)
        space_ok = numpy.all((cubes[..., 1:] >= -edge) & (cubes[..., 1:] < edge), axis=-1)
        return time_ok & space_ok

    def children(self, cube) -> numpy.ndarray:
        """The ``2^{d+1}`` cubes of level ``n+1`` inside ``cube``."""
        return descendants(numpy.asarray(cube)[None, :], 1)[0]

    def center(self, cubes) -> numpy.ndarray:
        return (numpy.asarray(cubes, dtype=float) + 0.5) * self.side


@functools.lru_cache(maxsize=None)
def _offsets(levels: int, width: int) -> numpy.ndarray:
    r = 2**levels
    axes = numpy.meshgrid(*([numpy.arange(r)] * width), indexing="ij")
    return numpy.stack([a.ravel() for a in axes], axis=-1)


def descendants(cubes: numpy.ndarray, levels: int) -> numpy.ndarray:
    """Cubes ``levels`` finer inside each of ``cubes`` (N, d+1); shape
    (N, 2^{(d+1) levels}, d+1)."""
    cubes = numpy.asarray(cubes, dtype=numpy.int64)
    return cubes[:, None, :] * 2**levels + _offsets(levels, cubes.shape[-1])[None, :, :]


def phi_w(path: BrownianPath, s, y, *, index: int = 0) -> numpy.ndarray:
    """``phi(W_s - y)`` along the piecewise linear path ``index``."""
    spec = mollifier_for(path.positions.shape[2])
    s = numpy.atleast_1d(numpy.asarray(s, dtype=float))
    w = path.interpolate(s)[index]
    return phi_eval(spec, w - numpy.asarray(y, dtype=float).reshape(len(s), -1))


class PathKernelLowerBound:
    """Certified lower bound of ``phi_W`` on the cubes of every level up to
    ``n_base``, for one path of a batch.

    Params
    -------
    path : BrownianPath
        Path batch; ``index`` selects the path
    n_base : int
        Finest level; its cubes carry the certified values
    index : int
        Path inside the batch
    """

    def __init__(self, path: BrownianPath, n_base: int, *, index: int = 0, spec: MollifierSpec = None):
        self.n_base = n_base
        self.d = path.positions.shape[2]
        self.spec = spec or mollifier_for(self.d)
        self.horizon = path.horizon

        h = 2.0**-n_base
        count = int(numpy.floor(self.horizon / h + 1e-9))
        grid = numpy.arange(path.steps + 1) * path.delta
        positions = path.positions[index]

        self.centers = numpy.empty((count, self.d))
        self.modulus = numpy.empty(count)
        for i in range(count):
            lo, hi = i * h, (i + 1) * h
            times = numpy.concatenate([[lo, hi, lo + h / 2], grid[(grid > lo) & (grid < hi)]])
            w = numpy.stack([numpy.interp(times, grid, positions[:, c]) for c in range(self.d)], axis=-1)
            self.centers[i] = w[2]
            self.modulus[i] = numpy.linalg.norm(w - w[2], axis=-1).max()

        self.margin = self.spec.lipschitz * (self.modulus + numpy.sqrt(self.d) * h / 2)

    def base_values(self, cubes) -> numpy.ndarray:
        """Certified values on base level cubes (..., d+1)."""
        cubes = numpy.asarray(cubes, dtype=numpy.int64)
        i = cubes[..., 0]
        valid = (i >= 0) & (i < len(self.centers))
        safe = numpy.where(valid, i, 0)
        h = 2.0**-self.n_base
        centers = (cubes[..., 1:] + 0.5) * h
        value = phi_eval(self.spec, self.centers[safe] - centers) - self.margin[safe]
        return numpy.where(valid, numpy.maximum(value, 0.0), 0.0)

    def values(self, n: int, cubes) -> numpy.ndarray:
        """Lower bound on level ``n`` cubes (N, d+1), zero outside the level
        ``n`` domain.

        Raises
        ------
            InvalidArgumentError
                n is negative or above ``n_base``
        """
        if not 0 <= n <= self.n_base:
            raise InvalidArgumentError(f"level {n} outside [0, {self.n_base}]")

        cubes = numpy.asarray(cubes, dtype=numpy.int64).reshape(-1, self.d + 1)
        lowest = self.base_values(descendants(cubes, self.n_base - n)).min(axis=1)
        return numpy.where(DyadicTiling(n, self.d).contains(cubes), lowest, 0.0)

    def support(self, n: int) -> Tuple[numpy.ndarray, numpy.ndarray]:
        """Level ``n`` cubes with a positive bound and their values. Only
        cubes whose center is within 1/2 of the path at the cube's mid time
        can be positive."""
        h = 2.0**-n
        times = int(numpy.floor(self.horizon / h + 1e-9))
        reach = int(numpy.ceil(0.5 / h)) + 3
        axes = numpy.meshgrid(*([numpy.arange(-reach, reach + 1)] * self.d), indexing="ij")
        offsets = numpy.stack([a.ravel() for a in axes], axis=-1)

        ratio = 2 ** (self.n_base - n)
        found_cubes, found_values = [], []
        for i in range(times):
            mid = self.centers[i * ratio : (i + 1) * ratio].mean(axis=0) if ratio > 1 else self.centers[i]
            base = numpy.floor(mid / h).astype(numpy.int64) + offsets
            near = numpy.linalg.norm((base + 0.5) * h - mid, axis=-1) < 0.5 + h * numpy.sqrt(self.d)
            cubes = numpy.concatenate([numpy.full((near.sum(), 1), i), base[near]], axis=1)
            values = self.values(n, cubes)
            keep = values > 0
            found_cubes.append(cubes[keep])
            found_values.append(values[keep])

        if not found_cubes:
            return numpy.zeros((0, self.d + 1), dtype=numpy.int64), numpy.zeros(0)
        return numpy.concatenate(found_cubes), numpy.concatenate(found_values)


def phi_w_n(bound: PathKernelLowerBound, n: int, cube) -> float:
    """Lower bound of ``phi_W`` on one level ``n`` cube."""
    return float(bound.values(n, numpy.asarray(cube)[None, :])[0])


def _check_nesting(noise: NoiseField, n: int) -> Tuple[int, int]:
    h = 2.0**-n
    if not (is_multiple(h, noise.delta) and is_multiple(h, noise.a)):
        raise MisalignmentError("noise cells must nest in level n cubes", n=n, delta=noise.delta, a=noise.a)
    return int(round(h / noise.delta)), int(round(h / noise.a))


def cube_noise(noise: NoiseField, n: int, cubes: numpy.ndarray) -> numpy.ndarray:
    """``xi(1_R)`` for every cube, the sum of ``delta a^d xi`` over the noise
    cells it contains; Gaussian with variance ``2^{-(d+1)n}``."""
    per_time, per_space = _check_nesting(noise, n)
    cubes = numpy.asarray(cubes, dtype=numpy.int64)
    if len(cubes) == 0:
        return numpy.zeros(0)

    d = noise.d
    sub_t = numpy.arange(per_time)
    axes = numpy.meshgrid(*([numpy.arange(per_space)] * d), indexing="ij")
    sub_x = numpy.stack([a.ravel() for a in axes], axis=-1)

    k = cubes[:, 0, None, None] * per_time + sub_t[None, :, None]
    j = cubes[:, None, None, 1:] * per_space + sub_x[None, None, :, :]
    k = numpy.broadcast_to(k, j.shape[:-1])
    return noise.cell_volume * noise.values(k, j).reshape(len(cubes), -1).sum(axis=1)


def tiled_action(bound: PathKernelLowerBound, noise: NoiseField, n: int) -> Tuple[float, float]:
    """Pairing of the level ``n`` kernel with the noise and its squared norm."""
    cubes, values = bound.support(n)
    volume = DyadicTiling(n, bound.d).volume
    return float(values @ cube_noise(noise, n, cubes)), float(volume * values @ values)


def discrete_expression(bound: PathKernelLowerBound, noise: NoiseField, n: int) -> float:
    """The same pairing written over cube centers with unit Gaussians
    ``xi_n(R) = 2^{(d+1)n/2} xi(1_R)``."""
    cubes, values = bound.support(n)
    scale = 2.0 ** (-(bound.d + 1) * n / 2)
    unit = cube_noise(noise, n, cubes) / scale
    return float(scale * values @ unit)


def tiling_field(config: ExperimentConfig, n: int, batch: int = 0) -> NoiseField:
    """Noise whose cells are the level ``n`` cubes."""
    h = 2.0**-n
    return NoiseField(randutils.derive_seed(config.seed, randutils.NOISE, batch), h, h, config.d)


def _tiled_chunk(config, noise, n, n_base, horizon, lo, hi) -> numpy.ndarray:
    paths = draw_paths(config, numpy.zeros(config.d), lo, hi, horizon=horizon, seed=config.seed, stream=randutils.PATHS)
    out = numpy.empty(hi - lo)
    for i in range(hi - lo):
        bound = PathKernelLowerBound(paths, n_base, index=i)
        action, norm2 = tiled_action(bound, noise, n)
        out[i] = config.beta * action - 0.5 * config.beta**2 * norm2
    return out


def discrete_partition(
    config: ExperimentConfig, noise: NoiseField, n: int, T: float, M: int = None, *, n_base: int = None
) -> PartitionEstimate:
    """Monte Carlo estimate of the level ``n`` partition function.

    Params
    -------
    config : ExperimentConfig
        ``beta``, ``delta`` (path step), seeds and worker settings
    noise : NoiseField
        Cells must nest in the level ``n`` cubes
    n : int
        Tiling level
    T : float
        Horizon, a multiple of ``2^-n``; times beyond ``2^n`` carry no cubes
    M : int
        Path count
    n_base : int
        Certification level, ``tiling.n_base`` by default

    Returns
    --------
    PartitionEstimate
        Mean of ``exp(G_n - c_n)``, exactly one in expectation

    Raises
    ------
        MisalignmentError
            Noise cells do not nest in the cubes or T is off the time grid
    """
    M = config.M if M is None else M
    n_base = config.tiling.n_base if n_base is None else n_base
    _check_nesting(noise, n)
    if not is_multiple(T, 2.0**-n):
        raise MisalignmentError("horizon must lie on the level n tiling", T=T, n=n)
    if n > n_base:
        raise InvalidArgumentError(f"level {n} above base level {n_base}")

    if config.beta == 0:
        return summarize(numpy.zeros(M), T, digest=config_hash(config))

    chunk = functools.partial(_tiled_chunk, config, noise, n, n_base, T)
    log_weights = map_chunks(chunk, M, config.chunk, config.workers)
    estimate = summarize(log_weights, T, digest=config_hash(config))
    logging.info(f"Z_T^({n}) T={T}: {estimate.value:.6g} +- {estimate.se:.2g}")
    return estimate


def _grid_weights(spec, points: numpy.ndarray, cells: numpy.ndarray, h: float) -> numpy.ndarray:
    return phi_eval(spec, points - (cells + 0.5) * h)


def _pair_overlaps(config, n, n_base, horizon, lo, hi) -> numpy.ndarray:
    spec = mollifier_for(config.d)
    h = 2.0**-n_base
    volume = h ** (config.d + 1)
    paths = draw_paths(
        config, numpy.zeros(config.d), 2 * lo, 2 * hi, horizon=horizon, seed=config.seed, stream=randutils.PAIRED
    )
    offsets = stencil_offsets(h, config.d)
    out = numpy.empty((hi - lo, 4))

    for p in range(hi - lo):
        bounds = [PathKernelLowerBound(paths, n_base, index=2 * p + q, spec=spec) for q in (0, 1)]
        c1, c2 = bounds[0].centers, bounds[1].centers

        # <phi_W1, phi_W2> by midpoint rule on base cells near W1
        cells = numpy.floor(c1 / h).astype(numpy.int64)[:, None, :] + offsets
        full = volume * numpy.sum(
            _grid_weights(spec, c1[:, None, :], cells, h) * _grid_weights(spec, c2[:, None, :], cells, h)
        )

        supports = [b.support(n) for b in bounds]
        cross = []
        for (cubes, values), other in ((supports[0], c2), (supports[1], c1)):
            if len(cubes) == 0:
                cross.append(0.0)
                continue
            fine = descendants(cubes, n_base - n)
            weights = _grid_weights(spec, other[fine[..., 0]], fine[..., 1:], h)
            cross.append(float(volume * numpy.sum(values[:, None] * weights)))

        (cubes1, values1), (cubes2, values2) = supports
        lookup = {tuple(c): v for c, v in zip(cubes2.tolist(), values2)}
        both = sum(v * lookup.get(tuple(c), 0.0) for c, v in zip(cubes1.tolist(), values1))
        out[p] = (full, cross[0], cross[1], (2.0**-n) ** (config.d + 1) * both)

    return out


@dataclass
class GapEstimate:
    n: int
    gap: float
    se: float
    terms: Tuple[float, float, float]
    M: int

    def row(self) -> dict:
        return {"n": self.n, "gap": self.gap, "se": self.se, "M": self.M}


def l2_gap(config: ExperimentConfig, n: int, T: float, M_pairs: int = None, *, n_base: int = None) -> GapEstimate:
    """Paired-path estimate of ``E[(Z_T - Z_T^(n))^2]``::

        E[e^{b<f1,f2>}] - E[e^{b<g1,f2>}] - E[e^{b<f1,g2>}] + E[e^{b<g1,g2>}]

    with ``b = beta^2``, ``f = phi_W`` and ``g`` its level ``n`` lower
    bound, all inner products taken on the base level midpoint grid. The
    cross term is symmetrized; per pair, each term is bounded by the first.
    """
    M_pairs = config.M if M_pairs is None else M_pairs
    n_base = config.tiling.n_base if n_base is None else n_base
    if n > n_base:
        raise InvalidArgumentError(f"level {n} above base level {n_base}")

    beta_k = khasminskii_bound(kernel_for(config.d, config.mollifier.dr))
    if config.beta >= beta_k:
        logging.warning(f"beta={config.beta} is not below the Khas'minskii bound {beta_k:.4g}")

    if config.beta == 0:
        return GapEstimate(n, 0.0, 0.0, (1.0, 1.0, 1.0), M_pairs)

    chunk = functools.partial(_pair_overlaps, config, n, n_base, T)
    overlaps = map_chunks(chunk, M_pairs, config.chunk, config.workers)
    e = numpy.exp(config.beta**2 * overlaps)
    samples = e[:, 0] - e[:, 1] - e[:, 2] + e[:, 3]
    gap = GapEstimate(
        n,
        float(samples.mean()),
        float(samples.std(ddof=1) / numpy.sqrt(M_pairs)),
        (float(e[:, 0].mean()), float(0.5 * (e[:, 1] + e[:, 2]).mean()), float(e[:, 3].mean())),
        M_pairs,
    )
    logging.info(f"L2 gap n={n} T={T}: {gap.gap:.5g} +- {gap.se:.2g}")
    return gap
