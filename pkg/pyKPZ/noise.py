"""Discrete space-time white noise addressed by ``(seed, k, j)``.

Cell ``(k, j)`` covers ``[k delta, (k+1) delta) x prod [j_i a, (j_i+1) a)``
and carries a centered Gaussian of variance ``1/(delta a^d)``. Nothing is
stored: values are recomputed from the counter hash on every query, so any
number of estimators can share one field exactly.

Transforms act on test functions. ``TransformedField`` exposes the rescaled
noise on its own cell grid by index arithmetic against the base field; it
requires the dyadic alignment checked by ``NoiseTransform.check``.
"""
import dataclasses
import enum
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy
from scipy import integrate

from . import randutils
from .config import is_dyadic, is_multiple
from .errors import InvalidArgumentError, MisalignmentError
from .mollifier import sphere_area


@dataclass(frozen=True)
class NoiseField:
    """Counter-based white noise.

    Params
    -------
    seed : int
        Master seed, 64 bit
    delta : float
        Time step
    a : float
        Spatial cell side
    d : int
        Spatial dimension
    period : Optional[int]
        When set, spatial indices are taken modulo ``period`` (periodic box)
    """

    seed: int
    delta: float
    a: float
    d: int
    period: Optional[int] = None

    @property
    def cell_volume(self) -> float:
        return self.delta * self.a**self.d

    @property
    def std(self) -> float:
        return 1.0 / numpy.sqrt(self.cell_volume)

    def values(self, k, j) -> numpy.ndarray:
        """Cell values for index arrays ``k`` (...) and ``j`` (..., d)."""
        j = numpy.asarray(j, dtype=numpy.int64)
        if self.period is not None:
            j = numpy.mod(j, self.period)
        return self.std * randutils.cell_normals(self.seed, k, j)

    def with_seed(self, seed: int) -> "NoiseField":
        return NoiseField(seed, self.delta, self.a, self.d, self.period)


class MaskedField:
    """Field equal to ``base`` on the cells where ``inside(k, j)`` holds and
    to an independent field elsewhere. Used to check that an estimator only
    reads the cells it should."""

    def __init__(self, base: NoiseField, inside: Callable, outside_seed: int):
        self.base = base
        self.inside = inside
        self.other = base.with_seed(outside_seed)
        self.delta, self.a, self.d = base.delta, base.a, base.d

    @property
    def cell_volume(self) -> float:
        return self.base.cell_volume

    def values(self, k, j) -> numpy.ndarray:
        k = numpy.asarray(k)
        keep = self.inside(k, numpy.asarray(j))
        return numpy.where(keep, self.base.values(k, j), self.other.values(k, j))


def sample_cell(field: NoiseField, k: int, j: Sequence[int]) -> float:
    """Value of a single cell."""
    return float(field.values(numpy.array([k]), numpy.array([j]))[0])


@dataclass(frozen=True)
class SupportedFunction:
    """A space-time test function with a bounded support box.

    ``func(s, y)`` takes times of shape (n,) and points of shape (n, d).
    The support is ``[t0, t1]`` in time and the ball of ``radius`` around
    ``center`` in space.
    """

    func: Callable[[numpy.ndarray, numpy.ndarray], numpy.ndarray]
    time_support: Tuple[float, float]
    center: Tuple[float, ...]
    radius: float

    def __call__(self, s, y):
        return self.func(numpy.asarray(s, dtype=float), numpy.asarray(y, dtype=float))


@dataclass(frozen=True)
class GridFunction:
    """A test function sampled at cell centers: one value per listed cell."""

    k: numpy.ndarray
    j: numpy.ndarray
    values: numpy.ndarray
    delta: float
    a: float

    def __add__(self, other: "GridFunction") -> "GridFunction":
        return GridFunction(
            numpy.concatenate([self.k, other.k]),
            numpy.concatenate([self.j, other.j]),
            numpy.concatenate([self.values, other.values]),
            self.delta,
            self.a,
        )

    def norm2(self) -> float:
        """``sum delta a^d f^2``, the pairing variance."""
        return float(self.delta * self.a ** self.j.shape[1] * numpy.sum(self.values**2))


def discretize(f: SupportedFunction, delta: float, a: float) -> GridFunction:
    """Midpoint sampling of ``f`` on every cell meeting its support box.

    Raises
    ------
        InvalidArgumentError
            The support is not finite
    """
    t0, t1 = f.time_support
    center = numpy.asarray(f.center, dtype=float)
    if not (numpy.isfinite([t0, t1, f.radius]).all() and numpy.isfinite(center).all()):
        raise InvalidArgumentError("test function support must be finite")

    ks = numpy.arange(int(numpy.floor(t0 / delta)), int(numpy.ceil(t1 / delta)))
    axes = [
        numpy.arange(int(numpy.floor((c - f.radius) / a)), int(numpy.floor((c + f.radius) / a)) + 1)
        for c in center
    ]
    grids = numpy.meshgrid(ks, *axes, indexing="ij")
    k = grids[0].ravel()
    j = numpy.stack([g.ravel() for g in grids[1:]], axis=-1)

    values = numpy.asarray(f((k + 0.5) * delta, (j + 0.5) * a), dtype=float)
    keep = values != 0
    return GridFunction(k[keep], j[keep], values[keep], delta, a)


def pair(field, f: Union[SupportedFunction, GridFunction]) -> float:
    """Riemann pairing ``sum delta a^d f(cell center) xi(k, j)``.

    Params
    -------
    field : NoiseField or TransformedField
        The noise to pair against
    f : SupportedFunction or GridFunction
        Test function; a grid function must be sampled on the field's cells

    Returns
    --------
    float
        The pairing, Gaussian with variance ``f.norm2()`` over seeds
    """
    if isinstance(f, SupportedFunction):
        f = discretize(f, field.delta, field.a)
    elif not (numpy.isclose(f.delta, field.delta) and numpy.isclose(f.a, field.a)):
        raise MisalignmentError(
            "grid function cells differ from field cells", f_cells=(f.delta, f.a), field_cells=(field.delta, field.a)
        )

    if len(f.values) == 0:
        return 0.0

    return float(field.cell_volume * numpy.dot(f.values, field.values(f.k, f.j)))


class TransformMode(enum.Enum):
    DIFFUSIVE_REVERSAL = "reversal"
    ANCHORED_SCALING = "anchored"


@dataclass(frozen=True)
class NoiseTransform:
    """Rescaling of the noise by ``eps`` around an anchor.

    ``DIFFUSIVE_REVERSAL``: ``eps^{(d+2)/2} xi(t - eps^2 s, eps y - x)``.
    ``ANCHORED_SCALING``: ``eps^{(d+2)/2} xi(eps^2 s, x + eps y)``.
    ``t`` is ignored by the anchored mode.
    """

    eps: float
    t: float
    x: Tuple[float, ...]
    mode: TransformMode = TransformMode.DIFFUSIVE_REVERSAL

    def amplitude(self, d: int) -> float:
        return self.eps ** ((d + 2) / 2)

    def check(self, base: NoiseField):
        """Raise ``MisalignmentError`` unless the rescaled cells nest exactly
        in the base cells and the anchor sits on base cell boundaries."""
        if not is_dyadic(self.eps):
            raise MisalignmentError("eps must be 2^-m", eps=self.eps)
        if len(self.x) != base.d:
            raise InvalidArgumentError(f"anchor has dimension {len(self.x)}, field has {base.d}")
        if self.mode is TransformMode.DIFFUSIVE_REVERSAL and not is_multiple(self.t, base.delta):
            raise MisalignmentError("time anchor must be a multiple of delta", t=self.t, delta=base.delta)
        if not all(is_multiple(c, base.a) for c in self.x):
            raise MisalignmentError("space anchor must be a multiple of a", x=self.x, a=base.a)

    def base_indices(self, base: NoiseField, k, j) -> Tuple[numpy.ndarray, numpy.ndarray]:
        """Base cell holding transformed cell ``(k, j)``."""
        k = numpy.asarray(k, dtype=numpy.int64)
        j = numpy.asarray(j, dtype=numpy.int64)
        shift = numpy.rint(numpy.asarray(self.x, dtype=float) / base.a).astype(numpy.int64)
        if self.mode is TransformMode.DIFFUSIVE_REVERSAL:
            anchor = int(round(self.t / base.delta))
            return anchor - 1 - k, j - shift
        return k, j + shift


class TransformedField:
    """The rescaled noise seen on its own grid, cells ``(delta/eps^2, a/eps)``.

    Its cell values have variance ``1/(cell volume)`` like any field, and it
    can be passed wherever a ``NoiseField`` is read.
    """

    def __init__(self, base: NoiseField, transform: NoiseTransform):
        transform.check(base)
        self.base = base
        self.transform = transform
        self.d = base.d
        self.delta = base.delta / transform.eps**2
        self.a = base.a / transform.eps
        self._amplitude = transform.amplitude(base.d)

    @property
    def cell_volume(self) -> float:
        return self.delta * self.a**self.d

    def values(self, k, j) -> numpy.ndarray:
        kb, jb = self.transform.base_indices(self.base, k, j)
        return self._amplitude * self.base.values(kb, jb)

    def __repr__(self):
        tr = self.transform
        return f"< TransformedField eps={tr.eps} t={tr.t} x={tr.x} mode={tr.mode.value} >"


def remap(field: NoiseField, transform: NoiseTransform, f: GridFunction) -> GridFunction:
    """Grid function on base cells with ``<xi, remap(f)> = <xi^transform, f>``."""
    kb, jb = transform.base_indices(field, f.k, f.j)
    return GridFunction(kb, jb, f.values * transform.eps ** (-(field.d + 2) / 2), field.delta, field.a)


def transform_pair(field: NoiseField, transform: NoiseTransform, f: Union[SupportedFunction, GridFunction]) -> float:
    """Pairing of the transformed noise with ``f``, evaluated as the pairing
    of the base noise with the remapped test function.

    Raises
    ------
        MisalignmentError
            eps is not dyadic or the anchor is off the base grid
    """
    transform.check(field)
    eps = transform.eps
    if isinstance(f, SupportedFunction):
        f = discretize(f, field.delta / eps**2, field.a / eps)
    return pair(field, remap(field, transform, f))


def theta_scale(f: SupportedFunction, lam: float, z: Tuple[float, Sequence[float]] = None) -> SupportedFunction:
    """Parabolic rescaling ``lam^{-(d+2)} f(lam^{-2}(t - s), lam^{-1}(y - x))``
    centered at ``z = (t, x)``."""
    d = len(f.center)
    t, x = z if z is not None else (0.0, numpy.zeros(d))
    x = numpy.asarray(x, dtype=float)
    scale = lam ** (-(d + 2))

    def scaled(s, y):
        return scale * f.func((t - s) / lam**2, (y - x) / lam)

    t0, t1 = f.time_support
    return SupportedFunction(
        scaled, (t - lam**2 * t1, t - lam**2 * t0), tuple(x + lam * numpy.asarray(f.center)), lam * f.radius
    )


def _time_bump(s):
    u = 2.0 * s - 1.0
    out = numpy.zeros_like(u)
    inside = numpy.abs(u) < 1
    out[inside] = numpy.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def _space_bump(y):
    r2 = numpy.sum(y * y, axis=-1)
    out = numpy.zeros_like(r2)
    inside = r2 < 1
    out[inside] = numpy.exp(-1.0 / (1.0 - r2[inside]))
    return out


def bump_test_function(d: int) -> Tuple[SupportedFunction, float]:
    """Smooth product bump on ``[0,1] x B(0,1)`` and its squared L2 norm."""
    f = SupportedFunction(lambda s, y: _time_bump(s) * _space_bump(y), (0.0, 1.0), (0.0,) * d, 1.0)
    time_part, _ = integrate.quad(lambda s: float(_time_bump(numpy.array(s))) ** 2, 0.0, 1.0, epsabs=1e-14)
    space_part, _ = integrate.quad(
        lambda r: numpy.exp(-2.0 / (1.0 - r * r)) * r ** (d - 1), 0.0, 1.0, epsabs=1e-14
    )
    return f, time_part * sphere_area(d) * space_part


@dataclass(frozen=True)
class ScalingRow:
    lam: float
    variance: float
    se: float
    expected: float
    seeds: int


def scale_field(field: NoiseField, lam: float) -> NoiseField:
    return dataclasses.replace(field, delta=lam**2 / 4, a=lam / 4)


def besov_scaling_check(
    field: NoiseField,
    phi: SupportedFunction,
    lambdas: Sequence[float],
    seeds: int = 1000,
    *,
    norm2: float = None,
    per_scale: bool = False,
) -> Tuple[list, float]:
    """Monte Carlo variance of ``<xi, Theta^lam phi>`` for each ``lam`` and
    the least squares slope of log variance against log lam, which should be
    ``-(d+2)``.

    Params
    -------
    field : NoiseField
        Field whose ``delta`` and ``a`` set the resolution; its seed is the
        master seed of the replicas
    phi : SupportedFunction
        Base test function
    lambdas : Sequence[float]
        Scales, each at least ``4 a`` and with ``lam^2 >= 4 delta``
    seeds : int
        Replicas per scale
    norm2 : float
        Squared L2 norm of ``phi`` for the expected column; the discrete
        norm at scale 1 is used when omitted
    per_scale : bool
        Sample each ``lam`` on the coarsest field resolving it,
        ``a = lam/4`` and ``delta = lam^2/4``, so every scale costs the same
        number of cells; ``field`` then only supplies the seed

    Returns
    --------
    Tuple[List[ScalingRow], float]
        One row per scale and the fitted slope

    Raises
    ------
        InvalidArgumentError
            A scale is below the grid resolution
    """
    for lam in () if per_scale else lambdas:
        if lam < 4 * field.a or lam**2 < 4 * field.delta:
            raise InvalidArgumentError(f"scale {lam} is below the grid resolution a={field.a} delta={field.delta}")

    if norm2 is None:
        norm2 = discretize(phi, field.delta, field.a).norm2()

    rows = []
    for lam in lambdas:
        scaled = scale_field(field, lam) if per_scale else field
        grid = discretize(theta_scale(phi, lam), scaled.delta, scaled.a)
        samples = numpy.array(
            [pair(scaled.with_seed(randutils.derive_seed(field.seed, randutils.NOISE, i)), grid) for i in range(seeds)]
        )
        variance = float(numpy.mean(samples**2))
        se = variance * numpy.sqrt(2.0 / seeds)
        rows.append(ScalingRow(lam, variance, se, lam ** (-(field.d + 2)) * norm2, seeds))
        logging.info(f"scale {lam}: variance {variance:.5g} +- {se:.2g} over {len(grid.values)} cells")

    log_lam = numpy.log([r.lam for r in rows])
    log_var = numpy.log([r.variance for r in rows])
    weights = numpy.array([r.variance / r.se for r in rows])
    slope = float(numpy.polyfit(log_lam, log_var, 1, w=weights)[0])
    return rows, slope
