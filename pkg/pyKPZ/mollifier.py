"""Deterministic kernels: the bump mollifier, its self convolution, the
Gaussian heat kernel and the noiseless heat semigroup."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy import integrate, special

from .errors import InvalidArgumentError, QuadratureError

PROFILE_ID = "bump-exp-inv-1-4r2"
QUAD_TOL = 1e-6


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return 2 * numpy.pi ** (d / 2) / special.gamma(d / 2)


def _bump(r):
    r = numpy.asarray(r, dtype=float)
    out = numpy.zeros_like(r)
    inside = r < 0.5
    out[inside] = numpy.exp(-1.0 / (1.0 - 4.0 * r[inside] ** 2))
    return out


def _bump_slope(r):
    r = numpy.asarray(r, dtype=float)
    out = numpy.zeros_like(r)
    inside = r < 0.5
    q = 1.0 - 4.0 * r[inside] ** 2
    out[inside] = numpy.exp(-1.0 / q) * 8.0 * r[inside] / q**2
    return out


@dataclass(frozen=True)
class MollifierSpec:
    """The radial bump ``phi(x) = c exp(-1/(1-4|x|^2))`` on ``|x| < 1/2``.

    Params
    -------
    d : int
        Spatial dimension, at least 3
    """

    d: int
    c_norm: float = field(init=False)
    lipschitz: float = field(init=False)

    def __post_init__(self):
        if self.d < 3:
            raise InvalidArgumentError(f"dimension {self.d} is below 3")

        shell = sphere_area(self.d)
        mass, _ = integrate.quad(
            lambda r: float(_bump(r)) * r ** (self.d - 1), 0.0, 0.5, epsabs=1e-14, epsrel=1e-12
        )
        c_norm = 1.0 / (shell * mass)
        object.__setattr__(self, "c_norm", c_norm)

        radii = numpy.linspace(0.0, 0.5, 200001)
        object.__setattr__(self, "lipschitz", 1.001 * c_norm * float(_bump_slope(radii).max()))
        logging.info(f"mollifier d={self.d} c_norm={c_norm:.10g} lipschitz={self.lipschitz:.6g}")

    def radial(self, r) -> numpy.ndarray:
        return self.c_norm * _bump(r)

    def integral(self) -> float:
        """Quadrature of phi over B(0, 1/2)."""
        value, _ = integrate.quad(
            lambda r: float(self.radial(r)) * r ** (self.d - 1), 0.0, 0.5, epsabs=1e-14, epsrel=1e-12
        )
        return sphere_area(self.d) * value

    def square_integral(self) -> float:
        """Quadrature of phi^2, which is V(0)."""
        value, _ = integrate.quad(
            lambda r: float(self.radial(r)) ** 2 * r ** (self.d - 1), 0.0, 0.5, epsabs=1e-14, epsrel=1e-12
        )
        return sphere_area(self.d) * value


def phi_eval(spec: MollifierSpec, x) -> numpy.ndarray:
    """Evaluate the mollifier at points ``x`` of shape (..., d)."""
    x = numpy.asarray(x, dtype=float)
    return spec.radial(numpy.linalg.norm(x, axis=-1))


def _convolve_radial(spec: MollifierSpec, radii: numpy.ndarray, order: int) -> numpy.ndarray:
    # (phi * phi)(r) = S_{d-2} int s^{d-1} phi(s) int_0^pi sin^{d-2}(t) phi(|r e - s w|) dt ds
    d = spec.d
    nodes, weights = leggauss(order)
    s = 0.25 * (nodes + 1.0)
    ws = 0.25 * weights
    theta = 0.5 * numpy.pi * (nodes + 1.0)
    wt = 0.5 * numpy.pi * weights

    inner_w = wt * numpy.sin(theta) ** (d - 2)
    outer_w = ws * s ** (d - 1) * spec.radial(s)
    cos_t = numpy.cos(theta)

    table = numpy.empty_like(radii)
    for i, r in enumerate(radii):
        dist = numpy.sqrt(numpy.maximum(r * r + s[:, None] ** 2 - 2 * r * s[:, None] * cos_t[None, :], 0.0))
        table[i] = outer_w @ (spec.radial(dist) @ inner_w)

    return sphere_area(d - 1) * table


@dataclass(frozen=True, eq=False)
class CovarianceKernel:
    """Radial table of ``V = phi * phi`` on ``[0, 1]``.

    Params
    -------
    d : int
        Spatial dimension
    dr : float
        Table step
    radii : numpy.ndarray
        Table abscissae, ``0, dr, ..., 1``
    values : numpy.ndarray
        ``V`` at ``radii``; the last entry is 0
    """

    d: int
    dr: float
    radii: numpy.ndarray
    values: numpy.ndarray

    @property
    def v0(self) -> float:
        return float(self.values[0])

    @property
    def lipschitz(self) -> float:
        """Largest slope of the interpolated table."""
        return float(numpy.abs(numpy.diff(self.values)).max() / self.dr)

    @staticmethod
    def cache_key(d: int, dr: float) -> str:
        return f"V/d{d}/dr{dr!r}/{PROFILE_ID}"

    @classmethod
    def build(cls, spec: MollifierSpec, dr: float = 1e-3, *, order: int = 160, archive=None) -> "CovarianceKernel":
        """Tabulate ``V`` by numerical self convolution, or read it back from
        ``archive`` when an entry for ``(d, dr, profile)`` exists.

        Params
        -------
        spec : MollifierSpec
            The mollifier to convolve
        dr : float
            Table step, 1e-3 by default
        order : int
            Gauss-Legendre order per axis of the convolution quadrature
        archive : Optional[BaseArchive]
            Table cache; the new table is added to it when missing

        Returns
        --------
        CovarianceKernel
            The tabulated kernel
        """
        key = cls.cache_key(spec.d, dr)
        if archive is not None and archive.array_exists(key):
            logging.info(f"reading {key} from cache")
            values = archive.read_array(key)
            return cls(spec.d, dr, numpy.linspace(0.0, 1.0, len(values)), values)

        count = int(round(1.0 / dr)) + 1
        radii = numpy.linspace(0.0, 1.0, count)
        values = _convolve_radial(spec, radii, order)
        values[0] = spec.square_integral()
        values[-1] = 0.0
        values = numpy.maximum(values, 0.0)
        logging.info(f"built V table d={spec.d} dr={dr} V(0)={values[0]:.10g}")

        if archive is not None:
            archive.add_array(key, values)

        return cls(spec.d, dr, radii, values)


def v_eval(kernel: CovarianceKernel, x) -> numpy.ndarray:
    """Interpolated ``V(|x|)`` for points of shape (..., d); 0 outside B(0,1)."""
    r = numpy.linalg.norm(numpy.asarray(x, dtype=float), axis=-1)
    return v_radial(kernel, r)


def v_radial(kernel: CovarianceKernel, r) -> numpy.ndarray:
    return numpy.interp(r, kernel.radii, kernel.values, right=0.0)


def heat_kernel(t: float, x) -> numpy.ndarray:
    """Gaussian kernel ``(2 pi t)^{-d/2} exp(-|x|^2 / 2t)``; ``x`` has shape (..., d)."""
    if not t > 0:
        raise InvalidArgumentError(f"heat kernel needs t > 0, got {t}")

    x = numpy.asarray(x, dtype=float)
    d = x.shape[-1]
    return (2 * numpy.pi * t) ** (-d / 2) * numpy.exp(-numpy.sum(x * x, axis=-1) / (2 * t))


@dataclass
class HeatState:
    """Initial profile ``u0`` of the noiseless heat equation.

    ``u0`` maps points of shape (n, d) to n positive values and must be
    bounded above; ``bound`` is checked on every quadrature window.
    """

    u0: Callable[[numpy.ndarray], numpy.ndarray]
    d: int
    bound: Optional[float] = None

    @classmethod
    def flat(cls, d: int) -> "HeatState":
        return cls(lambda y: numpy.ones(len(y)), d, 1.0)

    @classmethod
    def from_log(cls, h0: Callable[[numpy.ndarray], numpy.ndarray], d: int, bound: Optional[float] = None):
        """Profile ``exp h0`` for an initial height bounded above."""
        return cls(lambda y: numpy.exp(h0(y)), d, None if bound is None else float(numpy.exp(bound)))


def _hermite_mean(state: HeatState, t: float, x: numpy.ndarray, order: int) -> float:
    nodes, weights = hermegauss(order)
    weights = weights / numpy.sqrt(2 * numpy.pi)
    grids = numpy.meshgrid(*([nodes] * state.d), indexing="ij")
    z = numpy.stack([g.ravel() for g in grids], axis=-1)
    w = numpy.ones(len(z))
    for axis in numpy.meshgrid(*([weights] * state.d), indexing="ij"):
        w = w * axis.ravel()

    values = numpy.asarray(state.u0(x + numpy.sqrt(t) * z), dtype=float)
    if not numpy.all(numpy.isfinite(values)) or (state.bound is not None and values.max() > state.bound):
        raise InvalidArgumentError("initial profile is unbounded on the quadrature window")

    return float(w @ values)


def heat_solve(
    state: HeatState, t: float, x, *, tol: float = QUAD_TOL, max_order: int = 64, strict: bool = False
) -> float:
    """Solve ``du/dt = Laplacian(u)/2`` from ``u0`` and evaluate at ``(t, x)``.

    ``u(t,x) = E[u0(x + sqrt(t) Z)]`` with Z standard normal, computed by
    tensor Gauss-Hermite quadrature whose order is doubled until two
    successive values agree to ``tol`` relative. Past ``max_order`` the last
    value is returned with a warning, or an error is raised when ``strict``.

    Raises
    ------
        InvalidArgumentError
            t is not positive, or u0 is not finite / exceeds its bound
        QuadratureError
            ``strict`` and no agreement by ``max_order``
    """
    if not t > 0:
        raise InvalidArgumentError(f"heat_solve needs t > 0, got {t}")

    x = numpy.asarray(x, dtype=float).reshape(state.d)
    order = 8
    previous = _hermite_mean(state, t, x, order)
    change = float("inf")
    while order < max_order:
        order *= 2
        current = _hermite_mean(state, t, x, order)
        change = abs(current - previous) / max(abs(current), 1e-300)
        if change <= tol:
            return current
        previous = current

    if strict:
        raise QuadratureError(order, change)
    logging.warning(f"heat_solve reached order {order} before {tol} agreement at t={t}, last change {change:.3e}")
    return previous
