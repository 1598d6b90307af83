"""Explicit Ito integration of the mollified stochastic heat equation

    du = Laplacian(u)/2 dt + beta eps^{(d-2)/2} u xi_eps dt

on a periodic lattice, and its Hopf-Cole transform ``h = log u``.

Lattice sites are the centers of the noise cells: site ``i`` along an axis
sits in cell ``i - N/2`` of a ``NoiseField`` with ``period = N``, cell sizes
``(dt, spacing)``. A time step reads one slab of cells and convolves it with
``phi_eps`` sampled on the lattice.
"""
import enum
import functools
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy
from scipy import ndimage, stats

from . import randutils
from .config import ExperimentConfig, is_multiple, steps_for
from .errors import InvalidArgumentError, MisalignmentError, PositivityLossError, WrapContaminationError
from .mollifier import HeatState, phi_eval
from .noise import NoiseField
from .parallel import map_chunks
from .polymer import make_field, mollifier_for, partition_function, rescaled_view


def mollifier_stencil(eps: float, spacing: float, d: int) -> numpy.ndarray:
    """``spacing^d phi_eps(o spacing)`` on the integer offsets ``o`` of the
    support, rescaled to sum to one."""
    reach = int(numpy.floor(0.5 * eps / spacing))
    axis = numpy.arange(-reach, reach + 1)
    grids = numpy.meshgrid(*([axis] * d), indexing="ij")
    offsets = numpy.stack(grids, axis=-1) * spacing
    weights = spacing**d * eps ** (-d) * phi_eval(mollifier_for(d), offsets / eps)
    total = weights.sum()
    if not total > 0:
        raise InvalidArgumentError(f"lattice spacing {spacing} does not resolve eps={eps}")
    if abs(total - 1.0) > 1e-2:
        logging.debug(f"stencil mass {total:.6f} rescaled to 1")
    return weights / total


@dataclass
class SHEGrid:
    """State of the lattice solver.

    ``u`` has shape ``(N,) * d``; ``step`` counts completed time steps.
    """

    u: numpy.ndarray
    spacing: float
    dt: float
    eps: float
    beta: float
    stencil: numpy.ndarray = field(repr=False)
    step: int = 0

    @property
    def d(self) -> int:
        return self.u.ndim

    @property
    def sites(self) -> int:
        return self.u.shape[0]

    @property
    def box(self) -> float:
        return self.sites * self.spacing

    @property
    def time(self) -> float:
        return self.step * self.dt

    @property
    def coupling(self) -> float:
        return self.beta * self.eps ** ((self.d - 2) / 2)

    def mass(self) -> float:
        return float(self.spacing**self.d * self.u.sum())

    def cell_indices(self) -> numpy.ndarray:
        """Noise cell index of every site, shape ``(N,) * d + (d,)``."""
        axis = numpy.arange(self.sites) - self.sites // 2
        return numpy.stack(numpy.meshgrid(*([axis] * self.d), indexing="ij"), axis=-1)

    def positions(self) -> numpy.ndarray:
        return (self.cell_indices() + 0.5) * self.spacing

    def site_of(self, x) -> Tuple[int, ...]:
        """Site whose cell contains ``x``."""
        j = numpy.floor(numpy.asarray(x, dtype=float).reshape(self.d) / self.spacing).astype(int)
        return tuple(int(i) for i in numpy.mod(j + self.sites // 2, self.sites))

    def noise_field(self, seed: int) -> NoiseField:
        return NoiseField(seed, self.dt, self.spacing, self.d, self.sites)

    @classmethod
    def create(cls, config: ExperimentConfig, *, eps: float = None, t: float = None) -> "SHEGrid":
        """Lattice at refinement ``eps``: time step ``she.dt eps^2`` and
        spacing ``she.spacing eps``. The box is ``she.box`` when set,
        otherwise the smallest even site count covering ``8 sqrt(t) + eps``.

        Raises
        ------
            InvalidArgumentError
                The stencil is wider than half the box or the step is unstable
        """
        eps = config.eps if eps is None else eps
        t = config.she.t if t is None else t
        dt = config.she.dt * eps**2
        spacing = config.she.spacing * eps
        d = config.d

        if dt > spacing**2 / (2 * d) * (1 + 1e-12):
            raise InvalidArgumentError(f"dt={dt} exceeds the stability bound {spacing**2 / (2 * d)}")

        if config.she.box > 0:
            sites = int(round(config.she.box / spacing))
        else:
            sites = int(numpy.ceil((8 * numpy.sqrt(t) + eps) / spacing))
        sites += sites % 2

        stencil = mollifier_stencil(eps, spacing, d)
        if stencil.shape[0] > sites / 2:
            raise InvalidArgumentError(
                f"stencil of {stencil.shape[0]} sites is wider than half the box of {sites} sites"
            )

        return cls(numpy.ones((sites,) * d), spacing, dt, eps, config.beta, stencil)


class ICVariant(enum.Enum):
    FLAT = "flat"
    GENERAL = "general"
    DROPLET = "droplet"


@dataclass(frozen=True)
class InitialCondition:
    """``flat`` (h = 0), ``general`` (h = h0, bounded above) or ``droplet``
    (discrete delta at ``x0``)."""

    variant: ICVariant
    h0: Optional[Callable[[numpy.ndarray], numpy.ndarray]] = None
    x0: Tuple[float, ...] = ()
    bound: Optional[float] = None

    @classmethod
    def flat(cls) -> "InitialCondition":
        return cls(ICVariant.FLAT)

    @classmethod
    def general(cls, h0: Callable[[numpy.ndarray], numpy.ndarray], bound: float = None) -> "InitialCondition":
        return cls(ICVariant.GENERAL, h0=h0, bound=bound)

    @classmethod
    def droplet(cls, x0) -> "InitialCondition":
        return cls(ICVariant.DROPLET, x0=tuple(float(c) for c in numpy.ravel(x0)))

    def profile(self, grid: SHEGrid) -> numpy.ndarray:
        """``u(0, .)`` on the lattice.

        Raises
        ------
            InvalidArgumentError
                ``h0`` is not finite or exceeds ``bound`` on the box
        """
        if self.variant is ICVariant.FLAT:
            return numpy.ones(grid.u.shape)

        if self.variant is ICVariant.DROPLET:
            if len(self.x0) != grid.d:
                raise InvalidArgumentError(f"droplet at {self.x0} in dimension {grid.d}")
            u = numpy.zeros(grid.u.shape)
            u[grid.site_of(self.x0)] = grid.spacing ** (-grid.d)
            return u

        points = grid.positions().reshape(-1, grid.d)
        h = numpy.asarray(self.h0(points), dtype=float)
        if not numpy.all(numpy.isfinite(h)):
            raise InvalidArgumentError("h0 is not finite on the box")
        if self.bound is not None and h.max() > self.bound:
            raise InvalidArgumentError(f"h0 reaches {h.max():.4g} above its bound {self.bound}")
        return numpy.exp(h).reshape(grid.u.shape)

    def heat_state(self, d: int) -> HeatState:
        """Noiseless counterpart, for the flat and general variants."""
        if self.variant is ICVariant.FLAT:
            return HeatState.flat(d)
        if self.variant is ICVariant.GENERAL:
            return HeatState.from_log(self.h0, d, self.bound)
        raise InvalidArgumentError("the droplet has no bounded heat profile; use the heat kernel")


def build_mollified_slab(noise: NoiseField, eps: float, k: int, *, stencil: numpy.ndarray = None) -> numpy.ndarray:
    """Mollified noise on the lattice during time slab ``k``.

    The lattice is the periodic cell grid of ``noise``. The covariance
    between sites ``x`` and ``y`` is ``sum_o s(o) s(o + x - y) / (dt a^d)``
    for the stencil ``s``, the lattice version of
    ``eps^-d V((x - y)/eps) / dt``.

    Raises
    ------
        InvalidArgumentError
            The field is not periodic or the stencil is wider than half the box
    """
    if noise.period is None:
        raise InvalidArgumentError("lattice noise needs a periodic field")
    if stencil is None:
        stencil = mollifier_stencil(eps, noise.a, noise.d)
    if stencil.shape[0] > noise.period / 2:
        raise InvalidArgumentError(f"stencil of {stencil.shape[0]} sites is wider than half the box")

    sites = noise.period
    axis = numpy.arange(sites) - sites // 2
    j = numpy.stack(numpy.meshgrid(*([axis] * noise.d), indexing="ij"), axis=-1)
    cells = noise.values(numpy.full(j.shape[:-1], k, dtype=numpy.int64), j)
    return ndimage.convolve(cells, stencil, mode="wrap")


def slab_covariance(grid: SHEGrid, offset) -> float:
    """Exact covariance of the slab between sites ``offset`` apart."""
    s = grid.stencil
    reach = s.shape[0] // 2
    if any(abs(int(o)) > 2 * reach for o in offset):
        return 0.0
    padded = numpy.pad(s, 2 * reach)
    moved = numpy.roll(padded, tuple(int(o) for o in offset), axis=tuple(range(grid.d)))
    return float((padded * moved).sum() / (grid.dt * grid.spacing**grid.d))


def lattice_laplacian(u: numpy.ndarray, spacing: float) -> numpy.ndarray:
    out = -2 * u.ndim * u
    for axis in range(u.ndim):
        out = out + numpy.roll(u, 1, axis=axis) + numpy.roll(u, -1, axis=axis)
    return out / spacing**2


def heat_step(grid: SHEGrid, dt: float = None) -> numpy.ndarray:
    dt = grid.dt if dt is None else dt
    return grid.u + 0.5 * dt * lattice_laplacian(grid.u, grid.spacing)


def step_ito(grid: SHEGrid, slab: numpy.ndarray, dt: float = None) -> SHEGrid:
    """One Euler-Maruyama step; the noise multiplies the current ``u``.

    Sites still at zero (ahead of a droplet front) may stay at zero.

    Raises
    ------
        PositivityLossError
            A site went negative, or a positive site dropped to zero
    """
    dt = grid.dt if dt is None else dt
    u = heat_step(grid, dt)
    if grid.beta != 0:
        u = u + grid.coupling * grid.u * slab * dt

    bad = (u < 0) | ((u <= 0) & (grid.u > 0))
    if grid.beta != 0 and bad.any():
        site = tuple(int(i) for i in numpy.argwhere(bad)[0])
        raise PositivityLossError(grid.step + 1, site, float(u[site]))

    return replace(grid, u=u, step=grid.step + 1)


def hopf_cole(grid: SHEGrid) -> numpy.ndarray:
    """``h = log u`` at every site; ``-inf`` where ``u`` is still zero.

    Raises
    ------
        PositivityLossError
            Some site is negative
    """
    bad = grid.u < 0
    if bad.any():
        site = tuple(int(i) for i in numpy.argwhere(bad)[0])
        raise PositivityLossError(grid.step, site, float(grid.u[site]))
    with numpy.errstate(divide="ignore"):
        return numpy.log(grid.u)


@dataclass
class Snapshot:
    t: float
    eps: float
    seed: int
    config_hash: str
    grid: SHEGrid = field(repr=False)
    h: Optional[numpy.ndarray] = field(default=None, repr=False)

    @property
    def u(self) -> numpy.ndarray:
        return self.grid.u

    def at(self, x) -> Tuple[float, float]:
        """``(u, h)`` at the site holding ``x``."""
        site = self.grid.site_of(x)
        if self.h is not None:
            return float(self.grid.u[site]), float(self.h[site])
        with numpy.errstate(divide="ignore"):
            return float(self.grid.u[site]), float(numpy.log(self.grid.u[site]))

    def save(self, archive, name: str):
        """Store ``u`` and provenance under ``she/<name>/``."""
        archive.add_array(f"she/{name}/u", self.grid.u)
        archive.add_array(
            f"she/{name}/meta", numpy.array([self.t, self.eps, self.seed, self.grid.spacing, self.grid.dt])
        )
        archive.add_array(f"she/{name}/hash", numpy.frombuffer(self.config_hash.encode("ascii"), dtype=numpy.uint8))


def wrap_margin(grid: SHEGrid, t: float) -> float:
    """Box side minus ``8 sqrt(t) + eps``; negative when the front may wrap."""
    return grid.box - (8 * numpy.sqrt(t) + grid.eps)


def run_to(
    grid: SHEGrid,
    t: float,
    initial: InitialCondition,
    noise: NoiseField,
    *,
    strict: bool = False,
    digest: str = "",
    hopf: bool = True,
) -> Snapshot:
    """Start from ``initial`` at time 0 and integrate to ``t``.

    Params
    -------
    grid : SHEGrid
        Lattice description; its current values are replaced
    noise : NoiseField
        Periodic field whose cells are the lattice cells
    strict : bool
        Raise instead of warning when the box is too small for ``t``

    Raises
    ------
        MisalignmentError
            t is not a multiple of the step, or the field cells are not the
            lattice cells
        PositivityLossError
            The explicit step lost positivity
        WrapContaminationError
            ``strict`` is set and the box is too small
    """
    if not is_multiple(t, grid.dt):
        raise MisalignmentError("t must be a multiple of the lattice step", t=t, dt=grid.dt)
    if noise.period != grid.sites or not (
        numpy.isclose(noise.delta, grid.dt) and numpy.isclose(noise.a, grid.spacing)
    ):
        raise MisalignmentError(
            "noise cells must be the lattice cells", delta=noise.delta, a=noise.a, dt=grid.dt, spacing=grid.spacing
        )

    margin = wrap_margin(grid, t)
    if margin < 0:
        message = f"box {grid.box:.4g} is shorter than 8 sqrt(t) + eps at t={t}"
        if strict:
            raise WrapContaminationError(message)
        logging.warning(message)

    state = replace(grid, u=initial.profile(grid), step=0)
    for k in range(steps_for(t, grid.dt)):
        slab = build_mollified_slab(noise, grid.eps, k, stencil=grid.stencil) if grid.beta != 0 else None
        state = step_ito(state, slab)

    logging.debug(f"lattice run to t={t}: {state.step} steps on {state.sites}^{state.d} sites")
    return Snapshot(t, grid.eps, noise.seed, digest, state, hopf_cole(state) if hopf else None)


def lattice_field(config: ExperimentConfig, grid: SHEGrid, batch: int = 0) -> NoiseField:
    return grid.noise_field(randutils.derive_seed(config.seed, randutils.LATTICE, batch))


def _lattice_values(config, grid, t, x, initial, lo, hi) -> numpy.ndarray:
    out = numpy.empty(hi - lo)
    for i, batch in enumerate(range(lo, hi)):
        snapshot = run_to(grid, t, initial, lattice_field(config, grid, batch), hopf=False)
        out[i] = snapshot.u[grid.site_of(x)]
    return out


def lattice_samples(
    config: ExperimentConfig, t: float, x, *, eps: float = None, seeds: int = None, initial: InitialCondition = None
) -> numpy.ndarray:
    """``u_eps(t, x)`` over independent lattice noises."""
    eps = config.eps if eps is None else eps
    seeds = config.stats.batches if seeds is None else seeds
    grid = SHEGrid.create(config, eps=eps, t=t)
    kernel = functools.partial(_lattice_values, config, grid, t, x, initial or InitialCondition.flat())
    return map_chunks(kernel, seeds, max(1, config.chunk // 64), config.workers)


@dataclass
class SHEComparison:
    t: float
    x: Tuple[float, ...]
    eps: float
    lattice_mean: float
    lattice_se: float
    lattice_var: float
    lattice_var_se: float
    polymer_mean: float
    polymer_se: float
    polymer_var: float
    polymer_var_se: float
    mean_pvalue: float
    ks_pvalue: float

    def row(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "x"}


def _moments(values: numpy.ndarray) -> Tuple[float, float, float, float]:
    n = len(values)
    centered = (values - values.mean()) ** 2
    return (
        float(values.mean()),
        float(values.std(ddof=1) / numpy.sqrt(n)),
        float(values.var(ddof=1)),
        float(centered.std(ddof=1) / numpy.sqrt(n)),
    )


def she_vs_polymer(config: ExperimentConfig, t: float, x, *, seeds: int = None, M: int = None) -> SHEComparison:
    """Compare the law of the lattice ``u_eps(t, x)`` with the law of the
    polymer ``Z_{t/eps^2}`` over the rescaled, time reversed noise started at
    ``x/eps``. The two sides use independent noises; the returned p-values
    come from Welch's t-test on the means and a two-sample KS test.
    """
    eps = config.eps
    seeds = config.stats.batches if seeds is None else seeds
    M = config.M if M is None else M
    x = numpy.asarray(x, dtype=float).reshape(config.d)

    lattice = lattice_samples(config, t, x, eps=eps, seeds=seeds)

    horizon = t / eps**2
    polymer_config = config.with_values(T=horizon)
    polymer = numpy.empty(seeds)
    for batch in range(seeds):
        view = rescaled_view(make_field(config, batch, eps=eps), eps, t, numpy.zeros(config.d))
        seed = randutils.derive_seed(config.seed, randutils.PATHS, batch)
        polymer[batch] = partition_function(polymer_config, view, x / eps, M=M, seed=seed).value

    if numpy.ptp(lattice) == 0 and numpy.ptp(polymer) == 0:
        mean_p, ks_p = 1.0, 1.0
    else:
        mean_p = float(stats.ttest_ind(lattice, polymer, equal_var=False).pvalue)
        ks_p = float(stats.ks_2samp(lattice, polymer).pvalue)

    comparison = SHEComparison(
        t, tuple(x.tolist()), eps, *_moments(lattice), *_moments(polymer), mean_p, ks_p
    )
    logging.info(
        f"lattice {comparison.lattice_mean:.4g} (var {comparison.lattice_var:.3g}) vs polymer "
        f"{comparison.polymer_mean:.4g} (var {comparison.polymer_var:.3g}), KS p={ks_p:.3g}"
    )
    return comparison
