"""Seed handling and counter-based Gaussian generation.

Two mechanisms are provided. Noise cells are produced by a stateless hash of
``(seed, k, j)`` pushed through a Box-Muller transform, so any cell can be
queried in any order. Monte Carlo samples draw their paths from a numpy
:class:`numpy.random.Generator` backed by the counter-based Philox bit
generator, keyed by a :class:`numpy.random.SeedSequence` over
``(seed, stream, index)``.
"""
import numpy

# stream tags, keep them distinct
PATHS = 1
NOISE = 2
BRIDGES = 3
LATTICE = 4
PAIRED = 5

_GOLDEN = numpy.uint64(0x9E3779B97F4A7C15)
_M1 = numpy.uint64(0xBF58476D1CE4E5B9)
_M2 = numpy.uint64(0x94D049BB133111EB)
_S30 = numpy.uint64(30)
_S27 = numpy.uint64(27)
_S31 = numpy.uint64(31)
_S11 = numpy.uint64(11)
_TWO_M53 = 2.0**-53


def _mix(z: numpy.ndarray) -> numpy.ndarray:
    # splitmix64 finalizer, wraps mod 2^64
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _as_u64(values) -> numpy.ndarray:
    return numpy.asarray(values, dtype=numpy.int64).view(numpy.uint64)


def _unit_interval(z: numpy.ndarray) -> numpy.ndarray:
    """Map 64 random bits to (0, 1]."""
    return ((z >> _S11).astype(numpy.float64) + 1.0) * _TWO_M53


def hash_cells(seed: int, k, j) -> numpy.ndarray:
    """Hash ``(seed, k, j)`` into 64 bits.

    Params
    -------
    seed : int
        Master seed of the field
    k : array of int, shape (...)
        Time indices
    j : array of int, shape (..., d)
        Spatial indices

    Returns
    --------
    numpy.ndarray
        uint64 array of shape (...)
    """
    k = _as_u64(k)
    j = _as_u64(j)
    with numpy.errstate(over="ignore"):
        h = _mix(numpy.full(k.shape, _as_u64(seed), dtype=numpy.uint64) + _GOLDEN)
        h = _mix(h ^ (k + _GOLDEN))
        for c in range(j.shape[-1]):
            h = _mix(h ^ (j[..., c] + _GOLDEN))
    return h


def cell_normals(seed: int, k, j) -> numpy.ndarray:
    """Standard normal value per cell, a pure function of ``(seed, k, j)``."""
    h = hash_cells(seed, k, j)
    with numpy.errstate(over="ignore"):
        u1 = _unit_interval(_mix(h ^ numpy.uint64(1)))
        u2 = _unit_interval(_mix(h ^ numpy.uint64(2)))
    return numpy.sqrt(-2.0 * numpy.log(u1)) * numpy.cos(2.0 * numpy.pi * u2)


def derive_seed(seed: int, *tags: int) -> int:
    """A 63 bit seed derived from a master seed and a tuple of tags."""
    state = numpy.random.SeedSequence([int(seed), *[int(t) for t in tags]]).generate_state(
        1, numpy.uint64
    )
    return int(state[0] >> numpy.uint64(1))


def sample_rng(seed: int, stream: int, index: int) -> numpy.random.Generator:
    """Private generator for one Monte Carlo sample. It depends only on
    the triple, never on which worker draws it."""
    return numpy.random.Generator(
        numpy.random.Philox(numpy.random.SeedSequence([int(seed), int(stream), int(index)]))
    )
