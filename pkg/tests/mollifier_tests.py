import logging
import unittest

import numpy
from scipy import integrate

from pyKPZ import InMemoryArchive, InvalidArgumentError, QuadratureError
from pyKPZ.mollifier import (
    CovarianceKernel,
    HeatState,
    MollifierSpec,
    _convolve_radial,
    heat_kernel,
    heat_solve,
    phi_eval,
    sphere_area,
    v_eval,
)

logging.basicConfig(level=logging.INFO)


class TestMollifier(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.spec = MollifierSpec(3)
        cls.kernel = CovarianceKernel.build(cls.spec, 0.01)

    def test_normalized(self):
        for d in (3, 4):
            self.assertAlmostEqual(MollifierSpec(d).integral(), 1.0, places=8)

    def test_support(self):
        values = phi_eval(self.spec, [[0.5, 0.0, 0.0], [0.3, 0.3, 0.3], [0.0, 0.0, 0.0]])
        self.assertEqual(values[0], 0.0)
        self.assertEqual(values[1], 0.0)
        self.assertGreater(values[2], 0.0)

    def test_low_dimension(self):
        with self.assertRaises(InvalidArgumentError):
            MollifierSpec(2)

    def test_lipschitz(self):
        radii = numpy.linspace(0.0, 0.5, 5001)
        slopes = numpy.abs(numpy.diff(self.spec.radial(radii))) / (radii[1] - radii[0])
        self.assertLessEqual(slopes.max(), self.spec.lipschitz)

    def test_kernel_table(self):
        kernel = self.kernel
        self.assertEqual(len(kernel.values), 101)
        self.assertEqual(kernel.values[-1], 0.0)
        self.assertAlmostEqual(kernel.v0, self.spec.square_integral(), places=12)

    def test_kernel_mass(self):
        # int V = (int phi)^2
        r = self.kernel.radii
        mass = sphere_area(3) * integrate.trapezoid(self.kernel.values * r**2, r)
        self.assertAlmostEqual(mass, 1.0, delta=1e-2)

    def test_convolution_at_origin(self):
        value = _convolve_radial(self.spec, numpy.array([0.0]), 160)[0]
        self.assertAlmostEqual(value / self.spec.square_integral(), 1.0, places=4)

    def test_v_eval(self):
        self.assertEqual(v_eval(self.kernel, [1.5, 0.0, 0.0]), 0.0)
        self.assertAlmostEqual(float(v_eval(self.kernel, [0.0, 0.0, 0.0])), self.kernel.v0)

    def test_kernel_cache(self):
        archive = InMemoryArchive.empty()
        built = CovarianceKernel.build(self.spec, 0.05, archive=archive)
        key = CovarianceKernel.cache_key(3, 0.05)
        self.assertTrue(archive.array_exists(key))

        archive.repack()
        cached = CovarianceKernel.build(self.spec, 0.05, archive=archive)
        numpy.testing.assert_array_equal(built.values, cached.values)
        numpy.testing.assert_allclose(built.radii, cached.radii)

    def test_heat_kernel(self):
        x = numpy.zeros((1, 3))
        self.assertAlmostEqual(float(heat_kernel(1.0, x)[0]), (2 * numpy.pi) ** -1.5)
        with self.assertRaises(InvalidArgumentError):
            heat_kernel(0.0, x)

    def test_heat_solve_flat(self):
        self.assertAlmostEqual(heat_solve(HeatState.flat(3), 2.0, [0.3, 0.0, -1.0]), 1.0, places=12)

    def test_heat_solve_gaussian(self):
        # exp(-|y|^2/2) evolves to (1+t)^{-d/2} exp(-|x|^2/(2(1+t)))
        state = HeatState.from_log(lambda y: -0.5 * numpy.sum(y * y, axis=-1), 3, 0.0)
        x = numpy.array([0.5, 0.0, 0.0])
        expected = 2.0**-1.5 * numpy.exp(-0.25 / 4)
        self.assertAlmostEqual(heat_solve(state, 1.0, x), expected, places=6)

    def test_heat_solve_unbounded(self):
        state = HeatState.from_log(lambda y: numpy.sum(y * y, axis=-1), 3, 1.0)
        with self.assertRaises(InvalidArgumentError):
            heat_solve(state, 1.0, numpy.zeros(3))

        with self.assertRaises(InvalidArgumentError):
            heat_solve(HeatState.flat(3), 0.0, numpy.zeros(3))

    def test_heat_solve_unconverged(self):
        # peaked far below the node spacing of low order rules
        state = HeatState.from_log(lambda y: -0.5 * numpy.sum(y * y, axis=-1) / 1e-3, 1, 0.0)
        with self.assertRaises(QuadratureError) as ctx:
            heat_solve(state, 1.0, [0.0], max_order=16, strict=True)
        self.assertEqual(ctx.exception.order, 16)
        self.assertEqual(ctx.exception.exit_code, 4)

        with self.assertLogs(level="WARNING"):
            value = heat_solve(state, 1.0, [0.0], max_order=16)
        self.assertGreaterEqual(value, 0.0)


if __name__ == "__main__":
    unittest.main()
