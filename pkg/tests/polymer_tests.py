import logging
import unittest

import numpy

from pyKPZ import ExperimentConfig, InvalidArgumentError, MisalignmentError, NoiseField, NumericOverflowError, TransformedField
from pyKPZ.noise import MaskedField
from pyKPZ import polymer, randutils
from pyKPZ.parallel import chunk_bounds, map_chunks

logging.basicConfig(level=logging.INFO)

ORIGIN = numpy.zeros(3)


def small_config(**values) -> ExperimentConfig:
    base = {"d": 3, "beta": 0.0, "T": 1.0, "delta": 0.25, "a": 0.25, "M": 8, "chunk": 4}
    base.update(values)
    return ExperimentConfig().with_values(**base)


def _squares(lo, hi):
    return numpy.arange(lo, hi) ** 2


class TestParallel(unittest.TestCase):
    def test_chunk_bounds(self):
        self.assertEqual(chunk_bounds(10, 4), [(0, 4), (4, 8), (8, 10)])
        self.assertEqual(chunk_bounds(0, 4), [])

    def test_map_chunks_order(self):
        numpy.testing.assert_array_equal(map_chunks(_squares, 11, 3, 1), numpy.arange(11) ** 2)
        numpy.testing.assert_array_equal(map_chunks(_squares, 11, 3, 2), numpy.arange(11) ** 2)


class TestPaths(unittest.TestCase):
    def setUp(self):
        self.config = small_config()

    def test_sample_path(self):
        path = polymer.sample_path(self.config, [1.0, 0.0, 0.0], numpy.random.default_rng(0), n=3)
        self.assertEqual(path.positions.shape, (3, 5, 3))
        numpy.testing.assert_array_equal(path.positions[:, 0], numpy.tile([1.0, 0.0, 0.0], (3, 1)))
        self.assertAlmostEqual(path.horizon, 1.0)

    def test_bridge_endpoint(self):
        x, y = numpy.array([0.5, 0.0, 0.0]), numpy.array([-1.0, 2.0, 0.25])
        bridge = polymer.sample_bridge(self.config, x, y, 1.0, numpy.random.default_rng(1), n=4)
        numpy.testing.assert_array_equal(bridge.positions[:, -1], numpy.tile(y, (4, 1)))
        numpy.testing.assert_allclose(bridge.positions[:, 0], numpy.tile(x, (4, 1)))

        with self.assertRaises(MisalignmentError):
            polymer.sample_bridge(self.config, x, y, 1.1, numpy.random.default_rng(1))

    def test_path_moments(self):
        x = numpy.array([1.0, 0.0, 0.0])
        path = polymer.sample_path(self.config, x, numpy.random.default_rng(7), n=4000)
        end = path.positions[:, -1]
        numpy.testing.assert_allclose(end.mean(axis=0), x, atol=0.1)
        numpy.testing.assert_allclose(end.var(axis=0), numpy.full(3, 1.0), atol=0.1)

    def test_bridge_midpoint(self):
        x, y = numpy.array([0.5, 0.0, 0.0]), numpy.array([-1.0, 2.0, 0.25])
        bridge = polymer.sample_bridge(self.config, x, y, 1.0, numpy.random.default_rng(8), n=4000)
        middle = bridge.positions[:, 2]
        # s (T - s) / T at s = T/2
        numpy.testing.assert_allclose(middle.mean(axis=0), (x + y) / 2, atol=0.05)
        numpy.testing.assert_allclose(middle.var(axis=0), numpy.full(3, 0.25), atol=0.05)

    def test_draw_paths_reproducible(self):
        first = polymer.draw_paths(self.config, ORIGIN, 0, 6, horizon=1.0, seed=3, stream=randutils.PATHS)
        second = polymer.draw_paths(self.config, ORIGIN, 4, 6, horizon=1.0, seed=3, stream=randutils.PATHS)
        numpy.testing.assert_array_equal(first.positions[4:], second.positions)

    def test_interpolate(self):
        path = polymer.draw_paths(self.config, ORIGIN, 0, 1, horizon=1.0, seed=0, stream=randutils.PATHS)
        numpy.testing.assert_allclose(path.interpolate([0.5])[0, 0], path.positions[0, 2])


class TestPartition(unittest.TestCase):
    def test_zero_beta(self):
        config = small_config()
        estimate = polymer.partition_function(config, polymer.make_field(config), ORIGIN)
        self.assertEqual(estimate.value, 1.0)
        self.assertEqual(estimate.se, 0.0)
        self.assertAlmostEqual(estimate.log_value, 0.0, places=12)
        self.assertEqual(estimate.row()["M"], 8)

    def test_unbiased(self):
        config = small_config(beta=0.4, M=20)
        values = numpy.array(
            [
                polymer.partition_function(config, polymer.make_field(config, b), ORIGIN, seed=100 + b).value
                for b in range(30)
            ]
        )
        se = values.std(ddof=1) / numpy.sqrt(len(values))
        self.assertLess(abs(values.mean() - 1.0), 4 * se + 1e-9)
        self.assertTrue(numpy.all(values > 0))

    def test_workers(self):
        config = small_config(beta=0.4, M=12)
        noise = polymer.make_field(config)
        serial = polymer.partition_function(config, noise, ORIGIN, retain=True)
        parallel = polymer.partition_function(config.with_values(workers=2), noise, ORIGIN, retain=True)
        numpy.testing.assert_array_equal(serial.log_weights, parallel.log_weights)

    def test_horizons_share_paths(self):
        config = small_config(beta=0.4)
        noise = polymer.make_field(config)
        short, full = polymer.partition_horizons(config, noise, ORIGIN, [0.5, 1.0])
        direct = polymer.partition_function(config, noise, ORIGIN, 1.0)
        self.assertEqual(full.value, direct.value)
        self.assertEqual(short.horizon, 0.5)

        with self.assertRaises(MisalignmentError):
            polymer.partition_horizons(config, noise, ORIGIN, [0.3])
        with self.assertRaises(InvalidArgumentError):
            polymer.partition_function(config, noise, ORIGIN, M=1)

    def test_reads_only_nearby_cells(self):
        config = small_config(beta=0.4)
        x = numpy.array([0.3, -0.2, 0.1])
        base = polymer.make_field(config)
        paths = polymer.draw_paths(config, x, 0, config.M, horizon=1.0, seed=config.seed, stream=randutils.PATHS)
        reach = numpy.linalg.norm(paths.positions - x, axis=-1).max() + 0.5 + config.a * numpy.sqrt(3)

        def near(k, j):
            return (k < paths.steps) & (numpy.linalg.norm((j + 0.5) * config.a - x, axis=-1) <= reach)

        expected = polymer.partition_function(config, base, x, retain=True).log_weights
        local = polymer.partition_function(config, MaskedField(base, near, outside_seed=77), x, retain=True)
        numpy.testing.assert_array_equal(local.log_weights, expected)

        elsewhere = MaskedField(base, lambda k, j: numpy.zeros(k.shape, dtype=bool), outside_seed=77)
        moved = polymer.partition_function(config, elsewhere, x, retain=True)
        self.assertFalse(numpy.array_equal(moved.log_weights, expected))

    def test_misaligned_noise(self):
        config = small_config()
        path = polymer.draw_paths(config, ORIGIN, 0, 2, horizon=1.0, seed=0, stream=randutils.PATHS)
        with self.assertRaises(MisalignmentError):
            polymer.field_action(path, NoiseField(0, 0.1, 0.25, 3), 0.0)


class TestCompensator(unittest.TestCase):
    def setUp(self):
        self.config = small_config(beta=0.5)
        self.paths = polymer.draw_paths(self.config, ORIGIN, 0, 5, horizon=1.0, seed=0, stream=randutils.PATHS)

    def test_matches_step_terms(self):
        _, q = polymer.step_terms(self.paths, polymer.make_field(self.config))
        c = polymer.discrete_compensator(self.paths, 0.5, a=0.25)
        numpy.testing.assert_allclose(c, 0.125 * q.sum(axis=1), rtol=1e-12)

    def test_conditional_variance(self):
        # Var(G | W) = 2 c for a fixed path
        path = polymer.BrownianPath(self.paths.positions[:1], 0.25)
        noise = polymer.make_field(self.config)
        actions = numpy.array([polymer.field_action(path, noise.with_seed(s), 0.5)[0] for s in range(300)])
        c = polymer.discrete_compensator(path, 0.5, a=0.25)[0]
        self.assertLess(abs(actions.var() / (2 * c) - 1.0), 0.35)

    def test_continuum_limit(self):
        path = polymer.BrownianPath(self.paths.positions[:1], 0.25)
        discrete = polymer.discrete_compensator(path, 0.5, a=1 / 16)[0]
        continuum = polymer.continuum_compensator(0.5, 1.0, 3)
        self.assertAlmostEqual(discrete / continuum, 1.0, delta=0.03)


class TestSummarize(unittest.TestCase):
    def test_values(self):
        estimate = polymer.summarize(numpy.log([1.0, 3.0]), 1.0)
        self.assertAlmostEqual(estimate.value, 2.0)
        self.assertAlmostEqual(estimate.se, 1.0)
        self.assertAlmostEqual(estimate.log_value, numpy.log(2.0))
        self.assertIsNone(estimate.log_weights)

    def test_non_finite(self):
        with self.assertRaises(NumericOverflowError) as ctx:
            polymer.summarize(numpy.array([0.0, numpy.nan, 1.0]), 1.0)
        self.assertEqual(ctx.exception.index, 1)
        self.assertEqual(ctx.exception.exit_code, 4)

    def test_overflow(self):
        with self.assertRaises(NumericOverflowError):
            polymer.summarize(numpy.array([1000.0, 1000.0]), 1.0)

        estimate = polymer.summarize(numpy.array([700.0, 700.0]), 1.0)
        self.assertAlmostEqual(estimate.log_value, 700.0)


class TestOverlap(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.kernel = polymer.kernel_for(3, 0.01)

    def test_zero_beta(self):
        config = small_config(M=16)
        estimate = polymer.overlap_functional(config, ORIGIN, kernel=self.kernel, retain=True)
        self.assertEqual(estimate.moment, 1.0)
        self.assertEqual(estimate.moment_se, 0.0)
        self.assertGreater(estimate.mean, 0.0)
        self.assertEqual(len(estimate.integrals), 16)

        self.assertEqual(polymer.second_moment_oracle(config), (0.0, 0.0))

    def test_oracle_positive(self):
        config = small_config(beta=0.5, M=16)
        value, se = polymer.second_moment_oracle(config)
        self.assertGreater(value, 0.0)
        self.assertGreaterEqual(se, 0.0)

    def test_oracle_matches_common_noise(self):
        config = small_config(beta=0.25)
        x = numpy.array([0.25, 0.0, 0.0])
        products = numpy.array(
            [
                polymer.partition_function(config, polymer.make_field(config, b), ORIGIN, seed=1000 + b).value
                * polymer.partition_function(config, polymer.make_field(config, b), x, seed=5000 + b).value
                for b in range(300)
            ]
        )
        value, se = polymer.second_moment_oracle(config, x, M=2000)
        empirical_se = products.std(ddof=1) / numpy.sqrt(len(products))
        self.assertGreater(value, 0.0)
        self.assertLess(abs(products.mean() - 1.0 - value), 4 * numpy.hypot(se, empirical_se))

    def test_green_matches_occupation(self):
        config = small_config(delta=1 / 16, T=64.0, M=1000)
        z = numpy.array([1.0, 0.0, 0.0])
        estimate = polymer.overlap_functional(config, z, kernel=self.kernel)
        green = polymer.green_occupation(self.kernel, 1.0)
        # occupation after T from |z| = 1: at most int V(sqrt(2) y) dy times int_T^inf p_s(0) ds
        tail = 2**-1.5 * 2 * (2 * numpy.pi) ** -1.5 / numpy.sqrt(config.T)
        self.assertLess(estimate.mean, green + 4 * estimate.se)
        self.assertGreater(estimate.mean, green - tail - 4 * estimate.se)

    def test_green(self):
        self.assertAlmostEqual(polymer.green_constant(3), 1 / (2 * numpy.pi))
        with self.assertRaises(InvalidArgumentError):
            polymer.green_constant(2)

        # outside the support the occupation is G |x|^{2-d} int V(sqrt(2) y) dy
        expected = polymer.green_constant(3) * 0.5 * 2**-1.5
        self.assertAlmostEqual(polymer.green_occupation(self.kernel, 2.0) / expected, 1.0, delta=1e-2)
        self.assertGreater(polymer.green_occupation(self.kernel, 0.0), polymer.green_occupation(self.kernel, 0.5))

    def test_khasminskii(self):
        beta_k = polymer.khasminskii_bound(self.kernel)
        self.assertAlmostEqual(beta_k, polymer.green_occupation(self.kernel, 0.0) ** -0.5)
        self.assertGreater(beta_k, 0.0)

    def test_bridge_ratio(self):
        self.assertAlmostEqual(float(polymer.bridge_density_ratio(ORIGIN, ORIGIN, 4.0, 0.0)), 1.0)


class TestFields(unittest.TestCase):
    def test_make_field(self):
        config = small_config()
        field = polymer.make_field(config, 2, eps=0.5)
        self.assertAlmostEqual(field.delta, 0.0625)
        self.assertAlmostEqual(field.a, 0.125)
        self.assertNotEqual(field.seed, polymer.make_field(config, 3, eps=0.5).seed)

        view = polymer.rescaled_view(field, 0.5, 1.0, ORIGIN)
        self.assertIsInstance(view, TransformedField)
        self.assertAlmostEqual(view.delta, config.delta)
        self.assertAlmostEqual(view.a, config.a)


if __name__ == "__main__":
    unittest.main()
