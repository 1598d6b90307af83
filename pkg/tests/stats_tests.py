import logging
import unittest

import numpy

from pyKPZ import ExperimentConfig, InMemoryArchive, InvalidArgumentError, MisalignmentError
from pyKPZ import stats
from pyKPZ.lattice_she import InitialCondition
from pyKPZ.mollifier import heat_kernel, heat_solve

logging.basicConfig(level=logging.INFO)


def small_config(**values) -> ExperimentConfig:
    base = {
        "d": 3,
        "beta": 0.0,
        "T": 1.0,
        "delta": 0.25,
        "a": 0.25,
        "M": 8,
        "chunk": 4,
        "mollifier.dr": 0.01,
        "stats.batches": 3,
        "stats.m": 0.25,
    }
    base.update(values)
    return ExperimentConfig().with_values(**base)


def lattice_config(**values) -> ExperimentConfig:
    base = {
        "she.dt": 0.01,
        "she.spacing": 0.25,
        "she.box": 4.0,
        "she.t": 0.1,
        "stats.eps_list": (1.0,),
        "stats.batches": 2,
        "M": 2,
    }
    base.update(values)
    return small_config(**base)


def gaussian_h0(y):
    return -0.5 * numpy.sum(y * y, axis=-1)


class TestPowerLaw(unittest.TestCase):
    def test_exact(self):
        r = numpy.array([1.0, 2.0, 4.0, 8.0])
        fit = stats.powerlaw_fit(r, 3.0 / r)
        self.assertAlmostEqual(fit.slope, -1.0, places=6)
        self.assertAlmostEqual(fit.amplitude, 3.0, places=5)
        self.assertEqual(fit.points, 4)

        weighted = stats.powerlaw_fit(r, 3.0 / r, 0.3 / r)
        self.assertAlmostEqual(weighted.slope, -1.0, places=6)
        self.assertEqual(set(weighted.row()), {"slope", "ci95", "amplitude", "points"})

    def test_drops_nonpositive(self):
        r = numpy.array([1.0, 2.0, 4.0, 8.0, 16.0])
        with self.assertLogs(level="WARNING"):
            fit = stats.powerlaw_fit(r, [1.0, 0.25, 0.0625, 0.015625, -0.1])
        self.assertEqual(fit.points, 4)
        self.assertAlmostEqual(fit.slope, -2.0, places=6)

    def test_too_few_points(self):
        with self.assertRaises(InvalidArgumentError):
            stats.powerlaw_fit([1.0, 2.0, 4.0], [1.0, 0.5, 0.25])
        with self.assertRaises(InvalidArgumentError), self.assertLogs(level="WARNING"):
            stats.powerlaw_fit([1.0, 2.0, 4.0, 8.0], [1.0, 0.5, 0.25, 0.0])


class TestWilson(unittest.TestCase):
    def test_bounds(self):
        lower, upper = stats.wilson_interval([0, 50, 100], 100)
        self.assertEqual(lower[0], 0.0)
        self.assertGreater(upper[0], 0.0)
        self.assertLess(lower[1], 0.5)
        self.assertGreater(upper[1], 0.5)
        self.assertAlmostEqual(upper[2], 1.0)
        self.assertTrue(numpy.all(lower <= upper))


class TestCovariance(unittest.TestCase):
    def test_zero_beta(self):
        config = small_config()
        pair = stats.covariance_pair(config, [1.0, 0.0, 0.0])
        self.assertEqual(pair.pair, 0.0)
        self.assertEqual(pair.pair_se, 0.0)
        self.assertEqual(pair.distance, 1.0)

        overlap = stats.covariance_overlap(config, [1.0, 0.0, 0.0])
        self.assertEqual(overlap.overlap, 0.0)
        self.assertIsNone(overlap.pair)

    def test_table(self):
        records = stats.covariance_table(small_config(), [0.0, 2.0])
        self.assertEqual(len(records), 2)
        rows = records[1].rows()
        self.assertEqual([r["estimator"] for r in rows], ["pair", "overlap"])
        self.assertEqual(rows[0]["x"], 2.0)
        self.assertTrue(rows[0]["config_hash"])

    def test_estimators_agree(self):
        # a = 1/8 keeps the cell sums within a few percent of the continuum overlap
        config = small_config(beta=0.3, a=0.125)
        x = [0.5, 0.0, 0.0]
        pair = stats.covariance_pair(config, x, batches=200)
        overlap = stats.covariance_overlap(config, x, M=4000)
        self.assertGreater(overlap.overlap, 0.0)
        slack = 4 * numpy.hypot(pair.pair_se, overlap.overlap_se) + 0.15 * overlap.overlap
        self.assertLess(abs(pair.pair - overlap.overlap), slack)

    def test_positive_overlap(self):
        record = stats.covariance_overlap(small_config(beta=0.5), [0.5, 0.0, 0.0])
        self.assertGreater(record.overlap, 0.0)


class TestSigma2(unittest.TestCase):
    def test_zero_beta(self):
        estimate = stats.sigma2_relative(small_config())
        self.assertAlmostEqual(estimate.value, 2.0**-1.5, delta=1e-2)
        self.assertAlmostEqual(estimate.value_long, estimate.value, places=12)
        self.assertFalse(estimate.diverging)

    def test_integrand_support(self):
        self.assertEqual(stats.sigma2_integrand(small_config(beta=0.3), [1.0, 0.0, 0.0]), (0.0, 0.0))
        value, se = stats.sigma2_integrand(small_config(beta=0.3), [0.1, 0.0, 0.0])
        self.assertGreater(value, 0.0)
        self.assertGreaterEqual(se, 0.0)


class TestPlateau(unittest.TestCase):
    def test_zero_beta(self):
        table = stats.martingale_plateau(small_config(), [0.5, 1.0])
        numpy.testing.assert_array_equal(table.second_moments, [1.0, 1.0])
        numpy.testing.assert_array_equal(table.increments, [0.0])

        rows = table.rows()
        self.assertEqual(len(rows), 2)
        self.assertTrue(numpy.isnan(rows[0]["increment"]))
        self.assertEqual(rows[1]["increment"], 0.0)

    def test_increments_decrease(self):
        config = small_config(beta=0.3, M=128)
        table = stats.martingale_plateau(config, [0.25, 0.5, 0.75, 1.0], batches=200)
        increments, ses = table.increments, table.increment_ses
        self.assertTrue(numpy.all(increments > 0))
        self.assertLess(increments[-1], increments[0])
        for i in range(len(increments) - 1):
            self.assertLess(increments[i + 1], increments[i] + 3 * numpy.hypot(ses[i], ses[i + 1]))


class TestNarrowWedge(unittest.TestCase):
    def test_zero_beta(self):
        x = numpy.array([0.5, 0.0, 0.0])
        record = stats.narrow_wedge_mean(small_config(), 1.0, x)
        self.assertEqual(record.factor, 1.0)
        self.assertAlmostEqual(record.rho, float(heat_kernel(1.0, x)))
        self.assertEqual(record.row()["u_mean"], record.rho)


class TestTails(unittest.TestCase):
    def test_zero_beta(self):
        config = small_config(**{"stats.realizations": 4})
        with self.assertLogs(level="WARNING"):
            record = stats.tail_study(config, thetas=(0.5, 1.0))
        numpy.testing.assert_array_equal(record.counts, [0, 0])
        self.assertTrue(numpy.isnan(record.c_hat))
        self.assertEqual(record.inner, 2)
        for horizon in (1.0, 2.0):
            numpy.testing.assert_allclose(record.negative_moments[horizon], (1.0, 0.0, 1.0, 0.0), atol=1e-12)
        self.assertEqual(len(record.rows()), 4)

    def test_log_weights_archived(self):
        config = small_config(beta=0.3, **{"stats.realizations": 5})
        archive = InMemoryArchive.empty()
        with self.assertLogs(level="WARNING"):
            record = stats.tail_study(config, thetas=(1.0,), inner=3, archive=archive)
        archive.repack()

        for i, horizon in enumerate((1.0, 2.0)):
            stored = archive.read_array(stats.tail_key(3, horizon))
            self.assertEqual(stored.shape, (5, 3))
            numpy.testing.assert_array_equal(stored, record.log_weights[:, i, :])
            log_z = numpy.log(numpy.exp(stored).mean(axis=1))
            m1 = record.negative_moments[horizon][0]
            self.assertAlmostEqual(numpy.mean(numpy.exp(-log_z)), m1, places=9)
        self.assertTrue(numpy.all(numpy.isfinite(record.log_weights)))


class TestSplit(unittest.TestCase):
    def test_second_moment(self):
        self.assertEqual(stats.split_second_moment(small_config()), (0.0, 0.0))
        value, se = stats.split_second_moment(small_config(beta=0.3))
        self.assertGreaterEqual(value, 0.0)
        self.assertGreaterEqual(se, 0.0)

    def test_errors(self):
        with self.assertRaises(InvalidArgumentError):
            stats.decorrelation_split(small_config(), m=0.5)
        with self.assertRaises(MisalignmentError):
            stats.decorrelation_split(small_config(), m=0.1)

    def test_zero_beta(self):
        record = stats.decorrelation_split(small_config())
        self.assertEqual(record.gap, 0.0)
        self.assertGreaterEqual(record.middle_occupation, 0.0)
        self.assertEqual(record.batches, 3)
        self.assertNotIn("X", record.row())


class TestGap(unittest.TestCase):
    def test_flat_zero_beta(self):
        record = stats.theorem1_gap(lattice_config(), "flat", 0.1, [0.0, 0.0, 0.0])
        self.assertEqual(record.means, [0.0])
        self.assertEqual(record.variances, [0.0])
        self.assertEqual(record.rows()[0]["reference"], 0.0)

    def test_general_zero_beta(self):
        # site center, so the lattice and the reference read the same point
        x = [0.125, 0.125, 0.125]
        record = stats.theorem1_gap(lattice_config(), "general", 0.1, x, h0=gaussian_h0, h0_bound=0.0)
        reference = numpy.log(heat_solve(InitialCondition.general(gaussian_h0, 0.0).heat_state(3), 0.1, x))
        self.assertAlmostEqual(record.references[0], reference)
        self.assertLess(abs(record.means[0]), 1e-2)

    def test_errors(self):
        with self.assertRaises(InvalidArgumentError):
            stats.theorem1_gap(lattice_config(), "wedge", 0.1, [0.0, 0.0, 0.0])
        with self.assertRaises(InvalidArgumentError):
            stats.theorem1_gap(lattice_config(), "general", 0.1, [0.0, 0.0, 0.0])
        with self.assertRaises(MisalignmentError):
            stats.theorem1_gap(lattice_config(), "flat", 0.1, [0.0, 0.0, 0.0], T_max=0.105)


class TestLatticeAverages(unittest.TestCase):
    def test_spatial_average(self):
        f = lambda y: numpy.exp(-numpy.sum(y * y, axis=-1))  # noqa: E731
        (record,) = stats.spatial_average(lattice_config(), f, 0.1)
        self.assertAlmostEqual(record.mean, record.limit, places=12)
        self.assertEqual(record.variance, 0.0)

    def test_free_energy(self):
        numpy.testing.assert_allclose(stats.free_energy_sign(small_config()), (0.0, 0.0), atol=1e-12)


if __name__ == "__main__":
    unittest.main()
