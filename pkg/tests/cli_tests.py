import json
import logging
import os
import shutil
import tempfile
import unittest

from pyKPZ import InDiskArchive, cli, stats

logging.basicConfig(level=logging.INFO)

QUICK = ["--set", "mollifier.dr=0.01", "--set", "beta=0", "--set", "M=4", "--set", "T=1", "--set", "delta=0.25"]


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        self.out = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.out, ignore_errors=True)

    def run_cli(self, *argv) -> int:
        return cli.run(["--out", self.out, *QUICK, *argv])

    def test_validate(self):
        self.assertEqual(self.run_cli("validate"), 0)
        self.assertFalse(os.path.exists(os.path.join(self.out, "validate.csv")))

    def test_config_errors(self):
        self.assertEqual(self.run_cli("--set", "eps=0.3", "validate"), 2)
        self.assertEqual(self.run_cli("--set", "colour=blue", "validate"), 2)

    def test_partition(self):
        self.assertEqual(self.run_cli("partition"), 0)

        rows = cli.read_rows(os.path.join(self.out, "partition.csv"))
        self.assertEqual(len(rows), 1)
        self.assertEqual(float(rows[0]["Z"]), 1.0)
        self.assertEqual(int(rows[0]["M"]), 4)

        with open(os.path.join(self.out, "partition.manifest.json")) as f:
            manifest = json.load(f)
        self.assertEqual(manifest["name"], "partition")
        self.assertEqual(manifest["config_hash"], rows[0]["config_hash"])
        self.assertTrue(os.path.exists(os.path.join(self.out, cli.KERNEL_CACHE)))

    def test_json_rows(self):
        path = os.path.join(self.out, "rows.json")
        cli.write_rows([{"T": 1.0, "Z": 2.5}], path, "json")
        self.assertEqual(cli.read_rows(path), [{"T": 1.0, "Z": 2.5}])

    def test_plot(self):
        self.assertEqual(self.run_cli("--set", "stats.horizons=0.5,1", "--set", "stats.batches=2", "plateau"), 0)
        source = os.path.join(self.out, "plateau.csv")
        image = os.path.join(self.out, "plateau.png")

        self.assertEqual(cli.run(["plot", "plateau", source, "--output", image]), 0)
        self.assertGreater(os.path.getsize(image), 0)

    def test_noise_check(self):
        self.assertEqual(self.run_cli("--set", "stats.lambdas=1,0.5", "noise-check", "--seeds", "20"), 0)

        rows = cli.read_rows(os.path.join(self.out, "noise-check.csv"))
        self.assertEqual([float(r["lambda"]) for r in rows[:2]], [1.0, 0.5])
        self.assertEqual(float(rows[2]["expected_slope"]), -5.0)
        self.assertLess(abs(float(rows[2]["slope"]) + 5.0), 2.5)

    def test_tails_archive(self):
        argv = ["--set", "stats.realizations=3", "--set", "stats.inner_large=3", "--set", "stats.thetas=1"]
        self.assertEqual(self.run_cli(*argv, "tails"), 0)

        archive = InDiskArchive(os.path.join(self.out, "tails.kpz"))
        self.assertEqual(archive.read_array(stats.tail_key(2, 1.0)).shape, (3, 2))
        self.assertEqual(archive.read_array(stats.tail_key(3, 2.0)).shape, (3, 3))

        # a rerun replaces the stored weights
        self.assertEqual(self.run_cli(*argv, "tails"), 0)
        self.assertEqual(len(InDiskArchive(os.path.join(self.out, "tails.kpz")).entries), 4)

    def test_library_statistics(self):
        lattice = ["she.dt=0.01", "she.spacing=0.25", "she.box=4", "she.t=0.25", "stats.eps_list=1", "stats.batches=2"]
        argv = [arg for pair in lattice for arg in ("--set", pair)]
        self.assertEqual(self.run_cli(*argv, "average"), 0)
        (row,) = cli.read_rows(os.path.join(self.out, "average.csv"))
        self.assertAlmostEqual(float(row["mean"]), float(row["limit"]), places=9)

        self.assertEqual(self.run_cli(*argv, "free-energy"), 0)
        (row,) = cli.read_rows(os.path.join(self.out, "free-energy.csv"))
        self.assertAlmostEqual(float(row["mean_log_z"]), 0.0, places=9)

    def test_bad_point(self):
        self.assertEqual(self.run_cli("partition", "--x", "1,2"), 2)


if __name__ == "__main__":
    unittest.main()
