import io
import logging
import os
import random
import shutil
import tempfile
import unittest
import uuid
from typing import Union

import numpy

from pyKPZ import InDiskArchive, InMemoryArchive, base_archive
from pyKPZ.errors import ArchiveSizeError

logging.basicConfig(level=logging.INFO)


TEST_ARRAY = "V/d3/dr0.001/test"


class BaseTestCases:
    class BaseTest(unittest.TestCase):
        archive: Union[InMemoryArchive, InDiskArchive]

        def empty(self, header: str = "KPZ1") -> base_archive.BaseArchive:
            raise NotImplementedError

        def open_from_path(self, path: str) -> base_archive.BaseArchive:
            raise NotImplementedError

        def setUp(self):
            self.directory = tempfile.mkdtemp()
            self.values = numpy.linspace(0.0, 1.0, 11)
            self.archive = self.empty()
            self.archive.add_array(TEST_ARRAY, self.values)
            self.archive.repack()

        def tearDown(self):
            shutil.rmtree(self.directory, ignore_errors=True)

        def test_decode(self):
            numpy.testing.assert_array_equal(self.archive.read_array(TEST_ARRAY), self.values)
            self.assertEqual(len(self.archive.entries), 1)

        def test_remove_array(self):
            self.archive.remove_array(TEST_ARRAY)
            self.archive.repack()

            self.assertEqual(self.archive.modified_entries, {})
            self.assertNotIn(TEST_ARRAY, self.archive.entries)
            with self.assertRaises(KeyError):
                self.archive.read_array(TEST_ARRAY)

        def test_edit_array(self):
            self.archive.edit_array(TEST_ARRAY, numpy.arange(3, dtype=numpy.int64))
            self.archive.repack()

            contents = self.archive.read_array(TEST_ARRAY)
            self.assertEqual(contents.dtype, numpy.int64)
            numpy.testing.assert_array_equal(contents, [0, 1, 2])

        def test_add_array(self):
            with self.assertRaises(KeyError):
                self.archive.add_array(TEST_ARRAY, self.values)

            self.archive.add_array("she/run/u", numpy.ones((4, 4, 4)))
            entry = self.archive.get_entry("she/run/u")
            self.assertEqual(entry.position, -1)
            self.assertEqual(self.archive.read_array("she/run/u").shape, (4, 4, 4))

            self.archive.repack()
            self.assertGreater(self.archive.get_entry("she/run/u").position, 0)

        def test_bad_names(self):
            with self.assertRaises(ValueError):
                self.archive.add_array("bad\x00name", self.values)

        def test_pending_size(self):
            self.assertEqual(self.archive.pending_size(), 0)
            self.archive.add_array("weights", numpy.zeros(100))
            self.assertGreater(self.archive.pending_size(), 800)

        def test_archive_bytes(self):
            data = self.archive.bytes()
            self.assertIsInstance(data, bytes)
            self.assertTrue(data.startswith(b"KPZ1"))
            self.assertIn(b"L253\x00", data)

        def test_offsets(self):
            archive: base_archive.BaseArchive = self.empty()
            SIZE = 25
            path = os.path.join(self.directory, "offsets.kpz")
            titles = [str(uuid.uuid4()) for _ in range(SIZE)]
            values = [numpy.random.default_rng(x).standard_normal(random.randint(1, 50)) for x in range(SIZE)]

            for x in range(SIZE):
                archive.add_array(titles[x], values[x])

            archive.repack()

            for x in range(SIZE):
                numpy.testing.assert_array_equal(values[x], archive.read_array(titles[x]), "Offset incorrect after adding arrays")

            archive.save(path)
            archive = self.open_from_path(path)

            for x in range(SIZE):
                numpy.testing.assert_array_equal(values[x], archive.read_array(titles[x]), "Offset incorrect after saving archive")

            for _ in range(5):
                pop = random.choice(range(len(titles)))
                name = titles.pop(pop)
                values.pop(pop)
                archive.remove_array(name)

            archive.save(path)
            archive = self.open_from_path(path)

            for x in range(len(titles)):
                numpy.testing.assert_array_equal(
                    values[x], archive.read_array(titles[x]), "Offset incorrect after removing arrays and saving archive"
                )

        def test_from_arrays(self):
            arrays = {"a": numpy.arange(5.0), "b": numpy.eye(3)}
            archive = type(self.archive).from_arrays(arrays, **self.from_arrays_kwargs())
            self.assertEqual(archive.array_list(), ["a", "b"])
            numpy.testing.assert_array_equal(archive.read_array("b"), numpy.eye(3))

        def from_arrays_kwargs(self) -> dict:
            return {}


class TestArchive(BaseTestCases.BaseTest):
    def empty(self, header: str = "KPZ1") -> base_archive.BaseArchive:
        return InMemoryArchive.empty(header)

    def open_from_path(self, path: str) -> base_archive.BaseArchive:
        with open(path, "rb") as f:
            return InMemoryArchive(f.read())

    def test_archive_type(self):
        path = os.path.join(self.directory, "typed.kpz")

        for header in ["KPZ1", "KPZ2"]:
            archive = self.empty(header)
            archive.add_array(TEST_ARRAY, self.values)
            archive.save(path)

            with open(path, "rb") as f:
                archive = InMemoryArchive(f.read())

            self.assertEqual(archive.header, header)
            os.remove(path)

    def test_size_limit(self):
        archive = self.empty()
        with self.assertRaises(ArchiveSizeError):
            archive._pack_index(io.BytesIO(), [("big", 2**32)], 2**32, 1, archive.header)


class TestLargeArchive(BaseTestCases.BaseTest):
    def empty(self, header: str = "KPZ1"):
        return InDiskArchive.empty(header, file_path=os.path.join(self.directory, "large.kpz"))

    def open_from_path(self, path: str) -> base_archive.BaseArchive:
        return InDiskArchive(path)

    def from_arrays_kwargs(self) -> dict:
        return {"file_path": os.path.join(self.directory, "from_arrays.kpz")}

    def test_missing_file(self):
        with self.assertRaises(ValueError):
            InDiskArchive(os.path.join(self.directory, "missing.kpz"))

        archive = InDiskArchive(os.path.join(self.directory, "created.kpz"), create=True)
        self.assertEqual(archive.array_list(), [])

    def test_archive_type(self):
        path = os.path.join(self.directory, "typed.kpz")

        for header in ["KPZ1", "KPZ2"]:
            archive = InDiskArchive.empty(header, file_path=path)
            archive.add_array(TEST_ARRAY, self.values)
            archive.save()
            archive = InDiskArchive(path)
            self.assertEqual(archive.header, header)
            os.remove(path)


if __name__ == "__main__":
    unittest.main()
