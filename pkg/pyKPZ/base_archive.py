import enum
import logging
import struct
from collections import namedtuple
from typing import IO, Dict, List, Mapping, Tuple, Type, TypeVar

import numpy

from .errors import ArchiveSizeError

Entry = namedtuple("Entry", "name position size")
EntryEdit = namedtuple("EntryEdit", "name action content size")
ArrayList = List[Tuple[str, int]]
T = TypeVar("T", bound="BaseArchive")

HEADER = "KPZ1"
TRAILER = b"L253\x00"


class ArrayAction(enum.Enum):
    ADD = 0
    REMOVE = 1


def encode_array(array: numpy.ndarray) -> bytes:
    """Serialize an array as ``dtype\\0``, ndim, shape, then raw little
    endian bytes."""
    array = numpy.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<")
    head = dtype.str.encode("latin-1") + b"\x00"
    head += struct.pack(">I", array.ndim)
    head += struct.pack(f">{array.ndim}Q", *array.shape)
    return head + array.astype(dtype, copy=False).tobytes()


def decode_array(payload: bytes) -> numpy.ndarray:
    end = payload.find(b"\x00")
    dtype = numpy.dtype(payload[:end].decode("latin-1"))
    offset = end + 1
    (ndim,) = struct.unpack_from(">I", payload, offset)
    offset += 4
    shape = struct.unpack_from(f">{ndim}Q", payload, offset)
    offset += 8 * ndim
    return numpy.frombuffer(payload, dtype=dtype, offset=offset).reshape(shape).copy()


class BaseArchive:
    """Named numpy arrays packed in one binary file: a 4 byte header, the
    total size, an index of ``(position, size, name)`` records and the
    concatenated payloads. Used for the radial kernel cache, lattice
    snapshots and retained per-sample log-weights.
    """

    modified_entries: Dict[str, EntryEdit]
    entries: Dict[str, Entry]

    @staticmethod
    def _unpack(file: IO) -> Tuple[Dict[str, Entry], str]:
        """Read the index of an archive"""
        entries = {}
        file.seek(0)

        header = file.read(4).decode("utf-8")
        if not header:
            return entries, HEADER

        file_size = struct.unpack("<I", file.read(4))[0]
        logging.debug(f"size: {file_size}")
        entry_count, index_size = struct.unpack(">II", file.read(8))
        logging.debug(f"entry count: {entry_count}")

        buf = memoryview(file.read(index_size))
        offset = 0
        entry_struct = struct.Struct(">II")

        for _ in range(entry_count):
            position, entry_size = entry_struct.unpack_from(buf, offset)
            offset += entry_struct.size

            end = buf[offset:].tobytes().find(b"\x00")
            name = buf[offset : offset + end].tobytes().decode("latin-1")
            offset += end + 1

            logging.debug("entry %s at %d (%d bytes)", name, position, entry_size)
            entries[name] = Entry(name, position, entry_size)

        return entries, header

    def _create_array_list(self) -> Tuple[ArrayList, int, int]:
        """Collect name and size of every array, pending edits included."""
        array_list = []
        total_size = 0

        for name in self.array_list():
            if name in self.modified_entries:
                entry_size = self.modified_entries[name].size
            else:
                entry_size = self.entries[name].size

            array_list.append((name, entry_size))
            total_size += entry_size

        return array_list, total_size, len(array_list)

    def _pack_index(self, archive_file: IO, array_list: ArrayList, total_size: int, count: int, header: str):
        """Write header and index, return the new entries"""
        entries = {}
        archive_file.write(header.encode("utf-8"))

        # 16 bytes of header fields, 8 per entry plus the name and its NUL, then the trailer
        first_entry = 16 + len(TRAILER)
        for name, _ in array_list:
            first_entry += len(name.encode("latin-1")) + 1 + 8

        size = total_size + first_entry
        try:
            archive_file.write(struct.pack("<I", size))
        except struct.error as e:
            raise ArchiveSizeError(f"archive of {size} bytes exceeds the 4 byte size field") from e

        archive_file.write(struct.pack(">II", count, first_entry - 16 - len(TRAILER)))

        position = first_entry
        entry_struct = struct.Struct(">II")
        for name, entry_size in array_list:
            logging.debug("indexing %s", name)
            archive_file.write(entry_struct.pack(position, entry_size) + name.encode("latin-1") + b"\x00")
            entries[name] = Entry(name, position, entry_size)
            position += entry_size

        archive_file.write(TRAILER)
        return entries

    def array_exists(self, name: str) -> bool:
        if name in self.modified_entries:
            return self.modified_entries[name].action is not ArrayAction.REMOVE

        return name in self.entries

    def array_list(self) -> List[str]:
        """Sorted names of the arrays in the archive, including pending
        additions and excluding pending removals.

        Returns
        --------
        List[str]
            The list of array names
        """
        names = {
            name
            for name in self.entries
            if name not in self.modified_entries
            or self.modified_entries[name].action is not ArrayAction.REMOVE
        }
        names.update(
            name for name, edit in self.modified_entries.items() if edit.action is not ArrayAction.REMOVE
        )
        return sorted(names)

    def get_entry(self, name: str) -> Entry:
        """Index entry for ``name``; pending entries have position -1."""
        if not self.array_exists(name):
            raise KeyError(f"Array '{name}' does not exist.")

        if name in self.modified_entries:
            return Entry(name, -1, self.modified_entries[name].size)

        return self.entries[name]

    def read_array(self, name: str) -> numpy.ndarray:
        """Get an array, pending edits included.

        Params
        -------
        name : str
            Slash separated key, e.g. ``V/d3/dr0.001/bump``

        Returns
        -------
        numpy.ndarray
            A fresh copy of the stored array

        Raises
        ------
            KeyError
                Array not found
        """
        if not self.array_exists(name):
            raise KeyError(f"Array '{name}' does not exist.")

        if name in self.modified_entries:
            return decode_array(self.modified_entries[name].content)

        return decode_array(self._get_payload(name))

    def add_array(self, name: str, array):
        """Mark an array to be added; it is written on the next repack.

        Raises
        ------
            KeyError
                Array already exists
            ValueError
                Name contains a NUL byte or is not latin-1
        """
        if self.array_exists(name):
            raise KeyError(f"Array '{name}' already exists.")

        if "\x00" in name:
            raise ValueError(f"Array name {name!r} cannot contain NUL.")
        try:
            name.encode("latin-1")
        except UnicodeEncodeError as e:
            raise ValueError(f"Array name {name!r} must be latin-1.") from e

        content = encode_array(numpy.asarray(array))
        self.modified_entries[name] = EntryEdit(name, ArrayAction.ADD, content, len(content))

    def edit_array(self, name: str, array):
        """Replace the content of an existing array.

        Raises
        ------
            KeyError
                Array not found
        """
        if not self.array_exists(name):
            raise KeyError(f"Array '{name}' does not exist.")

        content = encode_array(numpy.asarray(array))
        self.modified_entries[name] = EntryEdit(name, ArrayAction.ADD, content, len(content))

    def remove_array(self, name: str):
        if not self.array_exists(name):
            raise KeyError(f"Array '{name}' does not exist.")

        self.modified_entries[name] = EntryEdit(name, ArrayAction.REMOVE, None, 0)

    def repack(self):
        """Apply every pending edit to the archive."""
        self._pack()

    def pending_size(self) -> int:
        """Bytes held by pending additions."""
        return sum(e.size for e in self.modified_entries.values() if e.action is ArrayAction.ADD)

    def _write_payloads(self, raw_data_file: IO, array_list: ArrayList):
        logging.debug("writing %d payloads", len(array_list))
        for name, _ in array_list:
            if name in self.modified_entries:
                raw_data_file.write(self.modified_entries[name].content)
            else:
                raw_data_file.write(self._get_payload(name))

    def _get_payload(self, name: str) -> bytes:
        raise NotImplementedError

    def _pack(self):
        raise NotImplementedError

    def save(self, path: str):
        raise NotImplementedError

    @classmethod
    def empty(cls: Type[T], header: str = HEADER, **kwargs) -> T:
        raise NotImplementedError

    @classmethod
    def from_arrays(cls: Type[T], arrays: Mapping[str, numpy.ndarray], header: str = HEADER, **kwargs) -> T:
        """Build and pack an archive holding ``arrays``.

        Params
        -------
        arrays : Mapping[str, numpy.ndarray]
            Arrays by name
        header : str
            4 character archive tag

        Returns
        --------
        Archive
            The packed archive
        """
        archive = cls.empty(header, **kwargs)
        for name, array in arrays.items():
            archive.add_array(name, array)

        archive._pack()
        logging.info(f"packed {len(arrays)} arrays")
        return archive

    def bytes(self) -> bytes:
        raise NotImplementedError
