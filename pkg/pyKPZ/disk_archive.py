import logging
import os
import shutil
import tempfile
from typing import Optional, Type, TypeVar

from .base_archive import HEADER, BaseArchive

T = TypeVar("T", bound="InDiskArchive")


class InDiskArchive(BaseArchive):
    """Array archive read from and written to a file. Pending additions are
    kept in memory until ``save``; use ``pending_size`` to decide when to
    flush. The CLI uses it for the kernel cache and run artifacts.

    Params
    -------
    file_path : str
        The path to the archive. Created empty when ``create`` is set and the
        file is missing.
    """

    def __init__(self, file_path: str, *, entries=None, header: str = HEADER, create: bool = False):
        self.file_path = file_path
        self.modified_entries = {}

        if not os.path.exists(file_path):
            if not create:
                raise ValueError(f"File {file_path} not found")
            with open(file_path, "wb"):
                pass

        if entries is None:
            with open(self.file_path, "rb") as f:
                self.entries, self.header = self._unpack(f)
        else:
            self.entries = entries
            self.header = header

    def __repr__(self):
        return (
            f"< LargeArchive path={self.file_path} arrays={len(self.entries)} "
            f"dirty={bool(self.modified_entries)} >"
        )

    def _pack(self, file_path: Optional[str] = None):
        array_list, total_size, count = self._create_array_list()
        directory = os.path.dirname(os.path.abspath(self.file_path))

        with tempfile.NamedTemporaryFile(delete=False, dir=directory) as fp:
            entries = self._pack_index(fp, array_list, total_size, count, self.header)
            self._write_payloads(fp, array_list)
            name = fp.name

        path = file_path or self.file_path
        shutil.move(name, path)
        self.file_path = path
        self.entries = entries
        self.modified_entries = {}

    def _get_payload(self, name: str) -> bytes:
        entry = self.entries[name]
        with open(self.file_path, "rb") as f:
            f.seek(entry.position)
            return f.read(entry.size)

    def save(self, path: Optional[str] = None):
        """Repack into the archive file, or into ``path`` when given."""
        self._pack(path)
        logging.info(f"saved archive to {self.file_path}")

    @classmethod
    def empty(cls: Type[T], header: str = HEADER, *, file_path: str = None) -> T:
        if file_path is None:
            raise ValueError("Please specify a file path")

        with open(file_path, "wb") as f:
            f.write(b"")

        return cls(file_path, entries={}, header=header)

    def bytes(self) -> bytes:
        self._pack()
        with open(self.file_path, "rb") as f:
            return f.read()
