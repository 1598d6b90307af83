import io
import logging
from typing import Type, TypeVar

from .base_archive import HEADER, BaseArchive

T = TypeVar("T", bound="InMemoryArchive")


class InMemoryArchive(BaseArchive):
    """Array archive held in a byte buffer. Nothing touches the disk until
    ``save`` is called.

    Params
    -------
    content : Optional[bytes]
        Raw bytes of an existing archive
    """

    def __init__(self, content: bytes = b"", **kwargs):
        self.archive = io.BytesIO(content)
        self.entries = kwargs.get("entries")
        self.modified_entries = {}
        self.header = kwargs.get("header", HEADER)

        if self.entries is None:
            self.entries, self.header = self._unpack(self.archive)

    def __repr__(self):
        return f"< Archive arrays={len(self.entries)} dirty={bool(self.modified_entries)} >"

    def _pack(self):
        new_archive = io.BytesIO()
        array_list, total_size, count = self._create_array_list()
        entries = self._pack_index(new_archive, array_list, total_size, count, self.header)
        self._write_payloads(new_archive, array_list)

        self.archive = new_archive
        self.entries = entries
        self.archive.seek(0)
        self.modified_entries = {}

    def _get_payload(self, name: str) -> bytes:
        entry = self.entries[name]
        self.archive.seek(entry.position)
        return self.archive.read(entry.size)

    def save(self, path: str):
        """Repack and write the archive to ``path``."""
        self._pack()
        with open(path, "wb") as f:
            f.write(self.archive.getvalue())
        logging.info(f"saved archive to {path}")

    @classmethod
    def empty(cls: Type[T], header: str = HEADER) -> T:
        return cls(entries={}, header=header)

    def bytes(self) -> bytes:
        self._pack()
        return self.archive.getvalue()
