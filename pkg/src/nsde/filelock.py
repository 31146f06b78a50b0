"""
nsde/filelock.py
Serialized writes of result files.

Whole files (datasets, histories, parameter JSON) are replaced atomically;
sweep curves are appended row-block by row-block under an exclusive
``fcntl.flock`` so concurrent sweep points never interleave within a file.
"""

from __future__ import annotations

import fcntl
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Iterator


@contextmanager
def locked_open(path: Path, mode: str = "r", *, shared: bool = False) -> Iterator[IO]:
    """Open *path* (UTF-8) holding an advisory flock until the block exits.

    Parent directories are created.  *shared* takes ``LOCK_SH`` for
    readers; writers get ``LOCK_EX``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode, encoding="utf-8") as f:
        fcntl.flock(f.fileno(), fcntl.LOCK_SH if shared else fcntl.LOCK_EX)
        try:
            yield f
        finally:
            fcntl.flock(f.fileno(), fcntl.LOCK_UN)


def _lock_path(path: Path) -> Path:
    return path.with_name(path.name + ".lock")


def atomic_write_text(path: Path, data: str) -> None:
    """Replace *path* with *data*; readers see the old or the new file, never a mix.

    Writers of the same file are serialized on a sibling ``.lock`` file.
    """
    path = Path(path)
    with locked_open(_lock_path(path), "a"):
        tmp = tempfile.NamedTemporaryFile(
            "w",
            encoding="utf-8",
            dir=path.parent,
            prefix=f".{path.name}.",
            suffix=".tmp",
            delete=False,
        )
        try:
            with tmp:
                tmp.write(data)
            os.replace(tmp.name, path)
        except BaseException:
            Path(tmp.name).unlink(missing_ok=True)
            raise


def append_csv_rows(path: Path, header: str, rows: str) -> None:
    """Append *rows* to a CSV file, writing *header* first if the file is empty."""
    with locked_open(Path(path), "a") as f:
        if f.seek(0, os.SEEK_END) == 0:
            f.write(header.rstrip("\n") + "\n")
        f.write(rows)
