"""Small shared helpers: atomic file writes and seed derivation."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file + rename, never leaving a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def child_seeds(seed: int, n: int, salt: int = 0) -> list[int]:
    """Derive ``n`` independent integer seeds from (seed, salt), deterministically.

    Distinct salts give unrelated streams, so two call sites sharing one
    user-facing seed do not consume the same randomness.
    """
    ss = np.random.SeedSequence(seed, spawn_key=(salt,))
    return [int(s) for s in ss.generate_state(n, np.uint64)]
