"""Bundled example data."""

from __future__ import annotations

import hashlib
from importlib import resources

from .errors import InputError

HORMONE_SHA256 = "27380cddc4da01a15c0c0c5061b5e94df4e888203f42cef4a9b391369017d292"


def hormone_path():
    """Path to the bundled hormone-assay CSV (27 devices, 3 lots)."""
    return resources.files("resrand").joinpath("data", "hormone.csv")


def load_hormone():
    """Load the hormone data as a :class:`~resrand.linmodel.Dataset`.

    Columns: ``y`` (hormone remaining), ``x1`` (hours worn) and ``cluster``
    (manufacturing lot).  The file checksum is verified first.
    """
    from .cli import ingest_csv

    path = hormone_path()
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != HORMONE_SHA256:
        raise InputError(f"hormone.csv checksum mismatch: {digest}")
    with resources.as_file(path) as p:
        return ingest_csv(p)
