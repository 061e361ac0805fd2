"""Reading and writing the ``<count> <dim>`` vector text format.

The same layout is used for text/image sidecars and for exported embeddings::

    3 4
    u1\t0.1,0.2,0.3,0.4
    ...
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def write_vectors(path, ids, matrix) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    ids = list(ids)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise ValueError("matrix rows must match ids")
    lines = [f"{len(ids)} {matrix.shape[1]}"]
    for ext_id, row in zip(ids, matrix):
        if "\t" in ext_id or "\n" in ext_id:
            raise ValueError(f"id {ext_id!r} contains a tab or newline")
        # repr gives the shortest string that round-trips exactly
        lines.append(ext_id + "\t" + ",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vectors(path, expected_dim: int | None = None) -> tuple[list[str], np.ndarray]:
    """Parse a vector file, returning ids in file order and an ``(n, dim)`` matrix."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}:1: header must be '<count> <dim>'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise DataError(f"{path}:1: header must be two integers") from None
        if expected_dim is not None and dim != expected_dim:
            raise DataError(f"{path}: dimension {dim} does not match expected {expected_dim}")
        ids: list[str] = []
        rows = np.empty((count, dim), dtype=np.float64)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            if len(ids) >= count:
                raise DataError(f"{path}:{lineno}: more rows than the declared count {count}")
            ext_id, sep, body = line.partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected '<id>\\t<values>'")
            try:
                values = [float(x) for x in body.split(",")] if dim else []
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
            if len(values) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            rows[len(ids)] = values
            ids.append(ext_id)
    if len(ids) != count:
        raise DataError(f"{path}: header declares {count} rows, found {len(ids)}")
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    return ids, rows
