"""Distribution files and atomic output helpers.

A distribution file is JSON with a fixed shape::

    {
      "grid": {"lo": -3, "hi": 3, "n_cells": 1200},
      "mass": [ ... one mass per cell ... ],
      "labels": [ ... optional, one group id per cell ... ],
      "attribute_names": [ ... optional, one name per group ... ]
    }

Masses are written with 17 significant digits so a save/load round trip
reproduces the float64 values bit-exactly.  All writers go through
``atomic_write_text`` (write to a temp file, then rename), so readers
never observe a half-written file.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import ValidationError
from .grid import AttributePartition, GriddedDensity, GridSpec


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write_text(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def distribution_to_json(density: GriddedDensity, partition: AttributePartition = None) -> str:
    """Serialize a distribution (and optional partition) to canonical JSON."""
    if partition is not None and partition.grid != density.grid:
        raise ValidationError("partition grid does not match the density grid")
    g = density.grid
    lines = [
        "{",
        f'  "grid": {{"lo": {_fmt(g.lo)}, "hi": {_fmt(g.hi)}, "n_cells": {g.n_cells}}},',
        '  "mass": [' + ", ".join(_fmt(m) for m in density.mass) + "]",
    ]
    if partition is not None:
        lines[-1] += ","
        lines.append('  "labels": ' + json.dumps([int(v) for v in partition.labels]) + ",")
        lines.append('  "attribute_names": ' + json.dumps(list(partition.attribute_names)))
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_distribution(path: str, density: GriddedDensity, partition: AttributePartition = None) -> None:
    atomic_write_text(path, distribution_to_json(density, partition))


def load_distribution(path: str):
    """Read a distribution file; returns ``(density, partition_or_None)``."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    try:
        gdoc = doc["grid"]
        grid = GridSpec(float(gdoc["lo"]), float(gdoc["hi"]), int(gdoc["n_cells"]))
        mass = np.asarray(doc["mass"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed distribution file ({exc})") from exc
    density = GriddedDensity(grid, mass)
    partition = None
    if "labels" in doc:
        labels = np.asarray(doc["labels"], dtype=np.int64)
        names = doc.get("attribute_names")
        partition = AttributePartition(grid, labels, names)
    return density, partition
