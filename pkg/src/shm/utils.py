"""Seeding, hashing and CSV helpers."""

from __future__ import annotations

import csv
import hashlib
import json
import zlib
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent named RNG stream derived from one root seed.

    ``extra`` indexes sub-streams (episode number, worker id, ...). The same
    (seed, name, extra) always yields the same generator.
    """
    key = zlib.crc32(name.encode())
    return np.random.default_rng([int(seed), key, *map(int, extra)])


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def fmt(x) -> str:
    """Round-trippable text for floats, plain str() for everything else."""
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_csv(path: "str | Path", header: list[str], rows: Iterable[Iterable]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path: "str | Path") -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
