import hashlib
import os
import zlib
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError


def format_float(x: float) -> str:
    """Decimal text with 17 significant digits; parses back to the same double."""
    return f"{float(x):.17g}"


def parse_sweep(spec: str) -> Tuple[str, np.ndarray]:
    """Parse a sweep such as ``sigma=0.1:1.0:10`` into (name, values).

    The range is inclusive with the given number of points, like
    ``numpy.linspace``. A single value (``beta=1``) gives a one-point sweep.
    """
    if not spec or '=' not in spec:
        raise ConfigError(f"sweep must look like name=start:stop:count, got {spec!r}")
    name, rng = spec.split('=', 1)
    name = name.strip()
    parts = [p.strip() for p in rng.split(':')]
    try:
        if len(parts) == 1:
            return name, np.array([float(parts[0])])
        if len(parts) != 3:
            raise ValueError('expected start:stop:count')
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as e:
        raise ConfigError(f"invalid sweep {spec!r}: {e}")
    if count < 1:
        raise ConfigError(f"sweep {spec!r} needs at least one point")
    return name, np.linspace(start, stop, count)


def seed_for(master_seed: int, cell_index: int, stage_tag: str, replica: int = 0) -> int:
    """Derive a 64-bit seed for one (stage, cell, replica) stream.

    Streams come from ``SeedSequence`` spawn keys, so the value depends only on
    its inputs and never on which worker thread draws it.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=(zlib.crc32(stage_tag.encode()), int(cell_index), int(replica)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def resolve_threads(cli_value: Optional[int]) -> int:
    """CLI flag first, then FISHERLAT_THREADS, then 1."""
    if cli_value:
        return max(1, int(cli_value))
    env = os.getenv('FISHERLAT_THREADS', '').strip()
    if env:
        try:
            return max(1, int(env))
        except Exception:
            raise ConfigError(f"FISHERLAT_THREADS must be an integer, got {env!r}")
    return 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()
