"""Named deterministic random streams.

Every stochastic stage draws from its own stream keyed by (root seed,
stage label, indices...) so stages can run in any order, or in parallel,
and still reproduce bit-identically.
"""

from __future__ import annotations

from zlib import crc32

import numpy as np


def stream(root_seed: int, *labels) -> np.random.Generator:
    """Generator for the stream named by (root_seed, *labels).

    String labels are hashed with crc32; integer labels pass through, so
    per-index streams like ("acquire", t, patch) stay distinct.
    """
    parts = [int(root_seed)]
    for lab in labels:
        if isinstance(lab, str):
            parts.append(crc32(lab.encode("utf-8")))
        else:
            parts.append(int(lab))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(parts)))
