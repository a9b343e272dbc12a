"""Counter-based random streams.

Every stream is a Philox generator keyed by a tuple of integers (seed plus
purpose tags), folded through SeedSequence into the two 64-bit key words.
Streams are independent of worker layout and platform, which is what makes
generation, training and evaluation bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def stream(*entropy: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(e) for e in entropy]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
