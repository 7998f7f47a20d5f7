"""Counter-based random streams.

Every random decision in the toolkit draws from a Philox generator keyed by
``(seed, purpose-tagged stream word)``.  Streams are pure functions of their
key — no global state, no consumption order to get wrong — which is what
makes shuffles and augmentations reproducible from ``(seed, epoch, index)``
alone and lets a resumed run replay the exact same data order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# high-byte namespace tags so independent subsystems never share a stream
TAG_INIT = 1 << 56      # weight initialization, word = layer counter
TAG_SHUFFLE = 2 << 56   # epoch shuffles, word = epoch
TAG_AUGMENT = 3 << 56   # per-image augmentation, word = epoch << 28 | index
TAG_DATA = 4 << 56      # synthetic data generation, word = sample index


def keyed_rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def augment_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    return keyed_rng(seed, TAG_AUGMENT | ((epoch & ((1 << 28) - 1)) << 28) | (index & ((1 << 28) - 1)))
