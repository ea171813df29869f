"""Seeded random streams.

All randomness in the package comes from numpy ``PCG64`` generators built
from a :class:`numpy.random.SeedSequence` whose entropy is the run seed and
whose spawn key is a tuple of 32-bit words derived from string labels::

    word(label) = first 4 bytes (little endian) of sha256(label.encode("utf-8"))
    stream(seed, *labels) = Generator(PCG64(SeedSequence(seed, spawn_key=words)))

Integer labels are used verbatim (masked to 32 bits).  PCG64 and
``Generator.integers`` are stable across platforms, so a stream is a pure
function of its seed and labels.  Torch-side draws (Gaussian noise for the
diffusion process) use a ``torch.Generator`` seeded from such a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def label_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(label_word(k) for k in labels))


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *labels)))


def torch_generator(seed: int, *labels) -> torch.Generator:
    word = int(seed_sequence(seed, *labels).generate_state(1, dtype=np.uint64)[0])
    g = torch.Generator(device="cpu")
    g.manual_seed(word & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
