"""Keyed random streams.

Every random draw in the package goes through :func:`stream`, which builds a
``numpy.random.Generator`` on top of the Philox-4x64 counter-based bit
generator. The 128-bit Philox key is derived from the base seed and a tuple
of labels (experiment, trial, task, purpose, ...) through ``SeedSequence``, so
two different label tuples never share a stream and the same tuple always
reproduces the same draws, regardless of thread scheduling.
"""

import zlib

import numpy as np


def _label_word(label):
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be nonnegative")
        return int(label)
    # str labels map through crc32 so the mapping is stable across processes
    # (python's hash() is salted per interpreter).
    return zlib.crc32(str(label).encode("utf-8")) | (1 << 32)


def stream(seed, *labels):
    """Return an independent generator for ``(seed, *labels)``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_word(x) for x in labels))
    return np.random.Generator(np.random.Philox(seq))
