import zlib

import numpy as np

# named substreams of the single top-level seed
CORPUS = "corpus"
INIT = "init"
DROPOUT = "dropout"
SAMPLING = "sampling"
BATCHES = "batches"


def substream_seed(seed, name, *extra):
    """Entropy tuple for the substream ``name`` of ``seed`` (stable across runs and platforms)."""
    return [int(seed), zlib.crc32(name.encode("utf-8")), *(int(x) for x in extra)]


def substream(seed, name, *extra):
    return np.random.default_rng(substream_seed(seed, name, *extra))
