"""Counter-based random streams keyed by (seed, purpose, index).

Every stochastic step in the pipeline pulls from an independent Philox stream
derived from the global seed plus a purpose string, so there is no hidden
global RNG state and any single stream can be re-derived in isolation.
"""

import hashlib

import numpy as np


def stream_key(seed: int, purpose: str, index: int = 0) -> int:
    digest = hashlib.blake2b(
        f"{seed}/{purpose}/{index}".encode(), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent counter-based generator for one (seed, purpose, index)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, purpose, index)))


def torch_manual_seed(seed: int, purpose: str, index: int = 0) -> int:
    """64-bit seed for a torch.Generator, derived from the same keying scheme."""
    return stream_key(seed, purpose, index) % (2**63)
