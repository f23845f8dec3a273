"""Named, counter-based random streams.

Every concern (episode sampling, augmentation, latent noise, parameter init)
gets its own Philox stream keyed by ``(seed, name)``, so consuming numbers in
one concern never shifts another and episodes can be replayed out of order.
"""

import hashlib

import numpy as np
import torch


def _key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, name)))


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(_key(seed, name) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def normal(rng: np.random.Generator, shape, dtype=torch.float32) -> torch.Tensor:
    """Standard-normal tensor drawn from a numpy stream."""
    return torch.from_numpy(rng.standard_normal(shape)).to(dtype)
