"""Deterministic seed derivation for independent named random streams."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(master: int, *tags) -> int:
    """A stable 63-bit seed for the stream named by (master, *tags)."""
    key = ":".join([str(master), *map(str, tags)])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(master: int, *tags) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(master, *tags))
    return gen


def numpy_generator(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
