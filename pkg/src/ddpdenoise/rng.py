"""Counter-based, keyed random streams.

Every stochastic quantity in the package (weight init, noise, phantoms,
shuffles) draws from a Philox generator keyed by a seed plus a stable
label, so results do not depend on call order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label: str | int) -> list[int]:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def keyed_generator(seed: int, *labels: str | int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in labels:
        entropy.extend(_label_words(label))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` standard normals with the Box-Muller transform."""
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]


def fisher_yates(n: int, rng: np.random.Generator) -> list[int]:
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm
