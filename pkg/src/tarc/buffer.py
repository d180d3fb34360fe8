"""Fixed-capacity episodic memory filled by reservoir sampling."""

from __future__ import annotations

import warnings
from typing import Optional, Tuple

import numpy as np


class EmptyBufferWarning(UserWarning):
    pass


class ReplayBuffer:
    """Reservoir-sampled store of un-augmented ``(image, label)`` pairs.

    After ``n >= capacity`` offers every offered sample is held with
    probability ``capacity / n``.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValueError(f"capacity must be non-negative, got {capacity}")
        self.capacity = int(capacity)
        self.seen_count = 0
        self.rng = np.random.default_rng(seed)
        self.images: Optional[np.ndarray] = None
        self.labels = np.zeros(self.capacity, dtype=np.int64)
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _ensure_storage(self, image_shape) -> None:
        if self.images is None:
            self.images = np.zeros((self.capacity, *image_shape))

    def insert_batch(self, images: np.ndarray, labels: np.ndarray) -> None:
        """Offer samples in order; equivalent to repeated single reservoir inserts."""
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n = len(labels)
        if n == 0:
            return
        if self.capacity == 0:
            self.seen_count += n
            return
        self._ensure_storage(images.shape[1:])
        pos = self.seen_count + np.arange(n)
        draws = self.rng.integers(0, pos + 1)
        slots = np.where(pos < self.capacity, pos, np.where(draws < self.capacity, draws, -1))
        offer = np.flatnonzero(slots >= 0)
        if offer.size:
            # a slot written twice within the batch keeps the later offer
            rev = offer[::-1]
            _, first = np.unique(slots[rev], return_index=True)
            keep = rev[first]
            self.images[slots[keep]] = images[keep]
            self.labels[slots[keep]] = labels[keep]
        self.seen_count += n
        self._size = min(self.seen_count, self.capacity)

    def reservoir_insert(self, image: np.ndarray, label: int) -> None:
        self.insert_batch(np.asarray(image)[None], np.asarray([label]))

    def sample_batch(self, k: int, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Uniform draw of ``k`` entries: without replacement when ``k <= len``, else with."""
        rng = rng if rng is not None else self.rng
        if self._size == 0:
            warnings.warn("sampling from an empty replay buffer", EmptyBufferWarning, stacklevel=2)
            shape = self.images.shape[1:] if self.images is not None else (0,)
            return np.zeros((0, *shape)), np.zeros(0, dtype=np.int64)
        idx = rng.choice(self._size, size=k, replace=k > self._size)
        return self.images[idx].copy(), self.labels[idx].copy()

    def contents(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.images is None:
            return np.zeros((0,)), np.zeros(0, dtype=np.int64)
        return self.images[: self._size].copy(), self.labels[: self._size].copy()

    # -- checkpoint container support ---------------------------------------
    def snapshot(self):
        manifest = {
            "capacity": self.capacity,
            "seen_count": self.seen_count,
            "size": self._size,
            "image_shape": list(self.images.shape[1:]) if self.images is not None else None,
            "rng_state": self.rng.bit_generator.state,
        }
        images, labels = self.contents()
        return manifest, [images.reshape(-1), labels.astype(np.float64)]

    @classmethod
    def restore(cls, manifest: dict, raw: np.ndarray) -> "ReplayBuffer":
        buf = cls(manifest["capacity"])
        buf.rng.bit_generator.state = manifest["rng_state"]
        buf.seen_count = manifest["seen_count"]
        size = manifest["size"]
        if manifest["image_shape"] is not None:
            shape = tuple(manifest["image_shape"])
            n_pix = size * int(np.prod(shape))
            buf._ensure_storage(shape)
            buf.images[:size] = raw[:n_pix].reshape(size, *shape)
            buf.labels[:size] = raw[n_pix : n_pix + size].astype(np.int64)
        buf._size = size
        return buf


def reservoir_insert(buffer: ReplayBuffer, sample) -> None:
    image, label = sample
    buffer.reservoir_insert(image, label)


def sample_batch(buffer: ReplayBuffer, k: int, seed: int):
    return buffer.sample_batch(k, np.random.default_rng(seed))
