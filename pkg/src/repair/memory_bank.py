"""Fixed-capacity FIFO store of paired feature tuples for one network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .errors import EmptyBankError, ParameterError


@dataclass(frozen=True)
class BankSnapshot:
    """Order-preserving copy of a bank (oldest entry first)."""

    img: np.ndarray  # (n, d) float32
    txt: np.ndarray  # (n, d) float32

    def __len__(self) -> int:
        return self.img.shape[0]


class MemoryBank:
    """Ring buffer of (image feature, text feature) tuples.

    Pushing beyond capacity evicts the oldest entry. Features are stored in
    float32; distance queries are computed in float64. The i-th image and
    text rows always belong to the same stored pair.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ParameterError("capacity must be >= 1")
        if dim < 1:
            raise ParameterError("dim must be >= 1")
        self._img = np.zeros((capacity, dim), dtype=np.float32)
        self._txt = np.zeros((capacity, dim), dtype=np.float32)
        self._size = 0
        self._next = 0
        self.insertion_counter = 0

    @property
    def capacity(self) -> int:
        return self._img.shape[0]

    @property
    def dim(self) -> int:
        return self._img.shape[1]

    def __len__(self) -> int:
        return self._size

    def push(self, img_feat: np.ndarray, txt_feat: np.ndarray) -> None:
        img_feat = np.asarray(img_feat)
        txt_feat = np.asarray(txt_feat)
        if img_feat.shape != (self.dim,) or txt_feat.shape != (self.dim,):
            raise ParameterError(f"features must have shape ({self.dim},)")
        self._img[self._next] = img_feat
        self._txt[self._next] = txt_feat
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.insertion_counter += 1

    def push_batch(self, img_feats: np.ndarray, txt_feats: np.ndarray) -> None:
        for i in range(np.atleast_2d(img_feats).shape[0]):
            self.push(np.atleast_2d(img_feats)[i], np.atleast_2d(txt_feats)[i])

    def snapshot(self) -> BankSnapshot:
        order = self._fifo_order()
        return BankSnapshot(self._img[order].copy(), self._txt[order].copy())

    def _fifo_order(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return np.roll(np.arange(self.capacity), -self._next)

    def distances_image(self, query: np.ndarray) -> np.ndarray:
        return self._distances(self._img, query)

    def distances_text(self, query: np.ndarray) -> np.ndarray:
        return self._distances(self._txt, query)

    def _distances(self, store: np.ndarray, query: np.ndarray) -> np.ndarray:
        if self._size == 0:
            raise EmptyBankError("distance query against an empty bank")
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise ParameterError(f"query must have shape ({self.dim},)")
        rows = store[self._fifo_order()].astype(np.float64)
        return np.linalg.norm(rows - query, axis=1)

    def dump(self, path) -> None:
        """Write current entries (FIFO order) to the binary container."""
        snap = self.snapshot()
        with open(path, "wb") as fh:
            container.write_header(fh, container.BANK_MAGIC, len(snap), self.dim, 0)
            container.write_f32_block(fh, snap.img)
            container.write_f32_block(fh, snap.txt)


def profile_distances(snapshot: BankSnapshot, queries: np.ndarray,
                      modality: str, chunk: int = 256) -> np.ndarray:
    """Euclidean distances of each query row to every stored feature.

    Computed by explicit differencing (not the expanded dot-product form) so
    a query identical to a stored row yields an exact zero.
    """
    if len(snapshot) == 0:
        raise EmptyBankError("distance query against an empty snapshot")
    store = (snapshot.img if modality == "img" else snapshot.txt).astype(np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = np.empty((queries.shape[0], store.shape[0]))
    for start in range(0, queries.shape[0], chunk):
        block = queries[start:start + chunk]
        diff = block[:, None, :] - store[None, :, :]
        out[start:start + chunk] = np.sqrt((diff * diff).sum(axis=2))
    return out
