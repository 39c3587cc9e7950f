"""FIFO store of the last ``t`` epochs of per-example softmax outputs."""
from __future__ import annotations

import struct
from collections import deque
from pathlib import Path

import numpy as np

from .errors import ContractError, NotReadyError

SIMPLEX_TOL = 1e-5
_HEADER = struct.Struct("<4q")  # t, n, k, last epoch


class MemoryBank:
    """Ring of ``(n, k)`` probability matrices, oldest first.

    >>> bank = MemoryBank(t=2, n=1, k=2)
    >>> for p in ([[1.0, 0.0]], [[0.5, 0.5]], [[0.0, 1.0]]):
    ...     _ = bank.push(np.array(p))
    >>> bank.history(0).tolist()
    [[0.5, 0.5], [0.0, 1.0]]
    """

    def __init__(self, t: int, n: int, k: int):
        if t < 2:
            raise ValueError(f"memory bank needs t >= 2, got {t}")
        self.t, self.n, self.k = t, n, k
        self._ring: deque[np.ndarray] = deque(maxlen=t)
        self._epochs: deque[int] = deque(maxlen=t)

    def __len__(self) -> int:
        return len(self._ring)

    @property
    def epochs(self) -> list[int]:
        return list(self._epochs)

    def is_full(self) -> bool:
        return len(self._ring) == self.t

    def push(self, probs, epoch: int | None = None) -> "MemoryBank":
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (self.n, self.k):
            raise ContractError(f"expected probabilities of shape {(self.n, self.k)}, got {probs.shape}")
        bad = ~np.isfinite(probs).all(1) | (probs < 0).any(1) | (np.abs(probs.sum(1) - 1.0) > SIMPLEX_TOL)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ContractError(f"row {i} is not a probability vector (sum={probs[i].sum():.8f})")
        if epoch is None:
            epoch = self._epochs[-1] + 1 if self._epochs else 0
        elif self._epochs and epoch <= self._epochs[-1]:
            raise ContractError(f"epoch {epoch} does not follow the last stored epoch {self._epochs[-1]}")
        self._ring.append(probs.astype(np.float32))
        self._epochs.append(int(epoch))
        return self

    def stacked(self) -> np.ndarray:
        """All stored epochs as a ``(t, n, k)`` array, oldest first."""
        if not self.is_full():
            raise NotReadyError(f"memory bank holds {len(self)} of {self.t} epochs")
        return np.stack(self._ring)

    def history(self, i: int) -> np.ndarray:
        """``(t, k)`` predictions of example ``i``, oldest first."""
        if not self.is_full():
            raise NotReadyError(f"memory bank holds {len(self)} of {self.t} epochs")
        if not 0 <= i < self.n:
            raise IndexError(f"example index {i} out of range [0, {self.n})")
        return np.stack([m[i] for m in self._ring])

    def save(self, path) -> Path:
        """Header ``(t, n, k, last epoch)`` as little-endian int64, then the
        stored matrices in push order as little-endian float32."""
        path = Path(path)
        last = self._epochs[-1] if self._epochs else -1
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.t, self.n, self.k, last))
            for m in self._ring:
                fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, path) -> "MemoryBank":
        raw = Path(path).read_bytes()
        t, n, k, last = _HEADER.unpack_from(raw)
        data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
        if data.size % (n * k):
            raise ContractError(f"{path}: payload is not a whole number of {n}x{k} matrices")
        mats = data.reshape(-1, n, k)
        bank = cls(t, n, k)
        first = last - len(mats) + 1
        for j, m in enumerate(mats):
            bank.push(m, epoch=first + j)
        return bank
