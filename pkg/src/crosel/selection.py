"""Confident-label selection from a memory bank.

An example is selected when, over its last ``t`` stored predictions,

* every argmax lies in the candidate set,
* the argmax never changes between consecutive epochs, and
* the mean of the per-epoch max confidence is strictly above ``gamma``.

The selected label is the argmax of the newest prediction. Argmax ties go to
the lowest label id.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import HiddenTruth, PLLDataset
from .errors import ContractError
from .memory_bank import MemoryBank


@dataclass(frozen=True)
class SelectionConfig:
    gamma: float = 0.9
    t: int = 3

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.t < 2:
            raise ValueError(f"t must be at least 2, got {self.t}")


@dataclass(frozen=True, eq=False)
class SelectedSet:
    indices: np.ndarray
    labels: np.ndarray
    epoch: int = -1
    ready: bool = True

    def __len__(self) -> int:
        return len(self.indices)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.indices.tolist(), self.labels.tolist()))

    @classmethod
    def empty(cls, epoch: int = -1, ready: bool = False) -> "SelectedSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), epoch, ready)


@dataclass(frozen=True)
class SelectionStats:
    n_selected: int
    ratio: float
    accuracy: float | None  # None when nothing was selected

    def accuracy_or_one(self) -> float:
        return 1.0 if self.accuracy is None else self.accuracy


class Criteria(NamedTuple):
    in_candidates: bool
    stable: bool
    confident: bool
    candidate: int

    @property
    def selected(self) -> bool:
        return self.in_candidates and self.stable and self.confident


def criteria(history, candidates, gamma: float) -> Criteria:
    """Evaluate the three criteria for one example.

    ``history`` is ``(t, k)`` oldest first; ``candidates`` is a boolean mask of
    length ``k`` or an iterable of label ids.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[0] < 2:
        raise ContractError(f"history must be (t >= 2, k), got {history.shape}")
    members = _as_mask(candidates, history.shape[1])
    if not members.any():
        raise ContractError("candidate set is empty")
    tops = history.argmax(axis=1)
    return Criteria(
        in_candidates=bool(members[tops].all()),
        stable=bool((tops[1:] == tops[:-1]).all()),
        confident=bool(history.max(axis=1).mean() > gamma),
        candidate=int(tops[-1]),
    )


def _as_mask(candidates, k: int) -> np.ndarray:
    c = np.asarray(candidates)
    if c.dtype == bool and c.shape == (k,):
        return c
    mask = np.zeros(k, dtype=bool)
    mask[list(candidates)] = True
    return mask


def select(bank: MemoryBank, dataset: PLLDataset, cfg: SelectionConfig, epoch: int = -1) -> SelectedSet:
    """Vectorized selection over every example. Returns an empty, not-ready set
    while the bank holds fewer than ``t`` epochs."""
    if (bank.n, bank.k) != (dataset.n, dataset.k):
        raise ContractError(f"bank is {bank.n}x{bank.k} but dataset is {dataset.n}x{dataset.k}")
    if bank.t != cfg.t:
        raise ContractError(f"bank stores t={bank.t} epochs but selection expects t={cfg.t}")
    if not bank.is_full():
        return SelectedSet.empty(epoch, ready=False)
    hist = bank.stacked().astype(np.float64)  # (t, n, k)
    tops = hist.argmax(axis=2)  # (t, n)
    rows = np.arange(dataset.n)
    in_candidates = dataset.candidates[rows[None, :], tops].all(axis=0)
    stable = (tops[1:] == tops[:-1]).all(axis=0)
    confident = hist.max(axis=2).mean(axis=0) > cfg.gamma
    chosen = np.flatnonzero(in_candidates & stable & confident)
    return SelectedSet(chosen.astype(np.int64), tops[-1, chosen].astype(np.int64), epoch, ready=True)


def selection_stats(sel: SelectedSet, truth: HiddenTruth) -> SelectionStats:
    n = len(truth)
    if len(sel) == 0:
        return SelectionStats(0, 0.0, None)
    correct = int((truth.labels[sel.indices] == sel.labels).sum())
    return SelectionStats(len(sel), len(sel) / n, correct / len(sel))


SELECTION_LOG_FIELDS = ("epoch", "model_id", "n_selected", "s_ratio", "s_acc")


def selection_log_row(epoch: int, model_id: int, stats: SelectionStats) -> list[str]:
    acc = "NA" if stats.accuracy is None else f"{stats.accuracy:.6f}"
    return [str(epoch), str(model_id), str(stats.n_selected), f"{stats.ratio:.6f}", acc]


def write_selection_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SELECTION_LOG_FIELDS)
        w.writerows(rows)
