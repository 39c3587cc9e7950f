"""Partially labeled datasets: sources, candidate-set synthesis and the on-disk cache.

Feature conventions
-------------------
* vector data (``synthetic-gaussians``): float32, each feature standardized with
  the training split's mean and standard deviation.
* image data (``mnist-like``, ``cifar10-subset``): float32 in ``[0, 1]``, laid out
  ``C x H x W``. Normalization is left to the network (the reference CNN uses
  batch norm) so that photometric augmentations see raw intensities.

Labels are 0-indexed. Candidate sets are held as boolean ``(n, k)`` masks in
memory and serialized as one bitmask integer per example (bit ``j`` set when
label ``j`` is a candidate).
"""
from __future__ import annotations

import csv
import json
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOURCES = ("synthetic-gaussians", "mnist-like", "cifar10-subset")
SOURCE_ALIASES = {"synthetic": "synthetic-gaussians", "mnist": "mnist-like", "cifar10": "cifar10-subset"}


@dataclass(frozen=True)
class Instance:
    features: np.ndarray
    index: int


@dataclass(frozen=True)
class LabeledSplit:
    """Fully labeled data, the raw material for a partial-label dataset."""

    features: np.ndarray
    labels: np.ndarray
    k: int
    source_index: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class PLLDataset:
    """Instances with candidate sets. Carries no ground truth.

    The true labels live in a separate :class:`HiddenTruth` object, which
    only the evaluation helpers accept; nothing in the training path takes one.
    """

    features: np.ndarray
    candidates: np.ndarray  # bool (n, k)
    k: int

    def __post_init__(self):
        if self.candidates.shape != (len(self.features), self.k):
            raise ValueError(
                f"candidate mask shape {self.candidates.shape} does not match (n={len(self.features)}, k={self.k})"
            )
        if not self.candidates.any(axis=1).all():
            bad = int(np.flatnonzero(~self.candidates.any(axis=1))[0])
            raise ValueError(f"example {bad} has an empty candidate set")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        self.features.setflags(write=False)
        self.candidates.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.features)

    def instance(self, i: int) -> Instance:
        return Instance(self.features[i], i)

    def candidate_set(self, i: int) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.candidates[i]).tolist())


@dataclass(frozen=True, eq=False)
class HiddenTruth:
    """Ground-truth labels of a :class:`PLLDataset`, for evaluation only."""

    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def generate_candidate_sets(labels, k: int, q: float, seed: int) -> np.ndarray:
    """Flip each negative label into the candidate set with probability ``q``.

    Returns a boolean ``(n, k)`` mask; the true label is always a member and a
    draw that adds no negatives is kept as the singleton ``{y}``.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"flip probability q must lie in [0, 1], got {q}")
    if k < 2:
        raise ValueError(f"need at least 2 classes, got k={k}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    rng = np.random.default_rng(seed)
    mask = rng.random((len(labels), k)) < q
    mask[np.arange(len(labels)), labels] = True
    return mask


def make_pll(split: LabeledSplit, q: float, seed: int) -> tuple[PLLDataset, HiddenTruth]:
    candidates = generate_candidate_sets(split.labels, split.k, q, seed)
    dataset = PLLDataset(np.array(split.features, dtype=np.float32), candidates, split.k)
    return dataset, HiddenTruth(np.array(split.labels, dtype=np.int64))


def to_bitmasks(candidates: np.ndarray) -> list[int]:
    weights = [1 << j for j in range(candidates.shape[1])]
    return [sum(w for w, bit in zip(weights, row) if bit) for row in candidates.tolist()]


def from_bitmasks(masks, k: int) -> np.ndarray:
    out = np.zeros((len(masks), k), dtype=bool)
    for i, m in enumerate(masks):
        m = int(m)
        if m <= 0 or m >> k:
            raise ValueError(f"bitmask {m} at row {i} is empty or exceeds k={k}")
        for j in range(k):
            out[i, j] = bool(m >> j & 1)
    return out


# --------------------------------------------------------------------------
# sources


def _balanced_indices(labels: np.ndarray, k: int, per_class: int, rng, exclude=None) -> np.ndarray:
    picked = []
    for c in range(k):
        pool = np.flatnonzero(labels == c)
        if exclude is not None:
            pool = np.setdiff1d(pool, exclude, assume_unique=True)
        if len(pool) < per_class:
            raise ValueError(f"class {c} has {len(pool)} examples, {per_class} requested")
        picked.append(rng.permutation(pool)[:per_class])
    return np.sort(np.concatenate(picked))


def synthetic_gaussians(
    n: int,
    k: int = 4,
    seed: int = 0,
    dim: int = 2048,
    modes: int = 6,
    separation: float = 3.0,
    mode_spread: float = 1.5,
    noise: float = 1.0,
    test_fraction: float = 0.2,
    image_shape: tuple[int, ...] | None = None,
) -> tuple[LabeledSplit, LabeledSplit]:
    """Class-balanced Gaussian mixture with ``modes`` sub-clusters per class.

    Class centers are drawn from ``N(0, separation^2 / dim * I)`` (so two centers
    sit ``~separation * sqrt(2)`` apart); each mode is offset from its class
    center by ``N(0, mode_spread^2 / dim * I)`` and samples add isotropic noise
    of standard deviation ``noise``.

    The defaults put n=2000 well below the dimension, so a network can fit
    any labelling of the training set; that is the regime where resisting
    memorization of wrong candidates pays off.
    """
    if n % k:
        raise ValueError(f"n={n} is not divisible by k={k}; cannot balance classes")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation / np.sqrt(dim), size=(k, dim))
    offsets = rng.normal(0.0, mode_spread / np.sqrt(dim), size=(k, modes, dim))
    n_test = int(round(n * test_fraction))
    n_test -= n_test % k

    def draw(count):
        y = np.repeat(np.arange(k), count // k)
        m = rng.integers(0, modes, size=len(y))
        x = centers[y] + offsets[y, m] + rng.normal(0.0, noise, size=(len(y), dim))
        return x, y

    x_tr, y_tr = draw(n)
    x_te, y_te = draw(n_test)
    mu, sd = x_tr.mean(0), x_tr.std(0) + 1e-8
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd
    if image_shape is not None:
        x_tr = x_tr.reshape(len(x_tr), *image_shape)
        x_te = x_te.reshape(len(x_te), *image_shape)
    return (
        LabeledSplit(x_tr.astype(np.float32), y_tr, k, np.arange(n)),
        LabeledSplit(x_te.astype(np.float32), y_te, k, np.arange(n, n + n_test)),
    )


def _mnist_like():
    from sklearn.datasets import load_digits

    digits = load_digits()
    return (digits.images / 16.0).astype(np.float32)[:, None], digits.target.astype(np.int64)


def _cifar10(root: Path):
    base = root / "cifar-10-batches-py"
    files = [base / f"data_batch_{i}" for i in range(1, 6)] + [base / "test_batch"]
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"CIFAR-10 batch not found: {f}")
    xs, ys = [], []
    for f in files:
        with open(f, "rb") as fh:
            batch = pickle.load(fh, encoding="latin1")
        xs.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(batch["labels"], dtype=np.int64))
    x, y = np.concatenate(xs), np.concatenate(ys)
    is_test = np.zeros(len(y), dtype=bool)
    is_test[-len(ys[-1]):] = True
    return x, y, is_test


def load_split(source: str, subset_size: int, seed: int, k: int | None = None, root=None, **options):
    """Return a class-balanced ``(train, test)`` pair of :class:`LabeledSplit`.

    ``synthetic-gaussians`` generates fresh data (``k`` classes, default 4, plus
    any :func:`synthetic_gaussians` keyword). ``mnist-like`` subsamples the
    8x8 digits bundled with scikit-learn. ``cifar10-subset`` reads the python
    pickles from ``root/cifar-10-batches-py`` (``root`` defaults to
    ``$CROSEL_DATA_DIR`` or ``./data``). Test sets hold ``subset_size // 5``
    examples, disjoint from train.
    """
    source = SOURCE_ALIASES.get(source, source)
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}; expected one of {SOURCES}")
    if source == "synthetic-gaussians":
        return synthetic_gaussians(subset_size, k=k or 4, seed=seed, **options)
    if options:
        raise TypeError(f"unexpected options for {source}: {sorted(options)}")

    if subset_size < 10:
        raise ValueError(f"subset_size={subset_size} is smaller than the class count 10")
    rng = np.random.default_rng(seed)
    if source == "mnist-like":
        x, y = _mnist_like()
        k = 10
        per_class = subset_size // k
        tr = _balanced_indices(y, k, per_class, rng)
        te = _balanced_indices(y, k, max(1, per_class // 5), rng, exclude=tr)
    else:
        root = Path(root or os.environ.get("CROSEL_DATA_DIR", "data"))
        x, y, is_test = _cifar10(root)
        k = 10
        per_class = subset_size // k
        tr = _balanced_indices(np.where(is_test, -1, y), k, per_class, rng)
        te = _balanced_indices(np.where(is_test, y, -1), k, max(1, per_class // 5), rng)
        x = x.astype(np.float32) / 255.0
    return (
        LabeledSplit(x[tr], y[tr], k, tr),
        LabeledSplit(x[te], y[te], k, te),
    )


# --------------------------------------------------------------------------
# cache: meta.json, candidates.csv, truth.csv, features.bin, test_*.


def write_tensor(path, array: np.ndarray) -> None:
    """Flat float32 layout: one ASCII header line of space-separated dims, then
    little-endian row-major values."""
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write((" ".join(str(d) for d in array.shape) + "\n").encode("ascii"))
        fh.write(array.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        shape = tuple(int(d) for d in fh.readline().decode("ascii").split())
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: header shape {shape} does not match {data.size} stored values")
    return data.reshape(shape).astype(np.float32)


def save_dataset(directory, dataset: PLLDataset, truth: HiddenTruth, test: LabeledSplit, q: float, seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"k": dataset.k, "n": dataset.n, "q": q, "seed": seed, "n_test": len(test)}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(directory / "candidates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "bitmask"])
        w.writerows(enumerate(to_bitmasks(dataset.candidates)))
    _write_labels(directory / "truth.csv", truth.labels)
    _write_labels(directory / "test_labels.csv", test.labels)
    write_tensor(directory / "features.bin", dataset.features)
    write_tensor(directory / "test_features.bin", test.features)
    return directory


def load_dataset(directory):
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset cache not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    with open(directory / "candidates.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    candidates = from_bitmasks([r["bitmask"] for r in rows], meta["k"])
    dataset = PLLDataset(read_tensor(directory / "features.bin"), candidates, meta["k"])
    truth = HiddenTruth(_read_labels(directory / "truth.csv"))
    test_labels = _read_labels(directory / "test_labels.csv")
    test = LabeledSplit(read_tensor(directory / "test_features.bin"), test_labels, meta["k"], np.arange(len(test_labels)))
    return dataset, truth, test, meta


def _write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label"])
        w.writerows(enumerate(np.asarray(labels).tolist()))


def _read_labels(path):
    with open(path, newline="") as fh:
        return np.array([int(r["label"]) for r in csv.DictReader(fh)], dtype=np.int64)
