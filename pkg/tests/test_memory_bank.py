from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crosel.errors import ContractError, NotReadyError
from crosel.memory_bank import MemoryBank


def random_probs(rng, n, k):
    p = rng.random((n, k)) + 1e-3
    return p / p.sum(1, keepdims=True)


def test_first_push():
    bank = MemoryBank(3, 2, 2)
    a = np.array([[1.0, 0.0], [0.3, 0.7]])
    bank.push(a)
    assert len(bank) == 1
    assert not bank.is_full()


def test_fifo_eviction():
    rng = np.random.default_rng(0)
    a, b, c, d = (random_probs(rng, 4, 3) for _ in range(4))
    bank = MemoryBank(3, 4, 3)
    for m in (a, b, c, d):
        bank.push(m)
    np.testing.assert_allclose(bank.stacked(), np.stack([b, c, d]), rtol=1e-6)


def test_ten_pushes_keep_last_three():
    rng = np.random.default_rng(1)
    mats = [random_probs(rng, 5, 4) for _ in range(10)]
    bank = MemoryBank(3, 5, 4)
    queue = deque()
    for m in mats:
        bank.push(m)
        queue.append(m)
        if len(queue) > 3:
            queue.popleft()
    np.testing.assert_allclose(bank.stacked(), np.stack(queue), rtol=1e-6)
    np.testing.assert_allclose(bank.stacked(), np.stack(mats[7:]), rtol=1e-6)


def test_history_is_oldest_first():
    rng = np.random.default_rng(2)
    a, b, c = (random_probs(rng, 3, 2) for _ in range(3))
    bank = MemoryBank(3, 3, 2).push(a).push(b).push(c)
    np.testing.assert_allclose(bank.history(1), np.stack([a[1], b[1], c[1]]), rtol=1e-6)


def test_history_needs_full_bank():
    rng = np.random.default_rng(3)
    bank = MemoryBank(3, 2, 2).push(random_probs(rng, 2, 2)).push(random_probs(rng, 2, 2))
    with pytest.raises(NotReadyError):
        bank.history(0)


def test_history_ordering_over_random_pushes():
    rng = np.random.default_rng(4)
    bank = MemoryBank(4, 6, 3)
    pushed = []
    for _ in range(100):
        m = random_probs(rng, 6, 3)
        bank.push(m)
        pushed.append(m)
        if bank.is_full():
            i = int(rng.integers(0, 6))
            np.testing.assert_allclose(bank.history(i), np.stack([p[i] for p in pushed[-4:]]), rtol=1e-6)


def test_is_full_lifecycle():
    rng = np.random.default_rng(5)
    bank = MemoryBank(3, 2, 2)
    assert not bank.is_full()
    for _ in range(3):
        bank.push(random_probs(rng, 2, 2))
    assert bank.is_full()
    for _ in range(5):
        bank.push(random_probs(rng, 2, 2))
    assert bank.is_full() and len(bank) == 3


def test_shape_mismatch():
    with pytest.raises(ContractError):
        MemoryBank(3, 2, 2).push(np.full((3, 2), 0.5))


def test_non_simplex_row_named():
    probs = np.array([[0.5, 0.5], [0.6, 0.6], [1.0, 0.0]])
    with pytest.raises(ContractError, match="row 1"):
        MemoryBank(2, 3, 2).push(probs)
    with pytest.raises(ContractError, match="row 0"):
        MemoryBank(2, 1, 2).push(np.array([[1.5, -0.5]]))


def test_epochs_must_increase():
    bank = MemoryBank(2, 1, 2).push(np.array([[0.5, 0.5]]), epoch=4)
    with pytest.raises(ContractError):
        bank.push(np.array([[0.5, 0.5]]), epoch=4)
    bank.push(np.array([[0.5, 0.5]]), epoch=6)
    assert bank.epochs == [4, 6]


def test_t_below_two_rejected():
    with pytest.raises(ValueError):
        MemoryBank(1, 2, 2)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    bank = MemoryBank(3, 4, 3)
    for e in range(5):
        bank.push(random_probs(rng, 4, 3), epoch=e)
    path = bank.save(tmp_path / "mb_1.bin")
    raw = path.read_bytes()
    assert np.frombuffer(raw[:32], "<i8").tolist() == [3, 4, 3, 4]
    assert len(raw) == 32 + 3 * 4 * 3 * 4
    loaded = MemoryBank.load(path)
    assert np.array_equal(loaded.stacked(), bank.stacked())
    assert loaded.epochs == [2, 3, 4]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 20), st.integers(0, 10_000))
def test_queue_equivalence(t, m, seed):
    rng = np.random.default_rng(seed)
    n, k = 3, 4
    bank = MemoryBank(t, n, k)
    mats = [random_probs(rng, n, k) for _ in range(m)]
    for x in mats:
        bank.push(x)
    assert len(bank) == min(m, t)
    if m >= t:
        for i in range(n):
            np.testing.assert_allclose(bank.history(i), np.stack([x[i] for x in mats[m - t:]]), rtol=1e-6)
