from collections import Counter, deque
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocssl.replay import Buffer


def _contents(buf):
    return [float(e.sample[0]) for e in buf.entries]


def test_fifo_example():
    buf = Buffer(3, "fifo")
    for v in "abcd":
        buf.insert([ord(v)])
    assert _contents(buf) == [ord("b"), ord("c"), ord("d")]


def test_fifo_is_a_strict_queue_exhaustive():
    for capacity, length in product(range(1, 6), range(0, 21)):
        buf, oracle = Buffer(capacity, "fifo"), deque(maxlen=capacity)
        for t in range(length):
            buf.insert([float(t)])
            oracle.append(float(t))
            assert _contents(buf) == list(oracle)
            assert len(buf) <= capacity
        seqs = [e.insert_seq for e in buf.entries]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)


def test_fifo_residency_is_exactly_capacity_steps():
    capacity, n = 4, 30
    buf = Buffer(capacity, "fifo")
    resident = Counter()
    for t in range(n):
        buf.insert([float(t)])
        resident.update(int(v) for v in _contents(buf))
    # every sample except the last `capacity` ones (the tail) is resident for exactly `capacity` steps
    assert all(resident[t] == capacity for t in range(n - capacity))


def test_reservoir_inclusion_probability():
    k, n, trials = 5, 20, 10_000
    hits = np.zeros(n)
    for seed in range(trials):
        buf = Buffer(k, "reservoir", seed=seed)
        for t in range(n):
            buf.insert([float(t)])
        assert len(buf) == k
        for v in _contents(buf):
            hits[int(v)] += 1
    p = k / n
    sigma = np.sqrt(p * (1 - p) / trials)
    assert np.all(np.abs(hits / trials - p) <= 3 * sigma), hits / trials


def test_reservoir_fills_before_replacing():
    buf = Buffer(3, "reservoir", seed=0)
    for t in range(3):
        buf.insert([float(t)])
    assert _contents(buf) == [0.0, 1.0, 2.0]


def test_minred_evicts_from_the_duplicate_pair():
    buf = Buffer(2, "minred")
    buf.insert([0.0], [1.0, 0.0])
    buf.insert([1.0], [0.0, 1.0])
    buf.insert([2.0], [1.0, 0.0])
    assert len(buf) == 2
    assert 1.0 in _contents(buf)
    assert sorted(_contents(buf)) in ([0.0, 1.0], [1.0, 2.0])


def test_minred_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    buf = Buffer(6, "minred")
    for t in range(40):
        feats = [e.feature for e in buf.entries] + [rng.standard_normal(3)]
        items = _contents(buf) + [float(t)]
        buf.insert([float(t)], feats[-1])
        if len(items) <= 6:
            assert _contents(buf) == items
            continue
        # brute force: the most similar pair; its two members tie on max-similarity, either may leave
        unit = [f / np.linalg.norm(f) for f in feats]
        pairs = [(float(unit[i] @ unit[j]), i, j) for i in range(len(unit)) for j in range(i + 1, len(unit))]
        _, i, j = max(pairs)
        allowed = [items[:k] + items[k + 1:] for k in (i, j)]
        assert _contents(buf) in allowed


def test_minred_forces_features():
    buf = Buffer(2, "minred")
    assert buf.store_features
    with pytest.raises(ValueError):
        buf.insert([0.0])


# -- sampling -----------------------------------------------------------------------------------------


def test_sample_examples():
    rng = np.random.default_rng(0)
    one = Buffer(4)
    one.insert([7.0])
    batch = one.sample(1, rng)
    assert batch.samples.tolist() == [[7.0]] and batch.handles == [0]
    buf = Buffer(8)
    buf.insert_batch(np.arange(8.0)[:, None])
    batch = buf.sample(8, rng)
    assert sorted(batch.samples[:, 0].tolist()) == list(np.arange(8.0))


def test_sample_empty_and_warmup():
    rng = np.random.default_rng(0)
    buf = Buffer(4)
    assert len(buf.sample(5, rng)) == 0
    buf.insert([1.0])
    buf.insert([2.0])
    batch = buf.sample(5, rng)
    assert len(batch) == 5 and set(batch.samples[:, 0]) <= {1.0, 2.0}


def test_sampling_is_uniform():
    buf = Buffer(10)
    buf.insert_batch(np.arange(10.0)[:, None])
    rng = np.random.default_rng(0)
    draws = 50_000
    counts = np.zeros(10)
    for _ in range(draws):
        counts[int(buf.sample(1, rng).samples[0, 0])] += 1
    p = 0.1
    sigma = np.sqrt(p * (1 - p) / draws)
    assert np.all(np.abs(counts / draws - p) <= 3 * sigma), counts / draws


# -- stored-feature update ---------------------------------------------------------------------------


def _with_feature(z):
    buf = Buffer(4, store_features=True)
    buf.insert([0.0], z)
    return buf


def test_update_features_examples():
    buf = _with_feature([1.0, 0.0])
    buf.update_features([0], [[0.0, 1.0]], [[0.0, 1.0]])
    np.testing.assert_array_equal(buf.entries[0].feature, [0.5, 0.5])
    buf = _with_feature([0.3, -2.0])
    buf.update_features([0], [[0.3, -2.0]], [[0.3, -2.0]])
    np.testing.assert_array_equal(buf.entries[0].feature, [0.3, -2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_update_formula_exact(z, a, b):
    buf = _with_feature(z)
    buf.update_features([0], [a], [b])
    want = 0.5 * np.array(z) + 0.25 * np.array(a) + 0.25 * np.array(b)
    np.testing.assert_array_equal(buf.entries[0].feature, want)


def test_update_converges_geometrically():
    buf = _with_feature([4.0, 0.0])
    view = np.array([[0.0, 0.0]])
    for k in range(1, 12):
        buf.update_features([0], view, view)
        np.testing.assert_allclose(buf.entries[0].feature, [4.0 * 0.5 ** k, 0.0], rtol=0, atol=1e-15)


def test_stale_handles_are_skipped():
    buf = Buffer(2, store_features=True)
    buf.insert([0.0], [1.0])
    handles = buf.sample(1, np.random.default_rng(0)).handles
    buf.insert([1.0], [1.0])
    buf.insert([2.0], [1.0])  # evicts the sampled entry
    buf.update_features(handles, [[0.0]], [[0.0]])
    assert buf.stale_handles == 1
    assert all(e.feature[0] == 1.0 for e in buf.entries)


def test_stored_features_are_read_only():
    buf = _with_feature([1.0, 2.0])
    with pytest.raises(ValueError):
        buf.entries[0].feature[0] = 5.0


def test_serialization_round_trip():
    buf = Buffer(3, "reservoir", store_features=True, seed=4)
    for t in range(7):
        buf.insert([float(t), -t], [t, 1.0])
    arrays, meta = buf.to_arrays()
    clone = Buffer.from_arrays(arrays, meta)
    assert _contents(clone) == _contents(buf) and clone.seen == buf.seen
    for t in range(7, 20):
        buf.insert([float(t), -t], [t, 1.0])
        clone.insert([float(t), -t], [t, 1.0])
    assert _contents(clone) == _contents(buf)
    assert [e.insert_seq for e in clone.entries] == [e.insert_seq for e in buf.entries]


def test_bad_construction():
    with pytest.raises(ValueError):
        Buffer(0)
    with pytest.raises(ValueError):
        Buffer(3, "lifo")
