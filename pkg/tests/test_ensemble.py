import numpy as np
import pytest

from mqem import ensemble as en


def test_seeds_are_reproducible_and_distinct():
    seeds = [en.trajectory_seed(5, i) for i in range(1000)]
    assert seeds == [en.trajectory_seed(5, i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    assert en.trajectory_seed(6, 0) != seeds[0]
    assert all(0 <= s < 2 ** 64 for s in seeds)


def test_chunk_bounds():
    assert en.chunk_bounds(2500, 1000) == [(0, 1000), (1000, 2000), (2000, 2500)]
    with pytest.raises(ValueError):
        en.chunk_bounds(0)


def _square_chunk(a, b, offset):
    return [i * i + offset for i in range(a, b)]


def test_map_chunks_keeps_order():
    bounds = en.chunk_bounds(25, 4)
    serial = en.map_chunks(_square_chunk, bounds, 1, (1,))
    parallel = en.map_chunks(_square_chunk, bounds, 3, (1,))
    assert serial == parallel
    assert sum(serial, []) == [i * i + 1 for i in range(25)]


def test_sums_merge_equals_single_pass():
    rng = np.random.default_rng(0)
    states = rng.normal(size=(30, 3, 3)) + 1j * rng.normal(size=(30, 3, 3))
    w = rng.normal(size=30)
    whole = en.EnsembleSums(1, 3)
    whole.n = 30
    whole.add(0, states, w)
    parts = []
    for a, b in en.chunk_bounds(30, 7):
        s = en.EnsembleSums(1, 3)
        s.n = b - a
        s.add(0, states[a:b], w[a:b])
        parts.append(s)
    merged = en.merge_sums(parts)
    r1, r2 = whole.result([0.0]), merged.result([0.0])
    assert np.allclose(r1.mean, r2.mean, atol=1e-12)
    assert np.allclose(r1.mean[0], np.mean(w[:, None, None] * states, axis=0))
    assert np.allclose(r1.stderr_re[0], (w[:, None, None] * states).real.std(axis=0, ddof=1) / np.sqrt(30))
    assert r1.cost[0] == pytest.approx(np.abs(w).mean())


def test_empty_result():
    with pytest.raises(ValueError):
        en.EnsembleSums(1, 2).result([0.0])
