import numpy as np

from thetaem.noise import (BLOCK_STEPS, NoiseStream, batch_normals, derive_seed, gaussian_increments,
                           standard_normals)


def test_same_lineage_identical():
    a = gaussian_increments(NoiseStream(7, 3), 500, 0.01)
    b = gaussian_increments(NoiseStream(7, 3), 500, 0.01)
    assert a.tobytes() == b.tobytes()


def test_moments_clt_bound():
    delta, n = 0.01, 1_000_000
    x = gaussian_increments(NoiseStream(42, 0), n, delta)[:, 0]
    assert abs(x.mean()) <= 4 * np.sqrt(delta / n)
    assert abs(x.var() / delta - 1) < 0.01


def test_distinct_paths_uncorrelated():
    a = gaussian_increments(NoiseStream(42, 0), 10_000, 1.0)[:, 0]
    b = gaussian_increments(NoiseStream(42, 1), 10_000, 1.0)[:, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.02


def test_random_access_across_blocks():
    full = standard_normals(5, 2, 0, 3 * BLOCK_STEPS, dim=2)
    part = standard_normals(5, 2, BLOCK_STEPS - 7, 20, dim=2)
    assert np.array_equal(part, full[BLOCK_STEPS - 7:BLOCK_STEPS + 13])


def test_take_advances_and_concatenates():
    s = NoiseStream(9, 4)
    first, second = s.take(300, 0.1), s.take(900, 0.1)
    whole = gaussian_increments(NoiseStream(9, 4), 1200, 0.1)
    assert s.position == 1200
    assert np.array_equal(np.vstack([first, second]), whole)


def test_batch_matches_single_paths():
    b = batch_normals(11, [3, 0, 8], 17, 50)
    for i, p in enumerate([3, 0, 8]):
        assert np.array_equal(b[:, i, :], standard_normals(11, p, 17, 50))


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, "strong") == derive_seed(1, "strong")
    assert len({derive_seed(1, "strong"), derive_seed(1, "weak"), derive_seed(2, "strong"),
                derive_seed(1, "strong", 1)}) == 4
