import numpy as np
import pytest
from scipy import stats

from abloop import so3
from abloop.errors import InvalidVariance


def test_scale_rot_halves_angle():
    rot90 = so3.rotation_from_axis_angle([0, 0, 1], np.pi / 2)
    rot45 = so3.rotation_from_axis_angle([0, 0, 1], np.pi / 4)
    assert np.allclose(so3.scale_rot(rot90, 0.5), rot45, atol=1e-12)


def test_scale_rot_identity_cases():
    assert np.allclose(so3.scale_rot(np.eye(3), 0.3), np.eye(3))
    rng = np.random.default_rng(0)
    rot = so3.random_rotation(rng)
    assert np.allclose(so3.scale_rot(rot, 1.0), rot, atol=1e-12)


def test_scale_rot_composition_property():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        rot = so3.random_rotation(rng)
        k1, k2 = rng.uniform(0.05, 1.0, size=2)
        once = so3.scale_rot(rot, k1 * k2)
        twice = so3.scale_rot(so3.scale_rot(rot, k1), k2)
        assert np.abs(once - twice).max() < 1e-9


def test_scale_rot_near_pi_deterministic():
    rot = so3.rotation_from_axis_angle([1, 2, 3], np.pi - 1e-9)
    a = so3.scale_rot(rot, 0.5)
    b = so3.scale_rot(rot, 0.5)
    assert np.array_equal(a, b)
    assert so3.is_rotation(a, 1e-9)


def test_scale_rot_many_matches_scalar():
    rng = np.random.default_rng(2)
    rots = np.stack([so3.random_rotation(rng) for _ in range(50)])
    batch = so3.scale_rot_many(rots, 0.37)
    single = np.stack([so3.scale_rot(r, 0.37) for r in rots])
    assert np.abs(batch - single).max() < 1e-12


def test_geodesic_distance():
    assert so3.geodesic_distance(np.eye(3), np.eye(3)) == 0.0
    rot = so3.rotation_from_axis_angle([1, 0, 0], np.pi / 2)
    assert abs(so3.geodesic_distance(np.eye(3), rot) - np.pi / 2) < 1e-12
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b = so3.random_rotation(rng), so3.random_rotation(rng)
        assert abs(so3.geodesic_distance(a, b)
                   - so3.geodesic_distance(b, a)) < 1e-12


def test_density_zero_at_origin():
    assert so3.igso3_density(0.0, 0.5) == 0.0


def test_density_rejects_bad_variance():
    with pytest.raises(InvalidVariance):
        so3.igso3_density(0.5, 0.0)
    with pytest.raises(InvalidVariance):
        so3.sample_igso3(np.eye(3), -1.0, np.random.default_rng(0))


def test_density_uniform_limit():
    # at large variance the angle marginal approaches (1 - cos w) / pi
    got = so3.igso3_density(np.pi / 2, 10.0)
    want = (1.0 - np.cos(np.pi / 2)) / np.pi
    assert abs(got - want) / want < 0.02


@pytest.mark.parametrize("eps", [0.01, 0.1, 1.0])
def test_density_normalizes(eps):
    grid = np.linspace(0.0, np.pi, 20001)
    f = so3.igso3_density(grid, eps)
    total = np.trapezoid(f, grid)
    normalized = f / total
    assert abs(np.trapezoid(normalized, grid) - 1.0) < 1e-4
    # the untruncated series is itself normalized, so the raw integral
    # should already be close to one at these variances
    assert abs(total - 1.0) < 1e-6


def test_sample_concentrates_at_small_variance():
    rng = np.random.default_rng(42)
    mean = so3.random_rotation(rng)
    close = sum(
        so3.geodesic_distance(mean, so3.sample_igso3(mean, 1e-6, rng)) < 0.01
        for _ in range(1000))
    assert close >= 999


def test_sample_deterministic_per_seed():
    mean = so3.rotation_from_axis_angle([1, 1, 0], 0.4)
    a = so3.sample_igso3(mean, 0.2, np.random.default_rng(5))
    b = so3.sample_igso3(mean, 0.2, np.random.default_rng(5))
    assert np.array_equal(a, b)


def _binned_gof(angles, table, n_bins=40):
    edges = np.linspace(0.0, np.pi, n_bins + 1)
    counts, _ = np.histogram(angles, bins=edges)
    fine = np.linspace(0.0, np.pi, 8001)
    pdf = np.interp(fine, table.grid, table.pdf)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1])
                                           * np.diff(fine))])
    cdf /= cdf[-1]
    expected = len(angles) * np.diff(np.interp(edges, fine, cdf))
    keep = expected >= 5.0
    merged_c = np.concatenate([counts[keep], [counts[~keep].sum()]])
    merged_e = np.concatenate([expected[keep], [expected[~keep].sum()]])
    if merged_e[-1] < 1e-9:
        merged_c, merged_e = merged_c[:-1], merged_e[:-1]
    merged_e *= merged_c.sum() / merged_e.sum()
    return stats.chisquare(merged_c, merged_e)


@pytest.mark.parametrize("eps", [0.01, 0.1, 1.0])
def test_sample_angle_matches_density(eps):
    table = so3.igso3_table(eps)
    rng = np.random.default_rng(7)
    angles = table.sample_angle(rng, 2000)
    _, p = _binned_gof(angles, table)
    assert p > 0.01


def test_left_equivariance_of_sampling():
    # angle-from-mean distributions agree for two different means
    rng = np.random.default_rng(11)
    rot = so3.random_rotation(rng)
    eps = 0.3
    a = [so3.geodesic_distance(np.eye(3), so3.sample_igso3(np.eye(3), eps, rng))
         for _ in range(2000)]
    b = [so3.geodesic_distance(rot, so3.sample_igso3(rot, eps, rng))
         for _ in range(2000)]
    ks = stats.ks_2samp(a, b)
    assert ks.statistic < 0.05


def test_samples_are_valid_rotations():
    rng = np.random.default_rng(13)
    mean = so3.random_rotation(rng)
    for eps in (1e-4, 0.1, 2.0):
        for _ in range(20):
            assert so3.is_rotation(so3.sample_igso3(mean, eps, rng), 1e-9)


def test_sample_many_matches_single_distribution():
    rng = np.random.default_rng(17)
    means = np.stack([so3.random_rotation(rng) for _ in range(500)])
    batch = so3.sample_igso3_many(means, 0.2, np.random.default_rng(19))
    angles_batch = [so3.geodesic_distance(m, s) for m, s in zip(means, batch)]
    single_rng = np.random.default_rng(23)
    angles_single = [
        so3.geodesic_distance(m, so3.sample_igso3(m, 0.2, single_rng))
        for m in means]
    ks = stats.ks_2samp(angles_batch, angles_single)
    assert ks.statistic < 0.09


def test_table_cdf_monotone():
    table = so3.igso3_table(0.05)
    assert table.cdf[0] == 0.0
    assert abs(table.cdf[-1] - 1.0) < 1e-12
    assert np.all(np.diff(table.cdf) >= 0.0)
    assert np.all(table.pdf >= 0.0)


def test_project_rotation_recovers_noisy_frame():
    rng = np.random.default_rng(29)
    rot = so3.random_rotation(rng)
    noisy = rot + 1e-5 * rng.standard_normal((3, 3))
    fixed = so3.project_rotation(noisy)
    assert so3.is_rotation(fixed, 1e-12)
    assert np.abs(fixed - rot).max() < 1e-4
