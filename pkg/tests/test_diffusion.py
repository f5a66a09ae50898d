import numpy as np
import pytest

from abloop import diffusion as dif
from abloop import so3
from abloop.errors import EmptyMask, InvalidRange, ShapeMismatch
from abloop.synthetic import make_synthetic_dataset


def toy_schedule(betas):
    betas = np.asarray(betas, dtype=float)
    return dif.NoiseSchedule(kind="linear", beta=betas,
                             alpha_bar=np.cumprod(1.0 - betas))


# --- schedules -------------------------------------------------------------

def test_schedule_linear_constant_beta():
    sched = dif.make_schedule(2, "linear", 0.1, 0.1)
    assert np.allclose(sched.alpha_bar, [0.9, 0.81], atol=1e-15)


def test_schedule_two_step_product():
    sched = toy_schedule([0.1, 0.2])
    assert abs(sched.alpha_bar_at(2) - 0.72) < 1e-15


def test_schedule_cosine_reaches_prior():
    sched = dif.make_schedule(100, "cosine")
    assert sched.alpha_bar[-1] < 0.01
    assert np.all(np.diff(sched.alpha_bar) < 0.0)
    assert sched.reaches_prior


def test_schedule_rejects_bad_ranges():
    with pytest.raises(InvalidRange):
        dif.make_schedule(0, "linear", 0.1, 0.2)
    with pytest.raises(InvalidRange):
        dif.make_schedule(10, "linear", 0.0, 0.2)
    with pytest.raises(InvalidRange):
        dif.make_schedule(10, "linear", 0.3, 0.2)
    with pytest.raises(InvalidRange):
        dif.make_schedule(10, "spline", 0.1, 0.2)


def test_schedule_serialization_roundtrip():
    sched = dif.make_schedule(25, "cosine")
    text = dif.serialize_schedule(sched)
    back = dif.deserialize_schedule(text)
    assert back.kind == sched.kind
    assert np.array_equal(back.beta, sched.beta)
    assert np.array_equal(back.alpha_bar, sched.alpha_bar)


# --- residue-type kernels --------------------------------------------------

def test_forward_type_no_noise_limit():
    sched = toy_schedule([0.1])
    probs = dif.forward_type(4, 0, sched)
    want = np.zeros(20)
    want[4] = 1.0
    assert np.array_equal(probs, want)


def test_forward_type_closed_form_value():
    # alpha_bar = 0.9 puts 0.905 on the source letter, 0.005 elsewhere
    sched = toy_schedule([0.1])
    probs = dif.forward_type(0, 1, sched)
    assert abs(probs[0] - 0.905) < 1e-15
    assert np.allclose(np.delete(probs, 0), 0.005, atol=1e-15)
    assert abs(probs.sum() - 1.0) < 1e-12


def test_forward_type_composition_matches_closed_form():
    sched = dif.make_schedule(100, "cosine")
    kernel = np.eye(20)
    for t in range(1, 101):
        kernel = dif.type_step_matrix(t, sched) @ kernel
        closed = np.column_stack(
            [dif.forward_type(s0, t, sched) for s0 in range(20)])
        assert np.abs(kernel - closed).max() < 1e-10


def test_type_posterior_t1_is_clean_onehot():
    sched = toy_schedule([0.5, 0.3])
    for st in range(3):
        post = dif.type_posterior(st, 1, 1, sched, n_types=3)
        assert np.array_equal(post, [0.0, 1.0, 0.0])


def test_type_posterior_fully_noised_limit():
    # beta_t -> 1 and alpha_bar_{t-1} -> 0 gives a uniform posterior
    betas = np.array([1.0 - 1e-12, 1.0 - 1e-12])
    sched = dif.NoiseSchedule(kind="linear", beta=betas,
                              alpha_bar=np.cumprod(1.0 - betas))
    post = dif.type_posterior(2, 0, 2, sched, n_types=5)
    assert np.abs(post - 0.2).max() < 1e-6


def test_type_posterior_matches_trajectory_enumeration():
    # independent oracle: enumerate every trajectory s0 -> s1 -> s2 on a
    # 3-letter alphabet and condition by brute-force summation
    sched = toy_schedule([0.5, 0.3])
    n = 3

    def step(t):
        beta = sched.beta_at(t)
        return (1 - beta) * np.eye(n) + beta / n * np.ones((n, n))

    k1, k2 = step(1), step(2)
    for s0 in range(n):
        # joint over (s1, s2) given s0
        joint = np.zeros((n, n))
        for s1 in range(n):
            for s2 in range(n):
                joint[s1, s2] = k1[s1, s0] * k2[s2, s1]
        for t, st in ((1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)):
            if t == 1:
                want = np.zeros(n)
                want[s0] = 1.0  # s_{t-1} = s_0 exactly
            else:
                want = joint[:, st] / joint[:, st].sum()
            got = dif.type_posterior(st, s0, t, sched, n_types=n)
            assert np.abs(got - want).max() < 1e-12


def test_type_posterior_many_matches_scalar():
    sched = toy_schedule([0.2, 0.4, 0.1])
    rng = np.random.default_rng(0)
    st = rng.integers(0, 20, size=30)
    s0 = rng.integers(0, 20, size=30)
    batch = dif.type_posterior_many(st, s0, 2, sched)
    for k in range(30):
        single = dif.type_posterior(int(st[k]), int(s0[k]), 2, sched)
        assert np.abs(batch[k] - single).max() < 1e-15


def test_posterior_reconstructs_forward_marginal():
    # sum_{s_{t-1}} q(s_t | s_{t-1}) q(s_{t-1} | s_0) equals q(s_t | s_0)
    sched = toy_schedule([0.5, 0.3, 0.2])
    n = 3
    for t in (1, 2, 3):
        step = ((1 - sched.beta_at(t)) * np.eye(n)
                + sched.beta_at(t) / n * np.ones((n, n)))
        for s0 in range(n):
            marg_prev = dif.forward_type(s0, t - 1, sched, n_types=n)
            want = dif.forward_type(s0, t, sched, n_types=n)
            got = step @ marg_prev
            assert np.abs(got - want).max() < 1e-10


# --- position and orientation kernels ---------------------------------------

def test_forward_pos_zero_noise():
    sched = toy_schedule([0.1])
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(dif.forward_pos(x, 0, sched,
                                          np.random.default_rng(0)), x)


def test_forward_pos_moments():
    betas = np.full(10, 0.1)
    sched = toy_schedule(betas)
    t = 10  # alpha_bar close to 0.3487
    abar = sched.alpha_bar_at(t)
    rng = np.random.default_rng(1)
    x0 = np.array([1.0, 0.0, 0.0])
    samples = np.array([dif.forward_pos(x0, t, sched, rng)
                        for _ in range(10000)])
    mean = samples.mean(axis=0)
    var = samples.var(axis=0)
    se_mean = np.sqrt((1 - abar) / 10000)
    assert np.abs(mean - np.sqrt(abar) * x0).max() < 4 * se_mean
    assert np.abs(var - (1 - abar)).max() < 0.05 * (1 - abar) * 3


def test_forward_pos_two_step_covariance():
    # stepwise corruption matches the closed-form variance
    betas = np.array([0.2, 0.3])
    sched = toy_schedule(betas)
    rng = np.random.default_rng(5)
    n = 10000
    x0 = np.zeros(3)
    two_step = np.empty((n, 3))
    for i in range(n):
        x1 = dif.forward_pos(x0, 1, sched, rng)
        two_step[i] = (np.sqrt(1 - betas[1]) * x1
                       + np.sqrt(betas[1]) * rng.standard_normal(3))
    var_want = 1 - sched.alpha_bar_at(2)
    assert np.abs(two_step.var(axis=0) - var_want).max() < 0.05 * var_want * 3


def test_forward_orient_zero_noise():
    sched = toy_schedule([0.1])
    rot = so3.rotation_from_axis_angle([1, 0, 0], 0.7)
    assert np.array_equal(
        dif.forward_orient(rot, 0, sched, np.random.default_rng(0)), rot)


def test_forward_orient_uniform_limit():
    # with alpha_bar near zero the angle-from-identity histogram matches
    # the uniform-rotation marginal (KS < 0.05 at n = 2000)
    from scipy import stats
    betas = np.full(40, 0.4)
    sched = toy_schedule(betas)
    t = 40
    rng = np.random.default_rng(3)
    angles = [so3.geodesic_distance(
        np.eye(3), dif.forward_orient(np.eye(3), t, sched, rng))
        for _ in range(2000)]
    grid = np.linspace(0, np.pi, 2001)
    pdf = (1 - np.cos(grid)) / np.pi
    cdf = np.concatenate([[0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1])
                                         * np.diff(grid))])
    ks = stats.ks_1samp(angles, lambda x: np.interp(x, grid, cdf))
    assert ks.statistic < 0.05


def test_forward_orient_deviation_grows_with_t():
    sched = dif.make_schedule(60, "cosine")
    rng = np.random.default_rng(7)
    rot = so3.random_rotation(rng)
    means = []
    for t in (5, 20, 40, 60):
        mean_rot = so3.scale_rot(rot, np.sqrt(sched.alpha_bar_at(t)))
        dev = [so3.geodesic_distance(mean_rot,
                                     dif.forward_orient(rot, t, sched, rng))
               for _ in range(300)]
        means.append(np.mean(dev))
    assert all(a < b for a, b in zip(means, means[1:]))


# --- complex-level noising ---------------------------------------------------

def test_noise_complex_t0_identity():
    c = make_synthetic_dataset(1, seed=0)[0]
    sched = toy_schedule([0.1, 0.2])
    noised = dif.noise_complex(c, 0, sched, np.random.default_rng(0))
    assert noised.t == 0
    assert np.array_equal(noised.complex.res_types, c.res_types)
    assert np.array_equal(noised.complex.ca_pos, c.ca_pos)


def test_noise_complex_requires_mask():
    c = make_synthetic_dataset(1, seed=0)[0]
    bare = c.with_arrays(mask_indices=np.array([], dtype=int))
    sched = toy_schedule([0.1])
    with pytest.raises(EmptyMask):
        dif.noise_complex(bare, 1, sched, np.random.default_rng(0))


def test_noise_complex_context_bit_identical():
    c = make_synthetic_dataset(1, seed=0)[0]
    sched = dif.make_schedule(8, "linear", 0.05, 0.4)
    ctx = np.setdiff1d(np.arange(c.n), c.mask_indices)
    for t in (1, 4, 8):
        noised = dif.noise_complex(c, t, sched, np.random.default_rng(t))
        assert np.array_equal(noised.complex.res_types[ctx], c.res_types[ctx])
        assert np.array_equal(noised.complex.ca_pos[ctx], c.ca_pos[ctx])
        assert np.array_equal(noised.complex.orients[ctx], c.orients[ctx])


def test_noise_complex_type_marginals():
    # empirical mask-type frequencies match the closed-form marginal
    from scipy import stats
    c = make_synthetic_dataset(1, seed=0)[0]
    sched = dif.make_schedule(8, "linear", 0.05, 0.4)
    t = 5
    j = int(c.mask_indices[0])
    s0 = int(c.res_types[j])
    rng = np.random.default_rng(11)
    counts = np.zeros(20)
    n = 4000
    for _ in range(n):
        noised = dif.noise_complex(c, t, sched, rng)
        counts[noised.complex.res_types[j]] += 1
    expected = n * dif.forward_type(s0, t, sched)
    # merge all non-source letters; they share one probability
    merged_counts = np.array([counts[s0], counts.sum() - counts[s0]])
    merged_expected = np.array([expected[s0], expected.sum() - expected[s0]])
    _, p = stats.chisquare(merged_counts, merged_expected)
    assert p > 0.01


def test_noise_pair_consistency():
    # the pair (t-1, t) marginals both match their closed forms
    c = make_synthetic_dataset(1, seed=1)[0]
    sched = dif.make_schedule(8, "linear", 0.05, 0.4)
    t = 6
    rng = np.random.default_rng(13)
    j = int(c.mask_indices[2])
    s0 = int(c.res_types[j])
    hits_tm1 = 0
    hits_t = 0
    n = 3000
    for _ in range(n):
        nc_tm1, nc_t = dif.noise_complex_pair(c, t, sched, rng)
        assert nc_tm1.t == t - 1 and nc_t.t == t
        hits_tm1 += int(nc_tm1.complex.res_types[j] == s0)
        hits_t += int(nc_t.complex.res_types[j] == s0)
    p_tm1 = dif.forward_type(s0, t - 1, sched)[s0]
    p_t = dif.forward_type(s0, t, sched)[s0]
    for hits, p in ((hits_tm1, p_tm1), (hits_t, p_t)):
        se = np.sqrt(p * (1 - p) * n)
        assert abs(hits - n * p) < 4 * se


def test_whitening_roundtrip():
    c = make_synthetic_dataset(1, seed=2)[0]
    wh = dif.whitening_for(c)
    x = c.ca_pos[:5]
    assert np.abs(wh.unwhiten(wh.whiten(x)) - x).max() < 1e-10
    assert wh.scale > 1.0  # context spreads over tens of angstroms


# --- losses -----------------------------------------------------------------

class FakeOutput:
    def __init__(self, type_probs, pos_mean, orient_pred):
        self.type_probs = type_probs
        self.pos_mean = pos_mean
        self.orient_pred = orient_pred


def _perfect_prediction(c, nc_tm1, nc_t, sched):
    mask = c.mask_indices
    probs = np.stack([
        dif.type_posterior(int(nc_t.complex.res_types[j]),
                           int(c.res_types[j]), nc_t.t, sched)
        for j in mask])
    return FakeOutput(probs, nc_tm1.complex.ca_pos[mask].copy(),
                      c.orients[mask].copy())


def test_losses_zero_for_perfect_prediction():
    c = make_synthetic_dataset(1, seed=3)[0]
    sched = dif.make_schedule(8, "linear", 0.05, 0.4)
    nc_tm1, nc_t = dif.noise_complex_pair(c, 4, sched,
                                          np.random.default_rng(0))
    pred = _perfect_prediction(c, nc_tm1, nc_t, sched)
    out = dif.losses(pred, nc_t, nc_tm1, c, sched)
    assert out.l_type < 1e-12
    assert out.l_pos < 1e-20
    assert out.l_orient < 1e-20
    assert out.total < 1e-11


def test_losses_uniform_prediction_is_ln20():
    # KL(onehot || uniform) = ln 20 when the posterior is a point mass
    c = make_synthetic_dataset(1, seed=3)[0]
    sched = toy_schedule([0.3])
    nc_tm1, nc_t = dif.noise_complex_pair(c, 1, sched,
                                          np.random.default_rng(0))
    m = len(c.mask_indices)
    pred = _perfect_prediction(c, nc_tm1, nc_t, sched)
    pred.type_probs = np.full((m, 20), 1.0 / 20)
    out = dif.losses(pred, nc_t, nc_tm1, c, sched)
    assert abs(out.l_type - np.log(20)) < 1e-12


def test_losses_total_is_weighted_sum():
    c = make_synthetic_dataset(1, seed=4)[0]
    sched = dif.make_schedule(8, "linear", 0.05, 0.4)
    nc_tm1, nc_t = dif.noise_complex_pair(c, 3, sched,
                                          np.random.default_rng(1))
    rng = np.random.default_rng(2)
    m = len(c.mask_indices)
    probs = rng.dirichlet(np.ones(20), size=m)
    pred = FakeOutput(probs, nc_tm1.complex.ca_pos[c.mask_indices] + 0.5,
                      nc_t.complex.orients[c.mask_indices])
    lambdas = (10.0, 1.0, 1.0)
    out = dif.losses(pred, nc_t, nc_tm1, c, sched, lambdas)
    assert abs(out.total - (10 * out.l_type + out.l_pos + out.l_orient)) < 1e-9
    assert out.l_type >= 0 and out.l_pos >= 0 and out.l_orient >= 0


def test_losses_type_term_matches_brute_force_resum():
    c = make_synthetic_dataset(1, seed=5)[0]
    sched = dif.make_schedule(8, "linear", 0.05, 0.4)
    nc_tm1, nc_t = dif.noise_complex_pair(c, 5, sched,
                                          np.random.default_rng(3))
    rng = np.random.default_rng(4)
    mask = c.mask_indices
    probs = rng.dirichlet(np.ones(20), size=len(mask))
    pred = FakeOutput(probs, nc_tm1.complex.ca_pos[mask],
                      c.orients[mask])
    out = dif.losses(pred, nc_t, nc_tm1, c, sched)
    total = 0.0
    for k, j in enumerate(mask):
        post = dif.type_posterior(int(nc_t.complex.res_types[j]),
                                  int(c.res_types[j]), 5, sched)
        for r in range(20):
            if post[r] > 0:
                total += post[r] * (np.log(post[r]) - np.log(max(probs[k][r],
                                                                 1e-10)))
    assert abs(out.l_type - total / len(mask)) < 1e-12


def test_losses_shape_mismatch():
    c = make_synthetic_dataset(1, seed=5)[0]
    sched = toy_schedule([0.3])
    nc_tm1, nc_t = dif.noise_complex_pair(c, 1, sched,
                                          np.random.default_rng(0))
    pred = FakeOutput(np.full((3, 20), 0.05), np.zeros((3, 3)),
                      np.tile(np.eye(3), (3, 1, 1)))
    with pytest.raises(ShapeMismatch):
        dif.losses(pred, nc_t, nc_tm1, c, sched)
