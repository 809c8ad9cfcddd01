import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rpf.errors import ColdStartError, NumericalError
from rpf.events import EventHistory, SocialNetwork
from rpf.evaluation import (
    align_components,
    compensators,
    item_intensity_timeline,
    ks_exponential,
    mean_interevent_gap,
    ndcg_at_k,
    parameter_mae,
    predict_return_time,
    qq_pairs,
    qq_slope,
    random_ranks,
    rank_of,
    rank_order,
    recall_at_k,
    recommend,
    rescale,
    return_time_queries,
    returning_time_mae,
    sample_return_times,
    similarity_matrices,
    temporal_split,
    total_compensators,
)
from rpf.evaluation import test_ranks as held_out_ranks
from rpf.inference import fit, state_from_params
from rpf.kernels import TimeBasis, TriggerKernel
from rpf.model import Hyperparams, ModelConfig, ModelParams, sample_params_from_prior
from rpf.simulate import SimulationSpec, random_network, simulate

from instances import random_instance
from oracles import basis_integral_by_hours, brute_intensity, edge_of


def _params(theta, beta, tau, network):
    U, P = len(theta), len(beta)
    return ModelParams(
        theta=np.asarray(theta, float).reshape(U, -1, 1),
        beta=np.asarray(beta, float).reshape(P, -1, 1),
        tau=np.asarray(tau, float),
        eta=np.ones(U), xi=np.ones(P), mu=np.ones(U), edges=network.edges,
    )


def _constant_rate(rate, n_items=1):
    net = SocialNetwork.self_only(1)
    params = _params([[rate]], [[1.0 / n_items]] * n_items, [0.0], net)
    return ModelConfig("HRPF", 1), net, params


# -- recommendation --------------------------------------------------------------------


def test_static_ranking_is_factorization_ranking():
    net = SocialNetwork.self_only(2)
    params = _params([[1.0, 0.5], [0.2, 2.0]], [[0.3, 0.1], [2.0, 0.0], [0.5, 0.5], [0.0, 0.9]],
                     [0.0, 0.0], net)
    cfg = ModelConfig("HRPF", 2)
    h = EventHistory([0.1, 0.2], [0, 1], [2, 3], 1.0, 2, 4)
    rec = recommend(params, cfg, h, net, 0, 0.5)
    scores = params.theta[0, :, 0] @ params.beta[:, :, 0].T
    np.testing.assert_array_equal(rec.items, np.argsort(-scores, kind="stable"))
    assert np.all(np.diff(rec.scores) <= 0)


def test_recent_trigger_lifts_item_to_top():
    net = SocialNetwork.from_follows(2, [(1, 0)], self_loops=False)
    params = _params([[1.0], [1.0]], [[1.0], [0.9], [0.8]], [5.0], net)
    cfg = ModelConfig("SRPF", 1)
    h = EventHistory([0.9], [0], [2], 1.0, 2, 3)
    assert recommend(params, cfg, h, net, 1, 1.0, k=1).items[0] == 2
    # user 0 does not follow anyone, so the base ranking stands
    assert recommend(params, cfg, h, net, 0, 1.0, k=1).items[0] == 0


@pytest.mark.parametrize("seed", range(10))
def test_ranking_matches_direct_summation(seed):
    cfg, net, params, h = random_instance(seed, U=3, P=4, M=8)
    t = h.horizon
    for u in range(3):
        oracle = np.array([brute_intensity(params, cfg, h, net, u, p, t) for p in range(4)])
        rec = recommend(params, cfg, h, net, u, t)
        np.testing.assert_array_equal(rec.items, rank_order(oracle))
        np.testing.assert_allclose(rec.scores, oracle[rec.items], rtol=1e-12)


def test_ranking_is_scale_invariant():
    cfg, net, params, h = random_instance(4, U=3, P=4, M=8)
    scaled = replace(params, theta=params.theta * 3.0, beta=params.beta * 3.0, tau=params.tau * 9.0)
    for u in range(3):
        a = recommend(params, cfg, h, net, u, h.horizon)
        b = recommend(scaled, cfg, h, net, u, h.horizon)
        np.testing.assert_array_equal(a.items, b.items)


def test_recommend_errors_and_ties():
    cfg, net, params, h = random_instance(1, U=3, P=2)
    with pytest.raises(ColdStartError):
        recommend(params, cfg, h, net, 7, 1.0)
    with pytest.raises(ValueError):
        recommend(params, cfg, h, net, 0, 1.0, k=3)
    np.testing.assert_array_equal(rank_order(np.array([1.0, 2.0, 1.0, 2.0])), [1, 3, 0, 2])
    assert rank_of(np.array([1.0, 2.0, 1.0, 2.0]), 2) == 4


def test_recommend_accepts_variational_state():
    cfg, net, params, h = random_instance(2, U=3, P=3)
    a = recommend(params, cfg, h, net, 1, h.horizon)
    b = recommend(state_from_params(params), cfg, h, net, 1, h.horizon)
    np.testing.assert_array_equal(a.items, b.items)


# -- metrics ---------------------------------------------------------------------------


def test_metric_examples():
    assert recall_at_k([1, 1, 1], 5) == 1.0 and ndcg_at_k([1, 1, 1], 5) == 1.0
    assert recall_at_k([6, 9], 5) == 0.0 and ndcg_at_k([6, 9], 5) == 0.0
    assert recall_at_k([1, 3, 25], 20) == pytest.approx(2 / 3)
    assert ndcg_at_k([1, 3, 25], 20) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        recall_at_k([1], 0)
    with pytest.raises(ValueError):
        ndcg_at_k([1], -1)


@settings(max_examples=100)
@given(st.lists(st.integers(1, 60), min_size=1, max_size=40))
def test_metrics_monotone_in_k(ranks):
    ks = [1, 5, 10, 20, 50]
    rec = [recall_at_k(ranks, k) for k in ks]
    nd = [ndcg_at_k(ranks, k) for k in ks]
    assert all(b >= a for a, b in zip(rec, rec[1:]))
    assert all(b >= a for a, b in zip(nd, nd[1:]))
    assert all(n <= r + 1e-15 for n, r in zip(nd, rec))
    assert all(0 <= v <= 1 for v in rec + nd)


def test_random_ranks_uniform():
    r = random_ranks(20000, 10, seed=0)
    assert r.min() == 1 and r.max() == 10
    assert recall_at_k(r, 3) == pytest.approx(0.3, abs=0.02)


def test_returning_time_mae_examples():
    actual = np.array([1.0, 2.5, 4.0])
    assert returning_time_mae(actual, actual) == 0.0
    assert returning_time_mae(actual + 0.7, actual) == pytest.approx(0.7)
    pred = np.array([1.5, 2.0, 5.0])
    assert returning_time_mae(pred, actual) == pytest.approx((0.5 + 0.5 + 1.0) / 3)
    with pytest.raises(ValueError):
        returning_time_mae([], [])
    with pytest.raises(ValueError):
        returning_time_mae([1.0], [1.0, 2.0])


def test_temporal_split_and_held_out_ranks():
    cfg, net, params, h = random_instance(5, U=3, P=4, M=20, T=10.0)
    train, cutoff, mask = temporal_split(h, 0.8)
    assert cutoff == 8.0 and train.horizon == 8.0
    assert len(train) + mask.sum() == len(h)
    ranks = held_out_ranks(params, cfg, h, net, mask)
    for r, n in zip(ranks, np.flatnonzero(mask)):
        t, u, p = h[n]
        oracle = np.array([brute_intensity(params, cfg, h, net, u, q, t) for q in range(4)])
        assert r == rank_of(oracle, p)
    with pytest.raises(ValueError):
        temporal_split(h, 0.0)


def test_return_time_queries_and_gap():
    h = EventHistory([0.0, 1.0, 1.5, 3.0, 4.0], [0, 1, 0, 1, 0], [0, 0, 0, 0, 0], 5.0, 2, 1)
    mask = h.times > 2.0
    users, prev, nxt = return_time_queries(h, mask)
    np.testing.assert_array_equal(users, [1, 0])
    np.testing.assert_array_equal(prev, [1.0, 1.5])
    np.testing.assert_array_equal(nxt, [3.0, 4.0])
    # user gaps 1.5, 2.5 and 2.0
    assert mean_interevent_gap(h) == pytest.approx(2.0)


# -- returning time --------------------------------------------------------------------


def test_constant_rate_return_time():
    rate = 2.5
    cfg, net, params = _constant_rate(rate, n_items=3)
    h = EventHistory([], [], [], 10.0, 1, 3)
    n = 10000
    est = predict_return_time(params, cfg, h, net, 0, 1.0, n_samples=n, seed=0)
    assert abs(est - (1.0 + 1 / rate)) < 3 * (1 / rate) / math.sqrt(n)


def test_doubling_intensity_halves_wait():
    # with a constant rate, doubling it is a rescaling of time by one half
    net = SocialNetwork.self_only(1)
    cfg = ModelConfig("HRPF", 1)
    h = EventHistory([], [], [], 1.0, 1, 2)
    base = _params([[1.5]], [[0.4], [0.6]], [0.0], net)
    double = replace(base, theta=base.theta * 2.0)
    a = sample_return_times(base, cfg, h, net, 0, 1.0, 10000, seed=1) - 1.0
    b = sample_return_times(double, cfg, h, net, 0, 1.0, 10000, seed=2) - 1.0
    se = math.sqrt(a.var() / 4 / len(a) + b.var() / len(b))
    assert abs(a.mean() / 2 - b.mean()) < 3 * se
    assert abs(b.mean() - 1.0 / 3.0) < 4 * b.std() / math.sqrt(len(b))


def test_tiny_base_rate_gives_long_finite_wait():
    net = SocialNetwork.self_only(1)
    params = _params([[1e-6]], [[1.0]], [0.5], net)
    cfg = ModelConfig("HRPF", 1)
    h = EventHistory([0.9], [0], [0], 1.0, 1, 1)
    s = sample_return_times(params, cfg, h, net, 0, 1.0, 200, seed=0)
    assert np.all(np.isfinite(s))
    assert np.median(s) > 1000.0


def test_no_intensity_never_returns():
    net = SocialNetwork.self_only(1)
    params = _params([[0.0]], [[1.0]], [0.5], net)
    cfg = ModelConfig("HRPF", 1)
    empty = EventHistory([], [], [], 1.0, 1, 1)
    assert np.all(np.isinf(sample_return_times(params, cfg, empty, net, 0, 1.0, 10, seed=0)))
    # pure excitation runs out: some samples fire, the rest never do
    h = EventHistory([0.9], [0], [0], 1.0, 1, 1)
    s = sample_return_times(params, cfg, h, net, 0, 1.0, 4000, seed=0)
    fired = np.isfinite(s).mean()
    lam = 0.5 * math.exp(-cfg.kernel.decay * 0.1)
    assert fired == pytest.approx(1 - math.exp(-lam / cfg.kernel.decay), abs=0.03)


def test_return_time_horizon_and_ceiling():
    cfg, net, params = _constant_rate(0.1)
    h = EventHistory([], [], [], 1.0, 1, 1)
    s = sample_return_times(params, cfg, h, net, 0, 0.0, 2000, seed=0, horizon=1.0)
    assert np.isinf(s).mean() == pytest.approx(math.exp(-0.1), abs=0.03)
    assert predict_return_time(params, cfg, h, net, 0, 0.0, 2000, seed=0, horizon=1.0) < 1.0
    cfg, net, params = _constant_rate(1e13)
    with pytest.raises(NumericalError):
        sample_return_times(params, cfg, h, net, 0, 0.0, 5, seed=0)
    with pytest.raises(ValueError):
        sample_return_times(params, cfg, h, net, 0, 0.0, 0)


def test_return_time_shift_equivariant():
    cfg, net, params, h = random_instance(6, U=2, P=2, M=6, dynamic=False)
    c = 3.25
    shifted = EventHistory(h.times + c, h.users, h.items, h.horizon + c, 2, 2)
    a = predict_return_time(params, cfg, h, net, 1, h.horizon, 500, seed=7)
    b = predict_return_time(params, cfg, shifted, net, 1, h.horizon + c, 500, seed=7)
    assert b - a == pytest.approx(c, abs=1e-9)


def test_return_time_deterministic_and_per_item():
    cfg, net, params, h = random_instance(7, U=2, P=3, M=6)
    a = predict_return_time(params, cfg, h, net, 0, h.horizon, 300, seed=11)
    b = predict_return_time(params, cfg, h, net, 0, h.horizon, 300, seed=11)
    assert a == b
    # a single item returns no sooner than the user as a whole, on average
    items = [predict_return_time(params, cfg, h, net, 0, h.horizon, 3000, seed=3, item=p) for p in range(3)]
    whole = predict_return_time(params, cfg, h, net, 0, h.horizon, 3000, seed=3)
    assert min(items) > whole


def test_dynamic_return_time_matches_exact_mean():
    # one-hour-per-day window of rate 24: the wait from midnight is about 9/24 days
    basis = TimeBasis("hour", "constant")
    cfg = ModelConfig("DRPF", 1, basis)
    net = SocialNetwork.self_only(1)
    theta = np.zeros((1, 1, 24))
    theta[0, 0, 9] = 240.0
    params = ModelParams(theta=theta, beta=np.ones((1, 1, 1)), tau=np.zeros(1),
                         eta=np.ones(1), xi=np.ones(1), mu=np.ones(1), edges=net.edges)
    h = EventHistory([], [], [], 1.0, 1, 1)
    s = sample_return_times(params, cfg, h, net, 0, 0.0, 4000, seed=0)
    # within the window the wait is exponential with rate 240 per day
    window = 1.0 / 24.0
    p_miss = math.exp(-240.0 * window)
    inside = 9 / 24 + (1 - (1 + 240 * window) * p_miss) / 240.0 / (1 - p_miss)
    assert np.all(np.floor(np.mod(s, 1.0) * 24) == 9)
    assert s.mean() == pytest.approx(inside, abs=3 * s.std() / math.sqrt(len(s)) + 1e-3)


# -- time-change diagnostics -------------------------------------------------------------


def test_rescale_homogeneous_example():
    cfg, net, params = _constant_rate(1.7)
    h = EventHistory([0.0, 1.0, 2.0], [0, 0, 0], [0, 0, 0], 2.5, 1, 1)
    r = rescale(params, cfg, h, net)
    np.testing.assert_allclose(r.values, [1.7, 1.7])
    np.testing.assert_array_equal(r.pairs, [[0, 0], [0, 0]])
    np.testing.assert_allclose(r.pooled, [0.0, 1.7, 1.7], atol=1e-15)


def _oracle_compensator(params, cfg, h, net, u, p, t):
    """Base part by walking calendar hours, excitation part by adaptive quadrature."""
    from scipy.integrate import quad

    base = sum(params.theta[u, k, i] * params.beta[p, k, j] * basis_integral_by_hours(cfg.basis, i, j, 0.0, t)
               for k in range(params.theta.shape[1])
               for i in range(cfg.basis.n_user) for j in range(cfg.basis.n_item))
    trig = 0.0
    for n in range(len(h)):
        tn, v, q = h[n]
        e = edge_of(net, v, u)
        if q == p and tn < t and e is not None:
            trig += params.tau[e] * quad(lambda s: math.exp(-cfg.kernel.decay * (s - tn)), tn, t,
                                         epsabs=1e-13)[0]
    return base + trig


@pytest.mark.parametrize("seed", range(4))
def test_compensators_match_oracle(seed):
    cfg, net, params, h = random_instance(seed, U=2, P=2, M=6)
    lam = compensators(params, cfg, h, net)
    for n in range(len(h)):
        t, u, p = h[n]
        assert lam[n] == pytest.approx(_oracle_compensator(params, cfg, h, net, u, p, t), rel=1e-9, abs=1e-12)
    ends = total_compensators(params, cfg, h, net)
    for u in range(2):
        for p in range(2):
            expected = _oracle_compensator(params, cfg, h, net, u, p, h.horizon)
            assert ends[u, p] == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_qq_slope_and_ks_on_exponential_samples():
    rng = np.random.default_rng(0)
    x = rng.exponential(1.0, 20000)
    assert qq_slope(x) == pytest.approx(1.0, abs=0.05)
    assert ks_exponential(x).pvalue > 0.01
    assert qq_slope(2.0 * x) == pytest.approx(2.0, abs=0.1)
    theo, emp = qq_pairs(x)
    assert theo[49] == pytest.approx(math.log(2.0))
    assert len(emp) == 99


# -- qualitative analyses ----------------------------------------------------------------


def test_similarity_examples():
    net = SocialNetwork.self_only(4)
    params = _params([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], [[1.0, 1.0]] * 3,
                     np.zeros(4), net)
    h = EventHistory([0.1, 0.2, 0.3, 0.4, 0.5], [0, 0, 1, 1, 2], [0, 1, 1, 0, 2], 1.0, 4, 3)
    learned, empirical = similarity_matrices(params, h)
    np.testing.assert_allclose(learned, params.theta[:, :, 0] @ params.theta[:, :, 0].T)
    assert empirical[0, 1] == 1.0  # identical sets
    assert empirical[0, 2] == 0.0  # disjoint sets
    assert np.all(empirical[3] == 0.0) and np.all(empirical[:, 3] == 0.0)  # no events
    np.testing.assert_array_equal(np.diag(empirical), [1, 1, 1, 0])


def test_similarity_tracks_clustered_preferences():
    # two user groups, each preferring its own half of the items
    U, P, K = 20, 20, 2
    theta = np.full((U, K), 0.02)
    theta[:10, 0] = theta[10:, 1] = 1.0
    beta = np.full((P, K), 0.02)
    beta[:10, 0] = beta[10:, 1] = 1.0
    net = SocialNetwork.self_only(U)
    truth = _params(theta, beta, np.zeros(U), net)
    cfg = ModelConfig("HRPF", K, hyper=Hyperparams(tau_shape=0.1, mu_shape=5, mu_rate=50))
    h = simulate(SimulationSpec(cfg, truth, net, 1.0, seed=0)).history
    res = fit(h, net, cfg, max_iter=200, seed=0)
    learned, empirical = similarity_matrices(res.state, h)
    iu = np.triu_indices(U, 1)
    rho = stats.spearmanr(learned[iu], empirical[iu]).statistic
    assert rho > 0.3


def test_timeline_examples():
    net = SocialNetwork.from_follows(2, [(1, 0)])
    params = _params([[1.0], [2.0]], [[0.5], [1.5]], np.zeros(net.n_edges), net)
    cfg = ModelConfig("SRPF", 1, kernel=TriggerKernel(1.3))
    empty = EventHistory([], [], [], 5.0, 2, 2)
    grid = np.linspace(0, 5, 11)
    np.testing.assert_allclose(item_intensity_timeline(params, cfg, empty, net, 1, grid), 4.5)
    # a burst on item 0 lifts the timeline, which then decays at the kernel rate
    tau = np.full(net.n_edges, 0.4)
    bursty = replace(params, tau=tau)
    h = EventHistory([1.0, 1.0], [0, 0], [0, 0], 5.0, 2, 2)
    line = item_intensity_timeline(bursty, cfg, h, net, 0, np.array([0.5, 2.0, 3.0]))
    excess = line - 1.5
    assert excess[0] == pytest.approx(0.0)
    assert excess[2] / excess[1] == pytest.approx(math.exp(-1.3), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_timeline_matches_pointwise_oracle(seed):
    cfg, net, params, h = random_instance(seed, U=3, P=2, M=8)
    grid = np.linspace(0, h.horizon, 13)
    line = item_intensity_timeline(params, cfg, h, net, 1, grid)
    oracle = [sum(brute_intensity(params, cfg, h, net, u, 1, t) for u in range(3)) for t in grid]
    np.testing.assert_allclose(line, oracle, rtol=1e-12)


# -- parameter recovery ------------------------------------------------------------------


def test_alignment_undoes_permutation_and_scale():
    cfg = ModelConfig("DSRPF", 3, TimeBasis("hour", "weekday"))
    net = random_network(6, 2.0, seed=0)
    truth = sample_params_from_prior(cfg, net, 5, seed=1)
    perm = [2, 0, 1]
    c = np.array([2.0, 0.5, 3.0])
    fitted = replace(truth, theta=truth.theta[:, perm] * c[None, :, None],
                     beta=truth.beta[:, perm] / c[None, :, None])
    aligned = align_components(fitted, truth)
    np.testing.assert_allclose(aligned.theta, truth.theta, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(aligned.beta, truth.beta, rtol=1e-10, atol=1e-14)
    mae = parameter_mae(fitted, truth)
    assert max(mae.values()) < 1e-10
    assert parameter_mae(fitted, truth, align=False)["theta"] > 0
