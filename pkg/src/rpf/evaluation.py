"""Recommendation, returning-time prediction, ranking metrics and fit diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .errors import ColdStartError, NumericalError
from .events import EventHistory, SocialNetwork
from .inference import VariationalState
from .model import ModelConfig, ModelParams, excitation_scan, user_intensities


def as_params(model) -> ModelParams:
    """Point values to score with: variational means for a state."""
    if isinstance(model, VariationalState):
        return model.to_params()
    return model


def _check_user(params: ModelParams, u: int):
    if not 0 <= u < params.n_users:
        raise ColdStartError(f"user {u} has no learned factors")


@dataclass(frozen=True, eq=False)
class RecommendationList:
    user: int
    time: float
    items: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.items)


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Items by decreasing score; ties go to the lower item index."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores)))


def rank_of(scores: np.ndarray, item: int) -> int:
    """1-based position of ``item`` in :func:`rank_order`."""
    s = scores[item]
    return int(np.sum(scores > s) + np.sum(scores[:item] == s) + 1)


def recommend(model, config: ModelConfig, history: EventHistory, network: SocialNetwork,
              u: int, t: float, k: int | None = None) -> RecommendationList:
    """Top-``k`` items for user ``u`` at time ``t`` by expected intensity."""
    params = as_params(model)
    _check_user(params, u)
    scores = user_intensities(params, config, history, network, u, t)
    order = rank_order(scores)
    if k is not None:
        if not 0 < k <= params.n_items:
            raise ValueError(f"k must lie in [1, {params.n_items}]")
        order = order[:k]
    return RecommendationList(u, t, order, scores[order])


# -- ranking metrics -------------------------------------------------------------


def _check_k(k):
    if k <= 0:
        raise ValueError("k must be positive")


def recall_at_k(ranks, k: int) -> float:
    """Share of test events whose true item is within the top ``k`` (1-based ranks)."""
    _check_k(k)
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k)) if ranks.size else float("nan")


def ndcg_at_k(ranks, k: int) -> float:
    """Mean of ``1 / log2(1 + rank)`` over test events ranked within the top ``k``."""
    _check_k(k)
    ranks = np.asarray(ranks, dtype=np.float64)
    if not ranks.size:
        return float("nan")
    gain = np.where(ranks <= k, 1.0 / np.log2(1.0 + ranks), 0.0)
    return float(gain.mean())


def temporal_split(history: EventHistory, fraction: float = 0.8):
    """Split at ``fraction`` of the horizon: (training history, cutoff, test mask)."""
    if not 0 < fraction <= 1:
        raise ValueError("split fraction must lie in (0, 1]")
    cutoff = fraction * history.horizon
    train = history.truncate(cutoff)
    return train, cutoff, history.times > cutoff


def test_ranks(model, config, history, network, test_mask) -> np.ndarray:
    """Rank of the true item for each test event.

    Scores for event ``n`` use every event strictly before ``t_n``: the
    training history plus earlier test events.
    """
    params = as_params(model)
    idx = np.flatnonzero(test_mask)
    ranks = np.empty(len(idx), dtype=np.int64)
    for r, n in enumerate(idx):
        t, u, p = history[n]
        scores = user_intensities(params, config, history, network, u, t)
        ranks[r] = rank_of(scores, p)
    return ranks


test_ranks.__test__ = False  # not a pytest test despite the name


def random_ranks(n: int, n_items: int, seed=None) -> np.ndarray:
    """Ranks of the true item under uniformly random item orderings."""
    rng = np.random.default_rng(seed)
    return rng.integers(1, n_items + 1, size=n)


# -- returning time ----------------------------------------------------------------


class _ReturnProcess:
    """Expected intensity of a user (or user-item pair) after ``t0`` with history frozen."""

    def __init__(self, params, config, history, network, u, t0, item=None):
        basis = config.basis
        self.decay = config.kernel.decay
        self.t0 = t0
        self.basis = basis
        past = history.times <= t0
        eidx = network.edge_index[history.users[past], u]
        ok = eidx >= 0
        if item is not None:
            ok &= history.items[past] == item
        lag = t0 - history.times[past][ok]
        self.excite = float(np.sum(params.tau[eidx[ok]] * np.exp(-self.decay * lag)))
        a = np.einsum("ki,si->sk", params.theta[u], basis.user_table)
        beta = params.beta if item is None else params.beta[item:item + 1]
        b = np.einsum("pkj,sj->sk", beta, basis.item_table)
        self.slot_rate = (a * b).sum(axis=1)  # (168,)
        self.base_max = float(self.slot_rate.max())

    def base(self, t):
        if self.basis.is_static:
            return np.full(np.shape(t), self.slot_rate[0])
        return self.slot_rate[self.basis.slot(t)]

    def trigger(self, t):
        return self.excite * np.exp(-self.decay * (t - self.t0))


def sample_return_times(model, config, history, network, u, t0, n_samples=1000, seed=None,
                        item=None, horizon=None, ceiling=1e12, max_rounds=1_000_000) -> np.ndarray:
    """First event times after ``t0`` drawn by thinning, one per sample.

    Samples that can never fire (no base rate and exhausted excitation) are
    ``inf``, as are samples beyond ``horizon`` when one is given.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    params = as_params(model)
    _check_user(params, u)
    proc = _ReturnProcess(params, config, history, network, u, t0, item)
    rng = np.random.default_rng(seed)
    t = np.full(n_samples, float(t0))
    done = np.zeros(n_samples, dtype=bool)
    if proc.base_max <= 0 and proc.excite <= 0:
        return np.full(n_samples, np.inf)
    for _ in range(max_rounds):
        live = np.flatnonzero(~done)
        if not live.size:
            break
        tl = t[live]
        bound = proc.base_max + proc.trigger(tl)
        if np.any(bound > ceiling):
            raise NumericalError(f"return-time intensity {bound.max():.3g} exceeds the ceiling")
        if proc.base_max <= 0:
            # pure decay: the remaining expected count is bound / decay
            dead = bound / proc.decay < 1e-14
            t[live[dead]] = np.inf
            done[live[dead]] = True
            live, tl, bound = live[~dead], tl[~dead], bound[~dead]
        cand = tl + rng.exponential(1.0, size=live.size) / bound
        lam = proc.base(cand) + proc.trigger(cand)
        accept = rng.random(live.size) * bound <= lam
        t[live] = cand
        done[live[accept]] = True
        if horizon is not None:
            late = cand > horizon
            t[live[late]] = np.inf
            done[live[late]] = True
    else:
        raise NumericalError("thinning did not terminate")
    return t


def predict_return_time(model, config, history, network, u, t0, n_samples=1000, seed=None,
                        item=None, horizon=None) -> float:
    """Expected time of the next event of user ``u`` (or of pair ``(u, item)``) after ``t0``.

    With ``horizon``, the expectation is conditional on the return falling
    before it, which matches held-out data where only such returns are
    observed. Returns ``inf`` when no sample returns.
    """
    samples = sample_return_times(model, config, history, network, u, t0, n_samples, seed, item,
                                  horizon)
    finite = samples[np.isfinite(samples)]
    if horizon is None:
        return float(np.mean(samples))
    return float(np.mean(finite)) if finite.size else float("inf")


def returning_time_mae(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ValueError("predictions and ground truth are not aligned")
    if not predicted.size:
        raise ValueError("returning_time_mae needs at least one prediction")
    return float(np.mean(np.abs(predicted - actual)))


def return_time_queries(history: EventHistory, test_mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(user, previous event time, actual time)`` for each test event with a predecessor."""
    users, t_prev, t_next = [], [], []
    last = {}
    for n, (t, u, _) in enumerate(history):
        if test_mask[n] and u in last:
            users.append(u)
            t_prev.append(last[u])
            t_next.append(t)
        last[u] = t
    return np.array(users, dtype=np.int64), np.array(t_prev), np.array(t_next)


def mean_interevent_gap(history: EventHistory) -> float:
    """Mean gap between consecutive events of the same user, pooled over users."""
    gaps = []
    for u in range(history.n_users):
        t = history.times[history.users == u]
        if len(t) > 1:
            gaps.append(np.diff(t))
    return float(np.concatenate(gaps).mean()) if gaps else float("nan")


# -- time-change diagnostics ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RescaledIntervals:
    """Compensator increments between consecutive events of each user-item process.

    ``values`` holds the complete intervals of every process. Pooling those
    directly over-represents short gaps when a process sees few events
    before the horizon, so ``pooled`` instead lays the rescaled timelines of
    all processes end to end. Under the generating intensity each timeline
    is a unit-rate Poisson process on ``[0, Lambda_up(T)]`` and the
    concatenation is one unit-rate Poisson process, whose gaps are Exp(1).
    """

    values: np.ndarray
    pairs: np.ndarray  # (n, 2) user, item of each interval
    pooled: np.ndarray

    def __len__(self):
        return len(self.values)


def compensators(model, config, history, network) -> np.ndarray:
    """``Lambda_{u_n p_n}(t_n)`` for every event, in closed form."""
    params = as_params(model)
    F = config.basis.integral_between(np.zeros(len(history)), history.times)  # (M, I, J)
    base = np.einsum("nki,nij,nkj->n", params.theta[history.users], F, params.beta[history.items])
    _, trig = excitation_scan(params, history, network, config.kernel)
    return base + trig


def total_compensators(model, config, history, network) -> np.ndarray:
    """``U x P`` matrix of ``Lambda_up(T)`` at the horizon."""
    params = as_params(model)
    F = config.basis.integral(history.horizon)
    out = np.einsum("uki,ij,pkj->up", params.theta, F, params.beta)
    g = config.kernel.integral(history.horizon - history.times)
    # S[v, p]: kernel mass left by v's events on p
    S = np.zeros_like(out)
    np.add.at(S, (history.users, history.items), g)
    np.add.at(out, network.edges[:, 1], params.tau[:, None] * S[network.edges[:, 0]])
    return out


def rescale(model, config, history, network) -> RescaledIntervals:
    lam = compensators(model, config, history, network)
    P = history.n_items
    key = history.users * P + history.items
    order = np.lexsort((np.arange(len(history)), key))
    same = key[order][1:] == key[order][:-1]
    values = (lam[order][1:] - lam[order][:-1])[same]
    k = key[order][1:][same]
    ends = total_compensators(model, config, history, network).ravel()
    offset = np.concatenate([[0.0], np.cumsum(ends)[:-1]])
    line = np.sort(offset[key] + lam)
    pooled = np.diff(line, prepend=0.0)
    return RescaledIntervals(values, np.stack([k // P, k % P], axis=1), pooled)


QQ_PROBS = np.arange(1, 100) / 100.0


def qq_pairs(values, probs=QQ_PROBS):
    """Exp(1) quantiles against empirical quantiles at the given probabilities."""
    theoretical = -np.log1p(-np.asarray(probs))
    empirical = np.quantile(np.asarray(values), probs)
    return theoretical, empirical


def qq_slope(values, probs=QQ_PROBS) -> float:
    """Least-squares slope of the QQ line; 1 when the intervals are Exp(1)."""
    x, y = qq_pairs(values, probs)
    return float(np.polyfit(x, y, 1)[0])


def ks_exponential(values):
    """Kolmogorov-Smirnov test of the rescaled intervals against Exp(1)."""
    return stats.kstest(np.asarray(values), "expon")


# -- qualitative analyses -------------------------------------------------------------


def similarity_matrices(model, history: EventHistory):
    """Learned ``E[theta_u] . E[theta_v]`` and empirical Jaccard similarity of item sets."""
    params = as_params(model)
    theta = params.theta.sum(axis=2)  # (U, K), summed over user-basis functions
    learned = theta @ theta.T
    consumed = (history.pair_counts > 0).astype(np.float64)
    inter = consumed @ consumed.T
    sizes = consumed.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        empirical = np.where(union > 0, inter / union, 0.0)
    return learned, empirical


def item_intensity_timeline(model, config, history, network, p: int, grid) -> np.ndarray:
    """``sum_u E[lambda_up(t)]`` on each grid time."""
    params = as_params(model)
    grid = np.asarray(grid, dtype=np.float64)
    theta_t = np.einsum("uki,gi->gk", params.theta, config.basis.user_values(grid))
    beta_t = np.einsum("kj,gj->gk", params.beta[p], config.basis.item_values(grid))
    base = (theta_t * beta_t).sum(axis=1)
    on_p = history.items == p
    te = history.times[on_p]
    w = params.out_weight()[history.users[on_p]]
    lag = grid[:, None] - te[None, :]
    trig = np.where(lag > 0, w[None, :] * np.exp(-config.kernel.decay * np.maximum(lag, 0.0)), 0.0)
    return base + trig.sum(axis=1)


# -- parameter recovery -----------------------------------------------------------------


def align_components(fitted: ModelParams, truth: ModelParams) -> ModelParams:
    """Permute and rescale latent components of ``fitted`` to best match ``truth``.

    The intensity is unchanged by permuting components or by trading a
    factor ``c`` between ``theta_k`` and ``beta_k``. Components are matched
    on their rank-one rate matrices, then each ``c`` is set so that theta and
    beta carry the same share of scale as in ``truth``.
    """
    ft, fb = fitted.theta.sum(axis=2), fitted.beta.sum(axis=2)  # (U, K), (P, K)
    tt, tb = truth.theta.sum(axis=2), truth.beta.sum(axis=2)
    K = ft.shape[1]
    cost = np.empty((K, K))
    for a in range(K):
        ra = np.outer(tt[:, a], tb[:, a])
        for b in range(K):
            cost[a, b] = np.abs(ra - np.outer(ft[:, b], fb[:, b])).sum()
    _, perm = linear_sum_assignment(cost)
    theta = fitted.theta[:, perm, :].copy()
    beta = fitted.beta[:, perm, :].copy()
    for k in range(K):
        st, sb = theta[:, k].sum(), beta[:, k].sum()
        if st > 0 and sb > 0:
            c = math.sqrt((sb * truth.theta[:, k].sum()) / (st * truth.beta[:, k].sum()))
            theta[:, k] *= c
            beta[:, k] /= c
    return ModelParams(theta, beta, fitted.tau, fitted.eta, fitted.xi, fitted.mu, fitted.edges)


def parameter_mae(fitted, truth: ModelParams, align: bool = True) -> dict:
    """Mean absolute error of theta, beta and tau against ground truth."""
    fitted = as_params(fitted)
    if align:
        fitted = align_components(fitted, truth)
    return {
        "theta": float(np.mean(np.abs(fitted.theta - truth.theta))),
        "beta": float(np.mean(np.abs(fitted.beta - truth.beta))),
        "tau": float(np.mean(np.abs(fitted.tau - truth.tau))),
    }
