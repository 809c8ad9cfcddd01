"""Ogata thinning for the superposed user-item process, and synthetic setups."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigError, SimulationExplosion
from .events import EventHistory, SocialNetwork
from .model import ModelConfig, ModelParams, branching_ratio

@dataclass(frozen=True, eq=False)
class SimulationSpec:
    config: ModelConfig
    params: ModelParams
    network: SocialNetwork
    horizon: float
    seed: int | None = None
    max_events: int | None = None
    intensity_ceiling: float = 1e9

    def __post_init__(self):
        if not self.horizon >= 0:
            raise ConfigError("horizon must be non-negative")
        if self.max_events is not None and self.max_events <= 0:
            raise ConfigError("max_events must be positive")


@dataclass(frozen=True, eq=False)
class SimulationResult:
    history: EventHistory
    truncated: bool
    n_candidates: int

    @property
    def acceptance_rate(self) -> float:
        return len(self.history) / self.n_candidates if self.n_candidates else float("nan")


class _BaseSampler:
    """Totals and cumulative tables of the intrinsic rate per hour-of-week slot."""

    def __init__(self, params: ModelParams, config: ModelConfig):
        basis = config.basis
        self.basis = basis
        self.static = basis.is_static
        H = basis.user_table[:1] if self.static else basis.user_table
        L = basis.item_table[:1] if self.static else basis.item_table
        a = np.einsum("uki,si->suk", params.theta, H)  # (S, U, K)
        b = np.einsum("pkj,sj->spk", params.beta, L)  # (S, P, K)
        self.comp = a.sum(axis=1) * b.sum(axis=1)  # (S, K) mass per component
        self.total = self.comp.sum(axis=1)  # (S,)
        self.max_total = float(self.total.max()) if self.total.size else 0.0
        self.comp_cum = np.cumsum(self.comp, axis=1)
        self.user_cum = np.cumsum(a, axis=1).transpose(0, 2, 1).copy()  # (S, K, U)
        self.item_cum = np.cumsum(b, axis=1).transpose(0, 2, 1).copy()  # (S, K, P)

    def slot(self, t: float) -> int:
        if self.static:
            return 0
        return int(self.basis.slot(t))

    def draw(self, s: int, rng) -> tuple[int, int]:
        cc = self.comp_cum[s]
        k = min(int(np.searchsorted(cc, rng.random() * cc[-1], side="right")), len(cc) - 1)
        uc, pc = self.user_cum[s, k], self.item_cum[s, k]
        u = min(int(np.searchsorted(uc, rng.random() * uc[-1], side="right")), len(uc) - 1)
        p = min(int(np.searchsorted(pc, rng.random() * pc[-1], side="right")), len(pc) - 1)
        return u, p


# largest tolerated growth of the mean intensity over the horizon
MAX_GROWTH = 1e6


def _check_stability(params: ModelParams, config: ModelConfig, horizon: float):
    """Warn when the outflow proxy reaches 1; abort when the process blows up on the horizon.

    ``max_v sum_u tau[v -> u] / decay`` bounds the spectral radius of the
    offspring matrix from above, so only then is the exact radius computed.
    A supercritical process is still finite on a finite horizon: its mean
    intensity grows like ``exp(decay * (rho - 1) * t)``, and only growth
    beyond ``MAX_GROWTH`` is treated as an explosion.
    """
    outflow = params.out_weight()
    proxy = float(outflow.max()) / config.kernel.decay if len(outflow) else 0.0
    if proxy < 1.0:
        return
    rho = branching_ratio(params, config.kernel)
    growth = config.kernel.decay * (rho - 1.0) * horizon
    if growth > math.log(MAX_GROWTH):
        raise SimulationExplosion(
            f"branching ratio {rho:.3g} >= 1 (outflow proxy {proxy:.3g}); the mean "
            f"intensity grows by e^{growth:.3g} over the horizon"
        )
    warnings.warn(f"influence outflow proxy {proxy:.3g} >= 1 (branching ratio {rho:.3g})",
                  RuntimeWarning, stacklevel=3)


def simulate(spec: SimulationSpec) -> SimulationResult:
    """Simulate events on ``[0, horizon)`` with Ogata's thinning.

    The superposition of all user-item processes is thinned on a single
    clock. Between accepted events the excitation only decays, so the bound
    ``max base rate + current excitation`` dominates the total intensity
    until the next acceptance; it is refreshed after every candidate. An
    accepted event is attributed to the base component or to a past event
    in proportion to their current contributions.
    """
    config, params, network = spec.config, spec.params, spec.network
    params.check_network(network)
    _check_stability(params, config, spec.horizon)
    rng = np.random.default_rng(spec.seed)
    decay = config.kernel.decay
    T = spec.horizon
    U, P = params.n_users, params.n_items

    base = _BaseSampler(params, config)
    outw = params.out_weight()
    # followers of each source user with cumulative influence, CSR layout
    order = np.argsort(network.sources, kind="stable")
    fol_start = np.searchsorted(network.sources[order], np.arange(U + 1))
    fol_users = network.targets[order]
    fol_cum = np.zeros(len(order))
    for v in range(U):
        a, b = fol_start[v], fol_start[v + 1]
        fol_cum[a:b] = np.cumsum(params.tau[order[a:b]])

    # decayed event mass per source user and per (source user, item), each
    # stored as a level valid at its stamp; used to attribute triggered events
    user_level = np.zeros(U)
    user_stamp = np.zeros(U)
    pair_level = np.zeros((U, P))
    pair_stamp = np.zeros((U, P))

    cap = 1024
    ev_t = np.empty(cap)
    ev_u = np.empty(cap, dtype=np.int64)
    ev_p = np.empty(cap, dtype=np.int64)
    n = 0

    t = 0.0
    excite, excite_at = 0.0, 0.0
    n_candidates = 0
    truncated = False
    while True:
        z = excite * math.exp(-decay * (t - excite_at))
        bound = base.max_total + z
        if bound <= 0.0:
            break
        if bound > spec.intensity_ceiling:
            raise SimulationExplosion(f"total intensity {bound:.3g} exceeds the ceiling at t={t:.6g}")
        t = t + rng.exponential(1.0 / bound)
        if t >= T:
            break
        n_candidates += 1
        z = excite * math.exp(-decay * (t - excite_at))
        s = base.slot(t)
        base_now = base.total[s]
        lam = base_now + z
        if rng.random() * bound > lam:
            continue
        if spec.max_events is not None and n >= spec.max_events:
            truncated = True
            break
        if rng.random() * lam < base_now:
            u, p = base.draw(s, rng)
        else:
            # source user v with weight outw[v] * sum_m g(t_m, t), then the
            # item of v's events with weight sum_m g(t_m, t), then a follower
            wv = np.cumsum(outw * user_level * np.exp(-decay * (t - user_stamp)))
            v = min(int(np.searchsorted(wv, rng.random() * wv[-1], side="right")), U - 1)
            wp = np.cumsum(pair_level[v] * np.exp(-decay * (t - pair_stamp[v])))
            p = min(int(np.searchsorted(wp, rng.random() * wp[-1], side="right")), P - 1)
            a, b = fol_start[v], fol_start[v + 1]
            fc = fol_cum[a:b]
            u = int(fol_users[a + min(int(np.searchsorted(fc, rng.random() * fc[-1], side="right")), b - a - 1)])
        if n == cap:
            cap *= 2
            ev_t, ev_u, ev_p = (np.resize(x, cap) for x in (ev_t, ev_u, ev_p))
        ev_t[n], ev_u[n], ev_p[n] = t, u, p
        n += 1
        user_level[u] = user_level[u] * math.exp(-decay * (t - user_stamp[u])) + 1.0
        user_stamp[u] = t
        pair_level[u, p] = pair_level[u, p] * math.exp(-decay * (t - pair_stamp[u, p])) + 1.0
        pair_stamp[u, p] = t
        excite = z + outw[u]
        excite_at = t
    history = EventHistory(ev_t[:n], ev_u[:n], ev_p[:n], T, U, P)
    return SimulationResult(history, truncated, n_candidates)


def random_network(n_users: int, avg_degree: float, seed=None, self_loops=True) -> SocialNetwork:
    """Directed Erdos-Renyi follow graph with edge probability ``avg_degree / (U - 1)``."""
    if not 0 <= avg_degree < max(n_users, 1):
        raise ConfigError("avg_degree must lie in [0, n_users)")
    rng = np.random.default_rng(seed)
    if n_users < 2 or avg_degree == 0:
        return SocialNetwork(n_users, np.zeros((0, 2), np.int64), self_loops)
    prob = avg_degree / (n_users - 1)
    mask = rng.random((n_users, n_users)) < prob
    np.fill_diagonal(mask, False)
    edges = np.argwhere(mask)
    return SocialNetwork(n_users, edges, self_loops)


def _mean_rate_system(params: ModelParams, config: ModelConfig):
    """Linear ODE for the expected excitation summed over items.

    With ``K[v, u] = tau[v -> u]`` and total base rates ``b`` per user, the
    expected excitation ``y`` obeys ``y' = (K^T - decay I) y + K^T b`` from
    ``y(0) = 0``; the expected cumulative count grows at ``sum(b) + sum(y)``.
    Dynamic bases use the week-averaged base rate.
    """
    basis = config.basis
    week = 7.0 * basis.units_per_day
    F = basis.integral(week) / week
    b = np.einsum("uki,ij,pkj->u", params.theta, F, params.beta)
    K = params.tau_matrix()
    M = K.T - config.kernel.decay * np.eye(params.n_users)
    f = K.T @ b
    b_tot = float(b.sum())

    def rhs(_, state):
        y = state[:-1]
        return np.append(M @ y + f, b_tot + y.sum())

    return rhs, b_tot


def expected_event_count(params: ModelParams, config: ModelConfig, horizon: float) -> float:
    """Expected number of events on ``[0, horizon)`` starting from an empty history."""
    rhs, _ = _mean_rate_system(params, config)
    sol = solve_ivp(rhs, (0.0, horizon), np.zeros(params.n_users + 1), rtol=1e-8, atol=1e-10)
    return float(sol.y[-1, -1])


def horizon_for_events(params: ModelParams, config: ModelConfig, target_events: float) -> float:
    """Horizon whose expected event count (from an empty history) is ``target_events``."""
    rhs, b_tot = _mean_rate_system(params, config)
    if not b_tot > 0:
        raise ConfigError("the model has zero base rate")

    def reached(_, state):
        return state[-1] - target_events

    reached.terminal = True
    sol = solve_ivp(rhs, (0.0, target_events / b_tot), np.zeros(params.n_users + 1),
                    events=reached, rtol=1e-8, atol=1e-10)
    if sol.t_events[0].size:
        return float(sol.t_events[0][0])
    return target_events / b_tot


__all__ = [
    "SimulationSpec",
    "SimulationResult",
    "simulate",
    "random_network",
    "horizon_for_events",
    "expected_event_count",
]
