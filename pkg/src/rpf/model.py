"""Model configuration, parameters, intensities and the point-process likelihood.

All four variants share one parameterisation. The base (intrinsic) rate of
user ``u`` on item ``p`` at time ``t`` is

    sum_{k,i,j} theta[u,k,i] * beta[p,k,j] * h_i(t) * l_j(t)

and every earlier event ``e`` on item ``p`` by a followee ``v`` of ``u`` adds
``tau[v -> u] * exp(-decay * (t - t_e))``. HRPF and DRPF use a network of
self-loops only; HRPF and SRPF use the constant basis.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import snapshot
from .errors import ConfigError, DataError, ZeroIntensityError
from .events import EventHistory, SocialNetwork
from .kernels import TimeBasis, TriggerKernel

VARIANTS = ("HRPF", "SRPF", "DRPF", "DSRPF")


@dataclass(frozen=True)
class Hyperparams:
    """Gamma hyperparameters, shape/rate parameterisation (mean = shape / rate)."""

    theta_shape: float = 0.3
    beta_shape: float = 0.3
    eta_shape: float = 0.3
    eta_rate: float = 1.0
    xi_shape: float = 0.3
    xi_rate: float = 1.0
    tau_shape: float = 0.3
    mu_shape: float = 0.3
    mu_rate: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"hyperparameter {name} must be positive, got {value}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "DSRPF"
    n_components: int = 5
    basis: TimeBasis = field(default_factory=TimeBasis)
    kernel: TriggerKernel = field(default_factory=TriggerKernel)
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_components < 1:
            raise ConfigError("n_components must be at least 1")
        if self.variant in ("HRPF", "SRPF") and not self.basis.is_static:
            raise ConfigError(f"{self.variant} requires the constant time basis")

    @property
    def social(self) -> bool:
        return self.variant in ("SRPF", "DSRPF")

    def resolve_network(self, network: SocialNetwork | None, n_users: int) -> SocialNetwork:
        """The trigger graph this variant actually uses."""
        if not self.social:
            return SocialNetwork.self_only(n_users)
        if network is None:
            raise ConfigError(f"{self.variant} requires a social network")
        if network.n_users != n_users:
            raise ConfigError(
                f"network has {network.n_users} users but the data has {n_users}"
            )
        return network

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_components": self.n_components,
            "basis": asdict(self.basis),
            "decay": self.kernel.decay,
            "hyper": asdict(self.hyper),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            variant=d.get("variant", "DSRPF"),
            n_components=int(d.get("n_components", 5)),
            basis=TimeBasis(**d.get("basis", {})),
            kernel=TriggerKernel(float(d["decay"])) if "decay" in d else TriggerKernel(),
            hyper=Hyperparams(**d.get("hyper", {})),
        )


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Point values of every latent variable.

    ``tau`` is aligned with ``edges`` (rows ``(source, target)``), which must
    match the network the parameters are used with.
    """

    theta: np.ndarray  # (U, K, I)
    beta: np.ndarray  # (P, K, J)
    tau: np.ndarray  # (E,)
    eta: np.ndarray  # (U,)
    xi: np.ndarray  # (P,)
    mu: np.ndarray  # (U,)
    edges: np.ndarray  # (E, 2)

    def __post_init__(self):
        for name in ("theta", "beta", "tau", "eta", "xi", "mu"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise DataError(f"parameter {name} must be finite and non-negative")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        if len(self.tau) != len(self.edges):
            raise DataError("tau must have one entry per edge")

    @property
    def n_users(self) -> int:
        return self.theta.shape[0]

    @property
    def n_items(self) -> int:
        return self.beta.shape[0]

    @property
    def n_components(self) -> int:
        return self.theta.shape[1]

    def out_weight(self) -> np.ndarray:
        """Total influence each user exerts on all followers, ``sum_u tau[v -> u]``."""
        return np.bincount(self.edges[:, 0], weights=self.tau, minlength=self.n_users)

    def tau_matrix(self) -> np.ndarray:
        """Dense ``U x U`` matrix with ``[v, u] = tau[v -> u]``."""
        out = np.zeros((self.n_users, self.n_users))
        out[self.edges[:, 0], self.edges[:, 1]] = self.tau
        return out

    def check_network(self, network: SocialNetwork):
        if not np.array_equal(self.edges, network.edges):
            raise DataError("parameters were built for a different network")

    def scaled(self, c: float) -> "ModelParams":
        return replace(self, theta=self.theta * c, beta=self.beta * c, tau=self.tau * c)

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in ("theta", "beta", "tau", "eta", "xi", "mu", "edges")}

    def save(self, path, config: ModelConfig | None = None):
        meta = {"kind": "params"}
        if config is not None:
            meta["config"] = config.to_dict()
        snapshot.save(path, self.arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = snapshot.load(path)
        params = cls(**arrays)
        config = ModelConfig.from_dict(meta["config"]) if "config" in meta else None
        return params, config


# -- intensities ---------------------------------------------------------------


def _check_indices(params: ModelParams, u, p):
    if not 0 <= u < params.n_users:
        raise IndexError(f"user {u} out of range")
    if not 0 <= p < params.n_items:
        raise IndexError(f"item {p} out of range")


def base_rate(params: ModelParams, basis: TimeBasis, u, p, t):
    """Intrinsic rate ``theta_u(t) . beta_p(t)``; broadcasts over arrays."""
    hv = basis.user_values(t)
    lv = basis.item_values(t)
    a = np.einsum("...ki,...i->...k", params.theta[u], hv)
    b = np.einsum("...kj,...j->...k", params.beta[p], lv)
    return (a * b).sum(axis=-1)


def user_base_rates(params: ModelParams, basis: TimeBasis, u: int, t: float) -> np.ndarray:
    """Intrinsic rates of user ``u`` for every item at time ``t``."""
    a = params.theta[u] @ basis.user_values(t)
    return (params.beta @ basis.item_values(t)) @ a


def user_trigger_rates(params, history: EventHistory, network: SocialNetwork,
                       kernel: TriggerKernel, u: int, t: float) -> np.ndarray:
    """Excitation of user ``u`` on every item at ``t`` from events strictly before ``t``."""
    past = history.times < t
    eidx = network.edge_index[history.users[past], u]
    ok = eidx >= 0
    contrib = params.tau[eidx[ok]] * np.exp(-kernel.decay * (t - history.times[past][ok]))
    return np.bincount(history.items[past][ok], weights=contrib, minlength=params.n_items)


def user_intensities(params, config, history, network, u, t) -> np.ndarray:
    """``lambda_up(t)`` for every item ``p``."""
    return user_base_rates(params, config.basis, u, t) + user_trigger_rates(
        params, history, network, config.kernel, u, t
    )


def intensity(params: ModelParams, config: ModelConfig, history: EventHistory,
              network: SocialNetwork, u: int, p: int, t: float) -> float:
    """Conditional intensity of user ``u`` on item ``p`` at time ``t``."""
    _check_indices(params, u, p)
    params.check_network(network)
    base = float(base_rate(params, config.basis, u, p, t))
    mask = (history.items == p) & (history.times < t)
    eidx = network.edge_index[history.users[mask], u]
    ok = eidx >= 0
    trig = params.tau[eidx[ok]] * np.exp(-config.kernel.decay * (t - history.times[mask][ok]))
    return base + float(trig.sum())


def admissible_factors(params, config, history, network, u, p, t) -> list:
    """All trigger factors of ``lambda_up(t)``.

    Base factors are ``(k, i, j)`` tuples; event factors are the integer
    positions of earlier admissible events in ``history``.
    """
    K, I, J = params.n_components, config.basis.n_user, config.basis.n_item
    factors = [(k, i, j) for k in range(K) for i in range(I) for j in range(J)]
    mask = (history.items == p) & (history.times < t)
    mask &= network.edge_index[history.users, u] >= 0
    factors.extend(int(m) for m in np.flatnonzero(mask))
    return factors


def complete_intensity(params, config, history, network, u, p, t, s) -> float:
    """Summand of ``intensity`` contributed by trigger factor ``s``."""
    _check_indices(params, u, p)
    if isinstance(s, tuple):
        k, i, j = s
        if not (0 <= k < params.n_components and 0 <= i < config.basis.n_user
                and 0 <= j < config.basis.n_item):
            raise ValueError(f"base factor {s} out of range")
        h = config.basis.user_values(t)[i]
        l = config.basis.item_values(t)[j]
        return float(params.theta[u, k, i] * params.beta[p, k, j] * h * l)
    m = int(s)
    if not 0 <= m < len(history):
        raise ValueError(f"event factor {m} out of range")
    t_m, v, p_m = history[m]
    if p_m != p:
        raise ValueError(f"event {m} is on item {p_m}, not {p}")
    if not t_m < t:
        raise ValueError(f"event {m} does not precede t={t}")
    e = network.edge_index[v, u]
    if e < 0:
        raise ValueError(f"user {v} is not followed by user {u}")
    return float(params.tau[e] * math.exp(-config.kernel.decay * (t - t_m)))


# -- trigger structure -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TriggerPairs:
    """Admissible (target event, source event) pairs.

    ``source`` precedes ``target`` strictly in time, both are on the same
    item, and ``edge`` indexes the follow edge from the source's user to the
    target's user.
    """

    target: np.ndarray
    source: np.ndarray
    edge: np.ndarray
    lag: np.ndarray

    def __len__(self):
        return len(self.target)


def trigger_pairs(history: EventHistory, network: SocialNetwork, window: float | None = None):
    """Enumerate admissible trigger pairs, optionally only lags ``<= window``."""
    M = len(history)
    order = np.lexsort((np.arange(M), history.items))
    items_sorted = history.items[order]
    bounds = np.flatnonzero(np.diff(items_sorted)) + 1
    tgt_parts, src_parts = [], []
    for group in np.split(order, bounds):
        if len(group) < 2:
            continue
        tg = history.times[group]
        hi = np.searchsorted(tg, tg, side="left")
        lo = np.zeros_like(hi) if window is None else np.searchsorted(tg, tg - window, side="left")
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            continue
        tpos = np.repeat(np.arange(len(group)), counts)
        offsets = np.cumsum(counts) - counts
        spos = lo[tpos] + (np.arange(total) - offsets[tpos])
        tgt_parts.append(group[tpos])
        src_parts.append(group[spos])
    if tgt_parts:
        tgt = np.concatenate(tgt_parts)
        src = np.concatenate(src_parts)
    else:
        tgt = src = np.zeros(0, dtype=np.int64)
    edge = network.edge_index[history.users[src], history.users[tgt]]
    keep = edge >= 0
    tgt, src, edge = tgt[keep], src[keep], edge[keep]
    order = np.lexsort((src, tgt))
    tgt, src, edge = tgt[order], src[order], edge[order]
    lag = history.times[tgt] - history.times[src]
    return TriggerPairs(tgt, src, edge, lag)


def excitation_scan(params: ModelParams, history: EventHistory, network: SocialNetwork,
                    kernel: TriggerKernel):
    """Exact excitation and its compensator at every event, in linear time.

    Returns ``(excite, compensator)`` where for event ``n`` on ``(u, p)``,
    ``excite[n] = sum tau * g(t_m, t_n)`` and ``compensator[n] = sum tau *
    G(t_n - t_m)`` over admissible earlier events ``m``. Events sharing a
    timestamp never excite each other.
    """
    M = len(history)
    U, P = params.n_users, params.n_items
    decay = kernel.decay
    level = np.zeros((U, P))  # decayed excitation at `stamp`
    total = np.zeros((U, P))  # undecayed sum of tau
    stamp = np.zeros((U, P))
    excite = np.zeros(M)
    comp = np.zeros(M)
    src, tgt = network.edges[:, 0], network.edges[:, 1]
    fol_order = np.argsort(src, kind="stable")
    fol_start = np.searchsorted(src[fol_order], np.arange(U + 1))
    times, users, items = history.times, history.users, history.items
    n = 0
    while n < M:
        m = n
        t = times[n]
        while m < M and times[m] == t:
            m += 1
        for q in range(n, m):
            u, p = users[q], items[q]
            lev = level[u, p] * math.exp(-decay * (t - stamp[u, p]))
            excite[q] = lev
            comp[q] = (total[u, p] - lev) / decay
        for q in range(n, m):
            v, p = users[q], items[q]
            sel = fol_order[fol_start[v]:fol_start[v + 1]]
            fol = tgt[sel]
            w = params.tau[sel]
            level[fol, p] = level[fol, p] * np.exp(-decay * (t - stamp[fol, p])) + w
            stamp[fol, p] = t
            total[fol, p] += w
        n = m
    return excite, comp


def event_intensities(params, config, history, network) -> np.ndarray:
    """``lambda_{u_n p_n}(t_n)`` for every event."""
    base = base_rate(params, config.basis, history.users, history.items, history.times)
    excite, _ = excitation_scan(params, history, network, config.kernel)
    return base + excite


def survival(params: ModelParams, config: ModelConfig, history: EventHistory) -> float:
    """``sum_{u,p} int_0^T lambda_up(s) ds`` in closed form."""
    T = history.horizon
    F = config.basis.integral(T)
    theta_sum = params.theta.sum(axis=0)  # (K, I)
    beta_sum = params.beta.sum(axis=0)  # (K, J)
    base = float(np.einsum("ki,ij,kj->", theta_sum, F, beta_sum))
    outw = params.out_weight()
    trig = float(np.sum(outw[history.users] * config.kernel.integral(T - history.times)))
    return base + trig


def log_likelihood(params: ModelParams, config: ModelConfig, history: EventHistory,
                   network: SocialNetwork) -> float:
    """Point-process log-likelihood ``sum_n ln lambda(t_n) - sum_{u,p} int_0^T lambda_up``."""
    params.check_network(network)
    lam = event_intensities(params, config, history, network)
    if np.any(lam <= 0):
        n = int(np.flatnonzero(lam <= 0)[0])
        raise ZeroIntensityError(f"event {n} {history[n]} has zero intensity")
    return float(np.log(lam).sum()) - survival(params, config, history)


# -- prior -----------------------------------------------------------------------


def sample_params_from_prior(config: ModelConfig, network: SocialNetwork, n_items: int,
                             seed=None) -> ModelParams:
    """Draw the hierarchy top-down: rate hyper-latents first, then factors."""
    rng = np.random.default_rng(seed)
    h = config.hyper
    U, P, K = network.n_users, n_items, config.n_components
    I, J = config.basis.n_user, config.basis.n_item
    eta = rng.gamma(h.eta_shape, 1.0 / h.eta_rate, size=U)
    xi = rng.gamma(h.xi_shape, 1.0 / h.xi_rate, size=P)
    mu = rng.gamma(h.mu_shape, 1.0 / h.mu_rate, size=U)
    theta = rng.gamma(h.theta_shape, 1.0 / eta[:, None, None], size=(U, K, I))
    beta = rng.gamma(h.beta_shape, 1.0 / xi[:, None, None], size=(P, K, J))
    tau = rng.gamma(h.tau_shape, 1.0 / mu[network.sources])
    return ModelParams(theta, beta, tau, eta, xi, mu, network.edges.copy())


def branching_ratio(params: ModelParams, kernel: TriggerKernel) -> float:
    """Spectral radius of the offspring matrix ``tau / decay``."""
    A = params.tau_matrix() / kernel.decay
    if A.shape[0] > 400:
        # power iteration: A is nonnegative so the Perron root dominates
        x = np.ones(A.shape[0])
        rho = 0.0
        for _ in range(200):
            y = A.T @ x
            rho = float(np.linalg.norm(y) / max(np.linalg.norm(x), 1e-300))
            if rho == 0:
                break
            x = y / np.linalg.norm(y)
        return rho
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def save_config(config: ModelConfig, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))
