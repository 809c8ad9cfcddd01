"""Mean-field variational inference with per-event trigger responsibilities.

Each event is attributed either to a base factor ``(k, i, j)`` or to an
earlier admissible event. Given those responsibilities every latent
variable has a gamma coordinate update, so the sweep below is plain
coordinate ascent on the evidence lower bound.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from . import snapshot
from .errors import NumericalError
from .events import EventHistory, SocialNetwork
from .model import ModelConfig, ModelParams, TriggerPairs, trigger_pairs

log = logging.getLogger(__name__)

_RATE_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class FitData:
    """Everything about the observations that stays fixed during a fit."""

    history: EventHistory
    network: SocialNetwork
    config: ModelConfig
    pairs: TriggerPairs
    log_kernel: np.ndarray  # per pair, ln g(t_m, t_n)
    user_idx: np.ndarray  # (M, A) active user-basis indices
    item_idx: np.ndarray  # (M, B)
    log_hl: np.ndarray  # (M, A, B) ln(h_i l_j), -inf where zero
    F: np.ndarray  # (I, J)
    kernel_mass: np.ndarray  # (U,) sum_{e by v} G(T - t_e)
    n_followers: np.ndarray  # (U,) out-degree in the trigger graph

    @property
    def n_events(self) -> int:
        return len(self.history)

    @property
    def shape(self):
        h = self.history
        b = self.config.basis
        return h.n_users, h.n_items, self.config.n_components, b.n_user, b.n_item


def prepare(history: EventHistory, network: SocialNetwork, config: ModelConfig,
            truncation: float | None = 10.0) -> FitData:
    """Precompute basis activity, trigger candidates and survival constants.

    Candidate triggers are limited to lags ``<= truncation / decay``; pass
    ``None`` to keep every admissible earlier event.
    """
    decay = config.kernel.decay
    window = None if truncation is None else truncation / decay
    pairs = trigger_pairs(history, network, window)
    basis = config.basis
    ui, uv = basis.user_active(history.times)
    ii, iv = basis.item_active(history.times)
    with np.errstate(divide="ignore"):
        log_hl = np.log(uv[:, :, None] * iv[:, None, :])
    G = config.kernel.integral(history.horizon - history.times)
    kernel_mass = np.bincount(history.users, weights=G, minlength=history.n_users).astype(np.float64)
    return FitData(
        history=history,
        network=network,
        config=config,
        pairs=pairs,
        log_kernel=-decay * pairs.lag,
        user_idx=ui,
        item_idx=ii,
        log_hl=log_hl,
        F=np.array(basis.integral(history.horizon)),
        kernel_mass=kernel_mass,
        n_followers=network.out_degree().astype(np.float64),
    )


@dataclass(frozen=True, eq=False)
class VariationalState:
    """Gamma (shape, rate) pairs for every latent variable, plus responsibilities.

    ``resp_base[n, k, a, b]`` is the mass of event ``n`` on base factor
    ``(k, user_idx[n, a], item_idx[n, b])``; ``resp_trig`` is aligned with
    the trigger pairs of the :class:`FitData` it was computed from.
    """

    theta_shp: np.ndarray
    theta_rte: np.ndarray
    beta_shp: np.ndarray
    beta_rte: np.ndarray
    tau_shp: np.ndarray
    tau_rte: np.ndarray
    eta_shp: np.ndarray
    eta_rte: np.ndarray
    xi_shp: np.ndarray
    xi_rte: np.ndarray
    mu_shp: np.ndarray
    mu_rte: np.ndarray
    edges: np.ndarray
    resp_base: np.ndarray | None = None
    resp_trig: np.ndarray | None = None

    _GAMMAS = ("theta", "beta", "tau", "eta", "xi", "mu")

    def mean(self, name: str) -> np.ndarray:
        return getattr(self, name + "_shp") / getattr(self, name + "_rte")

    def log_mean(self, name: str) -> np.ndarray:
        """``E[ln x] = digamma(shape) - ln(rate)``."""
        return digamma(getattr(self, name + "_shp")) - np.log(getattr(self, name + "_rte"))

    def to_params(self) -> ModelParams:
        return ModelParams(**{g: self.mean(g) for g in self._GAMMAS}, edges=self.edges)

    def arrays(self) -> dict:
        out = {f"{g}_{s}": getattr(self, f"{g}_{s}") for g in self._GAMMAS for s in ("shp", "rte")}
        out["edges"] = self.edges
        if self.resp_base is not None:
            out["resp_base"] = self.resp_base
            out["resp_trig"] = self.resp_trig
        return out

    def save(self, path):
        snapshot.save(path, self.arrays(), {"kind": "variational_state"})

    @classmethod
    def load(cls, path) -> "VariationalState":
        arrays, _ = snapshot.load(path)
        return cls(**arrays)


def init_state(data: FitData, seed=None, jitter: float = 0.1) -> VariationalState:
    """Prior hyperparameters, each entry scaled by ``Uniform(1 - jitter, 1 + jitter)``."""
    rng = np.random.default_rng(seed)
    U, P, K, I, J = data.shape
    E = data.network.n_edges
    h = data.config.hyper

    def jit(value, shape):
        return value * rng.uniform(1 - jitter, 1 + jitter, size=shape)

    return VariationalState(
        theta_shp=jit(h.theta_shape, (U, K, I)),
        theta_rte=jit(h.eta_shape / h.eta_rate, (U, K, I)),
        beta_shp=jit(h.beta_shape, (P, K, J)),
        beta_rte=jit(h.xi_shape / h.xi_rate, (P, K, J)),
        tau_shp=jit(h.tau_shape, E),
        tau_rte=jit(h.mu_shape / h.mu_rate, E),
        eta_shp=jit(h.eta_shape, U),
        eta_rte=jit(h.eta_rate, U),
        xi_shp=jit(h.xi_shape, P),
        xi_rte=jit(h.xi_rate, P),
        mu_shp=jit(h.mu_shape, U),
        mu_rte=jit(h.mu_rate, U),
        edges=data.network.edges.copy(),
    )


def state_from_params(params: ModelParams, concentration: float = 1e6) -> VariationalState:
    """Tightly concentrated gamma factors centred on point values."""

    def pair(x):
        x = np.maximum(np.asarray(x, dtype=np.float64), 1e-12)
        return np.full_like(x, concentration), concentration / x

    kw = {}
    for g in VariationalState._GAMMAS:
        kw[g + "_shp"], kw[g + "_rte"] = pair(getattr(params, g))
    return VariationalState(**kw, edges=params.edges)


# -- sweep -----------------------------------------------------------------------


def _base_log_weights(state: VariationalState, data: FitData) -> np.ndarray:
    """``E ln theta + E ln beta + ln(h l)`` for each event and local base factor."""
    h = data.history
    K = data.config.n_components
    lt = state.log_mean("theta")
    lb = state.log_mean("beta")
    k = np.arange(K)[None, :, None]
    lt_ev = lt[h.users[:, None, None], k, data.user_idx[:, None, :]]  # (M, K, A)
    lb_ev = lb[h.items[:, None, None], k, data.item_idx[:, None, :]]  # (M, K, B)
    return lt_ev[:, :, :, None] + lb_ev[:, :, None, :] + data.log_hl[:, None, :, :]


def _trigger_log_weights(state: VariationalState, data: FitData) -> np.ndarray:
    return state.log_mean("tau")[data.pairs.edge] + data.log_kernel


def local_step(state: VariationalState, data: FitData) -> VariationalState:
    """Optimal categorical responsibilities given the current gamma factors."""
    M = data.n_events
    lw_base = _base_log_weights(state, data)
    lw_trig = _trigger_log_weights(state, data)
    tgt = data.pairs.target
    n_base = int(np.prod(lw_base.shape[1:]))
    top = lw_base.reshape(M, n_base).max(axis=1)
    if len(tgt):
        np.maximum.at(top, tgt, lw_trig)
    w_base = np.exp(lw_base - top[:, None, None, None])
    w_trig = np.exp(lw_trig - top[tgt])
    norm = w_base.reshape(M, n_base).sum(axis=1) + np.bincount(tgt, weights=w_trig, minlength=M)
    return replace(
        state,
        resp_base=w_base / norm[:, None, None, None],
        resp_trig=w_trig / norm[tgt],
    )


def expected_counts(state: VariationalState, data: FitData):
    """Expected attribution counts ``(c_theta, c_beta, c_tau)``.

    ``c_theta[u, k, i]`` sums responsibilities of factor ``(k, i, *)`` over
    the events of ``u``; ``c_beta[p, k, j]`` likewise over events on ``p``;
    ``c_tau[e]`` sums responsibilities on trigger pairs through edge ``e``.
    """
    U, P, K, I, J = data.shape
    h = data.history
    k = np.arange(K)[None, :, None]
    r_user = state.resp_base.sum(axis=3)  # (M, K, A)
    flat = (h.users[:, None, None] * K + k) * I + data.user_idx[:, None, :]
    c_theta = np.bincount(flat.ravel(), weights=r_user.ravel(), minlength=U * K * I).reshape(U, K, I)
    r_item = state.resp_base.sum(axis=2)  # (M, K, B)
    flat = (h.items[:, None, None] * K + k) * J + data.item_idx[:, None, :]
    c_beta = np.bincount(flat.ravel(), weights=r_item.ravel(), minlength=P * K * J).reshape(P, K, J)
    c_tau = np.bincount(data.pairs.edge, weights=state.resp_trig, minlength=data.network.n_edges)
    return c_theta, c_beta, c_tau


def global_step(state: VariationalState, data: FitData) -> VariationalState:
    """One pass of conjugate updates in the per-user, then per-item order.

    Users are visited in index order and each visit updates ``mu_u``,
    ``eta_u``, the influences ``tau[v -> u]`` into ``u``, then ``theta_u``.
    That order is reproduced exactly with array operations: an influence
    ``tau[v -> u]`` sees the refreshed ``mu_v`` only when ``v <= u``, and
    ``mu_u`` sees refreshed ``tau[u -> w]`` only when ``w < u``.
    """
    h = data.config.hyper
    _, _, K, I, J = data.shape
    c_theta, c_beta, c_tau = expected_counts(state, data)
    src, tgt = data.network.sources, data.network.targets
    U = data.history.n_users

    # influences into later users still read the previous mu of their source
    tau_shp = h.tau_shape + c_tau
    tau_rte = state.tau_rte.copy()
    early = src > tgt
    tau_rte[early] = data.kernel_mass[src[early]] + state.mu_shp[src[early]] / state.mu_rte[src[early]]
    tau_mean = np.where(early, tau_shp / np.maximum(tau_rte, _RATE_FLOOR), state.mean("tau"))

    mu_shp = h.mu_shape + data.n_followers * h.tau_shape
    mu_rte = h.mu_rate + np.bincount(src, weights=tau_mean, minlength=U)
    late = ~early
    tau_rte[late] = data.kernel_mass[src[late]] + mu_shp[src[late]] / mu_rte[src[late]]
    tau_rte = np.maximum(tau_rte, _RATE_FLOOR)

    eta_shp = np.full(U, h.eta_shape + K * I * h.theta_shape)
    eta_rte = h.eta_rate + state.mean("theta").sum(axis=(1, 2))

    beta_sum = state.mean("beta").sum(axis=0)  # (K, J)
    theta_shp = h.theta_shape + c_theta
    theta_rte = (beta_sum @ data.F.T)[None, :, :] + (eta_shp / eta_rte)[:, None, None]
    theta_rte = np.maximum(theta_rte, _RATE_FLOOR)

    P = data.history.n_items
    xi_shp = np.full(P, h.xi_shape + K * J * h.beta_shape)
    xi_rte = h.xi_rate + state.mean("beta").sum(axis=(1, 2))

    theta_sum = (theta_shp / theta_rte).sum(axis=0)  # (K, I)
    beta_shp = h.beta_shape + c_beta
    beta_rte = (theta_sum @ data.F)[None, :, :] + (xi_shp / xi_rte)[:, None, None]
    beta_rte = np.maximum(beta_rte, _RATE_FLOOR)

    return replace(
        state,
        theta_shp=theta_shp, theta_rte=theta_rte,
        beta_shp=beta_shp, beta_rte=beta_rte,
        tau_shp=tau_shp, tau_rte=tau_rte,
        eta_shp=eta_shp, eta_rte=eta_rte,
        xi_shp=xi_shp, xi_rte=xi_rte,
        mu_shp=mu_shp, mu_rte=mu_rte,
    )


# -- objective ---------------------------------------------------------------------


def _gamma_entropy(shp, rte):
    return np.sum(shp - np.log(rte) + gammaln(shp) + (1.0 - shp) * digamma(shp))


def _gamma_prior(shape, e_log_rate, e_rate, e_log_x, e_x):
    """``E[ln Gamma(x; shape, rate)]`` with independent ``x`` and ``rate``."""
    return np.sum(shape * e_log_rate - gammaln(shape) + (shape - 1.0) * e_log_x - e_rate * e_x)


def expected_survival(state: VariationalState, data: FitData) -> float:
    theta_sum = state.mean("theta").sum(axis=0)
    beta_sum = state.mean("beta").sum(axis=0)
    base = float(np.einsum("ki,ij,kj->", theta_sum, data.F, beta_sum))
    trig = float(np.sum(state.mean("tau") * data.kernel_mass[data.network.sources]))
    return base + trig


def elbo(state: VariationalState, data: FitData) -> float:
    """Evidence lower bound of the complete model under ``state``."""
    if state.resp_base is None:
        raise ValueError("responsibilities missing; run local_step first")
    h = data.config.hyper
    lw_base = _base_log_weights(state, data)
    valid = np.isfinite(lw_base)
    rb = state.resp_base
    events = np.sum(np.where(valid, rb * np.where(valid, lw_base, 0.0), 0.0)) - np.sum(xlogy(rb, rb))
    rt = state.resp_trig
    events += np.sum(rt * _trigger_log_weights(state, data)) - np.sum(xlogy(rt, rt))

    ln_theta, ln_beta, ln_tau = state.log_mean("theta"), state.log_mean("beta"), state.log_mean("tau")
    ln_eta, ln_xi, ln_mu = state.log_mean("eta"), state.log_mean("xi"), state.log_mean("mu")
    e_eta, e_xi, e_mu = state.mean("eta"), state.mean("xi"), state.mean("mu")
    src = data.network.sources
    prior = (
        _gamma_prior(h.theta_shape, ln_eta[:, None, None], e_eta[:, None, None], ln_theta, state.mean("theta"))
        + _gamma_prior(h.beta_shape, ln_xi[:, None, None], e_xi[:, None, None], ln_beta, state.mean("beta"))
        + _gamma_prior(h.tau_shape, ln_mu[src], e_mu[src], ln_tau, state.mean("tau"))
        + _gamma_prior(h.eta_shape, np.log(h.eta_rate), h.eta_rate, ln_eta, e_eta)
        + _gamma_prior(h.xi_shape, np.log(h.xi_rate), h.xi_rate, ln_xi, e_xi)
        + _gamma_prior(h.mu_shape, np.log(h.mu_rate), h.mu_rate, ln_mu, e_mu)
    )
    entropy = sum(_gamma_entropy(getattr(state, g + "_shp"), getattr(state, g + "_rte"))
                  for g in VariationalState._GAMMAS)
    value = float(events - expected_survival(state, data) + prior + entropy)
    if not np.isfinite(value):
        raise NumericalError("ELBO is not finite")
    return value


# -- driver ------------------------------------------------------------------------


@dataclass
class FitResult:
    params: ModelParams
    state: VariationalState
    trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_iter(self) -> int:
        return len(self.trace)


def fit(history: EventHistory, network: SocialNetwork, config: ModelConfig,
        tol: float = 1e-4, max_iter: int = 500, seed=None, truncation: float | None = 10.0,
        callback=None, state: VariationalState | None = None) -> FitResult:
    """Alternate local and global steps until the relative ELBO change is ``<= tol``.

    ``callback(iteration, state)`` is invoked after every sweep, and once
    with ``iteration=0`` for the initial state.
    """
    if len(history) == 0:
        raise ValueError("cannot fit an empty history")
    network = config.resolve_network(network, history.n_users)
    data = prepare(history, network, config, truncation)
    if state is None:
        state = init_state(data, seed)
    if callback is not None:
        callback(0, state)
    trace = []
    converged = False
    prev = None
    for it in range(1, max_iter + 1):
        state = global_step(local_step(state, data), data)
        value = elbo(state, data)
        trace.append(value)
        log.debug("iteration %d elbo %.6f", it, value)
        if callback is not None:
            callback(it, state)
        if prev is not None and abs(value - prev) <= tol * abs(prev):
            converged = True
            break
        prev = value
    if not converged:
        warnings.warn(f"variational inference did not converge in {max_iter} iterations",
                      RuntimeWarning, stacklevel=2)
    return FitResult(state.to_params(), state, trace, converged)
