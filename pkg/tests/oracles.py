"""Slow, loop-based reference implementations used as test oracles.

Nothing here calls into the vectorised code paths of the package apart from
the data containers; basis functions are re-derived from the calendar and
every sum is an explicit loop.
"""

import math

import numpy as np
from scipy.special import digamma


# -- time bases ----------------------------------------------------------------


def hour_of_week(basis, t):
    return (basis.epoch_hour + 24.0 * t / basis.units_per_day) % 168.0


def basis_function(kind, index, hour):
    """Value of basis function ``index`` of family ``kind`` at an hour-of-week."""
    hod = int(math.floor(hour)) % 24
    dow = int(math.floor(hour)) // 24
    if kind == "constant":
        return 1.0
    if kind == "hour":
        return float(hod == index)
    if kind == "weekday":
        return float(dow == index)
    if kind == "hourday":
        return float(hod == index) if index < 24 else float(dow == index - 24)
    raise ValueError(kind)


def h_value(basis, i, t):
    return basis_function(basis.user_kind, i, hour_of_week(basis, t))


def l_value(basis, j, t):
    return basis_function(basis.item_kind, j, hour_of_week(basis, t))


def basis_integral_by_hours(basis, i, j, a, b):
    """Exact integral of ``h_i l_j`` over ``[a, b]``, one calendar hour at a time."""
    hour_len = basis.units_per_day / 24.0
    total = 0.0
    # hour boundaries in dataset time, aligned with the epoch
    k = math.floor((a * 24.0 / basis.units_per_day + basis.epoch_hour))
    while True:
        start = (k - basis.epoch_hour) * hour_len
        end = start + hour_len
        if start >= b:
            break
        lo, hi = max(start, a), min(end, b)
        if hi > lo:
            mid = 0.5 * (lo + hi)
            total += (hi - lo) * h_value(basis, i, mid) * l_value(basis, j, mid)
        k += 1
    return total


# -- intensities --------------------------------------------------------------------


def follows(network, v, u):
    """True when ``v`` is in ``N_u``."""
    return any(int(a) == v and int(b) == u for a, b in network.edges)


def edge_of(network, v, u):
    for e, (a, b) in enumerate(network.edges):
        if int(a) == v and int(b) == u:
            return e
    return None


def brute_intensity(params, config, history, network, u, p, t):
    basis = config.basis
    K = params.theta.shape[1]
    rate = 0.0
    for k in range(K):
        for i in range(basis.n_user):
            for j in range(basis.n_item):
                rate += (params.theta[u, k, i] * params.beta[p, k, j]
                         * h_value(basis, i, t) * l_value(basis, j, t))
    for n in range(len(history)):
        tn, v, q = float(history.times[n]), int(history.users[n]), int(history.items[n])
        if q != p or not tn < t:
            continue
        e = edge_of(network, v, u)
        if e is not None:
            rate += params.tau[e] * math.exp(-config.kernel.decay * (t - tn))
    return rate


def _basis_matrix(kind, n, hours):
    """Values of every basis function of ``kind`` on an array of hours-of-week."""
    return np.array([[basis_function(kind, i, hr) for i in range(n)] for hr in hours])


def total_intensity_on_grid(params, config, history, network, grid):
    """Sum over all (user, item) pairs of the intensity, at each grid point.

    The base part uses the factorised identity
    sum_{u,p} theta_u^T beta_p = sum_k (sum_u theta_uk)(sum_p beta_pk) per basis slot;
    the excitation part loops over events and their followers.
    """
    basis = config.basis
    hours = [hour_of_week(basis, float(s)) for s in grid]
    H = _basis_matrix(basis.user_kind, basis.n_user, hours)   # (S, I)
    L = _basis_matrix(basis.item_kind, basis.n_item, hours)   # (S, J)
    user_side = H @ params.theta.sum(axis=0).T                # (S, K)
    item_side = L @ params.beta.sum(axis=0).T                 # (S, K)
    total = np.sum(user_side * item_side, axis=1)
    for n in range(len(history)):
        tn, v = float(history.times[n]), int(history.users[n])
        out = sum(params.tau[e] for e, (a, b) in enumerate(network.edges) if int(a) == v)
        later = grid > tn
        total[later] += out * np.exp(-config.kernel.decay * (grid[later] - tn))
    return total


def quadrature_log_likelihood(params, config, history, network, per_piece=201):
    """Event term by enumeration; survival by composite Simpson on each smooth piece.

    The integrand is smooth between consecutive events and calendar-hour
    boundaries, so the integration grid is split at all of them.
    """
    from scipy.integrate import simpson

    T = history.horizon
    events = sum(math.log(brute_intensity(params, config, history, network,
                                          int(history.users[n]), int(history.items[n]),
                                          float(history.times[n])))
                 for n in range(len(history)))
    cuts = {0.0, T}
    cuts.update(float(t) for t in history.times)
    if not config.basis.is_static:
        hour_len = config.basis.units_per_day / 24.0
        first = -config.basis.epoch_hour * hour_len
        k = math.ceil(-first / hour_len)
        while first + k * hour_len < T:
            cuts.add(first + k * hour_len)
            k += 1
    cuts = sorted(c for c in cuts if 0.0 <= c <= T)
    survival = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        grid = np.linspace(a, b, per_piece)
        # nudge inside the piece so the left-continuous intensity is used consistently
        eps = (b - a) * 1e-9
        probe = np.clip(grid, a + eps, b - eps)
        vals = total_intensity_on_grid(params, config, history, network, probe)
        survival += simpson(vals, x=grid)
    return events - survival


# -- variational inference ---------------------------------------------------------------


def e_log(shp, rte):
    return digamma(shp) - math.log(rte)


def enumerate_responsibilities(state, config, history, network):
    """Per event, a dict from factor key to normalised responsibility.

    Keys are ``("base", k, i, j)`` and ``("event", m)``. Every admissible
    earlier event is a candidate (no truncation).
    """
    basis = config.basis
    K = state.theta_shp.shape[1]
    out = []
    for n in range(len(history)):
        tn, u, p = float(history.times[n]), int(history.users[n]), int(history.items[n])
        weights = {}
        for k in range(K):
            for i in range(basis.n_user):
                for j in range(basis.n_item):
                    hl = h_value(basis, i, tn) * l_value(basis, j, tn)
                    if hl == 0:
                        continue
                    w = math.exp(e_log(state.theta_shp[u, k, i], state.theta_rte[u, k, i])
                                 + e_log(state.beta_shp[p, k, j], state.beta_rte[p, k, j])) * hl
                    weights[("base", k, i, j)] = w
        for m in range(len(history)):
            tm, v, q = float(history.times[m]), int(history.users[m]), int(history.items[m])
            if q != p or not tm < tn:
                continue
            e = edge_of(network, v, u)
            if e is None:
                continue
            weights[("event", m)] = (math.exp(e_log(state.tau_shp[e], state.tau_rte[e]))
                                     * math.exp(-config.kernel.decay * (tn - tm)))
        total = sum(weights.values())
        out.append({key: w / total for key, w in weights.items()})
    return out


def algorithm_sweep(state, config, history, network):
    """One local + global sweep, written as the nested per-user / per-item loops.

    Returns a dict of updated gamma parameters (shape, rate) and the
    responsibilities. All expectations read the most recent value of each
    variable, exactly as the loops overwrite them.
    """
    h = config.hyper
    basis = config.basis
    U, K, I = state.theta_shp.shape
    P, _, J = state.beta_shp.shape
    T = history.horizon
    edges = [(int(a), int(b)) for a, b in network.edges]

    resp = enumerate_responsibilities(state, config, history, network)

    # working copies, overwritten in place as the loops proceed
    g = {name: np.array(getattr(state, name), dtype=float)
         for name in ("theta_shp", "theta_rte", "beta_shp", "beta_rte", "tau_shp", "tau_rte",
                      "eta_shp", "eta_rte", "xi_shp", "xi_rte", "mu_shp", "mu_rte")}

    def mean(name, idx):
        return g[name + "_shp"][idx] / g[name + "_rte"][idx]

    # expected counts from the responsibilities
    c_up = np.zeros((U, P, K, I, J))
    c_vu = {e: 0.0 for e in edges}
    for n, r in enumerate(resp):
        u, p = int(history.users[n]), int(history.items[n])
        for key, val in r.items():
            if key[0] == "base":
                _, k, i, j = key
                c_up[u, p, k, i, j] += val
            else:
                v = int(history.users[key[1]])
                c_vu[(v, u)] += val

    F = np.zeros((I, J))
    for i in range(I):
        for j in range(J):
            F[i, j] = basis_integral_by_hours(basis, i, j, 0.0, T)

    def G(delta):
        return (1.0 - math.exp(-config.kernel.decay * delta)) / config.kernel.decay

    for u in range(U):
        followers_of_u = [w for (v, w) in edges if v == u]  # {v : u in N(v)}
        g["mu_shp"][u] = h.mu_shape + len(followers_of_u) * h.tau_shape
        g["mu_rte"][u] = h.mu_rate + sum(mean("tau", edges.index((u, w))) for w in followers_of_u)
        g["eta_shp"][u] = h.eta_shape + K * I * h.theta_shape
        g["eta_rte"][u] = h.eta_rate + sum(mean("theta", (u, k, i)) for k in range(K) for i in range(I))
        for v in [a for (a, b) in edges if b == u]:  # v in N(u)
            e = edges.index((v, u))
            g["tau_shp"][e] = h.tau_shape + c_vu[(v, u)]
            mass = sum(G(T - float(history.times[n])) for n in range(len(history))
                       if int(history.users[n]) == v)
            g["tau_rte"][e] = mass + mean("mu", v)
        for k in range(K):
            for i in range(I):
                g["theta_shp"][u, k, i] = h.theta_shape + sum(
                    c_up[u, p, k, i, j] for p in range(P) for j in range(J))
                g["theta_rte"][u, k, i] = sum(
                    F[i, j] * sum(mean("beta", (p, k, j)) for p in range(P)) for j in range(J)
                ) + mean("eta", u)
    for p in range(P):
        g["xi_shp"][p] = h.xi_shape + K * J * h.beta_shape
        g["xi_rte"][p] = h.xi_rate + sum(mean("beta", (p, k, j)) for k in range(K) for j in range(J))
        for k in range(K):
            for j in range(J):
                g["beta_shp"][p, k, j] = h.beta_shape + sum(
                    c_up[u, p, k, i, j] for u in range(U) for i in range(I))
                g["beta_rte"][p, k, j] = sum(
                    F[i, j] * sum(mean("theta", (u, k, i)) for u in range(U)) for i in range(I)
                ) + mean("xi", p)
    return g, resp
