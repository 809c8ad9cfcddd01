"""Triggering kernel and piecewise-constant time bases."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError

HOURS_PER_WEEK = 168

#: basis families and their number of functions
BASIS_KINDS = {"constant": 1, "hour": 24, "weekday": 7, "hourday": 31}


@dataclass(frozen=True)
class TriggerKernel:
    """Exponential kernel ``g(t_i, t) = exp(-decay * (t - t_i))`` for ``t >= t_i``."""

    decay: float = math.log(2.0)

    def __post_init__(self):
        if not self.decay > 0:
            raise ConfigError(f"kernel decay must be positive, got {self.decay}")

    @classmethod
    def from_half_life(cls, half_life: float) -> "TriggerKernel":
        return cls(math.log(2.0) / half_life)

    def value(self, t_i, t):
        """Kernel value; zero where ``t < t_i``."""
        dt = np.subtract(t, t_i)
        out = np.exp(-self.decay * np.maximum(dt, 0.0))
        return np.where(dt >= 0, out, 0.0)

    def integral(self, delta):
        """``G(delta) = (1 - exp(-decay * delta)) / decay``."""
        delta = np.asarray(delta, dtype=np.float64)
        if np.any(delta < 0):
            raise ValueError("kernel_integral needs a non-negative duration")
        out = -np.expm1(-self.decay * delta) / self.decay
        return float(out) if out.ndim == 0 else out


def kernel_value(kernel: TriggerKernel, t_i, t):
    out = kernel.value(t_i, t)
    return float(out) if np.ndim(out) == 0 else out


def kernel_integral(kernel: TriggerKernel, delta):
    return kernel.integral(delta)


def _weekly_table(kind: str) -> np.ndarray:
    """Value of every basis function in each hour-of-week slot, shape (168, n)."""
    slot = np.arange(HOURS_PER_WEEK)
    hour, day = slot % 24, slot // 24
    if kind == "constant":
        return np.ones((HOURS_PER_WEEK, 1))
    if kind == "hour":
        return (hour[:, None] == np.arange(24)).astype(float)
    if kind == "weekday":
        return (day[:, None] == np.arange(7)).astype(float)
    if kind == "hourday":
        return np.hstack([_weekly_table("hour"), _weekly_table("weekday")])
    raise ConfigError(f"unknown basis kind {kind!r}; expected one of {sorted(BASIS_KINDS)}")


@dataclass(frozen=True)
class TimeBasis:
    """User-side functions ``h_i`` and item-side functions ``l_j`` of time.

    Every function is constant on each hour of the week, which covers the
    constant (static) basis and the hour-of-day / day-of-week indicators.
    Time ``t`` in dataset units maps to the hour-of-week
    ``epoch_hour + 24 * t / units_per_day`` (mod 168); hour-of-week 0 is the
    first hour of day index 0.

    Parameters
    ----------
    user_kind, item_kind : str
        One of ``constant``, ``hour``, ``weekday``, ``hourday``.
    units_per_day : float
        Dataset time units in one day (1 for days, 24 for hours, 86400 for seconds).
    epoch_hour : float
        Hour-of-week at ``t = 0``.
    """

    user_kind: str = "constant"
    item_kind: str = "constant"
    units_per_day: float = 1.0
    epoch_hour: float = 0.0

    def __post_init__(self):
        for kind in (self.user_kind, self.item_kind):
            if kind not in BASIS_KINDS:
                raise ConfigError(f"unknown basis kind {kind!r}")
        if not self.units_per_day > 0:
            raise ConfigError("units_per_day must be positive")

    @classmethod
    def static(cls) -> "TimeBasis":
        return cls()

    @property
    def n_user(self) -> int:
        return BASIS_KINDS[self.user_kind]

    @property
    def n_item(self) -> int:
        return BASIS_KINDS[self.item_kind]

    @property
    def is_static(self) -> bool:
        return self.user_kind == "constant" and self.item_kind == "constant"

    @cached_property
    def user_table(self) -> np.ndarray:
        return _weekly_table(self.user_kind)

    @cached_property
    def item_table(self) -> np.ndarray:
        return _weekly_table(self.item_kind)

    @cached_property
    def _pair_table(self) -> np.ndarray:
        # (168, I, J) product h_i * l_j per slot, plus its prefix sums
        return self.user_table[:, :, None] * self.item_table[:, None, :]

    @cached_property
    def _pair_prefix(self) -> np.ndarray:
        prefix = np.zeros((HOURS_PER_WEEK + 1, self.n_user, self.n_item))
        np.cumsum(self._pair_table, axis=0, out=prefix[1:])
        return prefix

    def _hours(self, t):
        return self.epoch_hour + np.asarray(t, dtype=np.float64) * (24.0 / self.units_per_day)

    def slot(self, t) -> np.ndarray:
        """Hour-of-week slot index of each time."""
        return np.floor(self._hours(t)).astype(np.int64) % HOURS_PER_WEEK

    def user_values(self, t) -> np.ndarray:
        """``h(t)``, shape ``t.shape + (I,)``."""
        return self.user_table[self.slot(t)]

    def item_values(self, t) -> np.ndarray:
        return self.item_table[self.slot(t)]

    @cached_property
    def _user_active(self):
        return _active_table(self.user_table)

    @cached_property
    def _item_active(self):
        return _active_table(self.item_table)

    def user_active(self, t):
        """Sparse ``h(t)``: (indices, values), each of shape ``t.shape + (A,)``."""
        idx, val = self._user_active
        s = self.slot(t)
        return idx[s], val[s]

    def item_active(self, t):
        idx, val = self._item_active
        s = self.slot(t)
        return idx[s], val[s]

    def _cumulative(self, hours) -> np.ndarray:
        """``int_0^hours`` of each product ``h_i l_j``, measured in hours from week start."""
        hours = np.asarray(hours, dtype=np.float64)
        weeks, rem = np.divmod(hours, HOURS_PER_WEEK)
        whole = np.floor(rem).astype(np.int64)
        frac = rem - whole
        whole = np.minimum(whole, HOURS_PER_WEEK - 1)
        out = (
            weeks[..., None, None] * self._pair_prefix[-1]
            + self._pair_prefix[whole]
            + frac[..., None, None] * self._pair_table[whole]
        )
        return out

    def integral_between(self, a, b) -> np.ndarray:
        """``int_a^b h_i(t) l_j(t) dt`` in dataset units; shape ``(..., I, J)``."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if self.is_static:
            return (b - a)[..., None, None] * np.ones((1, 1))
        start = self._cumulative(self._hours(0.0))
        # anchor both ends at t = 0 so that F(b) - F(a) is consistent
        fa = self._cumulative(self._hours(a)) - start
        fb = self._cumulative(self._hours(b)) - start
        return (fb - fa) * (self.units_per_day / 24.0)

    def integral(self, T: float) -> np.ndarray:
        """``F(T)``: ``I x J`` table of ``int_0^T h_i l_j dt``, cached per ``T``."""
        cache = self.__dict__.setdefault("_integral_cache", {})
        key = float(T)
        if key not in cache:
            if key < 0:
                raise ValueError("integral upper limit must be non-negative")
            F = self.integral_between(0.0, key)
            F.setflags(write=False)
            cache[key] = F
        return cache[key]


def _active_table(table: np.ndarray):
    """Per slot, the indices and values of the non-zero basis functions."""
    nz = table != 0
    width = max(int(nz.sum(axis=1).max()), 1)
    idx = np.zeros((len(table), width), dtype=np.int64)
    val = np.zeros((len(table), width))
    for s in range(len(table)):
        cols = np.flatnonzero(nz[s])
        idx[s, : len(cols)] = cols
        val[s, : len(cols)] = table[s, cols]
    return idx, val


def basis_integral(basis: TimeBasis, i: int, j: int, T: float) -> float:
    if not (0 <= i < basis.n_user and 0 <= j < basis.n_item):
        raise IndexError(f"basis index ({i}, {j}) out of range")
    return float(basis.integral(T)[i, j])
