"""Event histories, the follow graph, and their text formats."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataError

_DELIMITERS = ",\t;| "


class Event(NamedTuple):
    time: float
    user: int
    item: int


@dataclass(frozen=True, eq=False)
class EventHistory:
    """Time-ordered user-item interactions observed on ``[0, horizon]``.

    Events are stored column-wise. Construction sorts them by time with a
    stable sort, so simultaneous events keep their input order.

    Parameters
    ----------
    times, users, items : array_like
        One entry per event.
    horizon : float
        End of the observation window ``T``.
    n_users, n_items : int
        Sizes of the dense user and item index spaces.
    user_labels, item_labels : sequence of str, optional
        Raw identifiers for each dense index, when loaded from a file.
    """

    times: np.ndarray
    users: np.ndarray
    items: np.ndarray
    horizon: float
    n_users: int
    n_items: int
    user_labels: tuple | None = None
    item_labels: tuple | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        if not (len(times) == len(users) == len(items)):
            raise DataError("times, users and items must have equal length")
        if self.horizon is None or not np.isfinite(self.horizon):
            raise DataError("horizon must be a finite number")
        if len(times):
            if not np.all(np.isfinite(times)) or times.min() < 0:
                raise DataError("event times must be finite and non-negative")
            if times.max() > self.horizon:
                raise DataError("event after the observation horizon")
            if users.min() < 0 or users.max() >= self.n_users:
                raise DataError("user index out of range")
            if items.min() < 0 or items.max() >= self.n_items:
                raise DataError("item index out of range")
        order = np.argsort(times, kind="stable")
        for name, arr in (("times", times), ("users", users), ("items", items)):
            arr = arr[order]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "horizon", float(self.horizon))

    @classmethod
    def from_events(cls, events: Iterable, horizon, n_users, n_items):
        events = [Event(*e) for e in events]
        return cls(
            times=[e.time for e in events],
            users=[e.user for e in events],
            items=[e.item for e in events],
            horizon=horizon,
            n_users=n_users,
            n_items=n_items,
        )

    def __len__(self):
        return len(self.times)

    def __iter__(self):
        for t, u, p in zip(self.times, self.users, self.items):
            yield Event(float(t), int(u), int(p))

    def __getitem__(self, n):
        return Event(float(self.times[n]), int(self.users[n]), int(self.items[n]))

    def _subset(self, mask, horizon=None):
        return EventHistory(
            self.times[mask],
            self.users[mask],
            self.items[mask],
            self.horizon if horizon is None else horizon,
            self.n_users,
            self.n_items,
            self.user_labels,
            self.item_labels,
        )

    def before(self, t: float) -> "EventHistory":
        """Events strictly earlier than ``t``; horizon unchanged."""
        return self._subset(self.times < t)

    def truncate(self, horizon: float) -> "EventHistory":
        """Events with time ``<= horizon`` observed on the shorter window."""
        return self._subset(self.times <= horizon, horizon=horizon)

    def with_horizon(self, horizon: float) -> "EventHistory":
        return self._subset(slice(None), horizon=horizon)

    def pair(self, u: int, p: int, t: float | None = None) -> np.ndarray:
        """Times of ``H_up(t)``: events of user ``u`` on item ``p`` before ``t``."""
        mask = (self.users == u) & (self.items == p)
        if t is not None:
            mask &= self.times < t
        return self.times[mask]

    @cached_property
    def events_per_user(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    @cached_property
    def pair_counts(self) -> np.ndarray:
        """U x P matrix of interaction counts."""
        counts = np.zeros((self.n_users, self.n_items), dtype=np.int64)
        np.add.at(counts, (self.users, self.items), 1)
        return counts


@dataclass(frozen=True, eq=False)
class SocialNetwork:
    """Directed follow graph.

    An edge ``(v, u)`` means ``u`` follows ``v`` (``v`` is in ``N_u``), so
    events of ``v`` may trigger events of ``u``. Edges are stored sorted by
    ``(source, target)``; influence parameters are aligned with that order.
    """

    n_users: int
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    self_loops: bool = True

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges) and (edges.min() < 0 or edges.max() >= self.n_users):
            raise DataError("edge endpoint out of range")
        edges = edges[edges[:, 0] != edges[:, 1]]
        if self.self_loops:
            loops = np.arange(self.n_users, dtype=np.int64)
            edges = np.concatenate([edges, np.stack([loops, loops], axis=1)])
        edges = np.unique(edges, axis=0) if len(edges) else edges
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_follows(cls, n_users, follows: Iterable[tuple[int, int]], self_loops=True):
        """Build from ``(follower, followee)`` pairs."""
        pairs = [(v, u) for u, v in follows]
        return cls(n_users, np.array(pairs, dtype=np.int64).reshape(-1, 2), self_loops)

    @classmethod
    def self_only(cls, n_users):
        return cls(n_users, np.zeros((0, 2), np.int64), self_loops=True)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def sources(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def targets(self) -> np.ndarray:
        return self.edges[:, 1]

    @cached_property
    def edge_index(self) -> np.ndarray:
        """Dense ``U x U`` lookup: ``edge_index[v, u]`` or -1 when absent."""
        idx = np.full((self.n_users, self.n_users), -1, dtype=np.int64)
        idx[self.edges[:, 0], self.edges[:, 1]] = np.arange(self.n_edges)
        return idx

    def followees(self, u: int) -> np.ndarray:
        """``N_u``: users whose events can trigger ``u``."""
        return self.sources[self.targets == u]

    def followers(self, v: int) -> np.ndarray:
        return self.targets[self.sources == v]

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.sources, minlength=self.n_users)

    def is_self_only(self) -> bool:
        return bool(np.all(self.sources == self.targets))


# -- text formats ------------------------------------------------------------


def _sniff_delimiter(lines: Sequence[str]) -> str:
    sample = "\n".join(lines[:20])
    try:
        return csv.Sniffer().sniff(sample, delimiters=_DELIMITERS).delimiter
    except csv.Error:
        pass
    # inconsistent rows confuse the sniffer; fall back to the first line
    counts = [(lines[0].count(d), d) for d in _DELIMITERS]
    best, delim = max(counts, key=lambda c: c[0])
    if best == 0:
        raise DataError("could not determine the column delimiter")
    return delim


def _read_rows(path, delimiter, ncols):
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return []
    if delimiter is None:
        delimiter = _sniff_delimiter(lines)
    rows = []
    reader = csv.reader(io.StringIO("\n".join(lines)), delimiter=delimiter, skipinitialspace=True)
    for rownum, row in enumerate(reader, start=1):
        row = [c.strip() for c in row if c.strip() != ""]
        if len(row) != ncols:
            raise DataError(f"expected {ncols} columns, found {len(row)}", row=rownum)
        rows.append((rownum, row))
    return rows


def _is_header(row) -> bool:
    try:
        float(row[-1])
    except ValueError:
        return True
    return False


def load_events(
    path,
    horizon: float | None = None,
    delimiter: str | None = None,
    user_labels: Sequence[str] | None = None,
    item_labels: Sequence[str] | None = None,
) -> EventHistory:
    """Read a ``user_id,item_id,timestamp`` log into an :class:`EventHistory`.

    Raw ids are mapped to dense indices in order of first appearance, unless
    existing label lists are supplied, in which case unseen ids extend them.
    The header row is optional. ``horizon`` defaults to the latest timestamp.
    """
    rows = _read_rows(path, delimiter, 3)
    if rows and _is_header(rows[0][1]):
        rows = rows[1:]
    users = {lab: n for n, lab in enumerate(user_labels or ())}
    items = {lab: n for n, lab in enumerate(item_labels or ())}
    times, us, ps = [], [], []
    for rownum, (u, p, ts) in rows:
        try:
            t = float(ts)
        except ValueError:
            raise DataError(f"timestamp {ts!r} is not a number", row=rownum) from None
        if not np.isfinite(t) or t < 0:
            raise DataError(f"invalid timestamp {ts!r}", row=rownum)
        times.append(t)
        us.append(users.setdefault(u, len(users)))
        ps.append(items.setdefault(p, len(items)))
    if horizon is None:
        if not times:
            raise DataError("empty event log and no horizon given")
        horizon = max(times)
    elif times and max(times) > horizon:
        raise DataError(f"events after the horizon {horizon}")
    return EventHistory(
        times, us, ps, horizon, len(users), len(items),
        user_labels=tuple(users), item_labels=tuple(items),
    )


def write_events(history: EventHistory, path, labels=True):
    """Write the log format read by :func:`load_events` (with header)."""
    ulab = history.user_labels if labels and history.user_labels else None
    plab = history.item_labels if labels and history.item_labels else None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp"])
        for t, u, p in zip(history.times, history.users, history.items):
            w.writerow([ulab[u] if ulab else int(u), plab[p] if plab else int(p), repr(float(t))])


def load_network(path, user_labels: Sequence[str] | None = None, n_users=None,
                 delimiter=None, self_loops=True) -> SocialNetwork:
    """Read a ``follower_id,followee_id`` edge list.

    With ``user_labels`` the raw ids are resolved through the event log's
    index map; edges naming unknown users are rejected.
    """
    rows = _read_rows(path, delimiter, 2)
    if rows and rows[0][1][0].lower().startswith("follower"):
        rows = rows[1:]
    lookup = {lab: n for n, lab in enumerate(user_labels)} if user_labels is not None else None
    if n_users is None:
        if lookup is None:
            raise DataError("n_users or user_labels is required")
        n_users = len(lookup)
    follows = []
    for rownum, (a, b) in rows:
        try:
            if lookup is not None:
                follows.append((lookup[a], lookup[b]))
            else:
                follows.append((int(a), int(b)))
        except (KeyError, ValueError):
            raise DataError(f"unknown user in edge {a!r} -> {b!r}", row=rownum) from None
    try:
        return SocialNetwork.from_follows(n_users, follows, self_loops=self_loops)
    except DataError as exc:
        raise DataError(f"{exc} (network file {path})") from None


def write_network(network: SocialNetwork, path, user_labels=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["follower_id", "followee_id"])
        for v, u in network.edges:
            if v == u:
                continue
            if user_labels:
                w.writerow([user_labels[u], user_labels[v]])
            else:
                w.writerow([int(u), int(v)])


def write_index_map(labels: Sequence[str], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for n, lab in enumerate(labels):
            w.writerow([n, lab])


def read_index_map(path) -> list[str]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [lab for _, lab in sorted(((int(n), lab) for n, lab in rows))]
