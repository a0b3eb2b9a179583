"""Load-profile clustering, greedy 1-D clustering of MCI values, MCI trajectories."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _accel
from .dispatch import BusMismatch, compute_mci
from .model import UserProfile, ZeroLoad

__all__ = ["Cluster", "InvalidK", "KMeansResult", "TrajectorySet", "GroupDynamics",
           "normalize_profile", "lloyd", "kmeans", "greedy_1d_cluster", "mci_trajectories",
           "group_dynamics", "synthetic_users", "assignment_csv", "trajectory_csv"]


class InvalidK(ValueError):
    pass


@dataclass(frozen=True)
class Cluster:
    label: int
    member_ids: tuple
    centroid: np.ndarray | None = field(default=None, repr=False)
    interval: tuple[float, float] | None = None

    @property
    def size(self) -> int:
        return len(self.member_ids)


def normalize_profile(user: UserProfile | Sequence[float], norm: str = "l1") -> np.ndarray:
    load = np.asarray(user.load if isinstance(user, UserProfile) else user, dtype=float)
    if norm == "l1":
        scale = np.abs(load).sum()
    elif norm == "l2":
        scale = float(np.sqrt(load @ load))
    else:
        raise ValueError(f"unknown norm {norm!r}")
    if not scale > 0:
        raise ZeroLoad("cannot normalize an all-zero load profile")
    return load / scale


# ---------------------------------------------------------------------------
# Lloyd's k-means


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    history: tuple[float, ...]      # within-cluster sum of squares after each assignment
    iterations: int

    @property
    def inertia(self) -> float:
        return self.history[-1]


def _sq_dist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _farthest_point_init(X, k, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    dmin = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def lloyd(X, k: int = 25, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd iterations from a farthest-point start; deterministic for a given seed."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("profiles must form an (n, T) array")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    C = _farthest_point_init(X, k, rng)
    labels = np.full(n, -1)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        D = _sq_dist(X, C)
        new = np.argmin(D, axis=1)
        # an emptied cluster takes the point currently worst served by its centroid
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            err = D[np.arange(n), new]
            err[counts[new] <= 1] = -1.0
            far = int(np.argmax(err))
            counts[new[far]] -= 1
            new[far] = j
            counts[j] = 1
            C[j] = X[far]
            D[:, j] = ((X - X[far]) ** 2).sum(axis=1)
        history.append(float(D[np.arange(n), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            C[j] = X[labels == j].mean(axis=0)
    final = float(((X - C[labels]) ** 2).sum())
    if final < history[-1]:
        history.append(final)
    return KMeansResult(labels, C, tuple(history), it)


def kmeans(profiles, k: int = 25, seed: int = 0, max_iter: int = 300,
           ids: Sequence | None = None) -> list[Cluster]:
    """Cluster unit-sum profiles; labels are ordered by first appearance."""
    X = np.asarray(profiles, dtype=float)
    res = lloyd(X, k=k, seed=seed, max_iter=max_iter)
    ids = list(range(X.shape[0])) if ids is None else list(ids)
    if len(ids) != X.shape[0]:
        raise ValueError("ids and profiles differ in length")
    order = list(dict.fromkeys(res.labels.tolist()))
    return [Cluster(label, tuple(ids[i] for i in np.flatnonzero(res.labels == j)),
                    centroid=res.centroids[j].copy())
            for label, j in enumerate(order)]


# ---------------------------------------------------------------------------
# greedy clustering on a line


def greedy_1d_cluster(mci: Sequence[tuple], r: float) -> list[Cluster]:
    """Sort ascending and cut maximal runs whose values stay within ``r`` of the run's first."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    if len(mci) == 0:
        return []
    ids = [p[0] for p in mci]
    vals = np.array([float(p[1]) for p in mci])
    order = np.argsort(vals, kind="stable")
    sv = np.ascontiguousarray(vals[order])
    starts = list(_accel.kernels.greedy_runs(sv, float(r))) + [sv.size]
    out = []
    for label, (a, b) in enumerate(zip(starts[:-1], starts[1:])):
        members = tuple(ids[i] for i in order[a:b])
        out.append(Cluster(label, members, interval=(float(sv[a]), float(sv[b - 1]))))
    return out


# ---------------------------------------------------------------------------
# trajectories over a sweep


def _user_map(users):
    return {u.user_id: u for u in users}


def _check_buses(sweep, users):
    if sweep.kind == "pool":
        return
    known = set(sweep.solutions[0].bus_ids)
    for u in users:
        if u.bus_id not in known:
            raise BusMismatch(f"user {u.user_id} sits on unknown bus {u.bus_id}")


@dataclass(frozen=True)
class TrajectorySet:
    grid: np.ndarray
    keys: tuple[tuple[int, int], ...]        # (cluster label, bus id)
    members: tuple[tuple, ...]
    profiles: np.ndarray = field(repr=False)  # representative normalized profile per key
    mci: np.ndarray = field(repr=False)       # (keys, grid)
    cmci: np.ndarray = field(repr=False)      # (keys,)
    vmci: np.ndarray = field(repr=False)      # (keys, grid)

    def row(self, label: int, bus: int | None = None) -> int:
        for k, (lab, b) in enumerate(self.keys):
            if lab == label and (bus is None or b == bus):
                return k
        raise KeyError((label, bus))


def mci_trajectories(sweep, users: Sequence[UserProfile], clusters: Sequence[Cluster],
                     norm: str = "l1") -> TrajectorySet:
    """MCI(E) of each cluster's centroid profile, split into a constant and a varying part.

    Members of one cluster may sit on different buses; each (cluster, bus) pair
    gets its own trajectory. The constant part is the centroid's weighted
    a*d+b at generator buses and its E=0 price average at pure-load buses.
    """
    _check_buses(sweep, users)
    by_id = _user_map(users)
    base = sweep.prices[0] if sweep.grid[0] == 0.0 else None
    if base is None:
        from .dispatch import compute_prices
        base = compute_prices(sweep.baseline)
    keys, members, reps = [], [], []
    for cl in clusters:
        buses: dict[int, list] = {}
        for uid in cl.member_ids:
            if uid not in by_id:
                raise KeyError(f"cluster {cl.label} names unknown user {uid}")
            buses.setdefault(by_id[uid].bus_id, []).append(uid)
        for bus in sorted(buses):
            prof = np.mean([normalize_profile(by_id[uid], norm) for uid in buses[bus]], axis=0)
            keys.append((cl.label, bus))
            members.append(tuple(buses[bus]))
            reps.append(prof)
    P = len(sweep.grid)
    mci = np.empty((len(keys), P))
    cmci = np.empty(len(keys))
    for k, ((label, bus), prof) in enumerate(zip(keys, reps)):
        rep = UserProfile(f"cluster{label}", bus, prof)
        for j, pr in enumerate(sweep.prices):
            mci[k, j] = compute_mci(pr, rep).mci
        c = compute_mci(base, rep)
        cmci[k] = c.cmci if np.isfinite(c.cmci) else c.mci
    return TrajectorySet(np.asarray(sweep.grid), tuple(keys), tuple(members),
                         np.array(reps).reshape(len(keys), -1), mci, cmci, mci - cmci[:, None])


@dataclass(frozen=True)
class GroupDynamics:
    grid: np.ndarray
    clusterings: tuple[tuple[Cluster, ...], ...]
    flows: tuple[dict, ...]        # flows[j][(a, b)]: users moving from cluster a at j to b at j+1
    counts: np.ndarray
    values: np.ndarray = field(repr=False)   # (users, grid) MCI

    @property
    def count_non_increasing(self) -> bool:
        return bool(np.all(np.diff(self.counts) <= 0))


def user_mci(sweep, users: Sequence[UserProfile]) -> np.ndarray:
    _check_buses(sweep, users)
    return np.array([[compute_mci(pr, u).mci for pr in sweep.prices] for u in users])


def group_dynamics(sweep, users: Sequence[UserProfile], r: float) -> GroupDynamics:
    values = user_mci(sweep, users).reshape(len(users), len(sweep.grid))
    ids = [u.user_id for u in users]
    clusterings = []
    for j in range(len(sweep.grid)):
        clusterings.append(tuple(greedy_1d_cluster(list(zip(ids, values[:, j])), r)))
    flows = []
    for A, B in zip(clusterings[:-1], clusterings[1:]):
        where = {uid: cl.label for cl in B for uid in cl.member_ids}
        link: dict = {}
        for cl in A:
            for uid in cl.member_ids:
                key = (cl.label, where[uid])
                link[key] = link.get(key, 0) + 1
        flows.append(link)
    counts = np.array([len(c) for c in clusterings])
    return GroupDynamics(np.asarray(sweep.grid), tuple(clusterings), tuple(flows), counts, values)


# ---------------------------------------------------------------------------
# synthetic users and export


def synthetic_users(n: int, horizon: int, bus_ids: Sequence[int], seed: int = 0,
                    archetypes: np.ndarray | None = None, noise: float = 0.05) -> list[UserProfile]:
    """Random positive profiles scattered around a few archetypes."""
    rng = np.random.default_rng(seed)
    if archetypes is None:
        t = np.arange(horizon)
        archetypes = np.array([
            1.0 + 0.8 * np.sin(2 * np.pi * (t - 6) / horizon),
            1.0 + 0.8 * np.cos(2 * np.pi * t / horizon),
            np.ones(horizon),
        ])
    archetypes = np.atleast_2d(np.asarray(archetypes, float))
    out = []
    for i in range(n):
        base = archetypes[rng.integers(len(archetypes))]
        scale = rng.uniform(0.5, 2.0)
        load = np.maximum(base * scale * (1 + noise * rng.standard_normal(horizon)), 1e-3)
        out.append(UserProfile(f"u{i:04d}", int(bus_ids[rng.integers(len(bus_ids))]),
                               np.round(load, 6)))
    return out


def _f(v) -> str:
    return format(float(v), ".9g")


ASSIGNMENT_HEADER = ["user_id", "cluster"]
TRAJECTORY_HEADER = ["cluster", "bus", "E", "mci", "cmci", "vmci"]


def assignment_csv(clusters: Sequence[Cluster], E: float | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ASSIGNMENT_HEADER + (["E"] if E is not None else []))
    for cl in clusters:
        for uid in cl.member_ids:
            w.writerow([uid, cl.label] + ([_f(E)] if E is not None else []))
    return buf.getvalue()


def dynamics_csv(dyn: GroupDynamics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ASSIGNMENT_HEADER + ["E"])
    for E, clusters in zip(dyn.grid, dyn.clusterings):
        for cl in clusters:
            for uid in cl.member_ids:
                w.writerow([uid, cl.label, _f(E)])
    return buf.getvalue()


def trajectory_csv(ts: TrajectorySet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for k, (label, bus) in enumerate(ts.keys):
        for j, E in enumerate(ts.grid):
            w.writerow([label, bus, _f(E), _f(ts.mci[k, j]), _f(ts.cmci[k]), _f(ts.vmci[k, j])])
    return buf.getvalue()


def read_assignment_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["cluster"] = int(r["cluster"])
        if "E" in r:
            r["E"] = float(r["E"])
    return rows
