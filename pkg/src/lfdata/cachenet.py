"""Distributed cache layer: segment keys, per-DTN LRU stores, virtual groups."""

import json
import math
from collections import OrderedDict, namedtuple
from dataclasses import dataclass, field

import numpy as np

from lfdata.errors import CacheError, ConfigError, ValidationError

SegmentKey = namedtuple("SegmentKey", ["object_id", "chunk_index"])

LOCAL, GROUP, PEER, ORIGIN = "local", "group", "peer", "origin"
TIERS = (LOCAL, GROUP, PEER, ORIGIN)


def segment_size(obj, chunk_duration):
    return obj.rate * chunk_duration


def segments_for(request, catalog, chunk_duration=3600.0):
    """Every chunk of the requested object that intersects the request window."""
    if request.object_id not in catalog.objects:
        raise ValidationError(f"unknown object {request.object_id}")
    start, end = request.window
    if not start < end:
        raise ValidationError(f"empty window {request.window}")
    first = max(0, math.floor(start / chunk_duration))
    last = math.ceil(end / chunk_duration) - 1
    return [SegmentKey(request.object_id, i) for i in range(first, last + 1)]


@dataclass
class _Entry:
    size: float
    pinned_until: float = None


class LruCache:
    """Byte-budgeted LRU store whose pinned entries survive eviction until their deadline."""

    def __init__(self, capacity):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = float(capacity)
        self.used = 0.0
        self.entries = OrderedDict()

    def __contains__(self, key):
        return key in self.entries

    def __len__(self):
        return len(self.entries)

    def get(self, key):
        entry = self.entries.get(key)
        if entry is None:
            return False
        self.entries.move_to_end(key)
        return True

    def _pinned(self, entry, now):
        return entry.pinned_until is not None and entry.pinned_until > now

    def put(self, key, size, now=0.0, pin_until=None):
        """Insert or refresh ``key``; return the evicted keys in eviction order."""
        if size > self.capacity:
            raise CacheError(f"entry of {size} bytes exceeds capacity {self.capacity}")
        entry = self.entries.get(key)
        if entry is not None:
            self.entries.move_to_end(key)
            if pin_until is not None:
                entry.pinned_until = max(entry.pinned_until or pin_until, pin_until)
            return []
        need = self.used + size - self.capacity
        victims = []
        if need > 0:
            freed = 0.0
            for k, e in self.entries.items():
                if self._pinned(e, now):
                    continue
                victims.append(k)
                freed += e.size
                if freed >= need:
                    break
            if freed < need:
                raise CacheError("not enough unpinned space")
            for k in victims:
                self.used -= self.entries.pop(k).size
        self.entries[key] = _Entry(float(size), pin_until)
        self.used += size
        return victims

    def pin(self, key, until):
        entry = self.entries.get(key)
        if entry is None:
            raise CacheError(f"cannot pin absent key {key}")
        entry.pinned_until = until if entry.pinned_until is None else max(entry.pinned_until, until)

    def unpin(self, key):
        entry = self.entries.get(key)
        if entry is None:
            raise CacheError(f"cannot unpin absent key {key}")
        entry.pinned_until = None

    def keys(self):
        return list(self.entries)


def lru_access(cache, key, size=0.0, now=0.0, op="get", until=None):
    """Single dispatch over cache operations, returning an outcome record.

    ``until`` is the pin deadline for ``put`` and ``pin``; a bare ``pin`` lasts forever.
    """
    if op == "get":
        return {"op": op, "hit": cache.get(key), "evicted": []}
    if op == "put":
        return {"op": op, "inserted": True, "evicted": cache.put(key, size, now, until)}
    if op == "pin":
        cache.pin(key, float("inf") if until is None else until)
        return {"op": op, "evicted": []}
    if op == "unpin":
        cache.unpin(key)
        return {"op": op, "evicted": []}
    raise ValueError(f"unknown cache op {op!r}")


# ---------------------------------------------------------------- virtual groups


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    wcss_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def wcss(self):
        return self.wcss_history[-1]


def _wcss(X, labels, centroids):
    return float(((X - centroids[labels]) ** 2).sum())


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centroids = [X[rng.integers(n)]]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centroids, dtype=float)


def kmeans(X, k, seed=0, max_iter=100):
    """Lloyd's algorithm with k-means++ initialisation.

    Empty clusters are re-seeded with the point farthest from its centroid.
    Stops once assignments no longer change.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > n:
        raise ConfigError(f"k={k} exceeds number of points {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(X, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        for j in range(k):
            if not np.any(new == j):
                far = int(d2[np.arange(n), new].argmax())
                centroids[j] = X[far]
                new[far] = j
                d2[:, j] = ((X - X[far]) ** 2).sum(axis=1)
        history.append(_wcss(X, new, centroids))
        stable = labels is not None and np.array_equal(new, labels)
        labels = new
        centroids = np.array([X[labels == j].mean(axis=0) for j in range(k)])
        history.append(_wcss(X, labels, centroids))
        if stable:
            break
    return KMeansResult(labels, centroids, history, it)


def user_features(users, trace, catalog, alpha=1.0, beta=1.0):
    """Feature rows ``[alpha * coord || beta * interest histogram]``, min-max normalised.

    The interest histogram is each user's request share per (region, kind).
    Returns ``(user_ids, matrix)``.
    """
    user_ids = sorted(users)
    cells = sorted({(o.region_id, o.data_kind) for o in catalog.objects.values()})
    col = {c: i for i, c in enumerate(cells)}
    hist = np.zeros((len(user_ids), len(cells)))
    row = {u: i for i, u in enumerate(user_ids)}
    for req in trace:
        if req.user_id in row:
            obj = catalog.objects[req.object_id]
            hist[row[req.user_id], col[(obj.region_id, obj.data_kind)]] += 1
    sums = hist.sum(axis=1, keepdims=True)
    hist = np.divide(hist, sums, out=np.zeros_like(hist), where=sums > 0)
    coords = np.array([users[u].coord for u in user_ids], dtype=float).reshape(len(user_ids), 2)
    X = np.hstack([coords, hist])
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    X = (X - lo) / span
    X[:, :2] *= alpha
    X[:, 2:] *= beta
    return user_ids, X


@dataclass
class VirtualGroup:
    group_id: int
    members: list
    centroid: list
    assigned_dtn: str


def assign_group_dtn(members, topology, users, reference_size=1e8):
    """Candidate DTN with the lowest summed transfer cost from members' home DTNs."""
    best = None
    for cand in topology.dtns:
        cost = sum(topology.transfer_estimate(cand, users[m].home_dtn, reference_size) for m in members)
        if best is None or cost < best[0]:
            best = (cost, cand)
    if best is None:
        raise ValidationError("topology has no cache-capable DTN")
    return best[1]


def build_virtual_groups(users, trace, catalog, topology, k=None, seed=0, alpha=1.0, beta=1.0,
                         reference_size=1e8, max_iter=100):
    user_ids, X = user_features(users, trace, catalog, alpha, beta)
    if not user_ids:
        return []
    k = len(topology.dtns) if k is None else k
    k = min(k, len(user_ids))
    result = kmeans(X, k, seed=seed, max_iter=max_iter)
    groups = []
    for j in range(k):
        members = [u for u, lab in zip(user_ids, result.labels) if lab == j]
        if not members:
            continue
        dtn = assign_group_dtn(members, topology, users, reference_size)
        groups.append(VirtualGroup(j, members, result.centroids[j].tolist(), dtn))
    return groups


def placement_json(groups):
    return json.dumps(
        {"groups": [{"group_id": g.group_id, "members": g.members, "centroid": g.centroid,
                     "assigned_dtn": g.assigned_dtn} for g in groups],
         "assignments": {m: g.group_id for g in groups for m in g.members}},
        indent=1, sort_keys=True,
    )


# ---------------------------------------------------------------- lookup


class CacheNetwork:
    """Per-DTN caches plus the lookup chain home -> group -> peers -> origin.

    Peers are probed through an omniscient directory; probing is free.
    """

    def __init__(self, topology, capacities=None, use_group=True, use_peers=True):
        self.topology = topology
        capacities = capacities or {}
        self.caches = {d: LruCache(capacities.get(d, topology.nodes[d].storage_bytes))
                       for d in topology.dtns}
        self.use_group = use_group
        self.use_peers = use_peers
        self._peer_order = {}

    def peers_by_cost(self, home, size):
        key = (home, size)
        if key not in self._peer_order:
            self._peer_order[key] = sorted(
                (d for d in self.caches if d != home),
                key=lambda d: (self.topology.transfer_estimate(d, home, size), d),
            )
        return self._peer_order[key]

    def locate(self, key, home, group_dtn=None, size=1.0, exclude=()):
        """Return ``(tier, node)`` of the first holder of ``key`` without touching recency."""
        if home in self.caches and key in self.caches[home] and home not in exclude:
            return LOCAL, home
        if self.use_group and group_dtn is not None and group_dtn != home \
                and group_dtn in self.caches and key in self.caches[group_dtn] \
                and group_dtn not in exclude:
            return GROUP, group_dtn
        if self.use_peers:
            for d in self.peers_by_cost(home, size):
                if d != group_dtn and d not in exclude and key in self.caches[d]:
                    return PEER, d
        return ORIGIN, None

    def lookup_chain(self, key, home, group_dtn=None, size=1.0, now=0.0, origin=None):
        """Find ``key`` and read it through into the home cache.

        Returns ``(tier, node)``; ``node`` is ``origin`` for origin fetches.
        """
        tier, node = self.locate(key, home, group_dtn, size)
        if node is not None:
            self.caches[node].get(key)
        if tier != LOCAL:
            self.insert(home, key, size, now)
        return tier, node if node is not None else origin

    def insert(self, node, key, size, now, pin_until=None):
        """Best-effort insertion; returns False when the cache cannot make room."""
        cache = self.caches.get(node)
        if cache is None:
            return False
        try:
            cache.put(key, size, now, pin_until)
        except CacheError:
            return False
        return True
