"""End-to-end replay of a request trace through the DTN cache network.

Four modes are compared:

``no_cache``
    every request is a transfer from the origin facility to the user's DTN.
``lru_only``
    read-through LRU cache at each user's home DTN.
``virtual_groups``
    adds k-means virtual groups; each group's DTN keeps a copy of objects
    that several members asked for, and any DTN may serve a peer.
``smart_cache``
    adds per-stream pattern prediction, pinned pre-fetches, and pushes of
    newly published chunks to real-time subscribers.
"""

import csv
import math
import statistics
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from lfdata.cachenet import (
    LOCAL, ORIGIN, TIERS, CacheNetwork, SegmentKey, build_virtual_groups, segments_for,
)
from lfdata.errors import ConfigError, ValidationError
from lfdata.netsim import Simulator
from lfdata.workload import (
    OVERLAPPING, REALTIME, REGULAR, ClassifierConfig, classify_user_pattern,
)

MODES = ("no_cache", "lru_only", "virtual_groups", "smart_cache")
_TIER_RANK = {t: i for i, t in enumerate(TIERS)}


@dataclass(frozen=True)
class PredictedRequest:
    user_id: str
    object_id: str
    predicted_t: float
    window: tuple
    kind: str
    history_len: int
    period_s: float


@dataclass(frozen=True)
class PrefetchTask:
    segments: tuple
    target_dtn: str
    issue_t: float
    pin_until: float


@dataclass
class Subscription:
    user_ids: set
    object_id: str
    target_dtn: str
    last_seen: float
    active: bool = True


def predict_next(pattern, history):
    """Next request of one (user, object) stream, or ``None`` if not predictable."""
    if not history or pattern.kind not in (REGULAR, OVERLAPPING) or pattern.period_s <= 0:
        return None
    last = history[-1]
    w_end = last.window[1]
    if pattern.kind == REGULAR:
        window = (w_end, w_end + pattern.window_s)
    else:
        start = w_end - pattern.overlap_s
        window = (start, start + pattern.window_s)
    if not window[0] < window[1]:
        return None
    return PredictedRequest(last.user_id, last.object_id, last.t_arrive + pattern.period_s,
                            window, pattern.kind, pattern.history_len, pattern.period_s)


def schedule_prefetch(pred, segments, target_dtn, est_transfer_s, now, lead_factor=1.2):
    lead = max(0.0, lead_factor * est_transfer_s)
    issue = max(now, pred.predicted_t - lead)
    return PrefetchTask(tuple(segments), target_dtn, issue, pred.predicted_t + pred.period_s)


def publication_time(chunk_index, chunk_duration):
    """Chunk ``i`` of a live object becomes available at the end of its interval."""
    return (chunk_index + 1) * chunk_duration


@dataclass
class ScenarioConfig:
    mode: str = "smart_cache"
    chunk_duration_s: float = 3600.0
    cv_max: float = 0.2
    realtime_threshold_s: float = 300.0
    min_history: int = 3
    capacity_bytes: object = None
    k: int = None
    seed: int = 0
    lead_factor: float = 1.2
    history_window: int = 10
    reference_size: float = 1e8
    stream_idle_chunks: float = 2.0
    access_bandwidth_Bps: float = 125e6
    access_latency_s: float = 0.001

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.chunk_duration_s <= 0:
            raise ConfigError("chunk_duration_s must be > 0")

    @property
    def classifier(self):
        return ClassifierConfig(self.cv_max, self.realtime_threshold_s, self.min_history)

    def to_dict(self):
        return asdict(self)


@dataclass
class Metrics:
    mode: str = ""
    seed: int = 0
    requests: int = 0
    hits: dict = field(default_factory=lambda: {t: 0 for t in TIERS})
    bytes: dict = field(default_factory=lambda: {t: 0.0 for t in TIERS})
    latencies: list = field(default_factory=list)
    origin_requests: int = 0
    wan_bytes: float = 0.0
    prefetch_bytes: float = 0.0
    wasted_prefetch_bytes: float = 0.0

    def fraction(self, tier):
        return self.hits[tier] / self.requests if self.requests else 0.0

    def latency_values(self):
        return [lat for _, _, lat in self.latencies]

    @property
    def mean_latency(self):
        vals = self.latency_values()
        return statistics.fmean(vals) if vals else 0.0

    def summary(self):
        vals = sorted(self.latency_values())
        row = {"mode": self.mode, "seed": self.seed, "requests": self.requests}
        for t in TIERS:
            row[f"{t}_fraction"] = self.fraction(t)
        row["mean_latency_s"] = statistics.fmean(vals) if vals else 0.0
        row["median_latency_s"] = statistics.median(vals) if vals else 0.0
        row["p95_latency_s"] = vals[min(len(vals) - 1, math.ceil(0.95 * len(vals)) - 1)] if vals else 0.0
        row["origin_requests"] = self.origin_requests
        row["wan_bytes"] = self.wan_bytes
        row["wasted_prefetch_bytes"] = self.wasted_prefetch_bytes
        return row


METRICS_HEADER = (
    ["mode", "seed", "requests"] + [f"{t}_fraction" for t in TIERS]
    + ["mean_latency_s", "median_latency_s", "p95_latency_s", "origin_requests", "wan_bytes",
       "wasted_prefetch_bytes"]
)


def write_metrics(path, metrics_list):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n")
        w.writeheader()
        for m in metrics_list:
            w.writerow({k: _cell(v) for k, v in m.summary().items()})


def write_latencies(path, metrics_list):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "seed", "req_id", "tier", "latency_s"])
        for m in metrics_list:
            for rid, tier, lat in m.latencies:
                w.writerow([m.mode, m.seed, rid, tier, _cell(lat)])


def _cell(v):
    if isinstance(v, float):
        return repr(round(v, 9))
    return v


def working_set_bytes(trace, catalog, chunk_duration=3600.0):
    """Total bytes of the distinct segments a trace touches."""
    seen = set()
    total = 0.0
    for req in trace:
        rate = catalog.objects[req.object_id].rate
        for key in segments_for(req, catalog, chunk_duration):
            if key not in seen:
                seen.add(key)
                total += rate * chunk_duration
    return total


class _Pending:
    __slots__ = ("req", "outstanding", "tier", "done", "size")

    def __init__(self, req, size):
        self.req = req
        self.outstanding = 0
        self.tier = LOCAL
        self.done = False
        self.size = size


class DeliverySimulation:
    def __init__(self, trace, catalog, topology, config=None):
        self.config = config or ScenarioConfig()
        self.trace = list(trace)
        self.catalog = catalog
        self.topology = topology
        self._validate()
        cfg = self.config
        self.mode = cfg.mode
        self.C = float(cfg.chunk_duration_s)
        self.sim = Simulator(topology)
        self.metrics = Metrics(mode=cfg.mode, seed=cfg.seed)
        cached = self.mode != "no_cache"
        grouped = self.mode in ("virtual_groups", "smart_cache")
        self.net = CacheNetwork(topology, self._capacities(), use_group=grouped, use_peers=grouped)
        self.cached = cached
        self.grouped = grouped
        self.smart = self.mode == "smart_cache"

        regions = sorted({o.region_id for o in catalog.objects.values()})
        origins = topology.origins
        self._origin_of_region = {r: origins[i % len(origins)] for i, r in enumerate(regions)}

        self.group_of = {}
        self.groups = []
        if grouped and self.trace:
            users = {u: catalog.users[u] for u in sorted({r.user_id for r in self.trace})}
            k = cfg.k if cfg.k is not None else len(topology.dtns)
            self.groups = build_virtual_groups(users, self.trace, catalog, topology, k=k, seed=cfg.seed,
                                               reference_size=cfg.reference_size)
            for g in self.groups:
                for m in g.members:
                    self.group_of[m] = g
        self._group_requesters = defaultdict(set)

        self.inflight = {}
        self.unused_prefetch = {}
        self.streams = defaultdict(lambda: deque(maxlen=cfg.history_window))
        self.subscriptions = {}
        self._predictions = {}

    def _validate(self):
        cat = self.catalog
        for req in self.trace:
            if req.object_id not in cat.objects:
                raise ValidationError(f"request {req.req_id}: unknown object {req.object_id}")
            prof = cat.users.get(req.user_id)
            if prof is None:
                raise ValidationError(f"request {req.req_id}: unknown user {req.user_id}")
            if prof.home_dtn not in self.topology.nodes:
                raise ValidationError(f"user {req.user_id}: home DTN {prof.home_dtn} not in topology")

    def _capacities(self):
        cap = self.config.capacity_bytes
        if cap is None:
            return None
        if isinstance(cap, dict):
            return {k: float(v) for k, v in cap.items()}
        return {d: float(cap) for d in self.topology.dtns}

    # -------------------------------------------------------------- helpers

    def origin_of(self, object_id):
        return self._origin_of_region[self.catalog.objects[object_id].region_id]

    def seg_size(self, key):
        return self.catalog.objects[key.object_id].rate * self.C

    def group_dtn(self, user_id):
        g = self.group_of.get(user_id)
        return g.assigned_dtn if g is not None else None

    def _flow(self, src, dst, size, on_complete):
        if src != dst:
            self.metrics.wan_bytes += size
        return self.sim.start_flow(src, dst, size, on_complete)

    def _arrived(self, node, keys, pin_until=None, prefetch=False):
        now = self.sim.now
        for key in keys:
            size = self.seg_size(key)
            stored = self.net.insert(node, key, size, now, pin_until)
            if prefetch:
                if stored:
                    self.unused_prefetch[(node, key)] = size
                else:
                    self.metrics.wasted_prefetch_bytes += size
            for cb in self.inflight.pop((node, key), ()):
                cb()

    def _fetch(self, keys, src, tier, home, group_dtn, pin_until=None, prefetch=False):
        """Move ``keys`` from ``src`` to ``home``; waiters are released on arrival."""
        for key in keys:
            self.inflight.setdefault((home, key), [])
        if prefetch:
            self.metrics.prefetch_bytes += sum(self.seg_size(k) for k in keys)
        if tier != ORIGIN:
            self._send(src, home, keys, pin_until, prefetch)
            return
        self.metrics.origin_requests += 1
        routes = {}
        for key in keys:
            routes.setdefault(self._relay_target(key.object_id, home, group_dtn), []).append(key)
        for relay in sorted(routes, key=lambda r: (r is not None, r or "")):
            part = routes[relay]
            if relay is None:
                self._send(src, home, part, pin_until, prefetch)
                continue
            fresh = [k for k in part if (relay, k) not in self.inflight and k not in self.net.caches[relay]]
            for key in fresh:
                self.inflight[(relay, key)] = []

            def at_group(_flow, relay=relay, part=part, fresh=fresh):
                self._arrived(relay, fresh)
                self._send(relay, home, part, pin_until, prefetch)

            self._flow(src, relay, sum(self.seg_size(k) for k in part), at_group)

    def _send(self, src, dst, keys, pin_until, prefetch):
        size = sum(self.seg_size(k) for k in keys)
        self._flow(src, dst, size, lambda f: self._arrived(dst, keys, pin_until, prefetch))

    def _relay_target(self, object_id, home, group_dtn):
        if not self.grouped or group_dtn is None or group_dtn == home:
            return None
        if len(self._group_requesters[(group_dtn, object_id)]) < 2:
            return None
        return group_dtn

    def _plan(self, keys, home, group_dtn, exclude_home=False):
        """Split ``keys`` into local hits, in-flight waits and per-source fetch batches."""
        local, waits, batches = [], [], {}
        for key in keys:
            if not exclude_home and self.cached and key in self.net.caches.get(home, ()):
                local.append(key)
            elif (home, key) in self.inflight:
                waits.append(key)
            else:
                if self.cached:
                    tier, node = self.net.locate(key, home, group_dtn, self.seg_size(key),
                                                 exclude=(home,))
                else:
                    tier, node = ORIGIN, None
                if node is None:
                    node = self.origin_of(key.object_id)
                else:
                    self.net.caches[node].get(key)
                batches.setdefault((tier, node), []).append(key)
        return local, waits, batches

    # -------------------------------------------------------------- requests

    def _on_request(self, req):
        m = self.metrics
        m.requests += 1
        home = self.catalog.users[req.user_id].home_dtn
        group_dtn = self.group_dtn(req.user_id) if self.grouped else None
        if group_dtn is not None:
            self._group_requesters[(group_dtn, req.object_id)].add(req.user_id)
        keys = segments_for(req, self.catalog, self.C)
        size = sum(self.seg_size(k) for k in keys)
        pend = _Pending(req, size)

        if not self.cached:
            m.bytes[ORIGIN] += size
            m.origin_requests += 1
            pend.tier = ORIGIN
            pend.outstanding = 1
            self._flow(self.origin_of(req.object_id), home, size, lambda f: self._release(pend))
            return

        local, waits, batches = self._plan(keys, home, group_dtn)
        for key in local:
            self.net.caches[home].get(key)
            self.unused_prefetch.pop((home, key), None)
            m.bytes[LOCAL] += self.seg_size(key)
        for key in waits:
            m.bytes[LOCAL] += self.seg_size(key)
            self.unused_prefetch.pop((home, key), None)
            pend.outstanding += 1
            self.inflight[(home, key)].append(lambda key=key: self._waited(pend, home, key))
        for (tier, node), batch in sorted(batches.items(), key=lambda kv: (_TIER_RANK[kv[0][0]], kv[0][1])):
            if _TIER_RANK[tier] > _TIER_RANK[pend.tier]:
                pend.tier = tier
            m.bytes[tier] += sum(self.seg_size(k) for k in batch)
            pend.outstanding += len(batch)
            self._fetch(batch, node, tier, home, group_dtn)
            for key in batch:
                self.inflight[(home, key)].append(lambda: self._release(pend))
        if pend.outstanding == 0:
            self._finish(pend)

        if self.smart and req.channel == "api":
            self._update_stream(req, home)

    def _waited(self, pend, home, key):
        self.unused_prefetch.pop((home, key), None)
        self._release(pend)

    def _release(self, pend):
        pend.outstanding -= 1
        if pend.outstanding == 0:
            self._finish(pend)

    def _finish(self, pend):
        pend.done = True
        m = self.metrics
        m.hits[pend.tier] += 1
        # Last hop from the home DTN to the user's host: uncontended, outside the WAN.
        cfg = self.config
        last_mile = cfg.access_latency_s + pend.size / cfg.access_bandwidth_Bps if cfg.access_bandwidth_Bps else 0.0
        m.latencies.append((pend.req.req_id, pend.tier, self.sim.now - pend.req.t_arrive + last_mile))

    # -------------------------------------------------------------- prediction

    def _update_stream(self, req, home):
        hist = self.streams[(req.user_id, req.object_id)]
        hist.append(req)
        pattern = classify_user_pattern(list(hist), self.config.classifier)
        if pattern.kind == REALTIME:
            self._subscribe(req, home)
            return
        pred = predict_next(pattern, list(hist))
        if pred is None:
            return
        probe = replace(req, t_arrive=pred.predicted_t, window=pred.window)
        batch = self._predictions.get(req.user_id)
        if batch is None:
            # Flushed after every same-instant request of this user has been served.
            batch = self._predictions[req.user_id] = []
            self.sim.schedule(self.sim.now, self._flush_predictions, req.user_id, home)
        batch.append((pred, segments_for(probe, self.catalog, self.C)))

    def _flush_predictions(self, user_id, home):
        batch = self._predictions.pop(user_id)
        group_dtn = self.group_dtn(user_id)
        est = self._estimate([k for _, keys in batch for k in keys], home, group_dtn)
        tasks = {}
        for pred, keys in batch:
            task = schedule_prefetch(pred, keys, home, est, self.sim.now, self.config.lead_factor)
            prev = tasks.get(task.issue_t)
            if prev is not None:
                task = PrefetchTask(prev.segments + task.segments, home, task.issue_t,
                                    max(prev.pin_until, task.pin_until))
            tasks[task.issue_t] = task
        for issue_t in sorted(tasks):
            self.sim.schedule(issue_t, self._issue_prefetch, tasks[issue_t], user_id)

    def _estimate(self, keys, home, group_dtn):
        """Uncontended time to bring every missing key to ``home``.

        All batches share the home link, so each route is charged the full
        byte count; routes through a group DTN are store-and-forward.
        """
        routes = set()
        total = 0.0
        for key in keys:
            if key in self.net.caches.get(home, ()) or (home, key) in self.inflight:
                continue
            size = self.seg_size(key)
            total += size
            tier, node = self.net.locate(key, home, group_dtn, size, exclude=(home,))
            if node is None:
                src = self.origin_of(key.object_id)
                relay = self._relay_target(key.object_id, home, group_dtn)
                routes.add((src, relay) if relay is not None else (src,))
            else:
                routes.add((node,))
        est = 0.0
        topo = self.topology
        for route in routes:
            hops = list(route) + [home]
            est = max(est, sum(topo.transfer_estimate(a, b, total) for a, b in zip(hops, hops[1:])))
        return est

    def _issue_prefetch(self, task, user_id):
        home = task.target_dtn
        group_dtn = self.group_dtn(user_id)
        _, _, batches = self._plan(task.segments, home, group_dtn)
        cache = self.net.caches.get(home)
        for key in task.segments:
            if cache is not None and key in cache:
                cache.pin(key, task.pin_until)
        for (tier, node), batch in sorted(batches.items(), key=lambda kv: (_TIER_RANK[kv[0][0]], kv[0][1])):
            self._fetch(batch, node, tier, home, group_dtn, pin_until=task.pin_until, prefetch=True)
        if batches:
            keys = [k for b in batches.values() for k in b]
            self.sim.schedule(task.pin_until, self._expire, home, keys)

    def _expire(self, node, keys):
        for key in keys:
            size = self.unused_prefetch.pop((node, key), None)
            if size is not None:
                self.metrics.wasted_prefetch_bytes += size

    # -------------------------------------------------------------- streaming

    def _subscribe(self, req, home):
        key = (req.object_id, home)
        sub = self.subscriptions.get(key)
        if sub is not None and sub.active:
            sub.user_ids.add(req.user_id)
            sub.last_seen = self.sim.now
            return
        sub = Subscription({req.user_id}, req.object_id, home, self.sim.now)
        self.subscriptions[key] = sub
        nxt = (math.floor(self.sim.now / self.C) + 1) * self.C
        self.sim.schedule(nxt, self._publish, sub)

    def _publish(self, sub):
        """Push the chunk that just became available to the subscriber's DTN."""
        now = self.sim.now
        if now - sub.last_seen > self.config.stream_idle_chunks * self.C:
            sub.active = False
            return
        chunk = int(round(now / self.C)) - 1
        key = SegmentKey(sub.object_id, chunk)
        home = sub.target_dtn
        pin_until = now + self.C
        cache = self.net.caches.get(home)
        if cache is not None and key in cache:
            cache.pin(key, pin_until)
        elif (home, key) not in self.inflight:
            user = min(sub.user_ids)
            group_dtn = self.group_dtn(user)
            tier, node = self.net.locate(key, home, group_dtn, self.seg_size(key), exclude=(home,))
            self._fetch([key], node or self.origin_of(sub.object_id), tier, home, group_dtn,
                        pin_until=pin_until, prefetch=True)
            self.sim.schedule(pin_until, self._expire, home, [key])
        self.sim.schedule(now + self.C, self._publish, sub)

    # -------------------------------------------------------------- driver

    def run(self):
        # Requests are enqueued one at a time so that a chunk published at
        # instant t is pushed before a request arriving at t is served.
        self._arrivals = iter(sorted(self.trace, key=lambda r: (r.t_arrive, r.req_id)))
        self._enqueue_next()
        self.sim.run()
        return self.metrics

    def _enqueue_next(self):
        req = next(self._arrivals, None)
        if req is not None:
            self.sim.schedule(req.t_arrive, self._arrive, req)

    def _arrive(self, req):
        self._enqueue_next()
        self._on_request(req)


def run_scenario(trace, catalog, topology, config=None):
    return DeliverySimulation(trace, catalog, topology, config).run()
