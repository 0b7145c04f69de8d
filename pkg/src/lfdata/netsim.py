"""Discrete-event simulation of bulk flows over a DTN topology.

Every link shares its bandwidth equally among the flows crossing it, and a
flow runs at the smallest share along its path.  Rates change only when a
flow starts or finishes transmitting, so completion times are exact.  Path
latency is charged once, after the last byte leaves the source.
"""

import heapq
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

from lfdata.errors import RoutingError, ValidationError

DEFAULT_TOPOLOGY = Path(__file__).with_name("data") / "topology.json"


@dataclass(frozen=True)
class Node:
    node_id: str
    storage_bytes: float = 0.0
    is_origin: bool = False


@dataclass(frozen=True)
class Link:
    a: str
    b: str
    bandwidth: float
    latency: float

    @property
    def key(self):
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)


class Topology:
    def __init__(self, nodes, links):
        self.nodes = {}
        for n in nodes:
            if n.node_id in self.nodes:
                raise ValidationError(f"duplicate node {n.node_id}")
            self.nodes[n.node_id] = n
        self.links = {}
        self.adj = {nid: [] for nid in self.nodes}
        for ln in links:
            if ln.a not in self.nodes or ln.b not in self.nodes:
                raise ValidationError(f"link {ln.a}-{ln.b} references an unknown node")
            if ln.a == ln.b:
                raise ValidationError(f"self-loop on {ln.a}")
            if not ln.bandwidth > 0:
                raise ValidationError(f"link {ln.a}-{ln.b}: bandwidth must be > 0")
            if ln.latency < 0:
                raise ValidationError(f"link {ln.a}-{ln.b}: negative latency")
            if ln.key in self.links:
                raise ValidationError(f"duplicate link {ln.a}-{ln.b}")
            self.links[ln.key] = ln
            self.adj[ln.a].append(ln.b)
            self.adj[ln.b].append(ln.a)
        for nbrs in self.adj.values():
            nbrs.sort()
        self._routes = {}

    def validate(self):
        if not self.nodes:
            raise ValidationError("empty topology")
        if not any(n.is_origin for n in self.nodes.values()):
            raise ValidationError("topology has no origin node")
        start = min(self.nodes)
        seen, stack = {start}, [start]
        while stack:
            for nb in self.adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != len(self.nodes):
            raise ValidationError("topology is not connected")
        return self

    @property
    def origins(self):
        return sorted(n for n, node in self.nodes.items() if node.is_origin)

    @property
    def dtns(self):
        """Cache-capable nodes: non-origin nodes with storage."""
        return sorted(n for n, node in self.nodes.items()
                      if not node.is_origin and node.storage_bytes > 0)

    def link(self, a, b):
        return self.links[(a, b) if a <= b else (b, a)]

    def route(self, src, dst):
        """Minimum-latency list of links from ``src`` to ``dst``.

        Equal-latency paths are broken by the lexicographically smallest
        node sequence.
        """
        for n in (src, dst):
            if n not in self.nodes:
                raise RoutingError(f"unknown node {n}")
        key = (src, dst)
        if key not in self._routes:
            self._routes[key] = self._dijkstra(src, dst)
        return self._routes[key]

    def _dijkstra(self, src, dst):
        if src == dst:
            return []
        # Labels are (latency, node sequence); comparing tuples gives the tie rule.
        best = {src: (0.0, (src,))}
        heap = [(0.0, (src,))]
        done = set()
        while heap:
            dist, seq = heapq.heappop(heap)
            node = seq[-1]
            if node in done:
                continue
            done.add(node)
            if node == dst:
                return [self.link(a, b) for a, b in zip(seq, seq[1:])]
            for nb in self.adj[node]:
                if nb in done:
                    continue
                cand = (dist + self.link(node, nb).latency, seq + (nb,))
                if nb not in best or cand < best[nb]:
                    best[nb] = cand
                    heapq.heappush(heap, cand)
        raise RoutingError(f"no path from {src} to {dst}")

    def path_latency(self, src, dst):
        return sum(ln.latency for ln in self.route(src, dst))

    def bottleneck(self, src, dst):
        path = self.route(src, dst)
        return min(ln.bandwidth for ln in path) if path else float("inf")

    def transfer_estimate(self, src, dst, size):
        """Uncontended delivery time for ``size`` bytes."""
        if src == dst:
            return 0.0
        return self.path_latency(src, dst) + size / self.bottleneck(src, dst)

    def scaled(self, bandwidth_factor=1.0, storage=None):
        """Copy with every link bandwidth multiplied and optional storage override."""
        nodes = [Node(n.node_id, n.storage_bytes if storage is None else
                      (storage if not n.is_origin else n.storage_bytes), n.is_origin)
                 for n in self.nodes.values()]
        links = [Link(ln.a, ln.b, ln.bandwidth * bandwidth_factor, ln.latency)
                 for ln in self.links.values()]
        return Topology(nodes, links)

    def to_dict(self):
        return {
            "nodes": [{"id": n.node_id, "storage_bytes": n.storage_bytes, "is_origin": n.is_origin}
                      for n in self.nodes.values()],
            "links": [{"a": ln.a, "b": ln.b, "bandwidth_Bps": ln.bandwidth, "latency_s": ln.latency}
                      for ln in self.links.values()],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            nodes = [Node(str(n["id"]), float(n.get("storage_bytes", 0)), bool(n.get("is_origin", False)))
                     for n in data["nodes"]]
            links = [Link(str(ln["a"]), str(ln["b"]), float(ln["bandwidth_Bps"]), float(ln["latency_s"]))
                     for ln in data["links"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed topology: {exc}") from None
        return cls(nodes, links).validate()


def load_topology(path=None):
    path = DEFAULT_TOPOLOGY if path is None else Path(path)
    return Topology.from_dict(json.loads(path.read_text(encoding="utf-8")))


@dataclass(eq=False)
class Flow:
    flow_id: int
    src: str
    dst: str
    size: float
    path: list
    t_start: float
    latency: float
    bytes_done: float = 0.0
    rate: float = 0.0
    t_tx_end: float = None
    t_done: float = None
    on_complete: object = field(default=None, repr=False)


class Simulator:
    """Event loop with a clock, a callback queue and fair-share flows.

    Events are ``(time, seq)``-ordered; ``seq`` is the insertion counter so
    simultaneous events run in the order they were scheduled.
    """

    def __init__(self, topology):
        self.topology = topology
        self.now = 0.0
        self._queue = []
        self._seq = itertools.count()
        self._flow_ids = itertools.count()
        self.active = {}
        self._on_link = {}
        self.flows_started = 0
        self.bytes_requested = 0.0
        self.bytes_delivered = 0.0

    def schedule(self, t, callback, *args):
        if t < self.now:
            t = self.now
        heapq.heappush(self._queue, (t, next(self._seq), callback, args))

    def start_flow(self, src, dst, size, on_complete=None):
        """Start sending ``size`` bytes now; ``on_complete(flow)`` fires on delivery."""
        if size < 0:
            raise ValueError("flow size must be >= 0")
        path = self.topology.route(src, dst)
        flow = Flow(next(self._flow_ids), src, dst, float(size), path, self.now,
                    sum(ln.latency for ln in path), on_complete=on_complete)
        self.flows_started += 1
        self.bytes_requested += flow.size
        if not path or flow.size == 0:
            flow.bytes_done = flow.size
            flow.t_tx_end = self.now
            self.schedule(self.now + flow.latency, self._deliver, flow)
            return flow
        self._progress()
        self.active[flow.flow_id] = flow
        for ln in path:
            self._on_link.setdefault(ln.key, set()).add(flow.flow_id)
        self._recompute_rates()
        return flow

    def _progress(self):
        """Credit active flows with the bytes sent since their rates were set."""
        for f in self.active.values():
            if f._t_rate < self.now:
                f.bytes_done = min(f.size, f.bytes_done + f.rate * (self.now - f._t_rate))
                f._t_rate = self.now

    def _recompute_rates(self):
        for f in self.active.values():
            f.rate = min(ln.bandwidth / len(self._on_link[ln.key]) for ln in f.path)
            f._t_rate = self.now
            f._t_finish = self.now + (f.size - f.bytes_done) / f.rate

    def _next_tx_end(self):
        if not self.active:
            return None
        return min(f._t_finish for f in self.active.values())

    def pending(self):
        return bool(self._queue or self.active)

    def next_time(self):
        times = []
        if self._queue:
            times.append(self._queue[0][0])
        tx = self._next_tx_end()
        if tx is not None:
            times.append(tx)
        return min(times) if times else None

    def advance(self):
        """Process the next event; return ``(time, kind, payload)`` or ``None``."""
        tx = self._next_tx_end()
        if self._queue and (tx is None or self._queue[0][0] <= tx):
            t, _, callback, args = heapq.heappop(self._queue)
            self.now = max(self.now, t)
            callback(*args)
            return (self.now, getattr(callback, "__name__", "callback"), args)
        if tx is None:
            return None
        self.now = max(self.now, tx)
        self._progress()
        finished = [f for f in self.active.values() if f._t_finish <= tx]
        for f in finished:
            f.bytes_done = f.size
            f.t_tx_end = self.now
            del self.active[f.flow_id]
            for ln in f.path:
                users = self._on_link[ln.key]
                users.discard(f.flow_id)
                if not users:
                    del self._on_link[ln.key]
        self._recompute_rates()
        for f in finished:
            self.schedule(self.now + f.latency, self._deliver, f)
        return (self.now, "tx_end", tuple(finished))

    def _deliver(self, flow):
        flow.t_done = self.now
        self.bytes_delivered += flow.size
        if flow.on_complete is not None:
            flow.on_complete(flow)

    def run(self, until=None):
        while self.pending():
            nxt = self.next_time()
            if until is not None and nxt > until:
                self.now = max(self.now, until)
                self._progress()
                break
            self.advance()
        return self.now

    def link_load(self, key):
        """Sum of current rates of the flows on link ``key``."""
        return sum(self.active[fid].rate for fid in self._on_link.get(key, ()))
