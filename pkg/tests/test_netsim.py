import json

import pytest
from hypothesis import given, settings, strategies as st

from lfdata.errors import RoutingError, ValidationError
from lfdata.netsim import Link, Node, Simulator, Topology, load_topology

MB = 1e6


def _topo(links, origins=("A",), storage=0.0):
    names = sorted({n for a, b, *_ in links for n in (a, b)})
    nodes = [Node(n, storage, n in origins) for n in names]
    return Topology(nodes, [Link(a, b, bw, lat) for a, b, bw, lat in links])


def single_link():
    return _topo([("A", "B", 10 * MB, 0.05)])


def reference_completion(topology, flows):
    """Independent piecewise-rate integrator.

    ``flows`` is a list of ``(t_start, src, dst, size)``.  Between breakpoints
    every rate is constant, so each segment is advanced in closed form.
    Returns delivery times (transmission end + path latency).
    """
    paths = [topology.route(s, d) for _, s, d, _ in flows]
    remaining = [float(size) for *_, size in flows]
    finish = [None] * len(flows)
    t = 0.0
    pending = sorted(range(len(flows)), key=lambda i: (flows[i][0], i))
    active = []
    while pending or active:
        while pending and flows[pending[0]][0] <= t:
            i = pending.pop(0)
            if not paths[i] or remaining[i] == 0:
                finish[i] = flows[i][0]
            else:
                active.append(i)
        if not active:
            if pending:
                t = flows[pending[0]][0]
            continue
        count = {}
        for i in active:
            for ln in paths[i]:
                count[ln.key] = count.get(ln.key, 0) + 1
        rate = {i: min(ln.bandwidth / count[ln.key] for ln in paths[i]) for i in active}
        dt = min(remaining[i] / rate[i] for i in active)
        if pending:
            dt = min(dt, flows[pending[0]][0] - t)
        t += dt
        for i in list(active):
            remaining[i] -= rate[i] * dt
            if remaining[i] <= 1e-9 * max(1.0, flows[i][3]):
                remaining[i] = 0.0
                finish[i] = t
                active.remove(i)
    return [f + sum(ln.latency for ln in p) for f, p in zip(finish, paths)]


def run_flows(topology, flows):
    sim = Simulator(topology)
    done = {}
    for n, (t0, src, dst, size) in enumerate(flows):
        sim.schedule(t0, lambda n=n, s=src, d=dst, z=size: sim.start_flow(
            s, d, z, lambda f, n=n: done.__setitem__(n, f)))
    sim.run()
    return [done[n].t_done for n in range(len(flows))], sim, done


# ---------------------------------------------------------------- routing


def test_route_identity():
    t = single_link()
    assert t.route("A", "A") == []
    assert t.path_latency("A", "A") == 0


def test_route_line():
    t = _topo([("A", "B", 1, 1), ("B", "C", 1, 1)])
    path = t.route("A", "C")
    assert [ln.key for ln in path] == [("A", "B"), ("B", "C")]
    assert t.path_latency("A", "C") == 2


def test_route_triangle_prefers_low_latency():
    t = _topo([("A", "B", 1, 5), ("A", "C", 1, 1), ("C", "B", 1, 1)])
    assert [ln.key for ln in t.route("A", "B")] == [("A", "C"), ("B", "C")]


def test_route_tie_breaks_lexicographically():
    t = _topo([("A", "B", 1, 1), ("A", "C", 1, 1), ("B", "D", 1, 1), ("C", "D", 1, 1)])
    hops = t.route("A", "D")
    assert hops[0].key == ("A", "B")


def test_route_errors():
    t = _topo([("A", "B", 1, 1), ("C", "D", 1, 1)])
    with pytest.raises(RoutingError):
        t.route("A", "D")
    with pytest.raises(RoutingError):
        t.route("A", "Z")
    with pytest.raises(ValidationError):
        t.validate()


def test_link_validation():
    with pytest.raises(ValidationError):
        _topo([("A", "B", 0, 1)])
    with pytest.raises(ValidationError):
        _topo([("A", "B", 1, -1)])


def test_default_topology_shape():
    t = load_topology()
    t.validate()
    assert len(t.dtns) == 7
    assert len(t.origins) == 2


def test_topology_json_round_trip(tmp_path):
    t = load_topology()
    path = tmp_path / "t.json"
    path.write_text(json.dumps(t.to_dict()))
    again = load_topology(path)
    assert again.to_dict() == t.to_dict()
    half = t.scaled(0.5)
    for a, b in zip(t.links.values(), half.links.values()):
        assert b.bandwidth == a.bandwidth * 0.5


# ---------------------------------------------------------------- flows


def test_single_flow():
    times, _, _ = run_flows(single_link(), [(0.0, "A", "B", 100 * MB)])
    assert times[0] == pytest.approx(10.05, abs=1e-9)


def test_two_simultaneous_flows():
    times, _, _ = run_flows(single_link(), [(0.0, "A", "B", 100 * MB), (0.0, "A", "B", 100 * MB)])
    assert times == pytest.approx([20.05, 20.05], abs=1e-9)


def test_staggered_flows():
    flows = [(0.0, "A", "B", 100 * MB), (5.0, "A", "B", 100 * MB)]
    times, _, _ = run_flows(single_link(), flows)
    # A sends 50 MB alone, then both share 5 MB/s: A ends transmitting at 15 s, B at 20 s.
    assert times == pytest.approx([15.05, 20.05], abs=1e-9)
    assert times == pytest.approx(reference_completion(single_link(), flows), abs=1e-9)


def test_zero_size_flow_pays_latency_only():
    times, _, _ = run_flows(single_link(), [(1.0, "A", "B", 0.0)])
    assert times[0] == pytest.approx(1.05)


def test_unknown_node_rejected():
    sim = Simulator(single_link())
    with pytest.raises(RoutingError):
        sim.start_flow("A", "Q", 10)


def test_event_ties_run_in_insertion_order():
    sim = Simulator(single_link())
    seen = []
    for n in range(5):
        sim.schedule(1.0, seen.append, n)
    sim.run()
    assert seen == [0, 1, 2, 3, 4]


def test_work_conservation_on_shared_link():
    sim = Simulator(single_link())
    for _ in range(3):
        sim.start_flow("A", "B", 50 * MB)
    assert sim.link_load(("A", "B")) == pytest.approx(10 * MB)


def _star():
    return _topo([("A", "H", 10 * MB, 0.01), ("B", "H", 4 * MB, 0.02), ("C", "H", 6 * MB, 0.0),
                  ("D", "H", 8 * MB, 0.03)])


flow_lists = st.lists(
    st.tuples(st.floats(0, 20), st.sampled_from("ABCD"), st.sampled_from("ABCD"), st.floats(0, 50 * MB)),
    min_size=1, max_size=8,
)


@settings(max_examples=60, deadline=None)
@given(flow_lists)
def test_matches_reference_integrator(flows):
    topo = _star()
    times, sim, done = run_flows(topo, flows)
    ref = reference_completion(topo, flows)
    assert times == pytest.approx(ref, abs=1e-6)
    assert all(f.bytes_done == f.size for f in done.values())
    assert sim.bytes_delivered == pytest.approx(sum(f[3] for f in flows))


@settings(max_examples=40, deadline=None)
@given(flow_lists, st.tuples(st.floats(0, 20), st.sampled_from("ABCD"), st.sampled_from("ABCD"),
                             st.floats(1, 50 * MB)))
def test_competing_flow_never_speeds_others(flows, extra):
    topo = _star()
    before, _, _ = run_flows(topo, flows)
    after, _, _ = run_flows(topo, flows + [extra])
    for b, a in zip(before, after[:-1]):
        assert a >= b - 1e-9


@settings(max_examples=30, deadline=None)
@given(flow_lists)
def test_link_rates_never_exceed_bandwidth(flows):
    topo = _star()
    sim = Simulator(topo)
    for t0, s, d, z in flows:
        sim.schedule(t0, sim.start_flow, s, d, z)
    while sim.pending():
        sim.advance()
        for ln in topo.links.values():
            load = sim.link_load(ln.key)
            assert load <= ln.bandwidth * (1 + 1e-12)
            ids = sim._on_link.get(ln.key, ())
            share = ln.bandwidth / len(ids) if ids else None
            if ids and all(sim.active[i].rate == share for i in ids):
                # Every flow is bottlenecked here, so the link is fully used.
                assert load == pytest.approx(ln.bandwidth)


def test_determinism():
    flows = [(0.5 * i, "ABCD"[i % 4], "ABCD"[(i + 1) % 4], (i + 1) * MB) for i in range(12)]
    a, _, _ = run_flows(_star(), flows)
    b, _, _ = run_flows(_star(), flows)
    assert a == b
