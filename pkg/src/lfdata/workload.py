"""Catalogs, request traces, synthetic workload generation and access-pattern analysis.

All times are seconds on the simulation clock.  A request window is the
half-open data interval ``[start, end)`` the user asks for.
"""

import csv
import json
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from lfdata.errors import ConfigError, ParseError, ValidationError

REGULAR = "Regular"
OVERLAPPING = "Overlapping"
REALTIME = "RealTime"
UNKNOWN = "Unknown"
PATTERN_KINDS = (REGULAR, OVERLAPPING, REALTIME, UNKNOWN)

CHANNELS = ("portal", "api")

CATALOG_HEADER = ["object_id", "instrument_id", "region_id", "data_kind", "rate_bytes_per_s"]
USERS_HEADER = ["user_id", "org_id", "x", "y", "home_dtn"]
RECIPES_HEADER = ["product_kind", "input_kind"]
REQUESTS_HEADER = [
    "req_id", "t_arrive_s", "user_id", "object_id", "window_start_s", "window_end_s", "channel",
]


@dataclass(frozen=True)
class DataObject:
    object_id: str
    instrument_id: str
    region_id: str
    data_kind: str
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValidationError(f"object {self.object_id}: rate must be > 0, got {self.rate}")


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    org_id: str
    coord: tuple
    home_dtn: str


@dataclass(frozen=True)
class DerivationRecipe:
    product_kind: str
    input_kinds: frozenset

    def __post_init__(self):
        if not self.input_kinds:
            raise ValidationError(f"recipe {self.product_kind}: no inputs")
        if self.product_kind in self.input_kinds:
            raise ValidationError(f"recipe {self.product_kind}: product listed as its own input")


@dataclass(frozen=True)
class Request:
    req_id: str
    t_arrive: float
    user_id: str
    object_id: str
    window: tuple
    channel: str = "api"

    def __post_init__(self):
        start, end = self.window
        if not start < end:
            raise ValidationError(f"request {self.req_id}: empty window {self.window}")
        if self.t_arrive < 0:
            raise ValidationError(f"request {self.req_id}: negative arrival time")
        if self.channel not in CHANNELS:
            raise ValidationError(f"request {self.req_id}: unknown channel {self.channel!r}")


@dataclass
class Catalog:
    objects: dict = field(default_factory=dict)
    users: dict = field(default_factory=dict)
    recipes: list = field(default_factory=list)

    def validate_trace(self, trace):
        for req in trace:
            if req.object_id not in self.objects:
                raise ValidationError(f"request {req.req_id}: unknown object {req.object_id}")
            if self.users and req.user_id not in self.users:
                raise ValidationError(f"request {req.req_id}: unknown user {req.user_id}")


@dataclass(frozen=True)
class AccessPattern:
    kind: str
    period_s: float = 0.0
    window_s: float = 0.0
    overlap_s: float = 0.0
    history_len: int = 0


@dataclass(frozen=True)
class ClassifierConfig:
    cv_max: float = 0.2
    realtime_threshold_s: float = 300.0
    min_history: int = 3


# ---------------------------------------------------------------- CSV ingestion


def _read_rows(path, header):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "missing header row") from None
        if [c.strip() for c in first] != header:
            raise ParseError(path, 1, f"expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, reader.line_num, f"expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [c.strip() for c in row]


def _number(path, line, text, name):
    try:
        return float(text)
    except ValueError:
        raise ParseError(path, line, f"{name}: not a number: {text!r}") from None


def load_catalog(directory, known_nodes=None):
    """Load ``catalog.csv``, ``users.csv`` and ``recipes.csv`` from ``directory``.

    ``users.csv`` and ``recipes.csv`` are optional.  When ``known_nodes`` is
    given, every user's home DTN must be one of them.
    """
    directory = Path(directory)
    catalog = Catalog()

    path = directory / "catalog.csv"
    for line, (oid, inst, region, kind, rate) in _read_rows(path, CATALOG_HEADER):
        if oid in catalog.objects:
            raise ValidationError(f"{path}:{line}: duplicate object_id {oid}")
        try:
            catalog.objects[oid] = DataObject(oid, inst, region, kind, _number(path, line, rate, "rate"))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{line}: {exc}") from None

    path = directory / "users.csv"
    if path.exists():
        for line, (uid, org, x, y, home) in _read_rows(path, USERS_HEADER):
            if uid in catalog.users:
                raise ValidationError(f"{path}:{line}: duplicate user_id {uid}")
            if known_nodes is not None and home not in known_nodes:
                raise ValidationError(f"{path}:{line}: unknown home_dtn {home}")
            coord = (_number(path, line, x, "x"), _number(path, line, y, "y"))
            catalog.users[uid] = UserProfile(uid, org, coord, home)

    path = directory / "recipes.csv"
    if path.exists():
        inputs = defaultdict(set)
        for _, (product, kind) in _read_rows(path, RECIPES_HEADER):
            inputs[product].add(kind)
        catalog.recipes = [DerivationRecipe(p, frozenset(k)) for p, k in sorted(inputs.items())]
    return catalog


def save_catalog(catalog, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / "catalog.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATALOG_HEADER)
        for o in catalog.objects.values():
            w.writerow([o.object_id, o.instrument_id, o.region_id, o.data_kind, _fmt(o.rate)])
    with (directory / "users.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(USERS_HEADER)
        for u in catalog.users.values():
            w.writerow([u.user_id, u.org_id, _fmt(u.coord[0]), _fmt(u.coord[1]), u.home_dtn])
    with (directory / "recipes.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECIPES_HEADER)
        for r in catalog.recipes:
            for kind in sorted(r.input_kinds):
                w.writerow([r.product_kind, kind])


def _fmt(x):
    x = float(x)
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def read_requests(path):
    path = Path(path)
    trace = []
    for line, (rid, t, uid, oid, ws, we, channel) in _read_rows(path, REQUESTS_HEADER):
        try:
            trace.append(Request(
                rid, _number(path, line, t, "t_arrive_s"), uid, oid,
                (_number(path, line, ws, "window_start_s"), _number(path, line, we, "window_end_s")),
                channel,
            ))
        except ValidationError as exc:
            raise ParseError(path, line, str(exc)) from None
    return trace


def write_requests(path, trace):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REQUESTS_HEADER)
        for r in trace:
            w.writerow([r.req_id, _fmt(r.t_arrive), r.user_id, r.object_id,
                        _fmt(r.window[0]), _fmt(r.window[1]), r.channel])


# ---------------------------------------------------------------- generation

DEFAULT_KINDS = (
    "CTD", "ADCP", "conductivity", "temperature", "depth", "pressure", "oxygen", "chlorophyll",
)
DEFAULT_RECIPES = (
    ("salinity", ("conductivity", "temperature", "depth")),
    ("density", ("salinity", "temperature", "pressure")),
)


@dataclass
class GeneratorParams:
    """Knobs for :func:`generate_trace`.

    Regular users ask for back-to-back windows of length ``period``;
    overlapping users ask for ``period * (1 + f)`` with ``f`` drawn from
    ``overlap_fractions``; real-time users poll every few minutes for the
    most recently published ``window``.  ``jitter`` delays each arrival by
    up to ``jitter * period``.
    """

    n_regular: int = 40
    n_overlapping: int = 25
    n_realtime: int = 8
    n_portal: int = 27
    regular_periods_s: tuple = (3600, 21600, 43200, 86400)
    overlapping_periods_s: tuple = (3600, 10800, 21600)
    overlap_fractions: tuple = (0.25, 0.5)
    realtime_periods_s: tuple = (60, 120, 180, 240)
    realtime_windows_s: tuple = (300, 600, 1800)
    jitter: float = 0.0
    max_delay_s: int = 600
    horizon_s: float = 2 * 86400
    publish_interval_s: float = 3600
    n_orgs: int = 12
    n_regions: int = 10
    instruments_per_region: int = 4
    kinds: tuple = DEFAULT_KINDS
    kinds_per_instrument: int = 4
    rate_range: tuple = (100.0, 1000.0)
    objects_per_user: tuple = (2, 4)
    realtime_objects_per_user: tuple = (1, 2)
    portal_requests_per_user: tuple = (5, 20)
    locality_bias: float = 0.7
    kind_bias: float = 0.5
    reuse_fraction: float = 0.4
    org_spread: float = 2.0
    dtn_ids: tuple = tuple(f"dtn-{i}" for i in range(1, 8))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown generator parameters: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def planted_params(n_users=200, n_objects=300, **overrides):
    """Generator settings for the recommendation benchmark: program users with strong locality.

    ``n_objects`` is met exactly by picking 5 instruments with 4 kinds per region.
    """
    per_region = 20
    params = dict(
        n_regular=n_users, n_overlapping=0, n_realtime=0, n_portal=0,
        regular_periods_s=(86400,), horizon_s=86400, max_delay_s=0,
        n_regions=max(1, n_objects // per_region), instruments_per_region=5, kinds_per_instrument=4,
        objects_per_user=(8, 14), locality_bias=0.8, kind_bias=0.3, reuse_fraction=0.4,
        n_orgs=max(1, n_users // 5),
    )
    params.update(overrides)
    return GeneratorParams(**params)


@dataclass
class GroundTruth:
    users: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    dtn_coords: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(
            {"users": self.users, "groups": self.groups, "dtn_coords": self.dtn_coords},
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(data["users"], data["groups"], data.get("dtn_coords", {}))


def _build_catalog(params, rng):
    objects = {}
    kinds = list(params.kinds)
    for r in range(params.n_regions):
        region = f"region-{r:02d}"
        for i in range(params.instruments_per_region):
            inst = f"inst-{r:02d}-{i}"
            n_kinds = min(params.kinds_per_instrument, len(kinds))
            chosen = sorted(rng.choice(len(kinds), size=n_kinds, replace=False))
            for k in chosen:
                kind = kinds[k]
                oid = f"{inst}-{kind}"
                rate = float(np.round(rng.uniform(*params.rate_range), 1))
                objects[oid] = DataObject(oid, inst, region, kind, rate)
    recipes = [
        DerivationRecipe(product, frozenset(inputs)) for product, inputs in sorted(DEFAULT_RECIPES)
    ]
    return objects, recipes


def _pick_objects(n, home_region, fav_kind, by_region_kind, by_region, regions, kinds, params, rng,
                  taken):
    """Draw ``n`` distinct objects biased toward a home region and a favourite kind."""
    picked = []
    others_r = [r for r in regions if r != home_region]
    others_k = [k for k in kinds if k != fav_kind]
    attempts = 0
    while len(picked) < n and attempts < 50 * (n + 1):
        attempts += 1
        if not others_r or rng.random() < params.locality_bias:
            region = home_region
        else:
            region = others_r[rng.integers(len(others_r))]
        if not others_k or rng.random() < params.kind_bias:
            kind = fav_kind
        else:
            kind = others_k[rng.integers(len(others_k))]
        pool = by_region_kind.get((region, kind)) or by_region[region]
        oid = pool[rng.integers(len(pool))]
        if oid not in taken and oid not in picked:
            picked.append(oid)
    return picked


def generate_trace(params, seed):
    """Generate ``(catalog, trace, truth)`` for a synthetic facility workload.

    The result depends only on ``(params, seed)``.
    """
    n_users = params.n_regular + params.n_overlapping + params.n_realtime + params.n_portal
    if n_users <= 0:
        raise ConfigError("generator needs at least one user")
    if params.n_regions <= 0 or params.instruments_per_region <= 0 or not params.kinds:
        raise ConfigError("generator needs at least one object")
    if not params.dtn_ids:
        raise ConfigError("generator needs at least one DTN")
    rng = np.random.default_rng(seed)

    objects, recipes = _build_catalog(params, rng)
    regions = sorted({o.region_id for o in objects.values()})
    kinds = sorted({o.data_kind for o in objects.values()})
    by_region = defaultdict(list)
    by_region_kind = defaultdict(list)
    for o in objects.values():
        by_region[o.region_id].append(o.object_id)
        by_region_kind[(o.region_id, o.data_kind)].append(o.object_id)

    n_dtn = len(params.dtn_ids)
    dtn_coords = {
        d: (10.0 * math.cos(2 * math.pi * i / n_dtn), 10.0 * math.sin(2 * math.pi * i / n_dtn))
        for i, d in enumerate(params.dtn_ids)
    }
    n_orgs = max(1, params.n_orgs)
    orgs = []
    for g in range(n_orgs):
        orgs.append({
            "org_id": f"org-{g:02d}",
            "center": rng.uniform(-12.0, 12.0, size=2),
            "home_region": regions[rng.integers(len(regions))],
            "fav_kind": kinds[rng.integers(len(kinds))],
            "leader": None,
        })

    classes = ([REGULAR] * params.n_regular + [OVERLAPPING] * params.n_overlapping
               + [REALTIME] * params.n_realtime + ["portal"] * params.n_portal)
    classes = [classes[i] for i in rng.permutation(n_users)]

    users = {}
    truth = GroundTruth(dtn_coords={d: list(c) for d, c in dtn_coords.items()})
    raw = []
    horizon = float(params.horizon_s)
    pub = float(params.publish_interval_s)

    for idx, cls in enumerate(classes):
        uid = f"u{idx:04d}"
        org = orgs[rng.integers(n_orgs)]
        coord = org["center"] + rng.normal(0.0, params.org_spread, size=2)
        coord = (float(np.round(coord[0], 4)), float(np.round(coord[1], 4)))
        home = min(params.dtn_ids,
                   key=lambda d: ((coord[0] - dtn_coords[d][0]) ** 2 + (coord[1] - dtn_coords[d][1]) ** 2, d))
        users[uid] = UserProfile(uid, org["org_id"], coord, home)

        if cls == REALTIME:
            lo, hi = params.realtime_objects_per_user
        else:
            lo, hi = params.objects_per_user
        n_obj = int(rng.integers(lo, hi + 1))
        leader = org["leader"]
        mine = []
        if leader is not None and params.reuse_fraction > 0:
            pool = truth.users[leader]["objects"]
            n_reuse = min(len(pool), math.ceil(params.reuse_fraction * n_obj))
            mine = [pool[i] for i in sorted(rng.choice(len(pool), size=n_reuse, replace=False))]
        mine += _pick_objects(n_obj - len(mine), org["home_region"], org["fav_kind"], by_region_kind,
                              by_region, regions, kinds, params, rng, set(mine))
        if org["leader"] is None:
            org["leader"] = uid

        delay = int(rng.integers(0, params.max_delay_s + 1)) if params.max_delay_s > 0 else 0
        label = {"kind": UNKNOWN, "period_s": 0.0, "window_s": 0.0, "overlap_s": 0.0}
        if cls == REGULAR:
            period = float(params.regular_periods_s[rng.integers(len(params.regular_periods_s))])
            label = {"kind": REGULAR, "period_s": period, "window_s": period, "overlap_s": 0.0}
            k = 1
            while k * period + delay <= horizon:
                t = k * period + delay + _jitter(rng, params.jitter, period)
                for j, oid in enumerate(mine):
                    raw.append((t, uid, j, oid, ((k - 1) * period, k * period), "api"))
                k += 1
        elif cls == OVERLAPPING:
            period = float(params.overlapping_periods_s[rng.integers(len(params.overlapping_periods_s))])
            overlap = period * float(params.overlap_fractions[rng.integers(len(params.overlap_fractions))])
            window = period + overlap
            label = {"kind": OVERLAPPING, "period_s": period, "window_s": window, "overlap_s": overlap}
            k = math.ceil(window / period)
            while k * period + delay <= horizon:
                t = k * period + delay + _jitter(rng, params.jitter, period)
                for j, oid in enumerate(mine):
                    raw.append((t, uid, j, oid, (k * period - window, k * period), "api"))
                k += 1
        elif cls == REALTIME:
            period = float(params.realtime_periods_s[rng.integers(len(params.realtime_periods_s))])
            window = float(params.realtime_windows_s[rng.integers(len(params.realtime_windows_s))])
            window = min(window, pub)
            label = {"kind": REALTIME, "period_s": period, "window_s": window, "overlap_s": window}
            phase = int(rng.integers(0, int(period)))
            k = 0
            while phase + k * period <= horizon:
                t = phase + k * period + _jitter(rng, params.jitter, period)
                k += 1
                end = math.floor(t / pub) * pub
                if end - window < 0:
                    continue
                for j, oid in enumerate(mine):
                    raw.append((t, uid, j, oid, (end - window, end), "api"))
        else:
            lo, hi = params.portal_requests_per_user
            for _ in range(int(rng.integers(lo, hi + 1))):
                t = float(np.round(rng.uniform(pub, horizon), 3))
                oid = mine[rng.integers(len(mine))]
                end = math.floor(t / pub) * pub
                length = pub * float(rng.integers(1, 25))
                raw.append((t, uid, 0, oid, (max(0.0, end - length), end), "portal"))

        label.update({
            "org_id": org["org_id"],
            "home_region": org["home_region"],
            "fav_kind": org["fav_kind"],
            "objects": mine,
            "channel": "portal" if cls == "portal" else "api",
        })
        truth.users[uid] = label
        truth.groups.setdefault(org["org_id"], []).append(uid)

    # Same-instant requests of one user keep the user's object order.
    raw.sort(key=lambda r: r[:4])
    width = max(6, len(str(len(raw))))
    trace = [
        Request(f"r{i:0{width}d}", t, uid, oid, window, channel)
        for i, (t, uid, _, oid, window, channel) in enumerate(raw)
    ]
    catalog = Catalog(objects=objects, users=users, recipes=recipes)
    return catalog, trace, truth


def _jitter(rng, fraction, period):
    if fraction <= 0:
        return 0.0
    return float(np.round(rng.uniform(0.0, fraction * period), 3))


# ---------------------------------------------------------------- classification


def window_overlap(a, b):
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def classify_user_pattern(history, config=ClassifierConfig()):
    """Classify one user's request history (sorted by arrival time).

    Inter-arrival gaps and window overlaps are measured between consecutive
    requests for the same object, then pooled over all of the user's objects.
    """
    n = len(history)
    if n < config.min_history:
        return AccessPattern(UNKNOWN, history_len=n)

    streams = defaultdict(list)
    for req in history:
        streams[req.object_id].append(req)
    gaps, overlaps = [], []
    for reqs in streams.values():
        for prev, cur in zip(reqs, reqs[1:]):
            gaps.append(cur.t_arrive - prev.t_arrive)
            overlaps.append(window_overlap(prev.window, cur.window))
    windows = [r.window[1] - r.window[0] for r in history]
    if not gaps:
        return AccessPattern(UNKNOWN, window_s=statistics.median(windows), history_len=n)

    period = float(statistics.median(gaps))
    window = float(statistics.median(windows))
    overlap = float(statistics.median(overlaps))
    mean_gap = statistics.fmean(gaps)
    if mean_gap <= 0:
        return AccessPattern(UNKNOWN, period, window, overlap, n)
    cv = statistics.pstdev(gaps) / mean_gap
    if cv > config.cv_max:
        kind = UNKNOWN
    elif period <= config.realtime_threshold_s:
        kind = REALTIME
    elif overlap > 0:
        kind = OVERLAPPING
    else:
        kind = REGULAR
    return AccessPattern(kind, period, window, overlap, n)


def user_histories(trace, channel=None):
    by_user = defaultdict(list)
    for req in trace:
        if channel is None or req.channel == channel:
            by_user[req.user_id].append(req)
    for reqs in by_user.values():
        reqs.sort(key=lambda r: (r.t_arrive, r.req_id))
    return dict(by_user)


def classify_trace(trace, config=ClassifierConfig()):
    return {uid: classify_user_pattern(h, config) for uid, h in sorted(user_histories(trace).items())}


# ---------------------------------------------------------------- affinity


def affinity_stats(trace, catalog):
    """Per-user and mean locality/kind/organisation affinity fractions.

    ``org_overlap`` is the fraction of a user's distinct objects that some
    other member of the same organisation also queried; it is ``None`` for
    users without organisation peers in the trace.
    """
    if not trace:
        return {"users": {}, "aggregate": {}}
    regions = defaultdict(Counter)
    kinds = defaultdict(Counter)
    footprint = defaultdict(set)
    for req in trace:
        obj = catalog.objects.get(req.object_id)
        if obj is None:
            raise ValidationError(f"request {req.req_id}: unknown object {req.object_id}")
        regions[req.user_id][obj.region_id] += 1
        kinds[req.user_id][obj.data_kind] += 1
        footprint[req.user_id].add(req.object_id)

    members = defaultdict(set)
    for uid in footprint:
        prof = catalog.users.get(uid)
        if prof is not None:
            members[prof.org_id].add(uid)

    per_user = {}
    for uid in sorted(footprint):
        total = sum(regions[uid].values())
        overlap = None
        prof = catalog.users.get(uid)
        if prof is not None:
            peers = members[prof.org_id] - {uid}
            if peers:
                others = set().union(*(footprint[p] for p in peers))
                overlap = len(footprint[uid] & others) / len(footprint[uid])
        per_user[uid] = {
            "region_share": max(regions[uid].values()) / total,
            "kind_share": max(kinds[uid].values()) / total,
            "org_overlap": overlap,
        }

    aggregate = {}
    for key in ("region_share", "kind_share", "org_overlap"):
        vals = [u[key] for u in per_user.values() if u[key] is not None]
        aggregate[key] = statistics.fmean(vals) if vals else None
    return {"users": per_user, "aggregate": aggregate}
