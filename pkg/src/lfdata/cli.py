"""Command-line entry point: ``lfdata <subcommand> [--config FILE] [flags]``.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out``.
The manifest holds the effective configuration, its hash and library
versions; passing it back through ``--config`` reproduces the run.
"""

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from lfdata import __version__
from lfdata.errors import ConfigError, LfDataError

SUBCOMMANDS = ("gen-trace", "classify", "stats", "simulate", "sweep", "kg-build", "train", "recommend",
               "eval", "combos", "report")

# Every recognised config key with its default.  Flags override these.
DEFAULTS = {
    "out": "out",
    "data_dir": None,
    "requests": None,
    "topology": None,
    "seed": 0,
    "seeds": [0, 1, 2, 3, 4],
    "preset": "default",
    "generator": {},
    "mode": "smart_cache",
    "modes": ["no_cache", "lru_only", "virtual_groups", "smart_cache"],
    "chunk_duration_s": 3600.0,
    "cv_max": 0.2,
    "realtime_threshold_s": 300.0,
    "min_history": 3,
    "capacity_bytes": None,
    "capacity_fraction": None,
    "bandwidth_factor": 1.0,
    "k": None,
    "workers": 1,
    "sources": ["domain_model", "interactions", "locality", "user_association"],
    "subsets": None,
    "noise_triples": 0,
    "attention": [True, False],
    "holdout": 0.2,
    "K": 10,
    "users": None,
    "checkpoint": None,
    "inputs": None,
    "train": {},
}


class CliError(LfDataError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------- config


def _load_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc.msg} at line {exc.lineno}") from None


def effective_config(command, args):
    """Defaults, then the ``--config`` document (plain or a manifest), then explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        doc = _load_json(args.config)
        if isinstance(doc, dict) and "manifest_version" in doc:
            if doc.get("command") != command:
                raise ConfigError(f"manifest is for {doc.get('command')!r}, not {command!r}")
            doc = doc["config"]
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(doc)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out, command, cfg, outputs):
    manifest = {
        "manifest_version": 1,
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "outputs": sorted(outputs),
        "versions": {"lfdata": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _require(cfg, key):
    if cfg.get(key) is None:
        raise ConfigError(f"{key} is required")
    path = Path(cfg[key])
    if not path.exists():
        raise FileNotFoundError(f"missing file {path}")
    return path


def _inputs(cfg, need_users=True):
    from lfdata.netsim import load_topology
    from lfdata.workload import load_catalog, read_requests

    data_dir = _require(cfg, "data_dir")
    topo = load_topology(cfg["topology"]) if cfg.get("topology") else load_topology()
    catalog = load_catalog(data_dir, known_nodes=set(topo.nodes) if need_users else None)
    req_path = Path(cfg["requests"]) if cfg.get("requests") else data_dir / "requests.csv"
    if not req_path.exists():
        raise FileNotFoundError(f"missing file {req_path}")
    trace = read_requests(req_path)
    catalog.validate_trace(trace)
    return catalog, trace, topo


def _generator_params(cfg):
    from lfdata.workload import GeneratorParams, planted_params

    if cfg["preset"] == "planted":
        base = planted_params().to_dict()
    elif cfg["preset"] == "default":
        base = GeneratorParams().to_dict()
    else:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    base.update(cfg.get("generator") or {})
    return GeneratorParams.from_dict(base)


def _capacity(value):
    if value in ("inf", "infinity", float("inf")):
        return math.inf
    return value


def _scenario(cfg, mode, seed, trace=None, catalog=None):
    from lfdata.delivery import ScenarioConfig, working_set_bytes

    capacity = _capacity(cfg.get("capacity_bytes"))
    if cfg.get("capacity_fraction") is not None:
        capacity = cfg["capacity_fraction"] * working_set_bytes(trace, catalog, cfg["chunk_duration_s"])
    return ScenarioConfig(
        mode=mode, chunk_duration_s=cfg["chunk_duration_s"], cv_max=cfg["cv_max"],
        realtime_threshold_s=cfg["realtime_threshold_s"], min_history=cfg["min_history"],
        capacity_bytes=capacity, k=cfg.get("k"), seed=seed,
    )


def _train_config(cfg, **overrides):
    from lfdata.ckat.train import TrainConfig

    data = dict(cfg.get("train") or {})
    data.setdefault("seed", cfg["seed"])
    data.update(overrides)
    return TrainConfig.from_dict(data)


def _csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(round(x, 9))
    return x


# ---------------------------------------------------------------- subcommands


def cmd_gen_trace(cfg, out):
    from lfdata.workload import generate_trace, save_catalog, write_requests

    catalog, trace, truth = generate_trace(_generator_params(cfg), cfg["seed"])
    save_catalog(catalog, out)
    write_requests(out / "requests.csv", trace)
    (out / "ground_truth.json").write_text(truth.to_json() + "\n", encoding="utf-8")
    return ["catalog.csv", "users.csv", "recipes.csv", "requests.csv", "ground_truth.json"]


def cmd_classify(cfg, out):
    from lfdata.workload import ClassifierConfig, classify_trace, read_requests

    data_dir = Path(cfg["data_dir"]) if cfg.get("data_dir") else None
    req_path = Path(cfg["requests"]) if cfg.get("requests") else (data_dir / "requests.csv" if data_dir else None)
    if req_path is None:
        raise ConfigError("requests or data_dir is required")
    if not req_path.exists():
        raise FileNotFoundError(f"missing file {req_path}")
    patterns = classify_trace(read_requests(req_path),
                              ClassifierConfig(cfg["cv_max"], cfg["realtime_threshold_s"], cfg["min_history"]))
    _csv(out / "patterns.csv", ["user_id", "kind", "period_s", "window_s", "overlap_s", "history_len"],
         [[u, p.kind, _num(float(p.period_s)), _num(float(p.window_s)), _num(float(p.overlap_s)), p.history_len]
          for u, p in sorted(patterns.items())])
    return ["patterns.csv"]


def cmd_stats(cfg, out):
    from lfdata.workload import affinity_stats

    catalog, trace, _ = _inputs(cfg, need_users=False)
    stats = affinity_stats(trace, catalog)
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return ["stats.json"]


def _simulate_one(job):
    from lfdata.delivery import run_scenario
    from lfdata.netsim import load_topology
    from lfdata.workload import generate_trace

    cfg, mode, seed, inputs = job
    if inputs is None:
        catalog, trace, _ = generate_trace(_generator_params(cfg), seed)
        topo = load_topology(cfg["topology"]) if cfg.get("topology") else load_topology()
    else:
        catalog, trace, topo = inputs
    if cfg.get("bandwidth_factor", 1.0) != 1.0:
        topo = topo.scaled(cfg["bandwidth_factor"])
    sim_cfg = _scenario(cfg, mode, seed, trace, catalog)
    return run_scenario(trace, catalog, topo, sim_cfg)


def cmd_simulate(cfg, out):
    from lfdata.cachenet import placement_json
    from lfdata.delivery import DeliverySimulation, write_latencies, write_metrics

    catalog, trace, topo = _inputs(cfg)
    if cfg.get("bandwidth_factor", 1.0) != 1.0:
        topo = topo.scaled(cfg["bandwidth_factor"])
    sim = DeliverySimulation(trace, catalog, topo, _scenario(cfg, cfg["mode"], cfg["seed"], trace, catalog))
    metrics = sim.run()
    write_metrics(out / "metrics.csv", [metrics])
    write_latencies(out / "latencies.csv", [metrics])
    outputs = ["metrics.csv", "latencies.csv"]
    if sim.groups:
        (out / "placement.json").write_text(placement_json(sim.groups) + "\n", encoding="utf-8")
        outputs.append("placement.json")
    return outputs


def cmd_sweep(cfg, out):
    """Modes x seeds.  Without ``data_dir`` each seed generates its own trace."""
    from lfdata.delivery import MODES, write_metrics

    for m in cfg["modes"]:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    inputs = _inputs(cfg) if cfg.get("data_dir") else None
    jobs = [(cfg, mode, seed, inputs) for seed in cfg["seeds"] for mode in cfg["modes"]]
    workers = max(1, int(cfg.get("workers") or 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_one, jobs))
    else:
        results = [_simulate_one(j) for j in jobs]
    write_metrics(out / "metrics.csv", results)
    return ["metrics.csv"]


def _sources(cfg, catalog, trace):
    from lfdata.ckat.evaluate import holdout_split
    from lfdata.ckat.kg import build_source_kgs, inject_noise, interaction_pairs

    pairs = interaction_pairs(trace)
    if cfg["holdout"]:
        pairs, _ = holdout_split(pairs, cfg["holdout"])
    sources = build_source_kgs(catalog, pairs=pairs)
    selection = set(cfg["sources"])
    if cfg["noise_triples"]:
        sources["noise"] = inject_noise(sources, cfg["noise_triples"], cfg["seed"])
        selection.add("noise")
    return sources, selection


def _ckg(cfg, catalog, trace):
    from lfdata.ckat.kg import build_ckg, catalog_items

    sources, selection = _sources(cfg, catalog, trace)
    return build_ckg(sources, selection, extra_entities=catalog_items(catalog))


def cmd_kg_build(cfg, out):
    catalog, trace, _ = _inputs(cfg, need_users=False)
    ckg = _ckg(cfg, catalog, trace)
    _csv(out / "ckg_triples.csv", ["head", "relation", "tail"], ckg.base_triples)
    doc = {"entities": ckg.entities, "relations": ckg.relations, "selection": list(ckg.selection),
           "n_users": len(ckg.users), "n_items": len(ckg.items), "n_edges": ckg.n_triples}
    (out / "ckg.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return ["ckg_triples.csv", "ckg.json"]


def cmd_train(cfg, out):
    from lfdata.ckat.train import save_checkpoint, train

    catalog, trace, _ = _inputs(cfg, need_users=False)
    model = train(_ckg(cfg, catalog, trace), _train_config(cfg))
    save_checkpoint(model, out / "model")
    _csv(out / "losses.csv", ["epoch", "kg_loss", "cf_loss"],
         [[e, _num(float(a)), _num(float(b))] for e, (a, b) in enumerate(zip(model.kg_losses, model.cf_losses))])
    return ["model/params.npz", "model/model.json", "losses.csv"]


def _checkpoint(cfg):
    from lfdata.ckat.train import load_checkpoint

    path = _require(cfg, "checkpoint")
    return load_checkpoint(path)


def cmd_recommend(cfg, out):
    from lfdata.ckat.evaluate import write_recommendations
    from lfdata.ckat.kg import user_entity

    model = _checkpoint(cfg)
    users = [user_entity(u) for u in cfg["users"]] if cfg.get("users") else model.ckg.users
    write_recommendations(model, users, cfg["K"], out / "rec.csv")
    return ["rec.csv"]


def cmd_eval(cfg, out):
    from lfdata.ckat.evaluate import canonical_split, evaluate, evaluate_rankings, popularity_rankings

    model = _checkpoint(cfg)
    _, trace, _ = _inputs(cfg, need_users=False)
    train_pairs, test = canonical_split(trace, cfg["holdout"] or 0.2)
    metrics = evaluate(model, test, cfg["K"])
    pop = evaluate_rankings(popularity_rankings(train_pairs, model.ckg.items, list(test), cfg["K"]),
                            test, cfg["K"])
    _csv(out / "eval.csv", ["model", "K", "recall", "ndcg", "users"],
         [["ckat", cfg["K"], _num(metrics["recall"]), _num(metrics["ndcg"]), metrics["users"]],
          ["popularity", cfg["K"], _num(pop["recall"]), _num(pop["ndcg"]), pop["users"]]])
    return ["eval.csv"]


def cmd_combos(cfg, out):
    from lfdata.ckat.study import run_combination_study, write_combos

    catalog, trace, _ = _inputs(cfg, need_users=False)
    rows = run_combination_study(
        catalog, trace, _train_config(cfg), subsets=cfg.get("subsets"), K=cfg["K"],
        attention=tuple(bool(a) for a in cfg["attention"]), seeds=cfg["seeds"],
        noise_triples=cfg["noise_triples"], fraction=cfg["holdout"] or 0.2,
    )
    write_combos(rows, out / "combos.csv")
    return ["combos.csv"]


def _read_table(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _aligned(header, rows):
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells) + "\n"


def _mean_table(rows, keys, value_cols):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, members in groups.items():
        vals = [sum(float(m[c]) for m in members) / len(members) for c in value_cols]
        out.append(list(key) + [len(members)] + [f"{v:.6g}" for v in vals])
    return out


def cmd_report(cfg, out):
    """Summaries of metrics.csv / combos.csv / eval.csv found in ``inputs`` (files or directories)."""
    inputs = cfg.get("inputs") or ([cfg["data_dir"]] if cfg.get("data_dir") else None)
    if not inputs:
        raise ConfigError("inputs is required")
    found = {"metrics.csv": [], "combos.csv": [], "eval.csv": []}
    for entry in inputs:
        path = Path(entry)
        if not path.exists():
            raise FileNotFoundError(f"missing file {path}")
        files = [path] if path.is_file() else [path / n for n in found if (path / n).exists()]
        for f in files:
            if f.name not in found:
                raise ConfigError(f"report cannot read {f.name}")
            found[f.name].extend(_read_table(f))
    outputs = []
    specs = {
        "metrics.csv": ("delivery", ["mode"],
                        ["local_fraction", "group_fraction", "peer_fraction", "origin_fraction",
                         "mean_latency_s", "p95_latency_s", "origin_requests", "wan_bytes",
                         "wasted_prefetch_bytes"]),
        "combos.csv": ("combos", ["sources", "attention", "noise_triples"], ["recall", "ndcg"]),
        "eval.csv": ("eval", ["model", "K"], ["recall", "ndcg"]),
    }
    for name, rows in found.items():
        if not rows:
            continue
        label, keys, cols = specs[name]
        missing = [c for c in keys + cols if c not in rows[0]]
        if missing:
            raise ConfigError(f"{name}: missing columns {missing}")
        header = keys + ["runs"] + [f"avg_{c}" for c in cols]
        table = _mean_table(rows, keys, cols)
        _csv(out / f"report_{label}.csv", header, table)
        (out / f"report_{label}.txt").write_text(_aligned(header, table), encoding="utf-8")
        outputs += [f"report_{label}.csv", f"report_{label}.txt"]
    if not outputs:
        raise ConfigError("no metrics.csv, combos.csv or eval.csv among the inputs")
    return outputs


COMMANDS = {
    "gen-trace": cmd_gen_trace, "classify": cmd_classify, "stats": cmd_stats, "simulate": cmd_simulate,
    "sweep": cmd_sweep, "kg-build": cmd_kg_build, "train": cmd_train, "recommend": cmd_recommend,
    "eval": cmd_eval, "combos": cmd_combos, "report": cmd_report,
}


# ---------------------------------------------------------------- parser


def _bool_list(text):
    vals = []
    for part in text.split(","):
        part = part.strip().lower()
        if part not in ("on", "off", "true", "false", "1", "0"):
            raise argparse.ArgumentTypeError(f"expected on/off, got {part!r}")
        vals.append(part in ("on", "true", "1"))
    return vals


def _csv_list(cast=str):
    def parse(text):
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    return parse


def build_parser():
    parser = _Parser(prog="lfdata", description="Large-facility data delivery and discovery toolkit.")
    parser.add_argument("--version", action="version", version=f"lfdata {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--config", help="JSON config or a previous run's manifest.json")
        p.add_argument("--out", help="output directory (default: out)")
        p.add_argument("--seed", type=int)

    def inputs(p):
        p.add_argument("--data-dir", dest="data_dir", help="directory with catalog.csv, users.csv, recipes.csv")
        p.add_argument("--requests", help="requests.csv (default: <data-dir>/requests.csv)")
        p.add_argument("--topology", help="topology.json (default: bundled topology)")

    def classifier(p):
        p.add_argument("--cv-max", dest="cv_max", type=float)
        p.add_argument("--realtime-threshold-s", dest="realtime_threshold_s", type=float)
        p.add_argument("--min-history", dest="min_history", type=int)

    def delivery(p):
        classifier(p)
        p.add_argument("--chunk-duration-s", dest="chunk_duration_s", type=float)
        p.add_argument("--capacity-bytes", dest="capacity_bytes", type=lambda s: s if s == "inf" else float(s),
                       help="per-DTN cache capacity in bytes, or 'inf'")
        p.add_argument("--capacity-fraction", dest="capacity_fraction", type=float,
                       help="per-DTN capacity as a fraction of the trace's working set")
        p.add_argument("--bandwidth-factor", dest="bandwidth_factor", type=float)
        p.add_argument("--k", type=int, help="number of virtual groups (default: number of DTNs)")

    def ckat(p):
        p.add_argument("--sources", type=_csv_list(), help="comma-separated knowledge sources")
        p.add_argument("--noise-triples", dest="noise_triples", type=int)
        p.add_argument("--holdout", type=float, help="per-user test fraction (0 trains on everything)")
        p.add_argument("--K", dest="K", type=int)

    p = sub.add_parser("gen-trace", help="generate a synthetic catalog and request trace")
    common(p)
    p.add_argument("--preset", choices=["default", "planted"])

    p = sub.add_parser("classify", help="classify each user's access pattern")
    common(p)
    inputs(p)
    classifier(p)

    p = sub.add_parser("stats", help="affinity statistics of a trace")
    common(p)
    inputs(p)

    p = sub.add_parser("simulate", help="run one delivery scenario")
    common(p)
    inputs(p)
    delivery(p)
    p.add_argument("--mode")

    p = sub.add_parser("sweep", help="run modes x seeds (generates traces unless --data-dir is given)")
    common(p)
    inputs(p)
    delivery(p)
    p.add_argument("--modes", type=_csv_list())
    p.add_argument("--seeds", type=_csv_list(int))
    p.add_argument("--preset", choices=["default", "planted"])
    p.add_argument("--workers", type=int)

    p = sub.add_parser("kg-build", help="build the collaborative knowledge graph")
    common(p)
    inputs(p)
    ckat(p)

    p = sub.add_parser("train", help="train the recommender")
    common(p)
    inputs(p)
    ckat(p)

    p = sub.add_parser("recommend", help="top-K recommendations from a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--users", type=_csv_list())
    p.add_argument("--K", dest="K", type=int)

    p = sub.add_parser("eval", help="recall@K / ndcg@K of a checkpoint against the holdout split")
    common(p)
    inputs(p)
    p.add_argument("--checkpoint")
    p.add_argument("--holdout", type=float)
    p.add_argument("--K", dest="K", type=int)

    p = sub.add_parser("combos", help="knowledge-source combination study")
    common(p)
    inputs(p)
    ckat(p)
    p.add_argument("--seeds", type=_csv_list(int))
    p.add_argument("--attention", type=_bool_list, help="e.g. on,off")

    p = sub.add_parser("report", help="summary tables from metrics.csv / combos.csv / eval.csv")
    common(p)
    p.add_argument("--inputs", nargs="+")
    return parser


def _validate(command, cfg):
    if cfg["K"] is not None and int(cfg["K"]) < 1:
        raise ConfigError("K must be >= 1")
    if not 0 <= float(cfg["holdout"]) < 1:
        raise ConfigError("holdout must be in [0, 1)")
    if command in ("sweep", "combos") and not cfg["seeds"]:
        raise ConfigError("seeds must not be empty")


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = effective_config(args.command, args)
    _validate(args.command, cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs = COMMANDS[args.command](cfg, out)
    write_manifest(out, args.command, cfg, outputs)
    return outputs


def _one_line(text):
    return " ".join(str(text).split())


def main(argv=None):
    try:
        run(argv)
    except CliError as exc:
        print(f"error: kind=usage message={json.dumps(_one_line(exc))}", file=sys.stderr)
        return 2
    except (LfDataError, OSError, ValueError, KeyError) as exc:
        kind = type(exc).__name__
        print(f"error: kind={kind} message={json.dumps(_one_line(exc))}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
