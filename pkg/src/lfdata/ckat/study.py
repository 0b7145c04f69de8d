"""Knowledge-source combination study and noise / attention ablation."""

import csv
import itertools
from dataclasses import replace
from pathlib import Path

from lfdata.ckat.evaluate import experiment, holdout_split
from lfdata.ckat.kg import INTERACTIONS, KNOWLEDGE_SOURCES, build_source_kgs, inject_noise, interaction_pairs

COMBOS_HEADER = ["sources", "attention", "recall", "ndcg", "seed", "noise_triples"]


def all_subsets(knowledge=KNOWLEDGE_SOURCES):
    """Every subset of the knowledge sources, each joined with the interactions."""
    out = []
    for n in range(len(knowledge) + 1):
        for combo in itertools.combinations(sorted(knowledge), n):
            out.append(tuple(sorted((INTERACTIONS,) + combo)))
    return out


def _noise_for(catalog, trace, m, seed, fraction):
    train_raw, _ = holdout_split(interaction_pairs(trace), fraction)
    return inject_noise(build_source_kgs(catalog, pairs=train_raw), m, seed)


def run_combination_study(catalog, trace, config, subsets=None, K=10, attention=(True, False),
                          seeds=None, noise_triples=0, fraction=0.2):
    """One row per (subset, attention flag, seed).

    Noise triples, when requested, are drawn from the train-split graph of
    every source with the row's seed and added on top of the subset.
    """
    subsets = all_subsets() if subsets is None else [tuple(sorted(set(s) | {INTERACTIONS})) for s in subsets]
    seeds = [config.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        noise = _noise_for(catalog, trace, noise_triples, seed, fraction) if noise_triples else None
        for subset in subsets:
            for flag in attention:
                cfg = replace(config, attention_enabled=flag, seed=seed)
                metrics, _, _ = experiment(catalog, trace, subset, cfg, K, noise=noise, fraction=fraction)
                rows.append({
                    "sources": "+".join(subset), "attention": flag, "recall": metrics["recall"],
                    "ndcg": metrics["ndcg"], "seed": seed, "noise_triples": noise_triples,
                })
    return rows


def best_combination(rows):
    """Subset with the highest mean recall over attention-enabled rows (ties: fewest sources, then name)."""
    by = {}
    for r in rows:
        if r["attention"]:
            by.setdefault(r["sources"], []).append(r["recall"])
    if not by:
        by = {r["sources"]: [] for r in rows}
        for r in rows:
            by[r["sources"]].append(r["recall"])
    best = min(by, key=lambda s: (-sum(by[s]) / len(by[s]), s.count("+"), s))
    return tuple(best.split("+"))


def noise_study(catalog, trace, selection, config, noise_triples, seeds, K=10, fraction=0.2):
    """Paired clean / noisy runs with attention on and off.

    Returns per-seed rows plus the mean recall drop for each attention flag.
    """
    rows = []
    for seed in seeds:
        noise = inject_noise(
            build_source_kgs(catalog, pairs=holdout_split(interaction_pairs(trace), fraction)[0]),
            noise_triples, seed)
        for flag in (True, False):
            cfg = replace(config, attention_enabled=flag, seed=seed)
            clean, _, _ = experiment(catalog, trace, selection, cfg, K, fraction=fraction)
            noisy, _, _ = experiment(catalog, trace, selection, cfg, K, noise=noise, fraction=fraction)
            rows.append({"seed": seed, "attention": flag, "clean": clean["recall"],
                         "noisy": noisy["recall"], "drop": clean["recall"] - noisy["recall"]})
    drops = {}
    for flag in (True, False):
        vals = [r["drop"] for r in rows if r["attention"] == flag]
        drops[flag] = sum(vals) / len(vals) if vals else 0.0
    return rows, drops


def write_combos(rows, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMBOS_HEADER)
        for r in rows:
            w.writerow([r["sources"], int(r["attention"]), repr(r["recall"]), repr(r["ndcg"]), r["seed"],
                        r["noise_triples"]])
