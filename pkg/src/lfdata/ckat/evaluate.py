"""Holdout split, ranking metrics and the popularity baseline."""

import csv
import math
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np

from lfdata.ckat.kg import build_ckg, build_source_kgs, catalog_items, interaction_pairs, item_entity, user_entity
from lfdata.ckat.train import recommend_topk, train
from lfdata.errors import ConfigError

REC_HEADER = ["user_id", "rank", "item_id", "score"]


def holdout_split(pairs, fraction=0.2):
    """Per user, the last ``fraction`` of interactions (at least one) go to test.

    Users with a single interaction stay entirely in train.
    """
    by_user = defaultdict(list)
    for u, o in pairs:
        by_user[u].append(o)
    train_pairs, test = [], {}
    for u, objs in by_user.items():
        n_test = max(1, int(round(fraction * len(objs)))) if len(objs) >= 2 else 0
        cut = len(objs) - n_test
        train_pairs.extend((u, o) for o in objs[:cut])
        if n_test:
            test[u] = objs[cut:]
    return train_pairs, test


def ranking_metrics(ranked, held_out, K):
    """``(recall@K, ndcg@K)`` for one user with binary gains."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    held = set(held_out)
    top = ranked[:K]
    hits = [1.0 if x in held else 0.0 for x in top]
    recall = sum(hits) / len(held)
    dcg = sum(h / math.log2(pos + 2) for pos, h in enumerate(hits))
    ideal = sum(1.0 / math.log2(pos + 2) for pos in range(min(K, len(held))))
    return recall, dcg / ideal


def evaluate_rankings(rankings, test, K):
    """Mean recall@K and ndcg@K over users that have held-out items."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    rec, nd = [], []
    for u, held in sorted(test.items()):
        if not held:
            continue
        r, n = ranking_metrics(rankings.get(u, []), held, K)
        rec.append(r)
        nd.append(n)
    if not rec:
        return {"recall": 0.0, "ndcg": 0.0, "users": 0}
    return {"recall": float(np.mean(rec)), "ndcg": float(np.mean(nd)), "users": len(rec)}


def evaluate(model, test, K):
    """Rank every unseen item for each test user (canonical ids) and score the list."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    rankings = {}
    for u in test:
        if u in model.ckg.entity_index:
            rankings[u] = [i for i, _ in recommend_topk(model, u, K, exclude_seen=True)]
    return evaluate_rankings(rankings, test, K)


def popularity_rankings(train_pairs, items, users, K):
    """Rank by global train interaction count, excluding each user's train items; ties by id."""
    counts = Counter(i for _, i in train_pairs)
    order = sorted(items, key=lambda i: (-counts[i], i))
    seen = defaultdict(set)
    for u, i in train_pairs:
        seen[u].add(i)
    return {u: [i for i in order if i not in seen[u]][:K] for u in users}


def canonical_split(trace, fraction=0.2):
    """Holdout split of the trace's distinct interactions, expressed in canonical ids."""
    pairs = [(user_entity(u), item_entity(o)) for u, o in interaction_pairs(trace)]
    return holdout_split(pairs, fraction)


def experiment(catalog, trace, selection, config, K=10, noise=None, fraction=0.2):
    """Train on the split's train part with the chosen sources and evaluate on its test part.

    ``noise`` is an optional noise SourceKG appended to the selection.
    Returns ``(metrics, model, popularity_metrics)``.
    """
    raw_pairs = interaction_pairs(trace)
    train_raw, _ = holdout_split(raw_pairs, fraction)
    _, test = canonical_split(trace, fraction)
    sources = build_source_kgs(catalog, pairs=train_raw)
    selection = set(selection)
    if noise is not None:
        sources = dict(sources, noise=noise)
        selection.add("noise")
    ckg = build_ckg(sources, selection, extra_entities=catalog_items(catalog))
    model = train(ckg, config)
    metrics = evaluate(model, test, K)
    train_pairs = [(user_entity(u), item_entity(o)) for u, o in train_raw]
    pop = evaluate_rankings(popularity_rankings(train_pairs, ckg.items, list(test), K), test, K)
    return metrics, model, pop


def write_recommendations(model, users, K, path, exclude_seen=True):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REC_HEADER)
        for u in users:
            for rank, (item, score) in enumerate(recommend_topk(model, u, K, exclude_seen), start=1):
                w.writerow([u, rank, item, repr(score)])
