"""Per-source knowledge graphs and their alignment into one collaborative graph."""

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from lfdata.errors import ValidationError

LOCALITY = "locality"
DOMAIN_MODEL = "domain_model"
USER_ASSOCIATION = "user_association"
INTERACTIONS = "interactions"
NOISE = "noise"
SOURCES = (LOCALITY, DOMAIN_MODEL, USER_ASSOCIATION, INTERACTIONS, NOISE)
KNOWLEDGE_SOURCES = (LOCALITY, DOMAIN_MODEL, USER_ASSOCIATION)

INTERACT = "interact"
INVERSE_SUFFIX = "~inv"


def canonical(kind, raw):
    """Canonical entity id used for alignment: ``kind:raw`` lowercased and trimmed."""
    return f"{kind}:{str(raw).strip().lower()}"


def item_entity(object_id):
    return canonical("item", object_id)


def user_entity(user_id):
    return canonical("user", user_id)


@dataclass
class SourceKG:
    source: str
    triples: list

    def __post_init__(self):
        # Stable de-duplication.
        self.triples = list(dict.fromkeys(tuple(t) for t in self.triples))

    @property
    def entities(self):
        out = set()
        for h, _, t in self.triples:
            out.add(h)
            out.add(t)
        return out


def interaction_pairs(trace):
    """Distinct (user, object) pairs in first-request order."""
    seen = {}
    for req in sorted(trace, key=lambda r: (r.t_arrive, r.req_id)):
        seen.setdefault((req.user_id, req.object_id), None)
    return list(seen)


def build_source_kgs(catalog, trace=None, pairs=None):
    """One graph per knowledge source.

    Interactions come from ``pairs`` when given, otherwise from ``trace``.
    """
    objects = sorted(catalog.objects.values(), key=lambda o: o.object_id)
    locality, domain = [], []
    for o in objects:
        item = item_entity(o.object_id)
        locality.append((item, "located_in", canonical("region", o.region_id)))
        locality.append((item, "mounted_on", canonical("instrument", o.instrument_id)))
        domain.append((item, "has_kind", canonical("kind", o.data_kind)))
    for recipe in catalog.recipes:
        for kind in sorted(recipe.input_kinds):
            domain.append((canonical("kind", kind), "derives", canonical("kind", recipe.product_kind)))
    assoc = [(user_entity(u.user_id), "member_of", canonical("org", u.org_id))
             for u in sorted(catalog.users.values(), key=lambda u: u.user_id)]
    if pairs is None:
        pairs = interaction_pairs(trace or [])
    inter = [(user_entity(u), INTERACT, item_entity(o)) for u, o in pairs]
    return {
        LOCALITY: SourceKG(LOCALITY, locality),
        DOMAIN_MODEL: SourceKG(DOMAIN_MODEL, domain),
        USER_ASSOCIATION: SourceKG(USER_ASSOCIATION, assoc),
        INTERACTIONS: SourceKG(INTERACTIONS, inter),
    }


def inject_noise(sources, m, seed, relation="noise"):
    """``m`` distinct random triples between entities already present in ``sources``."""
    entities = sorted(set().union(*(s.entities for s in sources.values())))
    rng = np.random.default_rng(seed)
    n = len(entities)
    if m > 0 and n < 2:
        raise ValidationError("need at least two entities to inject noise")
    triples = set()
    out = []
    while len(out) < m:
        a, b = rng.integers(n, size=2)
        if a == b:
            continue
        triple = (entities[a], relation, entities[b])
        if triple not in triples:
            triples.add(triple)
            out.append(triple)
    return SourceKG(NOISE, out)


class CKG:
    """Aligned collaborative knowledge graph with inverse edges.

    Entities and relations are indexed densely in sorted canonical-id order.
    ``heads``, ``rels`` and ``tails`` hold every edge, inverse edges included.
    """

    def __init__(self, sources, selection, extra_entities=()):
        selection = tuple(sorted(set(selection)))
        if INTERACTIONS not in selection:
            raise ValidationError("the interactions source is always required")
        missing = [s for s in selection if s not in sources]
        if missing:
            raise ValidationError(f"unknown sources: {missing}")
        if not sources[INTERACTIONS].triples:
            raise ValidationError("no user-item interactions")
        self.selection = selection
        base = []
        for name in selection:
            base.extend(sources[name].triples)
        base = sorted(set(base))
        self.base_triples = base

        ents = set(extra_entities)
        rels = set()
        for h, r, t in base:
            ents.add(h)
            ents.add(t)
            rels.add(r)
        self.entities = sorted(ents)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        rel_names = []
        for r in sorted(rels):
            rel_names += [r, r + INVERSE_SUFFIX]
        self.relations = rel_names
        self.relation_index = {r: i for i, r in enumerate(rel_names)}

        h = np.array([self.entity_index[x] for x, _, _ in base], dtype=np.int64)
        r = np.array([self.relation_index[x] for _, x, _ in base], dtype=np.int64)
        t = np.array([self.entity_index[x] for _, _, x in base], dtype=np.int64)
        r_inv = np.array([self.relation_index[x + INVERSE_SUFFIX] for _, x, _ in base], dtype=np.int64)
        self.heads = np.concatenate([h, t])
        self.rels = np.concatenate([r, r_inv])
        self.tails = np.concatenate([t, h])

        self.users = sorted(e for e in self.entities if e.startswith("user:"))
        self.items = sorted(e for e in self.entities if e.startswith("item:"))
        self.user_idx = np.array([self.entity_index[u] for u in self.users], dtype=np.int64)
        self.item_idx = np.array([self.entity_index[i] for i in self.items], dtype=np.int64)

        inter = self.relation_index[INTERACT]
        mask = self.rels == inter
        self.interactions = list(zip(self.heads[mask].tolist(), self.tails[mask].tolist()))
        self.positives = defaultdict(set)
        for u, i in self.interactions:
            self.positives[u].add(i)
        self.edge_set = set(zip(self.heads.tolist(), self.rels.tolist(), self.tails.tolist()))

    @property
    def n_entities(self):
        return len(self.entities)

    @property
    def n_relations(self):
        return len(self.relations)

    @property
    def n_triples(self):
        return len(self.heads)

    def neighbors(self, entity):
        """``(relation, tail)`` pairs leaving ``entity`` (an index)."""
        mask = self.heads == entity
        return list(zip(self.rels[mask].tolist(), self.tails[mask].tolist()))


def build_ckg(sources, selection, extra_entities=()):
    """Align the selected sources; ``extra_entities`` are registered even without edges."""
    return CKG(sources, selection, extra_entities)


def catalog_items(catalog):
    return [item_entity(o) for o in sorted(catalog.objects)]
