"""Alternating KG / CF training with plain mini-batch SGD, ranking and checkpoints."""

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from lfdata.ckat.kg import CKG, INTERACTIONS, SourceKG
from lfdata.ckat.model import (
    EmbeddingParams, attention_matrix, attention_weights, cf_loss_and_grad, kg_loss_and_grad,
    propagate,
)
from lfdata.errors import ConfigError, TrainingError, ValidationError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    l2: float = 1e-5
    kg_batch_size: int = 256
    cf_batch_size: int = 256
    epochs: int = 30
    negatives: int = 1
    attention_enabled: bool = True
    seed: int = 0
    d: int = 16
    k: int = 16
    n_layers: int = 2

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not self.l2 >= 0:
            raise ConfigError("l2 must be >= 0")
        if self.kg_batch_size < 1 or self.cf_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 0 or self.negatives < 1 or self.n_layers < 0:
            raise ConfigError("epochs >= 0, negatives >= 1 and n_layers >= 0 required")
        if self.d < 1 or self.k < 1:
            raise ConfigError("embedding dimensions must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


class TrainedModel:
    """Parameters plus the graph they were trained on; scores via final representations."""

    def __init__(self, ckg, params, config, kg_losses=(), cf_losses=()):
        self.ckg = ckg
        self.params = params
        self.config = config
        self.kg_losses = list(kg_losses)
        self.cf_losses = list(cf_losses)
        self._final = None

    def attention(self):
        return attention_weights(self.params, self.ckg, self.config.attention_enabled)

    def final(self):
        if self._final is None:
            A = attention_matrix(self.attention(), self.ckg.heads, self.ckg.tails, self.ckg.n_entities)
            self._final = propagate(self.params, A)
        return self._final

    def user_index(self, user):
        idx = self.ckg.entity_index.get(user)
        if idx is None or not user.startswith("user:"):
            raise ValidationError(f"unknown user {user}")
        return idx

    def item_scores(self, user):
        """Scores over ``ckg.items`` (canonical-id order) for one canonical user id."""
        final = self.final()
        return final[self.ckg.item_idx] @ final[self.user_index(user)]


def _sample_negatives(rng, pool, n, forbidden):
    """Uniform draws from ``pool`` avoiding ``forbidden(candidate)``; resamples per slot."""
    out = pool[rng.integers(len(pool), size=n)]
    for pos in range(n):
        tries = 0
        while forbidden(pos, int(out[pos])):
            out[pos] = pool[rng.integers(len(pool))]
            tries += 1
            if tries > 1000:
                raise TrainingError("could not sample a negative; graph too dense")
    return out


def _check(loss, phase, epoch):
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite {phase} loss at epoch {epoch}")


def _sgd(params, grads, lr):
    for name in ("E", "R", "W_r"):
        if name in grads:
            getattr(params, name)[...] -= lr * grads[name]
    for w, g in zip(params.layers, grads.get("layers", ())):
        w -= lr * g


def train(ckg, config=TrainConfig(), init=None):
    """Alternate one KG epoch and one CF epoch ``config.epochs`` times.

    Returns a :class:`TrainedModel` with the per-example loss of each epoch for both phases.
    """
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else EmbeddingParams.init(
        ckg.n_entities, ckg.n_relations, config.d, config.k, config.n_layers, config.seed)
    entities = np.arange(ckg.n_entities)
    inter = np.array(ckg.interactions, dtype=np.int64).reshape(-1, 2)
    if len(ckg.item_idx) <= 1:
        raise ValidationError("need at least two items to sample negatives")
    kg_losses, cf_losses = [], []
    edges = ckg.edge_set
    positives = ckg.positives

    for epoch in range(config.epochs):
        # KG phase over every edge, inverse edges included.
        order = np.repeat(rng.permutation(ckg.n_triples), config.negatives)
        total = 0.0
        for s in range(0, len(order), config.kg_batch_size):
            b = order[s:s + config.kg_batch_size]
            h, r, t = ckg.heads[b], ckg.rels[b], ckg.tails[b]
            hl, rl = h.tolist(), r.tolist()
            tn = _sample_negatives(rng, entities, len(b),
                                   lambda p, c: (hl[p], rl[p], c) in edges)
            loss, grads = kg_loss_and_grad(params, h, r, t, tn, config.l2)
            _check(loss, "KG", epoch)
            _sgd(params, grads, config.lr)
            total += loss
        kg_losses.append(total / max(len(order), 1))

        # CF phase with attention recomputed once from the updated embeddings.
        A = attention_matrix(attention_weights(params, ckg, config.attention_enabled),
                             ckg.heads, ckg.tails, ckg.n_entities)
        order = np.repeat(rng.permutation(len(inter)), config.negatives)
        total = 0.0
        for s in range(0, len(order), config.cf_batch_size):
            b = order[s:s + config.cf_batch_size]
            u, i = inter[b, 0], inter[b, 1]
            ul = u.tolist()
            j = _sample_negatives(rng, ckg.item_idx, len(b), lambda p, c: c in positives[ul[p]])
            loss, grads = cf_loss_and_grad(params, A, u, i, j, config.l2)
            _check(loss, "CF", epoch)
            _sgd(params, grads, config.lr)
            total += loss
        cf_losses.append(total / max(len(order), 1))

    return TrainedModel(ckg, params, config, kg_losses, cf_losses)


def recommend_topk(model, user, K, exclude_seen=True):
    """``[(item_id, score), ...]`` best first; equal scores fall back to canonical-id order."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    uidx = model.user_index(user)
    scores = model.item_scores(user)
    items = model.ckg.items
    seen = model.ckg.positives.get(uidx, set()) if exclude_seen else set()
    keep = [n for n, idx in enumerate(model.ckg.item_idx.tolist()) if idx not in seen]
    # Items are already in canonical order, so a stable sort on -score breaks ties by id.
    keep.sort(key=lambda n: -scores[n])
    return [(items[n], float(scores[n])) for n in keep[:K]]


# ---------------------------------------------------------------- checkpoints


def _write_npz(path, arrays):
    # np.savez stamps the current time into the archive; a fixed stamp keeps files byte-identical.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def save_checkpoint(model, directory):
    """Write ``params.npz`` and ``model.json`` (dictionaries, config, losses, graph edges)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = model.params
    arrays = {"E": p.E, "R": p.R, "W_r": p.W_r}
    arrays.update({f"layer{i}": w for i, w in enumerate(p.layers)})
    _write_npz(directory / "params.npz", arrays)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "entities": model.ckg.entities,
        "relations": model.ckg.relations,
        "selection": list(model.ckg.selection),
        "triples": [list(t) for t in model.ckg.base_triples],
        "kg_losses": model.kg_losses,
        "cf_losses": model.cf_losses,
        "n_layers": p.n_layers,
    }
    (directory / "model.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(directory):
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {meta.get('version')}")
    # All stored triples travel as one source; the edge order is canonical anyway.
    triples = [tuple(t) for t in meta["triples"]]
    ckg = CKG({INTERACTIONS: SourceKG(INTERACTIONS, triples)}, [INTERACTIONS],
              extra_entities=meta["entities"])
    ckg.selection = tuple(meta["selection"])
    if ckg.entities != meta["entities"] or ckg.relations != meta["relations"]:
        raise ValidationError("checkpoint dictionaries do not match its triples")
    with np.load(directory / "params.npz") as data:
        params = EmbeddingParams(
            data["E"].copy(), data["R"].copy(), data["W_r"].copy(),
            [data[f"layer{i}"].copy() for i in range(meta["n_layers"])],
        )
    config = TrainConfig.from_dict(meta["config"])
    return TrainedModel(ckg, params, config, meta["kg_losses"], meta["cf_losses"])
