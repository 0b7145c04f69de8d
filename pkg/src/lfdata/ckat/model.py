"""TransR energy, relation-aware attention and attentive propagation, with hand-derived gradients.

Shapes: ``E`` is ``(n_entities, d)``, ``R`` is ``(n_relations, k)``, ``W_r`` is
``(n_relations, k, d)`` and each propagation transform is ``(d, d)``.  The
final representation of an entity concatenates its embedding at every layer.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

LEAKY_SLOPE = 0.2


@dataclass
class EmbeddingParams:
    E: np.ndarray
    R: np.ndarray
    W_r: np.ndarray
    layers: list

    @property
    def d(self):
        return self.E.shape[1]

    @property
    def k(self):
        return self.R.shape[1]

    @property
    def n_layers(self):
        return len(self.layers)

    def blocks(self):
        return {"E": self.E, "R": self.R, "W_r": self.W_r,
                **{f"layer{i}": w for i, w in enumerate(self.layers)}}

    def copy(self):
        return EmbeddingParams(self.E.copy(), self.R.copy(), self.W_r.copy(),
                               [w.copy() for w in self.layers])

    @classmethod
    def init(cls, n_entities, n_relations, d=16, k=16, n_layers=2, seed=0):
        rng = np.random.default_rng(seed)
        be, bk = 1.0 / np.sqrt(d), 1.0 / np.sqrt(k)
        return cls(
            rng.uniform(-be, be, size=(n_entities, d)),
            rng.uniform(-bk, bk, size=(n_relations, k)),
            rng.uniform(-be, be, size=(n_relations, k, d)),
            [rng.uniform(-be, be, size=(d, d)) for _ in range(n_layers)],
        )


def leaky_relu(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x):
    return np.where(x > 0, 1.0, LEAKY_SLOPE)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sigmoid(x):
    return np.exp(log_sigmoid(x))


# ---------------------------------------------------------------- TransR


def transr_energy(params, h, r, t):
    """``||W_r e_h + e_r - W_r e_t||^2``; accepts scalars or index arrays."""
    h, r, t = np.asarray(h), np.asarray(r), np.asarray(t)
    W = params.W_r[r]
    v = np.einsum("...kd,...d->...k", W, params.E[h] - params.E[t]) + params.R[r]
    return (v * v).sum(axis=-1)


def kg_loss_and_grad(params, h, r, t, t_neg, l2):
    """Pairwise TransR loss over a batch and its gradients w.r.t. ``E``, ``R`` and ``W_r``.

    loss = sum(-log sigmoid(g(h,r,t') - g(h,r,t))) + l2/2 * mean(||W_r e_h||^2
    + ||e_r||^2 + ||W_r e_t||^2 + ||W_r e_t'||^2)

    The ranking term is summed over the batch; the L2 term is a batch mean so
    that large ``l2`` stays a contraction under SGD.
    """
    B = len(h)
    W = params.W_r[r]
    eh, et, en, er = params.E[h], params.E[t], params.E[t_neg], params.R[r]
    ph = np.einsum("bkd,bd->bk", W, eh)
    pt = np.einsum("bkd,bd->bk", W, et)
    pn = np.einsum("bkd,bd->bk", W, en)
    v_pos = ph + er - pt
    v_neg = ph + er - pn
    g_pos = (v_pos ** 2).sum(axis=1)
    g_neg = (v_neg ** 2).sum(axis=1)
    x = g_neg - g_pos
    reg = (ph ** 2).sum() + (er ** 2).sum() + (pt ** 2).sum() + (pn ** 2).sum()
    loss = -log_sigmoid(x).sum() + 0.5 * l2 * reg / B

    dx = -sigmoid(-x)
    # d loss / d v for the positive and corrupted triples
    dv_pos = (-dx)[:, None] * 2 * v_pos
    dv_neg = dx[:, None] * 2 * v_neg
    c = l2 / B
    d_ph = dv_pos + dv_neg + c * ph
    d_pt = -dv_pos + c * pt
    d_pn = -dv_neg + c * pn
    d_er = dv_pos + dv_neg + c * er

    gE = np.zeros_like(params.E)
    np.add.at(gE, h, np.einsum("bkd,bk->bd", W, d_ph))
    np.add.at(gE, t, np.einsum("bkd,bk->bd", W, d_pt))
    np.add.at(gE, t_neg, np.einsum("bkd,bk->bd", W, d_pn))
    gR = np.zeros_like(params.R)
    np.add.at(gR, r, d_er)
    gW = np.zeros_like(params.W_r)
    np.add.at(gW, r, np.einsum("bk,bd->bkd", d_ph, eh) + np.einsum("bk,bd->bkd", d_pt, et)
              + np.einsum("bk,bd->bkd", d_pn, en))
    return loss, {"E": gE, "R": gR, "W_r": gW}


# ---------------------------------------------------------------- attention


def attention_scores(params, heads, rels, tails):
    """Unnormalised score ``(W_r e_t)^T tanh(W_r e_h + e_r)`` per edge."""
    W = params.W_r[rels]
    pt = np.einsum("bkd,bd->bk", W, params.E[tails])
    ph = np.einsum("bkd,bd->bk", W, params.E[heads])
    return (pt * np.tanh(ph + params.R[rels])).sum(axis=1)


def edge_softmax(scores, heads, n_entities):
    """Softmax of ``scores`` within each head's outgoing edges."""
    if len(scores) == 0:
        return scores.astype(float)
    top = np.full(n_entities, -np.inf)
    np.maximum.at(top, heads, scores)
    ex = np.exp(scores - top[heads])
    denom = np.zeros(n_entities)
    np.add.at(denom, heads, ex)
    return ex / denom[heads]


def attention_weights(params, ckg, enabled=True):
    """Per-edge attention, aligned with ``ckg.heads``; uniform over neighbours when disabled."""
    if not enabled:
        deg = np.bincount(ckg.heads, minlength=ckg.n_entities).astype(float)
        return 1.0 / deg[ckg.heads]
    return edge_softmax(attention_scores(params, ckg.heads, ckg.rels, ckg.tails), ckg.heads,
                        ckg.n_entities)


def neighbor_attention(params, ckg, entity, enabled=True):
    """``{(relation, tail): weight}`` over the neighbourhood of one entity (empty if isolated)."""
    mask = ckg.heads == entity
    if not mask.any():
        return {}
    h, r, t = ckg.heads[mask], ckg.rels[mask], ckg.tails[mask]
    if enabled:
        w = edge_softmax(attention_scores(params, h, r, t), h, ckg.n_entities)
    else:
        w = np.full(len(h), 1.0 / len(h))
    return {(int(a), int(b)): float(x) for a, b, x in zip(r, t, w)}


def attention_matrix(weights, heads, tails, n_entities):
    """Sparse ``A`` with ``A[h, t]`` = summed attention of edges from ``h`` to ``t``."""
    return sp.csr_matrix((weights, (heads, tails)), shape=(n_entities, n_entities))


# ---------------------------------------------------------------- propagation


def propagate(params, A, cache=False):
    """Final representations ``e* = [e^(0) || ... || e^(L)]``.

    ``e^(l) = LeakyReLU(W^(l) (e^(l-1) + A e^(l-1)))``.  With ``cache=True``
    the intermediate sums and pre-activations are returned for backprop.
    """
    H = params.E
    outs = [H]
    saved = []
    for W in params.layers:
        S = H + A @ H
        Z = S @ W.T
        H = leaky_relu(Z)
        outs.append(H)
        saved.append((S, Z))
    final = np.hstack(outs)
    if cache:
        return final, saved
    return final


def predict_score(final, u, i):
    return final[u] @ final[i].T if np.ndim(u) or np.ndim(i) else float(final[u] @ final[i])


def cf_loss_and_grad(params, A, u, i, j, l2):
    """BPR loss on final representations with attention ``A`` held fixed.

    loss = sum(-log sigmoid(y(u,i) - y(u,j))) + l2/2 * mean(||e*_u||^2 + ||e*_i||^2 + ||e*_j||^2)
    Gradients are w.r.t. ``E`` and the propagation transforms.
    """
    B = len(u)
    final, saved = propagate(params, A, cache=True)
    xu, xi, xj = final[u], final[i], final[j]
    x = (xu * xi).sum(axis=1) - (xu * xj).sum(axis=1)
    reg = (xu ** 2).sum() + (xi ** 2).sum() + (xj ** 2).sum()
    loss = -log_sigmoid(x).sum() + 0.5 * l2 * reg / B

    dx = (-sigmoid(-x))[:, None]
    c = l2 / B
    G = np.zeros_like(final)
    np.add.at(G, u, dx * (xi - xj) + c * xu)
    np.add.at(G, i, dx * xu + c * xi)
    np.add.at(G, j, -dx * xu + c * xj)

    d = params.d
    L = params.n_layers
    grads_layers = [None] * L
    g_h = G[:, L * d:(L + 1) * d]
    for layer in range(L, 0, -1):
        S, Z = saved[layer - 1]
        W = params.layers[layer - 1]
        dZ = g_h * leaky_relu_grad(Z)
        grads_layers[layer - 1] = dZ.T @ S
        dS = dZ @ W
        g_h = G[:, (layer - 1) * d:layer * d] + dS + A.T @ dS
    return loss, {"E": g_h, "layers": grads_layers}
