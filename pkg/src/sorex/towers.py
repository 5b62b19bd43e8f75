"""Embedding tables and the two GNN towers.

The interaction tower is layer-mean LightGCN over the bipartite user-item
graph; the social tower aggregates over the social graph with influence
weights derived from square-rooted Jaccard similarity of interaction sets.
Neither tower has learned transforms: propagation is a fixed sparse matrix
applied repeatedly to the ID embeddings, so the only parameters anywhere
are the two embedding tables.

Isolated nodes keep their own embedding: the propagation matrices carry a
unit diagonal entry for every degree-0 row, making each layer a no-op there.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch

from .graphs import JointGraph
from .seeding import STREAM_INIT_R, STREAM_INIT_S, derive_rng


@dataclass
class TowerConfig:
    d: int = 64
    k1: int = 2
    k2: int = 1
    use_social_influence: bool = True
    use_social_tower: bool = True
    use_trans_item_emb: bool = True


@dataclass
class InfluenceWeights:
    """Per social edge, aligned with the graph's social CSR: raw influence
    phi in [0,1] and the per-user softmax alpha over that user's friends."""

    indptr: np.ndarray
    neighbors: np.ndarray
    phi: np.ndarray
    alpha: np.ndarray


def init_embeddings(m, n, d, seed, scale=0.1):
    """Two (m+n) x d tables, i.i.d. uniform in [-scale, scale], from
    distinct streams of the seeded RNG."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    shape = (m + n, d)
    e_r = derive_rng(seed, STREAM_INIT_R).uniform(-scale, scale, size=shape)
    e_s = derive_rng(seed, STREAM_INIT_S).uniform(-scale, scale, size=shape)
    return (torch.from_numpy(e_r.astype(np.float32)),
            torch.from_numpy(e_s.astype(np.float32)))


def _coo_with_isolated_diag(rows, cols, vals, size, dtype):
    deg_rows = np.zeros(size, dtype=np.int64)
    np.add.at(deg_rows, rows, 1)
    isolated = np.flatnonzero(deg_rows == 0)
    rows = np.concatenate([rows, isolated])
    cols = np.concatenate([cols, isolated])
    vals = np.concatenate([vals, np.ones(len(isolated), dtype=vals.dtype)])
    idx = torch.from_numpy(np.stack([rows, cols]))
    return torch.sparse_coo_tensor(
        idx, torch.from_numpy(vals).to(dtype), (size, size),
        check_invariants=False).coalesce()


def interaction_adjacency(graph: JointGraph, dtype=torch.float32):
    """Symmetrically normalized bipartite adjacency over joint indices."""
    m, n = graph.m, graph.n
    users = np.repeat(np.arange(m), np.diff(graph.user_items_indptr))
    items = graph.user_items + m
    deg = np.zeros(m + n)
    np.add.at(deg, users, 1.0)
    np.add.at(deg, items, 1.0)
    safe = np.where(deg > 0, deg, 1.0)
    vals = 1.0 / np.sqrt(safe[users] * safe[items])
    rows = np.concatenate([users, items])
    cols = np.concatenate([items, users])
    vals = np.concatenate([vals, vals])
    return _coo_with_isolated_diag(rows, cols, vals, m + n, dtype)


def jaccard_influence(graph: JointGraph) -> InfluenceWeights:
    """phi(i,q) = sqrt(|N_i ∩ N_q| / |N_i ∪ N_q|) per social edge, with the
    0/0 case defined as 0, then a softmax per user over their friends."""
    m = graph.m
    rows = np.repeat(np.arange(m), np.diff(graph.social_indptr))
    cols = graph.social
    if len(cols):
        r_users = np.repeat(np.arange(m), np.diff(graph.user_items_indptr))
        R = sp.csr_matrix(
            (np.ones(len(graph.user_items)), (r_users, graph.user_items)),
            shape=(m, graph.n))
        inter = np.asarray(
            R[rows].multiply(R[cols]).sum(axis=1)).ravel()
        deg = np.diff(graph.user_items_indptr).astype(np.float64)
        union = deg[rows] + deg[cols] - inter
        phi = np.sqrt(np.divide(inter, union, out=np.zeros_like(union),
                                where=union > 0))
    else:
        phi = np.zeros(0)
    alpha = np.zeros_like(phi)
    for u in range(m):
        s0, s1 = graph.social_indptr[u], graph.social_indptr[u + 1]
        if s1 > s0:
            ex = np.exp(phi[s0:s1] - phi[s0:s1].max())
            alpha[s0:s1] = ex / ex.sum()
    return InfluenceWeights(graph.social_indptr.copy(), cols.copy(), phi, alpha)


def social_aggregation(graph: JointGraph, weights: InfluenceWeights = None,
                       dtype=torch.float32):
    """Row-stochastic m x m aggregation matrix W[q, i] for i in N^s(q).

    With ``weights`` the entries are the influence softmax; without, plain
    LightGCN symmetric normalization over the social graph (the "w/o soc
    impact" ablation).
    """
    m = graph.m
    rows = np.repeat(np.arange(m), np.diff(graph.social_indptr))
    cols = graph.social
    if weights is not None:
        vals = weights.alpha.astype(np.float64)
    else:
        deg = np.diff(graph.social_indptr).astype(np.float64)
        safe = np.where(deg > 0, deg, 1.0)
        vals = 1.0 / np.sqrt(safe[rows] * safe[cols])
    return _coo_with_isolated_diag(rows, cols, vals, m, dtype)


def propagate(adj, X, layers):
    """Mean of layer-0..layers states under repeated sparse aggregation."""
    acc = X
    state = X
    for _ in range(layers):
        state = torch.sparse.mm(adj, state)
        acc = acc + state
    return acc / (layers + 1)


def propagate_interaction(e_r, graph: JointGraph, k1, adj=None):
    """Interaction-tower states (H^r user rows, C^r item rows)."""
    if k1 < 1:
        raise ValueError("k1 must be >= 1")
    if adj is None:
        adj = interaction_adjacency(graph, e_r.dtype)
    out = propagate(adj, e_r, k1)
    return out[:graph.m], out[graph.m:]


def propagate_social(e_s, graph: JointGraph, weights, k2, agg=None):
    """Social-tower user states H^s from the user rows of E^s."""
    if k2 < 1:
        raise ValueError("k2 must be >= 1")
    if agg is None:
        agg = social_aggregation(graph, weights, e_s.dtype)
    return propagate(agg, e_s[:graph.m], k2)


def item_pool_matrix(graph: JointGraph, dtype=torch.float32):
    """(n x m) row-mean pooling matrix over training interactors; cold-item
    rows are all zero. Build once and reuse across steps."""
    m, n = graph.m, graph.n
    items = np.repeat(np.arange(n), np.diff(graph.item_users_indptr))
    deg = np.diff(graph.item_users_indptr).astype(np.float64)
    safe = np.where(deg > 0, deg, 1.0)
    vals = 1.0 / safe[items]
    idx = torch.from_numpy(np.stack([items, graph.item_users]))
    pool = torch.sparse_coo_tensor(
        idx, torch.from_numpy(vals).to(dtype), (n, m),
        check_invariants=False).coalesce()
    return pool, torch.from_numpy(deg == 0).unsqueeze(1)


def item_social_reprs(h_s, e_s, graph: JointGraph, use_trans_item_emb=True,
                      pool=None):
    """Social-tower item states: mean of interactors' H^s rows, falling back
    to the item's own ID embedding for cold items (or always, under the
    "w/o trans item emb" ablation)."""
    id_rows = e_s[graph.m:]
    if not use_trans_item_emb:
        return id_rows
    if pool is None:
        pool = item_pool_matrix(graph, h_s.dtype)
    mat, cold = pool
    pooled = torch.sparse.mm(mat, h_s)
    return torch.where(cold, id_rows, pooled)


def base_score(h_r, c_r, h_s, e_s, graph, users, items,
               use_social_tower=True):
    """Base tower scores for (user, item) index arrays: g = g_r + g_s."""
    users = torch.as_tensor(users, dtype=torch.long)
    items = torch.as_tensor(items, dtype=torch.long)
    g_r = (h_r[users] * c_r[items]).sum(-1)
    if use_social_tower:
        g_s = (h_s[users] * e_s[graph.m + items]).sum(-1)
    else:
        g_s = torch.zeros_like(g_r)
    return g_r, g_s, g_r + g_s
