"""Independent oracles used to verify the package implementations.

Everything in here is deliberately naive: dense matrices, recursive
enumeration, brute-force counting. Nothing imports the modules under test
except the graph container itself.
"""

import numpy as np

EMPTY = -1


# -- dense propagation oracles ---------------------------------------------

def interaction_adjacency(graph):
    """Dense (m+n) x (m+n) bipartite interaction adjacency."""
    m, n = graph.m, graph.n
    A = np.zeros((m + n, m + n))
    for u in range(m):
        for j in graph.user_item_set(u):
            A[u, m + j] = 1.0
            A[m + j, u] = 1.0
    return A


def social_adjacency(graph):
    m = graph.m
    S = np.zeros((m, m))
    for u in range(m):
        for q in graph.social_set(u):
            S[u, q] = 1.0
    return S


def joint_adjacency(graph):
    """Dense joint adjacency [[S, R], [R^T, 0]]."""
    A = interaction_adjacency(graph)
    A[:graph.m, :graph.m] = social_adjacency(graph)
    return A


def symmetric_normalize(A):
    """D^{-1/2} A D^{-1/2}; rows/cols of isolated nodes get a unit diagonal
    so their state passes through unchanged (isolated nodes keep their own
    embedding)."""
    deg = A.sum(axis=1)
    safe = np.where(deg > 0, deg, 1.0)
    N = A / np.sqrt(safe)[:, None] / np.sqrt(safe)[None, :]
    for i in np.flatnonzero(deg == 0):
        N[i, i] = 1.0
    return N


def dense_layer_mean(N, X0, layers):
    states = [X0]
    for _ in range(layers):
        states.append(N @ states[-1])
    return sum(states) / (layers + 1)


def dense_interaction_tower(graph, E, k1):
    """Layer-mean LightGCN on the bipartite interaction graph."""
    N = symmetric_normalize(interaction_adjacency(graph))
    out = dense_layer_mean(N, np.asarray(E, dtype=np.float64), k1)
    return out[:graph.m], out[graph.m:]


def phi_oracle(graph, i, q):
    a = set(graph.user_item_set(i).tolist())
    b = set(graph.user_item_set(q).tolist())
    union = a | b
    if not union:
        return 0.0
    return np.sqrt(len(a & b) / len(union))


def influence_matrix(graph, use_influence=True):
    """Row-stochastic social aggregation matrix W[q, i] for i in N^s(q).

    Isolated users get a unit diagonal (state passthrough)."""
    m = graph.m
    W = np.zeros((m, m))
    if use_influence:
        for q in range(m):
            nbrs = graph.social_set(q)
            if len(nbrs) == 0:
                W[q, q] = 1.0
                continue
            raw = np.array([phi_oracle(graph, i, q) for i in nbrs])
            ex = np.exp(raw - raw.max())
            W[q, nbrs] = ex / ex.sum()
    else:
        S = social_adjacency(graph)
        W = symmetric_normalize(S)
    return W


def dense_social_tower(graph, E_users, k2, use_influence=True):
    W = influence_matrix(graph, use_influence)
    return dense_layer_mean(W, np.asarray(E_users, dtype=np.float64), k2)


# -- walk enumeration oracle ------------------------------------------------

def joint_neighbors_of(graph, node):
    """Joint-graph neighbor list of a joint-indexed node."""
    return graph.joint_set(node).tolist()


def enumerate_paths_brute(graph, source, k):
    """Exact ego-path distribution of depth-k uniform walks from a user.

    Returns {slots tuple (joint indices, EMPTY-padded): probability}.
    Recursive product-of-uniform-steps enumeration, independent of the
    package's own enumerator.
    """
    out = {}

    def pad(kept):
        return tuple(kept) + (EMPTY,) * (k - len(kept))

    def step(node, t, prob, kept):
        if t == k:
            out[pad(kept)] = out.get(pad(kept), 0.0) + prob
            return
        nbrs = joint_neighbors_of(graph, node)
        if not nbrs:
            out[pad(kept)] = out.get(pad(kept), 0.0) + prob
            return
        p = prob / len(nbrs)
        for nb in nbrs:
            if nb != source and nb not in kept:
                step(nb, t + 1, p, kept + [nb])
            else:
                step(nb, t + 1, p, kept)

    step(source, 0, 1.0, [])
    return out


# -- motif counting oracles --------------------------------------------------

def brute_triangles(graph, source):
    """Node sets {source, a, b} with all three joint edges present."""
    nbrs = joint_neighbors_of(graph, source)
    found = set()
    for ai in range(len(nbrs)):
        for bi in range(ai + 1, len(nbrs)):
            a, b = nbrs[ai], nbrs[bi]
            if b in joint_neighbors_of(graph, a):
                found.add(frozenset((source, a, b)))
    return found


def brute_quads(graph, source):
    """Count of (endpoint x, unordered middle pair {a,b}) quadrilaterals.

    a and b must both be adjacent to the source and to x; x is any node
    other than the source. Each (x, {a,b}) combination is one instance.
    """
    total = 0
    src_nbrs = set(joint_neighbors_of(graph, source))
    n_nodes = graph.m + graph.n
    for x in range(n_nodes):
        if x == source:
            continue
        middles = [y for y in joint_neighbors_of(graph, x) if y in src_nbrs]
        c = len(middles)
        total += c * (c - 1) // 2
    return total


# -- explained-score oracle ----------------------------------------------------

def manual_explained_scores(graph, Er, Es, k1, k2, k, user, items, slots,
                            draws_r, draws_s, use_influence=True,
                            use_trans=True, use_social_tower=True,
                            kminus1_divisor=False, renorm_empty=False):
    """Plain-loop reimplementation of explained scoring for one user.

    slots: (n_w, k) joint-index rows; draws_r/draws_s: (len(items), n_w)
    inclusion weights. Towers are the dense oracles above; attention and
    re-aggregation are written out hop by hop.
    """
    Er = np.asarray(Er, dtype=np.float64)
    Es = np.asarray(Es, dtype=np.float64)
    m, n = graph.m, graph.n
    d = Er.shape[1]
    H, C = dense_interaction_tower(graph, Er, k1)
    Hs = dense_social_tower(graph, Es[:m], k2, use_influence)
    tilde = np.zeros((n, d))
    for j in range(n):
        us = graph.item_users[
            graph.item_users_indptr[j]:graph.item_users_indptr[j + 1]]
        if use_trans and len(us):
            tilde[j] = Hs[us].mean(axis=0)
        else:
            tilde[j] = Es[m + j]

    def cosine(x, y):
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0.0 or ny == 0.0:
            return 0.0
        return float(x @ y) / (nx * ny)

    def run_tower(state_of, ids_of, cand_sim, h_user, draws_row):
        divisor = (k - 1) if kminus1_divisor else k
        p = []
        for row in slots:
            tot = sum(cosine(state_of(x), cand_sim) for x in row if x != EMPTY)
            p.append((tot / divisor + 1.0) / 2.0)
        agg = np.zeros(d)
        hops_used = 0
        for hop in range(k):
            entries = [t for t, row in enumerate(slots)
                       if row[hop] != EMPTY and draws_row[t] > 0]
            if not entries:
                continue
            hops_used += 1
            logits = np.array([
                cosine(state_of(slots[t][hop]), cand_sim) / np.sqrt(d)
                + np.log(draws_row[t]) for t in entries])
            ex = np.exp(logits - logits.max())
            alphas = ex / ex.sum()
            for a, t in zip(alphas, entries):
                agg = agg + a * ids_of(slots[t][hop])
        div2 = (1 + hops_used) if renorm_empty else (k + 1)
        return (h_user + agg) / div2, np.clip(np.array(p), 0.0, 1.0)

    out = {"g_r": [], "g_s": [], "g": [], "p_r": [], "p_s": []}
    for ci, j in enumerate(items):
        h_hat_r, p_r = run_tower(
            lambda x: H[x] if x < m else C[x - m], lambda x: Er[x],
            C[j], H[user], draws_r[ci])
        g_r = float(h_hat_r @ C[j])
        if use_social_tower:
            h_hat_s, p_s = run_tower(
                lambda x: Hs[x] if x < m else tilde[x - m], lambda x: Es[x],
                tilde[j], Hs[user], draws_s[ci])
            g_s = float(h_hat_s @ Es[m + j])
        else:
            g_s, p_s = 0.0, np.zeros(len(slots))
        out["g_r"].append(g_r)
        out["g_s"].append(g_s)
        out["g"].append(g_r + g_s)
        out["p_r"].append(p_r)
        out["p_s"].append(p_s)
    return {key: np.asarray(val) for key, val in out.items()}


# -- finite differences -------------------------------------------------------

def central_fd(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# -- random graph generators ---------------------------------------------------

def random_joint_graph(rng, m_max=6, n_max=6, p_inter=0.45, p_social=0.35):
    """Small random JointGraph with at least one interaction edge."""
    from sorex.graphs import build_joint_graph
    while True:
        m = int(rng.integers(2, m_max + 1))
        n = int(rng.integers(1, n_max + 1))
        inter = [(u, j) for u in range(m) for j in range(n)
                 if rng.random() < p_inter]
        social = [(a, b) for a in range(m) for b in range(a + 1, m)
                  if rng.random() < p_social]
        if inter:
            return build_joint_graph(m, n, inter, social)
