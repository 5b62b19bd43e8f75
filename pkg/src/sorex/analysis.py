"""Ego-path templates, motif enumeration, and explanation exports.

Paths with two retained hops fall into three templates: friend-of-friend
(user, user), co-purchase (item, user), and friend-interaction (user, item).
Walk pools close triangles and quadrilaterals over these paths; detection
statistics compare how often the sampled explanations expose those motifs
against how often they form.
"""

import json
from dataclasses import dataclass

import numpy as np

from .egopath import EMPTY
from .evaluation import items_by_user, rank_of_truth, _test_candidates
from .seeding import STREAM_ANALYSIS, derive_rng

TOWERS = ("interaction", "social")

TRIANGLE = "triangle"
QUADRILATERAL = "quadrilateral"

_TEMPLATES_K2 = {
    ("user", "user"): "fof",
    ("item", "user"): "cop",
    ("user", "item"): "fi",
}


def node_kind(node, m):
    return "user" if node < m else "item"


def node_name(node, m, graph=None):
    if graph is not None:
        if node < m and graph.user_labels:
            return graph.user_labels[node]
        if node >= m and graph.item_labels:
            return graph.item_labels[node - m]
    return f"u{node}" if node < m else f"v{node - m}"


def classify_path(slots, m):
    """Template label for one path's retained slots."""
    slots = [int(s) for s in slots]
    if any(s == EMPTY for s in slots):
        return "short"
    kinds = tuple(node_kind(s, m) for s in slots)
    if len(kinds) != 2:
        return "other"
    return _TEMPLATES_K2.get(kinds, "other")


@dataclass(frozen=True)
class MotifInstance:
    kind: str
    type: str
    nodes: tuple
    paths: tuple


def _full_paths(slots):
    """Indices of pool paths with every slot retained."""
    return [t for t in range(len(slots)) if not np.any(slots[t] == EMPTY)]


def find_motifs(slots, source, graph):
    """Triangles and quadrilaterals formed by the pool's full-length paths.

    A path (a, b, ...) closes a triangle {source, a, b} when its second
    node neighbors the source in the joint graph; triangles collapse by
    node set with every realizing path recorded. Every unordered pair of
    distinct path instances sharing a final node with different leading
    slots is one quadrilateral instance (no node-set collapsing).
    """
    m = graph.m
    src_joint = source
    neighbors = set(int(x) for x in graph.joint_set(src_joint))
    slots = np.asarray(slots)
    full = _full_paths(slots)

    triangles = {}
    for t in full:
        a, b = int(slots[t][0]), int(slots[t][1])
        if b in neighbors:
            key = tuple(sorted((src_joint, a, b)))
            triangles.setdefault(key, []).append(t)
    motifs = []
    for key, paths in sorted(triangles.items()):
        others = [x for x in key if x != src_joint]
        kinds = sorted(node_kind(x, m) for x in others)
        t_type = "fof" if kinds == ["user", "user"] else "cop"
        motifs.append(MotifInstance(TRIANGLE, t_type, key, tuple(paths)))

    by_endpoint = {}
    for t in full:
        by_endpoint.setdefault(int(slots[t][-1]), []).append(t)
    for endpoint in sorted(by_endpoint):
        group = by_endpoint[endpoint]
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                ti, tj = group[i], group[j]
                mid_i = tuple(int(x) for x in slots[ti][:-1])
                mid_j = tuple(int(x) for x in slots[tj][:-1])
                if mid_i == mid_j:
                    continue
                labels = sorted((classify_path(slots[ti], m),
                                 classify_path(slots[tj], m)))
                nodes = tuple(sorted({src_joint, endpoint,
                                      *mid_i, *mid_j}))
                motifs.append(MotifInstance(QUADRILATERAL,
                                            "+".join(labels), nodes,
                                            (ti, tj)))
    return motifs


def motif_detected(motif, kept, triangle_any=True):
    """Detection rule: a triangle shows up as soon as one realizing path is
    kept (flippable to all-paths); a quadrilateral needs its defining pair."""
    flags = [bool(kept[t]) for t in motif.paths]
    if motif.kind == TRIANGLE and triangle_any:
        return any(flags)
    return all(flags)


def motif_similarity(motif, p_values):
    """Mean rescaled similarity of the constituent paths."""
    return float(np.mean([p_values[t] for t in motif.paths]))


def template_similarity_means(slots, p_values, m):
    """Mean p per template over the pool's full paths, plus the pool mean."""
    sums = {}
    for t in _full_paths(np.asarray(slots)):
        label = classify_path(slots[t], m)
        sums.setdefault(label, []).append(float(p_values[t]))
    means = {label: float(np.mean(vals)) for label, vals in sums.items()}
    pooled = [v for vals in sums.values() for v in vals]
    means["all_paths"] = float(np.mean(pooled)) if pooled else float("nan")
    return means


# -- aggregation across analyzed candidates ---------------------------------

class StatsAccumulator:
    """Counts formed/detected motifs and sums similarities, keyed by
    (tower, candidate group, motif type)."""

    def __init__(self, triangle_any=True):
        self.triangle_any = triangle_any
        self.cells = {}

    def add(self, tower, group, motifs, kept, p_values):
        for motif in motifs:
            cell = self.cells.setdefault(
                (tower, group, motif.type),
                {"formed": 0, "detected": 0, "p_sum": 0.0,
                 "p_detected_sum": 0.0})
            sim = motif_similarity(motif, p_values)
            cell["formed"] += 1
            cell["p_sum"] += sim
            if motif_detected(motif, kept, self.triangle_any):
                cell["detected"] += 1
                cell["p_detected_sum"] += sim

    def add_pool_baseline(self, tower, group, full_paths, kept, p_values):
        cell = self.cells.setdefault(
            (tower, group, "all_paths"),
            {"formed": 0, "detected": 0, "p_sum": 0.0, "p_detected_sum": 0.0})
        for t in full_paths:
            cell["formed"] += 1
            cell["p_sum"] += float(p_values[t])
            if kept[t]:
                cell["detected"] += 1
                cell["p_detected_sum"] += float(p_values[t])

    def rows(self):
        """One row per populated cell; cells with zero formed motifs never
        materialize, so absent rates stay absent."""
        out = []
        for (tower, group, mtype), c in sorted(self.cells.items()):
            if c["formed"] == 0:
                continue
            out.append(StatsRow(tower, group, mtype, c["formed"],
                                c["detected"], c["detected"] / c["formed"],
                                c["p_sum"] / c["formed"]))
        return out


@dataclass
class StatsRow:
    tower: str
    group: str
    motif_type: str
    formed: int
    detected: int
    rate: float
    mean_p: float


def write_stats_tsv(fh, dataset, rows):
    fh.write("dataset\ttower\tgroup\tmotif_type\tformed\tdetected\trate"
             "\tmean_p\n")
    for r in rows:
        fh.write(f"{dataset}\t{r.tower}\t{r.group}\t{r.motif_type}\t"
                 f"{r.formed}\t{r.detected}\t{r.rate:.6f}\t{r.mean_p:.6f}\n")


# -- per-pair explanation records --------------------------------------------

@dataclass
class ExplanationRecord:
    user: int
    candidate: int
    tower: str
    group: str
    slots: np.ndarray
    kept: np.ndarray
    p: np.ndarray
    alpha: np.ndarray
    cos: np.ndarray
    motifs: list
    pool_mean_p: float


def explanation_json(record, graph, k, n_w, triangle_any=True):
    m = graph.m
    paths = []
    for t in range(len(record.slots)):
        if not record.kept[t]:
            continue
        slot_records = []
        for hop, node in enumerate(int(s) for s in record.slots[t]):
            if node == EMPTY:
                continue
            slot_records.append({
                "node": node_name(node, m, graph),
                "kind": node_kind(node, m),
                "sim": float(record.cos[t, hop]),
                "attn": float(record.alpha[t, hop]),
            })
        if slot_records:
            paths.append({"slots": slot_records,
                          "p": float(record.p[t]), "kept": True})
    motifs = [{
        "kind": mo.kind,
        "type": mo.type,
        "nodes": [node_name(x, m, graph) for x in mo.nodes],
        "detected": motif_detected(mo, record.kept, triangle_any),
    } for mo in record.motifs]
    return {
        "user": node_name(record.user, m, graph),
        "candidate": node_name(m + record.candidate, m, graph),
        "tower": record.tower,
        "k": k,
        "n_w": n_w,
        "pool_mean_p": record.pool_mean_p,
        "paths": paths,
        "motifs": motifs,
    }


def explanation_dot(record, graph):
    """Digraph of the kept paths; edge weight carries the target slot's
    similarity, node attribute carries the kind."""
    m = graph.m
    nodes = {record.user: "user"}
    edges = {}
    for t in range(len(record.slots)):
        if not record.kept[t]:
            continue
        prev = record.user
        for hop, node in enumerate(int(s) for s in record.slots[t]):
            if node == EMPTY:
                break
            nodes[node] = node_kind(node, m)
            edges[(prev, node)] = float(record.cos[t, hop])
            prev = node
    lines = ["digraph explanation {"]
    for node in sorted(nodes):
        lines.append(f'  "{node_name(node, m, graph)}" '
                     f'[kind="{nodes[node]}"];')
    for (a, b), w in sorted(edges.items()):
        lines.append(f'  "{node_name(a, m, graph)}" -> '
                     f'"{node_name(b, m, graph)}" [weight={w:.6f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


# -- the analysis driver ------------------------------------------------------

def analyze(model, split, seed=0, max_pairs=None, negatives_per_pair=1,
            triangle_any=True, rank_filter=5):
    """Explanation records and motif statistics over test pairs whose truth
    ranks within the top `rank_filter` positions.

    Per qualifying pair the truth joins the "pos" group and uniformly
    sampled non-interacted items join the "neg" group; every candidate is
    scored against the same walk pool with hard draws.
    """
    if not model.reaggregation:
        raise ValueError("analysis needs explained scores; the model was "
                         "built without re-aggregation")
    graph = model.graph
    enc = model.encode()
    full = items_by_user(split)
    acc = StatsAccumulator(triangle_any)
    records = []
    anchors = np.asarray(split.test)
    count = 0
    for u, t in anchors:
        u, t = int(u), int(t)
        if max_pairs is not None and count >= max_pairs:
            break
        rng = derive_rng(seed, STREAM_ANALYSIS, u, t)
        pool = model.pool_for_user(u, rng)
        cands = _test_candidates(graph.n, full[u], t)
        out = model.score_batch(enc, [u], cands[None], pool.slots[None],
                                mode="hard", rng=rng, want_details=True)
        scores = out.g[0].detach().numpy()
        if rank_of_truth(scores, cands, t) > rank_filter:
            continue
        count += 1
        motifs = find_motifs(pool.slots, u, graph)
        negs = [c for c in cands if c != t]
        chosen = rng.choice(len(negs), size=min(negatives_per_pair,
                                                len(negs)),
                            replace=False) if negs else []
        targets = [(t, "pos")] + [(int(negs[i]), "neg") for i in chosen]
        full_idx = _full_paths(pool.slots)
        for cand, group in targets:
            pos_c = int(np.searchsorted(cands, cand))
            for tower, p_key, d_key, a_key, c_key in (
                    ("interaction", "p_r", "draws_r", "alpha_r", "cos_r"),
                    ("social", "p_s", "draws_s", "alpha_s", "cos_s")):
                if out.details[p_key] is None:
                    continue
                p = out.details[p_key][0, pos_c].detach().numpy()
                kept = out.details[d_key][0, pos_c].detach().numpy()
                alpha = out.details[a_key][0, pos_c].detach().numpy()
                cos = out.details[c_key][0, pos_c].detach().numpy()
                mean_p = float(np.mean(p[full_idx])) if full_idx else 0.0
                rec = ExplanationRecord(u, cand, tower, group, pool.slots,
                                        kept, p, alpha, cos, motifs, mean_p)
                records.append(rec)
                acc.add(tower, group, motifs, kept, p)
                acc.add_pool_baseline(tower, group, full_idx, kept, p)
    return records, acc.rows()
