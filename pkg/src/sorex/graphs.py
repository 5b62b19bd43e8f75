"""Interaction/social graph loading, filtering, splitting and negative sampling.

The data model is a joint graph over users and items:

* interaction edges connect users to items (bipartite, undirected),
* social edges connect users to users (symmetric, no self-loops),
* joint indexing puts users at 0..m-1 and items at m..m+n-1.

Everything here is plain numpy (CSR arrays); the graph is immutable once
built and safe to share across threads.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .seeding import STREAM_SPLIT, derive_rng

GRAPH_MAGIC = b"SRXG"
GRAPH_VERSION = 1

# Header tokens seen in the public edge-list datasets; a first line made of
# these (or with a non-numeric rating column) is skipped.
_HEADER_TOKENS = {
    "user", "item", "rating", "weight", "userid", "itemid", "artistid",
    "friendid", "user_id", "item_id", "friend_id", "timestamp",
}


class Kind(Enum):
    USER = 0
    ITEM = 1


class Relation(Enum):
    INTERACTION = 0
    SOCIAL = 1
    JOINT = 2


@dataclass(frozen=True)
class NodeRef:
    kind: Kind
    index: int

    def joint(self, m: int) -> int:
        return self.index if self.kind is Kind.USER else m + self.index


def user(i: int) -> NodeRef:
    return NodeRef(Kind.USER, i)


def item(j: int) -> NodeRef:
    return NodeRef(Kind.ITEM, j)


class ParseError(ValueError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptyGraphError(ValueError):
    """Degree filtering removed every interaction edge."""


@dataclass
class RawDataset:
    """Edge lists straight from disk, ids densely mapped but unfiltered."""

    user_labels: list
    item_labels: list
    interactions: np.ndarray        # (E, 2) user, item indices
    ratings: np.ndarray | None      # (E,) or None when no rating column
    social: np.ndarray              # (Es, 2) user, user indices (as read)
    social_only_users: set          # users appearing only in the social file


def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        first = True
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            if first:
                first = False
                fields = line.split("\t")
                lowered = [f.strip().lower() for f in fields]
                looks_named = any(f in _HEADER_TOKENS for f in lowered)
                bad_rating = len(fields) >= 3 and not _is_number(fields[2])
                if looks_named or bad_rating:
                    continue
            yield line_no, line


def _is_number(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def load_dataset(interaction_path, social_path, rating_threshold=None) -> RawDataset:
    """Read tab-separated edge lists and densely index their ids.

    Interaction lines are ``user<TAB>item[<TAB>rating]``; social lines are
    ``user<TAB>user``. Ids may be arbitrary strings. ``#`` lines and a
    one-line header are ignored. When a rating column is present and
    ``rating_threshold`` is set, interactions with rating below the
    threshold are dropped. Users appearing only in the social file are
    still registered and flagged in ``social_only_users``.
    """
    user_index, item_index = {}, {}
    user_labels, item_labels = [], []

    def uid(label):
        idx = user_index.get(label)
        if idx is None:
            idx = len(user_labels)
            user_index[label] = idx
            user_labels.append(label)
        return idx

    def iid(label):
        idx = item_index.get(label)
        if idx is None:
            idx = len(item_labels)
            item_index[label] = idx
            item_labels.append(label)
        return idx

    inter, ratings = [], []
    saw_rating = False
    for line_no, line in _data_lines(interaction_path):
        fields = line.split("\t")
        if len(fields) < 2:
            raise ParseError(interaction_path, line_no, "expected user<TAB>item")
        rating = None
        if len(fields) >= 3 and fields[2].strip() != "":
            if not _is_number(fields[2]):
                raise ParseError(interaction_path, line_no, f"bad rating {fields[2]!r}")
            rating = float(fields[2])
            saw_rating = True
        if rating_threshold is not None and rating is not None and rating < rating_threshold:
            continue
        inter.append((uid(fields[0].strip()), iid(fields[1].strip())))
        ratings.append(rating if rating is not None else np.nan)

    interacting_users = {u for u, _ in inter}
    social = []
    social_only = set()
    for line_no, line in _data_lines(social_path):
        fields = line.split("\t")
        if len(fields) < 2:
            raise ParseError(social_path, line_no, "expected user<TAB>user")
        a, b = uid(fields[0].strip()), uid(fields[1].strip())
        for x in (a, b):
            if x not in interacting_users:
                social_only.add(x)
        social.append((a, b))

    inter_arr = np.asarray(inter, dtype=np.int64).reshape(-1, 2)
    social_arr = np.asarray(social, dtype=np.int64).reshape(-1, 2)
    rating_arr = np.asarray(ratings, dtype=np.float64) if saw_rating else None
    return RawDataset(user_labels, item_labels, inter_arr, rating_arr,
                      social_arr, social_only)


def _csr_from_pairs(rows, cols, n_rows):
    """Sorted, deduplicated CSR (indptr, indices) from row/col index arrays."""
    if len(rows) == 0:
        return np.zeros(n_rows + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    keep = np.ones(len(rows), dtype=bool)
    keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    rows, cols = rows[keep], cols[keep]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, cols.astype(np.int64)


@dataclass
class JointGraph:
    """Immutable indexed view of the interaction and social graphs."""

    m: int
    n: int
    user_items_indptr: np.ndarray
    user_items: np.ndarray          # item indices, sorted per user
    item_users_indptr: np.ndarray
    item_users: np.ndarray          # user indices, sorted per item
    social_indptr: np.ndarray
    social: np.ndarray              # user indices, sorted per user
    user_labels: list = field(default_factory=list)
    item_labels: list = field(default_factory=list)
    joint_indptr: np.ndarray = None
    joint_indices: np.ndarray = None

    def __post_init__(self):
        if self.joint_indptr is None:
            self._build_joint()

    def _build_joint(self):
        # Joint neighbor lists in joint indexing: for a user, social
        # neighbors (< m) come before interacted items (>= m), both sorted;
        # for an item, its users. Sorted ascending overall by construction.
        m, n = self.m, self.n
        indptr = np.zeros(m + n + 1, dtype=np.int64)
        u_soc = np.diff(self.social_indptr)
        u_int = np.diff(self.user_items_indptr)
        indptr[1:m + 1] = u_soc + u_int
        indptr[m + 1:] = np.diff(self.item_users_indptr)
        np.cumsum(indptr, out=indptr)
        indices = np.empty(indptr[-1], dtype=np.int64)
        for u in range(m):
            s0, s1 = self.social_indptr[u], self.social_indptr[u + 1]
            r0, r1 = self.user_items_indptr[u], self.user_items_indptr[u + 1]
            base = indptr[u]
            indices[base:base + (s1 - s0)] = self.social[s0:s1]
            indices[base + (s1 - s0):indptr[u + 1]] = self.user_items[r0:r1] + m
        for j in range(n):
            base, end = indptr[m + j], indptr[m + j + 1]
            indices[base:end] = self.item_users[self.item_users_indptr[j]:self.item_users_indptr[j + 1]]
        self.joint_indptr = indptr
        self.joint_indices = indices

    # -- accessor helpers ------------------------------------------------

    @property
    def num_interactions(self) -> int:
        return int(self.user_items_indptr[-1])

    @property
    def num_social_directed(self) -> int:
        return int(self.social_indptr[-1])

    def interaction_edges(self) -> np.ndarray:
        """(E, 2) array of (user, item) pairs, ordered by user then item."""
        users = np.repeat(np.arange(self.m), np.diff(self.user_items_indptr))
        return np.stack([users, self.user_items], axis=1)

    def user_item_set(self, u: int) -> np.ndarray:
        return self.user_items[self.user_items_indptr[u]:self.user_items_indptr[u + 1]]

    def social_set(self, u: int) -> np.ndarray:
        return self.social[self.social_indptr[u]:self.social_indptr[u + 1]]

    def joint_set(self, node: int) -> np.ndarray:
        return self.joint_indices[self.joint_indptr[node]:self.joint_indptr[node + 1]]

    def joint_degrees(self) -> np.ndarray:
        return np.diff(self.joint_indptr)


def build_joint_graph(m, n, interactions, social_pairs, user_labels=None,
                      item_labels=None) -> JointGraph:
    """Assemble a JointGraph from (user, item) and undirected (user, user) pairs.

    Social pairs are symmetrized and deduplicated; self-loops dropped.
    """
    interactions = np.asarray(interactions, dtype=np.int64).reshape(-1, 2)
    social_pairs = np.asarray(social_pairs, dtype=np.int64).reshape(-1, 2)
    if len(social_pairs):
        social_pairs = social_pairs[social_pairs[:, 0] != social_pairs[:, 1]]
        both = np.concatenate([social_pairs, social_pairs[:, ::-1]], axis=0)
    else:
        both = social_pairs
    ui_indptr, ui = _csr_from_pairs(interactions[:, 0], interactions[:, 1], m)
    iu_indptr, iu = _csr_from_pairs(interactions[:, 1], interactions[:, 0], n)
    s_indptr, s = _csr_from_pairs(both[:, 0], both[:, 1], m) if len(both) else \
        (np.zeros(m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return JointGraph(m, n, ui_indptr, ui, iu_indptr, iu, s_indptr, s,
                      user_labels or [], item_labels or [])


def preprocess(raw: RawDataset, min_interactions: int = 2) -> JointGraph:
    """Filter to the min-interaction fixed point and build the graph.

    Users and items whose interaction degree is below ``min_interactions``
    are removed, repeatedly, until no removal changes any degree (dropping
    an item can push a user below the threshold and vice versa). Social
    edges whose endpoints were removed are dropped, and surviving nodes are
    reindexed densely.
    """
    if min_interactions < 0:
        raise ValueError("min_interactions must be >= 0")
    edges = np.unique(raw.interactions, axis=0) if len(raw.interactions) else raw.interactions
    m0 = len(raw.user_labels)
    n0 = len(raw.item_labels)

    user_alive = np.zeros(m0, dtype=bool)
    item_alive = np.zeros(n0, dtype=bool)
    if len(edges):
        user_alive[edges[:, 0]] = True
        item_alive[edges[:, 1]] = True
    if min_interactions == 0:
        # No-op threshold: keep every node that appears anywhere.
        user_alive[:] = True
        item_alive[:] = True
    else:
        while True:
            mask = user_alive[edges[:, 0]] & item_alive[edges[:, 1]]
            edges = edges[mask]
            u_deg = np.bincount(edges[:, 0], minlength=m0)
            i_deg = np.bincount(edges[:, 1], minlength=n0)
            new_user_alive = u_deg >= min_interactions
            new_item_alive = i_deg >= min_interactions
            if np.array_equal(new_user_alive, user_alive) and \
               np.array_equal(new_item_alive, item_alive):
                break
            user_alive, item_alive = new_user_alive, new_item_alive
        if not edges.size or not user_alive.any() or not item_alive.any():
            raise EmptyGraphError(
                f"no interactions survive min_interactions={min_interactions}")
        mask = user_alive[edges[:, 0]] & item_alive[edges[:, 1]]
        edges = edges[mask]

    user_map = np.full(m0, -1, dtype=np.int64)
    item_map = np.full(n0, -1, dtype=np.int64)
    user_map[user_alive] = np.arange(int(user_alive.sum()))
    item_map[item_alive] = np.arange(int(item_alive.sum()))
    m = int(user_alive.sum())
    n = int(item_alive.sum())

    new_edges = np.stack([user_map[edges[:, 0]], item_map[edges[:, 1]]], axis=1)
    social = raw.social
    if len(social):
        keep = user_alive[social[:, 0]] & user_alive[social[:, 1]]
        social = np.stack([user_map[social[keep, 0]], user_map[social[keep, 1]]], axis=1)
    user_labels = [raw.user_labels[i] for i in np.flatnonzero(user_alive)]
    item_labels = [raw.item_labels[i] for i in np.flatnonzero(item_alive)]
    return build_joint_graph(m, n, new_edges, social, user_labels, item_labels)


def neighbors(graph: JointGraph, node: NodeRef, relation: Relation):
    """Sorted neighbor list of ``node`` under the requested relation.

    Joint neighbors of a user are its social neighbors plus interacted
    items; items have no social edges, so their joint set equals their
    interaction set. Returned as NodeRefs sorted users-then-items.
    """
    if node.kind is Kind.USER:
        if node.index >= graph.m:
            raise IndexError(f"user {node.index} out of range")
        if relation is Relation.INTERACTION:
            return [item(j) for j in graph.user_item_set(node.index)]
        if relation is Relation.SOCIAL:
            return [user(i) for i in graph.social_set(node.index)]
        joint = graph.joint_set(node.index)
        return [user(i) if i < graph.m else item(i - graph.m) for i in joint]
    if node.index >= graph.n:
        raise IndexError(f"item {node.index} out of range")
    if relation is Relation.SOCIAL:
        return []
    return [user(i) for i in graph.item_users[
        graph.item_users_indptr[node.index]:graph.item_users_indptr[node.index + 1]]]


@dataclass
class DatasetSplit:
    """Random partition of the interaction edges; social edges are never split."""

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple

    _train_by_user: dict = field(default=None, repr=False, compare=False)

    def train_items_of(self, u: int) -> np.ndarray:
        if self._train_by_user is None:
            by_user = {}
            order = np.argsort(self.train[:, 0], kind="stable")
            tr = self.train[order]
            bounds = np.searchsorted(tr[:, 0], np.arange(0, tr[:, 0].max() + 2 if len(tr) else 1))
            for u_ in range(len(bounds) - 1):
                by_user[u_] = np.sort(tr[bounds[u_]:bounds[u_ + 1], 1])
            self._train_by_user = by_user
        got = self._train_by_user.get(u)
        return got if got is not None else np.zeros(0, dtype=np.int64)


def split(graph: JointGraph, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Seeded uniform partition of interaction edges into train/valid/test.

    Sizes follow the ratios with largest-remainder rounding so they always
    sum to the edge count (10 edges at 0.8/0.1/0.1 give exactly 8/1/1).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negatives summing to 1, got {ratios}")
    edges = graph.interaction_edges()
    rng = derive_rng(seed, STREAM_SPLIT)
    perm = rng.permutation(len(edges))
    edges = edges[perm]
    want = np.array([r * len(edges) for r in ratios])
    counts = np.floor(want).astype(int)
    remainder = len(edges) - counts.sum()
    order = np.argsort(-(want - counts), kind="stable")
    for i in range(remainder):
        counts[order[i]] += 1
    a, b = counts[0], counts[0] + counts[1]
    return DatasetSplit(edges[:a], edges[a:b], edges[b:], int(seed), ratios)


def training_graph(graph: JointGraph, ds: DatasetSplit) -> JointGraph:
    """Structure graph for model training: train interactions + all social edges."""
    social_pairs = np.stack([
        np.repeat(np.arange(graph.m), np.diff(graph.social_indptr)),
        graph.social,
    ], axis=1)
    return build_joint_graph(graph.m, graph.n, ds.train, social_pairs,
                             graph.user_labels, graph.item_labels)


@dataclass
class NegativeBatch:
    anchor: tuple
    negatives: np.ndarray


def sample_negatives(ds: DatasetSplit, graph: JointGraph, anchor, count: int,
                     rng: np.random.Generator) -> NegativeBatch:
    """Uniform negatives for one (user, positive item) anchor.

    Rejection is against the user's training interactions. Draws are
    distinct whenever the non-interacted pool is at least ``count``;
    otherwise sampling falls back to with-replacement over the pool.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    u = int(anchor[0])
    train_items = ds.train_items_of(u)
    pool_size = graph.n - len(train_items)
    if pool_size <= 0:
        raise ValueError(f"user {u} interacted with every item in training")
    mask = np.ones(graph.n, dtype=bool)
    mask[train_items] = False
    pool = np.flatnonzero(mask)
    if pool_size >= count:
        negatives = rng.choice(pool, size=count, replace=False)
    else:
        negatives = rng.choice(pool, size=count, replace=True)
    return NegativeBatch((u, int(anchor[1])), negatives.astype(np.int64))


# -- binary cache ---------------------------------------------------------

def _write_u32s(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())


def _read_u32s(buf, off, count):
    arr = np.frombuffer(buf, dtype="<u4", count=count, offset=off)
    return arr.astype(np.int64), off + 4 * count


def _write_labels(fh, labels):
    fh.write(struct.pack("<I", len(labels)))
    for lab in labels:
        data = str(lab).encode("utf-8")
        fh.write(struct.pack("<I", len(data)))
        fh.write(data)


def _read_labels(buf, off):
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    labels = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        labels.append(buf[off:off + ln].decode("utf-8"))
        off += ln
    return labels, off


def save_graph_cache(path, graph: JointGraph, ds: DatasetSplit):
    """Write the preprocessed graph and split as a little-endian binary cache."""
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<I", GRAPH_VERSION))
        fh.write(struct.pack("<II", graph.m, graph.n))
        for indptr, indices in ((graph.user_items_indptr, graph.user_items),
                                (graph.social_indptr, graph.social)):
            fh.write(struct.pack("<I", len(indices)))
            _write_u32s(fh, indptr)
            _write_u32s(fh, indices)
        fh.write(struct.pack("<q", ds.seed))
        fh.write(struct.pack("<ddd", *ds.ratios))
        for part in (ds.train, ds.valid, ds.test):
            fh.write(struct.pack("<I", len(part)))
            _write_u32s(fh, part.reshape(-1))
        _write_labels(fh, graph.user_labels)
        _write_labels(fh, graph.item_labels)


def load_graph_cache(path):
    """Load a cache written by save_graph_cache; returns (graph, split)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != GRAPH_MAGIC:
        raise ValueError(f"{path}: not a graph cache (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != GRAPH_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    m, n = struct.unpack_from("<II", buf, 8)
    off = 16
    csrs = []
    for rows in (m, m):
        (nnz,) = struct.unpack_from("<I", buf, off)
        off += 4
        indptr, off = _read_u32s(buf, off, rows + 1)
        indices, off = _read_u32s(buf, off, nnz)
        csrs.append((indptr, indices))
    (seed,) = struct.unpack_from("<q", buf, off)
    off += 8
    ratios = struct.unpack_from("<ddd", buf, off)
    off += 24
    parts = []
    for _ in range(3):
        (cnt,) = struct.unpack_from("<I", buf, off)
        off += 4
        flat, off = _read_u32s(buf, off, cnt * 2)
        parts.append(flat.reshape(-1, 2))
    user_labels, off = _read_labels(buf, off)
    item_labels, off = _read_labels(buf, off)

    (ui_indptr, ui), (s_indptr, s) = csrs
    users = np.repeat(np.arange(m), np.diff(ui_indptr))
    inter = np.stack([users, ui], axis=1)
    soc_users = np.repeat(np.arange(m), np.diff(s_indptr))
    social_pairs = np.stack([soc_users, s], axis=1)
    graph = build_joint_graph(m, n, inter, social_pairs, user_labels, item_labels)
    ds = DatasetSplit(parts[0], parts[1], parts[2], int(seed), tuple(ratios))
    return graph, ds
