"""Ego-path pools: random-walk sampling, similarities, subset draws.

A walk of length k on the joint graph becomes an ego-path by dropping the
source and every repeated node, then right-padding with EMPTY to exactly k
slots. Pools keep repetitions: how often a path is drawn is part of the
signal. Slot entries are joint node indices (users 0..m-1, items m..m+n-1);
EMPTY is -1.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .graphs import JointGraph

EMPTY = -1


class IsolatedSourceError(ValueError):
    """The source user has no joint-graph neighbors to walk to."""


class WalkExplosionError(RuntimeError):
    """Exhaustive enumeration would exceed the walk-count cap."""


@dataclass
class EgoPathConfig:
    k: int = 2
    n_w: int = 100
    tau_start: float = 1.0
    tau_end: float = 0.3
    hard_eval: bool = True
    topk: int = 0                 # 0 disables the top-K ablation
    kminus1_divisor: bool = False   # divide by k-1 instead of k
    renorm_empty: bool = False

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.n_w < 1:
            raise ValueError("n_w must be >= 1")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class EgoPath:
    source: int
    slots: tuple


@dataclass
class WalkPool:
    source: int
    k: int
    slots: np.ndarray            # (n_w, k) joint indices, EMPTY-padded
    seed: object = None

    def __len__(self):
        return len(self.slots)

    def paths(self):
        return [EgoPath(self.source, tuple(row)) for row in self.slots.tolist()]


def to_ego_path(walk, k) -> tuple:
    """Source- and repeat-trimmed, EMPTY-padded slot tuple of one raw walk."""
    source = walk[0]
    kept = []
    for node in walk[1:k + 1]:
        if node != source and node not in kept:
            kept.append(node)
    return tuple(kept) + (EMPTY,) * (k - len(kept))


def sample_walks(graph: JointGraph, source: int, k: int, n_w: int,
                 rng: np.random.Generator) -> WalkPool:
    """n_w uniform random walks of up to k steps from a user, as ego-paths.

    Each step picks uniformly among the current node's joint-graph
    neighbors. A degree-0 dead end stops the walk early (cannot happen on
    symmetric graphs). All n_w walks advance in lockstep so the whole pool
    is a handful of vectorized draws.
    """
    indptr, indices = graph.joint_indptr, graph.joint_indices
    deg_all = np.diff(indptr)
    if deg_all[source] == 0:
        raise IsolatedSourceError(f"user {source} has no joint neighbors")
    pos = np.full(n_w, source, dtype=np.int64)
    alive = np.ones(n_w, dtype=bool)
    slots = np.full((n_w, k), EMPTY, dtype=np.int64)
    filled = np.zeros(n_w, dtype=np.int64)
    for _ in range(k):
        deg = deg_all[pos]
        alive = alive & (deg > 0)
        pick = rng.integers(0, np.maximum(deg, 1))
        nxt = indices[indptr[pos] + pick]
        moved = np.where(alive, nxt, pos)
        fresh = alive & (moved != source) & ~(slots == moved[:, None]).any(axis=1)
        rows = np.flatnonzero(fresh)
        slots[rows, filled[rows]] = moved[rows]
        filled[rows] += 1
        pos = moved
    return WalkPool(source, k, slots)


def empty_pool(source: int, k: int, n_w: int) -> WalkPool:
    """All-EMPTY pool used for users isolated in the training graph."""
    return WalkPool(source, k, np.full((n_w, k), EMPTY, dtype=np.int64))


def enumerate_ego_paths(graph: JointGraph, source: int, k: int,
                        max_walks: int = 200_000) -> dict:
    """Exact ego-path distribution {slots tuple: probability} by exhaustive
    depth-k walk enumeration with uniform step products."""
    indptr, indices = graph.joint_indptr, graph.joint_indices
    out = {}
    visited = [0]  # walk counter, boxed for the closure

    def pad(kept):
        return tuple(kept) + (EMPTY,) * (k - len(kept))

    def step(node, depth, prob, kept):
        if depth == k:
            visited[0] += 1
            if visited[0] > max_walks:
                raise WalkExplosionError(
                    f"more than {max_walks} walks from user {source}")
            out[pad(kept)] = out.get(pad(kept), 0.0) + prob
            return
        nbrs = indices[indptr[node]:indptr[node + 1]]
        if len(nbrs) == 0:
            visited[0] += 1
            out[pad(kept)] = out.get(pad(kept), 0.0) + prob
            return
        p = prob / len(nbrs)
        for nb in nbrs:
            nb = int(nb)
            if nb != source and nb not in kept:
                step(nb, depth + 1, p, kept + [nb])
            else:
                step(nb, depth + 1, p, kept)

    if np.diff(indptr)[source] == 0:
        raise IsolatedSourceError(f"user {source} has no joint neighbors")
    step(source, 0, 1.0, [])
    return out


# -- similarities ------------------------------------------------------------

def gather_slot_states(slots, user_states, item_states, m):
    """(n_w, k, d) tensor of per-slot states; EMPTY slots are zero rows.

    Node states come from ``user_states`` for joint indices < m and from
    ``item_states`` (index shifted by m) otherwise.
    """
    table = torch.cat([user_states, item_states,
                       torch.zeros(1, user_states.shape[1],
                                   dtype=user_states.dtype)], dim=0)
    idx = torch.from_numpy(slots.astype(np.int64))
    safe = torch.where(idx == EMPTY, torch.full_like(idx, len(table) - 1), idx)
    return table[safe]


def slot_cosines(slot_states, cand_states, valid):
    """Cosine of every slot state against every candidate state.

    slot_states: (n_w, k, d); cand_states: (C, d); valid: (n_w, k) bool.
    Returns (C, n_w, k) with invalid (EMPTY) entries exactly zero. Cosine
    against a zero vector is zero.
    """
    eps = 1e-12
    s_norm = slot_states.norm(dim=-1).clamp_min(eps)
    c_norm = cand_states.norm(dim=-1).clamp_min(eps)
    dots = torch.einsum("tkd,cd->ctk", slot_states, cand_states)
    cos = dots / (s_norm.unsqueeze(0) * c_norm[:, None, None])
    return cos * torch.as_tensor(valid, dtype=cos.dtype).unsqueeze(0)


def path_similarity(cosines, k, kminus1_divisor=False):
    """p* per (candidate, path): slot cosines summed over the k slots and
    divided by k (EMPTY slots contribute 0). The kminus1_divisor flag divides
    by k-1 instead, which can leave [-1, 1]."""
    divisor = (k - 1) if kminus1_divisor else k
    return cosines.sum(dim=-1) / divisor


def rescale(p_star, kminus1_divisor=False):
    """Affine map p = (p* + 1) / 2 onto sampling probabilities in [0, 1]."""
    if not kminus1_divisor and p_star.numel():
        detached = p_star.detach()
        # Non-finite values pass through here; the scoring layer reports
        # them as divergence with better context than a divisor assert.
        if torch.isfinite(detached).all():
            lo, hi = float(detached.min()), float(detached.max())
            assert -1.0 - 1e-4 <= lo and hi <= 1.0 + 1e-4, \
                f"p* out of [-1,1] ({lo:.6f}..{hi:.6f}): similarity divisor bug"
    return ((p_star + 1.0) / 2.0).clamp(0.0, 1.0)


# -- subset sampling -----------------------------------------------------------

@dataclass
class SampledExplanation:
    tower: str
    candidate: int
    probs: object                  # tensor, per-path p
    draws: object                  # tensor, hard 0/1 or relaxed weight
    kept: list = field(default_factory=list)


def hard_draws(probs, rng):
    u = torch.from_numpy(rng.random(tuple(probs.shape))).to(probs.dtype)
    return (u < probs).to(probs.dtype)


def concrete_logits(probs, tau, rng):
    """Pre-sigmoid logits of the binary concrete relaxation.

    Exposed separately because the attention coupling needs a stable
    log of the draw: log sigmoid(z) = -softplus(-z) never underflows to
    -inf the way log(sigmoid(z)) does.

    Probabilities are clamped into the open interval before the logit:
    p can saturate to exactly 0 or 1 once embeddings align, and at 32-bit
    an additive epsilon under the float resolution leaves log1p(-1) with
    an infinite backward even though the forward stays finite.
    """
    eps = 1e-6 if probs.dtype == torch.float32 else 1e-12
    p = probs.clamp(eps, 1.0 - eps)
    u = torch.from_numpy(rng.random(tuple(probs.shape))).to(probs.dtype)
    u = u.clamp(eps, 1.0 - eps)
    logit_p = torch.log(p) - torch.log1p(-p)
    logit_u = torch.log(u) - torch.log1p(-u)
    return (logit_p + logit_u) / tau


def relaxed_draws(probs, tau, rng):
    """Binary concrete relaxation: differentiable in probs, in (0,1)."""
    return torch.sigmoid(concrete_logits(probs, tau, rng))


def topk_draws(probs, k_keep):
    """Deterministic: keep the k_keep highest-p paths (ties to lower index)."""
    n = probs.shape[-1]
    k_keep = min(k_keep, n)
    order = np.argsort(-probs.detach().numpy(), axis=-1, kind="stable")
    draws = torch.zeros_like(probs)
    idx = torch.from_numpy(order[..., :k_keep].copy())
    draws.scatter_(-1, idx, 1.0)
    return draws


def sample_subset(pool: WalkPool, probs, mode: str, rng=None, tau=1.0,
                  k_keep=0, tower="interaction", candidate=-1):
    """Draw one explanation subset over the pool under the given mode."""
    probs = torch.as_tensor(probs)
    if probs.shape[-1] != len(pool):
        raise ValueError("probs length must match pool size")
    if mode == "hard":
        draws = hard_draws(probs, rng)
    elif mode == "relaxed":
        draws = relaxed_draws(probs, tau, rng)
    elif mode == "topk":
        draws = topk_draws(probs, k_keep)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    kept = torch.nonzero(draws >= 0.5).flatten().tolist() if mode != "relaxed" \
        else torch.nonzero(draws > 0).flatten().tolist()
    return SampledExplanation(tower, candidate, probs, draws, kept)


# -- debugging -------------------------------------------------------------------

def format_slot(node, m):
    if node == EMPTY:
        return "_"
    return f"u{node}" if node < m else f"v{node - m}"


def dump_pool(pool: WalkPool, m: int, fh):
    """One line per path: ``source<TAB>slot0,slot1,...`` with `_` for EMPTY."""
    for row in pool.slots:
        slots = ",".join(format_slot(int(x), m) for x in row)
        fh.write(f"u{pool.source}\t{slots}\n")
