"""Candidate-aware attention over sampled ego-paths and re-aggregation.

Attention is parameter-free: raw attention of a path node against a
candidate is their cosine divided by sqrt(d), normalized by softmax within
each hop across every kept-path slot occurrence (duplicate occurrences of
a node stay separate entries). The normalized weights then pull the ID
embeddings (not the GNN states) of the path nodes into the user
representation:

    h_hat = (h + sum_hops sum_slots alpha * e_slot) / (k + 1)

Subset draws couple in as additive log-weights inside the softmax: a hard
0 excludes the path exactly (log 0 = -inf), a relaxed weight in (0,1)
shifts its logits continuously, keeping everything differentiable.

Shapes are dimension-agnostic over leading axes. The canonical layout is
raw attention (..., C, n_w, k) over candidates, paths, hops, with the
validity mask (..., n_w, k) and per-path draws (..., C, n_w).
"""

import math

import torch


def node_attention(cosines, d):
    """Raw attention a = cos / sqrt(d); shape-preserving."""
    return cosines / math.sqrt(d)


def hopwise_normalize(raw, valid, draws=None, log_draws=None):
    """Hop-wise masked softmax over path occurrences.

    raw: (..., C, n_w, k) raw attentions; valid: (..., n_w, k) bool mask of
    non-EMPTY slots; draws: optional (..., C, n_w) per-path weights folded
    in as log-terms (pass log_draws instead when a numerically stable log
    is available, e.g. -softplus(-z) for relaxed draws). Each nonempty
    hop's entries sum to 1 over the path axis; empty hops (or hops whose
    paths all have zero draws) come out exactly zero.
    """
    logits = raw
    if log_draws is not None:
        logits = logits + log_draws.unsqueeze(-1)
    elif draws is not None:
        logits = logits + torch.log(draws).unsqueeze(-1)
    mask = torch.as_tensor(valid, dtype=torch.bool)
    logits = logits.masked_fill(~mask.unsqueeze(-3), float("-inf"))
    mx = logits.max(dim=-2, keepdim=True).values
    mx = torch.where(torch.isinf(mx), torch.zeros_like(mx), mx)
    ex = torch.exp(logits - mx)
    denom = ex.sum(dim=-2, keepdim=True)
    return ex / denom.clamp_min(torch.finfo(ex.dtype).tiny)


def reaggregate(h, alpha, slot_embeds, k, renorm_empty=False):
    """Explanation-enhanced user embeddings.

    h: (..., d) user state broadcastable against (..., C, d); alpha:
    (..., C, n_w, k); slot_embeds: (..., n_w, k, d) ID embeddings with zero
    rows at EMPTY slots. The divisor is the literal k+1 regardless of empty
    hops unless renorm_empty is set, in which case it counts only the user
    plus nonempty hops.
    """
    add = torch.einsum("...ctk,...tkd->...cd", alpha, slot_embeds)
    if renorm_empty:
        nonempty = (alpha.sum(dim=-2) > 0).sum(dim=-1, keepdim=True)
        divisor = (1.0 + nonempty).to(add.dtype)
    else:
        divisor = float(k + 1)
    return (h + add) / divisor


def explained_score(h_hat_r, cand_r, h_hat_s=None, cand_e_s=None):
    """Redefined tower scores from re-aggregated user embeddings.

    g_r uses the interaction-tower candidate state c^r_j; g_s uses the
    candidate's ID embedding e^s_j. Pass h_hat_s=None with the social tower
    ablated; g is then just g_r.
    """
    g_r = (h_hat_r * cand_r).sum(-1)
    if h_hat_s is None:
        return g_r, torch.zeros_like(g_r), g_r
    g_s = (h_hat_s * cand_e_s).sum(-1)
    return g_r, g_s, g_r + g_s
