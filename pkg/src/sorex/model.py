"""The assembled recommender: two towers plus ego-path explanation scoring.

SorexModel owns the two embedding tables and the frozen graph operators
(normalized adjacencies, influence weights, item pooling matrix), and turns
(user, candidates, walk pool) triples into explained scores. All scoring is
vectorized over a batch of users and their candidate lists at once; the
same code path serves training (relaxed draws, gradients flowing back to
the tables) and evaluation (hard draws, no gradients).
"""

from dataclasses import dataclass

import numpy as np
import torch

from .egopath import (
    EMPTY, EgoPathConfig, IsolatedSourceError, concrete_logits, empty_pool,
    hard_draws, rescale, sample_walks, topk_draws,
)
from .graphs import JointGraph
from .reaggregate import hopwise_normalize, node_attention, reaggregate
from .towers import (
    TowerConfig, interaction_adjacency, item_pool_matrix, item_social_reprs,
    jaccard_influence, propagate_interaction, propagate_social,
    social_aggregation,
)


@dataclass
class EncodedState:
    h_r: torch.Tensor      # (m, d) interaction-tower user states
    c_r: torch.Tensor      # (n, d) interaction-tower item states
    h_s: torch.Tensor      # (m, d) social-tower user states
    item_soc: torch.Tensor # (n, d) social-tower item states (h-tilde)


@dataclass
class ScoreBatch:
    g_r: torch.Tensor      # (B, C)
    g_s: torch.Tensor
    g: torch.Tensor
    details: dict = None


class SorexModel:
    def __init__(self, graph: JointGraph, tower_cfg: TowerConfig,
                 ego_cfg: EgoPathConfig, e_r, e_s, reaggregation=True):
        self.graph = graph
        self.cfg = tower_cfg
        self.ego = ego_cfg
        self.e_r = e_r
        self.e_s = e_s
        self.reaggregation = reaggregation
        self._build_operators()

    def _build_operators(self):
        dtype = self.e_r.dtype
        g = self.graph
        self.adj_r = interaction_adjacency(g, dtype)
        self.influence = jaccard_influence(g) if self.cfg.use_social_influence \
            else None
        self.agg_s = social_aggregation(g, self.influence, dtype)
        self.item_pool = item_pool_matrix(g, dtype)

    def parameters(self):
        return [self.e_r, self.e_s]

    def to_double(self):
        """64-bit copy of the model (used by gradient checks)."""
        e_r = self.e_r.detach().double().requires_grad_(self.e_r.requires_grad)
        e_s = self.e_s.detach().double().requires_grad_(self.e_s.requires_grad)
        return SorexModel(self.graph, self.cfg, self.ego, e_r, e_s,
                          self.reaggregation)

    # -- forward ----------------------------------------------------------

    def encode(self) -> EncodedState:
        g = self.graph
        h_r, c_r = propagate_interaction(self.e_r, g, self.cfg.k1, self.adj_r)
        h_s = propagate_social(self.e_s, g, self.influence, self.cfg.k2,
                               self.agg_s)
        item_soc = item_social_reprs(h_s, self.e_s, g,
                                     self.cfg.use_trans_item_emb,
                                     self.item_pool)
        return EncodedState(h_r, c_r, h_s, item_soc)

    def pool_for_user(self, user: int, rng) -> "WalkPool":
        """Walk pool for one user; users isolated in the training graph get
        an all-EMPTY pool (their score reduces to h/(k+1) dot candidate)."""
        try:
            return sample_walks(self.graph, user, self.ego.k, self.ego.n_w, rng)
        except IsolatedSourceError:
            return empty_pool(user, self.ego.k, self.ego.n_w)

    def _draws(self, probs, mode, rng, tau):
        """Returns (draws, log_draws); log_draws is stable for the softmax
        coupling (-inf only for an exact hard/topk zero)."""
        if mode == "hard":
            draws = hard_draws(probs, rng)
        elif mode == "relaxed":
            z = concrete_logits(probs, tau, rng)
            draws = torch.sigmoid(z)
            return draws, -torch.nn.functional.softplus(-z)
        elif mode == "topk":
            draws = topk_draws(probs, self.ego.topk)
        else:
            raise ValueError(f"unknown draw mode {mode!r}")
        log_draws = torch.where(draws > 0, torch.zeros_like(draws),
                                torch.full_like(draws, float("-inf")))
        return draws, log_draws

    def _tower_pass(self, slots_t, valid, user_states, item_states, id_table,
                    cand_sim, h_user, mode, rng, tau, draws_override):
        """One tower's path similarities, draws, attention, re-aggregation.

        Returns (h_hat, probs, draws, alpha, cos).
        """
        m, n = self.graph.m, self.graph.n
        d = self.cfg.d
        zero = torch.zeros(1, user_states.shape[1], dtype=user_states.dtype)
        table = torch.cat([user_states, item_states, zero], dim=0)
        ids = torch.cat([id_table, zero], dim=0)
        safe = torch.where(slots_t == EMPTY,
                           torch.full_like(slots_t, m + n), slots_t)
        ss = table[safe]             # (B, n_w, k, d)
        es = ids[safe]               # (B, n_w, k, d) ID embeddings
        eps = torch.finfo(ss.dtype).tiny
        s_norm = ss.norm(dim=-1).clamp_min(eps)          # (B, n_w, k)
        c_norm = cand_sim.norm(dim=-1).clamp_min(eps)    # (B, C)
        dots = torch.einsum("btkd,bcd->bctk", ss, cand_sim)
        cos = dots / (s_norm.unsqueeze(1) * c_norm[:, :, None, None])
        cos = cos * valid.unsqueeze(1).to(cos.dtype)
        divisor = (self.ego.k - 1) if self.ego.kminus1_divisor else self.ego.k
        p_star = cos.sum(dim=-1) / divisor               # (B, C, n_w)
        probs = rescale(p_star, self.ego.kminus1_divisor)
        if draws_override is not None:
            draws = torch.as_tensor(draws_override, dtype=probs.dtype)
            log_draws = torch.log(draws.clamp_min(torch.finfo(probs.dtype).tiny))
            log_draws = torch.where(draws > 0, log_draws,
                                    torch.full_like(draws, float("-inf")))
        else:
            draws, log_draws = self._draws(probs, mode, rng, tau)
        alpha = hopwise_normalize(node_attention(cos, d), valid,
                                  log_draws=log_draws)
        h_hat = reaggregate(h_user, alpha, es, self.ego.k,
                            self.ego.renorm_empty)
        return h_hat, probs, draws, alpha, cos

    def base_scores(self, enc: EncodedState, users, items):
        users = torch.as_tensor(np.asarray(users), dtype=torch.long)
        items_t = torch.as_tensor(np.asarray(items), dtype=torch.long)
        g_r = (enc.h_r[users].unsqueeze(1) * enc.c_r[items_t]).sum(-1)
        if self.cfg.use_social_tower:
            e_item = self.e_s[self.graph.m + items_t]
            g_s = (enc.h_s[users].unsqueeze(1) * e_item).sum(-1)
        else:
            g_s = torch.zeros_like(g_r)
        return ScoreBatch(g_r, g_s, g_r + g_s)

    def score_batch(self, enc: EncodedState, users, items, slots,
                    mode="hard", rng=None, tau=1.0, draws_override=None,
                    want_details=False) -> ScoreBatch:
        """Explained scores for B users against C candidates each.

        users: (B,) user indices; items: (B, C) item indices; slots:
        (B, n_w, k) pool slot matrix per user (joint indices, EMPTY-padded).
        draws_override: optional (draws_r, draws_s) tensors of shape
        (B, C, n_w) replacing the sampled subsets (fidelity uses this).
        """
        if not self.reaggregation:
            return self.base_scores(enc, users, items)
        users = torch.as_tensor(np.asarray(users), dtype=torch.long)
        items_t = torch.as_tensor(np.asarray(items), dtype=torch.long)
        slots_t = torch.as_tensor(np.asarray(slots), dtype=torch.long)
        valid = slots_t != EMPTY
        m = self.graph.m
        over_r, over_s = draws_override if draws_override is not None \
            else (None, None)

        cand_r = enc.c_r[items_t]                         # (B, C, d)
        h_hat_r, p_r, draws_r, alpha_r, cos_r = self._tower_pass(
            slots_t, valid, enc.h_r, enc.c_r, self.e_r, cand_r,
            enc.h_r[users].unsqueeze(-2), mode, rng, tau, over_r)
        g_r = (h_hat_r * cand_r).sum(-1)

        if self.cfg.use_social_tower:
            cand_s_sim = enc.item_soc[items_t]
            h_hat_s, p_s, draws_s, alpha_s, cos_s = self._tower_pass(
                slots_t, valid, enc.h_s, enc.item_soc, self.e_s, cand_s_sim,
                enc.h_s[users].unsqueeze(-2), mode, rng, tau, over_s)
            cand_s_score = self.e_s[m + items_t]
            g_s = (h_hat_s * cand_s_score).sum(-1)
            g = g_r + g_s
        else:
            p_s = draws_s = alpha_s = cos_s = None
            g_s = torch.zeros_like(g_r)
            g = g_r

        details = None
        if want_details:
            details = {
                "p_r": p_r, "p_s": p_s, "draws_r": draws_r, "draws_s": draws_s,
                "alpha_r": alpha_r, "alpha_s": alpha_s,
                "cos_r": cos_r, "cos_s": cos_s, "valid": valid,
            }
        return ScoreBatch(g_r, g_s, g, details)


def init_model(graph, tower_cfg, ego_cfg, seed, scale=0.1, reaggregation=True,
               requires_grad=True, dtype=torch.float32):
    from .towers import init_embeddings
    e_r, e_s = init_embeddings(graph.m, graph.n, tower_cfg.d, seed, scale)
    e_r = e_r.to(dtype).requires_grad_(requires_grad)
    e_s = e_s.to(dtype).requires_grad_(requires_grad)
    return SorexModel(graph, tower_cfg, ego_cfg, e_r, e_s, reaggregation)
