"""Ranking protocol, metrics, and explanation fidelity.

Test mode ranks every item the user has never interacted with (plus the
held-out truth); validation mode ranks the truth against a fixed set of
sampled negatives. All randomness is keyed off the run seed so repeated
invocations reproduce the same numbers bit for bit.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch

from .seeding import STREAM_EVAL, STREAM_VALID_NEG, derive_rng

_MODE_CODES = {"validation": 0, "test": 1}
_FIDELITY_RANDOM = 3


class EmptyEvaluationError(ValueError):
    pass


class NonFiniteScoreError(RuntimeError):
    pass


@dataclass
class RankingResult:
    user: int
    candidates: np.ndarray
    scores: np.ndarray
    rank_of_truth: int


@dataclass
class MetricReport:
    hr: float
    ndcg: float
    mrr: float
    K: int
    pairs: int
    passes: int


@dataclass
class FidelityReport:
    delta_pct: float
    random_delta_pct: float
    pairs_used: int
    skipped: int
    passes: int
    K: int


def _anchors(split, mode):
    if mode not in _MODE_CODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    part = split.valid if mode == "validation" else split.test
    if len(part) == 0:
        raise EmptyEvaluationError(f"{mode} split holds no interactions")
    return part


def items_by_user(split):
    """Every item each user touched in any split part (exclusion sets for
    candidate construction; the model itself never sees held-out edges)."""
    full = {}
    for part in (split.train, split.valid, split.test):
        for u, v in np.asarray(part).reshape(-1, 2):
            full.setdefault(int(u), set()).add(int(v))
    return full


def _validation_candidates(n_items, interacted, user, truth, seed,
                           valid_negatives):
    mask = np.ones(n_items, dtype=bool)
    for v in interacted:
        mask[v] = False
    mask[truth] = False
    pool = np.flatnonzero(mask)
    rng = derive_rng(seed, STREAM_VALID_NEG, user, truth)
    count = min(valid_negatives, len(pool))
    if count:
        negatives = rng.choice(pool, size=count, replace=False)
    else:
        negatives = np.zeros(0, dtype=np.int64)
    return np.sort(np.append(negatives, truth)).astype(np.int64)


def _test_candidates(n_items, interacted, truth):
    mask = np.ones(n_items, dtype=bool)
    for v in interacted:
        mask[v] = False
    mask[truth] = True
    return np.flatnonzero(mask).astype(np.int64)


def rank_of_truth(scores, candidates, truth):
    """1-based rank under descending score, ties broken by ascending index."""
    pos = int(np.searchsorted(candidates, truth))
    s_t = scores[pos]
    better = int((scores > s_t).sum())
    tied_ahead = int(((scores == s_t) & (candidates < truth)).sum())
    return 1 + better + tied_ahead


def _eval_mode(model):
    if model.ego.topk > 0:
        return "topk"
    return "hard" if model.ego.hard_eval else "relaxed"


def rank_items(model, enc, user, candidates, truth, pool, rng,
               want_details=False):
    """Score every candidate against one shared walk pool and rank the truth."""
    out = model.score_batch(enc, [user], candidates[None, :],
                            pool.slots[None], mode=_eval_mode(model), rng=rng,
                            tau=model.ego.tau_end, want_details=want_details)
    scores = out.g[0].detach().numpy()
    if not np.isfinite(scores).all():
        bad = candidates[~np.isfinite(scores)]
        raise NonFiniteScoreError(
            f"non-finite score for user {user}, items {bad[:5].tolist()}")
    rank = rank_of_truth(scores, candidates, truth)
    result = RankingResult(user, candidates, scores, rank)
    return (result, out) if want_details else result


def hit_at_k(rank, K):
    return 1.0 if rank <= K else 0.0


def ndcg_at_k(rank, K):
    return 1.0 / np.log2(rank + 1.0) if rank <= K else 0.0


def metrics(ranks, K, passes=1):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise EmptyEvaluationError("no ranking results to aggregate")
    hr = float(np.mean(ranks <= K))
    ndcg = float(np.mean(np.where(ranks <= K, 1.0 / np.log2(ranks + 1.0), 0.0)))
    mrr = float(np.mean(1.0 / ranks))
    return MetricReport(hr, ndcg, mrr, K, int(ranks.size), passes)


def evaluate(model, split, mode="test", passes=5, K=10, seed=0,
             valid_negatives=1000, enc=None):
    """Mean HR@K / NDCG@K / MRR over held-out pairs, averaged over passes.

    Each (user, pass) gets one walk pool shared across that user's
    candidates; validation negatives are keyed per (user, truth) so every
    epoch of early stopping scores the same candidate sets.
    """
    anchors = np.asarray(_anchors(split, mode))
    if enc is None:
        enc = model.encode()
    full = items_by_user(split)
    code = _MODE_CODES[mode]
    n = model.graph.n
    ranks = []
    for pass_i in range(passes):
        for u, t in anchors:
            u, t = int(u), int(t)
            if mode == "validation":
                cands = _validation_candidates(n, full[u], u, t, seed,
                                               valid_negatives)
            else:
                cands = _test_candidates(n, full[u], t)
            rng = derive_rng(seed, STREAM_EVAL, code, pass_i, u)
            pool = model.pool_for_user(u, rng)
            ranks.append(rank_items(model, enc, u, cands, t, pool,
                                    rng).rank_of_truth)
    return metrics(ranks, K, passes)


def _rerank_with(scores, candidates, truth, new_truth_score):
    pos = int(np.searchsorted(candidates, truth))
    others = np.delete(scores, pos)
    other_idx = np.delete(candidates, pos)
    better = int((others > new_truth_score).sum())
    tied = int(((others == new_truth_score) & (other_idx < truth)).sum())
    return 1 + better + tied


def _removal_drop(model, enc, user, truth, pool, result, keep_r, keep_s, K):
    """Relative NDCG drop after re-aggregating the complement of the given
    kept subsets for the truth item only (other candidates keep their
    original scores)."""
    comp_r = (1.0 - keep_r).reshape(1, 1, -1)
    comp_s = (1.0 - keep_s).reshape(1, 1, -1)
    out = model.score_batch(
        enc, [user], np.array([[truth]]), pool.slots[None],
        draws_override=(torch.as_tensor(comp_r, dtype=enc.h_r.dtype),
                        torch.as_tensor(comp_s, dtype=enc.h_r.dtype)))
    new_score = float(out.g[0, 0].detach())
    new_rank = _rerank_with(result.scores, result.candidates, truth, new_score)
    base = ndcg_at_k(result.rank_of_truth, K)
    return (base - ndcg_at_k(new_rank, K)) / base * 100.0


def fidelity(model, split, passes=5, K=10, seed=0, top5_filter=False,
             enc=None):
    """Signed mean NDCG@K drop (percent) from removing each pair's sampled
    explanation, next to a size-matched random-removal baseline.

    Pairs whose base NDCG@K is zero are skipped (the relative drop is
    undefined there); the count is reported. With ``top5_filter`` only pairs
    whose truth ranks within the top 5 enter the average.
    """
    anchors = np.asarray(_anchors(split, "test"))
    if enc is None:
        enc = model.encode()
    full = items_by_user(split)
    n = model.graph.n
    drops, rand_drops, skipped = [], [], 0
    for pass_i in range(passes):
        for u, t in anchors:
            u, t = int(u), int(t)
            cands = _test_candidates(n, full[u], t)
            rng = derive_rng(seed, STREAM_EVAL, _MODE_CODES["test"], pass_i, u)
            pool = model.pool_for_user(u, rng)
            result, out = rank_items(model, enc, u, cands, t, pool, rng,
                                     want_details=True)
            if ndcg_at_k(result.rank_of_truth, K) == 0.0 or \
                    (top5_filter and result.rank_of_truth > 5):
                skipped += 1
                continue
            pos = int(np.searchsorted(cands, t))
            keep_r = out.details["draws_r"][0, pos].detach().numpy()
            draws_s = out.details["draws_s"]
            keep_s = draws_s[0, pos].detach().numpy() if draws_s is not None \
                else np.zeros_like(keep_r)
            drops.append(_removal_drop(model, enc, u, t, pool, result,
                                       keep_r, keep_s, K))
            rng_rand = derive_rng(seed, STREAM_EVAL, _FIDELITY_RANDOM,
                                  pass_i, u, t)
            rand_r = _random_subset_like(keep_r, rng_rand)
            rand_s = _random_subset_like(keep_s, rng_rand)
            rand_drops.append(_removal_drop(model, enc, u, t, pool, result,
                                            rand_r, rand_s, K))
    if not drops:
        raise EmptyEvaluationError("every pair was skipped; nothing to report")
    return FidelityReport(float(np.mean(drops)), float(np.mean(rand_drops)),
                          len(drops), skipped, passes, K)


def _random_subset_like(keep, rng):
    """0/1 vector marking a uniform subset with the same cardinality."""
    size = int(round(float(keep.sum())))
    out = np.zeros_like(keep)
    if size:
        out[rng.choice(len(keep), size=min(size, len(keep)), replace=False)] = 1.0
    return out


def metrics_json(report, dataset, mode, fidelity_pct=None, skipped_pairs=None):
    return {
        "dataset": dataset,
        "mode": mode,
        "K": report.K,
        "passes": report.passes,
        "hr": report.hr,
        "ndcg": report.ndcg,
        "mrr": report.mrr,
        "fidelity_pct": fidelity_pct,
        "skipped_pairs": skipped_pairs,
    }


def write_metrics(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
