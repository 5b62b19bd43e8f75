"""Acceptance gate: one test per stated criterion, at stated tolerance.

Each test prints a single [PASS]/[FAIL]/[SKIP] line through the hook in
conftest.py. The LastFM criteria need the hetrec2011 files under
data/lastfm/ and SOREX_RUN_FULLSCALE=1; without them they skip with the
reason shown, never silently.
"""

import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

import helpers
from conftest import write_tsv
from sorex.analysis import QUADRILATERAL, TRIANGLE, find_motifs
from sorex.cli import main as cli_main
from sorex.egopath import EgoPathConfig, enumerate_ego_paths, sample_walks
from sorex.evaluation import evaluate, fidelity
from sorex.graphs import (build_joint_graph, load_dataset, preprocess, split,
                          training_graph)
from sorex.model import SorexModel, init_model
from sorex.seeding import derive_rng
from sorex.towers import (TowerConfig, init_embeddings, jaccard_influence,
                          propagate_interaction, propagate_social)
from sorex.training import (TrainConfig, gradients, main_loss, social_loss,
                            total_loss, train)

DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "lastfm"
LASTFM_INTERACTIONS = DATA_DIR / "user_artists.dat"
LASTFM_SOCIAL = DATA_DIR / "user_friends.dat"
HAVE_LASTFM = LASTFM_INTERACTIONS.exists() and LASTFM_SOCIAL.exists()
RUN_FULLSCALE = os.environ.get("SOREX_RUN_FULLSCALE") == "1"

lastfm_gate = pytest.mark.skipif(
    not (HAVE_LASTFM and RUN_FULLSCALE),
    reason="needs data/lastfm/user_artists.dat + user_friends.dat and "
           "SOREX_RUN_FULLSCALE=1")


def test_gradient_fidelity(toy_graph, toy_split):
    """Full multi-task loss gradients vs central finite differences,
    64-bit, fixed draw noise: relative error < 1e-4 in under a minute."""
    t0 = time.monotonic()
    tg = training_graph(toy_graph, toy_split)
    tc = TrainConfig(d=3, k=2, n_w=4, train_negatives=1, gamma=0.5,
                     lam=1e-3, batch_size=8, epochs=1)
    tower, ego = tc.tower_config(), tc.ego_config()
    users = np.array([0, 1, 2])
    pos = np.array([0, 1, 1])
    neg = np.array([[1], [0], [0]])
    probe = init_model(tg, tower, ego, seed=9, dtype=torch.float64)
    slots = np.stack([probe.pool_for_user(int(u),
                                          derive_rng(9, 4, 0, int(u))).slots
                      for u in users])
    soc = np.array([[0, 1], [1, 0], [1, 2], [2, 1]])
    soc_neg = np.array([2, 2, 0, 0])
    shape = probe.e_r.shape

    def loss_of(e_r, e_s):
        model = SorexModel(tg, tower, ego, e_r, e_s)
        enc = model.encode()
        r, s, f = main_loss(model, enc, users, pos, neg, slots,
                            "relaxed", derive_rng(9, 7, 0, 0), tau=0.7)
        aux = social_loss(enc.h_s, soc[:, 0], soc[:, 1], soc_neg)
        return total_loss(r, s, f, aux, e_r, e_s, tc.gamma, tc.lam).total

    e_r = probe.e_r.detach().clone().requires_grad_(True)
    e_s = probe.e_s.detach().clone().requires_grad_(True)
    auto = gradients(loss_of(e_r, e_s), [e_r, e_s])
    auto_flat = np.concatenate([g.numpy().ravel() for g in auto])

    def f(flat):
        flat = np.asarray(flat)
        half = shape[0] * shape[1]
        a = torch.from_numpy(flat[:half].reshape(shape).copy())
        b = torch.from_numpy(flat[half:].reshape(shape).copy())
        return float(loss_of(a, b).detach())

    x0 = np.concatenate([e_r.detach().numpy().ravel(),
                         e_s.detach().numpy().ravel()])
    fd = helpers.central_fd(f, x0, eps=1e-5)
    worst = helpers.rel_err(auto_flat, fd).max()
    elapsed = time.monotonic() - t0
    assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"


def test_propagation_oracle():
    """Both towers match dense matrix-form propagation on 20 random graphs
    of up to 50 nodes, max-abs error < 1e-6."""
    worst = 0.0
    for trial in range(20):
        rng = np.random.Generator(np.random.PCG64(4000 + trial))
        graph = helpers.random_joint_graph(rng, m_max=25, n_max=25)
        e_r, e_s = init_embeddings(graph.m, graph.n, 8, seed=trial)
        e_r, e_s = e_r.double(), e_s.double()
        k1 = int(rng.integers(1, 4))
        k2 = int(rng.integers(1, 4))
        h, c = propagate_interaction(e_r, graph, k1=k1)
        oh, oc = helpers.dense_interaction_tower(graph, e_r.numpy(), k1)
        worst = max(worst, np.abs(h.numpy() - oh).max(),
                    np.abs(c.numpy() - oc).max())
        for use_influence in (True, False):
            w = jaccard_influence(graph) if use_influence else None
            hs = propagate_social(e_s, graph, w, k2=k2)
            os_ = helpers.dense_social_tower(graph, e_s[:graph.m].numpy(),
                                             k2, use_influence)
            worst = max(worst, np.abs(hs.numpy() - os_).max())
    assert worst < 1e-6, f"worst propagation error {worst:.3e}"


def _tv_distance(graph, source, k, n_walks, seed):
    pool = sample_walks(graph, source, k, n_walks, derive_rng(seed, 4))
    counts = Counter(tuple(int(x) for x in row) for row in pool.slots)
    exact = enumerate_ego_paths(graph, source, k)
    support = set(exact) | set(counts)
    return 0.5 * sum(abs(counts.get(p, 0) / n_walks - exact.get(p, 0.0))
                     for p in support)


def test_walk_sampler_distribution(toy_graph):
    """Empirical ego-path distribution over 1e5 walks within TV < 0.02 of
    exhaustive enumeration, on the toy graph and 5 random graphs."""
    t0 = time.monotonic()
    n_walks = 100_000
    cases = [(toy_graph, 0, 2)]
    for trial in range(5):
        rng = np.random.Generator(np.random.PCG64(5000 + trial))
        graph = helpers.random_joint_graph(rng, m_max=10, n_max=10)
        degs = graph.joint_degrees()
        sources = [u for u in range(graph.m) if degs[u] > 0]
        cases.append((graph, sources[0], 2 + trial % 2))
    worst = 0.0
    for i, (graph, source, k) in enumerate(cases):
        tv = _tv_distance(graph, source, k, n_walks, seed=600 + i)
        worst = max(worst, tv)
        assert tv < 0.02, f"case {i}: TV {tv:.4f}"
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, f"took {elapsed:.1f}s"


def test_probability_validity():
    """Over at least 1e4 sampled path draws across random models: every
    p* in [-1,1], every p in [0,1], and hop-wise attention columns sum to
    one (or exactly zero for uncovered hops) within 1e-6."""
    draws_seen = 0
    round_i = 0
    while draws_seen < 10_000:
        rng = np.random.Generator(np.random.PCG64(9000 + round_i))
        graph = helpers.random_joint_graph(rng, m_max=8, n_max=8)
        degs = graph.joint_degrees()
        sources = [u for u in range(graph.m) if degs[u] > 0]
        round_i += 1
        if not sources:
            continue
        model = init_model(graph, TowerConfig(d=6),
                           EgoPathConfig(k=2, n_w=25), seed=round_i,
                           scale=float(rng.uniform(0.05, 1.0)))
        enc = model.encode()
        user = sources[int(rng.integers(len(sources)))]
        pool = model.pool_for_user(user, derive_rng(round_i, 4))
        c = min(graph.n, 5)
        items = rng.choice(graph.n, size=c, replace=False)[None]
        for mode_i, mode in enumerate(("hard", "relaxed")):
            out = model.score_batch(enc, [user], items, pool.slots[None],
                                    mode=mode, rng=derive_rng(round_i, 7,
                                                              mode_i),
                                    tau=0.7, want_details=True)
            for key in ("r", "s"):
                p = out.details[f"p_{key}"]
                if p is None:
                    continue
                p = p.detach().numpy()
                assert p.min() >= 0.0 and p.max() <= 1.0
                cos = out.details[f"cos_{key}"].detach().numpy()
                assert np.abs(cos).max() <= 1.0 + 1e-6
                p_star = cos.sum(axis=-1) / 2.0   # raw, before rescale
                assert p_star.min() >= -1.0 - 1e-6
                assert p_star.max() <= 1.0 + 1e-6
                draws = out.details[f"draws_{key}"].detach().numpy()
                if mode == "hard":
                    assert set(np.unique(draws)) <= {0.0, 1.0}
                else:
                    assert draws.min() >= 0.0 and draws.max() <= 1.0
                alpha = out.details[f"alpha_{key}"].detach().numpy()
                assert alpha.min() >= -1e-12
                sums = alpha.sum(axis=2)          # (1, C, k) per-hop totals
                off = np.minimum(np.abs(sums), np.abs(sums - 1.0))
                assert off.max() < 1e-6, f"attention sums off by {off.max()}"
                draws_seen += draws.size
    assert draws_seen >= 10_000


def test_motif_oracle():
    """Triangle and quadrilateral counts from exhaustive pools match
    brute-force node enumeration exactly on 10 random small graphs."""
    checked = 0
    for trial in range(10):
        rng = np.random.Generator(np.random.PCG64(7000 + trial))
        graph = helpers.random_joint_graph(rng, m_max=10, n_max=10)
        degs = graph.joint_degrees()
        for src in range(graph.m):
            if degs[src] == 0:
                continue
            dist = enumerate_ego_paths(graph, src, 2)
            pool = np.asarray(sorted(dist.keys()), dtype=np.int64)
            motifs = find_motifs(pool, src, graph)
            tri_sets = {frozenset(mo.nodes) for mo in motifs
                        if mo.kind == TRIANGLE}
            n_quads = sum(mo.kind == QUADRILATERAL for mo in motifs)
            assert tri_sets == helpers.brute_triangles(graph, src)
            assert n_quads == helpers.brute_quads(graph, src)
            checked += 1
    assert checked >= 10


# -- desk-scale training fixtures ---------------------------------------------

def community_graph(m=60, n=40, blocks=3, seed=77):
    """Synthetic dataset with block structure so a small model has real
    signal to learn: users mostly interact inside their block and befriend
    block neighbors."""
    rng = np.random.Generator(np.random.PCG64(seed))
    users_per = m // blocks
    items_per = n // blocks
    inter = set()
    for u in range(m):
        b = min(u // users_per, blocks - 1)
        lo = b * items_per
        hi = n if b == blocks - 1 else lo + items_per
        for v in rng.choice(np.arange(lo, hi), size=8, replace=False):
            inter.add((u, int(v)))
        for v in rng.choice(n, size=2, replace=False):
            inter.add((u, int(v)))
    social = set()
    for u in range(m):
        b = min(u // users_per, blocks - 1)
        lo = b * users_per
        hi = m if b == blocks - 1 else lo + users_per
        for q in rng.choice(np.arange(lo, hi), size=3, replace=False):
            if int(q) != u:
                social.add((min(u, int(q)), max(u, int(q))))
    return build_joint_graph(m, n, sorted(inter), sorted(social))


@pytest.fixture(scope="module")
def toy_trained(tmp_path_factory):
    graph = community_graph()
    ds = split(graph, ratios=(0.8, 0.1, 0.1), seed=1)
    tc = TrainConfig(d=16, k1=2, k2=1, k=2, n_w=30, tau_start=1.0,
                     tau_end=0.3, tau_epochs=20, gamma=0.5, lam=1e-3,
                     lr=0.01, batch_size=128, train_negatives=5, epochs=30,
                     patience=30, valid_negatives=39, eval_k=10, seed=1)
    out = tmp_path_factory.mktemp("toy_fidelity")
    with open(out / "train.log", "w") as log:
        result = train(graph, ds, tc, out=str(out), log=log)
    return graph, ds, result.model, tc


def _lastfm_graph():
    raw = load_dataset(LASTFM_INTERACTIONS, LASTFM_SOCIAL)
    graph = preprocess(raw, min_interactions=2)
    ds = split(graph, ratios=(0.8, 0.1, 0.1), seed=0)
    return graph, ds


@pytest.fixture(scope="module")
def lastfm_trained(tmp_path_factory):
    graph, ds = _lastfm_graph()
    tc = TrainConfig(seed=0)
    out = tmp_path_factory.mktemp("lastfm")
    with open(out / "train.log", "w") as log:
        result = train(graph, ds, tc, out=str(out), log=log)
    return graph, ds, result.model, tc


@pytest.mark.fullscale
@lastfm_gate
def test_lastfm_desk_scale_reproduction(lastfm_trained):
    """Full LastFM training reaches test HR@10 >= 0.180 and
    NDCG@10 >= 0.103 averaged over 5 evaluation passes."""
    graph, ds, model, tc = lastfm_trained
    assert (graph.m, graph.n) == (1880, 3933), \
        f"filtered shape {graph.m}x{graph.n} is off the published table"
    report = evaluate(model, ds, mode="test", passes=5, K=10, seed=tc.seed,
                      valid_negatives=tc.valid_negatives)
    assert report.hr >= 0.180, f"HR@10 {report.hr:.4f} < 0.180"
    assert report.ndcg >= 0.103, f"NDCG@10 {report.ndcg:.4f} < 0.103"


def test_fidelity_direction(request):
    """Removing the sampled explanation hurts the truth item's rank more
    than removing a size-matched random subset, over at least 100 trials."""
    if HAVE_LASTFM and RUN_FULLSCALE:
        graph, ds, model, tc = request.getfixturevalue("lastfm_trained")
        passes = 5
    else:
        graph, ds, model, tc = request.getfixturevalue("toy_trained")
        passes = 5
    fid = fidelity(model, ds, passes=passes, K=10, seed=tc.seed)
    assert fid.pairs_used >= 100, \
        f"only {fid.pairs_used} usable trials ({fid.skipped} skipped)"
    assert fid.delta_pct > fid.random_delta_pct, \
        (f"explanation removal {fid.delta_pct:+.3f}% does not exceed "
         f"random removal {fid.random_delta_pct:+.3f}%")


@pytest.mark.fullscale
@lastfm_gate
def test_ablation_sanity(tmp_path_factory):
    """Neither disabling the friend task (gamma=0) nor disabling
    re-aggregation beats the full model's validation NDCG@10 by more than
    one standard deviation over 3 seeds."""
    graph, ds = _lastfm_graph()
    scores = {"full": [], "gamma0": [], "no_reagg": []}
    for seed in range(3):
        for name, kw in (("full", {}), ("gamma0", {"gamma": 0.0}),
                         ("no_reagg", {"no_reaggregation": True})):
            tc = TrainConfig(seed=seed, **kw)
            out = tmp_path_factory.mktemp(f"ablate_{name}_{seed}")
            with open(out / "train.log", "w") as log:
                result = train(graph, ds, tc, out=str(out), log=log)
            report = evaluate(result.model, ds, mode="validation", passes=1,
                              K=10, seed=seed,
                              valid_negatives=tc.valid_negatives)
            scores[name].append(report.ndcg)
    full_mean = float(np.mean(scores["full"]))
    tolerance = float(np.std(scores["full"]))
    for name in ("gamma0", "no_reagg"):
        mean = float(np.mean(scores[name]))
        assert mean <= full_mean + tolerance, \
            (f"{name} NDCG@10 {mean:.4f} beats full {full_mean:.4f} "
             f"by more than seed noise {tolerance:.4f}")


def test_determinism(tmp_path):
    """Two single-threaded runs with identical seeds produce bit-identical
    checkpoints and metrics JSON."""
    rng = np.random.Generator(np.random.PCG64(31))
    inter = []
    for u in range(8):
        for v in rng.choice(6, size=3, replace=False):
            inter.append((f"u{u}", f"i{v}"))
    social = [(f"u{i}", f"u{i+1}") for i in range(7)]
    inter_path = write_tsv(tmp_path / "inter.tsv", inter)
    social_path = write_tsv(tmp_path / "social.tsv", social)
    flags = ["--seed", "0",
             "--set", f"data.interactions={inter_path}",
             "--set", f"data.social={social_path}",
             "--set", "split.train=0.6", "--set", "split.valid=0.2",
             "--set", "split.test=0.2", "--set", "model.d=8",
             "--set", "egopath.n_w=6", "--set", "train.batch_size=8",
             "--set", "train.train_negatives=2", "--set", "train.epochs=3",
             "--set", "eval.valid_negatives=20", "--set", "eval.passes=2"]
    before = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        blobs = {}
        for run in ("a", "b"):
            out = tmp_path / run
            assert cli_main(["prepare", "--out", str(out), *flags]) == 0
            assert cli_main(["train", "--out", str(out), *flags]) == 0
            assert cli_main(["evaluate", "--out", str(out), *flags]) == 0
            blobs[run] = ((out / "model.srxc").read_bytes(),
                          (out / "metrics_test.json").read_bytes())
    finally:
        torch.set_num_threads(before)
    assert blobs["a"][0] == blobs["b"][0], "checkpoints differ"
    assert blobs["a"][1] == blobs["b"][1], "metrics JSON differs"
