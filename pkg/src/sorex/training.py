"""Multi-task objective, exact gradients, and the optimization loop.

The only trainable parameters are the two embedding tables. The main task
is pairwise ranking over the three score channels (interaction, social,
fused); the auxiliary task is friend ranking on the social-tower states.
Gradients flow through propagation, path similarity, the relaxed draws,
attention, and re-aggregation by reverse-mode differentiation.
"""

import struct
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from .egopath import EgoPathConfig
from .evaluation import evaluate
from .graphs import sample_negatives, training_graph
from .model import SorexModel, init_model
from .seeding import (
    STREAM_RELAX, STREAM_SHUFFLE, STREAM_SOCIAL_NEG, STREAM_TRAIN_NEG,
    STREAM_WALKS, derive_rng, stable_digest,
)
from .towers import TowerConfig

CHECKPOINT_MAGIC = b"SRXC"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DigestMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    d: int = 64
    k1: int = 2
    k2: int = 1
    k: int = 2
    n_w: int = 100
    tau_start: float = 1.0
    tau_end: float = 0.3
    tau_epochs: int = 50
    gamma: float = 0.5
    lam: float = 0.001
    lr: float = 0.001
    batch_size: int = 1024
    train_negatives: int = 10
    epochs: int = 500
    patience: int = 10
    valid_negatives: int = 1000
    eval_k: int = 10
    seed: int = 0
    init_scale: float = 0.1
    no_aux_loss: bool = False
    no_reaggregation: bool = False
    no_social_influence: bool = False
    no_social_tower: bool = False
    topk_paths: int = 0
    no_trans_item_emb: bool = False

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lam must be nonnegative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.train_negatives < 1 or self.batch_size < 1:
            raise ValueError("batch_size and train_negatives must be >= 1")

    def tower_config(self) -> TowerConfig:
        return TowerConfig(d=self.d, k1=self.k1, k2=self.k2,
                           use_social_influence=not self.no_social_influence,
                           use_social_tower=not self.no_social_tower,
                           use_trans_item_emb=not self.no_trans_item_emb)

    def ego_config(self) -> EgoPathConfig:
        return EgoPathConfig(k=self.k, n_w=self.n_w, tau_start=self.tau_start,
                             tau_end=self.tau_end, topk=self.topk_paths)

    def tau_at(self, epoch: int) -> float:
        """Linear anneal over the first tau_epochs epochs, then flat."""
        if self.tau_epochs <= 0:
            return self.tau_end
        frac = min(1.0, epoch / self.tau_epochs)
        return self.tau_start + (self.tau_end - self.tau_start) * frac


def model_digest(cfg: TrainConfig, graph, split) -> str:
    """Digest over everything that shapes the trained parameters: the
    hyperparameters, the ablation switches, the data shape, and the split."""
    parts = [f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg)]
    parts.append(f"shape={graph.m},{graph.n},"
                 f"{graph.num_interactions},{graph.num_social_directed}")
    parts.append(f"split={split.seed},{split.ratios},"
                 f"{len(split.train)},{len(split.valid)},{len(split.test)}")
    return stable_digest(";".join(parts))


@dataclass
class LossBreakdown:
    main_r: torch.Tensor
    main_s: torch.Tensor
    main_fused: torch.Tensor
    aux: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor

    def floats(self):
        return {k: float(getattr(self, k).detach())
                for k in ("main_r", "main_s", "main_fused", "aux", "reg",
                          "total")}


def bpr_term(pos, neg):
    """Sum-form BPR: -log sigmoid(margin) over every (positive, negative)
    column pair. pos (B,), neg (B, N)."""
    return -F.logsigmoid(pos.unsqueeze(-1) - neg).sum()


def main_loss(model, enc, users, pos_items, neg_items, slots, mode, rng, tau):
    """Three-channel ranking loss for one batch.

    users (B,), pos_items (B,), neg_items (B, N), slots (B, n_w, k). The
    positive and its negatives share the user's walk pool, scored in one
    batched pass.
    """
    items = np.concatenate([pos_items[:, None], neg_items], axis=1)
    out = model.score_batch(enc, users, items, slots, mode=mode, rng=rng,
                            tau=tau)
    for name, chan in (("g_r", out.g_r), ("g_s", out.g_s), ("g", out.g)):
        if not torch.isfinite(chan).all():
            raise TrainingDiverged(f"non-finite {name} score in batch "
                                   f"(users {np.asarray(users)[:4]}...)")
    main_r = bpr_term(out.g_r[:, 0], out.g_r[:, 1:])
    main_s = bpr_term(out.g_s[:, 0], out.g_s[:, 1:])
    main_fused = bpr_term(out.g[:, 0], out.g[:, 1:])
    return main_r, main_s, main_fused


def friend_score(h_s, users, others):
    """Dot product of social-tower user states (not re-aggregated)."""
    return (h_s[np.asarray(users)] * h_s[np.asarray(others)]).sum(-1)


def social_loss(h_s, anchors, positives, negatives):
    """Friend-ranking BPR over (u, friend, non-friend) triples."""
    if len(anchors) == 0:
        return h_s.new_zeros(())
    f_pos = friend_score(h_s, anchors, positives)
    f_neg = friend_score(h_s, anchors, negatives)
    return -F.logsigmoid(f_pos - f_neg).sum()


def total_loss(main_r, main_s, main_fused, aux, e_r, e_s, gamma, lam):
    reg = lam * (e_r.square().sum() + e_s.square().sum())
    total = main_r + main_s + main_fused + gamma * aux + reg
    return LossBreakdown(main_r, main_s, main_fused, aux, reg, total)


def gradients(loss, params):
    """Exact reverse-mode derivatives of the scalar loss for each table."""
    return list(torch.autograd.grad(loss, params))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(m=[torch.zeros_like(p) for p in params],
                   v=[torch.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, lr: float):
    """First/second-moment update with bias correction, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if not torch.isfinite(g).all():
                raise TrainingDiverged("non-finite gradient")
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return params


# -- checkpoint io ----------------------------------------------------------

def _write_f32(fh, tensor):
    fh.write(np.ascontiguousarray(
        tensor.detach().numpy().astype("<f4")).tobytes())


def _read_f32(fh, shape):
    count = int(np.prod(shape))
    arr = np.frombuffer(fh.read(count * 4), dtype="<f4", count=count)
    return torch.from_numpy(arr.reshape(shape).astype(np.float32))


def save_checkpoint(path, digest, m, n, e_r, e_s, adam: AdamState):
    if e_r.shape != (m + n, e_r.shape[1]):
        raise ValueError("embedding table shape disagrees with m and n")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(digest.encode("ascii"))
        fh.write(struct.pack("<III", m, n, e_r.shape[1]))
        _write_f32(fh, e_r)
        _write_f32(fh, e_s)
        fh.write(struct.pack("<I", adam.step))
        for group in (adam.m, adam.v):
            for t in group:
                _write_f32(fh, t)


def load_checkpoint(path, expect_digest=None):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        digest = fh.read(64).decode("ascii")
        if expect_digest is not None and digest != expect_digest:
            raise DigestMismatch(
                f"{path}: checkpoint digest {digest[:12]}... does not match "
                f"the active config {expect_digest[:12]}...")
        m, n, d = struct.unpack("<III", fh.read(12))
        rows = m + n
        e_r = _read_f32(fh, (rows, d))
        e_s = _read_f32(fh, (rows, d))
        (step,) = struct.unpack("<I", fh.read(4))
        moments = [_read_f32(fh, (rows, d)) for _ in range(4)]
        adam = AdamState(m=moments[:2], v=moments[2:], step=step)
    return digest, m, n, e_r, e_s, adam


# -- the loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    model: SorexModel
    digest: str
    best_epoch: int
    best_ndcg: float
    best_hr: float
    history: list = field(default_factory=list)
    checkpoint_path: str = None


def _epoch_batches(edges, batch_size, rng):
    perm = rng.permutation(len(edges))
    for lo in range(0, len(edges), batch_size):
        yield edges[perm[lo:lo + batch_size]]


def _social_edges(graph):
    """All directed social edges (u, q) as an array, empty-safe."""
    rows = []
    for u in range(graph.m):
        for q in graph.social[graph.social_indptr[u]:graph.social_indptr[u + 1]]:
            rows.append((u, int(q)))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def _social_negatives(graph, anchors, rng):
    """One uniform non-neighbor per anchor (rejection over the user set)."""
    out = np.empty(len(anchors), dtype=np.int64)
    for i, u in enumerate(anchors):
        friends = graph.social_set(int(u))
        while True:
            cand = int(rng.integers(graph.m))
            if cand != u and cand not in friends:
                out[i] = cand
                break
    return out


def _batch_pools(model, users, gens, seed, epoch):
    """Fresh walks for each batch; a user's per-epoch stream continues when
    the user reappears, so pools differ between that user's batches."""
    unique = {}
    for u in users:
        u = int(u)
        if u not in unique:
            gen = gens.get(u)
            if gen is None:
                gen = gens[u] = derive_rng(seed, STREAM_WALKS, epoch, u)
            unique[u] = model.pool_for_user(u, gen).slots
    return np.stack([unique[int(u)] for u in users])


def train(graph, split, cfg: TrainConfig, out=None, log=None,
          eval_fn=None) -> TrainResult:
    """Optimize the embedding tables with early stopping on validation
    NDCG@K. `graph` is the full preprocessed graph; only training edges are
    propagated or walked. The best checkpoint lands at `<out>/model.srxc`
    when an output directory is given; epoch lines go to `log` (stdout by
    default).
    """
    log = log if log is not None else sys.stdout
    tg = training_graph(graph, split)
    model = init_model(tg, cfg.tower_config(), cfg.ego_config(), cfg.seed,
                       scale=cfg.init_scale,
                       reaggregation=not cfg.no_reaggregation)
    digest = model_digest(cfg, graph, split)
    adam = AdamState.for_params(model.parameters())
    edges = np.asarray(split.train).reshape(-1, 2)
    if len(edges) == 0:
        raise ValueError("training split is empty")
    social = _social_edges(tg)
    use_aux = cfg.gamma > 0 and not cfg.no_aux_loss and len(social) > 0
    mode = "topk" if cfg.topk_paths > 0 else "relaxed"

    best = {"ndcg": -1.0, "hr": 0.0, "epoch": -1, "e_r": None, "e_s": None,
            "adam": None}
    history = []
    bad_epochs = 0
    ckpt_path = f"{out}/model.srxc" if out is not None else None

    def snapshot():
        best.update(e_r=model.e_r.detach().clone(),
                    e_s=model.e_s.detach().clone(),
                    adam=AdamState(m=[t.clone() for t in adam.m],
                                   v=[t.clone() for t in adam.v],
                                   step=adam.step))

    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        tau = cfg.tau_at(epoch)
        rng_shuffle = derive_rng(cfg.seed, STREAM_SHUFFLE, epoch)
        rng_neg = derive_rng(cfg.seed, STREAM_TRAIN_NEG, epoch)
        rng_soc = derive_rng(cfg.seed, STREAM_SOCIAL_NEG, epoch)
        walk_gens = {}
        n_steps = (len(edges) + cfg.batch_size - 1) // cfg.batch_size
        soc_perm = rng_shuffle.permutation(len(social)) if use_aux else None
        soc_chunk = (len(social) + n_steps - 1) // n_steps if use_aux else 0
        sums = {"total": 0.0, "main": 0.0, "aux": 0.0}

        for step, batch in enumerate(_epoch_batches(edges, cfg.batch_size,
                                                    rng_shuffle)):
            users = batch[:, 0]
            pos = batch[:, 1]
            neg = np.stack([
                sample_negatives(split, tg, (u, v), cfg.train_negatives,
                                 rng_neg).negatives
                for u, v in batch])
            slots = _batch_pools(model, users, walk_gens, cfg.seed, epoch)
            rng_relax = derive_rng(cfg.seed, STREAM_RELAX, epoch, step)
            try:
                enc = model.encode()
                main_r, main_s, main_fused = main_loss(
                    model, enc, users, pos, neg, slots, mode, rng_relax, tau)
                if use_aux:
                    chunk = social[soc_perm[step * soc_chunk:
                                            (step + 1) * soc_chunk]]
                    aux = social_loss(
                        enc.h_s, chunk[:, 0], chunk[:, 1],
                        _social_negatives(tg, chunk[:, 0], rng_soc))
                else:
                    aux = model.e_s.new_zeros(())
                breakdown = total_loss(main_r, main_s, main_fused, aux,
                                       model.e_r, model.e_s, cfg.gamma,
                                       cfg.lam)
                if not torch.isfinite(breakdown.total):
                    raise TrainingDiverged("loss is non-finite")
                grads = gradients(breakdown.total, model.parameters())
                adam_step(adam, model.parameters(), grads, cfg.lr)
            except TrainingDiverged as exc:
                if best["e_r"] is not None and ckpt_path:
                    _restore(model, adam, best)
                    save_checkpoint(ckpt_path, digest, tg.m, tg.n,
                                    model.e_r, model.e_s, adam)
                raise TrainingDiverged(
                    f"{exc} (epoch {epoch}, step {step}); last good "
                    f"checkpoint from epoch {best['epoch']}",
                    checkpoint=ckpt_path) from exc
            vals = breakdown.floats()
            sums["total"] += vals["total"]
            sums["main"] += vals["main_r"] + vals["main_s"] + \
                vals["main_fused"]
            sums["aux"] += vals["aux"]

        if eval_fn is not None:
            report = eval_fn(model, epoch)
        else:
            report = evaluate(model, split, "validation", passes=1,
                              K=cfg.eval_k, seed=cfg.seed,
                              valid_negatives=cfg.valid_negatives)
        secs = time.monotonic() - t0
        history.append((epoch, sums["total"], sums["main"], sums["aux"],
                        report.hr, report.ndcg, secs))
        print(f"{epoch}\t{sums['total']:.6f}\t{sums['main']:.6f}\t"
              f"{sums['aux']:.6f}\t{report.hr:.6f}\t{report.ndcg:.6f}\t"
              f"{secs:.2f}", file=log, flush=True)

        if report.ndcg > best["ndcg"]:
            best.update(ndcg=report.ndcg, hr=report.hr, epoch=epoch)
            snapshot()
            bad_epochs = 0
            if ckpt_path:
                save_checkpoint(ckpt_path, digest, tg.m, tg.n, model.e_r,
                                model.e_s, adam)
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    _restore(model, adam, best)
    return TrainResult(model, digest, best["epoch"], best["ndcg"], best["hr"],
                       history, ckpt_path)


def _restore(model, adam, best):
    if best["e_r"] is None:
        return
    with torch.no_grad():
        model.e_r.copy_(best["e_r"])
        model.e_s.copy_(best["e_s"])
    adam.m = [t.clone() for t in best["adam"].m]
    adam.v = [t.clone() for t in best["adam"].v]
    adam.step = best["adam"].step


def load_model(graph, split, cfg: TrainConfig, path):
    """Rebuild a scoring model from a checkpoint, enforcing the digest."""
    digest = model_digest(cfg, graph, split)
    _, m, n, e_r, e_s, adam = load_checkpoint(path, expect_digest=digest)
    if (m, n) != (graph.m, graph.n):
        raise ValueError(f"{path}: checkpoint is for a {m}x{n} graph, "
                         f"got {graph.m}x{graph.n}")
    tg = training_graph(graph, split)
    model = SorexModel(tg, cfg.tower_config(), cfg.ego_config(),
                       e_r.requires_grad_(False), e_s.requires_grad_(False),
                       reaggregation=not cfg.no_reaggregation)
    return model, adam
