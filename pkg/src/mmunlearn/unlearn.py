"""Training, gold retraining, and unlearning loops with early stopping.

All modes share one step primitive that runs a single forward pass,
blends preserve-side and impair-side gradients at the state level
(mathematically identical to blending parameter buffers, by linearity of
the backward map), and applies an Adam update. Every stochastic choice
draws from a named stream of the run seed, so retain-side batch sampling
is unaffected by whether forget batches are drawn.

Stopping rule for every mode: Recall@20 on the validation set, halting
once `patience` epochs pass without improvement. Training and gold
retraining return the best-validation checkpoint; unlearning modes return
the final-epoch parameters (reverting to the best-validation snapshot
would undo the unlearning).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .graph import build_normalized_adjacency
from .losses import (NodeSample, TripleBatch, _bpr_state_grads,
                     _contrastive_state_grads, bpr_divergence, l2_penalty)
from .metrics import user_metrics
from .model import backprop_state, compute_state, init_params
from .seeding import stream_rng

MODES = ("train", "gold", "amun", "mmrecun")
STOP_K = 20  # validation Recall@K used as the stopping indicator


@dataclass
class TrainConfig:
    hyper: object
    seed: int
    mode: str = "train"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class RunResult:
    params: object
    epochs_run: int
    wall_time: float
    divergence_curve: list = field(default_factory=list)  # (epoch, beta)
    best_epoch: int = 0
    best_valid_recall: float = 0.0
    stop_reason: str = ""
    mode: str = ""


class Adam:
    """Standard Adam with bias correction over a ModelParams pytree."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(
                params.named_tensors(), grads.named_tensors(),
                self.m.named_tensors(), self.v.named_tensors()):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


class _Context:
    """Graph structures tied to a governing edge set."""

    def __init__(self, graph, edges, exclusion_edges=None):
        self.graph = graph
        self.edges = tuple(sorted(edges))
        self.adj = build_normalized_adjacency(graph.num_users, graph.num_items, self.edges)
        base = self.edges if exclusion_edges is None else exclusion_edges
        self.exclusions = [set() for _ in range(graph.num_users)]
        for u, i in base:
            self.exclusions[u].add(i)

    def state(self, params, layers):
        return compute_state(params, self.graph, self.adj, layers, edges=self.edges)


def sample_negatives(count, exclusions, num_items, rng):
    """Uniform sample without replacement from non-excluded items.

    Returns every candidate (ascending) when fewer than `count` remain.
    """
    if len(exclusions) >= num_items:
        raise DataError("no negative candidates: all items excluded")
    candidates = np.array([i for i in range(num_items) if i not in exclusions],
                          dtype=np.int64)
    if len(candidates) <= count:
        return candidates
    return np.sort(rng.choice(candidates, size=count, replace=False))


def make_triple_batches(positives, exclusions, num_items, batch_size, neg_per_pos, rng):
    """Shuffle positives and attach uniform negatives, chunked into batches."""
    n = len(positives)
    if n == 0:
        return []
    order = rng.permutation(n)
    users, pos, neg = [], [], []
    for idx in order:
        u, i = positives[idx]
        excl = exclusions[u]
        if len(excl) >= num_items:
            raise DataError(f"user {u} has no negative candidates")
        for _ in range(neg_per_pos):
            j = int(rng.integers(0, num_items))
            while j in excl:
                j = int(rng.integers(0, num_items))
            users.append(u)
            pos.append(i)
            neg.append(j)
    users = np.array(users, dtype=np.int64)
    pos = np.array(pos, dtype=np.int64)
    neg = np.array(neg, dtype=np.int64)
    batches = []
    for lo in range(0, len(users), batch_size):
        hi = lo + batch_size
        batches.append(TripleBatch(users[lo:hi], pos[lo:hi], neg[lo:hi]))
    return batches


def build_probe(partition, exclusions, num_items, rng, n_neg=100):
    """Fixed divergence probe: forget positives plus seeded uniform negatives."""
    by_user = {}
    for u, i in partition.forget:
        by_user.setdefault(u, []).append(i)
    probe = []
    for u in sorted(by_user):
        negs = sample_negatives(n_neg, exclusions[u], num_items, rng)
        probe.append((u, np.array(sorted(by_user[u]), dtype=np.int64), negs))
    return probe


def _batch_nodes(batch):
    return NodeSample(users=np.unique(batch.users), items=np.unique(batch.pos))


def _step(params, opt, ctx, hyper, alpha, retain_batch=None, forget_batch=None,
          lam_c=None, lam_phi=None):
    """One fused optimization step; returns scalar loss terms for bookkeeping.

    State-level cotangents of the preserve side (weight alpha) and impair
    side (weight 1-alpha) are blended before a single backward pass.
    """
    lam_c = hyper.lambda_c if lam_c is None else lam_c
    lam_phi = hyper.lambda_phi if lam_phi is None else lam_phi
    state = ctx.state(params, hyper.layers)

    d_uf = np.zeros_like(state.user_final)
    d_if = np.zeros_like(state.item_final)
    d_um = np.zeros_like(state.user_mul)
    d_ub = np.zeros_like(state.user_beh)
    d_im = np.zeros_like(state.item_mul)
    d_ib = np.zeros_like(state.item_beh)

    terms = {"bpr": 0.0, "rpr": 0.0, "con_r": 0.0, "con_f": 0.0, "l2": 0.0}

    if retain_batch is not None:
        val, g_uf, g_if = _bpr_state_grads(state, retain_batch, sign=-1)
        terms["bpr"] = val
        d_uf += alpha * g_uf
        d_if += alpha * g_if
        if lam_c != 0.0:
            nodes = _batch_nodes(retain_batch)
            if len(nodes.users) >= 2 and len(nodes.items) >= 2:
                cval, g_um, g_ub, g_im, g_ib = _contrastive_state_grads(
                    state, nodes, hyper.tau)
                terms["con_r"] = cval
                w = alpha * lam_c
                d_um += w * g_um
                d_ub += w * g_ub
                d_im += w * g_im
                d_ib += w * g_ib

    if forget_batch is not None:
        val, g_uf, g_if = _bpr_state_grads(state, forget_batch, sign=-1)
        terms["rpr"] = -val  # reverse objective is the exact negation
        w = -(1.0 - alpha)
        d_uf += w * g_uf
        d_if += w * g_if
        if lam_c != 0.0:
            nodes = _batch_nodes(forget_batch)
            if len(nodes.users) >= 2 and len(nodes.items) >= 2:
                cval, g_um, g_ub, g_im, g_ib = _contrastive_state_grads(
                    state, nodes, hyper.tau)
                terms["con_f"] = cval
                w = -(1.0 - alpha) * lam_c
                d_um += w * g_um
                d_ub += w * g_ub
                d_im += w * g_im
                d_ib += w * g_ib

    grads = backprop_state(params, state, d_user_final=d_uf, d_item_final=d_if,
                           d_user_mul=d_um, d_item_mul=d_im,
                           d_user_beh=d_ub, d_item_beh=d_ib)
    if lam_phi != 0.0:
        l2_val, l2_grads = l2_penalty(params)
        terms["l2"] = l2_val
        coef = alpha * lam_phi - (1.0 - alpha) * lam_phi if forget_batch is not None \
            else alpha * lam_phi
        if retain_batch is None:
            coef = -(1.0 - alpha) * lam_phi
        grads.add_scaled(l2_grads, coef)

    opt.step(params, grads)

    preserve = terms["bpr"] + lam_c * terms["con_r"] + lam_phi * terms["l2"]
    impair = terms["rpr"] - (lam_c * terms["con_f"] + lam_phi * terms["l2"])
    if retain_batch is not None and forget_batch is not None:
        terms["combined"] = alpha * preserve + (1.0 - alpha) * impair
    elif retain_batch is not None:
        terms["combined"] = preserve
    else:
        terms["combined"] = impair
    return terms


def _valid_recall(state, split, mask_edges):
    if not split.valid:
        raise ConfigError("empty validation set; cannot early-stop")
    return user_metrics(state, split.valid, STOP_K, mask=mask_edges)[0]


def _check_finite(terms, epoch):
    if not np.isfinite(terms["combined"]):
        raise NumericError(f"non-finite loss at epoch {epoch}")


def train(graph, split, config):
    """Fit the full objective on the train split; returns the best checkpoint."""
    if config.mode != "train":
        raise ConfigError(f"train() called with mode {config.mode!r}")
    if not split.train:
        raise ConfigError("empty train set")
    return _fit(graph, split, split.train, config)


def retrain_gold(graph, split, partition, config):
    """Train from scratch on the retain set only (the unlearning reference)."""
    if config.mode != "gold":
        raise ConfigError(f"retrain_gold() called with mode {config.mode!r}")
    if not partition.retain:
        raise ConfigError("empty retain set")
    return _fit(graph, split, partition.retain, config)


def _fit(graph, split, edges, config):
    hyper = config.hyper
    started = time.perf_counter()
    ctx = _Context(graph, edges)
    params = init_params(graph, hyper, config.seed)
    opt = Adam(params, lr=hyper.lr)
    rng = stream_rng(config.seed, "negatives")

    best_recall, best_epoch = -1.0, 0
    best_params = params.copy()
    epochs_run = 0
    stop_reason = "max_epochs"
    positives = list(ctx.edges)
    for epoch in range(1, hyper.max_epochs + 1):
        for batch in make_triple_batches(positives, ctx.exclusions, graph.num_items,
                                         hyper.batch_size, hyper.neg_per_pos, rng):
            terms = _step(params, opt, ctx, hyper, alpha=1.0, retain_batch=batch)
            _check_finite(terms, epoch)
        epochs_run = epoch
        state = ctx.state(params, hyper.layers)
        recall = _valid_recall(state, split, ctx.edges)
        if recall >= best_recall:
            # ties keep the later snapshot; only strict improvement resets
            # the patience anchor
            if recall > best_recall:
                best_epoch = epoch
            best_recall = recall
            best_params = params.copy()
        if epoch - best_epoch >= hyper.patience:
            stop_reason = "early_stop"
            break
    return RunResult(
        params=best_params,
        epochs_run=epochs_run,
        wall_time=time.perf_counter() - started,
        best_epoch=best_epoch,
        best_valid_recall=best_recall,
        stop_reason=stop_reason,
        mode=config.mode,
    )


def unlearn_mmrecun(graph, split, partition, initial, config, reference=None):
    """Alpha-weighted preserve/impair unlearning from a trained checkpoint.

    The adjacency and fusion neighborhoods are rebuilt on the retain set
    before the first step; the forget signal enters only through the
    impair side. When `reference` (normally the gold model) is supplied,
    the score divergence on the forget probe is recorded every epoch.
    """
    if config.mode != "mmrecun":
        raise ConfigError(f"unlearn_mmrecun() called with mode {config.mode!r}")
    return _unlearn(graph, split, partition, initial, config, reference,
                    use_preserve=True)


def unlearn_amun(graph, split, partition, initial, config):
    """Baseline: reverse-ranking steps on the forget set only."""
    if config.mode != "amun":
        raise ConfigError(f"unlearn_amun() called with mode {config.mode!r}")
    return _unlearn(graph, split, partition, initial, config, reference=None,
                    use_preserve=False)


def _unlearn(graph, split, partition, initial, config, reference, use_preserve):
    hyper = config.hyper
    if not partition.forget:
        raise ConfigError("empty forget set")
    if not partition.retain:
        raise ConfigError("empty retain set")
    if initial.num_users != graph.num_users or initial.num_items != graph.num_items:
        raise DataError("checkpoint node counts do not match the graph")
    started = time.perf_counter()
    # nullified interactions: rebuild all graph structures on the retain set
    ctx = _Context(graph, partition.retain,
                   exclusion_edges=tuple(partition.retain) + tuple(partition.forget))
    params = initial.copy()
    opt = Adam(params, lr=hyper.lr)
    rng_retain = stream_rng(config.seed, "negatives:retain")
    rng_forget = stream_rng(config.seed, "negatives:forget")

    probe, ref_state = None, None
    if reference is not None:
        if reference.num_users != graph.num_users or reference.num_items != graph.num_items:
            raise DataError("reference node counts do not match the graph")
        probe = build_probe(partition, ctx.exclusions, graph.num_items,
                            stream_rng(config.seed, "probe"))
        ref_state = ctx.state(reference, hyper.layers)

    retain_pos = list(partition.retain)
    forget_pos = list(partition.forget)
    curve = []
    best_recall, best_epoch = -1.0, 0
    epochs_run = 0
    stop_reason = "max_epochs"
    # an unlearning epoch is one pass over the retain batches for every
    # method; forget batches cycle so both sides see the same step count
    steps_per_epoch = max(1, -(-len(retain_pos) // hyper.batch_size))
    for epoch in range(1, hyper.max_epochs + 1):
        forget_batches = make_triple_batches(forget_pos, ctx.exclusions, graph.num_items,
                                             hyper.batch_size, hyper.neg_per_pos,
                                             rng_forget)
        if use_preserve:
            retain_batches = make_triple_batches(retain_pos, ctx.exclusions,
                                                 graph.num_items, hyper.batch_size,
                                                 hyper.neg_per_pos, rng_retain)
            steps = max(len(retain_batches), len(forget_batches))
            for k in range(steps):
                terms = _step(params, opt, ctx, hyper, alpha=hyper.alpha,
                              retain_batch=retain_batches[k % len(retain_batches)],
                              forget_batch=forget_batches[k % len(forget_batches)])
                _check_finite(terms, epoch)
        else:
            steps = max(steps_per_epoch, len(forget_batches))
            for k in range(steps):
                terms = _step(params, opt, ctx, hyper, alpha=0.0,
                              forget_batch=forget_batches[k % len(forget_batches)],
                              lam_c=0.0, lam_phi=0.0)
                _check_finite(terms, epoch)
        epochs_run = epoch
        state = ctx.state(params, hyper.layers)
        if probe is not None:
            curve.append((epoch, bpr_divergence(state, ref_state, probe)))
        recall = _valid_recall(state, split, ctx.edges)
        if recall > best_recall:
            best_recall, best_epoch = recall, epoch
        if epoch - best_epoch >= hyper.patience:
            stop_reason = "early_stop"
            break
    return RunResult(
        params=params,
        epochs_run=epochs_run,
        wall_time=time.perf_counter() - started,
        divergence_curve=curve,
        best_epoch=best_epoch,
        best_valid_recall=best_recall,
        stop_reason=stop_reason,
        mode=config.mode,
    )
