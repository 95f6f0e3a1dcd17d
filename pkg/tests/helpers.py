"""Shared builders and independent oracles used across the test modules."""

import numpy as np

from mmunlearn import (HyperParams, InteractionGraph, TripleBatch,
                       build_normalized_adjacency, compute_state, init_params)
from mmunlearn.losses import NodeSample


def make_graph(rng, num_users=5, num_items=6, num_modalities=2, min_degree=2):
    """Small random bipartite graph with dense modality features."""
    edges = set()
    for u in range(num_users):
        for i in rng.choice(num_items, size=min(min_degree, num_items), replace=False):
            edges.add((u, int(i)))
    dims = {f"m{k}": int(rng.integers(1, 4)) for k in range(num_modalities)}
    feats = {m: rng.normal(size=(num_items, d)) for m, d in dims.items()}
    return InteractionGraph(
        num_users=num_users,
        num_items=num_items,
        edges=tuple(sorted(edges)),
        modality_features=feats,
        modality_dims=dims,
    )


def make_instance(seed, num_users=5, num_items=6, d=3, layers=2, batch_triples=5,
                  num_modalities=2):
    """Random (graph, hyper, params, adj, batch, nodes) tuple for loss tests."""
    rng = np.random.default_rng(seed)
    graph = make_graph(rng, num_users, num_items, num_modalities)
    hyper = HyperParams(d=d, tau=0.2, lambda_c=0.3, lambda_phi=0.05, alpha=0.4,
                        layers=layers, topk_list=(3,))
    params = init_params(graph, hyper, seed=seed)
    for _, t in params.named_tensors():
        t += rng.normal(scale=0.3, size=t.shape)
    adj = build_normalized_adjacency(num_users, num_items, graph.edges)
    pos = {u: {i for uu, i in graph.edges if uu == u} for u in range(num_users)}
    us, ps, ns = [], [], []
    for _ in range(batch_triples):
        u = int(rng.integers(0, num_users))
        us.append(u)
        ps.append(int(rng.choice(sorted(pos[u]))))
        ns.append(int(rng.choice([x for x in range(num_items) if x not in pos[u]])))
    batch = TripleBatch(np.array(us), np.array(ps), np.array(ns))
    nodes = NodeSample(users=np.unique(us), items=np.unique(ps))
    return graph, hyper, params, adj, batch, nodes


def state_of(params, graph, adj, layers):
    return compute_state(params, graph, adj, layers)


def flat_state(user_final, item_final):
    """Hand-crafted state with an inert backward cache (no fusion, no layers)."""
    import scipy.sparse as sp

    from mmunlearn.model import PropagatedState, _FusionCache

    n_u, d = user_final.shape
    n_i = item_final.shape[0]
    cache = _FusionCache(
        features={}, h={}, hbar={}, weights=np.empty(0),
        shared=np.zeros((n_i, d)), hmean=np.zeros((n_i, d)),
        gate=np.zeros((n_i, d)),
        neighbor_mean=sp.csr_matrix((n_u, n_i)),
        adj=sp.csr_matrix((n_u + n_i, n_u + n_i)),
        layers=0, modalities=[],
    )
    return PropagatedState(user_beh=user_final.copy(), item_beh=item_final.copy(),
                           user_mul=np.zeros_like(user_final),
                           item_mul=np.zeros_like(item_final),
                           user_final=user_final, item_final=item_final,
                           cache=cache)


def fd_grad(loss_fn, params, h=1e-5):
    """Central finite differences over every entry of every tensor.

    loss_fn(params) -> scalar; returns a dict name -> gradient array.
    """
    out = {}
    for name, t in params.named_tensors():
        fd = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = t[idx]
            t[idx] = orig + h
            fplus = loss_fn(params)
            t[idx] = orig - h
            fminus = loss_fn(params)
            t[idx] = orig
            fd[idx] = (fplus - fminus) / (2 * h)
            it.iternext()
        out[name] = fd
    return out


def grad_close(analytic, fd, rtol=1e-4):
    """Per-tensor norm-relative comparison of gradient buffers."""
    worst = 0.0
    for name, g in analytic.named_tensors():
        ref = fd[name]
        denom = np.linalg.norm(g) + np.linalg.norm(ref) + 1e-12
        worst = max(worst, np.linalg.norm(g - ref) / denom)
    return worst <= rtol, worst
