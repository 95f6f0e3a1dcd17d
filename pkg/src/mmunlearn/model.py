"""Trainable parameters, graph propagation, modality fusion, scoring, top-K.

The scoring model is a LightGCN-style propagator over the bipartite graph
plus a lightweight modality fuser: per-modality linear projections, a
softmax attention that extracts a cross-modality shared component, and a
behavior-conditioned sigmoid gate that re-injects modality-specific
detail. Item-side fused embeddings are averaged over each user's training
neighbors to form the user-side fused component.

`backprop_state` pushes loss gradients expressed at the propagated-state
level back into parameter space; every trainable tensor is covered, while
modality feature matrices stay frozen inputs.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, NumericError
from .graph import build_normalized_adjacency, neighbor_mean_matrix, user_positive_items
from .seeding import stream_rng

_MMCK_MAGIC = b"MMCK"
_MMCK_VERSION = 1


@dataclass
class HyperParams:
    d: int = 64
    lr: float = 1e-3
    lambda_c: float = 0.01
    lambda_phi: float = 1e-4
    tau: float = 0.2
    alpha: float = 0.3
    layers: int = 2
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    neg_per_pos: int = 1
    topk_list: tuple = (5, 10, 20, 50)

    def __post_init__(self):
        if self.d <= 0:
            raise ConfigError("embedding dim must be positive")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.layers < 0:
            raise ConfigError("layer count must be >= 0")
        if self.lambda_phi < 0 or self.lambda_c < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.batch_size <= 0 or self.neg_per_pos <= 0:
            raise ConfigError("batch_size and neg_per_pos must be positive")


@dataclass
class ModelParams:
    """All trainable tensors of the recommender."""

    user_emb: np.ndarray  # (num_users, d)
    item_emb: np.ndarray  # (num_items, d)
    proj: dict  # modality -> (d, d_m)
    gate_w: np.ndarray  # (d, d)
    gate_b: np.ndarray  # (d,)
    attn: dict  # modality -> (d,)

    @property
    def num_users(self):
        return self.user_emb.shape[0]

    @property
    def num_items(self):
        return self.item_emb.shape[0]

    @property
    def d(self):
        return self.user_emb.shape[1]

    @property
    def modalities(self):
        return sorted(self.proj)

    def named_tensors(self):
        """Fixed-order (name, array) pairs covering every trainable tensor."""
        yield "user_emb", self.user_emb
        yield "item_emb", self.item_emb
        for m in self.modalities:
            yield f"proj:{m}", self.proj[m]
        yield "gate_w", self.gate_w
        yield "gate_b", self.gate_b
        for m in self.modalities:
            yield f"attn:{m}", self.attn[m]

    def copy(self):
        return ModelParams(
            user_emb=self.user_emb.copy(),
            item_emb=self.item_emb.copy(),
            proj={m: a.copy() for m, a in self.proj.items()},
            gate_w=self.gate_w.copy(),
            gate_b=self.gate_b.copy(),
            attn={m: a.copy() for m, a in self.attn.items()},
        )

    def zeros_like(self):
        return ModelParams(
            user_emb=np.zeros_like(self.user_emb),
            item_emb=np.zeros_like(self.item_emb),
            proj={m: np.zeros_like(a) for m, a in self.proj.items()},
            gate_w=np.zeros_like(self.gate_w),
            gate_b=np.zeros_like(self.gate_b),
            attn={m: np.zeros_like(a) for m, a in self.attn.items()},
        )

    def scaled(self, a):
        out = self.zeros_like()
        for (_, dst), (_, src) in zip(out.named_tensors(), self.named_tensors()):
            dst += a * src
        return out

    def add_scaled(self, other, a=1.0):
        """In-place self += a * other, tensor by tensor."""
        for (_, dst), (_, src) in zip(self.named_tensors(), other.named_tensors()):
            dst += a * src
        return self

    def allfinite(self):
        return all(np.isfinite(t).all() for _, t in self.named_tensors())


@dataclass
class _FusionCache:
    """Intermediate values needed to run the fusion/propagation backward pass."""

    features: dict
    h: dict  # modality -> projected features (num_items, d)
    hbar: dict  # modality -> mean over items (d,)
    weights: np.ndarray  # softmax attention over modalities (M,)
    shared: np.ndarray
    hmean: np.ndarray
    gate: np.ndarray  # sigmoid activations (num_items, d)
    neighbor_mean: sp.csr_matrix
    adj: sp.csr_matrix
    layers: int
    modalities: list


@dataclass
class PropagatedState:
    """Propagated and fused embeddings used for scoring."""

    user_beh: np.ndarray
    item_beh: np.ndarray
    user_mul: np.ndarray
    item_mul: np.ndarray
    user_final: np.ndarray
    item_final: np.ndarray
    cache: _FusionCache = field(default=None, repr=False)


def init_params(graph, hyper, seed):
    """Xavier-uniform initialization, deterministic given the seed.

    Every weight matrix is drawn uniform in +-sqrt(6/(fan_in+fan_out));
    the gate bias starts at zero.
    """
    rng = stream_rng(seed, "init")
    d = hyper.d

    def xavier(shape):
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-bound, bound, size=shape)

    proj, attn = {}, {}
    for m in sorted(graph.modality_dims):
        proj[m] = xavier((d, graph.modality_dims[m]))
    gate_w = xavier((d, d))
    gate_b = np.zeros(d)
    for m in sorted(graph.modality_dims):
        attn[m] = xavier((1, d))[0]
    return ModelParams(
        user_emb=xavier((graph.num_users, d)),
        item_emb=xavier((graph.num_items, d)),
        proj=proj,
        gate_w=gate_w,
        gate_b=gate_b,
        attn=attn,
    )


def propagate(params, adj, layers):
    """Mean over propagation layers 0..L of the stacked embeddings."""
    x = np.vstack([params.user_emb, params.item_emb])
    acc = x.copy()
    for _ in range(layers):
        x = adj.matrix @ x
        acc += x
    acc /= layers + 1
    n_u = params.num_users
    return acc[:n_u], acc[n_u:]


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def fuse_modalities(params, graph, user_beh, item_beh, edges=None):
    """Fuse frozen modality features with behavior embeddings.

    Per modality the features are projected into the embedding space; a
    softmax over per-modality attention scores extracts a shared
    component, the remainder is modality-specific and re-weighted by a
    sigmoid gate conditioned on item behavior. Users average the fused
    item embeddings of their neighbors under `edges` (defaults to the
    graph's full edge set).
    """
    mods = sorted(params.proj)
    if set(mods) != set(graph.modality_dims):
        raise DataError("params and graph disagree on modalities")
    for m in mods:
        if params.proj[m].shape[1] != graph.modality_dims[m]:
            raise DataError(f"modality '{m}' projection dim mismatch")
    if edges is None:
        edges = graph.edges
    n_items = graph.num_items

    h, hbar = {}, {}
    scores = np.empty(len(mods))
    for k, m in enumerate(mods):
        h[m] = graph.modality_features[m] @ params.proj[m].T
        hbar[m] = h[m].mean(axis=0)
        scores[k] = params.attn[m] @ hbar[m]
    if mods:
        z = scores - scores.max()
        ez = np.exp(z)
        weights = ez / ez.sum()
    else:
        weights = np.empty(0)  # feature-less graph degrades to pure behavior

    shared = np.zeros((n_items, params.d))
    hmean = np.zeros((n_items, params.d))
    for k, m in enumerate(mods):
        shared += weights[k] * h[m]
        hmean += h[m]
    hmean /= len(mods)

    gate = _sigmoid(item_beh @ params.gate_w.T + params.gate_b)
    item_mul = shared + gate * (hmean - shared)

    nb = neighbor_mean_matrix(edges, graph.num_users, n_items)
    user_mul = nb @ item_mul

    cache = _FusionCache(
        features=graph.modality_features,
        h=h,
        hbar=hbar,
        weights=weights,
        shared=shared,
        hmean=hmean,
        gate=gate,
        neighbor_mean=nb,
        adj=None,
        layers=0,
        modalities=mods,
    )
    return PropagatedState(
        user_beh=user_beh,
        item_beh=item_beh,
        user_mul=user_mul,
        item_mul=item_mul,
        user_final=user_beh + user_mul,
        item_final=item_beh + item_mul,
        cache=cache,
    )


def compute_state(params, graph, adj, layers, edges=None):
    """Full forward pass: propagate then fuse. `edges` governs user fusion."""
    user_beh, item_beh = propagate(params, adj, layers)
    state = fuse_modalities(params, graph, user_beh, item_beh, edges=edges)
    state.cache.adj = adj.matrix
    state.cache.layers = layers
    return state


def backprop_state(params, state, d_user_final=None, d_item_final=None,
                   d_user_mul=None, d_item_mul=None,
                   d_user_beh=None, d_item_beh=None):
    """Backward pass from state-level gradients to a parameter gradient buffer.

    Accepts any subset of cotangents (missing ones are zero) and returns a
    ModelParams-shaped buffer. The fusion cache must come from
    `compute_state` so the propagation context is attached.
    """
    c = state.cache
    if c is None or c.adj is None:
        raise ValueError("state lacks a propagation cache; use compute_state")
    n_u, n_i, d = params.num_users, params.num_items, params.d

    dUF = np.zeros((n_u, d)) if d_user_final is None else d_user_final
    dIF = np.zeros((n_i, d)) if d_item_final is None else d_item_final
    dUM = np.zeros((n_u, d)) if d_user_mul is None else d_user_mul.copy()
    dIM = np.zeros((n_i, d)) if d_item_mul is None else d_item_mul.copy()
    dUB = np.zeros((n_u, d)) if d_user_beh is None else d_user_beh.copy()
    dIB = np.zeros((n_i, d)) if d_item_beh is None else d_item_beh.copy()

    # finals split into behavior + fused parts
    dUB += dUF
    dUM += dUF
    dIB += dIF
    dIM += dIF

    # user_mul = neighbor_mean @ item_mul
    dIM += c.neighbor_mean.T @ dUM

    grads = params.zeros_like()

    # item_mul = shared + gate * (hmean - shared)
    d_gate = dIM * (c.hmean - c.shared)
    d_z = d_gate * c.gate * (1.0 - c.gate)
    grads.gate_w += d_z.T @ state.item_beh
    grads.gate_b += d_z.sum(axis=0)
    dIB += d_z @ params.gate_w

    d_hmean = dIM * c.gate
    d_shared = dIM * (1.0 - c.gate)

    mods = c.modalities
    n_mods = len(mods)
    d_h = {m: d_hmean / n_mods for m in mods}
    d_weights = np.empty(n_mods)
    for k, m in enumerate(mods):
        d_h[m] = d_h[m] + c.weights[k] * d_shared
        d_weights[k] = np.vdot(d_shared, c.h[m])

    # softmax backward into attention scores
    w = c.weights
    d_scores = w * (d_weights - np.dot(w, d_weights))
    for k, m in enumerate(mods):
        grads.attn[m] += d_scores[k] * c.hbar[m]
        # score_m = attn_m . mean_i h_m[i]
        d_h[m] = d_h[m] + (d_scores[k] / c.h[m].shape[0]) * params.attn[m]

    for m in mods:
        grads.proj[m] += d_h[m].T @ c.features[m]

    # propagation: mean over layers 0..L of powers of the symmetric adjacency
    d_xbar = np.vstack([dUB, dIB])
    acc = d_xbar.copy()
    y = d_xbar
    for _ in range(c.layers):
        y = c.adj @ y
        acc += y
    acc /= c.layers + 1
    grads.user_emb += acc[:n_u]
    grads.item_emb += acc[n_u:]
    return grads


def score(state, u, i):
    """Predicted preference: dot(user_final[u], item_final[i])."""
    return float(state.user_final[u] @ state.item_final[i])


def recommend_topk(state, u, k, mask=()):
    """Top-K items for user u, excluding masked (u, item) pairs.

    Ties break by ascending item index; the list is shorter than K when
    fewer candidates remain.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    scores = state.item_final @ state.user_final[u]
    masked = [i for mu, i in mask if mu == u]
    if masked:
        scores = scores.copy()
        scores[masked] = -np.inf
    order = np.argsort(-scores, kind="stable")  # stable keeps ascending index on ties
    out = [int(i) for i in order if np.isfinite(scores[i])]
    return out[:k]


def topk_matrix(state, k, mask_lists=None, user_subset=None):
    """Top-K lists for many users at once; mask_lists[u] holds excluded items."""
    users = range(state.user_final.shape[0]) if user_subset is None else user_subset
    out = {}
    for u in users:
        scores = state.item_final @ state.user_final[u]
        excl = None if mask_lists is None else mask_lists[u]
        if excl is not None and len(excl):
            scores = scores.copy()
            scores[excl] = -np.inf
        order = np.argsort(-scores, kind="stable")
        lst = []
        for i in order:
            if not np.isfinite(scores[i]):
                break  # masked entries sort last
            lst.append(int(i))
            if len(lst) == k:
                break
        out[u] = lst
    return out


def save_checkpoint(path, params):
    """Write the MMCK checkpoint: named float64 tensors, bit-exact round-trip."""
    with open(path, "wb") as fh:
        fh.write(_MMCK_MAGIC)
        fh.write(struct.pack("<I", _MMCK_VERSION))
        for name, tensor in params.named_tensors():
            mat = np.ascontiguousarray(np.atleast_2d(tensor), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            fh.write(mat.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MMCK_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _MMCK_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode("utf-8")
            rows, cols = struct.unpack("<II", fh.read(8))
            payload = fh.read(rows * cols * 8)
            if len(payload) != rows * cols * 8:
                raise DataError(f"{path}: truncated tensor '{name}'")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    required = {"user_emb", "item_emb", "gate_w", "gate_b"}
    if not required <= set(tensors):
        raise DataError(f"{path}: missing tensors {sorted(required - set(tensors))}")
    proj = {k.split(":", 1)[1]: v for k, v in tensors.items() if k.startswith("proj:")}
    attn = {k.split(":", 1)[1]: v[0] for k, v in tensors.items() if k.startswith("attn:")}
    params = ModelParams(
        user_emb=tensors["user_emb"],
        item_emb=tensors["item_emb"],
        proj=proj,
        gate_w=tensors["gate_w"],
        gate_b=tensors["gate_b"][0],
        attn=attn,
    )
    if not params.allfinite():
        raise NumericError(f"{path}: checkpoint contains non-finite values")
    return params
