"""Interaction dataset: loading, splitting, forget-request resolution, adjacency.

The bipartite interaction graph is stored with dense 0-based user/item
indices (assigned by first appearance in the source file) plus the
id<->index maps needed to resolve external requests. All structures are
immutable after construction and safe for concurrent reads.
"""

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .seeding import stream_rng

FORGET_KINDS = ("interaction", "user_preference", "biased_item", "account", "license")

_MMFT_MAGIC = b"MMFT"


@dataclass(frozen=True)
class InteractionGraph:
    """Bipartite user-item edge set with per-modality item feature matrices."""

    num_users: int
    num_items: int
    edges: tuple  # tuple of (user_index, item_index), unique, sorted
    modality_features: dict  # modality id -> (num_items, d_m) float64 array
    modality_dims: dict  # modality id -> d_m
    user_ids: tuple = ()  # index -> external id
    item_ids: tuple = ()

    def __post_init__(self):
        for u, i in self.edges:
            if not (0 <= u < self.num_users and 0 <= i < self.num_items):
                raise DataError(f"edge ({u},{i}) out of range")
        if len(set(self.edges)) != len(self.edges):
            raise DataError("duplicate edges in graph")
        for m, mat in self.modality_features.items():
            if mat.shape[0] != self.num_items:
                raise DataError(
                    f"modality '{m}' has {mat.shape[0]} rows, expected {self.num_items}"
                )
            if mat.shape[1] != self.modality_dims[m]:
                raise DataError(f"modality '{m}' dim mismatch")


@dataclass(frozen=True)
class DatasetSplit:
    """Train / valid / test partition of the edge set (8:1:1 per user)."""

    train: tuple
    valid: tuple
    test: tuple


@dataclass(frozen=True)
class ForgetSpec:
    """An unlearning request: edge targets or node targets depending on kind.

    kind: one of interaction, user_preference (edge lists), account (user
    nodes), biased_item, license (item nodes).
    """

    kind: str
    edges: tuple = ()
    users: tuple = ()
    items: tuple = ()

    def __post_init__(self):
        if self.kind not in FORGET_KINDS:
            raise DataError(f"unknown forget kind '{self.kind}'")
        if self.kind in ("interaction", "user_preference"):
            if not self.edges:
                raise DataError("edge-kind forget spec has no target edges")
        elif self.kind == "account":
            if not len(self.users):
                raise DataError("account forget spec has no target users")
        else:
            if not len(self.items):
                raise DataError(f"{self.kind} forget spec has no target items")


@dataclass(frozen=True)
class Partition:
    """Disjoint retain/forget split of the training edges."""

    retain: tuple
    forget: tuple


@dataclass(frozen=True)
class NormAdj:
    """Symmetric sqrt-degree normalized bipartite adjacency (CSR)."""

    matrix: sp.csr_matrix
    num_users: int
    num_items: int

    @property
    def num_nodes(self):
        return self.num_users + self.num_items


def _parse_interactions(path):
    edges = []
    user_index, item_index = {}, {}
    user_ids, item_ids = [], []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty interaction file")
        cols = [c.strip() for c in header]
        if cols[:2] != ["user_id", "item_id"]:
            raise DataError(f"{path}:1: expected header user_id,item_id[,timestamp]")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: malformed row {row!r}")
            uid, iid = row[0].strip(), row[1].strip()
            if not uid or not iid:
                raise DataError(f"{path}:{lineno}: empty id in row {row!r}")
            if uid not in user_index:
                user_index[uid] = len(user_ids)
                user_ids.append(uid)
            if iid not in item_index:
                item_index[iid] = len(item_ids)
                item_ids.append(iid)
            e = (user_index[uid], item_index[iid])
            if e not in seen:  # duplicates collapse to one edge
                seen.add(e)
                edges.append(e)
    return edges, user_ids, item_ids


def read_mmft(path):
    """Read an MMFT feature file: magic, u32 rows, u32 cols, float32 LE row-major."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MMFT_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected MMFT")
        head = fh.read(8)
        if len(head) != 8:
            raise DataError(f"{path}: truncated header")
        rows, cols = struct.unpack("<II", head)
        payload = fh.read(rows * cols * 4)
        if len(payload) != rows * cols * 4:
            raise DataError(f"{path}: truncated payload ({len(payload)} bytes)")
        mat = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return mat.astype(np.float64)


def write_mmft(path, matrix):
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MMFT_MAGIC)
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def load_interactions(path, feature_paths=None):
    """Build an InteractionGraph from a CSV of interactions plus MMFT features.

    Indices are dense, 0-based, assigned by first appearance; duplicate
    rows collapse to a single edge.
    """
    edges, user_ids, item_ids = _parse_interactions(path)
    if not edges:
        raise DataError(f"{path}: no interactions")
    feats, dims = {}, {}
    for m, fpath in (feature_paths or {}).items():
        mat = read_mmft(fpath)
        if mat.shape[0] != len(item_ids):
            raise DataError(
                f"{fpath}: modality '{m}' has {mat.shape[0]} rows, "
                f"expected {len(item_ids)} items"
            )
        feats[m] = mat
        dims[m] = mat.shape[1]
    return InteractionGraph(
        num_users=len(user_ids),
        num_items=len(item_ids),
        edges=tuple(sorted(edges)),
        modality_features=feats,
        modality_dims=dims,
        user_ids=tuple(user_ids),
        item_ids=tuple(item_ids),
    )


def split_dataset(graph, seed):
    """Per-user random 8:1:1 split, deterministic given the seed.

    test and valid each receive floor(n/10) edges, with a floor of one
    each for users holding at least 3 edges; users with fewer keep all
    edges in train so no relevance set is emptied.
    """
    if not graph.edges:
        raise DataError("cannot split an empty graph")
    rng = stream_rng(seed, "split")
    by_user = {}
    for u, i in sorted(graph.edges):
        by_user.setdefault(u, []).append(i)
    train, valid, test = [], [], []
    for u in range(graph.num_users):
        items = by_user.get(u, [])
        n = len(items)
        if n == 0:
            continue
        perm = rng.permutation(n)
        shuffled = [items[k] for k in perm]
        if n < 3:
            n_test = n_valid = 0
        else:
            n_test = max(1, n // 10)
            n_valid = max(1, n // 10)
        test.extend((u, i) for i in shuffled[:n_test])
        valid.extend((u, i) for i in shuffled[n_test:n_test + n_valid])
        train.extend((u, i) for i in shuffled[n_test + n_valid:])
    return DatasetSplit(
        train=tuple(sorted(train)),
        valid=tuple(sorted(valid)),
        test=tuple(sorted(test)),
    )


def mark_forget(split, spec):
    """Resolve a ForgetSpec against the train set into a retain/forget partition.

    Node-kind targets cascade: every train edge incident to a marked user
    or item is forgotten.
    """
    train = set(split.train)
    forget = set()
    if spec.kind in ("interaction", "user_preference"):
        for e in spec.edges:
            e = (int(e[0]), int(e[1]))
            if e not in train:
                raise DataError(f"forget edge {e} not in train set")
            forget.add(e)
    elif spec.kind == "account":
        targets = set(int(u) for u in spec.users)
        forget = {e for e in train if e[0] in targets}
    else:  # biased_item / license cascade over item nodes
        targets = set(int(i) for i in spec.items)
        forget = {e for e in train if e[1] in targets}
    retain = train - forget
    return Partition(retain=tuple(sorted(retain)), forget=tuple(sorted(forget)))


def load_forget_spec(path, graph):
    """Read a forget-spec JSON (external ids) and resolve it to indices."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    kind = raw.get("kind")
    if kind not in FORGET_KINDS:
        raise DataError(f"{path}: unknown forget kind {kind!r}")
    u_index = {uid: k for k, uid in enumerate(graph.user_ids)}
    i_index = {iid: k for k, iid in enumerate(graph.item_ids)}

    def user_of(uid):
        if uid not in u_index:
            raise DataError(f"{path}: unknown user id {uid!r}")
        return u_index[uid]

    def item_of(iid):
        if iid not in i_index:
            raise DataError(f"{path}: unknown item id {iid!r}")
        return i_index[iid]

    edges = tuple((user_of(u), item_of(i)) for u, i in raw.get("edges", []))
    users = tuple(user_of(u) for u in raw.get("users", []))
    items = tuple(item_of(i) for i in raw.get("items", []))
    return ForgetSpec(kind=kind, edges=edges, users=users, items=items)


def build_normalized_adjacency(num_users, num_items, edges):
    """Symmetric 1/sqrt(deg_u * deg_i) bipartite adjacency over users+items.

    Item node k sits at row num_users + k; isolated nodes get empty rows.
    """
    n = num_users + num_items
    if not len(edges):
        return NormAdj(sp.csr_matrix((n, n)), num_users, num_items)
    e = np.asarray(list(edges), dtype=np.int64)
    if e.size and (e[:, 0].min() < 0 or e[:, 0].max() >= num_users
                   or e[:, 1].min() < 0 or e[:, 1].max() >= num_items):
        raise DataError("edge index out of range for adjacency")
    deg_u = np.bincount(e[:, 0], minlength=num_users).astype(np.float64)
    deg_i = np.bincount(e[:, 1], minlength=num_items).astype(np.float64)
    w = 1.0 / np.sqrt(deg_u[e[:, 0]] * deg_i[e[:, 1]])
    rows = np.concatenate([e[:, 0], e[:, 1] + num_users])
    cols = np.concatenate([e[:, 1] + num_users, e[:, 0]])
    vals = np.concatenate([w, w])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return NormAdj(mat, num_users, num_items)


def user_positive_items(edges, num_users):
    """Per-user sorted arrays of positive item indices over `edges`."""
    buckets = [[] for _ in range(num_users)]
    for u, i in edges:
        buckets[u].append(i)
    return [np.array(sorted(b), dtype=np.int64) for b in buckets]


def neighbor_mean_matrix(edges, num_users, num_items):
    """Row-normalized user->item incidence (CSR); zero rows for isolated users."""
    if not len(edges):
        return sp.csr_matrix((num_users, num_items))
    e = np.asarray(list(edges), dtype=np.int64)
    deg = np.bincount(e[:, 0], minlength=num_users).astype(np.float64)
    w = 1.0 / deg[e[:, 0]]
    return sp.csr_matrix((w, (e[:, 0], e[:, 1])), shape=(num_users, num_items))
