"""Dataset loading, splitting, forget resolution, and adjacency construction."""

import numpy as np
import pytest
import scipy.sparse as sp

from mmunlearn import (DataError, ForgetSpec, InteractionGraph,
                       build_normalized_adjacency, load_forget_spec,
                       load_interactions, mark_forget, read_mmft, split_dataset,
                       write_mmft)
from mmunlearn.graph import neighbor_mean_matrix

from helpers import make_graph


def write_csv(path, rows, header="user_id,item_id"):
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))


# ---------------------------------------------------------------- loading

def test_load_assigns_indices_by_first_appearance(tmp_path):
    csv = tmp_path / "inter.csv"
    write_csv(csv, ["a,x", "a,y", "b,x"])
    g = load_interactions(csv)
    assert g.num_users == 2 and g.num_items == 2
    assert set(g.edges) == {(0, 0), (0, 1), (1, 0)}
    assert g.user_ids == ("a", "b") and g.item_ids == ("x", "y")


def test_load_collapses_duplicates(tmp_path):
    csv = tmp_path / "inter.csv"
    write_csv(csv, ["a,x", "a,x"])
    g = load_interactions(csv)
    assert len(g.edges) == 1


def test_load_ignores_timestamp_column(tmp_path):
    csv = tmp_path / "inter.csv"
    write_csv(csv, ["a,x,123", "b,y,456"], header="user_id,item_id,timestamp")
    g = load_interactions(csv)
    assert len(g.edges) == 2


def test_load_reports_malformed_row_with_line_number(tmp_path):
    csv = tmp_path / "inter.csv"
    write_csv(csv, ["a,x", "justonefield"])
    with pytest.raises(DataError, match=":3"):
        load_interactions(csv)


def test_load_rejects_bad_header(tmp_path):
    csv = tmp_path / "inter.csv"
    write_csv(csv, ["a,x"], header="foo,bar")
    with pytest.raises(DataError, match="header"):
        load_interactions(csv)


def test_mmft_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(7, 3)).astype(np.float32)
    path = tmp_path / "f.mmft"
    write_mmft(path, mat)
    back = read_mmft(path)
    assert back.shape == (7, 3)
    np.testing.assert_array_equal(back, mat.astype(np.float64))


def test_feature_row_count_mismatch_is_dimension_error(tmp_path):
    csv = tmp_path / "inter.csv"
    write_csv(csv, ["a,x", "a,y"])
    feat = tmp_path / "f.mmft"
    write_mmft(feat, np.zeros((3, 4), dtype=np.float32))  # 3 rows, 2 items
    with pytest.raises(DataError, match="expected 2 items"):
        load_interactions(csv, {"vis": feat})


def test_mmft_bad_magic(tmp_path):
    path = tmp_path / "f.mmft"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        read_mmft(path)


# ---------------------------------------------------------------- splitting

def _graph_with_degrees(degrees):
    edges = []
    for u, n in enumerate(degrees):
        for i in range(n):
            edges.append((u, i))
    return InteractionGraph(num_users=len(degrees), num_items=max(degrees),
                            edges=tuple(edges), modality_features={}, modality_dims={})


def test_split_user_with_10_edges_is_8_1_1():
    g = _graph_with_degrees([10])
    s = split_dataset(g, seed=0)
    assert (len(s.train), len(s.valid), len(s.test)) == (8, 1, 1)


def test_split_user_with_2_edges_stays_in_train():
    g = _graph_with_degrees([2, 5])
    s = split_dataset(g, seed=0)
    u0 = [e for e in s.train if e[0] == 0]
    assert len(u0) == 2
    assert not [e for e in s.valid + s.test if e[0] == 0]


def test_split_is_deterministic():
    rng = np.random.default_rng(1)
    g = make_graph(rng, num_users=12, num_items=15, min_degree=5)
    a = split_dataset(g, seed=7)
    b = split_dataset(g, seed=7)
    assert a == b
    c = split_dataset(g, seed=8)
    assert a != c


def test_split_partitions_edge_set():
    rng = np.random.default_rng(2)
    for trial in range(20):
        g = make_graph(rng, num_users=int(rng.integers(2, 10)),
                       num_items=int(rng.integers(3, 12)),
                       min_degree=int(rng.integers(1, 6)))
        s = split_dataset(g, seed=trial)
        parts = [set(s.train), set(s.valid), set(s.test)]
        assert parts[0] | parts[1] | parts[2] == set(g.edges)
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        # users holding >=3 edges land in every part
        by_user = {}
        for u, _ in g.edges:
            by_user[u] = by_user.get(u, 0) + 1
        for u, n in by_user.items():
            if n >= 3:
                for part in parts:
                    assert any(e[0] == u for e in part)


# ------------------------------------------------------------- forget marks

def test_interaction_kind_marks_only_listed_edges():
    g = _graph_with_degrees([5, 5])
    s = split_dataset(g, seed=0)
    edge = s.train[0]
    part = mark_forget(s, ForgetSpec(kind="interaction", edges=(edge,)))
    assert part.forget == (edge,)
    assert set(part.retain) == set(s.train) - {edge}


def test_account_kind_cascades_to_all_user_edges():
    g = _graph_with_degrees([4, 6])
    s = split_dataset(g, seed=0)
    part = mark_forget(s, ForgetSpec(kind="account", users=(0,)))
    assert set(part.forget) == {e for e in s.train if e[0] == 0}
    assert all(e[0] != 0 for e in part.retain)


def test_license_kind_matches_brute_force_enumeration():
    rng = np.random.default_rng(3)
    g = make_graph(rng, num_users=8, num_items=6, min_degree=3)
    s = split_dataset(g, seed=0)
    target = s.train[0][1]
    part = mark_forget(s, ForgetSpec(kind="license", items=(target,)))
    expected = {e for e in s.train if e[1] == target}  # independent enumeration
    assert set(part.forget) == expected
    assert set(part.retain) & set(part.forget) == set()


def test_unknown_edge_raises_not_found():
    g = _graph_with_degrees([5])
    s = split_dataset(g, seed=0)
    missing = s.valid[0]
    with pytest.raises(DataError, match="not in train"):
        mark_forget(s, ForgetSpec(kind="interaction", edges=(missing,)))


def test_partition_laws_over_random_specs():
    """Disjointness, coverage, and cascade closure across all five kinds."""
    rng = np.random.default_rng(4)
    kinds = ("interaction", "user_preference", "biased_item", "account", "license")
    for trial in range(200):
        g = make_graph(rng, num_users=int(rng.integers(3, 9)),
                       num_items=int(rng.integers(3, 9)),
                       min_degree=int(rng.integers(2, 4)))
        s = split_dataset(g, seed=trial)
        kind = kinds[trial % len(kinds)]
        if kind in ("interaction", "user_preference"):
            count = int(rng.integers(1, min(4, len(s.train)) + 1))
            picks = rng.choice(len(s.train), size=count, replace=False)
            spec = ForgetSpec(kind=kind, edges=tuple(s.train[k] for k in picks))
        elif kind == "account":
            users = sorted({e[0] for e in s.train})
            spec = ForgetSpec(kind=kind, users=(int(rng.choice(users)),))
        else:
            items = sorted({e[1] for e in s.train})
            spec = ForgetSpec(kind=kind, items=(int(rng.choice(items)),))
        part = mark_forget(s, spec)
        train = set(s.train)
        assert set(part.retain) | set(part.forget) == train
        assert set(part.retain) & set(part.forget) == set()
        if kind == "account":
            assert all(e[0] not in spec.users for e in part.retain)
        if kind in ("biased_item", "license"):
            assert all(e[1] not in spec.items for e in part.retain)


def test_forget_spec_file_resolves_external_ids(tmp_path):
    csv = tmp_path / "inter.csv"
    write_csv(csv, ["a,x", "a,y", "b,x"])
    g = load_interactions(csv)
    spec_path = tmp_path / "spec.json"
    spec_path.write_text('{"kind": "account", "users": ["b"]}')
    spec = load_forget_spec(spec_path, g)
    assert spec.users == (1,)
    spec_path.write_text('{"kind": "interaction", "edges": [["a", "y"]]}')
    spec = load_forget_spec(spec_path, g)
    assert spec.edges == ((0, 1),)


def test_forget_spec_rejects_unknown_ids(tmp_path):
    csv = tmp_path / "inter.csv"
    write_csv(csv, ["a,x"])
    g = load_interactions(csv)
    spec_path = tmp_path / "spec.json"
    spec_path.write_text('{"kind": "account", "users": ["nope"]}')
    with pytest.raises(DataError, match="unknown user"):
        load_forget_spec(spec_path, g)


def test_empty_spec_rejected():
    with pytest.raises(DataError, match="no target"):
        ForgetSpec(kind="account", users=())


# --------------------------------------------------------------- adjacency

def dense_norm_adj(num_users, num_items, edges):
    """Brute-force D^-1/2 A D^-1/2 on a dense matrix."""
    n = num_users + num_items
    a = np.zeros((n, n))
    for u, i in edges:
        a[u, num_users + i] = 1.0
        a[num_users + i, u] = 1.0
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        d = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    return d[:, None] * a * d[None, :]


def test_single_edge_weight_is_one():
    adj = build_normalized_adjacency(1, 1, [(0, 0)])
    dense = adj.matrix.toarray()
    assert dense[0, 1] == 1.0 and dense[1, 0] == 1.0
    assert dense[0, 0] == 0.0 and dense[1, 1] == 0.0


def test_degree_four_against_degree_one_gives_half():
    edges = [(0, 0), (0, 1), (0, 2), (0, 3)]
    adj = build_normalized_adjacency(1, 4, edges)
    dense = adj.matrix.toarray()
    assert dense[0, 1] == pytest.approx(0.5)


def test_adjacency_matches_dense_oracle():
    rng = np.random.default_rng(5)
    for trial in range(20):
        nu, ni = int(rng.integers(2, 10)), int(rng.integers(2, 10))
        all_pairs = [(u, i) for u in range(nu) for i in range(ni)]
        take = rng.choice(len(all_pairs), size=int(rng.integers(1, len(all_pairs))),
                          replace=False)
        edges = [all_pairs[k] for k in take]
        adj = build_normalized_adjacency(nu, ni, edges)
        np.testing.assert_allclose(adj.matrix.toarray(),
                                   dense_norm_adj(nu, ni, edges), atol=1e-12)


def test_adjacency_symmetric_with_expected_row_sums():
    rng = np.random.default_rng(6)
    g = make_graph(rng, num_users=7, num_items=9, min_degree=3)
    adj = build_normalized_adjacency(7, 9, g.edges)
    mat = adj.matrix
    assert (mat != mat.T).nnz == 0
    deg_u = np.zeros(7)
    deg_i = np.zeros(9)
    for u, i in g.edges:
        deg_u[u] += 1
        deg_i[i] += 1
    for u in range(7):
        expected = sum(1.0 / np.sqrt(deg_u[u] * deg_i[i])
                       for uu, i in g.edges if uu == u)
        assert mat[u].sum() == pytest.approx(expected)


def test_isolated_nodes_have_empty_rows():
    adj = build_normalized_adjacency(3, 3, [(0, 0)])
    dense = adj.matrix.toarray()
    assert not dense[1].any() and not dense[2].any()
    assert not dense[:, 4].any() and not dense[:, 5].any()


def test_neighbor_mean_rows_average_item_rows():
    nb = neighbor_mean_matrix([(0, 0), (0, 2), (1, 1)], 3, 3)
    x = np.arange(9, dtype=float).reshape(3, 3)
    out = nb @ x
    np.testing.assert_allclose(out[0], (x[0] + x[2]) / 2)
    np.testing.assert_allclose(out[1], x[1])
    np.testing.assert_allclose(out[2], 0.0)


def test_graph_invariants_rejected():
    with pytest.raises(DataError):
        InteractionGraph(num_users=1, num_items=1, edges=((0, 5),),
                         modality_features={}, modality_dims={})
    with pytest.raises(DataError):
        InteractionGraph(num_users=2, num_items=2, edges=((0, 0), (0, 0)),
                         modality_features={}, modality_dims={})
