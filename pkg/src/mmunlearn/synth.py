"""Planted-cluster synthetic datasets at desk scale.

Users and items are assigned to latent groups; within-group interaction
probability is ten times the cross-group one, scaled to hit the target
density. Modality features are noisy copies of per-group centers so the
recommendation signal (and therefore unlearning effects) is measurable.
Output uses the same CSV + MMFT formats the ingestion path reads, with
item indices relabeled so that re-ingesting the files reproduces the
in-memory graph exactly.
"""

import csv
import json
import os

import numpy as np

from .errors import ConfigError
from .graph import InteractionGraph, write_mmft
from .seeding import stream_rng

WITHIN_FACTOR = 10.0


def generate_synthetic(num_users, num_items, num_modalities, density, seed,
                       num_groups=5, feature_dims=None, feature_noise=0.25,
                       popularity=0.0):
    """Build a synthetic InteractionGraph plus generation metadata.

    Edge counts match `density * num_users * num_items` in expectation.
    `popularity` > 0 skews per-item interaction rates toward a long-tail
    profile (rate proportional to rank^-popularity) while keeping the
    within/cross group ratio and the expected density unchanged.
    Raises ConfigError when the implied within-group probability exceeds 1.
    """
    if not 0.0 < density <= 1.0:
        raise ConfigError("density must lie in (0, 1]")
    if num_users < num_groups or num_items < num_groups:
        raise ConfigError("need at least one user and item per group")
    if feature_dims is None:
        feature_dims = [16 if k % 2 == 0 else 8 for k in range(num_modalities)]
    if len(feature_dims) != num_modalities:
        raise ConfigError("feature_dims length must match num_modalities")
    rng = stream_rng(seed, "synth")

    user_group = rng.integers(0, num_groups, size=num_users)
    item_group = rng.integers(0, num_groups, size=num_items)
    # per-item rate multipliers, mean 1 so the density target is unchanged
    ranks = rng.permutation(num_items) + 1
    weights = ranks.astype(np.float64) ** -popularity
    weights *= num_items / weights.sum()

    # solve for the cross-group probability hitting the target density
    within_pairs = sum(
        float(weights[item_group == g].sum()) * int((user_group == g).sum())
        for g in range(num_groups)
    )
    total_pairs = float(weights.sum()) * num_users
    cross_pairs = total_pairs - within_pairs
    target_edges = density * num_users * num_items
    q = target_edges / (WITHIN_FACTOR * within_pairs + cross_pairs)
    if WITHIN_FACTOR * q * weights.max() > 1.0:
        raise ConfigError(f"density {density} infeasible for {num_groups} groups")

    edges = set()
    for g_u in range(num_groups):
        users_g = np.flatnonzero(user_group == g_u)
        if len(users_g) == 0:
            continue
        for g_i in range(num_groups):
            items_g = np.flatnonzero(item_group == g_i)
            base = WITHIN_FACTOR * q if g_u == g_i else q
            for i in items_g:
                p = base * weights[i]
                count = rng.binomial(len(users_g), p)
                if count == 0:
                    continue
                chosen = rng.choice(users_g, size=count, replace=False)
                for u in chosen:
                    edges.add((int(u), int(i)))

    # drop edge-less users/items and relabel densely
    used_users = sorted({u for u, _ in edges})
    used_items_rows = sorted(edges)
    u_map = {u: k for k, u in enumerate(used_users)}
    # item relabeling follows first appearance in the row order written to
    # the CSV, so ingestion reassigns identical indices
    i_map = {}
    for _, i in used_items_rows:
        if i not in i_map:
            i_map[i] = len(i_map)
    final_edges = [(u_map[u], i_map[i]) for u, i in used_items_rows]
    n_users, n_items = len(u_map), len(i_map)

    inv_items = sorted(i_map, key=i_map.get)  # new index -> original index
    centers = {}
    feats, dims = {}, {}
    for k in range(num_modalities):
        name = f"m{k}"
        d_m = feature_dims[k]
        centers[name] = rng.normal(0.0, 1.0, size=(num_groups, d_m))
        noise = rng.normal(0.0, feature_noise, size=(n_items, d_m))
        group_rows = item_group[inv_items]
        feats[name] = centers[name][group_rows] + noise
        dims[name] = d_m

    graph = InteractionGraph(
        num_users=n_users,
        num_items=n_items,
        edges=tuple(sorted(final_edges)),
        modality_features=feats,
        modality_dims=dims,
        user_ids=tuple(f"u{k:05d}" for k in range(n_users)),
        item_ids=tuple(f"i{k:05d}" for k in range(n_items)),
    )
    meta = {
        "num_users": n_users,
        "num_items": n_items,
        "num_edges": len(final_edges),
        "num_groups": num_groups,
        "density_target": density,
        "seed": seed,
        "user_group": [int(user_group[u]) for u in used_users],
        "item_group": [int(item_group[i]) for i in inv_items],
        "row_order": final_edges,
    }
    return graph, meta


def write_dataset(graph, meta, out_dir):
    """Write interactions.csv, per-modality MMFT files, and a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "interactions.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id"])
        for u, i in meta["row_order"]:
            writer.writerow([graph.user_ids[u], graph.item_ids[i]])
    feature_files = {}
    for m in sorted(graph.modality_features):
        fpath = os.path.join(out_dir, f"features_{m}.mmft")
        write_mmft(fpath, graph.modality_features[m])
        feature_files[m] = os.path.basename(fpath)
    manifest = {
        "interactions": os.path.basename(csv_path),
        "features": feature_files,
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "num_edges": len(graph.edges),
        "num_groups": meta["num_groups"],
        "density_target": meta["density_target"],
        "seed": meta["seed"],
        "user_ids": list(graph.user_ids),
        "item_ids": list(graph.item_ids),
        "user_group": meta["user_group"],
        "item_group": meta["item_group"],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path
