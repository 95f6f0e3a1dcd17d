"""User-centric and item-centric ranking metrics and unlearning property gaps.

User view: per user with a nonempty relevance set, Recall/Precision over
the top-K list, NDCG with binary gains against an ideal prefix of
min(|Rel|, K) slots, and AP normalized by min(|Rel|, K); macro-averaged
over qualifying users.

Item view: per item with a nonempty audience (users holding a relevant
edge), Recall = fraction of the audience whose top-K contains the item,
Precision = hits/K, and rank-discounted variants. Because several users
may place the same item at the same rank, the ideal reference is the
item sitting at rank 1 of every audience member's list (the maximum any
item can achieve), which keeps every value inside [0, 1]:

    NDCG_i@K = sum_hits 1/log2(rank+1) / |Users_i|
    AP_i@K   = sum_hits (1/rank)       / |Users_i|

Entities with empty relevance in a set are excluded from that set's
macro-average.
"""

import json
import math
import re
from dataclasses import dataclass

from .errors import DataError
from .model import topk_matrix

USER_VIEW = "user_centric"
ITEM_VIEW = "item_centric"
METRIC_NAMES = ("recall", "precision", "ndcg", "map")


@dataclass
class EvalReport:
    """Per (edge set, K) metric table for one model under one view."""

    view: str
    sets: dict  # set name -> {K -> {metric -> value}}


@dataclass
class PropertyGaps:
    """Absolute metric gaps between an unlearned model and the gold model."""

    forget: dict  # K -> metric -> gap  (unlearning specificity)
    test: dict  # retention fidelity
    valid: dict  # unlearning generalizability


def _mask_lists(mask, num_users):
    lists = [[] for _ in range(num_users)]
    for u, i in mask:
        lists[u].append(i)
    return [sorted(l) for l in lists]


def _relevance_by_user(eval_edges):
    rel = {}
    for u, i in eval_edges:
        rel.setdefault(u, set()).add(i)
    return rel


def user_metrics(state, eval_edges, k, mask=()):
    """Macro-averaged (recall, precision, ndcg, map) over qualifying users."""
    if k < 1:
        raise ValueError("K must be >= 1")
    rel = _relevance_by_user(eval_edges)
    if not rel:
        raise DataError("no qualifying user in evaluation set")
    n_users = state.user_final.shape[0]
    masks = _mask_lists(mask, n_users)
    tops = topk_matrix(state, k, mask_lists=masks, user_subset=sorted(rel))
    recalls, precs, ndcgs, aps = [], [], [], []
    for u in sorted(rel):
        r, p, n, a = _single_user(tops[u], rel[u], k)
        recalls.append(r)
        precs.append(p)
        ndcgs.append(n)
        aps.append(a)
    cnt = len(recalls)
    return (sum(recalls) / cnt, sum(precs) / cnt, sum(ndcgs) / cnt, sum(aps) / cnt)


def _single_user(topk, rel_set, k):
    hits = 0
    dcg = 0.0
    ap = 0.0
    for pos, item in enumerate(topk):
        if item in rel_set:
            hits += 1
            dcg += 1.0 / math.log2(pos + 2)
            ap += hits / (pos + 1)
    m = len(rel_set)
    idcg = 0.0
    for pos in range(min(m, k)):
        idcg += 1.0 / math.log2(pos + 2)
    recall = hits / m
    precision = hits / k
    ndcg = dcg / idcg
    ap = ap / min(m, k)
    return recall, precision, ndcg, ap


def item_metrics(state, eval_edges, k, mask=()):
    """Macro-averaged (recall, precision, ndcg, map) over qualifying items."""
    if k < 1:
        raise ValueError("K must be >= 1")
    audience = {}
    for u, i in eval_edges:
        audience.setdefault(i, set()).add(u)
    if not audience:
        raise DataError("no qualifying item in evaluation set")
    n_users = state.user_final.shape[0]
    masks = _mask_lists(mask, n_users)
    users_needed = sorted({u for us in audience.values() for u in us})
    tops = topk_matrix(state, k, mask_lists=masks, user_subset=users_needed)
    rank_of = {u: {item: pos + 1 for pos, item in enumerate(tops[u])} for u in users_needed}
    recalls, precs, ndcgs, aps = [], [], [], []
    for i in sorted(audience):
        users = audience[i]
        m = len(users)
        hits = 0
        dcg = 0.0
        rr = 0.0
        for u in sorted(users):
            rank = rank_of[u].get(i)
            if rank is not None:
                hits += 1
                dcg += 1.0 / math.log2(rank + 1)
                rr += 1.0 / rank
        recalls.append(hits / m)
        precs.append(hits / k)
        ndcgs.append(dcg / m)
        aps.append(rr / m)
    cnt = len(recalls)
    return (sum(recalls) / cnt, sum(precs) / cnt, sum(ndcgs) / cnt, sum(aps) / cnt)


def evaluate(state, split, partition=None, ks=(5, 10, 20, 50), view=USER_VIEW):
    """Metric table on valid, test, and (when a partition exists) forget sets.

    Retained train edges are masked out of every candidate list; without a
    partition the whole train set is masked.
    """
    if not ks:
        raise DataError("no K values requested")
    fn = {USER_VIEW: user_metrics, ITEM_VIEW: item_metrics}.get(view)
    if fn is None:
        raise DataError(f"unknown view {view!r}")
    mask = partition.retain if partition is not None else split.train
    sets = {"valid": split.valid, "test": split.test}
    if partition is not None:
        sets["forget"] = partition.forget
    out = {}
    for name, edges in sets.items():
        if not edges:
            raise DataError(f"no qualifying entries in evaluation set '{name}'")
        out[name] = {}
        for k in ks:
            r, p, n, a = fn(state, edges, k, mask)
            out[name][int(k)] = {"recall": r, "precision": p, "ndcg": n, "map": a}
    return EvalReport(view=view, sets=out)


def property_gaps(unlearned, gold):
    """Absolute per-metric gaps |unlearned - gold| on matching sets and Ks."""
    if unlearned.view != gold.view:
        raise DataError("reports use different views")
    if set(unlearned.sets) != set(gold.sets):
        raise DataError("reports cover different edge sets")
    gaps = {}
    for name in unlearned.sets:
        a, b = unlearned.sets[name], gold.sets[name]
        if set(a) != set(b):
            raise DataError(f"reports cover different Ks on set '{name}'")
        gaps[name] = {
            k: {m: abs(a[k][m] - b[k][m]) for m in METRIC_NAMES} for k in a
        }
    return PropertyGaps(
        forget=gaps.get("forget", {}),
        test=gaps.get("test", {}),
        valid=gaps.get("valid", {}),
    )


def _format_tree(tree):
    if isinstance(tree, dict):
        return {str(k): _format_tree(v) for k, v in tree.items()}
    return f"{tree:.6f}"


def _dumps_fixed(obj):
    """JSON text with metric values as fixed 6-decimal numbers."""
    text = json.dumps(obj, indent=2, sort_keys=True)
    # formatted values were stored as strings; strip the quotes so they
    # parse back as numbers
    return re.sub(r'"(-?\d+\.\d{6})"', r"\1", text)


def report_to_json(report):
    return _dumps_fixed({"view": report.view, "sets": _format_tree(report.sets)})


def report_from_json(text):
    raw = json.loads(text)
    sets = {
        name: {int(k): {m: float(v) for m, v in row.items()} for k, row in table.items()}
        for name, table in raw["sets"].items()
    }
    return EvalReport(view=raw["view"], sets=sets)


def gaps_to_json(gaps):
    payload = {
        "forget": _format_tree(gaps.forget),
        "test": _format_tree(gaps.test),
        "valid": _format_tree(gaps.valid),
    }
    return _dumps_fixed(payload)
