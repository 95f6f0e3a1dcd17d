"""Command-line entry point: synth, train, gold, unlearn, evaluate, report.

Experiments are described by a key=value config file; a few common flags
(--seed, --threads, --out) override the corresponding keys. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import json
import os
import sys

from .errors import ConfigError, DataError, NumericError
from .graph import load_forget_spec, load_interactions, mark_forget, split_dataset
from .metrics import (ITEM_VIEW, USER_VIEW, evaluate, gaps_to_json, property_gaps,
                      report_from_json, report_to_json)
from .model import HyperParams, compute_state, load_checkpoint, save_checkpoint
from .synth import generate_synthetic, write_dataset
from .unlearn import (TrainConfig, retrain_gold, train, unlearn_amun,
                      unlearn_mmrecun, _Context)

_INT_KEYS = {"seed", "threads", "users", "items", "modalities", "groups",
             "d", "layers", "batch_size", "max_epochs", "patience", "neg_per_pos"}
_FLOAT_KEYS = {"lr", "lambda_c", "lambda_phi", "tau", "alpha", "density",
               "feature_noise"}
_STR_KEYS = {"interactions", "forget_spec", "checkpoint", "gold_checkpoint",
             "method", "view", "eval_adjacency", "out"}
_LIST_KEYS = {"topk", "item_topk"}

_HYPER_KEYS = {"d", "lr", "lambda_c", "lambda_phi", "tau", "alpha", "layers",
               "batch_size", "max_epochs", "patience", "neg_per_pos"}


class ExperimentConfig:
    """Typed view over a key=value config file; unknown keys are rejected."""

    def __init__(self, values, base_dir="."):
        self.values = values
        self.base_dir = base_dir

    @classmethod
    def parse(cls, text, base_dir="."):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = cls._convert(key, val, lineno)
        return cls(values, base_dir)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))

    @staticmethod
    def _convert(key, val, lineno):
        try:
            if key in _INT_KEYS:
                return int(val)
            if key in _FLOAT_KEYS:
                return float(val)
            if key in _LIST_KEYS:
                return tuple(int(part) for part in val.split(",") if part.strip())
            if key in _STR_KEYS or key.startswith("feature."):
                return val
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {val!r}")
        raise ConfigError(f"line {lineno}: unknown config key {key!r}")

    def serialize(self):
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigError(f"missing required config key {key!r}")
        return self.values[key]

    def path(self, key, required=True):
        val = self.require(key) if required else self.get(key)
        if val is None:
            return None
        return val if os.path.isabs(val) else os.path.join(self.base_dir, val)

    def feature_paths(self):
        out = {}
        for key, val in self.values.items():
            if key.startswith("feature."):
                mod = key.split(".", 1)[1]
                out[mod] = val if os.path.isabs(val) else os.path.join(self.base_dir, val)
        return out

    def hyper(self):
        kwargs = {k: self.values[k] for k in _HYPER_KEYS if k in self.values}
        if "topk" in self.values:
            kwargs["topk_list"] = self.values["topk"]
        return HyperParams(**kwargs)


def _ensure_out(args):
    out = args.out
    if out is None:
        raise ConfigError("an output directory is required (--out or config 'out')")
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    if args.threads is not None:
        cfg.values["threads"] = args.threads
    if args.out is None:
        args.out = cfg.get("out")
    return cfg


def _load_graph(cfg):
    return load_interactions(cfg.path("interactions"), cfg.feature_paths())


def _load_partition(cfg, graph, split):
    spec_path = cfg.path("forget_spec", required=False)
    if spec_path is None:
        return None
    spec = load_forget_spec(spec_path, graph)
    return mark_forget(split, spec)


def _write_run(out, result, seed, extra=None):
    payload = {
        "mode": result.mode,
        "seed": seed,
        "epochs_run": result.epochs_run,
        "wall_time_sec": result.wall_time,
        "best_epoch": result.best_epoch,
        "best_valid_recall": result.best_valid_recall,
        "stop_reason": result.stop_reason,
    }
    payload.update(extra or {})
    with open(os.path.join(out, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args):
    cfg = _load_config(args)
    out = _ensure_out(args)
    seed = cfg.get("seed", 0)
    graph, meta = generate_synthetic(
        num_users=cfg.require("users"),
        num_items=cfg.require("items"),
        num_modalities=cfg.require("modalities"),
        density=cfg.require("density"),
        seed=seed,
        num_groups=cfg.get("groups", 5),
        feature_noise=cfg.get("feature_noise", 0.25),
    )
    write_dataset(graph, meta, out)
    print(f"synth: {graph.num_users} users, {graph.num_items} items, "
          f"{len(graph.edges)} edges -> {out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    out = _ensure_out(args)
    seed = cfg.get("seed", 0)
    graph = _load_graph(cfg)
    split = split_dataset(graph, seed)
    config = TrainConfig(hyper=cfg.hyper(), seed=seed, mode="train")
    result = train(graph, split, config)
    save_checkpoint(os.path.join(out, "model.mmck"), result.params)
    _write_run(out, result, seed)
    print(f"train: {result.epochs_run} epochs, best valid Recall@20 "
          f"{result.best_valid_recall:.4f} -> {out}")
    return 0


def cmd_gold(args):
    cfg = _load_config(args)
    out = _ensure_out(args)
    seed = cfg.get("seed", 0)
    graph = _load_graph(cfg)
    split = split_dataset(graph, seed)
    partition = _load_partition(cfg, graph, split)
    if partition is None:
        raise ConfigError("gold retraining requires a forget_spec")
    config = TrainConfig(hyper=cfg.hyper(), seed=seed, mode="gold")
    result = retrain_gold(graph, split, partition, config)
    save_checkpoint(os.path.join(out, "model.mmck"), result.params)
    _write_run(out, result, seed, extra={"forget_edges": len(partition.forget)})
    print(f"gold: {result.epochs_run} epochs, best valid Recall@20 "
          f"{result.best_valid_recall:.4f} -> {out}")
    return 0


def cmd_unlearn(args):
    cfg = _load_config(args)
    out = _ensure_out(args)
    seed = cfg.get("seed", 0)
    method = args.method or cfg.get("method")
    if method not in ("mmrecun", "amun"):
        raise ConfigError("unlearn requires --method mmrecun or amun")
    graph = _load_graph(cfg)
    split = split_dataset(graph, seed)
    partition = _load_partition(cfg, graph, split)
    if partition is None:
        raise ConfigError("unlearning requires a forget_spec")
    initial = load_checkpoint(cfg.path("checkpoint"))
    config = TrainConfig(hyper=cfg.hyper(), seed=seed, mode=method)
    if method == "mmrecun":
        ref_path = cfg.path("gold_checkpoint", required=False)
        reference = load_checkpoint(ref_path) if ref_path else None
        result = unlearn_mmrecun(graph, split, partition, initial, config,
                                 reference=reference)
    else:
        result = unlearn_amun(graph, split, partition, initial, config)
    save_checkpoint(os.path.join(out, "model.mmck"), result.params)
    _write_run(out, result, seed, extra={
        "method": method,
        "alpha": config.hyper.alpha,
        "forget_edges": len(partition.forget),
    })
    if result.divergence_curve:
        with open(os.path.join(out, "divergence.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "beta"])
            for epoch, beta in result.divergence_curve:
                writer.writerow([epoch, repr(beta)])
    print(f"unlearn[{method}]: {result.epochs_run} epochs -> {out}")
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args)
    out = _ensure_out(args)
    seed = cfg.get("seed", 0)
    graph = _load_graph(cfg)
    split = split_dataset(graph, seed)
    partition = _load_partition(cfg, graph, split)
    params = load_checkpoint(cfg.path("checkpoint"))
    if params.num_users != graph.num_users or params.num_items != graph.num_items:
        raise DataError("checkpoint node counts do not match the dataset")
    hyper = cfg.hyper()
    mode = cfg.get("eval_adjacency", "retain" if partition is not None else "train")
    if mode == "retain" and partition is not None:
        edges = partition.retain
    elif mode in ("train", "retain"):
        edges = split.train
    else:
        raise ConfigError(f"eval_adjacency must be train or retain, got {mode!r}")
    ctx = _Context(graph, edges)
    state = ctx.state(params, hyper.layers)

    view = cfg.get("view", "user")
    if view not in ("user", "item", "both"):
        raise ConfigError(f"view must be user, item, or both, got {view!r}")
    views = {"user": [USER_VIEW], "item": [ITEM_VIEW],
             "both": [USER_VIEW, ITEM_VIEW]}[view]
    gold_path = cfg.path("gold_checkpoint", required=False)
    gold_state = None
    if gold_path:
        gold_params = load_checkpoint(gold_path)
        if gold_params.num_users != graph.num_users:
            raise DataError("gold checkpoint node counts do not match the dataset")
        gold_state = ctx.state(gold_params, hyper.layers)

    written = []
    for v in views:
        ks = cfg.get("topk", (5, 10, 20, 50)) if v == USER_VIEW \
            else cfg.get("item_topk", (500, 1000, 1500))
        ks = tuple(k for k in ks if k >= 1)
        report = evaluate(state, split, partition, ks=ks, view=v)
        suffix = "user" if v == USER_VIEW else "item"
        path = os.path.join(out, f"report_{suffix}.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report_to_json(report) + "\n")
        written.append(path)
        if gold_state is not None:
            gold_report = evaluate(gold_state, split, partition, ks=ks, view=v)
            gaps = property_gaps(report, gold_report)
            gpath = os.path.join(out, f"gaps_{suffix}.json")
            with open(gpath, "w", encoding="utf-8") as fh:
                fh.write(gaps_to_json(gaps) + "\n")
            written.append(gpath)
    print("evaluate: wrote " + ", ".join(os.path.basename(p) for p in written))
    return 0


def cmd_report(args):
    if not args.run_dirs:
        raise ConfigError("report needs at least one run directory")
    out = _ensure_out(args)
    rows = []
    timing = []
    for run_dir in args.run_dirs:
        if not os.path.isdir(run_dir):
            raise DataError(f"{run_dir}: not a directory")
        label = os.path.basename(os.path.normpath(run_dir))
        run_path = os.path.join(run_dir, "run.json")
        if os.path.exists(run_path):
            with open(run_path, encoding="utf-8") as fh:
                run = json.load(fh)
            label = run.get("method", run.get("mode", label))
            timing.append((label, run.get("wall_time_sec"), run.get("epochs_run")))
        found = False
        for suffix in ("user", "item"):
            rpath = os.path.join(run_dir, f"report_{suffix}.json")
            if not os.path.exists(rpath):
                continue
            found = True
            with open(rpath, encoding="utf-8") as fh:
                report = report_from_json(fh.read())
            for set_name in sorted(report.sets):
                for k in sorted(report.sets[set_name]):
                    for metric, value in sorted(report.sets[set_name][k].items()):
                        rows.append((label, report.view, set_name, k, metric, value))
        if not found and not os.path.exists(run_path):
            raise DataError(f"{run_dir}: no run.json or report_*.json found")
    with open(os.path.join(out, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "view", "set", "K", "metric", "value"])
        writer.writerows(rows)
    with open(os.path.join(out, "timing.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "wall_time_sec", "epochs_run"])
        writer.writerows(timing)
    print(f"report: {len(rows)} metric rows, {len(timing)} timing rows -> {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmunlearn",
        description="Train, unlearn, and evaluate multi-modal graph recommenders.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    common(sub.add_parser("train", help="train on the full train split"))
    common(sub.add_parser("gold", help="retrain from scratch on the retain set"))
    p_unlearn = sub.add_parser("unlearn", help="unlearn a trained checkpoint")
    p_unlearn.add_argument("--method", choices=["mmrecun", "amun"], default=None)
    common(p_unlearn)
    common(sub.add_parser("evaluate", help="emit metric reports for a checkpoint"))
    p_report = sub.add_parser("report", help="consolidate run dirs into CSV tables")
    p_report.add_argument("run_dirs", nargs="*")
    p_report.add_argument("--out", default=None)
    return parser


_DISPATCH = {
    "synth": cmd_synth,
    "train": cmd_train,
    "gold": cmd_gold,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())
