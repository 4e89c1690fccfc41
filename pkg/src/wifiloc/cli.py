"""Command line entry point.

Every subcommand accepts ``--config FILE`` (YAML or JSON); keys use the long
flag names with dashes or underscores, and explicit flags override the file.
Exit codes: 0 success, 1 configuration error, 2 some experiment rows failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .evaluate import ExperimentConfig, emit_report, mean_error, read_results_csv, run_experiment
from .graph import cache_key, save_subgraph_cache
from .ingest import (
    RssiPreprocessor,
    parse_traces,
    read_dataset,
    read_stats,
    write_dataset,
    write_ground_truth,
    write_stats,
)
from .models.estimators import ESTIMATORS, WiDAGCNRegressor, _NetRegressor
from .models.knn import KNNFingerprintRegressor
from .pipeline import GRAPH_KINDS, GraphOptions, prepare
from .synth import SiteConfig, generate_site

log = logging.getLogger("wifiloc")


class ConfigError(Exception):
    pass


# defaults per option; None means "required unless given in the config file"
DATA_OPTS = {"data": None, "stats": "", "k": 50, "target_floor": "", "fraction": 0.1,
             "seed": 0, "fanout1": 50, "fanout2": 5, "subgraphs": 5, "holdout": 0.1}
TRAIN_OPTS = {"epochs": 250, "lr": 1e-3, "batch_size": 32, "patience": 10, "factor": 0.5,
              "hidden": 32, "set_hidden": 64, "embed_dim": 10, "heads": 4, "log": ""}
COMMANDS = {
    "synth": {"out": None, **{f: getattr(SiteConfig(), f) for f in SiteConfig.__dataclass_fields__}},
    "ingest": {"inputs": None, "out": None, "stats_out": "", "k": 50},
    "build-graphs": {**DATA_OPTS, "out": None, "pretraining": False},
    "pretrain": {**DATA_OPTS, **TRAIN_OPTS, "model": "wiagcn", "out": None},
    "finetune": {**DATA_OPTS, **TRAIN_OPTS, "checkpoint": None, "mode": "all", "out": None},
    "adapt": {**DATA_OPTS, **TRAIN_OPTS, "checkpoint": "", "out": None, "alpha0": 0.0,
              "alpha_step": 1e-4, "no_target_supervised": False},
    "eval": {**DATA_OPTS, "checkpoint": "", "model": "", "knn_k": 5, "partition": "test",
             "predictions": ""},
    "report": {"experiment": "", "from_csv": "", "out_dir": ""},
    "selftest": {"suite": []},
}
HELP = {
    "synth": "generate a synthetic multi-floor site",
    "ingest": "parse trace files into the canonical dataset",
    "build-graphs": "sample and cache subgraph groups for one split",
    "pretrain": "supervised training on the source floors",
    "finetune": "fine-tune a checkpoint on target labels (mode all, G or R)",
    "adapt": "adversarial domain adaptation (WiDAGCN)",
    "eval": "mean error of a checkpoint (or KNN) on a target partition",
    "report": "run an experiment sweep and write CSV/table/CDF reports",
    "selftest": "run the invariant suites",
}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="wifiloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd, help=HELP[cmd], argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="YAML/JSON file of option values")
        for name, default in opts.items():
            if name == "inputs":
                p.add_argument("inputs", nargs="*", help="trace files or directories")
            elif name == "suite":
                p.add_argument("--suite", action="append", help="suite name (repeatable)")
            elif isinstance(default, bool):
                p.add_argument(_flag(name), action="store_true")
            else:
                kind = type(default) if default is not None else str
                p.add_argument(_flag(name), type=kind if kind in (int, float) else str,
                               help=f"default: {default}" if default not in (None, "") else None)
    return parser


def load_config_file(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve(cmd, ns):
    """Defaults < config file < flags."""
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    from_file = load_config_file(ns.config) if getattr(ns, "config", None) else {}
    opts = COMMANDS[cmd]
    if cmd != "report":
        unknown = set(from_file) - set(opts)
        if unknown:
            raise ConfigError(f"unknown keys for {cmd}: {sorted(unknown)}")
    merged = {**opts, **{k: v for k, v in from_file.items() if k in opts}, **given}
    missing = [k for k, v in merged.items() if v is None]
    if missing:
        raise ConfigError(f"{cmd}: missing required option(s) {', '.join(_flag(m) for m in missing)}")
    merged["_file"] = from_file
    merged["_given"] = set(given) | set(from_file)
    return merged


# -- helpers ------------------------------------------------------------------

def _load_data(o, need_graphs, pretraining=False, preprocessor=None):
    if not o["target_floor"]:
        raise ConfigError("missing required option --target-floor")
    try:
        records = read_dataset(o["data"])
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {o['data']}: {exc}") from exc
    pre = preprocessor
    if pre is None and o.get("stats"):
        pre = read_stats(o["stats"])
    graph = GraphOptions(int(o["fanout1"]), int(o["fanout2"]), int(o["subgraphs"]))
    try:
        return prepare(records, str(o["target_floor"]), float(o["fraction"]), int(o["seed"]),
                       preprocessor=pre, k=int(o["k"]), graph=graph, holdout=float(o["holdout"]),
                       need_graphs=need_graphs, pretraining=pretraining)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _estimator(kind, o, n_slots):
    if kind not in ESTIMATORS:
        raise ConfigError(f"unknown model {kind!r}; choose from {sorted(ESTIMATORS)}")
    common = dict(n_slots=n_slots, embed_dim=int(o["embed_dim"]), epochs=int(o["epochs"]),
                  lr=float(o["lr"]), batch_size=int(o["batch_size"]), patience=int(o["patience"]),
                  factor=float(o["factor"]), seed=int(o["seed"]), log_path=o["log"] or None)
    if kind in ("deepsets", "deepnn"):
        return ESTIMATORS[kind](hidden=int(o["set_hidden"]), **common)
    return ESTIMATORS[kind](hidden=int(o["hidden"]), heads=int(o["heads"]), **common)


def _extra(o, data):
    return {"preprocessor": data.preprocessor.to_json(), "target_floor": str(o["target_floor"]),
            "fraction": float(o["fraction"]), "seed": int(o["seed"]), "k": int(o["k"]),
            "fanout1": int(o["fanout1"]), "fanout2": int(o["fanout2"]),
            "subgraphs": int(o["subgraphs"])}


def _load_checkpoint(o):
    try:
        est = _NetRegressor.load(o["checkpoint"])
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {o['checkpoint']}: {exc}") from exc
    extra = est.checkpoint_meta_.get("extra", {})
    # data options fall back to the values stored with the checkpoint
    for key in ("target_floor", "seed", "k", "fanout1", "fanout2", "subgraphs"):
        if key in extra and key not in o["_given"]:
            o[key] = extra[key]
    pre = RssiPreprocessor.from_json(extra["preprocessor"]) if "preprocessor" in extra else None
    return est, pre


def _apply_train_overrides(est, o):
    for key, attr in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("patience", "patience"), ("factor", "factor")):
        if key in o["_given"]:
            setattr(est, attr, type(getattr(est, attr))(o[key]))
    est.log_path = o["log"] or None


# -- commands -----------------------------------------------------------------

def cmd_synth(o):
    fields = SiteConfig.__dataclass_fields__
    try:
        cfg = SiteConfig(**{f: type(getattr(SiteConfig(), f))(o[f]) for f in fields})
        records, truth = generate_site(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "dataset.jsonl", records)
    write_ground_truth(out / "ground_truth.jsonl", truth)
    (out / "site.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    print(f"wrote {len(records)} records over {cfg.floors} floors to {out}")


def cmd_ingest(o):
    paths = []
    for p in map(Path, o["inputs"] or []):
        if p.is_dir():
            paths.extend(q for q in p.rglob("*.txt"))
        elif p.exists():
            paths.append(p)
        else:
            raise ConfigError(f"no such input {p}")
    if not paths:
        raise ConfigError("ingest: no trace files given")
    try:
        records = parse_traces(paths)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataset(o["out"], records)
    if o["stats_out"]:
        write_stats(o["stats_out"], RssiPreprocessor(k=int(o["k"])).fit(records))
    floors = sorted({r.floor_id for r in records})
    print(f"wrote {len(records)} records ({len(floors)} floors: {', '.join(floors)}) to {o['out']}")


def cmd_build_graphs(o):
    data = _load_data(o, need_graphs=True, pretraining=bool(o["pretraining"]))
    groups = {name: p.groups for name, p in data.parts.items()}
    records = [r for p in data.parts.values() for r in p.records]
    key = cache_key(records, int(o["seed"]), int(o["fanout1"]), int(o["fanout2"]), int(o["subgraphs"]))
    save_subgraph_cache(o["out"], {"key": key, "groups": groups, "extra": _extra(o, data)})
    sizes = [s.n_nodes for p in groups.values() for g in p for s in g]
    print(f"cached {len(sizes)} subgraphs (mean {np.mean(sizes):.1f} nodes) key {key} -> {o['out']}")


def cmd_pretrain(o):
    kind = o["model"]
    if kind == "widagcn":
        raise ConfigError("pretrain the wiagcn model, then run adapt")
    data = _load_data(o, need_graphs=kind in GRAPH_KINDS, pretraining=True)
    src, val = data.parts["source"], data.parts["source_val"]
    est = _estimator(kind, o, data.n_slots)
    est.fit(src.items(kind), src.coords, val.items(kind) or None, val.coords if len(val) else None)
    est.save(o["out"], _extra(o, data))
    err = mean_error(est.predict(val.items(kind)), val.coords) if len(val) else float("nan")
    print(f"pretrained {kind}: best epoch {est.best_epoch_}, source holdout error {err:.3f} m -> {o['out']}")


def cmd_finetune(o):
    est, pre = _load_checkpoint(o)
    kind = est.net_.kind
    if o["mode"] not in ("all", "G", "R"):
        raise ConfigError(f"unknown fine-tuning mode {o['mode']!r}; expected all, G or R")
    data = _load_data(o, need_graphs=kind in GRAPH_KINDS, preprocessor=pre)
    _apply_train_overrides(est, o)
    tl, val = data.parts["target_labeled"], data.parts["val"]
    est.finetune(tl.items(kind), tl.coords, o["mode"], val.items(kind) or None,
                 val.coords if len(val) else None)
    est.save(o["out"], _extra(o, data))
    print(f"fine-tuned {kind} (mode {o['mode']}) on {len(tl)} target labels -> {o['out']}")


def cmd_adapt(o):
    init, pre = (None, None)
    if o["checkpoint"]:
        init, pre = _load_checkpoint(o)
        if init.net_.kind != "wiagcn":
            raise ConfigError("adapt starts from a wiagcn checkpoint")
    data = _load_data(o, need_graphs=True, preprocessor=pre)
    P = data.parts
    kind = "widagcn"
    est = WiDAGCNRegressor(n_slots=data.n_slots, embed_dim=int(o["embed_dim"]), hidden=int(o["hidden"]),
                           heads=int(o["heads"]), epochs=int(o["epochs"]), lr=float(o["lr"]),
                           batch_size=int(o["batch_size"]), patience=int(o["patience"]),
                           factor=float(o["factor"]), seed=int(o["seed"]), log_path=o["log"] or None,
                           alpha0=float(o["alpha0"]), alpha_step=float(o["alpha_step"]),
                           include_target_supervised=not o["no_target_supervised"])
    tl, tu = P["target_labeled"], P["target_unlabeled"]
    X = P["source"].items(kind) + tl.items(kind) + tu.items(kind)
    y = np.vstack([P["source"].coords, tl.coords, np.full((len(tu), 2), np.nan)])
    doms = np.concatenate([P["source"].domains, tl.domains, tu.domains])
    dv = P["source_val"].items(kind) + P["val"].items(kind)
    dd = np.concatenate([P["source_val"].domains, P["val"].domains])
    est.fit(X, y, doms, data.target_domain, P["val"].items(kind) or None,
            P["val"].coords if len(P["val"]) else None, dv, dd, init=init)
    est.save(o["out"], _extra(o, data))
    print(f"adapted over {data.n_domains} domains, best epoch {est.best_epoch_} -> {o['out']}")


def cmd_eval(o):
    if not o["checkpoint"] and o["model"] != "knn":
        raise ConfigError("eval needs --checkpoint (or --model knn)")
    est, pre = _load_checkpoint(o) if o["checkpoint"] else (None, None)
    kind = est.net_.kind if est is not None else "knn"
    data = _load_data(o, need_graphs=kind in GRAPH_KINDS, preprocessor=pre)
    if o["partition"] not in data.parts:
        raise ConfigError(f"unknown partition {o['partition']!r}; choose from {sorted(data.parts)}")
    part = data.parts[o["partition"]]
    if kind == "knn":
        tl = data.parts["target_labeled"]
        est = KNNFingerprintRegressor(int(o["knn_k"]), data.n_slots, data.preprocessor.missing_value)
        est.fit(tl.records, tl.coords)
    pred = est.predict(part.items(kind))
    ids = [r.waypoint_id for r in part.records]
    err = mean_error(dict(zip(ids, pred)), dict(zip(ids, part.coords)))
    if o["predictions"]:
        with open(o["predictions"], "w", encoding="utf-8") as fh:
            fh.write("waypoint_id,x,y\n")
            for wid, (x, y) in zip(ids, pred):
                fh.write(f"{wid},{x!r},{y!r}\n")
    print(json.dumps({"model": kind, "partition": o["partition"], "n": len(ids), "mean_error_m": err}))


def cmd_report(o):
    if o["from_csv"]:
        rows = read_results_csv(o["from_csv"])
        out = o["out_dir"] or str(Path(o["from_csv"]).parent)
        paths = emit_report(rows, out)
        print(f"report from {len(rows)} rows -> {', '.join(map(str, paths.values()))}")
        return 0
    # experiment keys may sit in --config directly or in a separate --experiment file
    file_cfg = {k: v for k, v in o["_file"].items() if k not in ("experiment", "from_csv")}
    if o["experiment"]:
        file_cfg.update(load_config_file(o["experiment"]))
    if o["out_dir"]:
        file_cfg["out_dir"] = o["out_dir"]
    try:
        cfg = ExperimentConfig.from_dict(file_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        rows, failures = run_experiment(cfg, return_failures=True)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not rows:
        print(f"all {len(failures)} rows failed", file=sys.stderr)
        return 2
    paths = emit_report(rows, cfg.out_dir, failures)
    print(f"{len(rows)} rows, {len(failures)} failures -> {cfg.out_dir}")
    for p in paths.values():
        print(f"  {p}")
    return 2 if failures else 0


def cmd_selftest(o):
    from .checks import SUITES, run_selftest

    names = o["suite"] or None
    if names:
        bad = [n for n in names if n not in SUITES]
        if bad:
            raise ConfigError(f"unknown suites {bad}; choose from {sorted(SUITES)}")
    results = run_selftest(names)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:12s} {r.seconds:6.1f}s  {r.detail}")
    return 0 if all(r.ok for r in results) else 2


HANDLERS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "build-graphs": cmd_build_graphs,
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "adapt": cmd_adapt,
    "eval": cmd_eval, "report": cmd_report, "selftest": cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        o = resolve(ns.command, ns)
        code = HANDLERS[ns.command](o)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
