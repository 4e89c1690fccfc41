"""Metrics, experiment sweeps and report files."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .ingest import read_dataset, read_ground_truth
from .models.estimators import ESTIMATORS, WiDAGCNRegressor
from .models.knn import KNNFingerprintRegressor
from .pipeline import GRAPH_KINDS, GraphOptions, fit_preprocessor, prepare
from .synth import SiteConfig, generate_site

log = logging.getLogger(__name__)

MODEL_KINDS = ("knn", "deepnn", "deepsets", "gcn", "wiagcn", "widagcn")
CSV_HEADER = ["model", "floor", "fraction", "repeat", "mean_error_m", "runtime_s", "seed"]
DEFAULT_FRACTIONS = (0.01, 0.05, 0.10, 0.20, 0.30, 0.40)
CDF_QUANTILES = tuple(round(q, 2) for q in np.linspace(0.0, 1.0, 21))
WORKERS_ENV = "WIFILOC_WORKERS"


def mean_error(predictions, ground_truth):
    """Mean Euclidean distance in metres between id-aligned predictions and truth.

    Both arguments are ``{waypoint_id: (x, y)}`` mappings, or equally long arrays.
    """
    if isinstance(predictions, dict) or isinstance(ground_truth, dict):
        if set(predictions) != set(ground_truth):
            missing = set(ground_truth) ^ set(predictions)
            raise ValueError(f"prediction/truth id mismatch ({len(missing)} ids differ)")
        keys = sorted(ground_truth)
        p = np.array([predictions[k] for k in keys], dtype=np.float64).reshape(-1, 2)
        t = np.array([ground_truth[k] for k in keys], dtype=np.float64).reshape(-1, 2)
    else:
        p = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
        t = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
        if p.shape != t.shape:
            raise ValueError("prediction/truth length mismatch")
    if len(t) == 0:
        raise ValueError("no waypoints to score")
    return float(np.mean(np.hypot(*(p - t).T)))


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    ground_truth: str | None = None
    site: dict | None = None
    target_floors: list | None = None
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    models: list = field(default_factory=lambda: list(MODEL_KINDS))
    repeats: int = 10
    seeds: list | None = None
    seed: int = 0
    out_dir: str = "results"
    epochs: int = 250
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 10
    factor: float = 0.5
    hidden: int = 32
    set_hidden: int = 64
    embed_dim: int = 10
    heads: int = 4
    k: int = 50
    knn_k: int = 5
    fanout1: int = 50
    fanout2: int = 5
    n_subgraphs: int = 5
    finetune_mode: str = "all"
    source_holdout: float = 0.1
    alpha0: float = 0.0
    alpha_step: float = 1e-4
    include_target_supervised: bool = True
    val_views: int | None = 1
    d_acc_every: int = 10
    record_runtime: bool = True
    workers: int | None = None

    def __post_init__(self):
        if not self.models:
            raise ValueError("empty model list")
        bad = [m for m in self.models if m not in MODEL_KINDS]
        if bad:
            raise ValueError(f"unknown models {bad}; choose from {list(MODEL_KINDS)}")
        if not self.fractions or any(not 0 < f < 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1)")
        if self.seeds is not None:
            self.repeats = len(self.seeds)
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if (self.dataset is None) == (self.site is None):
            raise ValueError("give exactly one of dataset or site")
        if self.finetune_mode not in ("all", "G", "R"):
            raise ValueError("finetune_mode must be all, G or R")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def seed_for(self, repeat):
        return int(self.seeds[repeat]) if self.seeds is not None else self.seed + repeat

    def graph_options(self):
        return GraphOptions(self.fanout1, self.fanout2, self.n_subgraphs)


@dataclass
class ResultRow:
    model: str
    floor: str
    fraction: float
    repeat: int
    mean_error_m: float
    runtime_s: float
    seed: int
    # per-waypoint errors and training diagnostics; not written to the CSV
    errors: np.ndarray | None = field(default=None, repr=False, compare=False)
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.mean_error_m >= 0:
            raise ValueError("mean_error_m must be non-negative")

    def csv_fields(self):
        return [self.model, self.floor, repr(float(self.fraction)), str(self.repeat),
                repr(float(self.mean_error_m)), repr(float(self.runtime_s)), str(self.seed)]


@dataclass
class Failure:
    model: str
    floor: str
    fraction: float
    repeat: int
    seed: int
    error: str


def load_records(cfg):
    if cfg.site is not None:
        records, _ = generate_site(SiteConfig(**cfg.site))
        return records
    records = read_dataset(cfg.dataset)
    if cfg.ground_truth:
        # fill coordinates for records stored without them
        truth = read_ground_truth(cfg.ground_truth)
        records = [r if r.coord is not None or r.waypoint_id not in truth
                   else replace(r, coord=tuple(truth[r.waypoint_id])) for r in records]
    return records


def _estimator(kind, cfg, n_slots, seed):
    common = dict(n_slots=n_slots, embed_dim=cfg.embed_dim, epochs=cfg.epochs, lr=cfg.lr,
                  batch_size=cfg.batch_size, patience=cfg.patience, factor=cfg.factor,
                  seed=seed, val_views=cfg.val_views, d_acc_every=cfg.d_acc_every)
    if kind in ("deepsets", "deepnn"):
        return ESTIMATORS[kind](hidden=cfg.set_hidden, **common)
    if kind == "widagcn":
        return WiDAGCNRegressor(hidden=cfg.hidden, heads=cfg.heads, alpha0=cfg.alpha0,
                                alpha_step=cfg.alpha_step,
                                include_target_supervised=cfg.include_target_supervised, **common)
    return ESTIMATORS[kind](hidden=cfg.hidden, heads=cfg.heads, **common)


def _balanced_domain_set(parts, kind):
    """Equal-count held-out items per domain for measuring D accuracy."""
    pools = {}
    for name in ("source_val", "val"):
        p = parts[name]
        for it, d in zip(p.items(kind), p.domains):
            pools.setdefault(int(d), []).append(it)
    m = min(len(v) for v in pools.values())
    items, doms = [], []
    for d in sorted(pools):
        items.extend(pools[d][:m])
        doms.extend([d] * m)
    return items, np.array(doms, dtype=np.int64)


def _clock(cfg):
    return time.perf_counter if cfg.record_runtime else (lambda: 0.0)


def run_cell(records, floor, repeat, cfg):
    """All (fraction, model) rows for one target floor and repeat."""
    seed = cfg.seed_for(repeat)
    clock = _clock(cfg)
    rows, failures = [], []
    go = cfg.graph_options()
    pre = fit_preprocessor(records, cfg.k)
    n_slots = pre.ap_index_.n_bssid + 1
    need_graphs = any(m in GRAPH_KINDS for m in cfg.models)
    # source partitions do not depend on the fraction; the largest one is least likely to fail
    base = prepare(records, floor, max(cfg.fractions), seed, pre, graph=go,
                   holdout=cfg.source_holdout, need_graphs=need_graphs, pretraining=True)

    pre_kinds = [m for m in cfg.models if m not in ("knn", "widagcn")]
    if "widagcn" in cfg.models and "wiagcn" not in pre_kinds:
        pre_kinds.append("wiagcn")
    pretrained, pre_time, pre_err = {}, {}, {}
    src, src_val = base.parts["source"], base.parts["source_val"]
    for kind in pre_kinds:
        t0 = clock()
        try:
            est = _estimator(kind, cfg, n_slots, seed)
            est.fit(src.items(kind), src.coords, src_val.items(kind) or None,
                    src_val.coords if len(src_val) else None)
            pretrained[kind] = est
        except Exception as exc:  # recorded against every row of this kind
            log.exception("pretraining %s failed (floor %s, seed %s)", kind, floor, seed)
            pre_err[kind] = f"pretrain: {exc!r}"
        pre_time[kind] = clock() - t0

    for frac in cfg.fractions:
        try:
            data = prepare(records, floor, frac, seed, pre, graph=go, holdout=cfg.source_holdout,
                           need_graphs=need_graphs)
        except Exception as exc:
            failures.extend(Failure(m, floor, frac, repeat, seed, f"split: {exc!r}")
                            for m in cfg.models)
            continue
        P = data.parts
        test = P["test"]
        ids = [r.waypoint_id for r in test.records]
        for kind in cfg.models:
            try:
                base_kind = "wiagcn" if kind == "widagcn" else kind
                if base_kind in pre_err:
                    raise RuntimeError(pre_err[base_kind])
                t0 = clock()
                extra = {}
                tl = P["target_labeled"]
                if kind == "knn":
                    est = KNNFingerprintRegressor(cfg.knn_k, n_slots, pre.missing_value)
                    est.fit(tl.records, tl.coords)
                elif kind == "widagcn":
                    tu, val = P["target_unlabeled"], P["val"]
                    X = P["source"].items(kind) + tl.items(kind) + tu.items(kind)
                    y = np.vstack([P["source"].coords, tl.coords,
                                   np.full((len(tu), 2), np.nan)])
                    doms = np.concatenate([P["source"].domains, tl.domains, tu.domains])
                    dx, dd = _balanced_domain_set(P, kind)
                    init = pretrained["wiagcn"]
                    extra["pretrain_error_m"] = mean_error(init.predict(test.items(kind)),
                                                           test.coords)
                    est = _estimator(kind, cfg, n_slots, seed)
                    est.fit(X, y, doms, data.target_domain, val.items(kind) or None,
                            val.coords if len(val) else None, dx, dd, init=init)
                    extra["d_acc"] = [(h["epoch"], h["d_acc"]) for h in est.history_
                                      if h["d_acc"] is not None]
                    extra["n_domains"] = data.n_domains
                else:
                    est = _estimator(kind, cfg, n_slots, seed).warm_start_from(pretrained[kind])
                    val = P["val"]
                    est.finetune(tl.items(kind), tl.coords, cfg.finetune_mode,
                                 val.items(kind) or None, val.coords if len(val) else None)
                pred = est.predict(test.items(kind))
                err = np.hypot(*(pred - test.coords).T)
                me = mean_error(dict(zip(ids, pred)), dict(zip(ids, test.coords)))
                runtime = clock() - t0 + pre_time.get(base_kind, 0.0)
                rows.append(ResultRow(kind, floor, frac, repeat, me, runtime, seed, err, extra))
            except Exception as exc:
                log.exception("%s failed (floor %s, fraction %s, seed %s)", kind, floor, frac, seed)
                failures.append(Failure(kind, floor, frac, repeat, seed, repr(exc)))
    return rows, failures


def _row_key(cfg):
    order = {m: i for i, m in enumerate(cfg.models)}
    return lambda r: (r.floor, r.fraction, order[r.model], r.repeat)


def _cell_task(args):
    records, floor, repeat, cfg = args
    return run_cell(records, floor, repeat, cfg)


def default_workers():
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def run_experiment(cfg, records=None, return_failures=False):
    """Rows for every (target floor, fraction, model, repeat), in deterministic order."""
    records = records if records is not None else load_records(cfg)
    floors = sorted({r.floor_id for r in records})
    targets = cfg.target_floors or floors
    missing = [f for f in targets if f not in floors]
    if missing:
        raise ValueError(f"target floors {missing} not in dataset")
    tasks = [(records, f, rep, cfg) for f in targets for rep in range(cfg.repeats)]
    workers = min(cfg.workers or default_workers(), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_cell_task, tasks))
    else:
        results = [_cell_task(t) for t in tasks]
    rows = sorted((r for res, _ in results for r in res), key=_row_key(cfg))
    failures = [f for _, fl in results for f in fl]
    return (rows, failures) if return_failures else rows


# -- reports --------------------------------------------------------------------

def read_results_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        return [ResultRow(m, fl, float(fr), int(rep), float(e), float(rt), int(s))
                for m, fl, fr, rep, e, rt, s in reader]


def aggregate(rows):
    """{(model, fraction): mean of mean_error_m} using exactly rounded sums."""
    cells = {}
    for r in rows:
        cells.setdefault((r.model, r.fraction), []).append(r.mean_error_m)
    return {k: math.fsum(v) / len(v) for k, v in cells.items()}


def cdf_points(rows, quantiles=CDF_QUANTILES):
    """{(model, fraction): [(q, error)]}; pooled per-waypoint errors when available."""
    pooled = {}
    for r in rows:
        vals = r.errors if r.errors is not None else [r.mean_error_m]
        pooled.setdefault((r.model, r.fraction), []).extend(np.asarray(vals).tolist())
    return {k: [(q, float(np.quantile(v, q))) for q in quantiles] for k, v in pooled.items()}


def emit_report(rows, out_dir, failures=()):
    """Write results.csv, table.csv, cdf.csv (and failures.csv); returns their paths."""
    rows = list(rows)
    if not rows:
        raise ValueError("no result rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("results", "table", "cdf")}

    with open(paths["results"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())

    agg = aggregate(rows)
    models = list(dict.fromkeys(r.model for r in rows))
    fracs = sorted({r.fraction for r in rows})
    with open(paths["table"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [f"{f:g}" for f in fracs])
        for m in models:
            w.writerow([m] + ["" if (m, f) not in agg else f"{agg[(m, f)]:.4f}" for f in fracs])

    with open(paths["cdf"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fraction", "quantile", "error_m"])
        for (m, f), pts in sorted(cdf_points(rows).items(), key=lambda kv: (models.index(kv[0][0]), kv[0][1])):
            for q, e in pts:
                w.writerow([m, repr(float(f)), f"{q:g}", repr(e)])

    if failures:
        paths["failures"] = out / "failures.csv"
        with open(paths["failures"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f.name for f in fields(Failure)])
            for f in failures:
                w.writerow(list(asdict(f).values()))
    return paths
