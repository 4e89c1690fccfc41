"""Fingerprint records, trace parsing, preprocessing and domain splits."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

RSSI_MIN, RSSI_MAX = -100, 0


@dataclass(frozen=True)
class FingerprintRecord:
    waypoint_id: str
    coord: tuple | None
    floor_id: str
    readings: tuple
    timestamp: int | None = None

    def __post_init__(self):
        if not self.readings:
            raise ValueError(f"record {self.waypoint_id}: empty readings")
        best = {}
        for bssid, rssi in self.readings:
            rssi = int(rssi)
            if not RSSI_MIN <= rssi <= RSSI_MAX:
                raise ValueError(f"record {self.waypoint_id}: rssi {rssi} outside [-100, 0]")
            if bssid not in best or rssi > best[bssid]:
                best[bssid] = rssi
        object.__setattr__(self, "readings", tuple(best.items()))
        if self.coord is not None:
            x, y = (float(c) for c in self.coord)
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError(f"record {self.waypoint_id}: non-finite coordinate")
            object.__setattr__(self, "coord", (x, y))

    @property
    def labeled(self):
        return self.coord is not None

    def without_label(self):
        return FingerprintRecord(self.waypoint_id, None, self.floor_id, self.readings, self.timestamp)

    def to_json(self):
        return {
            "waypoint_id": self.waypoint_id,
            "coord": list(self.coord) if self.coord is not None else None,
            "floor_id": self.floor_id,
            "readings": [[b, r] for b, r in self.readings],
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj):
        coord = obj.get("coord")
        return cls(
            waypoint_id=str(obj["waypoint_id"]),
            coord=tuple(coord) if coord is not None else None,
            floor_id=str(obj["floor_id"]),
            readings=tuple((str(b), int(r)) for b, r in obj["readings"]),
            timestamp=obj.get("timestamp"),
        )


@dataclass
class ApIndex:
    """bssid -> contiguous index starting at 1; 0 is reserved for unknown bssids."""

    mapping: dict = field(default_factory=dict)

    @classmethod
    def build(cls, bssids):
        return cls({b: i + 1 for i, b in enumerate(sorted(set(bssids)))})

    @property
    def n_bssid(self):
        return len(self.mapping)

    def lookup(self, bssid):
        return self.mapping.get(bssid, 0)

    def __len__(self):
        return len(self.mapping)


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("degenerate RSSI distribution: sigma must be positive")

    def standardize(self, rssi):
        return (np.asarray(rssi, dtype=np.float64) - self.mu) / self.sigma

    def restore(self, z):
        return np.asarray(z, dtype=np.float64) * self.sigma + self.mu


@dataclass(frozen=True, eq=False)
class ProcessedRecord:
    """A record after top-k filtering, standardization and bssid indexing.

    Readings are ordered strongest first (ties by ascending bssid).
    """

    waypoint_id: str
    coord: tuple | None
    floor_id: str
    bssids: tuple
    index: np.ndarray
    z: np.ndarray
    timestamp: int | None = None

    @property
    def labeled(self):
        return self.coord is not None

    def __len__(self):
        return len(self.bssids)

    def without_label(self):
        return ProcessedRecord(self.waypoint_id, None, self.floor_id, self.bssids,
                               self.index, self.z, self.timestamp)

    def permuted(self, order):
        order = np.asarray(order)
        return ProcessedRecord(self.waypoint_id, self.coord, self.floor_id,
                               tuple(self.bssids[i] for i in order),
                               self.index[order], self.z[order], self.timestamp)


def top_k_readings(readings, k):
    """The ``k`` strongest (bssid, rssi) pairs, ties broken by ascending bssid."""
    return sorted(readings, key=lambda br: (-br[1], br[0]))[:k]


class RssiPreprocessor(TransformerMixin, BaseEstimator):
    """Keep the ``k`` strongest readings, z-score RSSI and index bssids.

    Statistics and the bssid index come from ``fit`` data only.
    """

    def __init__(self, k=50):
        self.k = k

    def fit(self, records, y=None):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        records = list(records)
        if not records:
            raise ValueError("preprocess needs at least one record")
        kept = [top_k_readings(r.readings, self.k) for r in records]
        values = np.array([rssi for rd in kept for _, rssi in rd], dtype=np.float64)
        sigma = float(values.std())
        if sigma == 0.0:
            raise ValueError("degenerate RSSI distribution: all readings are equal")
        self.norm_stats_ = NormStats(float(values.mean()), sigma)
        self.ap_index_ = ApIndex.build(b for rd in kept for b, _ in rd)
        z = self.norm_stats_.standardize(values)
        self.z_range_ = (float(z.min()), float(z.max()))
        return self

    def transform(self, records):
        check_is_fitted(self, "norm_stats_")
        out = []
        for r in records:
            rd = top_k_readings(r.readings, self.k)
            bssids = tuple(b for b, _ in rd)
            out.append(ProcessedRecord(
                waypoint_id=r.waypoint_id,
                coord=r.coord,
                floor_id=r.floor_id,
                bssids=bssids,
                index=np.array([self.ap_index_.lookup(b) for b in bssids], dtype=np.int64),
                z=self.norm_stats_.standardize([v for _, v in rd]),
                timestamp=r.timestamp,
            ))
        return out

    @property
    def missing_value(self):
        """Standardized value of the weakest possible reading (-100 dBm)."""
        return float(self.norm_stats_.standardize(RSSI_MIN))

    def to_json(self):
        check_is_fitted(self, "norm_stats_")
        return {
            "k": self.k,
            "mu": self.norm_stats_.mu,
            "sigma": self.norm_stats_.sigma,
            "z_min": self.z_range_[0],
            "z_max": self.z_range_[1],
            "bssid_index": self.ap_index_.mapping,
        }

    @classmethod
    def from_json(cls, obj):
        pre = cls(k=int(obj["k"]))
        pre.norm_stats_ = NormStats(float(obj["mu"]), float(obj["sigma"]))
        pre.ap_index_ = ApIndex({str(k): int(v) for k, v in obj["bssid_index"].items()})
        pre.z_range_ = (float(obj["z_min"]), float(obj["z_max"]))
        return pre


def preprocess(records, k=50, fit_records=None):
    """Filter, standardize and index ``records``; statistics come from ``fit_records``
    (defaults to ``records``).  Returns ``(records', ap_index, norm_stats)``."""
    pre = RssiPreprocessor(k=k).fit(records if fit_records is None else fit_records)
    return pre.transform(records), pre.ap_index_, pre.norm_stats_


# -- trace files ------------------------------------------------------------

_FLOOR_RE = re.compile(r"FloorName:([^\t\s]+)")


def _floor_for(path, header_floor):
    meta = path.with_name(path.name + ".meta.json")
    if meta.exists():
        return str(json.loads(meta.read_text())["floor_id"])
    if header_floor:
        return header_floor
    return path.parent.name


def parse_trace_file(path):
    path = Path(path)
    waypoints = []
    bursts = {}
    header_floor = None
    n_valid = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                m = _FLOOR_RE.search(line)
                if m:
                    header_floor = m.group(1)
                continue
            parts = line.split("\t")
            try:
                kind = parts[1]
                if kind == "TYPE_WAYPOINT":
                    waypoints.append((int(parts[0]), float(parts[2]), float(parts[3])))
                elif kind == "TYPE_WIFI":
                    rssi = int(float(parts[4]))
                    if not RSSI_MIN <= rssi <= RSSI_MAX:
                        raise ValueError(f"rssi {rssi} out of range")
                    bssid = parts[3]
                    if not bssid:
                        raise ValueError("empty bssid")
                    burst = bursts.setdefault(int(parts[0]), {})
                    if bssid not in burst or rssi > burst[bssid]:
                        burst[bssid] = rssi
                else:
                    continue
                n_valid += 1
            except (IndexError, ValueError) as exc:
                log.warning("%s:%d: skipping malformed line (%s)", path, lineno, exc)
    if n_valid == 0:
        raise ValueError(f"{path}: no valid WAYPOINT or WIFI rows")
    floor = _floor_for(path, header_floor)
    wp = np.array(waypoints, dtype=np.float64).reshape(-1, 3)
    records = []
    for ts in sorted(bursts):
        coord = None
        if len(wp):
            j = int(np.argmin(np.abs(wp[:, 0] - ts)))
            coord = (float(wp[j, 1]), float(wp[j, 2]))
        records.append(FingerprintRecord(
            waypoint_id=f"{path.stem}:{ts}",
            coord=coord,
            floor_id=floor,
            readings=tuple(sorted(bursts[ts].items())),
            timestamp=ts,
        ))
    return records


def parse_traces(paths):
    """Parse trace TSV files in sorted path order."""
    records = []
    for p in sorted(str(p) for p in paths):
        records.extend(parse_trace_file(p))
    return records


# -- canonical files --------------------------------------------------------

def write_dataset(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return [FingerprintRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_ground_truth(path, truth):
    with open(path, "w", encoding="utf-8") as fh:
        for wid in sorted(truth):
            x, y = truth[wid]
            fh.write(json.dumps({"waypoint_id": wid, "coord": [x, y]}) + "\n")


def read_ground_truth(path):
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return {r["waypoint_id"]: tuple(r["coord"]) for r in rows}


def write_stats(path, preprocessor):
    Path(path).write_text(json.dumps(preprocessor.to_json(), sort_keys=True, indent=1))


def read_stats(path):
    return RssiPreprocessor.from_json(json.loads(Path(path).read_text()))


# -- domain split -----------------------------------------------------------

@dataclass
class DomainSplit:
    sources: dict
    target_floor: str
    target_labeled: list
    target_unlabeled_train: list
    target_val: list
    target_test: list
    truth: dict
    label_fraction: float
    seed: int

    @property
    def source_floors(self):
        return list(self.sources)

    def target_records(self):
        return self.target_labeled + self.target_unlabeled_train + self.target_val + self.target_test

    def all_records(self):
        out = [r for floor in self.sources for r in self.sources[floor]]
        return out + self.target_records()


def group_by_floor(records):
    floors = {}
    for r in records:
        floors.setdefault(r.floor_id, []).append(r)
    return {f: floors[f] for f in sorted(floors)}


def split_domains(records_by_floor, target_floor, label_fraction, seed):
    """Sources are the other floors' labeled records; the target floor's labeled
    records are split into a labeled fraction and 2:8 val/test with hidden labels.
    Target records that never had a label form the unlabeled training pool.

    For a fixed seed the labeled set grows monotonically with ``label_fraction``.
    """
    if len(records_by_floor) < 2:
        raise ValueError("need at least two floors")
    if target_floor not in records_by_floor:
        raise KeyError(f"target floor {target_floor!r} not present")
    if not 0 < label_fraction < 1:
        raise ValueError("label_fraction must be in (0, 1)")
    sources = {
        f: sorted((r for r in recs if r.labeled), key=lambda r: r.waypoint_id)
        for f, recs in records_by_floor.items() if f != target_floor
    }
    target = sorted(records_by_floor[target_floor], key=lambda r: r.waypoint_id)
    labeled = [r for r in target if r.labeled]
    crowd = [r for r in target if not r.labeled]
    n_lab = int(round(label_fraction * len(labeled)))
    if n_lab == 0:
        raise ValueError(f"label_fraction {label_fraction} leaves no labeled target records")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labeled))
    keep = [labeled[i] for i in order[:n_lab]]
    rest = [labeled[i] for i in order[n_lab:]]
    n_val = (2 * len(rest)) // 10
    truth = {r.waypoint_id: r.coord for r in rest}
    return DomainSplit(
        sources=sources,
        target_floor=target_floor,
        target_labeled=keep,
        target_unlabeled_train=crowd,
        target_val=[r.without_label() for r in rest[:n_val]],
        target_test=[r.without_label() for r in rest[n_val:]],
        truth=truth,
        label_fraction=label_fraction,
        seed=seed,
    )
