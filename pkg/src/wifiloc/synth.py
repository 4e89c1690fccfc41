"""Deterministic multi-floor synthetic sites under a log-distance path-loss model."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .ingest import RSSI_MAX, RSSI_MIN, FingerprintRecord


@dataclass(frozen=True)
class SiteConfig:
    floors: int = 5
    width: float = 135.0
    length: float = 48.0
    aps_per_floor: int = 40
    waypoints_per_floor: int = 300
    tx_power_dbm: float = -40.0
    path_loss_exponent: float = 2.5
    ref_distance: float = 1.0
    floor_attenuation_dbm: float = 15.0
    noise_sigma_dbm: float = 2.0
    rssi_floor: float = -95.0
    floor_height: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("floors", "aps_per_floor", "waypoints_per_floor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ref_distance <= 0:
            raise ValueError("ref_distance must be positive")
        if self.noise_sigma_dbm < 0:
            raise ValueError("noise_sigma_dbm must be non-negative")
        if self.rssi_floor > self.tx_power_dbm:
            raise ValueError("rssi_floor must not exceed tx_power_dbm")

    def to_dict(self):
        return asdict(self)


def floor_name(i):
    return f"F{i}"


def rssi_at(ap_pos, device_pos, cfg, noise_draw=0.0):
    """Received power in dBm, or None when below ``cfg.rssi_floor``.

    ``noise_draw`` is added as-is (in dB); callers scale it by the noise sigma.
    """
    ap = np.asarray(ap_pos, dtype=np.float64)
    dev = np.asarray(device_pos, dtype=np.float64)
    d = float(np.linalg.norm(ap - dev))
    floors_apart = abs(round(ap[2] / cfg.floor_height) - round(dev[2] / cfg.floor_height))
    rssi = (cfg.tx_power_dbm
            - 10.0 * cfg.path_loss_exponent * np.log10(max(d, cfg.ref_distance) / cfg.ref_distance)
            - cfg.floor_attenuation_dbm * floors_apart
            + noise_draw)
    if rssi < cfg.rssi_floor:
        return None
    return float(rssi)


def _rssi_matrix(aps, dev, cfg, noise):
    d = np.linalg.norm(aps - dev, axis=1)
    apart = np.abs(np.round(aps[:, 2] / cfg.floor_height) - round(dev[2] / cfg.floor_height))
    return (cfg.tx_power_dbm
            - 10.0 * cfg.path_loss_exponent * np.log10(np.maximum(d, cfg.ref_distance) / cfg.ref_distance)
            - cfg.floor_attenuation_dbm * apart
            + noise)


def place_aps(cfg):
    rng = np.random.default_rng([cfg.seed, 0xA9])
    out = []
    for f in range(cfg.floors):
        xy = rng.uniform((0.0, 0.0), (cfg.width, cfg.length), size=(cfg.aps_per_floor, 2))
        out.append(np.column_stack([xy, np.full(cfg.aps_per_floor, f * cfg.floor_height)]))
    return np.vstack(out)


def _grid(cfg):
    n = cfg.waypoints_per_floor
    cols = max(1, int(round(np.sqrt(n * cfg.width / cfg.length))))
    rows = int(np.ceil(n / cols))
    cw, ch = cfg.width / cols, cfg.length / rows
    cells = [((c + 0.5) * cw, (r + 0.5) * ch) for r in range(rows) for c in range(cols)][:n]
    return np.array(cells), cw, ch


def bssid_for(floor, j):
    return f"ap-{floor:02d}-{j:03d}"


def generate_site(cfg):
    """Records for every floor plus the waypoint_id -> coordinate ground truth."""
    aps = place_aps(cfg)
    bssids = [bssid_for(f, j) for f in range(cfg.floors) for j in range(cfg.aps_per_floor)]
    cells, cw, ch = _grid(cfg)
    records, truth = [], {}
    for f in range(cfg.floors):
        for i, (cx, cy) in enumerate(cells):
            rng = np.random.default_rng([cfg.seed, f, i])
            jitter = rng.uniform(-0.3, 0.3, size=2) * (cw, ch)
            x = float(np.clip(cx + jitter[0], 0.0, cfg.width))
            y = float(np.clip(cy + jitter[1], 0.0, cfg.length))
            noise = rng.standard_normal(len(aps)) * cfg.noise_sigma_dbm
            rssi = _rssi_matrix(aps, np.array([x, y, f * cfg.floor_height]), cfg, noise)
            heard = np.flatnonzero(rssi >= max(cfg.rssi_floor, RSSI_MIN))
            wid = f"{floor_name(f)}-wp{i:05d}"
            if len(heard) == 0:
                raise ValueError(f"waypoint {wid} hears no AP; lower rssi_floor")
            readings = tuple((bssids[j], int(min(RSSI_MAX, round(rssi[j])))) for j in heard)
            records.append(FingerprintRecord(wid, (x, y), floor_name(f), readings, timestamp=i))
            truth[wid] = (x, y)
    return records, truth
