"""Supervised pretraining, fine-tuning and semi-supervised adversarial adaptation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, PlateauSchedule

FINETUNE_GROUPS = {"all": ("G", "R"), "G": ("G",), "R": ("R",)}


@dataclass
class TrainConfig:
    epochs: int = 250
    lr: float = 1e-3
    patience: int = 10
    factor: float = 0.5
    batch_size: int = 32
    seed: int = 0
    coord_weight: float = 1.0
    domain_weight: float = 1.0
    log_path: str | None = None
    # views per item scored for the per-epoch validation loss; None = all
    val_views: int | None = None
    # held-out D accuracy is logged at epochs 0-5, every ``d_acc_every`` and the last
    d_acc_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdaptConfig:
    alpha0: float = 0.0
    alpha_step: float = 1e-4
    include_target_supervised: bool = True

    def __post_init__(self):
        if self.alpha0 < 0 or self.alpha_step < 0:
            raise ValueError("alpha schedule must be non-negative and nondecreasing")

    def alpha(self, epoch):
        return round(self.alpha0 + self.alpha_step * epoch, 12)


@dataclass
class TrainResult:
    state: dict
    history: list = field(default_factory=list)
    best_epoch: int = -1


class _EpochLog:
    def __init__(self, path):
        self.path = path
        self.rows = []

    def write(self, row):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# -- inference ----------------------------------------------------------------

def _views(net, items, max_views=None):
    owner, view = [], []
    for i, it in enumerate(items):
        k = net.n_views(it)
        if max_views is not None:
            k = min(k, max_views)
        owner.extend([i] * k)
        view.extend(range(k))
    return np.array(owner, dtype=np.int64), np.array(view, dtype=np.int64)


def predict_normalized(net, items, batch_size=128, with_logits=False, max_views=None):
    """Mean of the per-view outputs for every item (normalized coordinates)."""
    owner, view = _views(net, items, max_views)
    outs, logits = [], []
    with ad.no_grad():
        for lo in range(0, len(owner), batch_size):
            sel = slice(lo, lo + batch_size)
            batch = net.collate([items[i] for i in owner[sel]], view[sel])
            feat = net.features(batch)
            outs.append(net.R(feat).data)
            if with_logits:
                logits.append(net.D(feat).data)
    n = len(items)
    counts = np.bincount(owner, minlength=n)[:, None]

    def avg(chunks):
        acc = np.zeros((n, chunks[0].shape[1]))
        np.add.at(acc, owner, np.vstack(chunks))
        return acc / counts

    pred = avg(outs)
    return (pred, avg(logits)) if with_logits else pred


def predict(net, items, batch_size=128):
    if len(items) == 0:
        return np.zeros((0, 2))
    return net.denormalize(predict_normalized(net, items, batch_size))


def domain_accuracy(net, items, domains, max_views=None):
    _, logits = predict_normalized(net, items, with_logits=True, max_views=max_views)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(domains)))


def _val_mse(net, items, coords, max_views=None):
    if items is None or len(items) == 0:
        return None
    pred = predict_normalized(net, items, max_views=max_views)
    return float(np.mean((pred - net.normalize(coords)) ** 2))


# -- supervised ---------------------------------------------------------------

class _Frozen:
    """Disable gradient recording for parameters outside the trainable set."""

    def __init__(self, net, trainable):
        ids = {id(p) for p in trainable}
        self.frozen = [p for p in net.parameters() if id(p) not in ids]

    def __enter__(self):
        for p in self.frozen:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p in self.frozen:
            p.requires_grad = True
            p.grad = None


def _supervised(net, items, coords, groups, cfg, val_items=None, val_coords=None, stage="pretrain"):
    items = list(items)
    if not items:
        raise ValueError(f"{stage}: no labeled data")
    y = net.normalize(coords)
    params = net.trainable(groups)
    opt = Adam(params, lr=cfg.lr)
    sched = PlateauSchedule([opt], patience=cfg.patience, factor=cfg.factor)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    log = _EpochLog(cfg.log_path)
    best, best_loss, best_epoch = None, math.inf, -1
    with _Frozen(net, params):
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(items))
            views = np.array([rng.integers(net.n_views(it)) for it in items])
            losses = []
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                batch = net.collate([items[i] for i in idx], views[idx])
                loss = ad.mul(ad.mse_loss(net(batch), y[idx]), cfg.coord_weight)
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                losses.append(float(loss.data))
            train_loss = float(np.mean(losses))
            val_loss = _val_mse(net, val_items, val_coords, cfg.val_views)
            monitor = train_loss if val_loss is None else val_loss
            row = {"stage": stage, "epoch": epoch, "lr": opt.lr, "alpha": None,
                   "train_coord_loss": train_loss, "train_domain_loss": None,
                   "val_loss": val_loss, "d_acc": None}
            log.write(row)
            sched.step(monitor)
            if val_loss is not None and val_loss < best_loss:
                best_loss, best_epoch, best = val_loss, epoch, net.state_dict()
    if best is None:
        best, best_epoch = net.state_dict(), cfg.epochs - 1
    net.load_state_dict(best)
    return TrainResult(best, log.rows, best_epoch)


def pretrain(net, items, coords, cfg, val_items=None, val_coords=None):
    """Fit G and R on pooled labeled source data by coordinate MSE."""
    return _supervised(net, items, coords, ("G", "R"), cfg, val_items, val_coords, "pretrain")


def finetune(net, items, coords, mode, cfg, val_items=None, val_coords=None, state=None):
    """MSE-train only the mode's parameter groups on target labels."""
    if mode not in FINETUNE_GROUPS:
        raise ValueError(f"unknown fine-tuning mode {mode!r}; expected all, G or R")
    if state is not None:
        net.load_state_dict(state)
    return _supervised(net, items, coords, FINETUNE_GROUPS[mode], cfg, val_items, val_coords,
                       f"finetune-{mode}")


# -- adversarial adaptation -----------------------------------------------------

def _interleave(rng, n_src, n_tgt, batch_size):
    """Batches mixing shuffled source and target indices in proportion to their sizes."""
    nb = max(1, math.ceil((n_src + n_tgt) / batch_size))
    s_chunks = np.array_split(rng.permutation(n_src), nb)
    t_chunks = np.array_split(rng.permutation(n_tgt), nb)
    return list(zip(s_chunks, t_chunks))


def adapt(net, source_items, source_coords, source_domains, target_items, target_coords,
          target_domain, cfg, acfg, val_items=None, val_coords=None,
          domain_val_items=None, domain_val_domains=None, state=None):
    """Joint coordinate + gradient-reversed domain training.

    ``target_coords`` rows that are NaN mark unlabeled target items.
    """
    if not net.has_discriminator():
        raise ValueError("adapt needs a network with a domain head")
    src_dom = np.asarray(source_domains, dtype=np.int64)
    if len(set(src_dom.tolist()) | {int(target_domain)}) < 2:
        raise ValueError("adaptation needs at least two domains")
    if len(target_items) == 0:
        raise ValueError("adaptation needs target data")
    if state is not None:
        net.load_state_dict(state)
    items = list(source_items) + list(target_items)
    n_src = len(source_items)
    tgt_y = np.asarray(target_coords, dtype=np.float64).reshape(-1, 2)
    if not acfg.include_target_supervised:
        tgt_y = np.full_like(tgt_y, np.nan)
    y_all = np.vstack([np.asarray(source_coords, dtype=np.float64).reshape(-1, 2), tgt_y])
    labeled = ~np.isnan(y_all).any(axis=1)
    y_norm = np.where(labeled[:, None], net.normalize(np.nan_to_num(y_all)), 0.0)
    dom = np.concatenate([src_dom, np.full(len(target_items), int(target_domain))])

    opt_gr = Adam(net.trainable(("G", "R")), lr=cfg.lr)
    opt_d = Adam(net.trainable(("D",)), lr=cfg.lr)
    sched = PlateauSchedule([opt_gr], patience=cfg.patience, factor=cfg.factor)
    rng = np.random.default_rng([cfg.seed, 0xADA])
    log = _EpochLog(cfg.log_path)
    best, best_loss, best_epoch = None, math.inf, -1
    for epoch in range(cfg.epochs):
        alpha = acfg.alpha(epoch)
        views = np.array([rng.integers(net.n_views(it)) for it in items])
        c_losses, d_losses = [], []
        for s_idx, t_idx in _interleave(rng, n_src, len(target_items), cfg.batch_size):
            idx = np.concatenate([s_idx, n_src + t_idx])
            batch = net.collate([items[i] for i in idx], views[idx])
            feat = net.features(batch)
            logits = net.discriminate(feat, alpha)
            d_loss = ad.softmax_cross_entropy(logits, dom[idx])
            loss = ad.mul(d_loss, cfg.domain_weight)
            lab = np.flatnonzero(labeled[idx])
            if len(lab):
                pred = ad.take_rows(net.R(feat), lab)
                c_loss = ad.mse_loss(pred, y_norm[idx][lab])
                loss = loss + ad.mul(c_loss, cfg.coord_weight)
                c_losses.append(float(c_loss.data))
            d_losses.append(float(d_loss.data))
            net.zero_grad()
            ad.backward(loss)
            opt_gr.step()
            opt_d.step()
        val_loss = _val_mse(net, val_items, val_coords, cfg.val_views)
        due = epoch <= 5 or epoch % cfg.d_acc_every == 0 or epoch == cfg.epochs - 1
        d_acc = (domain_accuracy(net, domain_val_items, domain_val_domains, cfg.val_views)
                 if domain_val_items and due else None)
        train_c = float(np.mean(c_losses)) if c_losses else None
        monitor = val_loss if val_loss is not None else (train_c if train_c is not None else 0.0)
        log.write({"stage": "adapt", "epoch": epoch, "lr": opt_gr.lr, "alpha": alpha,
                   "train_coord_loss": train_c, "train_domain_loss": float(np.mean(d_losses)),
                   "val_loss": val_loss, "d_acc": d_acc})
        sched.step(monitor)
        if val_loss is not None and val_loss < best_loss:
            best_loss, best_epoch, best = val_loss, epoch, net.state_dict()
    if best is None:
        best, best_epoch = net.state_dict(), cfg.epochs - 1
    final = net.state_dict()
    net.load_state_dict(best)
    result = TrainResult(best, log.rows, best_epoch)
    result.final_state = final
    return result
