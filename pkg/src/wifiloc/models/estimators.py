"""scikit-learn style wrappers around the localization networks.

``X`` is a list of preprocessed records (set models) or a list of subgraph
groups (graph models); ``y`` is an (n, 2) array of metre coordinates.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .. import train as tr
from ..autodiff import load_checkpoint, save_checkpoint
from .nets import build_net, net_from_meta


def _check_xy(X, y, allow_nan=False):
    X = list(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 2) if y is not None else None
    if y is not None and len(X) != len(y):
        raise ValueError(f"X has {len(X)} items but y has {len(y)} rows")
    if y is not None and not allow_nan and not np.isfinite(y).all():
        raise ValueError("coordinates must be finite")
    return X, y


def _infer_slots(X):
    top = 0
    for it in X:
        if hasattr(it, "z"):
            top = max(top, int(np.max(it.index, initial=0)))
        else:
            top = max(top, max(int(np.max(s.ap_index, initial=0)) for s in it))
    return top + 1


class _NetRegressor(RegressorMixin, BaseEstimator):
    kind = None

    def _arch(self):
        return {}

    def _train_cfg(self, log_path=None):
        return tr.TrainConfig(epochs=self.epochs, lr=self.lr, patience=self.patience,
                              factor=self.factor, batch_size=self.batch_size, seed=self.seed,
                              log_path=log_path or self.log_path, val_views=self.val_views,
                              d_acc_every=self.d_acc_every)

    def _new_net(self, X, y):
        n_slots = self.n_slots or _infer_slots(X)
        net = build_net(self.kind, n_slots, self.seed, **self._arch())
        net.set_coord_scaler(y[np.isfinite(y).all(axis=1)])
        return net

    def fit(self, X, y, X_val=None, y_val=None):
        """Supervised training of G and R from scratch."""
        X, y = _check_xy(X, y)
        if not X:
            raise ValueError("no labeled data")
        self.net_ = self._new_net(X, y)
        res = tr.pretrain(self.net_, X, y, self._train_cfg(),
                          *((list(X_val), np.asarray(y_val)) if X_val is not None else ()))
        self.history_, self.best_epoch_ = res.history, res.best_epoch
        return self

    def finetune(self, X, y, mode="all", X_val=None, y_val=None, epochs=None, lr=None):
        """Continue training only the parameter groups of ``mode`` (all, G or R)."""
        check_is_fitted(self, "net_")
        X, y = _check_xy(X, y)
        if not X:
            raise ValueError("fine-tuning needs labeled target data")
        cfg = self._train_cfg()
        if epochs is not None:
            cfg.epochs = epochs
        if lr is not None:
            cfg.lr = lr
        res = tr.finetune(self.net_, X, y, mode, cfg,
                          *((list(X_val), np.asarray(y_val)) if X_val is not None else ()))
        self.history_, self.best_epoch_ = res.history, res.best_epoch
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        return tr.predict(self.net_, list(X))

    def warm_start_from(self, other):
        """Copy a fitted network (weights and coordinate scaler) from ``other``."""
        check_is_fitted(other, "net_")
        self.net_ = net_from_meta(other.net_.meta(), other.net_.state_dict())
        return self

    def save(self, path, extra=None):
        check_is_fitted(self, "net_")
        meta = {"net": self.net_.meta(), "params": self.get_params(), "extra": extra or {}}
        save_checkpoint(path, self.net_.state_dict(), meta)

    @classmethod
    def load(cls, path):
        state, meta = load_checkpoint(path)
        net_meta = meta["net"]
        est_cls = ESTIMATORS.get(net_meta["kind"], cls)
        params = {k: v for k, v in meta.get("params", {}).items()
                  if k in est_cls._get_param_names()}
        est = est_cls(**params)
        est.net_ = net_from_meta(net_meta, state)
        est.checkpoint_meta_ = meta
        return est


class DeepSetsRegressor(_NetRegressor):
    """Permutation-invariant rho(sum phi) regressor over fingerprints."""

    kind = "deepsets"

    def __init__(self, n_slots=None, embed_dim=10, hidden=64, epochs=250, lr=1e-3,
                 batch_size=32, patience=10, factor=0.5, seed=0, log_path=None,
                 val_views=None, d_acc_every=1):
        self.n_slots = n_slots
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.factor = factor
        self.seed = seed
        self.log_path = log_path
        self.val_views = val_views
        self.d_acc_every = d_acc_every

    def _arch(self):
        return {"embed_dim": self.embed_dim, "hidden": self.hidden}


class DeepNNRegressor(_NetRegressor):
    kind = "deepnn"

    def __init__(self, n_slots=None, embed_dim=10, hidden=64, slots=50, epochs=250, lr=1e-3,
                 batch_size=32, patience=10, factor=0.5, seed=0, log_path=None,
                 val_views=None, d_acc_every=1):
        self.n_slots = n_slots
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.slots = slots
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.factor = factor
        self.seed = seed
        self.log_path = log_path
        self.val_views = val_views
        self.d_acc_every = d_acc_every

    def _arch(self):
        return {"embed_dim": self.embed_dim, "hidden": self.hidden, "slots": self.slots}


class _GraphRegressor(_NetRegressor):
    def __init__(self, n_slots=None, embed_dim=10, hidden=32, heads=4, epochs=250, lr=1e-3,
                 batch_size=32, patience=10, factor=0.5, seed=0, log_path=None,
                 val_views=None, d_acc_every=1):
        self.n_slots = n_slots
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.heads = heads
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.factor = factor
        self.seed = seed
        self.log_path = log_path
        self.val_views = val_views
        self.d_acc_every = d_acc_every

    def _arch(self):
        arch = {"embed_dim": self.embed_dim, "hidden": self.hidden}
        if self.kind != "gcn":
            arch["heads"] = self.heads
        return arch


class GCNRegressor(_GraphRegressor):
    """Two hetero-GCN layers with a graph-mean readout; R is the final linear layer."""

    kind = "gcn"


class WiAGCNRegressor(_GraphRegressor):
    """Hetero-GCN + attention with the three-level readout."""

    kind = "wiagcn"


class WiDAGCNRegressor(_GraphRegressor):
    """WiAGCN with a gradient-reversed domain discriminator.

    ``fit(X, y, domains)`` treats rows of ``y`` that are NaN as unlabeled;
    ``target_domain`` defaults to the largest domain id.
    """

    kind = "widagcn"

    def __init__(self, n_slots=None, embed_dim=10, hidden=32, heads=4, epochs=250, lr=1e-3,
                 batch_size=32, patience=10, factor=0.5, seed=0, log_path=None,
                 val_views=None, d_acc_every=1, alpha0=0.0, alpha_step=1e-4, include_target_supervised=True,
                 coord_weight=1.0, domain_weight=1.0):
        super().__init__(n_slots, embed_dim, hidden, heads, epochs, lr, batch_size,
                         patience, factor, seed, log_path, val_views, d_acc_every)
        self.alpha0 = alpha0
        self.alpha_step = alpha_step
        self.include_target_supervised = include_target_supervised
        self.coord_weight = coord_weight
        self.domain_weight = domain_weight

    def _train_cfg(self, log_path=None):
        cfg = super()._train_cfg(log_path)
        cfg.coord_weight, cfg.domain_weight = self.coord_weight, self.domain_weight
        return cfg

    def fit(self, X, y, domains, target_domain=None, X_val=None, y_val=None,
            X_domain_val=None, domain_val=None, init=None):
        X, y = _check_xy(X, y, allow_nan=True)
        domains = np.asarray(domains, dtype=np.int64)
        if len(domains) != len(X):
            raise ValueError("domains must align with X")
        tgt = int(domains.max()) if target_domain is None else int(target_domain)
        n_domains = max(int(domains.max()), tgt) + 1
        if init is not None:
            check_is_fitted(init, "net_")
            meta = dict(init.net_.meta())
            meta["config"] = dict(meta["config"], n_domains=None)
            meta["kind"] = "wiagcn"
            self.net_ = net_from_meta(meta, init.net_.state_dict())
            self.net_.add_discriminator(n_domains, self.seed)
        else:
            self.net_ = build_net("widagcn", self.n_slots or _infer_slots(X), self.seed,
                                  n_domains=n_domains, **self._arch())
            self.net_.set_coord_scaler(y[np.isfinite(y).all(axis=1)])
        is_t = domains == tgt
        src = np.flatnonzero(~is_t)
        tg = np.flatnonzero(is_t)
        if np.isnan(y[src]).any():
            raise ValueError("source rows must be labeled")
        acfg = tr.AdaptConfig(self.alpha0, self.alpha_step, self.include_target_supervised)
        res = tr.adapt(self.net_, [X[i] for i in src], y[src], domains[src],
                       [X[i] for i in tg], y[tg], tgt, self._train_cfg(), acfg,
                       list(X_val) if X_val is not None else None,
                       np.asarray(y_val) if y_val is not None else None,
                       list(X_domain_val) if X_domain_val is not None else None,
                       domain_val)
        self.history_, self.best_epoch_ = res.history, res.best_epoch
        self.final_state_ = res.final_state
        self.target_domain_ = tgt
        return self

    def domain_accuracy(self, X, domains):
        check_is_fitted(self, "net_")
        return tr.domain_accuracy(self.net_, list(X), domains)


ESTIMATORS = {
    "deepsets": DeepSetsRegressor,
    "deepnn": DeepNNRegressor,
    "gcn": GCNRegressor,
    "wiagcn": WiAGCNRegressor,
    "widagcn": WiDAGCNRegressor,
}
