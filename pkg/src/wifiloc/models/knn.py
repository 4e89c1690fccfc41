from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.neighbors import KNeighborsRegressor
from sklearn.utils.validation import check_is_fitted


def fingerprint_matrix(records, n_slots, missing_value):
    """Dense (n, n_slots - 1) RSSI matrix over known bssids; absent APs get ``missing_value``."""
    X = np.full((len(records), n_slots - 1), float(missing_value))
    for i, r in enumerate(records):
        keep = (r.index > 0) & (r.index < n_slots)
        X[i, r.index[keep] - 1] = r.z[keep]
    return X


class KNNFingerprintRegressor(RegressorMixin, BaseEstimator):
    """Mean coordinate of the ``k`` nearest training fingerprints (Euclidean)."""

    def __init__(self, k=5, n_slots=None, missing_value=None):
        self.k = k
        self.n_slots = n_slots
        self.missing_value = missing_value

    def fit(self, X, y):
        if len(X) == 0:
            raise ValueError("KNN needs a non-empty training set")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        y = np.asarray(y, dtype=np.float64).reshape(len(X), 2)
        self.n_slots_ = self.n_slots or max(int(r.index.max()) for r in X) + 1
        self.missing_ = (self.missing_value if self.missing_value is not None
                         else min(float(r.z.min()) for r in X))
        self.model_ = KNeighborsRegressor(n_neighbors=min(self.k, len(X)), algorithm="brute")
        self.model_.fit(fingerprint_matrix(X, self.n_slots_, self.missing_), y)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(fingerprint_matrix(X, self.n_slots_, self.missing_))


def knn_predict(train_records, train_coords, query, k, n_slots=None, missing_value=None):
    est = KNNFingerprintRegressor(k=k, n_slots=n_slots, missing_value=missing_value)
    return est.fit(train_records, train_coords).predict([query])[0]
