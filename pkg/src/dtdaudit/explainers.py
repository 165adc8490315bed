"""scikit-learn style wrapper: rows of ``X`` in, rows of relevance out."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .engine import relevance_train_free, saliency
from .network import Network
from .recursive import relevance_recursive


class DTDExplainer(TransformerMixin, BaseEstimator):
    """Input relevance for a fixed network.

    Nothing is learned; ``fit`` only validates ``X`` against the network and
    records ``n_features_in_``.  ``transform`` returns one ``R^1`` row per
    sample, min-max scaled when ``normalize`` is set.
    """

    def __init__(self, network: Network = None, rule="zplus", class_index: int = 0,
                 algorithm: str = "train_free", normalize: bool = False):
        self.network = network
        self.rule = rule
        self.class_index = class_index
        self.algorithm = algorithm
        self.normalize = normalize

    def _validate(self):
        if not isinstance(self.network, Network):
            raise TypeError("network must be a dtdaudit Network")
        if self.algorithm not in ("train_free", "recursive"):
            raise ValueError("algorithm must be 'train_free' or 'recursive'")

    def fit(self, X, y=None):
        self._validate()
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.network.input_dim:
            raise ValueError(f"X has {X.shape[1]} features, the network expects {self.network.input_dim}")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        explain = relevance_recursive if self.algorithm == "recursive" else relevance_train_free
        rows = [saliency(explain(self.network, x, self.class_index, self.rule), self.normalize) for x in X]
        return np.vstack(rows) if rows else np.empty((0, self.n_features_in_))
