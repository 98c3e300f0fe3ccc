"""scikit-learn style wrappers around the cost model and the tracker."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cost import init_params, mlp_forward, transition_cost
from .data import split_train_val
from .features import N_FEATURES
from .metrics import aggregate, evaluate
from .tracking import TrackerConfig, track_sequence
from .training import TrainConfig, split_sequence, train


class EdgeAffinityClassifier(BaseEstimator, ClassifierMixin):
    """MLP on 6-d edge features fitted directly to binary edge labels (no QP).

    ``transform`` returns the transition costs ``-log p``.
    """

    def __init__(self, hidden=64, lr=1e-3, weight_decay=1e-4, epochs=200, seed=0):
        self.hidden = hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y):
        from .cost import mlp_vjp
        from .difflayer import loss_bce_edges
        from .training import Adam

        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {X.shape[1]}")
        self.classes_ = np.array([0, 1])
        w = init_params(self.hidden, self.seed)
        opt = Adam(self.lr, self.weight_decay)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            loss, dp = loss_bce_edges(mlp_forward(X, w), y)
            self.loss_curve_.append(loss)
            w = opt.step(w, mlp_vjp(X, w, dp)[0])
        self.params_ = w
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        p = mlp_forward(X, self.params_)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def transform(self, X):
        return transition_cost(self.predict_proba(X)[:, 1])


class NetworkFlowTracker(BaseEstimator):
    """End-to-end trained flow tracker over :class:`~flowtrack.data.Sequence` objects."""

    def __init__(self, T=15, overlap=5, gamma=0.1, lr=1e-3, weight_decay=1e-4, epochs=10,
                 batch_size=4, loss_kind="L2", hidden=64, seed=0, val_fraction=0.2,
                 second_stage=True, batch_len=100, batch_overlap=10, delta=5):
        self.T = T
        self.overlap = overlap
        self.gamma = gamma
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss_kind = loss_kind
        self.hidden = hidden
        self.seed = seed
        self.val_fraction = val_fraction
        self.second_stage = second_stage
        self.batch_len = batch_len
        self.batch_overlap = batch_overlap
        self.delta = delta

    def _train_config(self):
        return TrainConfig(T=self.T, overlap=self.overlap, gamma=self.gamma, lr=self.lr,
                           weight_decay=self.weight_decay, epochs=self.epochs,
                           batch_size=self.batch_size, loss_kind=self.loss_kind,
                           seed=self.seed, hidden=self.hidden)

    def _tracker_config(self):
        return TrackerConfig(batch_len=self.batch_len, batch_overlap=self.batch_overlap,
                             delta=self.delta, second_stage=self.second_stage)

    def fit(self, sequences, y=None):
        sequences = list(sequences)
        if not sequences:
            raise ValueError("no training sequences")
        cfg = self._train_config()
        tr, va = split_train_val(sequences, self.val_fraction)
        graphs = [g for s in tr for g in split_sequence(s, cfg)]
        val = [g for s in va for g in split_sequence(s, cfg)]
        res = train(graphs, cfg, val)
        self.params_ = res.params
        self.trace_ = res.trace
        return self

    def predict(self, sequence):
        """Tracks (list of Trajectory) for one sequence."""
        check_is_fitted(self, "params_")
        emb = check_array(sequence.embeddings, dtype=float, ensure_min_samples=0)
        return track_sequence(sequence.detections, emb, self.params_, self._tracker_config(),
                              n_frames=sequence.n_frames).tracks

    def score(self, sequences, y=None):
        """Overall IDF1 across ``sequences``."""
        reports = [evaluate(s.gt, self.predict(s)) for s in sequences]
        return aggregate(reports).idf1
