"""scikit-learn style detectors wrapping the three model families.

Each detector is fitted on nominal windows only and exposes
``anomaly_score`` (higher = more anomalous), sklearn's ``score_samples``
(higher = more normal), ``decision_function`` and ``predict`` (1 = fault).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .data import WindowBatch
from .evaluation import EvalReport, anomaly_scores, report_from_scores
from .train import TrainConfig, train_model


class _WindowDetector(BaseEstimator):
    _kind = ""

    def _config(self) -> TrainConfig:
        p = self.get_params()
        fields = {k: p[k] for k in TrainConfig.__dataclass_fields__ if k in p}
        return TrainConfig(model=self._kind, **fields)

    def _n_features(self, X) -> int:
        if isinstance(X, WindowBatch):
            return X.n_features
        if self.n_features is not None:
            return self.n_features
        if self.topology is not None:
            return self.topology.n_features
        raise ValueError("n_features (or a topology) is needed for plain array input")

    @staticmethod
    def _array(X) -> np.ndarray:
        if isinstance(X, WindowBatch):
            return X.X
        return check_array(X, dtype=np.float64)

    def fit(self, X, y=None, X_val=None):
        """Fit on windows ``X``; rows with ``y == 1`` are dropped (nominal-only training)."""
        n_features = self._n_features(X)
        Xa = self._array(X)
        if y is None and isinstance(X, WindowBatch):
            y = X.labels
        if y is not None:
            Xa = Xa[np.asarray(y) == 0]
        val = X_val if X_val is None or isinstance(X_val, WindowBatch) else self._array(X_val)
        result = train_model(self._config(), Xa, val, self.topology, self.scaler, n_features=n_features)
        self.model_ = result.model
        self.history_ = result.history
        self.beta_ = result.beta
        self.n_features_in_ = Xa.shape[1]
        ref = self._array(val) if val is not None else Xa
        if isinstance(val, WindowBatch):
            ref = ref[val.labels == 0]
        self.threshold_ = float(np.quantile(anomaly_scores(self.model_, ref), self.threshold_quantile))
        return self

    def anomaly_score(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return anomaly_scores(self.model_, self._array(X))

    def score_samples(self, X) -> np.ndarray:
        return -self.anomaly_score(X)

    def decision_function(self, X) -> np.ndarray:
        return self.anomaly_score(X) - self.threshold_

    def predict(self, X) -> np.ndarray:
        return (self.anomaly_score(X) >= self.threshold_).astype(np.int64)

    def evaluate(self, X, y=None, tpr_target: float = 0.95) -> EvalReport:
        if y is None and isinstance(X, WindowBatch):
            y = X.labels
        return report_from_scores(self.anomaly_score(X), y, tpr_target)


class FlowDetector(_WindowDetector):
    """Real NVP density model; the anomaly score is the negative log-likelihood."""

    _kind = "realnvp"

    def __init__(self, n_features=None, past_length=10, coupling_layers=4, layers=4, neurons=128,
                 pi_enabled=False, topology=None, scaler=None, batch_size=64, epochs=100,
                 learning_rate=1e-3, gen_count=16, beta_init=0.1, beta_step=0.01, patience=10,
                 seed=0, threshold_quantile=0.99):
        self.n_features = n_features
        self.past_length = past_length
        self.coupling_layers = coupling_layers
        self.layers = layers
        self.neurons = neurons
        self.pi_enabled = pi_enabled
        self.topology = topology
        self.scaler = scaler
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.gen_count = gen_count
        self.beta_init = beta_init
        self.beta_step = beta_step
        self.patience = patience
        self.seed = seed
        self.threshold_quantile = threshold_quantile

    def log_prob(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        with ad.no_grad():
            return self.model_.log_prob(self._array(X)).data

    def sample(self, n_samples: int, random_state=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(random_state)
        with ad.no_grad():
            return self.model_.sample(n_samples, rng).data


class AutoencoderDetector(_WindowDetector):
    """Under-complete dense autoencoder; the anomaly score is the window MSE."""

    _kind = "autoencoder"

    def __init__(self, n_features=None, past_length=10, layers=4, neurons=256, pi_enabled=False,
                 topology=None, scaler=None, batch_size=64, epochs=100, learning_rate=1e-3,
                 beta_init=0.1, beta_step=0.01, patience=10, seed=0, threshold_quantile=0.99):
        self.n_features = n_features
        self.past_length = past_length
        self.layers = layers
        self.neurons = neurons
        self.pi_enabled = pi_enabled
        self.topology = topology
        self.scaler = scaler
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.beta_init = beta_init
        self.beta_step = beta_step
        self.patience = patience
        self.seed = seed
        self.threshold_quantile = threshold_quantile

    def transform(self, X) -> np.ndarray:
        """Reconstructed windows."""
        check_is_fitted(self, "model_")
        with ad.no_grad():
            return self.model_(self._array(X)).data


class GRUDetector(_WindowDetector):
    """Stacked GRU reconstructing the window; the anomaly score is the window MAE."""

    _kind = "gru"

    def __init__(self, n_features=None, past_length=10, layers=2, neurons=256, pi_enabled=False,
                 topology=None, scaler=None, batch_size=64, epochs=100, learning_rate=1e-3,
                 beta_init=0.1, beta_step=0.01, patience=10, clip_norm=None, seed=0,
                 threshold_quantile=0.99):
        self.n_features = n_features
        self.past_length = past_length
        self.layers = layers
        self.neurons = neurons
        self.pi_enabled = pi_enabled
        self.topology = topology
        self.scaler = scaler
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.beta_init = beta_init
        self.beta_step = beta_step
        self.patience = patience
        self.clip_norm = clip_norm
        self.seed = seed
        self.threshold_quantile = threshold_quantile

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        with ad.no_grad():
            return self.model_(self._array(X)).data
