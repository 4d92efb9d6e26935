"""scikit-learn style wrappers around the channel simulator and the network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .channel import SimConfig, file_rng, simulate_sensor
from .config import toy_config
from .loss import MultiResConfig
from .metrics import si_sdr
from .network import NetworkConfig, build, reconstruct
from .trainer import TrainConfig, fit_arrays, load_checkpoint, save_checkpoint

__all__ = ["SensorChannelSimulator", "WaLiReconstructor"]


def _waveforms(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=False, allow_nd=False)
    if X.ndim == 1:
        X = X[None]
    return X


class SensorChannelSimulator(TransformerMixin, BaseEstimator):
    """Map clean ``[n_clips, n_samples]`` waveforms to sensor-degraded ones.

    Row ``i`` draws its noise and SNR from a generator derived from ``seed``
    and ``i``, so the output does not depend on batch composition.
    """

    def __init__(self, sensor_rate: int = 500, target_rate: int = 8000, noise: bool = False,
                 snr_range_db=(-7.0, 40.0), clip_seconds: float = 4.0, lowpass: bool = False,
                 seed: int = 0, noise_bank=None):
        self.sensor_rate = sensor_rate
        self.target_rate = target_rate
        self.noise = noise
        self.snr_range_db = snr_range_db
        self.clip_seconds = clip_seconds
        self.lowpass = lowpass
        self.seed = seed
        self.noise_bank = noise_bank

    def fit(self, X, y=None):
        X = _waveforms(X)
        self.sim_config_ = SimConfig(self.sensor_rate, self.target_rate, tuple(self.snr_range_db),
                                     self.clip_seconds, self.seed, self.noise, self.lowpass)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "sim_config_")
        X = _waveforms(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} samples per clip, got {X.shape[1]}")
        rows = [simulate_sensor(x, self.sim_config_, self.noise_bank, file_rng(self.seed, str(i))).degraded
                for i, x in enumerate(X)]
        return np.stack(rows)


class WaLiReconstructor(RegressorMixin, BaseEstimator):
    """Train the complex U-Net on (degraded, clean) waveform pairs.

    ``predict`` reconstructs waveforms and ``score`` returns the mean SI-SDR
    in dB instead of R^2.  ``network`` is a :class:`NetworkConfig` (or its
    dict form); ``None`` selects the depth-3 toy geometry.
    """

    def __init__(self, network=None, lr: float = 1e-4, steps: int = 100, batch_size: int = 2,
                 grad_clip: float = 5.0, seed: int = 0, loss=None, recalibrate: bool = True):
        self.network = network
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.seed = seed
        self.loss = loss
        self.recalibrate = recalibrate

    def _network_config(self) -> NetworkConfig:
        if self.network is None:
            return toy_config().network
        if isinstance(self.network, dict):
            return NetworkConfig.from_dict(self.network)
        return self.network

    def _pairs(self, X, y, n: int) -> tuple[np.ndarray, np.ndarray]:
        X = _waveforms(X)
        y = _waveforms(y)
        if X.shape != y.shape:
            raise ValueError(f"X {X.shape} and y {y.shape} differ")

        def fit_len(a):
            return np.pad(a, ((0, 0), (0, max(0, n - a.shape[1]))))[:, :n]

        return fit_len(X), fit_len(y)

    def fit(self, X, y):
        cfg = self._network_config()
        X, y = self._pairs(X, y, cfg.n_samples)
        train = TrainConfig(lr=self.lr, steps=self.steps, batch_size=self.batch_size,
                            grad_clip=self.grad_clip, seed=self.seed)
        loss = self.loss if isinstance(self.loss, MultiResConfig) else MultiResConfig(**(self.loss or {}))
        net = build(cfg, self.seed)
        self.net_, self.history_, self.optimizer_state_ = fit_arrays(
            net, X, y, train, loss, recalibrate=self.recalibrate)
        self.n_features_in_ = X.shape[1]
        return self

    def reconstruct(self, x) -> np.ndarray:
        check_is_fitted(self, "net_")
        return reconstruct(self.net_, x)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = _waveforms(X)
        return np.stack([reconstruct(self.net_, x) for x in X])

    def score(self, X, y, sample_weight=None) -> float:
        est = self.predict(X)
        ref = _waveforms(y)
        vals = np.array([si_sdr(r, e) for r, e in zip(ref, est)])
        return float(np.average(vals, weights=sample_weight))

    def save(self, path):
        check_is_fitted(self, "net_")
        return save_checkpoint(path, self.net_, self.optimizer_state_)

    @classmethod
    def load(cls, path) -> "WaLiReconstructor":
        net, state, _ = load_checkpoint(path)
        est = cls(network=net.config)
        est.net_, est.optimizer_state_, est.history_ = net, state, []
        est.n_features_in_ = net.config.n_samples
        return est
