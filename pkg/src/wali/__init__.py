"""Complex-valued U-Net reconstruction of speech captured by low-rate pressure sensors."""

from .channel import (
    DatasetManifest,
    ManifestRecord,
    SimConfig,
    build_dataset,
    decimate_alias,
    mix_noise_at_snr,
    sinc_upsample,
    simulate_sensor,
)
from .config import RunConfig, load_config, toy_config
from .core import ComplexTensor, Tensor, finite_diff_gradcheck
from .dsp import ComplexSpectrogram, StftConfig, istft, stft
from .estimators import SensorChannelSimulator, WaLiReconstructor
from .loss import MultiResConfig, complex_multires_stft_loss
from .metrics import MetricReport, evaluate_dataset, lsd, si_sdr, stoi
from .network import NetworkConfig, WaLiNet, build, reconstruct
from .synth import synthetic_speech
from .trainer import TrainConfig, fit, finetune, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram",
    "ComplexTensor",
    "DatasetManifest",
    "ManifestRecord",
    "MetricReport",
    "MultiResConfig",
    "NetworkConfig",
    "RunConfig",
    "SensorChannelSimulator",
    "SimConfig",
    "StftConfig",
    "Tensor",
    "TrainConfig",
    "WaLiNet",
    "WaLiReconstructor",
    "build",
    "build_dataset",
    "complex_multires_stft_loss",
    "decimate_alias",
    "evaluate_dataset",
    "finetune",
    "finite_diff_gradcheck",
    "fit",
    "istft",
    "load_checkpoint",
    "load_config",
    "lsd",
    "mix_noise_at_snr",
    "reconstruct",
    "save_checkpoint",
    "si_sdr",
    "simulate_sensor",
    "sinc_upsample",
    "stft",
    "stoi",
    "synthetic_speech",
    "toy_config",
]
