"""Single declarative run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attention import CgabConfig, ConformerConfig
from .channel import SimConfig
from .dsp import StftConfig
from .loss import MultiResConfig
from .network import NetworkConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "toy_config"]


class ConfigError(ValueError):
    """Invalid or unknown configuration key or value."""


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e-3" (no dot) as a string; accept the 1.2 float syntax
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)[eE][-+]?\d+$"),
    list("-+0123456789."),
)


def _strict(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class MetricsConfig:
    n_fft: int = 512
    hop: int = 128

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.n_fft, self.hop)


@dataclass
class RunConfig:
    """Network, STFT, simulation, training, loss and metric settings."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: MultiResConfig = field(default_factory=MultiResConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    out: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        allowed = {"network", "stft", "sim", "train", "loss", "metrics", "out"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
        net = dict(d.get("network") or {})
        if not isinstance(net, dict):
            raise ConfigError("network: expected a mapping")
        if "stft" in net:
            raise ConfigError("network.stft: give STFT settings in the top-level 'stft' section")
        stft = _strict(StftConfig, d.get("stft"), "stft")
        if "conformer" in net:
            net["conformer"] = _strict(ConformerConfig, net["conformer"], "network.conformer")
        if "cgab" in net:
            net["cgab"] = _strict(CgabConfig, net["cgab"], "network.cgab")
        network = _strict(NetworkConfig, {**net, "stft": stft}, "network")
        loss = dict(d.get("loss") or {})
        if "resolutions" in loss:
            loss["resolutions"] = tuple(_strict(StftConfig, r, "loss.resolutions[]")
                                        for r in loss["resolutions"])
        return cls(
            network=network,
            sim=_strict(SimConfig, d.get("sim"), "sim"),
            train=_strict(TrainConfig, d.get("train"), "train"),
            loss=_strict(MultiResConfig, loss, "loss"),
            metrics=_strict(MetricsConfig, d.get("metrics"), "metrics"),
            out=str(d.get("out", "runs/default")),
        )

    def to_dict(self) -> dict:
        net = self.network.to_dict()
        stft = net.pop("stft")
        return {
            "network": net,
            "stft": stft,
            "sim": self.sim.to_dict(),
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "metrics": dataclasses.asdict(self.metrics),
            "out": self.out,
        }

    def override(self, seed: int | None = None, out: str | None = None,
                 sensor_rate: int | None = None) -> "RunConfig":
        """Apply command-line flags (flag > config > default)."""
        cfg = self
        try:
            if seed is not None:
                cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, seed=seed),
                                          train=dataclasses.replace(cfg.train, seed=seed))
            if sensor_rate is not None:
                cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, sensor_rate=sensor_rate))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if out is not None:
            cfg = dataclasses.replace(cfg, out=out)
        return cfg

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def load_config(path=None) -> RunConfig:
    """Read a YAML or JSON config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if Path(path).suffix == ".json" else yaml.load(text, Loader=_Loader)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def toy_config(depth: int = 3, seed: int = 0) -> RunConfig:
    """Desk-scale geometry: F=32 from a 64-point STFT, 50% overlap."""
    channels = (8, 16, 16, 32, 32, 64, 64, 128)[:depth]
    placement = (1, depth - 1) if depth > 2 else (1,)
    network = NetworkConfig(
        depth=depth,
        channels=channels,
        stft=StftConfig(64, 32),
        conformer=ConformerConfig(d_model=16, n_heads=1, d_ff=32, conv_kernel=7, n_layers=2),
        cgab=CgabConfig(c_attn=5),
        cgab_placement=placement,
    )
    return RunConfig(network=network, sim=SimConfig(seed=seed), train=TrainConfig(seed=seed))
