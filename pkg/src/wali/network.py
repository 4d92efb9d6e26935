"""The full complex U-Net: STFT frontend, encoders with CGABs, conformer
bottleneck, decoders fed by skip blocks, and iSTFT backend."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attention import CGAB, CgabConfig, ComplexConformer, ConformerConfig
from .core import tensor as T
from .core.complex import ComplexTensor
from .core.tensor import Tensor
from .dsp import ComplexSpectrogram, StftConfig, istft, stft
from .layers import ComplexConv2d, DecoderBlock, EncoderBlock, Module, SkipBlock

__all__ = ["NetworkConfig", "WaLiNet", "build", "reconstruct"]

DEFAULT_CHANNELS = (16, 32, 32, 64, 64, 128, 128, 256)


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 8
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    stft: StftConfig = field(default_factory=StftConfig)
    conformer: ConformerConfig = field(default_factory=ConformerConfig)
    cgab: CgabConfig = field(default_factory=CgabConfig)
    cgab_placement: tuple[int, ...] = (1, 7)
    clip_seconds: float = 4.0
    sample_rate: int = 8000
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "cgab_placement", tuple(self.cgab_placement))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if len(self.channels) != self.depth:
            raise ValueError(f"channel schedule has {len(self.channels)} entries for depth {self.depth}")
        if self.n_freq % (2 ** self.depth):
            raise ValueError(f"F={self.n_freq} is not divisible by 2^{self.depth}")
        for p in self.cgab_placement:
            if not 1 <= p <= self.depth:
                raise ValueError(f"CGAB placement {p} outside [1, {self.depth}]")
            if self.cgab.c_attn > self.channels[p - 1]:
                raise ValueError(f"c_attn {self.cgab.c_attn} exceeds encoder {p} channels")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def n_freq(self) -> int:
        """Frequency bins seen by the network (Nyquist bin dropped)."""
        return self.stft.n_fft // 2

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return self.stft.n_frames(self.n_samples)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["cgab_placement"] = list(self.cgab_placement)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if isinstance(d.get("stft"), dict):
            d["stft"] = StftConfig(**d["stft"])
        if isinstance(d.get("conformer"), dict):
            d["conformer"] = ConformerConfig(**d["conformer"])
        if isinstance(d.get("cgab"), dict):
            d["cgab"] = CgabConfig(**d["cgab"])
        return cls(**d)


class WaLiNet(Module):
    """Complex U-Net over ``[B, 1, F, T]`` spectrograms."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dtype = config.np_dtype
        ch = config.channels
        F, Tn = config.n_freq, config.n_frames
        self.encoders = []
        self.cgabs = []
        self._cgab_at = {}
        c_prev = 1
        for n in range(1, config.depth + 1):
            self.encoders.append(EncoderBlock(c_prev, ch[n - 1], rng, dtype=dtype))
            c_prev = ch[n - 1]
            if n in config.cgab_placement:
                cfg = dataclasses.replace(config.cgab, fixed_F=F >> n, fixed_T=Tn)
                self._cgab_at[n] = len(self.cgabs)
                self.cgabs.append(CGAB(ch[n - 1], cfg, rng, dtype))
        self.skips = [SkipBlock(ch[n - 1], rng, dtype) for n in range(1, config.depth + 1)]
        self.conformer = ComplexConformer(F >> config.depth, config.conformer, rng, dtype)
        # decoder at level n consumes SK_n and outputs the channels of level n-1
        self.decoders = []
        c_in = ch[-1]
        for n in range(config.depth, 0, -1):
            c_out = ch[n - 2] if n >= 2 else ch[0]
            self.decoders.append(DecoderBlock(c_in, ch[n - 1], c_out, rng, dtype=dtype))
            c_in = c_out
        self.head = ComplexConv2d(c_in, 1, (1, 1), (1, 1), (0, 0), rng, dtype)

    # -- spectrogram path -------------------------------------------------
    def forward(self, S):
        """Map an input spectrogram to the reconstructed one (same shape)."""
        spec = S if isinstance(S, ComplexSpectrogram) else None
        x = S.data if spec is not None else S
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        cfg = self.config
        if x.shape[1:] != (1, cfg.n_freq, cfg.n_frames):
            raise ValueError(f"network expects [B, 1, {cfg.n_freq}, {cfg.n_frames}], got {x.shape}")
        skips = []
        h = x
        for n, enc in enumerate(self.encoders, start=1):
            h = enc(h)
            if n in self._cgab_at:
                h = self.cgabs[self._cgab_at[n]](h)
            skips.append(self.skips[n - 1](h))
        h = self.conformer(h)
        for dec, sk in zip(self.decoders, reversed(skips)):
            h = dec(h, sk)
        y = self.head(h)
        if squeeze:
            y = y.reshape(y.shape[0], y.shape[2], y.shape[3])
        if spec is not None:
            return ComplexSpectrogram(y, spec.config, spec.sample_rate, spec.n_samples, trimmed=True)
        return y

    # -- waveform path ----------------------------------------------------
    def analyze(self, wave) -> ComplexTensor:
        """``[B, N]`` waveform -> ``[B, 1, F, T]`` spectrogram without the Nyquist bin."""
        cfg = self.config
        if not isinstance(wave, Tensor):
            wave = np.asarray(wave, dtype=cfg.np_dtype)
            if wave.ndim == 1:
                wave = wave[None]
        elif wave.ndim == 1:
            wave = wave.reshape(1, -1)
        S = stft(wave, cfg.stft, cfg.sample_rate).data
        S = S[:, :cfg.n_freq, :]
        return S.reshape(S.shape[0], 1, S.shape[1], S.shape[2])

    def synthesize(self, S: ComplexTensor, n_out: int | None = None) -> Tensor:
        """``[B, 1, F, T]`` -> ``[B, N]`` waveform, re-appending a zero Nyquist bin."""
        cfg = self.config
        B, _, F, Tn = S.shape
        zeros = np.zeros((B, 1, Tn), dtype=S.dtype)
        re = T.concat([S.real.reshape(B, F, Tn), Tensor(zeros)], axis=1)
        im = T.concat([S.imag.reshape(B, F, Tn), Tensor(zeros)], axis=1)
        n_out = cfg.n_samples if n_out is None else n_out
        return istft(ComplexTensor(re, im), n_out, cfg.stft)

    def forward_wave(self, wave) -> Tensor:
        return self.synthesize(self.forward(self.analyze(wave)), np.shape(wave.data if isinstance(wave, Tensor) else wave)[-1])


def build(config: NetworkConfig | None = None, seed: int = 0) -> WaLiNet:
    """Construct a network with deterministic seeded initialization."""
    return WaLiNet(config or NetworkConfig(), seed)


def _chunk_starts(n: int, win: int) -> list[int]:
    if n <= win:
        return [0]
    hop = win // 2
    starts = list(range(0, n - win + 1, hop))
    if starts[-1] + win < n:
        starts.append(n - win)
    return starts


def reconstruct(net: WaLiNet, x_degraded, fs_in: int | None = None) -> np.ndarray:
    """Sinc-upsample a sensor waveform and run it through the network.

    Clips longer than the network geometry are processed in windows with
    50% overlap and cross-faded; shorter clips are zero padded.  The result
    has the (upsampled) input length and peak magnitude at most 1.
    """
    from .channel import sinc_upsample

    cfg = net.config
    x = np.asarray(x_degraded, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("reconstruct expects a mono waveform")
    fs_in = cfg.sample_rate if fs_in is None else int(fs_in)
    if fs_in != cfg.sample_rate:
        if cfg.sample_rate % fs_in:
            raise ValueError(f"sensor rate {fs_in} does not divide {cfg.sample_rate}")
        x = sinc_upsample(x, fs_in, cfg.sample_rate)
    n, win = len(x), cfg.n_samples
    was_training = net.training
    net.eval()
    try:
        starts = _chunk_starts(n, win)
        out = np.zeros(max(n, win))
        weight = np.zeros(max(n, win))
        fade = np.ones(win)
        if len(starts) > 1:
            fade = np.sin(np.pi * (np.arange(win) + 0.5) / win) ** 2
        for s in starts:
            seg = np.zeros(win)
            piece = x[s:s + win]
            seg[:len(piece)] = piece
            y = net.forward_wave(seg[None].astype(cfg.np_dtype)).data[0].astype(np.float64)
            out[s:s + win] += y * fade
            weight[s:s + win] += fade
        out = out[:n] / np.maximum(weight[:n], 1e-12)
    finally:
        net.train(was_training)
    peak = np.max(np.abs(out)) if n else 0.0
    if peak > 1.0:
        out = out / peak
    return out
