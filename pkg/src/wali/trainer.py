"""Deterministic optimization loop, Adam, checkpoints and fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import DatasetManifest, fit_length
from .core.tensor import Tape
from .layers import ComplexBatchNorm
from .loss import MultiResConfig, complex_multires_stft_loss
from .network import NetworkConfig, WaLiNet, build

__all__ = [
    "TrainConfig",
    "AdamState",
    "NonFiniteGradient",
    "CheckpointError",
    "adam_step",
    "clip_grad_norm",
    "fit",
    "fit_arrays",
    "finetune",
    "save_checkpoint",
    "load_checkpoint",
    "recalibrate_batchnorm",
    "write_history",
    "MAGIC",
    "FORMAT_VERSION",
]

log = logging.getLogger(__name__)

MAGIC = b"WALI"
FORMAT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN or inf; the step was not applied."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps_opt: float = 1e-8
    batch_size: int = 2
    steps: int = 100
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1): {self.betas}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.eps_opt <= 0:
            raise ValueError("eps_opt must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class AdamState:
    """First and second moments per real plane, plus the step counter."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, planes: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in planes], [np.zeros_like(p) for p in planes], 0)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled gradients and the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if not np.isfinite(total):
        raise NonFiniteGradient("gradient norm is not finite")
    if total > max_norm:
        scale = max_norm / total
        grads = [(g * scale).astype(g.dtype) for g in grads]
    return grads, total


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              cfg: TrainConfig) -> float:
    """One clipped Adam update applied in place to ``params``.

    Real and imaginary planes are independent real parameters.  Returns the
    gradient norm before clipping.  Non-finite gradients leave parameters
    and moments untouched and raise :class:`NonFiniteGradient`.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient; step rejected")
    grads, norm = clip_grad_norm(grads, cfg.grad_clip)
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_opt)).astype(p.dtype)
    return norm


def _planes(net: WaLiNet):
    for name, p in net.named_parameters():
        yield name, p.real
        yield name, p.imag


def _load_clips(manifest: DatasetManifest, n_samples: int, dtype) -> tuple[list[str], np.ndarray, np.ndarray]:
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    ids, xs, ys = [], [], []
    for rec in manifest.records:
        clean, degraded = manifest.load_pair(rec)
        ids.append(rec.clip_id)
        xs.append(fit_length(degraded, n_samples))
        ys.append(fit_length(clean, n_samples))
    return ids, np.stack(xs).astype(dtype), np.stack(ys).astype(dtype)


def training_step(net: WaLiNet, x: np.ndarray, y: np.ndarray, loss_cfg: MultiResConfig):
    """Forward, loss and backward for one batch; returns the loss value."""
    net.zero_grad()
    with Tape() as tape:
        est = net.forward_wave(x)
        loss = complex_multires_stft_loss(y, est, loss_cfg)
    value = loss.item()
    if not np.isfinite(value):
        return value
    tape.backward(loss)
    return value


def recalibrate_batchnorm(net: WaLiNet, inputs: np.ndarray, batch_size: int = 2) -> None:
    """Replace running statistics by the average batch statistics over ``inputs``.

    Running averages lag behind the weights during short runs; evaluation
    after training uses statistics of the final weights instead.
    """
    norms = [m for m in net.modules() if isinstance(m, ComplexBatchNorm)]
    sums = [None] * len(norms)
    n_batches = 0
    saved = [m.state.momentum for m in norms]
    net.train()
    try:
        for m in norms:
            m.state.momentum = 1.0
        for s in range(0, len(inputs), batch_size):
            net.forward_wave(inputs[s:s + batch_size])
            for i, m in enumerate(norms):
                cur = (m.running_mean.astype(np.float64), m.running_cov.astype(np.float64))
                sums[i] = cur if sums[i] is None else (sums[i][0] + cur[0], sums[i][1] + cur[1])
            n_batches += 1
    finally:
        for m, mom in zip(norms, saved):
            m.state.momentum = mom
    for m, (mean, cov) in zip(norms, sums):
        m.running_mean = (mean / n_batches).astype(m.running_mean.dtype)
        m.running_cov = (cov / n_batches).astype(m.running_cov.dtype)


def write_history(history: list[float], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(float(v))])


def read_history(path) -> list[float]:
    with open(path, newline="") as f:
        return [float(r["loss"]) for r in csv.DictReader(f)]


def fit_arrays(net: WaLiNet, degraded: np.ndarray, clean: np.ndarray, cfg: TrainConfig,
               loss_cfg: MultiResConfig | None = None, state: AdamState | None = None,
               clip_ids: list[str] | None = None, recalibrate: bool = True,
               on_step=None) -> tuple[WaLiNet, list[float], AdamState]:
    """Train on in-memory ``[n_clips, n_samples]`` pairs.

    Each step draws ``min(batch_size, n_clips)`` distinct clips from a
    generator seeded by ``cfg.seed``, so the loss history is reproducible.
    The history holds the loss of every step before its update.
    """
    loss_cfg = loss_cfg or MultiResConfig()
    xs = np.asarray(degraded, dtype=net.config.np_dtype)
    ys = np.asarray(clean, dtype=net.config.np_dtype)
    if xs.shape != ys.shape or xs.ndim != 2:
        raise ValueError(f"need matching [n_clips, n_samples] arrays, got {xs.shape} and {ys.shape}")
    if len(xs) == 0:
        raise ValueError("no training clips")
    ids = clip_ids or [str(i) for i in range(len(xs))]
    planes = [p for _, p in _planes(net)]
    state = state if state is not None else AdamState.zeros_like([p.data for p in planes])
    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch_size, len(xs))
    history: list[float] = []
    net.train()
    for step in range(1, cfg.steps + 1):
        pick = np.sort(rng.choice(len(xs), size=batch, replace=False))
        value = training_step(net, xs[pick], ys[pick], loss_cfg)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step} on clips "
                                     f"{[ids[i] for i in pick]}")
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in planes]
        adam_step([p.data for p in planes], grads, state, cfg)
        history.append(value)
        log.info("step %d loss %.6f", step, value)
        if on_step is not None:
            on_step(step, value, net, state)
    if recalibrate and cfg.steps > 0:
        recalibrate_batchnorm(net, xs, batch)
    net.zero_grad()
    return net, history, state


def fit(net: WaLiNet, manifest: DatasetManifest, cfg: TrainConfig,
        loss_cfg: MultiResConfig | None = None, state: AdamState | None = None,
        history_path=None, checkpoint_dir=None, recalibrate: bool = True,
        ) -> tuple[WaLiNet, list[float], AdamState]:
    """Train ``net`` on the manifest pairs; see :func:`fit_arrays`."""
    ids, xs, ys = _load_clips(manifest, net.config.n_samples, net.config.np_dtype)

    def on_step(step, value, net, state):
        if checkpoint_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step{step:06d}.ckpt", net, state)

    net, history, state = fit_arrays(net, xs, ys, cfg, loss_cfg, state, ids, recalibrate, on_step)
    if history_path is not None:
        write_history(history, history_path)
    return net, history, state


# -- checkpoints ------------------------------------------------------------

def _pack_blob(name: str, planes: list[np.ndarray]) -> bytes:
    shape = planes[0].shape
    key = name.encode()
    head = struct.pack("<H", len(key)) + key + struct.pack("<BB", len(planes), len(shape))
    head += struct.pack(f"<{len(shape)}I", *shape)
    return head + b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in planes)


def save_checkpoint(path, net: WaLiNet, state: AdamState | None = None,
                    extra: dict | None = None) -> Path:
    """Write parameters, BN buffers and Adam moments in the WALI format.

    Layout (little-endian): magic ``WALI``, uint32 version, uint32 length
    plus UTF-8 JSON config, uint64 step, uint32 blob count, then blobs of
    ``uint16 name length, name, uint8 planes, uint8 ndim, uint32 dims,
    float32 data`` with the real plane before the imaginary plane.
    """
    path = Path(path)
    meta = {"network": net.config.to_dict(), **(extra or {})}
    blobs = []
    for name, p in net.named_parameters():
        blobs.append(_pack_blob("param/" + name, [p.real.data, p.imag.data]))
    for name, buf in net.named_buffers():
        blobs.append(_pack_blob("buffer/" + name, [buf]))
    step = 0
    if state is not None and state.m:
        step = state.step
        names = [n for n, _ in _planes(net)]
        for i in range(0, len(names), 2):
            blobs.append(_pack_blob("adam_m/" + names[i], [state.m[i], state.m[i + 1]]))
            blobs.append(_pack_blob("adam_v/" + names[i], [state.v[i], state.v[i + 1]]))
    cfg_bytes = json.dumps(meta, sort_keys=True).encode()
    out = MAGIC + struct.pack("<II", FORMAT_VERSION, len(cfg_bytes)) + cfg_bytes
    out += struct.pack("<QI", step, len(blobs)) + b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(out)
    return path


def _read_blobs(buf: bytes, off: int, count: int) -> dict[str, list[np.ndarray]]:
    blobs = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode()
        off += n
        planes, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arrs = []
        for _ in range(planes):
            if off + 4 * size > len(buf):
                raise CheckpointError(f"truncated checkpoint in blob {name!r}")
            arrs.append(np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape))
            off += 4 * size
        blobs[name] = arrs
    if off != len(buf):
        raise CheckpointError("trailing bytes after the last blob")
    return blobs


def load_checkpoint(path, config: NetworkConfig | None = None
                    ) -> tuple[WaLiNet, AdamState, dict]:
    """Rebuild a network (and optimizer state) from a WALI checkpoint.

    If ``config`` is given it must describe the same geometry as the file.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a WALI checkpoint")
    version, n_cfg = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    meta = json.loads(buf[12:12 + n_cfg].decode())
    off = 12 + n_cfg
    step, count = struct.unpack_from("<QI", buf, off)
    blobs = _read_blobs(buf, off + 12, count)
    file_cfg = NetworkConfig.from_dict(meta["network"])
    if config is not None and config != file_cfg:
        raise CheckpointError("checkpoint geometry does not match the requested network config")
    net = build(file_cfg, seed=0)
    dtype = file_cfg.np_dtype
    for name, p in net.named_parameters():
        key = "param/" + name
        if key not in blobs:
            raise CheckpointError(f"missing parameter {name!r}")
        re, im = blobs[key]
        if re.shape != p.shape:
            raise CheckpointError(f"parameter {name!r} has shape {re.shape}, expected {p.shape}")
        p.real.data = re.astype(dtype)
        p.imag.data = im.astype(dtype)
    for name, buf_arr in list(net.named_buffers()):
        key = "buffer/" + name
        if key not in blobs:
            raise CheckpointError(f"missing buffer {name!r}")
        mod_path, attr = name.rsplit(".", 1)
        mod = _resolve(net, mod_path)
        setattr(mod, attr, blobs[key][0].astype(buf_arr.dtype))
    state = AdamState(step=int(step))
    names = [n for n, _ in _planes(net)]
    if step:
        for i in range(0, len(names), 2):
            mr, mi = blobs["adam_m/" + names[i]]
            vr, vi = blobs["adam_v/" + names[i]]
            state.m += [mr.astype(dtype), mi.astype(dtype)]
            state.v += [vr.astype(dtype), vi.astype(dtype)]
    return net, state, meta


def _resolve(net, dotted: str):
    obj = net
    for part in dotted.split("."):
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    return obj


def finetune(checkpoint, manifest: DatasetManifest, minutes: float, cfg: TrainConfig,
             loss_cfg: MultiResConfig | None = None, history_path=None
             ) -> tuple[WaLiNet, list[float], AdamState]:
    """Resume from ``checkpoint`` on at most ``minutes`` of the victim's audio.

    Clips are taken in manifest order until the budget is filled.
    """
    if minutes < 0:
        raise ValueError("minutes must be >= 0")
    net, state, _ = load_checkpoint(checkpoint)
    budget = minutes * 60.0
    if budget == 0:
        return net, [], state
    total = manifest.total_seconds
    if budget > total + 1e-9:
        raise ValueError(f"budget of {budget:.1f} s exceeds the corpus duration of {total:.1f} s")
    chosen, acc = [], 0.0
    for rec in manifest.records:
        if acc >= budget - 1e-9:
            break
        chosen.append(rec)
        acc += rec.duration_s
    return fit(net, manifest.subset(chosen), cfg, loss_cfg, state, history_path)
