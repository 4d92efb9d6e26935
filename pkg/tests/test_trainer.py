"""Adam, clipping, the training loop, checkpoints and fine-tuning."""

import numpy as np
import pytest

from wali.attention import CgabConfig, ConformerConfig
from wali.channel import SimConfig, build_dataset, fit_length, simulate_sensor, write_wav
from wali.dsp import StftConfig
from wali.loss import complex_multires_stft_loss
from wali.network import NetworkConfig, build
from wali.synth import synthetic_speech
from wali.trainer import (
    AdamState,
    CheckpointError,
    NonFiniteGradient,
    TrainConfig,
    adam_step,
    clip_grad_norm,
    finetune,
    fit,
    fit_arrays,
    load_checkpoint,
    read_history,
    save_checkpoint,
)

# 2000-sample clips, about 0.1 s per training step
TINY = NetworkConfig(depth=2, channels=(4, 8), stft=StftConfig(32, 16),
                     conformer=ConformerConfig(d_model=8, n_heads=1, d_ff=16, conv_kernel=3, n_layers=1),
                     cgab=CgabConfig(c_attn=2, kernel=3), cgab_placement=(1,), clip_seconds=0.25)


def pairs(seeds, n=TINY.n_samples):
    clean = np.stack([synthetic_speech(0.25, 8000, seed=s) for s in seeds])
    degraded = np.stack([fit_length(simulate_sensor(x, SimConfig()).degraded, n) for x in clean])
    return degraded, clean


def corpus(root, seeds):
    for s in seeds:
        write_wav(root / "clean" / f"v{s}.wav", synthetic_speech(0.25, 8000, seed=s), 8000)
    return build_dataset(root / "clean", None, SimConfig(clip_seconds=0.25), root / "sim")


# -- optimizer ----------------------------------------------------------------

def test_adam_first_step_on_quadratic():
    w = np.array([1.0])
    adam_step([w], [2 * w.copy()], AdamState(), TrainConfig(lr=0.1))
    # bias-corrected m/sqrt(v) is exactly 1, less the eps in the denominator
    assert w[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_converges_on_quadratic():
    w = np.array([1.0])
    state, cfg = AdamState(), TrainConfig(lr=0.1)
    for _ in range(200):
        adam_step([w], [2 * w.copy()], state, cfg)
    assert abs(w[0]) < 1e-2 and state.step == 200


def test_zero_gradient_from_rest_keeps_parameters():
    w = np.array([0.5, -0.5])
    state = AdamState()
    for _ in range(3):
        adam_step([w], [np.zeros(2)], state, TrainConfig())
    np.testing.assert_array_equal(w, [0.5, -0.5])
    assert not state.m[0].any() and not state.v[0].any()


def test_zero_gradient_decays_moments():
    w = np.array([0.5, -0.5])
    state = AdamState([np.array([0.2, 0.2])], [np.array([0.01, 0.01])], 3)
    adam_step([w], [np.zeros(2)], state, TrainConfig())
    np.testing.assert_allclose(state.m[0], 0.9 * 0.2)
    np.testing.assert_allclose(state.v[0], 0.999 * 0.01)
    # momentum alone still moves the weights, in the direction of the old gradient
    assert np.all(w < [0.5, -0.5])


def test_clip_bounds_global_norm():
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal(30) * 10, rng.standard_normal((4, 4)) * 10]
    clipped, before = clip_grad_norm(grads, 5.0)
    after = np.sqrt(sum(np.sum(g ** 2) for g in clipped))
    assert before > 5.0 and after <= 5.0 + 1e-6
    small = [np.array([0.1])]
    assert clip_grad_norm(small, 5.0)[0][0] is small[0]


def test_non_finite_gradient_is_rejected():
    w = np.array([1.0, 2.0])
    state = AdamState.zeros_like([w])
    with pytest.raises(NonFiniteGradient):
        adam_step([w], [np.array([np.nan, 0.0])], state, TrainConfig())
    np.testing.assert_array_equal(w, [1.0, 2.0])
    assert state.step == 0 and not state.m[0].any()


def test_adam_shape_checks_and_config_validation():
    with pytest.raises(ValueError, match="shape"):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState(), TrainConfig())
    for bad in ({"lr": 0}, {"betas": (0.9, 1.0)}, {"batch_size": 0}, {"grad_clip": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- training loop ------------------------------------------------------------

def test_zero_steps_leave_net_unchanged():
    net = build(TINY, seed=0)
    before = [p.numpy().copy() for p in net.parameters()]
    _, history, _ = fit_arrays(net, *pairs([0]), TrainConfig(steps=0))
    assert history == []
    for a, p in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, p.numpy())


def test_same_seed_same_history():
    d, c = pairs([0, 1, 2])
    cfg = TrainConfig(lr=1e-3, steps=4, seed=9)
    h1 = fit_arrays(build(TINY, seed=0), d, c, cfg)[1]
    h2 = fit_arrays(build(TINY, seed=0), d, c, cfg)[1]
    assert len(h1) == 4 and h1 == h2


def test_history_csv_and_periodic_checkpoints(tmp_path):
    m = corpus(tmp_path, [0])
    cfg = TrainConfig(lr=1e-3, steps=4, checkpoint_every=2)
    _, history, _ = fit(build(TINY, seed=0), m, cfg, history_path=tmp_path / "h.csv",
                        checkpoint_dir=tmp_path / "ck")
    assert read_history(tmp_path / "h.csv") == history
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["step000002.ckpt", "step000004.ckpt"]


def test_mismatched_pairs():
    with pytest.raises(ValueError, match="matching"):
        fit_arrays(build(TINY), np.zeros((1, 2000)), np.zeros((1, 1999)), TrainConfig())


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_identical(tmp_path):
    d, c = pairs([0, 1])
    net, _, state = fit_arrays(build(TINY, seed=0), d, c, TrainConfig(lr=1e-3, steps=2))
    net.eval()
    want = net.forward_wave(d.astype(np.float32)).numpy()
    save_checkpoint(tmp_path / "m.ckpt", net, state)
    loaded, state2, meta = load_checkpoint(tmp_path / "m.ckpt")
    loaded.eval()
    np.testing.assert_array_equal(loaded.forward_wave(d.astype(np.float32)).numpy(), want)
    assert state2.step == 2
    for a, b in zip(state.m + state.v, state2.m + state2.v):
        np.testing.assert_array_equal(a, b)
    assert NetworkConfig.from_dict(meta["network"]) == TINY


def test_checkpoint_errors(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", build(TINY))
    other = NetworkConfig(depth=2, channels=(4, 8), stft=StftConfig(32, 16), clip_seconds=0.5,
                          conformer=TINY.conformer, cgab=TINY.cgab, cgab_placement=(1,))
    with pytest.raises(CheckpointError, match="geometry"):
        load_checkpoint(path, other)
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="not a WALI"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")


# -- fine-tuning --------------------------------------------------------------

@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pre")
    net, _, state = fit_arrays(build(TINY, seed=0), *pairs([0, 1, 2]), TrainConfig(lr=1e-3, steps=20))
    return save_checkpoint(root / "pre.ckpt", net, state)


def test_finetune_zero_budget_returns_checkpoint(pretrained, tmp_path):
    m = corpus(tmp_path, [10])
    net, history, _ = finetune(pretrained, m, 0.0, TrainConfig())
    ref, _, _ = load_checkpoint(pretrained)
    assert history == []
    for p, q in zip(net.parameters(), ref.parameters()):
        np.testing.assert_array_equal(p.numpy(), q.numpy())


def test_finetune_budget_over_corpus(pretrained, tmp_path):
    m = corpus(tmp_path, [10, 11])
    with pytest.raises(ValueError, match="0.5 s"):
        finetune(pretrained, m, 1.0, TrainConfig())


def test_finetune_reduces_held_out_loss(pretrained, tmp_path):
    m = corpus(tmp_path, [10, 11])
    pairs_ = [m.load_pair(r) for r in m.records]
    clean = np.stack([fit_length(c, TINY.n_samples) for c, _ in pairs_])
    degraded = np.stack([fit_length(d, TINY.n_samples) for _, d in pairs_]).astype(np.float32)

    def held_out(net):
        net.eval()
        return complex_multires_stft_loss(clean, net.forward_wave(degraded).numpy()).item()

    frozen = held_out(load_checkpoint(pretrained)[0])
    net, history, state = finetune(pretrained, m, 0.5 / 60, TrainConfig(lr=3e-3, steps=60, seed=1))
    assert state.step == 20 + 60 and len(history) == 60
    after = held_out(net)
    assert after < frozen
