"""Network assembly, geometry and inference."""

import numpy as np
import pytest

from wali.attention import CgabConfig, ConformerConfig
from wali.config import toy_config
from wali.core import finite_diff_gradcheck
from wali.dsp import StftConfig
from wali.network import NetworkConfig, _chunk_starts, build, reconstruct

# regression constant: real scalars (both planes) of the default geometry
DEFAULT_PARAMETERS = 5979496


@pytest.fixture(scope="module")
def toy_net():
    return build(toy_config().network, seed=0)


def test_default_structure():
    net = build(NetworkConfig())
    assert len(net.encoders) == 8 and len(net.skips) == 8 and len(net.decoders) == 8
    assert len(net.cgabs) == 2 and sorted(net._cgab_at) == [1, 7]
    assert len(net.conformer.layers) == 2
    assert net.num_parameters() == DEFAULT_PARAMETERS


def test_default_geometry_forward_batch_two():
    net = build(NetworkConfig())
    cfg = net.config
    assert (cfg.n_freq, cfg.n_frames) == (256, 251)
    x = 0.1 * np.random.default_rng(0).standard_normal((2, cfg.n_samples)).astype(np.float32)
    S = net.analyze(x)
    Y = net(S)
    assert Y.shape == S.shape == (2, 1, 256, 251)
    assert np.all(np.isfinite(Y.numpy()))


def test_same_seed_same_parameters():
    a = build(toy_config().network, seed=3)
    b = build(toy_config().network, seed=3)
    c = build(toy_config().network, seed=4)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.numpy(), pb.numpy())
    assert any(not np.array_equal(p.numpy(), q.numpy()) for p, q in zip(a.parameters(), c.parameters()))


def test_toy_config_runs(toy_net):
    cfg = toy_net.config
    assert cfg.n_freq == 32 and cfg.n_freq % 2 ** cfg.depth == 0
    x = 0.1 * np.random.default_rng(1).standard_normal(cfg.n_samples)
    y = toy_net.forward_wave(x[None].astype(np.float32))
    assert y.shape == (1, cfg.n_samples)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(depth=3, channels=(8, 16))
    with pytest.raises(ValueError):
        NetworkConfig(depth=3, channels=(8, 16, 16), stft=StftConfig(48, 24))
    with pytest.raises(ValueError):
        NetworkConfig(depth=3, channels=(8, 16, 16), stft=StftConfig(64, 32), cgab_placement=(4,))
    with pytest.raises(ValueError):
        NetworkConfig(depth=3, channels=(2, 16, 16), stft=StftConfig(64, 32),
                      cgab=CgabConfig(c_attn=5), cgab_placement=(1,))


def test_config_dict_roundtrip():
    cfg = toy_config().network
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_wrong_input_geometry(toy_net):
    from wali.core import ComplexTensor
    with pytest.raises(ValueError, match="expects"):
        toy_net(ComplexTensor(np.zeros((1, 1, 16, 10), np.float32)))


def test_depth2_end_to_end_gradient():
    cfg = NetworkConfig(depth=2, channels=(3, 4), stft=StftConfig(32, 16),
                        conformer=ConformerConfig(d_model=4, n_heads=1, d_ff=8, conv_kernel=3, n_layers=1),
                        cgab=CgabConfig(c_attn=2, kernel=3), cgab_placement=(1,),
                        clip_seconds=0.01, dtype="float64")
    assert cfg.n_freq == 16
    net = build(cfg, seed=1)
    rng = np.random.default_rng(2)
    S = net.analyze(rng.standard_normal((2, cfg.n_samples)))
    w = rng.standard_normal(S.shape)

    def loss(s, *params):
        y = net(s)
        return (y.real * w).sum() + (y.imag * w).sum()

    assert finite_diff_gradcheck(loss, [S] + net.parameters(), max_coords=80) < 1e-4


def test_reconstruct_zero_and_lengths(toy_net):
    n = toy_net.config.n_samples
    fresh = build(toy_config().network, seed=0)
    assert np.max(np.abs(reconstruct(fresh, np.zeros(n)))) < 1e-6
    for length in (n // 3, n, int(2.3 * n)):
        y = reconstruct(toy_net, 0.1 * np.random.default_rng(length).standard_normal(length))
        assert y.shape == (length,)
        assert np.all(np.isfinite(y)) and np.max(np.abs(y)) <= 1.0


def test_reconstruct_upsamples_sensor_rate(toy_net):
    y = reconstruct(toy_net, np.random.default_rng(3).standard_normal(500), fs_in=500)
    assert y.shape == (8000,)
    with pytest.raises(ValueError, match="divide"):
        reconstruct(toy_net, np.zeros(300), fs_in=300)


def test_chunk_starts_cover_signal():
    for n, win in [(100, 100), (250, 100), (1000, 320)]:
        starts = _chunk_starts(n, win)
        assert starts[0] == 0 and starts[-1] + win >= n
        assert all(b - a <= win // 2 for a, b in zip(starts, starts[1:]))
