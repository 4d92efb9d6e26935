"""Complex MHSA, conformer bottleneck and the global attention block."""

import numpy as np
import pytest

from wali.attention import (
    CGAB,
    CgabConfig,
    ComplexConformer,
    ComplexMHSA,
    ConformerConfig,
    ConformerLayer,
    complex_mhsa,
)
from wali.core import ComplexTensor, finite_diff_gradcheck
from wali.core.complex import c_matmul
from wali.layers import crelu

F64 = np.float64


def crand(rng, *shape):
    return ComplexTensor(rng.standard_normal(shape), rng.standard_normal(shape))


def weighted(y, seed=0):
    rng = np.random.default_rng(seed)
    return (y.real * rng.standard_normal(y.shape)).sum() + (y.imag * rng.standard_normal(y.shape)).sum()


def test_single_token_returns_value_projection():
    rng = np.random.default_rng(0)
    m = ComplexMHSA(4, 2, rng, F64)
    x = crand(rng, 1, 1, 4)
    out, w = m.attend(x)
    np.testing.assert_allclose(w.data, 1.0)
    np.testing.assert_allclose(out.numpy(), m.out(m.v(x)).numpy(), atol=1e-12)


def test_identical_tokens_attend_uniformly():
    rng = np.random.default_rng(1)
    m = ComplexMHSA(4, 2, rng, F64)
    tok = crand(rng, 1, 1, 4).numpy()
    x = ComplexTensor.from_numpy(np.repeat(tok, 6, axis=1))
    _, w = m.attend(x)
    np.testing.assert_allclose(w.data, 1 / 6, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    m = ComplexMHSA(8, 2, rng, F64)
    x = crand(rng, 3, 7, 8)
    _, w = m.attend(x)
    # independent recomputation of the logits and the normalization
    q, k = m.q(x).numpy().reshape(3, 7, 2, 4), m.k(x).numpy().reshape(3, 7, 2, 4)
    logits = np.einsum("nshd,nthd->nhst", q, np.conj(k)).real / 2.0
    ref = np.exp(logits - logits.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(w.data, ref, atol=1e-12)


def test_heads_must_divide_model_width():
    with pytest.raises(ValueError, match="divisible"):
        ComplexMHSA(6, 4, np.random.default_rng(0))
    with pytest.raises(ValueError, match="divisible"):
        ConformerConfig(d_model=6, n_heads=4)


def test_mhsa_gradient():
    rng = np.random.default_rng(3)
    m = ComplexMHSA(4, 2, rng, F64)
    err = finite_diff_gradcheck(lambda x, *p: weighted(complex_mhsa(x, m)),
                                [crand(rng, 2, 5, 4)] + m.parameters(), max_coords=60)
    assert err < 1e-4


def test_conformer_shapes_and_zero_input():
    rng = np.random.default_rng(4)
    cfg = ConformerConfig(d_model=8, n_heads=2, d_ff=16, conv_kernel=3, n_layers=2)
    conf = ComplexConformer(4, cfg, rng, F64)
    x = crand(rng, 2, 3, 4, 6)
    assert conf(x).shape == x.shape
    z = np.zeros((2, 3, 4, 6))
    np.testing.assert_allclose(conf(ComplexTensor(z, z)).numpy(), 0.0, atol=1e-12)
    with pytest.raises(ValueError, match="F=4"):
        conf(crand(rng, 1, 1, 5, 6))


def test_conformer_layer_gradient():
    rng = np.random.default_rng(5)
    layer = ConformerLayer(ConformerConfig(d_model=4, n_heads=2, d_ff=8, conv_kernel=3, n_layers=1),
                           rng, F64)
    err = finite_diff_gradcheck(lambda x, *p: weighted(layer(x)),
                                [crand(rng, 2, 5, 4)] + layer.parameters(), max_coords=60)
    assert err < 1e-4


def _cgab(rng, channels=3, F=4, Tn=5):
    return CGAB(channels, CgabConfig(c_attn=2, fixed_F=F, fixed_T=Tn, kernel=3), rng, F64)


def test_cgab_shape_zero_and_geometry():
    rng = np.random.default_rng(6)
    blk = _cgab(rng)
    x = crand(rng, 2, 3, 4, 5)
    assert blk(x).shape == x.shape
    z = np.zeros((2, 3, 4, 5))
    np.testing.assert_allclose(blk(ComplexTensor(z, z)).numpy(), 0.0, atol=1e-12)
    with pytest.raises(ValueError, match="built for"):
        blk(crand(rng, 2, 3, 4, 6))
    with pytest.raises(ValueError, match="c_attn"):
        CGAB(1, CgabConfig(c_attn=2, fixed_F=4, fixed_T=5), rng)
    with pytest.raises(ValueError, match="fixed"):
        CGAB(3, CgabConfig(c_attn=2), rng)


def test_cgab_reduces_to_fusion_of_three_copies():
    rng = np.random.default_rng(7)
    blk = _cgab(rng)
    blk.freq_fc = ComplexTensor(np.eye(4), np.zeros((4, 4)))
    blk.time_fc = ComplexTensor(np.eye(5), np.zeros((5, 5)))
    x = crand(rng, 2, 3, 4, 5)
    ones = ComplexTensor(np.ones((2, 1, 4, 5)), np.zeros((2, 1, 4, 5)))
    got = blk.combine(x, ones, ones).numpy()
    stacked = ComplexTensor.from_numpy(np.concatenate([x.numpy()] * 3, axis=1))
    want = crelu(blk.norm(blk.fuse(stacked))).numpy()
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_cgab_time_fc_mixes_frames():
    rng = np.random.default_rng(8)
    x = crand(rng, 1, 1, 2, 3)
    fc = crand(rng, 3, 3)
    np.testing.assert_allclose(c_matmul(x, fc).numpy(), x.numpy() @ fc.numpy(), atol=1e-12)


def test_cgab_gradient():
    rng = np.random.default_rng(9)
    blk = _cgab(rng)
    err = finite_diff_gradcheck(lambda x, *p: weighted(blk(x)),
                                [crand(rng, 2, 3, 4, 5)] + blk.parameters(), max_coords=60)
    assert err < 1e-4
