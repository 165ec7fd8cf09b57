import math

import numpy as np
import pytest

from msa2net import blocks as B
from msa2net.errors import ConfigError
from msa2net.tensor import Tensor, count_macs, precision

from oracles import gradcheck_fn, gradcheck_params


def _double(factory):
    with precision("double"):
        return factory()


def _randomize_affine(module, seed):
    """Move norms and biases off their init values so their gradients are exercised."""
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        if p.ndim == 1:
            p.data += 0.2 * rng.standard_normal(p.shape)


BLOCKS = {
    "lka": lambda: B.LKABlock(B.BlockConfig(4), np.random.default_rng(0)),
    "dae": lambda: B.DAEBlock(B.BlockConfig(4, attn_heads=2), np.random.default_rng(1)),
    "mbconv": lambda: B.MBConv(4, 4, 1, rng=np.random.default_rng(2)),
    "mbconv_down": lambda: B.MBConv(4, 6, 2, rng=np.random.default_rng(3)),
    "patch_expand": lambda: B.PatchExpand(4, rng=np.random.default_rng(4)),
    "ffn": lambda: B.FFN(B.BlockConfig(4, ffn_expand=2), np.random.default_rng(5)),
}


@pytest.mark.parametrize("name", sorted(BLOCKS))
def test_block_parameter_gradients(name):
    m = _double(BLOCKS[name])
    _randomize_affine(m, 10)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 4, 6, 6))
    r = rng.standard_normal(m(Tensor(x)).shape)
    loss = lambda: (m(Tensor(x)) * Tensor(r)).sum()
    assert gradcheck_params(loss, m.parameters(), samples=3) <= 1e-3


@pytest.mark.parametrize("name", sorted(BLOCKS))
def test_block_input_gradients(name):
    m = _double(BLOCKS[name])
    x = np.random.default_rng(12).standard_normal((1, 4, 6, 6))
    assert gradcheck_fn(m, [x], samples=25) <= 1e-3


@pytest.mark.parametrize("name", sorted(BLOCKS))
def test_block_macs_exact(name):
    m = BLOCKS[name]()
    x = Tensor(np.random.default_rng(13).standard_normal((2, 4, 8, 8)).astype(np.float32))
    with count_macs() as c:
        m(x)
    assert c.total == m.macs(2, 8, 8)


@pytest.mark.parametrize("cls", [B.LKABlock, B.DAEBlock])
def test_zero_init_blocks_are_identity(cls):
    m = cls(B.BlockConfig(8), np.random.default_rng(0), zero_init=True)
    x = np.random.default_rng(1).standard_normal((1, 8, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(m(Tensor(x)).data, x)


def test_mbconv_residual_rule():
    assert B.MBConv(8, 8, 1).residual
    assert not B.MBConv(8, 16, 1).residual
    assert not B.MBConv(8, 8, 2).residual
    m = B.MBConv(8, 8, 1, zero_init=True)
    x = np.ones((1, 8, 4, 4), dtype=np.float32)
    np.testing.assert_array_equal(m(Tensor(x)).data, x)
    assert B.MBConv(8, 16, 2)(Tensor(x)).shape == (1, 16, 2, 2)
    with pytest.raises(ConfigError):
        B.MBConv(8, 8, 3)


def test_patch_expand_shape():
    m = B.PatchExpand(8)
    assert m(Tensor(np.zeros((2, 8, 3, 3), dtype=np.float32))).shape == (2, 4, 6, 6)
    assert B.PatchExpand(8, 5)(Tensor(np.zeros((1, 8, 2, 2), dtype=np.float32))).shape == (1, 5, 4, 4)


def test_efficient_attention_closed_form():
    """Compare against the token-major formulation written out with explicit transposes."""
    rng = np.random.default_rng(14)
    q, k, v = rng.standard_normal((3, 2, 4, 3, 3))
    out = B.efficient_attention(Tensor(q), Tensor(k), Tensor(v), heads=2).data
    for n in range(2):
        for h in range(2):
            sl = slice(2 * h, 2 * h + 2)
            qt = q[n, sl].reshape(2, 9).T     # tokens x d
            kt = k[n, sl].reshape(2, 9).T
            vt = v[n, sl].reshape(2, 9).T
            qs = np.exp(qt) / np.exp(qt).sum(axis=1, keepdims=True)
            ks = np.exp(kt) / np.exp(kt).sum(axis=0, keepdims=True)
            ref = qs @ (ks.T @ vt)            # tokens x d
            np.testing.assert_allclose(out[n, sl].reshape(2, 9).T, ref, atol=1e-12)


def test_channel_attention_map_rows_are_simplex():
    rng = np.random.default_rng(15)
    q, k, v = rng.standard_normal((3, 1, 6, 4, 4))
    out, a = B.channel_attention(Tensor(q), Tensor(k), Tensor(v), heads=2, return_map=True)
    assert a.shape == (1, 2, 3, 3)
    np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-12)
    # token-major reference for head 0
    qt, kt, vt = (t[0, :3].reshape(3, 16).T for t in (q, k, v))
    logits = kt.T @ qt / math.sqrt(16)
    att = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    ref = vt @ att
    np.testing.assert_allclose(out.data[0, :3].reshape(3, 16).T, ref, atol=1e-12)


def test_block_config_validation():
    with pytest.raises(ConfigError):
        B.BlockConfig(6, attn_heads=4)
    with pytest.raises(ConfigError):
        B.BlockConfig(0)
