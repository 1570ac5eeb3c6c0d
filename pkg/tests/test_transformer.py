import numpy as np
import pytest

from dagseg import tensor
from dagseg.gradcheck import numerical_grad
from dagseg.gates import NonLocalAttention, SelfAttentionVariant
from dagseg.transformer import MultiHeadSelfAttention, TransformerBlock, TransformerConfig, mhsa

import oracles
from conftest import assert_grads


def small_cfg(**kw):
    base = dict(embed_dim=6, num_heads=2, head_dim=3, mlp_ratio=2.0)
    base.update(kw)
    return TransformerConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = TransformerConfig()
        assert (cfg.embed_dim, cfg.num_heads, cfg.head_dim, cfg.mlp_dim) == (128, 4, 128, 128)

    def test_positional_encoding_rejected(self):
        with pytest.raises(ValueError):
            TransformerConfig(use_positional_encoding=True)

    def test_per_head_params_at_width_128(self):
        assert TransformerConfig(embed_dim=128).per_head_params() == 65920

    @pytest.mark.parametrize("e,d,r", [(8, 8, 1.0), (16, 4, 2.0), (6, 3, 0.5)])
    def test_param_count_is_affine_in_heads(self, e, d, r):
        counts = [TransformerBlock(TransformerConfig(e, h, d, r)).param_count() for h in range(1, 6)]
        steps = np.diff(counts)
        assert (steps == TransformerConfig(e, 1, d, r).per_head_params()).all()


class TestAttention:
    def test_matches_loop_oracle(self, rng):
        attn = MultiHeadSelfAttention(small_cfg(), rng)
        x = rng.normal(size=(2, 2, 3, 6))
        p = [attn.query, attn.key, attn.value, attn.out]
        args = [a for lin in p for a in (lin.weight.data, lin.bias.data)]
        ref = oracles.mhsa_loop(x, *args, heads=2, head_dim=3)
        np.testing.assert_allclose(mhsa(tensor(x), attn).data, ref, rtol=1e-11, atol=1e-11)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            MultiHeadSelfAttention(small_cfg(), rng)(tensor(np.zeros((1, 2, 2, 5))))

    def test_mhsa_grad(self, rng):
        attn = MultiHeadSelfAttention(small_cfg(), rng)
        x = tensor(rng.normal(size=(1, 2, 3, 6)), requires_grad=True)
        w = rng.normal(size=x.shape)
        assert_grads(lambda: (attn(x) * w).sum(), [x, *nonvanishing(attn)])

    def test_block_grad(self, rng):
        block = TransformerBlock(small_cfg(), rng)
        x = tensor(rng.normal(size=(1, 3, 3, 6)), requires_grad=True)
        w = rng.normal(size=x.shape)
        assert_grads(lambda: (block(x) * w).sum(), [x, *nonvanishing(block)])

    def test_key_bias_gradient_vanishes(self, rng):
        # q . b_k is constant along each softmax row, so it cancels
        attn = MultiHeadSelfAttention(small_cfg(), rng)
        attn.key.bias.data[:] = rng.normal(size=6)
        x = tensor(rng.normal(size=(1, 2, 3, 6)))
        w = rng.normal(size=x.shape)
        f = lambda: (attn(x) * w).sum()
        f().backward()
        assert np.abs(attn.key.bias.grad).max() < 1e-12
        assert np.abs(numerical_grad(f, attn.key.bias)).max() < 1e-8


def nonvanishing(module):
    return [p for n, p in module.named_parameters() if not n.endswith("key.bias")]


def _permute_tokens(x, perm):
    n, h, w, c = x.shape
    return x.reshape(n, h * w, c)[:, perm].reshape(n, h, w, c)


class TestPermutationEquivariance:
    @pytest.mark.parametrize("seed", range(5))
    def test_mhsa_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        attn = MultiHeadSelfAttention(small_cfg(num_heads=3), rng)
        x = rng.normal(size=(1, 3, 4, 6))
        perm = rng.permutation(12)
        a = _permute_tokens(attn(tensor(x)).data, perm)
        b = attn(tensor(_permute_tokens(x, perm))).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("seed", range(5))
    def test_block_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        block = TransformerBlock(small_cfg(), rng)
        x = rng.normal(size=(1, 2, 5, 6))
        perm = rng.permutation(10)
        a = _permute_tokens(block(tensor(x)).data, perm)
        b = block(tensor(_permute_tokens(x, perm))).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("seed", range(5))
    def test_weightless_nonlocal_bitwise(self, seed):
        rng = np.random.default_rng(seed)
        block = NonLocalAttention(5, SelfAttentionVariant.WEIGHTLESS)
        x = rng.normal(size=(1, 3, 4, 5))
        perm = rng.permutation(12)
        a = _permute_tokens(block(tensor(x)).data, perm)
        b = block(tensor(_permute_tokens(x, perm))).data
        assert np.array_equal(a, b)
