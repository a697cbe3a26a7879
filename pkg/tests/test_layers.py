import numpy as np
import pytest

from deskml import layers as L
from deskml import rng as R
from deskml import tensor as T
from deskml.tensor import Tensor
from gradcheck import check_grads


def key(seed=0):
    return R.RngKey.from_seed(seed)


def rand(k, shape, dtype="f64"):
    return Tensor(R.normal(k, shape), dtype=dtype)


def as_f64(params):
    return {k: v.astype("f64") for k, v in params.items()}


class TestNamespacing:
    def test_prefixed_scoped_roundtrip(self):
        d = {"w": Tensor(np.ones(2)), "b": Tensor(np.zeros(2))}
        assert L.scoped(L.prefixed("enc/fc1", d), "enc/fc1").keys() == d.keys()

    def test_merge_is_left_to_right(self):
        out = L.merge({"a": 1}, {"a": 2, "b": 3})
        assert out == {"a": 2, "b": 3}


class TestDense:
    def test_zero_weight_gives_bias(self):
        p = {"w": T.zeros((3, 2)), "b": Tensor(np.array([1.0, -1.0], np.float32))}
        out = L.dense(Tensor(np.ones((4, 3), np.float32)), p)
        assert np.allclose(out.data, [[1.0, -1.0]] * 4)

    def test_he_uniform_bounds(self):
        w = L.he_uniform(key(1), (200, 100), fan_in=200)
        limit = np.sqrt(6.0 / 200)
        assert np.abs(w.data).max() <= limit
        assert np.abs(w.data).max() > 0.8 * limit

    def test_grad(self):
        p = as_f64(L.init_dense(key(2), 3, 4))
        x = R.normal(key(3), (2, 3))
        check_grads(lambda q: T.tsum(L.dense(Tensor(x), q) ** 2.0), p, rtol=1e-4)


class TestNorms:
    def test_layer_norm_output_standardized(self):
        p = L.init_layer_norm(8)
        out = L.layer_norm(rand(key(4), (5, 8), "f32"), p)
        assert np.abs(out.data.mean(-1)).max() < 1e-5
        assert np.abs(out.data.std(-1) - 1.0).max() < 1e-3

    def test_batch_norm_running_stats_update_rule(self):
        p, s = L.init_batch_norm(2)
        x = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]], np.float32))
        _, new_s = L.batch_norm(x, p, s, train=True, momentum=0.9)
        # mu' = 0.9*0 + 0.1*batch_mean; var' = 0.9*1 + 0.1*batch_var
        assert np.allclose(new_s["mean"].data, [0.2, 0.4])
        assert np.allclose(new_s["var"].data, [1.0, 1.3])

    def test_batch_norm_eval_uses_stored_stats(self):
        p, s = L.init_batch_norm(3)
        x = rand(key(5), (10, 3), "f32")
        y, new_s = L.batch_norm(x, p, s, train=False)
        assert new_s is s
        assert np.allclose(y.data, x.data / np.sqrt(1.0 + 1e-5), atol=1e-6)

    def test_layer_norm_grad(self):
        p = {k: v.astype("f64") for k, v in L.init_layer_norm(4).items()}
        x = R.normal(key(6), (3, 4))
        check_grads(lambda q: T.tsum(L.layer_norm(Tensor(x), q) ** 2.0), p,
                    rtol=1e-4)


class TestDropout:
    def test_off_in_eval(self):
        x = rand(key(7), (4, 4), "f32")
        assert L.dropout(x, 0.5, train=False, key=None) is x

    def test_preserves_expectation(self):
        x = Tensor(np.ones((100, 100), np.float32))
        out = L.dropout(x, 0.25, train=True, key=key(8))
        kept = out.data != 0
        assert abs(kept.mean() - 0.75) < 0.02
        assert np.allclose(out.data[kept], 1.0 / 0.75)

    def test_requires_key(self):
        with pytest.raises(ValueError, match="rng key"):
            L.dropout(Tensor(np.ones(3, np.float32)), 0.5, train=True, key=None)


class TestAttention:
    def test_single_token_attends_to_itself(self):
        # with one key/value position, softmax weights are exactly 1
        p = as_f64(L.init_attention(key(9), 8))
        x = rand(key(10), (2, 1, 8))
        out = L.multi_head_attention(x, x, x, heads=2, p=p)
        v = L.dense(x, L.scoped(p, "v"))
        ref = L.dense(v, L.scoped(p, "o"))
        assert np.allclose(out.data, ref.data, atol=1e-12)

    def test_matches_direct_formula(self):
        d, heads = 6, 2
        p = as_f64(L.init_attention(key(11), d))
        x = R.normal(key(12), (1, 3, d))
        out = L.multi_head_attention(Tensor(x), Tensor(x), Tensor(x),
                                     heads=heads, p=p).data

        def lin(name, inp):
            return inp @ L.scoped(p, name)["w"].data + L.scoped(p, name)["b"].data

        q, k, v = lin("q", x[0]), lin("k", x[0]), lin("v", x[0])
        dh = d // heads
        heads_out = []
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            e = np.exp(logits - logits.max(-1, keepdims=True))
            w = e / e.sum(-1, keepdims=True)
            heads_out.append(w @ v[:, sl])
        ref = lin("o", np.concatenate(heads_out, -1))
        assert np.allclose(out[0], ref, atol=1e-10)

    def test_mask_forbids_positions(self):
        p = as_f64(L.init_attention(key(13), 4))
        x = rand(key(14), (1, 3, 4))
        # forbid attending to position 2 entirely
        mask = np.zeros((1, 1, 3, 3))
        mask[..., 2] = -1e9
        out_masked = L.multi_head_attention(x, x, x, 2, p, mask=Tensor(mask))
        x2 = Tensor(x.data.copy())
        x2.data[0, 2] += 100.0  # changing the masked position's value...
        k_changed = L.multi_head_attention(
            Tensor(x.data[:, :2]), x2, x2, 2, p, mask=Tensor(mask[..., :2, :]))
        k_ref = L.multi_head_attention(
            Tensor(x.data[:, :2]), x, x, 2, p, mask=Tensor(mask[..., :2, :]))
        assert np.allclose(k_changed.data, k_ref.data, atol=1e-10)
        assert out_masked.shape == (1, 3, 4)

    def test_dim_head_mismatch(self):
        p = as_f64(L.init_attention(key(15), 6))
        x = rand(key(16), (1, 2, 6))
        with pytest.raises(ValueError, match="heads"):
            L.multi_head_attention(x, x, x, heads=4, p=p)

    def test_grad(self):
        p = as_f64(L.init_attention(key(17), 4))
        x = R.normal(key(18), (1, 3, 4))
        check_grads(
            lambda q: T.tsum(L.multi_head_attention(
                Tensor(x), Tensor(x), Tensor(x), 2, q) ** 2.0),
            p, rtol=1e-4)


class TestBlocks:
    def test_transformer_block_residual_identity(self):
        # zero attention/MLP output weights reduce the block to identity
        p = as_f64(L.init_transformer_block(key(19), 8, 16))
        p["attn/o/w"] = T.zeros((8, 8), dtype="f64")
        p["mlp/fc2/w"] = T.zeros((16, 8), dtype="f64")
        p["attn/o/b"] = T.zeros((8,), dtype="f64")
        p["mlp/fc2/b"] = T.zeros((8,), dtype="f64")
        x = rand(key(20), (2, 5, 8))
        out = L.transformer_block(x, p, heads=2)
        assert np.allclose(out.data, x.data, atol=1e-12)

    def test_transformer_block_grad(self):
        p = as_f64(L.init_transformer_block(key(21), 4, 8))
        x = R.normal(key(22), (1, 3, 4))
        check_grads(lambda q: T.tsum(L.transformer_block(Tensor(x), q, 2) ** 2.0),
                    p, rtol=1e-4)

    def test_decoder_block_shapes_and_grad(self):
        p = as_f64(L.init_decoder_block(key(23), 4, 8))
        x = R.normal(key(24), (1, 2, 4))
        mem = R.normal(key(25), (1, 5, 4))
        out = L.decoder_block(Tensor(x), Tensor(mem), p, heads=2)
        assert out.shape == (1, 2, 4)
        check_grads(
            lambda q: T.tsum(L.decoder_block(Tensor(x), Tensor(mem), q, 2) ** 2.0),
            p, rtol=1e-4)

    def test_mixer_block_shape_and_grad(self):
        p = as_f64(L.init_mixer_block(key(26), tokens=4, dim=6,
                                      token_mlp=3, channel_mlp=5))
        x = R.normal(key(27), (2, 4, 6))
        out = L.mixer_block(Tensor(x), p)
        assert out.shape == (2, 4, 6)
        check_grads(lambda q: T.tsum(L.mixer_block(Tensor(x), q) ** 2.0),
                    p, rtol=1e-4)

    def test_resnet_block_shapes(self):
        p, s = L.init_resnet_block(key(28), 3, 8, stride=2)
        p, s = as_f64(p), as_f64(s)
        x = rand(key(29), (2, 8, 8, 3))
        y, new_s = L.resnet_block(x, p, s, train=True, stride=2)
        assert y.shape == (2, 4, 4, 8)
        assert set(new_s) == set(s)

    def test_resnet_block_eval_leaves_state(self):
        p, s = L.init_resnet_block(key(30), 4, 4)
        x = rand(key(31), (2, 5, 5, 4), "f32")
        _, new_s = L.resnet_block(x, p, s, train=False)
        for name in s:
            assert np.array_equal(new_s[name].data, s[name].data)

    def test_resnet_block_grad(self):
        p, s = L.init_resnet_block(key(32), 2, 2)
        p, s = as_f64(p), as_f64(s)
        x = R.normal(key(33), (1, 4, 4, 2))
        check_grads(
            lambda q: T.tsum(L.resnet_block(Tensor(x), q, s, train=True)[0] ** 2.0),
            p, rtol=1e-4)


class TestUNetPieces:
    def test_down_up_roundtrip_shapes(self):
        kd, ku = R.split(key(34), 2)
        pd = as_f64(L.init_double_conv(kd, 1, 4))
        pu = as_f64(L.init_double_conv(ku, 8, 4))
        x = rand(key(35), (1, 8, 8, 1))
        skip, pooled = L.unet_down(x, pd)
        assert skip.shape == (1, 8, 8, 4)
        assert pooled.shape == (1, 4, 4, 4)
        out = L.unet_up(pooled, skip, pu)
        assert out.shape == (1, 8, 8, 4)

    def test_up_validates_skip(self):
        p = as_f64(L.init_double_conv(key(36), 4, 2))
        x = rand(key(37), (1, 2, 2, 2))
        with pytest.raises(ValueError, match="skip"):
            L.unet_up(x, rand(key(38), (1, 7, 7, 2)), p)
        with pytest.raises(ValueError, match="skip"):
            L.unet_up(x, None, p)

    def test_double_conv_grad(self):
        p = as_f64(L.init_double_conv(key(39), 1, 2))
        x = R.normal(key(40), (1, 4, 4, 1))
        check_grads(lambda q: T.tsum(L.double_conv(Tensor(x), q) ** 2.0),
                    p, rtol=1e-4)


class TestPatching:
    def test_token_count(self):
        p = as_f64(L.init_patch_embed(key(41), patch=4, cin=3, dim=16))
        out = L.patch_embed(rand(key(42), (2, 8, 12, 3)), p, patch=4)
        assert out.shape == (2, 6, 16)

    def test_indivisible_rejected(self):
        p = as_f64(L.init_patch_embed(key(43), 3, 1, 4))
        with pytest.raises(ValueError, match="divisible"):
            L.patch_embed(rand(key(44), (1, 8, 8, 1)), p, patch=3)

    def test_equivalent_to_strided_conv(self):
        patch, cin, dim = 2, 3, 5
        p = as_f64(L.init_patch_embed(key(45), patch, cin, dim))
        x = rand(key(46), (2, 6, 6, cin))
        tokens = L.patch_embed(x, p, patch).data
        # same projection expressed as a stride-`patch` convolution
        kernel = p["w"].data.reshape(patch, patch, cin, dim)
        conv_out = T.conv2d(x, Tensor(kernel), stride=patch,
                            padding="valid").data + p["b"].data
        assert np.allclose(tokens, conv_out.reshape(2, 9, dim), atol=1e-10)

    def test_positional_embedding_breaks_permutation_symmetry(self):
        p = as_f64(L.init_positional_embedding(key(47), 4, 6))
        x = rand(key(48), (1, 4, 6))
        out = L.add_positional_embedding(x, p).data
        perm = [2, 0, 3, 1]
        out_perm = L.add_positional_embedding(
            Tensor(x.data[:, perm]), p).data
        assert not np.allclose(out[:, perm], out_perm)

    def test_patch_embed_grad(self):
        p = as_f64(L.init_patch_embed(key(49), 2, 1, 3))
        x = R.normal(key(50), (1, 4, 4, 1))
        check_grads(lambda q: T.tsum(L.patch_embed(Tensor(x), q, 2) ** 2.0),
                    p, rtol=1e-4)
