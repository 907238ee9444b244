"""Forward-pass, masking, attention-capture, and checkpoint tests."""

import numpy as np
import pytest

from fedinv import tensor as T
from fedinv.tensor import Tensor, backward_pass, finite_difference_check
from fedinv.vit import (ForwardTrace, TokenMask, ViTConfig, ViTParams,
                        attention, extract_cls_attention, load_checkpoint,
                        params_from_bytes, params_to_bytes, patchify,
                        pixel_activity, save_checkpoint, vit_forward)


def numpy_forward(params: ViTParams, image: np.ndarray) -> np.ndarray:
    """Straight-line unmasked forward in plain numpy, no tape, no sharing."""
    cfg = params.config
    g, p, c, d = cfg.grid, cfg.patch_size, cfg.channels, cfg.embed_dim

    def w(name):
        return params[name].data

    patches = image.reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4)
    patches = patches.reshape(cfg.num_patches, p * p * c)
    tokens = np.concatenate([w("cls"), patches @ w("patch_w") + w("patch_b")])
    tokens = tokens + w("pos")

    def ln(x, gamma, beta):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * gamma + beta

    def sm(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def gelu(x):
        inner = np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)
        return 0.5 * x * (1 + np.tanh(inner))

    hd = cfg.head_dim
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        h = ln(tokens, w(pre + "ln1_g"), w(pre + "ln1_b"))
        q = h @ w(pre + "wq") + w(pre + "bq")
        k = h @ w(pre + "wk") + w(pre + "bk")
        v = h @ w(pre + "wv") + w(pre + "bv")
        ctx = np.concatenate(
            [sm(q[:, j * hd:(j + 1) * hd] @ k[:, j * hd:(j + 1) * hd].T / np.sqrt(hd))
             @ v[:, j * hd:(j + 1) * hd] for j in range(cfg.num_heads)], axis=1)
        tokens = tokens + ctx @ w(pre + "wo") + w(pre + "bo")
        h2 = ln(tokens, w(pre + "ln2_g"), w(pre + "ln2_b"))
        tokens = tokens + gelu(h2 @ w(pre + "mlp_w1") + w(pre + "mlp_b1")) \
            @ w(pre + "mlp_w2") + w(pre + "mlp_b2")

    final = ln(tokens, w("final_ln_g"), w("final_ln_b"))
    return final[0] @ w("head_w") + w("head_b")


class TestConfig:
    def test_derived_quantities(self, toy_config):
        assert toy_config.num_patches == 16
        assert toy_config.seq_len == 17
        assert toy_config.patch_dim == 16
        assert toy_config.head_dim == 16

    def test_validation(self):
        with pytest.raises(ValueError):
            ViTConfig(image_size=10, patch_size=4)
        with pytest.raises(ValueError):
            ViTConfig(embed_dim=30, num_heads=4)


class TestTokenMask:
    def test_requires_one_active(self):
        with pytest.raises(ValueError):
            TokenMask(np.zeros(4, dtype=bool))

    def test_cls_prepended_active(self):
        m = TokenMask(np.array([True, False]))
        np.testing.assert_array_equal(m.with_cls(), [True, True, False])


class TestPatchify:
    def test_single_patch_reading_order(self):
        cfg = ViTConfig(image_size=4, patch_size=4, embed_dim=8, num_heads=2,
                        num_layers=1, num_classes=2)
        img = Tensor(np.arange(16.0).reshape(4, 4, 1))
        out = patchify(img, cfg)
        np.testing.assert_array_equal(out.data, np.arange(16.0)[None, :])

    def test_constant_image_identical_rows(self, toy_config):
        out = patchify(Tensor(np.full((16, 16, 1), 2.5)), toy_config)
        assert np.all(out.data == 2.5)
        assert out.data.shape == (16, 16)

    def test_ramp_image_matches_index_oracle(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2,
                        num_layers=1, num_classes=2)
        img = np.arange(64.0).reshape(8, 8, 1)
        out = patchify(Tensor(img), cfg).data
        # patch (pi, pj), pixel (a, b): value img[pi*4 + a, pj*4 + b]
        for pi in range(2):
            for pj in range(2):
                for a in range(4):
                    for b in range(4):
                        assert out[pi * 2 + pj, a * 4 + b] == img[pi * 4 + a, pj * 4 + b, 0]

    def test_rejects_wrong_shape(self, toy_config):
        with pytest.raises(ValueError):
            patchify(Tensor(np.zeros((8, 8, 1))), toy_config)

    def test_gradient_is_permutation(self, toy_config, rng):
        x = rng.normal(0, 1, (16, 16, 1))
        w = Tensor(rng.normal(0, 1, (16, 16)))

        def f(t):
            return T.tsum(T.mul(patchify(t, toy_config), w))
        assert finite_difference_check(f, Tensor(x)) < 1e-6


class TestAttention:
    def test_uniform_attention_when_scores_equal(self, tiny_params):
        cfg = tiny_params.config
        tokens = Tensor(np.zeros((cfg.seq_len, cfg.embed_dim)))
        mask = TokenMask.full(cfg.num_patches)
        _, amap, _ = attention(tokens, tiny_params, 0, mask)
        np.testing.assert_allclose(amap, 1.0 / cfg.seq_len, atol=1e-12)

    def test_masked_columns_get_exactly_zero(self, tiny_params, rng):
        cfg = tiny_params.config
        tokens = Tensor(rng.normal(0, 1, (cfg.seq_len, cfg.embed_dim)))
        mask = TokenMask(np.array([True, False, True, False]))
        _, amap, _ = attention(tokens, tiny_params, 0, mask)
        assert np.all(amap[:, :, [2, 4]] == 0.0)
        np.testing.assert_allclose(amap.sum(axis=2), 1.0, atol=1e-10)

    def test_two_token_hand_oracle(self):
        cfg = ViTConfig(image_size=4, patch_size=4, embed_dim=2, num_heads=1,
                        num_layers=1, num_classes=2)
        params = ViTParams.init(cfg, seed=0, init_std=0.0)
        params.tensors["layers.0.wq"].data[:] = np.eye(2)
        params.tensors["layers.0.wk"].data[:] = np.eye(2)
        params.tensors["layers.0.wv"].data[:] = np.eye(2)
        tokens = np.array([[1.0, 0.0], [0.0, 2.0]])
        _, amap, _ = attention(Tensor(tokens), params, 0,
                               TokenMask(np.array([True])))
        scores = tokens @ tokens.T / np.sqrt(2.0)
        expect = np.exp(scores - scores.max(axis=1, keepdims=True))
        expect /= expect.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(amap[0], expect, atol=1e-12)

    def test_singleton_softmax_is_one(self):
        out = T.masked_softmax(Tensor(np.array([[4.2]])), np.array([True]), axis=1)
        np.testing.assert_array_equal(out.data, [[1.0]])


class TestForward:
    def test_full_mask_equals_omitted(self, tiny_params, rng):
        img = Tensor(rng.normal(0, 1, (8, 8, 1)))
        a = vit_forward(tiny_params, img)
        b = vit_forward(tiny_params, img, TokenMask.full(4))
        np.testing.assert_array_equal(a.logits.data, b.logits.data)

    def test_zero_weights_give_head_bias(self, tiny_config, rng):
        params = ViTParams.init(tiny_config, seed=0, init_std=0.0)
        params.tensors["head_b"].data[:] = [0.5, -1.0, 2.0]
        img = Tensor(rng.normal(0, 1, (8, 8, 1)))
        trace = vit_forward(params, img)
        np.testing.assert_array_equal(trace.logits.data, [0.5, -1.0, 2.0])

    def test_matches_straight_line_reimplementation(self, rng):
        cfg = ViTConfig()  # 2 layers, 2 heads
        params = ViTParams.init(cfg, seed=3)
        img = rng.normal(0, 1, (16, 16, 1))
        ours = vit_forward(params, Tensor(img)).logits.data
        oracle = numpy_forward(params, img)
        np.testing.assert_allclose(ours, oracle, atol=1e-10)

    def test_trace_shapes(self, tiny_params, rng):
        cfg = tiny_params.config
        trace = vit_forward(tiny_params, Tensor(rng.normal(0, 1, (8, 8, 1))))
        assert len(trace.attention) == cfg.num_layers
        assert trace.attention[0].shape == (cfg.num_heads, cfg.seq_len, cfg.seq_len)
        assert trace.token_states[0].shape == (cfg.seq_len, cfg.embed_dim)
        assert trace.cls_attention.shape == (cfg.num_patches,)

    def test_every_parameter_gradient_vs_finite_differences(self, tiny_config, rng):
        params = ViTParams.init(tiny_config, seed=4)
        img = Tensor(np.random.default_rng(202).normal(0, 1, (8, 8, 1)))
        worst = 0.0
        for name in params.names():
            def f(t, name=name):
                work = params.clone()
                work.tensors[name] = t
                return T.cross_entropy_logits(vit_forward(work, img).logits, 2)
            err = finite_difference_check(
                f, Tensor(params[name].data.copy()), h=1e-5)
            worst = max(worst, err)
        assert worst < 1e-4

    def test_masked_patch_pixels_get_exactly_zero_gradient(self, toy_config, rng):
        params = ViTParams.init(toy_config, seed=5)
        mask = TokenMask(np.array([True] * 10 + [False] * 6))
        x = Tensor(rng.normal(0, 1, (16, 16, 1)), requires_grad=True)
        trace = vit_forward(params, x, mask)
        backward_pass(T.cross_entropy_logits(trace.logits, 2))
        per_patch = x.grad.reshape(4, 4, 4, 4, 1).transpose(0, 2, 1, 3, 4)
        per_patch = per_patch.reshape(16, -1)
        assert np.all(per_patch[10:] == 0.0)
        assert np.abs(per_patch[:10]).max() > 0.0

    def test_masked_token_states_are_zero_everywhere(self, toy_config, rng):
        params = ViTParams.init(toy_config, seed=5)
        mask = TokenMask(np.array([True] * 12 + [False] * 4))
        trace = vit_forward(params, Tensor(rng.normal(0, 1, (16, 16, 1))), mask)
        for states in trace.token_states:
            assert np.all(states[13:] == 0.0)

    def test_permuting_patches_and_positions_keeps_logits(self, toy_config, rng):
        params = ViTParams.init(toy_config, seed=5)
        img = rng.normal(0, 1, (16, 16, 1))
        base = vit_forward(params, Tensor(img)).logits.data

        # swap patches (0,0) and (1,2) in pixel space and in position table
        img2 = img.copy()
        img2[0:4, 0:4], img2[4:8, 8:12] = img[4:8, 8:12].copy(), img[0:4, 0:4].copy()
        p2 = params.clone()
        pos = p2.tensors["pos"].data
        i, j = 1 + 0, 1 + 6   # sequence slots of patches 0 and 6 (cls is slot 0)
        pos[[i, j]] = pos[[j, i]]
        swapped = vit_forward(p2, Tensor(img2)).logits.data
        np.testing.assert_allclose(base, swapped, atol=1e-10)


class TestClsAttention:
    def test_uniform_single_head(self):
        trace = ForwardTrace(
            logits=Tensor(np.zeros(2)),
            attention=[np.full((1, 5, 5), 0.2)],
            token_states=[np.zeros((5, 4))],
            cls_attention=np.zeros(4),
            mask=TokenMask.full(4))
        np.testing.assert_allclose(extract_cls_attention(trace), 0.25, atol=1e-12)

    def test_masked_entry_zero_with_renormalization(self, toy_config, rng):
        params = ViTParams.init(toy_config, seed=5)
        mask = TokenMask(np.array([True] * 15 + [False]))
        trace = vit_forward(params, Tensor(rng.normal(0, 1, (16, 16, 1))), mask)
        a = extract_cls_attention(trace)
        assert a[15] == 0.0
        np.testing.assert_allclose(a.sum(), 1.0, atol=1e-12)

    def test_two_head_average_matches_hand_oracle(self):
        row_a = np.array([0.4, 0.1, 0.2, 0.3])
        row_b = np.array([0.1, 0.4, 0.3, 0.2])
        amap = np.zeros((2, 4, 4))
        amap[0, 0, 1:] = row_a[:3] / row_a[:3].sum() * 0.9
        amap[0, 0, 0] = 0.1
        amap[1, 0, 1:] = row_b[:3] / row_b[:3].sum() * 0.8
        amap[1, 0, 0] = 0.2
        trace = ForwardTrace(
            logits=Tensor(np.zeros(2)), attention=[amap],
            token_states=[np.zeros((4, 4))], cls_attention=np.zeros(3),
            mask=TokenMask.full(3))
        mean_row = (amap[0, 0, 1:] + amap[1, 0, 1:]) / 2
        np.testing.assert_allclose(
            extract_cls_attention(trace), mean_row / mean_row.sum(), atol=1e-12)


class TestPixelActivity:
    def test_expansion(self, toy_config):
        mask = TokenMask(np.array([True] + [False] * 15))
        px = pixel_activity(mask, toy_config)
        assert px.shape == (16, 16, 1)
        assert px[:4, :4].sum() == 16.0
        assert px.sum() == 16.0


class TestCheckpoints:
    def test_round_trip_bytes(self, tiny_params):
        blob = params_to_bytes(tiny_params)
        back = params_from_bytes(blob)
        assert back.config == tiny_params.config
        assert tiny_params.equal(back)

    def test_round_trip_file(self, tiny_params, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(tiny_params, path)
        assert tiny_params.equal(load_checkpoint(path))

    def test_truncated_checkpoint(self, tiny_params):
        blob = params_to_bytes(tiny_params)
        with pytest.raises(ValueError):
            params_from_bytes(blob[: len(blob) // 2])

    def test_clone_independence(self, tiny_params):
        clone = tiny_params.clone()
        clone.tensors["head_b"].data[:] = 9.0
        assert not np.any(tiny_params.tensors["head_b"].data == 9.0)
