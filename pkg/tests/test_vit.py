"""Encoder model: config contracts, patchify oracles, forward correctness,
attention grids, and checkpoint round-trips."""
import numpy as np
import pytest
from scipy.special import erf

import mlcak.tensor as T
from mlcak.checkpoint import load_checkpoint, read_config, save_checkpoint
from mlcak.errors import ConfigError, ContractError, ParseError, ShapeError
from mlcak.tensor import Tape, Tensor
from mlcak.vit import (
    ForwardTrace,
    ViTConfig,
    attention_grid,
    init_model,
    patchify,
)


def tiny_config(**kw):
    base = dict(image_size=16, patch_size=8, embed_dim=4, depth=2, num_heads=2,
                num_findings=3, num_global_classes=2)
    base.update(kw)
    return ViTConfig.variant("custom", **base)


class TestViTConfig:
    def test_paper_scale_token_count(self):
        cfg = ViTConfig.variant("custom", image_size=224, patch_size=16)
        assert cfg.num_patches == 196
        assert cfg.num_tokens == 197
        assert cfg.grid_size == 14

    def test_small_token_count(self):
        cfg = ViTConfig.variant("custom", image_size=32, patch_size=16)
        assert cfg.num_tokens == 5

    def test_variant_table(self):
        for name, (embed, heads) in {"tiny": (32, 2), "small": (64, 4),
                                     "base": (128, 8)}.items():
            cfg = ViTConfig.variant(name)
            assert (cfg.embed_dim, cfg.num_heads) == (embed, heads)
            assert cfg.depth == 4
            assert cfg.image_size == 64
            assert cfg.patch_size == 8

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ViTConfig.variant("huge")

    def test_all_violations_listed_together(self):
        with pytest.raises(ConfigError) as err:
            ViTConfig(image_size=30, patch_size=8, embed_dim=30, num_heads=4)
        msg = str(err.value)
        assert "image_size" in msg and "embed_dim" in msg


class TestPatchify:
    def test_single_patch_is_flattened_image(self):
        img = np.arange(256, dtype=np.float64).reshape(16, 16)
        out = patchify(img, 16)
        assert out.shape == (1, 256)
        assert np.array_equal(out[0], img.ravel())

    def test_constant_image(self):
        out = patchify(np.full((32, 32), 0.5), 16)
        assert out.shape == (4, 256)
        assert np.array_equal(out, np.full((4, 256), 0.5))

    def test_index_arithmetic(self):
        img = np.arange(16, dtype=np.float64).reshape(4, 4)
        out = patchify(img, 2)
        assert np.array_equal(out[0], [0, 1, 4, 5])
        assert np.array_equal(out[1], [2, 3, 6, 7])
        assert np.array_equal(out[2], [8, 9, 12, 13])
        assert np.array_equal(out[3], [10, 11, 14, 15])

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((4, 6)), 2)

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((5, 5)), 2)


class TestInit:
    def test_deterministic(self):
        cfg = tiny_config()
        a = init_model(cfg, seed=3)
        b = init_model(cfg, seed=3)
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data), name

    def test_seed_changes_weights(self):
        cfg = tiny_config()
        a = init_model(cfg, seed=3)
        b = init_model(cfg, seed=4)
        assert not np.array_equal(a.params["patch_proj.weight"].data,
                                  b.params["patch_proj.weight"].data)

    def test_structured_values(self):
        model = init_model(tiny_config(), seed=0)
        assert model.all_finite()
        assert np.array_equal(model.params["cls_token"].data, np.zeros((1, 1, 4)))
        assert np.array_equal(model.params["blocks.0.ln1.gamma"].data, np.ones(4))
        assert np.array_equal(model.params["mlct_head.bias"].data, np.zeros(3))
        w = model.params["patch_proj.weight"].data
        assert np.abs(w).max() <= 2 * 0.02 + 1e-12
        assert w.std() > 0

    def test_positional_rows(self):
        model = init_model(tiny_config(image_size=32, patch_size=8), seed=0)
        assert model.params["pos_embed"].data.shape == (17, 4)


class TestForward:
    def test_logit_shapes(self):
        model = init_model(tiny_config(), seed=1)
        trace = model.forward(np.random.default_rng(0).uniform(0, 1, (5, 16, 16)))
        assert trace.mlct_logits.data.shape == (5, 3)
        assert trace.mcct_logits.data.shape == (5, 2)
        assert len(trace.hidden_states) == 2
        assert trace.hidden_states[0].data.shape == (5, 5, 4)

    def test_attention_rows_sum_to_one(self):
        model = init_model(tiny_config(), seed=1)
        trace = model.forward(np.random.default_rng(1).uniform(0, 1, (3, 16, 16)))
        for attn in trace.attentions:
            sums = attn.numpy().sum(axis=-1)
            assert np.abs(sums - 1.0).max() < 1e-10

    def test_wrong_size_rejected(self):
        model = init_model(tiny_config(), seed=0)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((2, 8, 8)))

    def test_single_image_is_batch_of_one(self):
        model = init_model(tiny_config(), seed=0)
        img = np.random.default_rng(2).uniform(0, 1, (16, 16))
        single = model.forward(img)
        batch = model.forward(img[None])
        assert np.array_equal(single.mlct_logits.numpy(), batch.mlct_logits.numpy())

    def test_identical_images_identical_traces(self):
        model = init_model(tiny_config(), seed=5)
        img = np.random.default_rng(3).uniform(0, 1, (16, 16))
        trace = model.forward(np.stack([img, img, img]))
        for h in trace.hidden_states:
            arr = h.numpy()
            assert np.array_equal(arr[0], arr[1]) and np.array_equal(arr[1], arr[2])
        logits = trace.mlct_logits.numpy()
        assert np.array_equal(logits[0], logits[1])

    def test_deterministic(self):
        model = init_model(tiny_config(), seed=5)
        img = np.random.default_rng(4).uniform(0, 1, (2, 16, 16))
        a = model.forward(img).mlct_logits.numpy()
        b = model.forward(img).mlct_logits.numpy()
        assert np.array_equal(a, b)

    def test_finding_head_permutation(self):
        model = init_model(tiny_config(num_findings=4), seed=6)
        img = np.random.default_rng(5).uniform(0, 1, (2, 16, 16))
        base = model.forward(img).mlct_logits.numpy()
        perm = np.array([2, 0, 3, 1])
        model.params["mlct_head.weight"].data[:] = \
            model.params["mlct_head.weight"].data[:, perm]
        model.params["mlct_head.bias"].data[:] = \
            model.params["mlct_head.bias"].data[perm]
        permuted = model.forward(img).mlct_logits.numpy()
        assert np.allclose(permuted, base[:, perm], atol=0, rtol=0)

    def test_gradient_reaches_every_parameter(self):
        model = init_model(tiny_config(), seed=7)
        img = np.random.default_rng(6).uniform(0, 1, (2, 16, 16))
        with Tape():
            trace = model.forward(img)
            loss = T.add(T.tsum(T.mul(trace.mlct_logits, trace.mlct_logits)),
                         T.tsum(T.mul(trace.mcct_logits, trace.mcct_logits)))
            loss.backward()
        for name, p in model.params.items():
            assert p.grad is not None, f"no gradient reached {name}"
            assert np.isfinite(p.grad).all(), f"non-finite gradient at {name}"

    def test_hand_traced_minimal_forward(self):
        """Straight-line numpy re-implementation of the depth-1 forward."""
        cfg = tiny_config(image_size=16, patch_size=16, embed_dim=4, depth=1,
                          num_heads=1, num_findings=3)
        model = init_model(cfg, seed=11)
        img = np.random.default_rng(7).uniform(0, 1, (16, 16))
        trace = model.forward(img)

        def ln(x, gamma, beta, eps=1e-6):
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            return (x - mu) / np.sqrt(var + eps) * gamma + beta

        def gelu(x):
            return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))

        p = {k: v.data for k, v in model.params.items()}
        patches = img.reshape(1, 256)  # one 16x16 patch
        tok = patches @ p["patch_proj.weight"] + p["patch_proj.bias"]
        tok = np.concatenate([p["cls_token"][0], tok], axis=0)  # [2, 4]
        tok = tok + p["pos_embed"]

        h = ln(tok, p["blocks.0.ln1.gamma"], p["blocks.0.ln1.beta"])
        q = h @ p["blocks.0.attn.q.weight"] + p["blocks.0.attn.q.bias"]
        k = h @ p["blocks.0.attn.k.weight"] + p["blocks.0.attn.k.bias"]
        v = h @ p["blocks.0.attn.v.weight"] + p["blocks.0.attn.v.bias"]
        scores = q @ k.T / np.sqrt(4.0)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores) / np.exp(scores).sum(axis=-1, keepdims=True)
        tok = tok + ((attn @ v) @ p["blocks.0.attn.out.weight"]
                     + p["blocks.0.attn.out.bias"])
        h2 = ln(tok, p["blocks.0.ln2.gamma"], p["blocks.0.ln2.beta"])
        mlp = gelu(h2 @ p["blocks.0.mlp.fc1.weight"] + p["blocks.0.mlp.fc1.bias"])
        tok = tok + (mlp @ p["blocks.0.mlp.fc2.weight"] + p["blocks.0.mlp.fc2.bias"])
        fin = ln(tok, p["final_ln.gamma"], p["final_ln.beta"])
        cls = fin[0]
        mlct = cls @ p["mlct_head.weight"] + p["mlct_head.bias"]
        mcct = cls @ p["mcct_head.weight"] + p["mcct_head.bias"]

        assert np.allclose(trace.mlct_logits.numpy()[0], mlct, atol=1e-12)
        assert np.allclose(trace.mcct_logits.numpy()[0], mcct, atol=1e-12)
        assert np.allclose(trace.attentions[0].numpy()[0, 0], attn, atol=1e-12)


class TestAttentionGrid:
    def test_sums_to_one(self):
        model = init_model(tiny_config(image_size=32, patch_size=8), seed=2)
        trace = model.forward(np.random.default_rng(8).uniform(0, 1, (1, 32, 32)))
        grid = attention_grid(trace, 1)
        assert grid.shape == (4, 4)
        assert abs(grid.sum() - 1.0) < 1e-10

    def test_uniform_attention(self):
        tokens = 5  # 2x2 grid + cls
        attn = Tensor(np.full((1, 2, tokens, tokens), 1.0 / tokens))
        trace = ForwardTrace(
            hidden_states=[Tensor(np.zeros((1, tokens, 4)))],
            attentions=[attn],
            mlct_logits=Tensor(np.zeros((1, 3))),
            mcct_logits=Tensor(np.zeros((1, 2))),
        )
        grid = attention_grid(trace, 0)
        assert np.allclose(grid, np.full((2, 2), 0.25), atol=1e-12)

    def test_paper_scale_grid(self):
        cfg = ViTConfig.variant("custom", image_size=224, patch_size=16,
                                embed_dim=4, depth=1, num_heads=1)
        model = init_model(cfg, seed=0)
        trace = model.forward(np.zeros((1, 224, 224)))
        assert attention_grid(trace, 0).shape == (14, 14)

    def test_bad_index(self):
        model = init_model(tiny_config(), seed=0)
        trace = model.forward(np.zeros((1, 16, 16)))
        with pytest.raises(ContractError):
            attention_grid(trace, 2)
        with pytest.raises(ContractError):
            attention_grid(trace, -1)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = init_model(tiny_config(), seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for name in model.params:
            assert np.array_equal(loaded.params[name].data,
                                  model.params[name].data), name

    def test_save_is_deterministic(self, tmp_path):
        model = init_model(tiny_config(), seed=9)
        save_checkpoint(model, tmp_path / "a.ckpt")
        save_checkpoint(model, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_read_config_only(self, tmp_path):
        model = init_model(tiny_config(), seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        assert read_config(path) == model.config

    def test_expected_config_mismatch(self, tmp_path):
        model = init_model(tiny_config(), seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        other = tiny_config(embed_dim=8, num_heads=2)
        with pytest.raises(ConfigError):
            load_checkpoint(path, expected_config=other)

    def test_truncation_detected(self, tmp_path):
        model = init_model(tiny_config(), seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[:-16])
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_trailing_bytes_detected(self, tmp_path):
        model = init_model(tiny_config(), seed=9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        (tmp_path / "fat.ckpt").write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "fat.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_params_finite_after_step(self):
        from mlcak.optim import AdamW

        model = init_model(tiny_config(), seed=10)
        img = np.random.default_rng(9).uniform(0, 1, (2, 16, 16))
        opt = AdamW(model.params)
        with Tape():
            trace = model.forward(img)
            loss = T.add(T.tsum(T.mul(trace.mlct_logits, trace.mlct_logits)),
                         T.tsum(T.mul(trace.mcct_logits, trace.mcct_logits)))
            loss.backward()
        opt.step(1e-3)
        assert model.all_finite()
