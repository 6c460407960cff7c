import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from skadapter.acceptance import random_tree, scalar_grpe, tiny_config
from skadapter.adapter import AdapterBlock, build_model, inject, trainable_inventory
from skadapter.backbone import (
    Backbone,
    decode_latent,
    encode_occupancy,
    latent_mask_from_voxel_box,
    timestep_features,
)
from skadapter.encoder import GRPEAttention, SkeletonEncoder, collate_skeletons, encode_skeleton, grpe_score_terms
from skadapter.errors import ConfigMismatch, MaskOutOfBounds, OutOfRange, ShapeMismatch
from skadapter.nn_core import TEST_DTYPE, Linear, ModelConfig, ParamStore, count_params

D64 = TEST_DTYPE


def grpe(f=8, seed=0):
    torch.manual_seed(seed)
    return GRPEAttention(f).to(D64)


class TestGRPE:
    def test_matches_scalar_loops(self):
        rng = np.random.default_rng(1)
        attn = grpe()
        skel = random_tree(rng, 6)
        batch = collate_skeletons([skel], 5, D64)
        x = torch.randn(1, 6, 8, dtype=D64)
        params = {n: p.detach().tolist() for n, p in attn.named_parameters()}
        ref = scalar_grpe(x[0].tolist(), params, batch.D[0].tolist(), batch.R[0].tolist())
        assert np.allclose(attn.attend(x, batch.D, batch.R)[0].detach().numpy(), ref, atol=1e-12)

    def test_zero_codebooks_is_plain_attention(self):
        attn = grpe()
        for book in attn.codebooks():
            book.data.zero_()
        batch = collate_skeletons([random_tree(np.random.default_rng(2), 5)], 5, D64)
        x = torch.randn(1, 5, 8, dtype=D64)
        q, k, v = attn.q(x), attn.k(x), attn.v(x)
        ref = torch.softmax(q @ k.transpose(-1, -2) / np.sqrt(8), -1) @ v
        assert torch.allclose(attn.attend(x, batch.D, batch.R), ref)

    def test_score_scaling(self):
        gen = torch.Generator().manual_seed(0)
        q, k = torch.randn(4, 8, generator=gen, dtype=D64), torch.randn(4, 8, generator=gen, dtype=D64)
        books = [torch.randn(6, 8, generator=gen, dtype=D64) for _ in range(4)]
        Dm = torch.randint(0, 6, (4, 4), generator=gen)
        Rm = torch.randint(0, 6, (4, 4), generator=gen)
        dot, ad, ar = grpe_score_terms(q, k, *books, Dm, Rm)
        c = 2.5
        dot2, ad2, ar2 = grpe_score_terms(c * q, c * k, *books, Dm, Rm)
        assert torch.allclose(dot2, c * c * dot) and torch.allclose(ad2, c * ad) and torch.allclose(ar2, c * ar)
        _, ad3, ar3 = grpe_score_terms(q, k, *[c * b for b in books], Dm, Rm)
        assert torch.allclose(ad3, c * ad) and torch.allclose(ar3, c * ar)

    def test_topology_shape_mismatch(self):
        attn = grpe()
        batch = collate_skeletons([random_tree(np.random.default_rng(0), 4)], 5, D64)
        with pytest.raises(ShapeMismatch):
            attn.attend(torch.zeros(1, 5, 8, dtype=D64), batch.D, batch.R)

    def test_codebook_count(self):
        assert sum(b.numel() for b in grpe(16).codebooks()) == 36 * 16


class TestEncoder:
    def make(self):
        torch.manual_seed(0)
        return SkeletonEncoder(tiny_config()).to(D64)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 12))
    def test_permutation_equivariance(self, seed, n):
        enc = self.make()
        rng = np.random.default_rng(seed)
        skel = random_tree(rng, n)
        perm = rng.permutation(n)
        a = encode_skeleton(enc, skel)
        b = encode_skeleton(enc, skel.permuted(perm))
        assert torch.allclose(b, a[perm], atol=1e-10)

    def test_padding_does_not_change_real_tokens(self):
        enc = self.make()
        rng = np.random.default_rng(5)
        small, big = random_tree(rng, 4), random_tree(rng, 9)
        batch = collate_skeletons([small, big], 5, D64)
        out = enc(batch)
        assert torch.allclose(out[0, :4], encode_skeleton(enc, small), atol=1e-12)
        assert torch.allclose(out[1], encode_skeleton(enc, big), atol=1e-12)

    def test_topology_matters(self):
        enc = self.make()
        joints = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]], dtype=float)
        from skadapter.skeleton import validate_skeleton

        chain = encode_skeleton(enc, validate_skeleton(joints, [-1, 0, 1]))
        star = encode_skeleton(enc, validate_skeleton(joints, [-1, 0, 0]))
        assert not torch.allclose(chain, star)


class TestLatentCodec:
    def test_block_constant_round_trip(self):
        rng = np.random.default_rng(0)
        coarse = rng.random((8, 8, 8)) < 0.3
        occ = coarse.repeat(2, 0).repeat(2, 1).repeat(2, 2)
        assert np.array_equal(decode_latent(encode_occupancy(occ)), occ)

    def test_single_voxel_pools_to_one_eighth(self):
        occ = np.zeros((16, 16, 16), dtype=bool)
        occ[3, 4, 5] = True
        z = encode_occupancy(occ, dtype=torch.float64)
        assert z.shape == (512, 4)
        cell = 1 * 64 + 2 * 8 + 2
        assert z[cell, 0].item() * 0.15 + 0.0375 == pytest.approx(1 / 8)
        assert torch.all(z[:, 1:] == 0)
        assert not decode_latent(z).any()

    def test_bad_resolution(self):
        with pytest.raises(ShapeMismatch):
            encode_occupancy(np.zeros((12, 12, 12)))
        with pytest.raises(ShapeMismatch):
            encode_occupancy(np.zeros((16, 16, 8)))

    def test_mask_box(self):
        mask = latent_mask_from_voxel_box((1, 0, 0, 4, 16, 2), 16)
        assert mask.sum() == 2 * 8 * 1
        assert mask[0:2, :, 0].all()
        with pytest.raises(MaskOutOfBounds):
            latent_mask_from_voxel_box((0, 0, 0, 17, 1, 1), 16)


class TestBackbone:
    def test_shapes_and_labels(self):
        torch.manual_seed(0)
        bb = Backbone(tiny_config())
        z = torch.randn(2, bb.n_tokens, 4)
        out = bb(z, torch.tensor([0.3, 0.7]), torch.tensor([0, bb.null_label]))
        assert out.shape == z.shape
        with pytest.raises(ShapeMismatch):
            bb(torch.randn(2, 7, 4), 0.5, 0)
        with pytest.raises(OutOfRange):
            bb(z, torch.tensor([1.5, 0.0]), 0)

    def test_timestep_features_distinct(self):
        f = timestep_features(torch.tensor([0.0, 0.5, 1.0]), 16)
        assert f.shape == (3, 16)
        assert not torch.allclose(f[0], f[1]) and not torch.allclose(f[1], f[2])


class TestAdapter:
    def test_null_signal_at_init(self):
        cfg = tiny_config()
        model = build_model(cfg, seed=0, dtype=D64)
        rng = np.random.default_rng(0)
        batch = collate_skeletons([random_tree(rng, 5), random_tree(rng, 7)], cfg.d_max, D64)
        z = torch.randn(2, model.backbone.n_tokens, cfg.latent_channels, dtype=D64)
        t, lbl = torch.tensor([0.2, 0.9], dtype=D64), torch.tensor([1, 2])
        assert torch.equal(model(z, t, lbl, batch), model.backbone(z, t, lbl))

    def test_inject_zero_projection_is_identity(self):
        h = torch.randn(3, 5, 8)
        assert torch.equal(inject(h, torch.randn(3, 5, 8), Linear(8, 8, zero_init=True)), h)
        with pytest.raises(ShapeMismatch):
            inject(h, torch.randn(3, 4, 8), Linear(8, 8, zero_init=True))

    def test_block_rejects_feature_mismatch(self):
        block = AdapterBlock(8, 2)
        with pytest.raises(ShapeMismatch):
            block.cross_attention(torch.randn(1, 4, 8), torch.randn(1, 3, 6))

    def test_trainable_set_and_inventory(self):
        cfg = ModelConfig()
        model = build_model(cfg)
        store = ParamStore.from_module(model)
        assert all(not p.requires_grad for p in model.backbone.parameters())
        assert all(n.startswith(("encoder.", "adapter.")) for n in store.trainable_names())
        inv = trainable_inventory(store)
        acc = count_params(cfg)
        for row in acc.rows:
            assert inv[row.layer] == row.total

    def test_partial_hooks(self):
        cfg = tiny_config(hooked_blocks=(1,))
        model = build_model(cfg)
        assert model.hooked == [1]

    def test_attach_rejects_wrong_block_count(self):
        from skadapter.adapter import attach_adapter, make_adapter

        with pytest.raises(ConfigMismatch):
            attach_adapter(Backbone(tiny_config()), make_adapter(tiny_config(hooked_blocks=(0,))),
                           SkeletonEncoder(tiny_config()))

    def test_build_model_is_seeded(self):
        a, b = build_model(tiny_config(), seed=3), build_model(tiny_config(), seed=3)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q)


class TestAdapterAttention:
    def block(self, dim=8, heads=2, seed=0):
        torch.manual_seed(seed)
        block = AdapterBlock(dim, heads).to(D64)
        for p in block.parameters():
            torch.nn.init.normal_(p, std=0.5)
        return block

    def test_single_token_gives_same_output_everywhere(self):
        block = self.block()
        out = block.cross_attention(torch.randn(1, 6, 8, dtype=D64), torch.randn(1, 1, 8, dtype=D64))
        assert torch.allclose(out, out[:, :1].expand_as(out), rtol=0, atol=1e-12)

    def test_duplicated_tokens_change_nothing(self):
        block = self.block()
        h = torch.randn(2, 5, 8, dtype=D64)
        s = torch.randn(2, 1, 8, dtype=D64)
        a = block.cross_attention(h, s)
        b = block.cross_attention(h, torch.cat([s, s, s], dim=1))
        assert torch.allclose(a, b, rtol=0, atol=1e-12)

    def test_two_voxels_two_joints_by_hand(self):
        dim = 4
        block = self.block(dim, heads=1, seed=3)
        h = torch.randn(1, 2, dim, dtype=D64)
        s = torch.randn(1, 2, dim, dtype=D64)
        with torch.no_grad():
            got = block(h, s)[0]

        def ln(x, m):
            mu = sum(x) / dim
            var = sum((v - mu) ** 2 for v in x) / dim
            return [(x[i] - mu) / (var + m.eps) ** 0.5 * m.scale[i].item() + m.shift[i].item() for i in range(dim)]

        def lin(x, m):
            return [sum(x[i] * m.weight[i, j].item() for i in range(dim)) + m.bias[j].item() for j in range(dim)]

        hs = [[v.item() for v in row] for row in h[0]]
        ss = [[v.item() for v in row] for row in s[0]]
        keys = [lin(ln(x, block.norm_s), block.k) for x in ss]
        vals = [lin(ln(x, block.norm_s), block.v) for x in ss]
        for n in range(2):
            q = lin(ln(hs[n], block.norm_h), block.q)
            scores = [sum(a * b for a, b in zip(q, k)) / dim**0.5 for k in keys]
            w = [np.exp(x - max(scores)) for x in scores]
            w = [x / sum(w) for x in w]
            attn = [w[0] * vals[0][j] + w[1] * vals[1][j] for j in range(dim)]
            want = [hs[n][j] + v for j, v in enumerate(lin(lin(attn, block.o), block.zero))]
            assert np.allclose(got[n].numpy(), want, rtol=0, atol=1e-12)


def test_timestep_embed_gradients():
    from skadapter.backbone import TimestepEmbed
    from skadapter.nn_core import module_grad_check

    torch.manual_seed(0)
    embed = TimestepEmbed(8).to(D64)
    t = torch.tensor([0.0, 0.3, 1.0], dtype=D64)
    assert module_grad_check(embed, lambda: embed(t)) < 1e-6
