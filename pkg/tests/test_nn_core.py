import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import load_golden
from skadapter.errors import CheckpointError, IndexOutOfRange, ShapeMismatch
from skadapter.nn_core import (
    CHECKPOINT_MAGIC,
    Linear,
    ModelConfig,
    ParamStore,
    biased_attention,
    count_params,
    decode_checkpoint,
    embedding_lookup,
    encode_checkpoint,
    grad_check,
    layer_norm,
    linear,
    make_optimizer,
    module_grad_check,
    multihead_attention,
    numerical_grad,
    sinusoidal_features,
    softmax_rows,
)

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


class TestPrimitivesAgainstTorch:
    def test_linear(self):
        x, w, b = rand(5, 3), rand(3, 4, seed=1), rand(4, seed=2)
        assert torch.allclose(linear(w, b, x), F.linear(x, w.T, b))

    def test_linear_shape_error(self):
        with pytest.raises(ShapeMismatch):
            linear(rand(3, 4), None, rand(5, 2))

    def test_embedding(self):
        table = rand(6, 3)
        idx = torch.tensor([[0, 5], [2, 2]])
        assert torch.equal(embedding_lookup(table, idx), F.embedding(idx, table))
        with pytest.raises(IndexOutOfRange):
            embedding_lookup(table, torch.tensor([6]))

    def test_layer_norm(self):
        x, g, b = rand(4, 7), rand(7, seed=1), rand(7, seed=2)
        assert torch.allclose(layer_norm(g, b, x), F.layer_norm(x, (7,), g, b, eps=1e-5))

    def test_softmax_with_mask(self):
        x = rand(3, 5)
        mask = torch.tensor([True, False, True, True, False])
        out = softmax_rows(x, mask)
        ref = torch.softmax(x.masked_fill(~mask, -math.inf), dim=-1)
        assert torch.allclose(out, ref)
        assert torch.all(out[:, ~mask] == 0)

    def test_softmax_stable_for_large_inputs(self):
        out = softmax_rows(torch.tensor([[1000.0, 1000.0]], dtype=D))
        assert torch.allclose(out, torch.tensor([[0.5, 0.5]], dtype=D))

    def test_biased_attention_brute_force(self):
        q, k, v = rand(3, 4), rand(5, 4, seed=1), rand(5, 4, seed=2)
        sb, vb = rand(3, 5, seed=3), rand(3, 5, 4, seed=4)
        out = biased_attention(q, k, v, sb, vb)
        for i in range(3):
            s = torch.stack([(q[i] @ k[j] + sb[i, j]) / 2.0 for j in range(5)])
            a = torch.softmax(s, 0)
            ref = sum(a[j] * (v[j] + vb[i, j]) for j in range(5))
            assert torch.allclose(out[i], ref)

    @pytest.mark.parametrize("fused", [True, False])
    def test_multihead_matches_torch_mha(self, fused):
        q, k, v = rand(2, 6, 8), rand(2, 5, 8, seed=1), rand(2, 5, 8, seed=2)
        mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
        out = multihead_attention(q, k, v, 2, key_mask=mask, fused=fused)
        qh, kh, vh = (x.reshape(2, -1, 2, 4).transpose(1, 2) for x in (q, k, v))
        ref = F.scaled_dot_product_attention(qh, kh, vh, attn_mask=mask[:, None, None, :])
        assert torch.allclose(out, ref.transpose(1, 2).reshape(2, 6, 8))

    def test_fused_and_reference_paths_agree(self):
        q, k, v = rand(1, 7, 12), rand(1, 7, 12, seed=1), rand(1, 7, 12, seed=2)
        assert torch.allclose(multihead_attention(q, k, v, 3), multihead_attention(q, k, v, 3, fused=False))

    def test_sinusoidal_layout(self):
        x = torch.tensor([[0.25, 0.0, -0.5]], dtype=D)
        feats = sinusoidal_features(x, 2)
        assert feats.shape == (1, 12)
        expected = [math.sin(math.pi / 4), math.sin(math.pi / 2), math.cos(math.pi / 4), math.cos(math.pi / 2),
                    0, 0, 1, 1,
                    math.sin(-math.pi / 2), math.sin(-math.pi), math.cos(-math.pi / 2), math.cos(-math.pi)]
        assert np.allclose(feats[0].numpy(), expected, atol=1e-15)


class TestGradCheck:
    def test_catches_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return x * x

            @staticmethod
            def backward(ctx, g):
                (x,) = ctx.saved_tensors
                return g * x  # should be 2x

        assert grad_check(Bad.apply, [rand(4)]) > 0.4

    def test_numerical_grad_of_quadratic(self):
        x = rand(5)
        g = numerical_grad(lambda: (x * x).sum(), x, 1e-5)
        assert torch.allclose(g, 2 * x, atol=1e-8)

    def test_numerical_grad_subset(self):
        x = rand(6)
        g = numerical_grad(lambda: (x**3).sum(), x, 1e-5, entries=torch.tensor([1, 4]))
        assert g[0] == 0 and g[2] == 0
        assert torch.allclose(g[[1, 4]], 3 * x[[1, 4]] ** 2, atol=1e-8)

    def test_zero_gradient_counts_as_exact(self):
        assert grad_check(lambda x, y: x * 2.0 + 0.0 * y, [rand(3), rand(3, seed=1)]) < 1e-7

    def test_refuses_float32(self):
        with pytest.raises(TypeError):
            grad_check(lambda x: x * 2, [torch.ones(3)], wrt=[0])

    def test_module_check(self):
        torch.manual_seed(0)
        lin = Linear(4, 3).double()
        x = rand(5, 4)
        assert module_grad_check(lin, lambda: torch.tanh(lin(x))) < 1e-6
        assert module_grad_check(lin, lambda: torch.tanh(lin(x)), max_entries=3) < 1e-6


class TestAccounting:
    @pytest.mark.parametrize("golden,f,l", [
        ("param_accounting_f1024_l24.json", 1024, 24),
        ("param_accounting_f64_l4.json", 64, 4),
    ])
    def test_golden(self, golden, f, l):
        ref = load_golden(golden)
        acc = count_params(ModelConfig(feature_dim=f, n_backbone_blocks=l, n_heads=4))
        for name, row in ref["rows"].items():
            assert (acc.row(name).units, acc.row(name).per_unit) == (row["units"], row["per_unit"])
        assert acc.total == ref["total"]
        assert acc.codebook_params_per_unit == ref["codebooks_per_unit"]

    def test_joint_embedding_outside_total(self):
        acc = count_params(ModelConfig())
        assert acc.total_with_extras - acc.total == 24 * 64 + 64

    def test_format_table_mentions_total(self):
        assert "151,316,480" in count_params(ModelConfig(feature_dim=1024, n_backbone_blocks=24)).format_table()

    def test_hooked_subset(self):
        acc = count_params(ModelConfig(hooked_blocks=(0, 2)))
        assert acc.row("Skeletal Cross-Attention").units == 2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 16).map(lambda k: 4 * k), st.integers(1, 6))
    def test_linear_in_blocks(self, f, l):
        a = count_params(ModelConfig(feature_dim=f, n_backbone_blocks=l)).total
        b = count_params(ModelConfig(feature_dim=f, n_backbone_blocks=l + 1)).total
        c = count_params(ModelConfig(feature_dim=f, n_backbone_blocks=l + 2)).total
        assert c - b == b - a == 5 * (f * f + f) + 4 * f

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(feature_dim=10, n_heads=4)
        with pytest.raises(ValueError):
            ModelConfig(voxel_res=12)
        with pytest.raises(ValueError):
            ModelConfig(hooked_blocks=(7,))

    def test_config_text_round_trip(self):
        cfg = ModelConfig(feature_dim=32, hooked_blocks=(1, 3))
        assert ModelConfig.from_text(cfg.to_text()) == cfg


class TestStoreAndCheckpoint:
    def make_store(self):
        store = ParamStore()
        store.add("b.weight", rand(3, 2).float(), frozen=True)
        store.add("a.bias", rand(4), frozen=False)
        return store

    def test_lexicographic_order(self):
        assert self.make_store().names() == ["a.bias", "b.weight"]

    def test_duplicate_name(self):
        store = self.make_store()
        with pytest.raises(KeyError):
            store.add("a.bias", rand(1), frozen=False)

    def test_round_trip_byte_exact(self):
        data = encode_checkpoint("feature_dim=64\n", self.make_store())
        ck = decode_checkpoint(data)
        assert ck.config_text == "feature_dim=64\n"
        assert encode_checkpoint(ck.config_text, ck.store()) == data
        assert ck.tensors["b.weight"][1] is True and ck.tensors["b.weight"][0].dtype == torch.float32

    def test_header_layout(self):
        data = encode_checkpoint("x", self.make_store())
        assert data[:4] == CHECKPOINT_MAGIC
        assert data[4:6] == (1).to_bytes(2, "little")
        assert data[6:10] == (1).to_bytes(4, "little") and data[10:11] == b"x"

    @pytest.mark.parametrize("mutate", [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:4] + b"\x09\x00" + d[6:],
        lambda d: d[:-3],
    ])
    def test_corruption_detected(self, mutate):
        with pytest.raises(CheckpointError):
            decode_checkpoint(mutate(encode_checkpoint("x", self.make_store())))

    def test_optimizer_skips_frozen(self):
        a = torch.nn.Parameter(torch.ones(2))
        b = torch.nn.Parameter(torch.ones(2), requires_grad=False)
        opt = make_optimizer([a, b], lr=0.1)
        assert len(opt.param_groups[0]["params"]) == 1
        a.grad = torch.ones(2)
        opt.step()
        # first bias-corrected Adam step moves by lr * sign(g)
        assert torch.allclose(a.detach(), torch.full((2,), 0.9), atol=1e-6)
