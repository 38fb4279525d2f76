import numpy as np
import pytest
import torch

from tokenseg.geometry import GEO_BLOCKS
from tokenseg.tokens import (
    ConceptTokens,
    GeometryRegressor,
    MultiheadCrossAttention,
    SemanticProjector,
    StyleContentFusion,
    TokenImageInteraction,
    inject_modality,
)

from gradcheck import check_gradients


class TestConceptTokens:
    def test_shapes_and_init_scale(self):
        torch.manual_seed(0)
        bank = ConceptTokens(n_geo=9, n_sem=9, dim=128)
        assert tuple(bank.geo.shape) == (9, 128)
        assert tuple(bank.sem.shape) == (9, 128)
        for t in (bank.geo, bank.sem):
            assert t.abs().max().item() < 0.2  # 10 sigma, effectively impossible
            assert t.std().item() == pytest.approx(0.02, rel=0.2)
            assert t.mean().item() == pytest.approx(0.0, abs=5e-3)

    def test_batch_expansion(self):
        bank = ConceptTokens(n_geo=2, n_sem=3, dim=4)
        g = bank.geo_batch(5)
        assert tuple(g.shape) == (5, 2, 4)
        assert torch.equal(g[0], bank.geo)
        assert torch.equal(g[4], bank.geo)
        assert tuple(bank.sem_batch(1).shape) == (1, 3, 4)


class TestInjectModality:
    def test_broadcast_add(self):
        torch.manual_seed(1)
        sem = torch.randn(2, 3, 4)
        mod = torch.randn(2, 4)
        out = inject_modality(sem, mod)
        assert torch.equal(out, sem + mod.unsqueeze(1))

    def test_geometry_bank_untouched(self):
        torch.manual_seed(2)
        bank = ConceptTokens(n_geo=9, n_sem=9, dim=8)
        geo_before = bank.geo.detach().clone()
        inject_modality(bank.sem_batch(3), torch.randn(3, 8))
        assert torch.equal(bank.geo, geo_before)


class TestStyleContentFusion:
    def test_output_shape(self):
        torch.manual_seed(3)
        scf = StyleContentFusion(shallow_channels=4, deep_channels=6, dim=8)
        out = scf(torch.randn(2, 4, 8, 8), torch.randn(2, 6, 2, 2))
        assert tuple(out.shape) == (2, 8)

    def test_spatial_permutation_invariance(self):
        # style stats and pooled content ignore pixel arrangement entirely
        torch.manual_seed(4)
        scf = StyleContentFusion(4, 6, 8).double()
        shallow = torch.randn(1, 4, 5, 5, dtype=torch.float64)
        deep = torch.randn(1, 6, 3, 3, dtype=torch.float64)
        perm = torch.randperm(25, generator=torch.Generator().manual_seed(0))
        shuffled = shallow.flatten(2)[:, :, perm].reshape(1, 4, 5, 5)
        assert torch.allclose(scf(shallow, deep), scf(shuffled, deep), atol=1e-12)

    def test_constant_channel_has_exact_zero_std(self):
        torch.manual_seed(5)
        scf = StyleContentFusion(2, 3, 4).double()
        shallow = torch.full((1, 2, 6, 6), 0.5, dtype=torch.float64)
        deep = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
        got = scf(shallow, deep)
        style_in = torch.tensor([[0.5, 0.5, 0.0, 0.0]], dtype=torch.float64)
        style = scf.style_proj(style_in)
        content = scf.content_proj(torch.zeros(1, 3, dtype=torch.float64))
        z = torch.cat([style, content], dim=1)
        want = scf.out(torch.sigmoid(scf.gate(z)) * torch.tanh(scf.value(z)))
        assert torch.equal(got, want)

    def test_gradient(self):
        torch.manual_seed(6)
        scf = StyleContentFusion(2, 3, 4).double()
        shallow = torch.randn(2, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        deep = torch.randn(2, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        check_gradients(
            lambda: scf(shallow, deep).square().sum(),
            {"shallow": shallow, "deep": deep},
        )


class TestCrossAttention:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError, match="not divisible"):
            MultiheadCrossAttention(dim=6, heads=4)

    def test_single_key_collapses_to_value_path(self):
        # with one key the softmax is exactly 1, so the query cannot matter
        torch.manual_seed(7)
        mca = MultiheadCrossAttention(dim=8, heads=2).double()
        kv = torch.randn(2, 1, 8, dtype=torch.float64)
        q1 = torch.randn(2, 3, 8, dtype=torch.float64)
        q2 = torch.randn(2, 3, 8, dtype=torch.float64)
        out1, out2 = mca(q1, kv), mca(q2, kv)
        assert torch.allclose(out1, out2, atol=1e-14)
        want = mca.out_proj(mca.v_proj(kv))
        assert torch.allclose(out1[:, 0:1], want, atol=1e-14)

    def test_attention_rows_are_convex(self):
        torch.manual_seed(8)
        mca = MultiheadCrossAttention(dim=8, heads=2)
        # values all equal => output equals that value regardless of scores
        kv = torch.ones(1, 5, 8)
        q = torch.randn(1, 2, 8)
        want = mca.out_proj(mca.v_proj(kv[:, 0:1]))
        assert torch.allclose(mca(q, kv), want.expand(1, 2, 8), atol=1e-6)


class TestTokenImageInteraction:
    def _build(self, layers=1, use_pe=True, grid=2, seed=0):
        torch.manual_seed(seed)
        return TokenImageInteraction(
            deep_channels=6, dim=8, grid=grid, layers=layers, heads=2,
            use_positional_encoding=use_pe,
        ).double()

    def test_zero_layers_identity_after_prepare(self):
        block = self._build(layers=0)
        deep = torch.randn(2, 6, 2, 2, dtype=torch.float64)
        tokens = torch.randn(2, 3, 8, dtype=torch.float64)
        feats = block.prepare(deep)
        t_out, f_out = block.interact(tokens, feats)
        assert torch.equal(t_out, tokens)
        assert torch.equal(f_out, feats)

    def test_forward_shapes(self):
        block = self._build(layers=2)
        tokens = torch.randn(2, 5, 8, dtype=torch.float64)
        t_out, f_out, grid = block(tokens, torch.randn(2, 6, 2, 2).double())
        assert tuple(t_out.shape) == (2, 5, 8)
        assert tuple(f_out.shape) == (2, 4, 8)
        assert tuple(grid) == (2, 2)

    def test_tokens_permutation_invariant_without_pe(self):
        block = self._build(layers=2, use_pe=False, grid=3)
        deep = torch.randn(1, 6, 3, 3, dtype=torch.float64)
        tokens = torch.randn(1, 4, 8, dtype=torch.float64)
        perm = torch.randperm(9, generator=torch.Generator().manual_seed(1))
        deep_p = deep.flatten(2)[:, :, perm].reshape(1, 6, 3, 3)
        t_a, f_a, _ = block(tokens, deep)
        t_b, f_b, _ = block(tokens, deep_p)
        assert torch.allclose(t_a, t_b, atol=1e-12)
        # features move with their pixels
        assert torch.allclose(f_a[:, perm], f_b, atol=1e-12)

    def test_positional_encoding_breaks_invariance(self):
        block = self._build(layers=2, use_pe=True, grid=3)
        deep = torch.randn(1, 6, 3, 3, dtype=torch.float64)
        tokens = torch.randn(1, 4, 8, dtype=torch.float64)
        perm = torch.tensor([8, 7, 6, 5, 4, 3, 2, 1, 0])
        deep_p = deep.flatten(2)[:, :, perm].reshape(1, 6, 3, 3)
        t_a, _, _ = block(tokens, deep)
        t_b, _, _ = block(tokens, deep_p)
        assert (t_a - t_b).abs().max().item() > 1e-6

    def test_positional_table_resampled_on_other_grid(self):
        block = self._build(layers=1, grid=2)
        tokens = torch.randn(1, 3, 8, dtype=torch.float64)
        t_out, f_out, grid = block(tokens, torch.randn(1, 6, 4, 4).double())
        assert tuple(f_out.shape) == (1, 16, 8)
        assert tuple(grid) == (4, 4)

    def test_gradient(self):
        block = self._build(layers=1)
        tokens = torch.randn(1, 3, 8, dtype=torch.float64, requires_grad=True)
        deep = torch.randn(1, 6, 2, 2, dtype=torch.float64, requires_grad=True)

        def loss():
            t, f, _ = block(tokens, deep)
            return t.square().sum() + f.square().sum()

        check_gradients(loss, {"tokens": tokens, "deep": deep}, max_coords=4)


class TestGeometryRegressor:
    def test_shape_and_range(self):
        torch.manual_seed(9)
        reg = GeometryRegressor(dim=8)
        out = reg(torch.randn(3, 9, 8))
        assert tuple(out.shape) == (3, 13)
        assert torch.all(out > 0.0) and torch.all(out < 1.0)

    def test_each_token_drives_only_its_block(self):
        torch.manual_seed(10)
        reg = GeometryRegressor(dim=8).double()
        tokens = torch.randn(1, 9, 8, dtype=torch.float64)
        base = reg(tokens)
        for i, (name, sl) in enumerate(GEO_BLOCKS):
            bumped = tokens.clone()
            bumped[0, i] += 1.0
            delta = (reg(bumped) - base)[0]
            changed = delta.abs() > 1e-12
            inside = torch.zeros(13, dtype=torch.bool)
            inside[sl] = True
            assert torch.all(changed[inside]), name
            assert not torch.any(changed[~inside]), name

    def test_gradient(self):
        torch.manual_seed(11)
        reg = GeometryRegressor(dim=8).double()
        tokens = torch.randn(2, 9, 8, dtype=torch.float64, requires_grad=True)
        check_gradients(lambda: reg(tokens).square().sum(), {"tokens": tokens})


def test_semantic_projector_shape():
    torch.manual_seed(12)
    proj = SemanticProjector(dim=8, text_dim=32)
    out = proj(torch.randn(2, 9, 8))
    assert tuple(out.shape) == (2, 9, 32)
