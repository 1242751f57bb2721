import numpy as np
import pytest
import torch
from scipy.optimize import nnls

from wavefuse.encoder import (
    CovariateWeights,
    EmbeddingSequence,
    PatchEmbed,
    PatchReprogrammer,
    PrototypeBank,
    RevIN,
    TimeSeriesEncoder,
    fuse_covariates,
    revin_denormalize,
    revin_normalize,
)
from wavefuse.series import patch_indices

torch.manual_seed(0)


def finite_diff(f, tensor, h=1e-6):
    """Central finite differences of a scalar function wrt a tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    return (a - b).norm().item() / max(a.norm().item() + b.norm().item(), 1e-12)


class TestRevin:
    def test_constant_channel_all_zero(self):
        out, _ = revin_normalize(np.array([[3.0], [3.0], [3.0], [3.0]]))
        assert np.allclose(out, 0.0)

    def test_two_point_closed_form(self):
        out, state = revin_normalize(np.array([[0.0], [2.0]]))
        assert np.allclose(out[:, 0], [-1.0, 1.0], atol=1e-4)
        assert state.mean[0] == pytest.approx(1.0)
        assert state.std[0] == pytest.approx(1.0, abs=1e-4)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(loc=rng.uniform(-5, 5), scale=rng.uniform(0.1, 10), size=(64, 3))
            normed, state = revin_normalize(x)
            back = revin_denormalize(normed, state)
            assert np.max(np.abs(back - x) / (np.abs(x) + 1e-9)) < 1e-5

    def test_mean_and_variance_after_normalization(self):
        rng = np.random.default_rng(1)
        x = rng.normal(loc=100.0, scale=9.0, size=(256, 4))
        out, _ = revin_normalize(x)
        assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
        assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-4)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            revin_normalize(np.array([[np.nan], [1.0]]))

    def test_module_matches_functional(self):
        x = np.random.default_rng(2).normal(size=(32, 2)) * 4 + 7
        module = RevIN(2)
        out_t = module(torch.tensor(x, dtype=torch.float64).unsqueeze(0), "norm")
        out_f, state = revin_normalize(x)
        assert np.allclose(out_t[0].numpy(), out_f, atol=1e-10)
        back = module(out_t, "denorm")
        assert np.allclose(back[0].numpy(), x, atol=1e-10)


class TestPatchEmbed:
    def test_zero_patch_maps_to_bias(self):
        embed = PatchEmbed(8, 5)
        grid = patch_indices(8, 8, 4)
        out = embed(torch.zeros(1, 8, 1), grid)
        assert torch.allclose(out[0, 0, 0], embed.proj.bias)

    def test_linearity(self):
        embed = PatchEmbed(8, 5).double()
        grid = patch_indices(24, 8, 4)
        x = torch.randn(2, 24, 3, dtype=torch.float64)
        b = embed.proj.bias
        e1 = embed(x, grid) - b
        e2 = embed(2.5 * x, grid) - b
        assert rel_err(e2, 2.5 * e1) < 1e-12

    def test_embedding_count(self):
        embed = PatchEmbed(16, 6)
        grid = patch_indices(32, 16, 8)
        out = embed(torch.randn(1, 32, 2), grid)
        assert out.shape == (1, 2, 3, 6)  # 3 patches x 2 covariates

    def test_shared_weights_across_covariates(self):
        embed = PatchEmbed(4, 3)
        grid = patch_indices(4, 4, 4)
        x = torch.randn(1, 4, 1)
        two = torch.cat([x, x], dim=-1)
        out = embed(two, grid)
        assert torch.allclose(out[0, 0], out[0, 1])


def make_bank(vocab=16, d_llm=4, n_proto=2, dtype=torch.float64, seed=0):
    gen = torch.Generator().manual_seed(seed)
    table = torch.randn(vocab, d_llm, generator=gen, dtype=dtype)
    bank = PrototypeBank(table, n_proto=n_proto).to(dtype)
    return bank


class TestReprogrammer:
    def test_single_prototype_pre_projection_output(self):
        bank = make_bank(n_proto=1)
        rep = PatchReprogrammer(d_in=3, d_llm=4, n_heads=1).double()
        patches = torch.randn(2, 5, 3, dtype=torch.float64)
        protos = bank()
        _, attn, v, pre = rep(patches, protos, return_details=True)
        assert torch.allclose(attn, torch.ones_like(attn))
        expected = v[0].expand_as(pre[0, 0]).reshape(1, 1, 1, -1)
        assert torch.allclose(pre, v.reshape(1, 1, 1, 1, -1).squeeze(0).expand_as(pre))

    def test_identical_patches_identical_outputs(self):
        bank = make_bank(n_proto=8)
        rep = PatchReprogrammer(d_in=3, d_llm=4, n_heads=2).double()
        patch = torch.randn(1, 1, 3, dtype=torch.float64)
        patches = patch.expand(1, 6, 3)
        out = rep(patches, bank())
        assert torch.allclose(out, out[:, :1].expand_as(out))

    def test_deterministic(self):
        bank = make_bank(n_proto=4)
        rep = PatchReprogrammer(d_in=3, d_llm=4, n_heads=1).double()
        patches = torch.randn(1, 3, 3, dtype=torch.float64)
        assert torch.equal(rep(patches, bank()), rep(patches, bank()))

    def test_convex_hull_residual(self):
        # n_proto=8, one head: every pre-projection output must be a convex
        # combination of that head's 8 value vectors
        bank = make_bank(vocab=32, d_llm=16, n_proto=8)
        rep = PatchReprogrammer(d_in=6, d_llm=16, n_heads=1, d_keys=6).double()
        patches = torch.randn(1, 4, 6, dtype=torch.float64)
        _, attn, v, pre = rep(patches, bank(), return_details=True)
        V = v[:, 0, :].detach().numpy()  # (8, d_keys)
        lam = 1e6
        for l in range(4):
            target = pre[0, l, 0].detach().numpy()
            A = np.vstack([V.T, lam * np.ones((1, 8))])
            b = np.concatenate([target, [lam]])
            w, _ = nnls(A, b)
            assert abs(w.sum() - 1.0) < 1e-6
            residual = np.linalg.norm(V.T @ w - target)
            assert residual < 1e-5

    def test_attention_weights_simplex_per_head(self):
        bank = make_bank(n_proto=8)
        rep = PatchReprogrammer(d_in=3, d_llm=4, n_heads=2).double()
        patches = torch.randn(2, 5, 3, dtype=torch.float64)
        _, attn, _, _ = rep(patches, bank(), return_details=True)
        assert (attn >= 0).all()
        assert torch.allclose(attn.sum(dim=-1), torch.ones_like(attn.sum(dim=-1)))

    def test_empty_bank_rejected(self):
        with pytest.raises(ValueError):
            PrototypeBank(torch.randn(4, 4), n_proto=0)

    def test_gradient_check_two_prototypes_four_dims(self):
        # analytic (autograd) gradients vs central differences, 1e-4 relative
        torch.manual_seed(3)
        bank = make_bank(vocab=6, d_llm=4, n_proto=2, seed=3)
        rep = PatchReprogrammer(d_in=3, d_llm=4, n_heads=1, d_keys=2).double()
        patches = torch.randn(1, 5, 3, dtype=torch.float64, requires_grad=True)
        direction = torch.randn(1, 5, 4, dtype=torch.float64)

        def loss_fn():
            return (rep(patches, bank()) * direction).sum()

        loss = loss_fn()
        params = {"patch_input": patches, "prototype_reduction": bank.reduce.weight}
        for p in rep.parameters():
            p.requires_grad_(True)
        grads = torch.autograd.grad(loss, list(params.values()))
        for (name, tensor), analytic in zip(params.items(), grads):
            numeric = finite_diff(loss_fn, tensor)
            assert rel_err(analytic, numeric) < 1e-4, name


class TestCovariateFusion:
    def make_aligned(self, B=2, C=3, N=4, d=5, dtype=torch.float64):
        gen = torch.Generator().manual_seed(1)
        return torch.randn(B, C, N, d, generator=gen, dtype=dtype)

    def test_average_unweighted_identical_inputs(self):
        a = self.make_aligned(C=2)
        same = a[:, :1].expand_as(a).contiguous()
        fused = fuse_covariates(same, "average_unweighted")
        assert torch.allclose(fused.embeddings, same[:, 0])

    def test_interleave_order(self):
        a = self.make_aligned(B=1, C=3, N=2)
        fused = fuse_covariates(a, "interleave")
        assert fused.length == 6
        expected = [a[0, c, p] for p in range(2) for c in range(3)]
        for i, e in enumerate(expected):
            assert torch.equal(fused.embeddings[0, i], e)
        assert fused.provenance == (
            ("patch", 0, 0), ("patch", 0, 1), ("patch", 0, 2),
            ("patch", 1, 0), ("patch", 1, 1), ("patch", 1, 2),
        )

    def test_weighted_degenerate_vertex(self):
        a = self.make_aligned(C=2)
        w = torch.tensor([1.0, 0.0], dtype=torch.float64)
        fused = fuse_covariates(a, "average_weighted", weights=w)
        assert torch.equal(fused.embeddings, a[:, 0])

    def test_independent_returns_stack(self):
        a = self.make_aligned()
        fused = fuse_covariates(a, "independent")
        assert fused.independent
        assert torch.equal(fused.embeddings, a)

    def test_concatenate_rejected_here(self):
        with pytest.raises(ValueError, match="before reprogramming"):
            fuse_covariates(self.make_aligned(), "concatenate")

    def test_simplex_preserved_after_optimizer_steps(self):
        torch.manual_seed(7)
        weights = CovariateWeights(4)
        opt = torch.optim.Adam(weights.parameters(), lr=0.25)
        for step in range(100):
            target = torch.randn(4)
            loss = ((weights() - target) ** 2).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            w = weights().detach()
            assert (w >= 0).all()
            assert w.sum().item() == pytest.approx(1.0, abs=1e-6)


class TestEncoderSequenceContracts:
    @pytest.mark.parametrize("strategy,expected_len", [
        ("concatenate", 3),
        ("average_weighted", 3),
        ("average_unweighted", 3),
        ("interleave", 6),
    ])
    def test_sequence_length(self, strategy, expected_len):
        table = torch.randn(16, 8)
        enc = TimeSeriesEncoder(2, 32, 16, 8, 4, 8, table, strategy, n_proto=4, n_heads=2)
        seq = enc(torch.randn(2, 32, 2))
        assert seq.length == expected_len == enc.sequence_length()
        assert not seq.independent

    def test_independent_shape(self):
        table = torch.randn(16, 8)
        enc = TimeSeriesEncoder(2, 32, 16, 8, 4, 8, table, "independent", n_proto=4, n_heads=2)
        seq = enc(torch.randn(2, 32, 2))
        assert seq.independent
        assert seq.embeddings.shape == (2, 2, 3, 8)

    def test_random_shapes_per_strategy(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            C = int(rng.integers(1, 4))
            l = int(rng.integers(2, 10))
            s = int(rng.integers(1, l + 1))
            n_extra = int(rng.integers(0, 5))
            T = l + s * int(rng.integers(0, 6)) + (s - 1 if s > 1 else 0)
            T = max(T, l)
            n_p = (T - l) // s + 1
            table = torch.randn(8, 8)
            for strategy in ("concatenate", "average_unweighted", "interleave", "independent"):
                enc = TimeSeriesEncoder(C, T, l, s, 4, 8, table, strategy, n_proto=3, n_heads=2)
                seq = enc(torch.randn(1, T, C))
                if strategy == "interleave":
                    assert seq.length == n_p * C
                elif strategy == "independent":
                    assert seq.embeddings.shape[1:3] == (C, n_p)
                else:
                    assert seq.length == n_p

    def test_concatenate_widens_reprogrammer_input(self):
        table = torch.randn(16, 8)
        enc = TimeSeriesEncoder(3, 32, 16, 8, 4, 8, table, "concatenate", n_proto=4, n_heads=2)
        assert enc.reprogrammer.query_projection.in_features == 4 * 3

    def test_channel_count_validated(self):
        table = torch.randn(16, 8)
        enc = TimeSeriesEncoder(2, 32, 16, 8, 4, 8, table, "concatenate")
        with pytest.raises(ValueError, match="channels"):
            enc(torch.randn(1, 32, 3))
