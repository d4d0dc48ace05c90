import numpy as np
import pytest

from owt import layers as L
from owt import model as M
from owt import tensor as T
from owt.tensor import DiffTensor

from conftest import numeric_grad, rel_err


def tiny_model(dtype=np.float32, seed=0, **overrides):
    cfg_kwargs = dict(patch=4, dim=8, heads=2, enc_blocks=1, tge_blocks=1,
                      dec_blocks=1, groups=2, tokens_per_group=2)
    cfg_kwargs.update(overrides)
    cfg = M.ModelConfig(**cfg_kwargs)
    return M.OwtModel.create(cfg, height=8, width=8, seed=seed, dtype=dtype)


def desk_model(seed=0):
    cfg = M.ModelConfig(patch=4, dim=16, heads=2, enc_blocks=1, tge_blocks=1,
                        dec_blocks=1, groups=3, tokens_per_group=2)
    return M.OwtModel.create(cfg, height=32, width=32, seed=seed)


def softmax_rows_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestEncode:
    def test_shape(self, rng):
        model = desk_model()
        img = DiffTensor(rng.random((32, 32, 1)).astype(np.float32))
        emb = M.encode(img, model)
        assert emb.tokens.shape == (64, 16)

    def test_sensitive_to_any_patch(self, rng):
        model = tiny_model()
        base = rng.random((8, 8, 1)).astype(np.float32)
        other = base.copy()
        other[5, 6, 0] += 0.5  # inside patch 3
        e1 = M.encode(DiffTensor(base), model)
        e2 = M.encode(DiffTensor(other), model)
        assert not np.allclose(e1.tokens.data, e2.tokens.data)

    def test_grid_mismatch(self, rng):
        model = tiny_model()
        with pytest.raises(T.DimensionError):
            M.encode(DiffTensor(rng.random((8, 12, 1)).astype(np.float32)), model)

    def test_grad_wrt_pixels(self):
        # weighted sum: a plain sum is killed by the final layernorm
        rng = np.random.default_rng(3)
        model = tiny_model(dtype=np.float64)
        img = DiffTensor(rng.random((8, 8, 1)), requires_grad=True, dtype=np.float64)
        w = DiffTensor(rng.normal(size=(4, 8)), dtype=np.float64)

        def f():
            return T.sum_all(T.mul(M.encode(img, model).tokens, w)).item()

        T.backward(T.sum_all(T.mul(M.encode(img, model).tokens, w)))
        (n,) = numeric_grad(f, [img])
        assert rel_err(img.grad, n) < 1e-4


class TestOrganCollect:
    def test_identical_tokens_give_uniform_attention(self, rng):
        model = tiny_model()
        v = rng.normal(size=8).astype(np.float32)
        tokens = DiffTensor(np.tile(v, (model.grid.tokens, 1)))
        token_set, attn = M.organ_collect(M.HolisticEmbedding(tokens, model.grid), model)
        np.testing.assert_allclose(attn.data, 1.0 / model.grid.tokens, atol=1e-6)
        gamma_v = v @ model.collect_value.weight.data + model.collect_value.bias.data
        np.testing.assert_allclose(token_set.tokens.data,
                                   np.tile(gamma_v, (token_set.tokens.shape[0], 1)),
                                   atol=1e-5)

    @pytest.mark.parametrize("groups,per_group,total", [(5, 1, 6), (4, 20, 100)])
    def test_output_shape(self, rng, groups, per_group, total):
        cfg = M.ModelConfig(patch=4, dim=8, heads=2, enc_blocks=1, tge_blocks=1,
                            dec_blocks=1, groups=groups, tokens_per_group=per_group)
        model = M.OwtModel.create(cfg, height=8, width=8)
        emb = M.encode(DiffTensor(rng.random((8, 8, 1)).astype(np.float32)), model)
        token_set, attn = M.organ_collect(emb, model)
        assert token_set.tokens.shape == (total, 8)
        assert attn.shape == (total, 4)

    def test_matches_two_line_matrix_oracle(self, rng):
        cfg = M.ModelConfig(patch=2, dim=2, heads=1, enc_blocks=1, tge_blocks=1,
                            dec_blocks=1, groups=2, tokens_per_group=1)
        model = M.OwtModel.create(cfg, height=4, width=2)  # 4 spatial tokens, dim 2
        w_score = rng.normal(size=(2, 3)).astype(np.float32)
        b_score = rng.normal(size=3).astype(np.float32)
        w_val = rng.normal(size=(2, 2)).astype(np.float32)
        b_val = rng.normal(size=2).astype(np.float32)
        model.collect_score.weight.data[...] = w_score
        model.collect_score.bias.data[...] = b_score
        model.collect_value.weight.data[...] = w_val
        model.collect_value.bias.data[...] = b_val
        tokens = rng.normal(size=(4, 2)).astype(np.float32)
        token_set, attn = M.organ_collect(
            M.HolisticEmbedding(DiffTensor(tokens), model.grid), model)
        attn_want = softmax_rows_np((tokens @ w_score + b_score).T)
        collected_want = attn_want @ (tokens @ w_val + b_val)
        np.testing.assert_allclose(attn.data, attn_want, atol=1e-6)
        np.testing.assert_allclose(token_set.tokens.data, collected_want, atol=1e-5)

    def test_attention_rows_are_distributions(self, rng):
        model = desk_model()
        emb = M.encode(DiffTensor(rng.random((32, 32, 1)).astype(np.float32)), model)
        _, attn = M.organ_collect(emb, model)
        assert (attn.data >= 0).all()
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-6)


class TestGatherRetained:
    def _token_set(self, rng, groups=2, per_group=2, dim=8):
        tokens = DiffTensor(rng.normal(size=((groups + 1) * per_group, dim)).astype(np.float32))
        return M.TokenGroupSet(tokens, groups, tuple([per_group] * (groups + 1)))

    def test_all_groups_natural_order_is_identity(self, rng):
        ts = self._token_set(rng)
        out = M.gather_retained(ts, M.RetainedSelection((0, 1, 2)))
        np.testing.assert_array_equal(out.data, ts.tokens.data)

    def test_span_indexing(self, rng):
        ts = self._token_set(rng, groups=2, per_group=2)
        out = M.gather_retained(ts, M.RetainedSelection((1,)))
        np.testing.assert_array_equal(out.data, ts.tokens.data[2:4])

    def test_empty_selection_rejected(self, rng):
        ts = self._token_set(rng)
        with pytest.raises(T.ContractError):
            M.gather_retained(ts, M.RetainedSelection(()))

    def test_out_of_range_group(self, rng):
        ts = self._token_set(rng)
        with pytest.raises(T.ContractError):
            M.gather_retained(ts, M.RetainedSelection((3,)))

    def test_duplicate_groups_rejected(self):
        with pytest.raises(T.ContractError):
            M.RetainedSelection((1, 1))


class TestTokenGroupEncode:
    def test_single_token(self, rng):
        model = tiny_model()
        out = M.token_group_encode(DiffTensor(rng.normal(size=(1, 8)).astype(np.float32)), model)
        assert out.shape == (1, 8)

    def test_permutation_equivariance(self, rng):
        model = tiny_model()
        x = rng.normal(size=(6, 8)).astype(np.float32)
        out = M.token_group_encode(DiffTensor(x), model)
        perm = np.random.default_rng(11).permutation(6)
        out_p = M.token_group_encode(DiffTensor(x[perm]), model)
        np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-5)

    def test_gradcheck(self):
        rng = np.random.default_rng(17)
        model = tiny_model(dtype=np.float64)
        x = DiffTensor(rng.normal(size=(3, 8)), requires_grad=True, dtype=np.float64)

        def f():
            return T.sum_all(M.token_group_encode(x, model)).item()

        T.backward(T.sum_all(M.token_group_encode(x, model)))
        (n,) = numeric_grad(f, [x])
        assert rel_err(x.grad, n) < 1e-4


class TestAherRestore:
    def test_single_retained_token(self, rng):
        model = tiny_model()
        token = rng.normal(size=(1, 8)).astype(np.float32)
        emb = M.aher_restore(DiffTensor(token), model)
        psi = token @ model.restore_value.weight.data + model.restore_value.bias.data
        np.testing.assert_allclose(emb.tokens.data, np.tile(psi, (model.grid.tokens, 1)),
                                   atol=1e-5)

    @pytest.mark.parametrize("n_retained", [1, 40, 100])
    def test_output_shape_independent_of_input_count(self, rng, n_retained):
        model = tiny_model()
        emb = M.aher_restore(
            DiffTensor(rng.normal(size=(n_retained, 8)).astype(np.float32)), model)
        assert emb.tokens.shape == (model.grid.tokens, 8)

    def test_permutation_invariance(self, rng):
        model = tiny_model()
        x = rng.normal(size=(5, 8)).astype(np.float32)
        out = M.aher_restore(DiffTensor(x), model)
        perm = np.random.default_rng(23).permutation(5)
        out_p = M.aher_restore(DiffTensor(x[perm]), model)
        np.testing.assert_allclose(out_p.tokens.data, out.tokens.data, atol=1e-5)

    def test_rows_are_convex_combinations(self, rng):
        model = tiny_model()
        x = rng.normal(size=(6, 8)).astype(np.float32)
        emb = M.aher_restore(DiffTensor(x), model)
        psi = x @ model.restore_value.weight.data + model.restore_value.bias.data
        lo = psi.min(axis=0) - 1e-5
        hi = psi.max(axis=0) + 1e-5
        assert (emb.tokens.data >= lo).all()
        assert (emb.tokens.data <= hi).all()

    def test_empty_input_rejected(self, rng):
        model = tiny_model()
        with pytest.raises(T.ContractError):
            M.aher_restore(DiffTensor(np.zeros((0, 8), dtype=np.float32)), model)


class TestDecode:
    def test_shape(self, rng):
        model = desk_model()
        emb = M.HolisticEmbedding(
            DiffTensor(rng.normal(size=(64, 16)).astype(np.float32)), model.grid)
        img = M.decode(emb, model)
        assert img.shape == (32, 32, 1)

    def test_zero_embedding_zero_biases_gives_zero_image(self):
        model = tiny_model()
        model.pos_table.data[...] = 0.0  # biases are zero at init
        emb = M.HolisticEmbedding(
            DiffTensor(np.zeros((model.grid.tokens, 8), dtype=np.float32)), model.grid)
        out = M.decode(emb, model)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-7)

    def test_shape_mismatch(self, rng):
        model = tiny_model()
        emb = M.HolisticEmbedding(
            DiffTensor(rng.normal(size=(3, 8)).astype(np.float32)), model.grid)
        with pytest.raises(T.DimensionError):
            M.decode(emb, model)

    def test_gradcheck(self):
        rng = np.random.default_rng(29)
        model = tiny_model(dtype=np.float64)
        tokens = DiffTensor(rng.normal(size=(model.grid.tokens, 8)),
                            requires_grad=True, dtype=np.float64)

        def f():
            return T.sum_all(M.decode(M.HolisticEmbedding(tokens, model.grid), model)).item()

        T.backward(T.sum_all(M.decode(M.HolisticEmbedding(tokens, model.grid), model)))
        (n,) = numeric_grad(f, [tokens])
        assert rel_err(tokens.grad, n) < 1e-4


class TestForwardOwt:
    def test_end_to_end_shape(self, rng):
        model = desk_model()
        img = DiffTensor(rng.random((32, 32, 1)).astype(np.float32))
        out, token_set, attn = M.forward_owt(img, M.RetainedSelection((0, 2)), model)
        assert out.shape == (32, 32, 1)
        assert token_set.tokens.shape == (8, 16)
        assert attn.shape == (8, 64)

    def test_selection_order_invariance(self, rng):
        model = desk_model()
        img = DiffTensor(rng.random((32, 32, 1)).astype(np.float32))
        out_a, _, _ = M.forward_owt(img, M.RetainedSelection((2, 0)), model)
        out_b, _, _ = M.forward_owt(img, M.RetainedSelection((0, 2)), model)
        np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-4)

    def test_end_to_end_gradcheck(self):
        rng = np.random.default_rng(31)
        model = tiny_model(dtype=np.float64)
        img = DiffTensor(rng.random((8, 8, 1)), requires_grad=True, dtype=np.float64)
        sel = M.RetainedSelection((1, 0))
        wq = model.encoder.blocks[0].wq.weight
        psi_w = model.restore_value.weight

        def f():
            out, _, _ = M.forward_owt(img, sel, model)
            return T.sum_all(T.mul(out, out)).item()

        out, _, _ = M.forward_owt(img, sel, model)
        T.backward(T.sum_all(T.mul(out, out)))
        analytic = [img.grad.copy(), wq.grad.copy(), psi_w.grad.copy()]
        numeric = numeric_grad(f, [img, wq, psi_w])
        for got, want in zip(analytic, numeric):
            assert rel_err(got, want) < 1e-4

    def test_restore_attention_rows_are_distributions(self, rng):
        model = desk_model()
        img = DiffTensor(rng.random((32, 32, 1)).astype(np.float32))
        emb = M.encode(img, model)
        token_set, _ = M.organ_collect(emb, model)
        retained = M.gather_retained(token_set, M.RetainedSelection((1,)))
        encoded = M.token_group_encode(retained, model)
        scores = model.restore_score(encoded)
        attn = T.softmax_rows(T.transpose(scores))
        assert (attn.data >= 0).all()
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-6)


class TestForwardHolistic:
    def test_shape_preserved(self, rng):
        model = desk_model()
        img = DiffTensor(rng.random((32, 32, 1)).astype(np.float32))
        out = M.forward_holistic(img, model)
        assert out.shape == (32, 32, 1)

    def test_shares_parameters_with_group_path(self, rng):
        model = desk_model()
        names = set(model.named_parameters())
        assert "encoder.block0.wq.weight" in names
        assert "decoder.block0.wq.weight" in names
        assert "pos_table" in names
        # group-path parameters coexist under the same flat namespace
        assert "collector.score.weight" in names
        assert "restorer.value.weight" in names
        assert len(names) == len(model.named_parameters())


class TestModelConfig:
    def test_json_roundtrip_uniform(self):
        cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                            dec_blocks=2, groups=3, tokens_per_group=4)
        assert M.ModelConfig.from_json(cfg.to_json()) == cfg

    def test_json_roundtrip_adaptive(self):
        cfg = M.ModelConfig(patch=4, dim=64, heads=4, enc_blocks=2, tge_blocks=2,
                            dec_blocks=2, groups=2, tokens_per_group=None,
                            group_token_counts=(5, 4, 3))
        assert M.ModelConfig.from_json(cfg.to_json()) == cfg
        assert cfg.total_group_tokens == 12

    def test_exactly_one_token_spec(self):
        with pytest.raises(ValueError):
            M.ModelConfig(tokens_per_group=None, group_token_counts=None)
        with pytest.raises(ValueError):
            M.ModelConfig(tokens_per_group=4, group_token_counts=(4, 4, 4, 4))
