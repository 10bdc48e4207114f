import numpy as np
import pytest

from laddermoe import encoder as E
from laddermoe import tensor as T
from laddermoe.errors import DimensionError, ParameterError
from laddermoe.rng import rng_for
from laddermoe.tensor import Graph, Tensor, backward


def tiny_cfg(**overrides):
    base = dict(
        image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2,
        adapter_layers=(0, 1), num_experts=4, top_k=2, expert_bottleneck=3,
    )
    base.update(overrides)
    return E.EncoderConfig(**base)


@pytest.fixture
def cfg():
    return tiny_cfg()


@pytest.fixture
def params(cfg):
    return E.init_encoder_params(cfg, rng_for(0, "test-encoder"))


class TestConfig:
    def test_defaults_valid(self):
        E.EncoderConfig().validate()

    @pytest.mark.parametrize(
        "overrides",
        [
            {"image_size": 30},           # not a multiple of patch size
            {"embed_dim": 65},            # not a multiple of heads
            {"adapter_layers": (0, 99)},  # outside [0, depth)
            {"top_k": 0},
            {"top_k": 37},
            {"num_experts": -1},
        ],
    )
    def test_rejects(self, overrides):
        with pytest.raises(ParameterError):
            E.EncoderConfig(**overrides).validate()

    def test_zero_experts_allowed(self):
        cfg = E.EncoderConfig(num_experts=0)
        cfg.validate()
        assert not cfg.adapters_active


class TestPatchEmbed:
    def test_token_count_default(self):
        cfg = E.EncoderConfig()
        params = E.init_encoder_params(cfg, rng_for(1, "pe"))
        out = E.patch_embed(np.zeros((32, 32)), cfg, params)
        assert out.shape == (65, 64)

    def test_token_count_small(self, cfg, params):
        out = E.patch_embed(np.zeros((8, 8)), cfg, params)
        assert out.shape == (5, 8)

    def test_zero_image_zero_proj(self, cfg, params):
        params["backbone.patch.w"].array[:] = 0.0
        params["backbone.patch.b"].array[:] = 0.0
        out = E.patch_embed(np.zeros((8, 8)), cfg, params).array
        pos = params["backbone.pos"].array
        cls = params["backbone.cls"].array[0, 0]
        np.testing.assert_array_equal(out[0], cls + pos[0])
        np.testing.assert_array_equal(out[1:], pos[1:])

    def test_wrong_size(self, cfg, params):
        with pytest.raises(DimensionError):
            E.patch_embed(np.zeros((9, 9)), cfg, params)


class TestRoute:
    def make_router(self, d=8, n=4, seed=0):
        rng = np.random.default_rng(seed)
        return E.RouterState(Tensor(rng.normal(size=(2 * d, n))), Tensor(rng.normal(size=n)))

    def test_full_selection(self):
        router = self.make_router()
        rec = E.route(np.ones(8), np.zeros(8), router, k=4)
        assert sorted(rec.selected) == [0, 1, 2, 3]
        signal = np.concatenate([np.ones(8), np.zeros(8)])
        scores = signal @ router.w.array + router.b.array
        expected = np.exp(scores - scores.max())
        expected /= expected.sum()
        order = np.argsort(-scores, kind="stable")
        np.testing.assert_allclose(rec.weights, expected[order], atol=1e-12)

    def test_dominant_score(self):
        router = E.RouterState(Tensor(np.zeros((4, 4))), Tensor(np.array([100.0, 0, 0, 0])))
        rec = E.route(np.zeros(2), np.zeros(2), router, k=1)
        assert rec.selected == (0,)
        assert rec.weights[0] == 1.0

    def test_against_full_sort_oracle(self):
        d, n, k = 16, 36, 5
        rng = np.random.default_rng(42)
        router = E.RouterState(Tensor(rng.normal(size=(2 * d, n))), Tensor(rng.normal(size=n)))
        for trial in range(50):
            cls_tok = rng.normal(size=d)
            mean_tok = rng.normal(size=d)
            rec = E.route(cls_tok, mean_tok, router, k=k)
            scores = np.concatenate([cls_tok, mean_tok]) @ router.w.array + router.b.array
            oracle = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
            assert list(rec.selected) == oracle
            sel_scores = scores[oracle]
            expected = np.exp(sel_scores - sel_scores.max())
            expected /= expected.sum()
            assert np.abs(rec.weights - expected).max() < 1e-12

    def test_k_out_of_range(self):
        router = self.make_router()
        with pytest.raises(ParameterError):
            E.route(np.zeros(8), np.zeros(8), router, k=5)

    def test_tie_break_lower_index(self):
        router = E.RouterState(Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)))
        rec = E.route(np.zeros(1), np.zeros(1), router, k=2)
        assert rec.selected == (0, 1)

    def test_score_shift_invariance(self):
        router = self.make_router(seed=5)
        cls_tok, mean_tok = np.ones(8) * 0.3, np.ones(8) * -0.2
        rec = E.route(cls_tok, mean_tok, router, k=2)
        shifted = E.RouterState(router.w, Tensor(router.b.array + 123.0))
        rec2 = E.route(cls_tok, mean_tok, shifted, k=2)
        assert rec.selected == rec2.selected
        assert np.abs(rec.weights - rec2.weights).max() < 1e-12


def make_pool(cfg, seed=0, zero_up=False):
    rng = np.random.default_rng(seed)
    n, d, bn = cfg.num_experts, cfg.embed_dim, cfg.expert_bottleneck
    up = np.zeros((n, bn, d)) if zero_up else rng.normal(size=(n, bn, d))
    upb = np.zeros((n, d)) if zero_up else rng.normal(size=(n, d))
    return E.ExpertPool(
        Tensor(rng.normal(size=(n, d, bn))), Tensor(rng.normal(size=(n, bn))),
        Tensor(up), Tensor(upb),
    )


def expert_output_oracle(pool, e, tokens):
    h = tokens @ pool.down_w.array[e] + pool.down_b.array[e]
    from scipy.special import erf

    h = 0.5 * h * (1.0 + erf(h / np.sqrt(2.0)))
    return h @ pool.up_w.array[e] + pool.up_b.array[e]


class TestAdapterForward:
    def test_single_expert(self, cfg):
        pool = make_pool(cfg)
        tokens = np.random.default_rng(1).normal(size=(5, 8))
        rec = E.RoutingRecord(0, (2,), np.array([1.0]))
        out = E.adapter_forward(Tensor(tokens), pool, rec)
        np.testing.assert_allclose(out.array, expert_output_oracle(pool, 2, tokens), atol=1e-12)

    def test_identical_experts_convexity(self, cfg):
        pool = make_pool(cfg)
        # make experts 1 and 3 identical to expert 0
        for arr in (pool.down_w, pool.down_b, pool.up_w, pool.up_b):
            arr.array[1] = arr.array[0]
            arr.array[3] = arr.array[0]
        tokens = np.random.default_rng(2).normal(size=(5, 8))
        rec = E.RoutingRecord(0, (0, 1, 3), np.array([0.2, 0.5, 0.3]))
        out = E.adapter_forward(Tensor(tokens), pool, rec)
        np.testing.assert_allclose(out.array, expert_output_oracle(pool, 0, tokens), atol=1e-12)

    def test_manual_weighted_sum(self, cfg):
        pool = make_pool(cfg, seed=9)
        tokens = np.random.default_rng(3).normal(size=(4, 8))
        rec = E.RoutingRecord(0, (1, 3), np.array([0.3, 0.7]))
        out = E.adapter_forward(Tensor(tokens), pool, rec)
        expected = 0.3 * expert_output_oracle(pool, 1, tokens) + 0.7 * expert_output_oracle(pool, 3, tokens)
        assert np.abs(out.array - expected).max() < 1e-12

    def test_index_out_of_range(self, cfg):
        from laddermoe.errors import InternalError

        pool = make_pool(cfg)
        rec = E.RoutingRecord(0, (99,), np.array([1.0]))
        with pytest.raises(InternalError):
            E.adapter_forward(Tensor(np.zeros((2, 8))), pool, rec)


class TestGateFuse:
    def test_zero_side_identity(self):
        backbone = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out = E.gate_fuse(backbone, Tensor(np.zeros((3, 4))), Tensor(np.array([1.7])))
        np.testing.assert_array_equal(out.array, backbone.array)

    def test_gate_zero_is_half(self):
        backbone = Tensor(np.zeros((2, 2)))
        side = Tensor(np.ones((2, 2)))
        out = E.gate_fuse(backbone, side, Tensor(np.array([0.0])))
        np.testing.assert_allclose(out.array, 0.5 * np.ones((2, 2)))

    def test_gate_two(self):
        sig2 = 1.0 / (1.0 + np.exp(-2.0))  # 0.8807970779778823
        backbone = Tensor(np.array([[1.0, -1.0]]))
        side = Tensor(np.array([[2.0, 4.0]]))
        out = E.gate_fuse(backbone, side, Tensor(np.array([2.0])))
        np.testing.assert_allclose(out.array, [[1.0 + 2 * sig2, -1.0 + 4 * sig2]], atol=1e-12)
        assert abs(sig2 - 0.880797) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            E.gate_fuse(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2))), Tensor(np.array([0.0])))


class TestEncode:
    def test_default_config_routing_count(self):
        cfg = E.EncoderConfig()
        params = E.init_encoder_params(cfg, rng_for(2, "enc"))
        img = np.random.default_rng(0).random((32, 32))
        _, recs = E.encode(img, cfg, params, record_routing=True)
        assert len(recs) == 4
        for rec in recs:
            assert len(rec.selected) == 5
            assert len(set(rec.selected)) == 5
            assert (rec.weights > 0).all()
            assert abs(rec.weights.sum() - 1.0) <= 1e-9

    def test_no_adapters_ignores_adapter_params(self, cfg, params):
        img = np.random.default_rng(1).random((8, 8))
        base, _ = E.encode(img, cfg, params, adapters_enabled=False)
        for name, p in params.items():
            if name.startswith("adapters."):
                p.array += 100.0
        again, _ = E.encode(img, cfg, params, adapters_enabled=False)
        np.testing.assert_array_equal(base.array, again.array)

    def test_determinism(self, cfg, params):
        img = np.random.default_rng(2).random((8, 8))
        a, _ = E.encode(img, cfg, params)
        b, _ = E.encode(img, cfg, params)
        np.testing.assert_array_equal(a.array, b.array)

    def test_zero_init_identity_bitwise(self, cfg):
        params = E.init_encoder_params(cfg, rng_for(3, "enc-id"))
        params["adapters.0.gate"].array[:] = 1.3  # gate value must not matter at init
        rng = np.random.default_rng(3)
        for _ in range(5):
            img = rng.random((8, 8))
            with_adapters, _ = E.encode(img, cfg, params)
            without, _ = E.encode(img, cfg, params, adapters_enabled=False)
            np.testing.assert_array_equal(with_adapters.array, without.array)

    def test_expert_sparsity_zero_grad_unselected(self, cfg):
        params = E.init_encoder_params(cfg, rng_for(4, "enc-sparse"))
        # make expert outputs non-trivial so selected experts get gradient
        sel_rng = np.random.default_rng(0)
        for j in range(2):
            params[f"adapters.{j}.experts.up_w"].array[:] = sel_rng.normal(
                size=params[f"adapters.{j}.experts.up_w"].shape
            )
        for name, p in params.items():
            p.requires_grad = not name.startswith("backbone.")
        img = np.random.default_rng(5).random((8, 8))
        with Graph() as g:
            feats, recs = E.encode(img, cfg, params, record_routing=True)
            loss = (feats * feats).mean()
        backward(g, np.ones_like(loss.array), output=loss)
        for j, rec in enumerate(recs):
            grad = params[f"adapters.{j}.experts.down_w"].grad
            for e in range(cfg.num_experts):
                if e in rec.selected:
                    assert np.abs(grad[e]).max() > 0
                else:
                    assert np.abs(grad[e]).max() == 0.0

    def test_batched_matches_single(self, cfg, params):
        imgs = np.random.default_rng(6).random((3, 8, 8))
        batch, _ = E.encode(imgs, cfg, params)
        for i in range(3):
            single, _ = E.encode(imgs[i], cfg, params)
            assert np.abs(batch.array[i] - single.array).max() < 1e-9
