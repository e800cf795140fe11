import math

import numpy as np
import pytest

from adctr.embedding import InstanceEmbedding, embed_matrix
from adctr.models import (InteractiveAttentionParams, SelfAttentionParams, Variant,
                          aggregate_interactive_attention, aggregate_pooling,
                          aggregate_self_attention, backward, forward, forward_batch,
                          init_model, load_model, loss, loss_from_logits, save_model)
from adctr.numerics import ContractViolation, make_rng, relu, sigmoid
from adctr.schema import AUX_GROUPS


def emb(vec, group="clicked"):
    return InstanceEmbedding(group=group, vector=np.asarray(vec, dtype=np.float64))


def zero_params(model):
    for arr in model.tensors().values():
        arr[...] = 0.0
    return model


def build(variant, toy_problem, seed=21, dropout=0.0, **kw):
    schemas, vocab, _ = toy_problem
    return init_model(Variant(variant), schemas, vocab.size, make_rng(seed),
                      k=kw.pop("k", 4), fc_dims=kw.pop("fc_dims", (12, 6)),
                      attention_dim=kw.pop("attention_dim", 5), dropout_p=dropout)


class TestPooling:
    def test_empty_list_is_zero_vector(self):
        np.testing.assert_array_equal(aggregate_pooling([], dim=3), np.zeros(3))

    def test_single_ad_unchanged(self):
        v = np.array([1.0, -2.0])
        np.testing.assert_array_equal(aggregate_pooling([emb(v)]), v)

    def test_two_ads_sum(self):
        out = aggregate_pooling([emb([1.0, 2.0]), emb([0.5, -1.0])])
        np.testing.assert_array_equal(out, [1.5, 1.0])

    def test_mixed_groups_rejected(self):
        with pytest.raises(ContractViolation):
            aggregate_pooling([emb([1.0], "clicked"), emb([1.0], "unclicked")])


class TestSelfAttention:
    def test_constant_scorer_gives_uniform_weights(self):
        params = SelfAttentionParams(w1=np.zeros((3, 2)), b1=np.zeros(3),
                                     w2=np.zeros(3), b2=np.array([7.0]))
        ads = [emb([1.0, 0.0]), emb([0.0, 2.0]), emb([3.0, 3.0])]
        agg, alpha = aggregate_self_attention(ads, params)
        np.testing.assert_allclose(alpha, [1 / 3] * 3)
        np.testing.assert_allclose(agg, np.mean([a.vector for a in ads], axis=0))

    def test_known_scores_give_known_weights(self):
        # beta_i = relu(x_i[0]); scores (0, ln 3) -> weights (1/4, 3/4)
        params = SelfAttentionParams(w1=np.array([[1.0, 0.0]]), b1=np.zeros(1),
                                     w2=np.ones(1), b2=np.zeros(1))
        ads = [emb([0.0, 5.0]), emb([math.log(3.0), -1.0])]
        _, alpha = aggregate_self_attention(ads, params)
        np.testing.assert_allclose(alpha, [0.25, 0.75], atol=1e-12)

    def test_matches_straight_line_recomputation(self):
        rng = make_rng(8)
        params = SelfAttentionParams(w1=rng.normal(size=(4, 3)), b1=rng.normal(size=4),
                                     w2=rng.normal(size=4), b2=rng.normal(size=1))
        ads = [emb(rng.normal(size=3)) for _ in range(3)]
        agg, alpha = aggregate_self_attention(ads, params)

        beta = [float(params.w2 @ np.maximum(params.w1 @ a.vector + params.b1, 0.0)
                      + params.b2[0]) for a in ads]
        weights = np.exp(beta) / np.exp(beta).sum()
        expected = sum(w * a.vector for w, a in zip(weights, ads))
        np.testing.assert_allclose(alpha, weights, rtol=1e-12)
        np.testing.assert_allclose(agg, expected, rtol=1e-12)

    def test_weights_on_simplex(self):
        rng = make_rng(9)
        for n in (1, 2, 5):
            params = SelfAttentionParams(w1=rng.normal(size=(4, 3)), b1=rng.normal(size=4),
                                         w2=rng.normal(size=4), b2=rng.normal(size=1))
            ads = [emb(rng.normal(size=3)) for _ in range(n)]
            _, alpha = aggregate_self_attention(ads, params)
            assert np.all(alpha >= 0)
            assert alpha.sum() == pytest.approx(1.0, abs=1e-12)

    def test_empty_list_rejected(self):
        params = SelfAttentionParams(w1=np.zeros((1, 2)), b1=np.zeros(1),
                                     w2=np.zeros(1), b2=np.zeros(1))
        with pytest.raises(ContractViolation):
            aggregate_self_attention([], params)


class TestInteractiveAttention:
    def _params(self, rng, d_t=2, d_g=2, h=3):
        return InteractiveAttentionParams(w_tc=rng.normal(size=(h, d_t + d_g)),
                                          b_tc1=rng.normal(size=h),
                                          h=rng.normal(size=h),
                                          b_tc2=rng.normal(size=1))

    def test_zero_head_reduces_to_sum_pooling(self):
        rng = make_rng(10)
        params = self._params(rng)
        params.h[...] = 0.0
        params.b_tc2[...] = 0.0
        target = emb([0.3, -0.7], "target")
        ads = [emb(rng.normal(size=2)) for _ in range(3)]
        agg, alpha = aggregate_interactive_attention(target, ads, params)
        np.testing.assert_array_equal(alpha, np.ones(3))
        np.testing.assert_allclose(agg, aggregate_pooling(ads), rtol=0, atol=0)

    def test_empty_list(self):
        params = self._params(make_rng(0))
        agg, alpha = aggregate_interactive_attention(emb([1.0, 2.0], "target"), [],
                                                     params, dim=2)
        np.testing.assert_array_equal(agg, np.zeros(2))
        assert alpha.size == 0

    def test_matches_straight_line_recomputation(self):
        rng = make_rng(11)
        params = self._params(rng)
        target = emb(rng.normal(size=2), "target")
        ads = [emb(rng.normal(size=2)) for _ in range(2)]
        agg, alpha = aggregate_interactive_attention(target, ads, params)

        expected_alpha = []
        for a in ads:
            pair = np.concatenate([target.vector, a.vector])
            score = float(params.h @ np.maximum(params.w_tc @ pair + params.b_tc1, 0.0)
                          + params.b_tc2[0])
            expected_alpha.append(math.exp(min(score, 30.0)))
        expected = sum(w * a.vector for w, a in zip(expected_alpha, ads))
        np.testing.assert_allclose(alpha, expected_alpha, rtol=1e-12)
        np.testing.assert_allclose(agg, expected, rtol=1e-12)

    def test_weights_positive(self):
        rng = make_rng(12)
        params = self._params(rng)
        target = emb(rng.normal(size=2), "target")
        ads = [emb(rng.normal(size=2)) for _ in range(5)]
        _, alpha = aggregate_interactive_attention(target, ads, params)
        assert np.all(alpha > 0)

    def test_weight_independent_of_other_ads(self):
        # No cross-ad normalization: removing neighbours leaves a weight as is.
        rng = make_rng(13)
        params = self._params(rng)
        target = emb(rng.normal(size=2), "target")
        ads = [emb(rng.normal(size=2)) for _ in range(4)]
        _, alpha_all = aggregate_interactive_attention(target, ads, params)
        _, alpha_one = aggregate_interactive_attention(target, ads[:1], params)
        assert alpha_all[0] == pytest.approx(alpha_one[0], rel=1e-12)

    def test_score_clamp_bounds_weights(self):
        params = InteractiveAttentionParams(w_tc=np.full((1, 4), 50.0), b_tc1=np.zeros(1),
                                            h=np.array([50.0]), b_tc2=np.zeros(1))
        target = emb([1.0, 1.0], "target")
        _, alpha = aggregate_interactive_attention(target, [emb([1.0, 1.0])], params)
        assert alpha[0] == pytest.approx(math.exp(30.0))


class TestForward:
    def test_all_zero_params_give_half(self, toy_problem):
        _, _, examples = toy_problem
        for variant in Variant:
            model = zero_params(build(variant, toy_problem))
            pctr, _ = forward_batch(model, examples)
            np.testing.assert_allclose(pctr, 0.5)

    def test_outputs_strictly_inside_unit_interval(self, toy_problem):
        _, _, examples = toy_problem
        for variant in Variant:
            model = build(variant, toy_problem, seed=33)
            pctr, _ = forward_batch(model, examples)
            assert np.all((pctr > 0) & (pctr < 1))

    def test_interactive_with_zero_head_equals_pooling(self, toy_problem):
        # Shared non-attention parameters come from the same seed; zeroing the
        # interactive head makes every weight exp(0) = 1, i.e. sum pooling.
        _, _, examples = toy_problem
        model_p = build("dstn-p", toy_problem, seed=5)
        model_i = build("dstn-i", toy_problem, seed=5)
        for group in AUX_GROUPS:
            model_i.attention[group].h[...] = 0.0
            model_i.attention[group].b_tc2[...] = 0.0
        p_out, _ = forward_batch(model_p, examples)
        i_out, _ = forward_batch(model_i, examples)
        np.testing.assert_allclose(i_out, p_out, atol=1e-12, rtol=0)

    def test_self_attention_with_constant_scorer_is_mean_pooling(self, toy_problem):
        # Forward-output level: constant f turns each aggregate into the group
        # mean; the head over mean aggregates is recomputed straight-line.
        schemas, vocab, examples = toy_problem
        model = build("dstn-s", toy_problem, seed=6)
        for group in AUX_GROUPS:
            att = model.attention[group]
            att.w1[...] = 0.0
            att.b1[...] = 0.0
            att.w2[...] = 0.0
            att.b2[...] = 3.3
        s_out, _ = forward_batch(model, examples)

        for ex, got in zip(examples, s_out):
            x_t = embed_matrix([ex.target], model.embedding, schemas["target"])[0]
            parts = [x_t]
            for group in AUX_GROUPS:
                ads = getattr(ex, group)
                vecs = embed_matrix(list(ads), model.embedding, schemas[group])
                agg = vecs.mean(axis=0) if len(ads) else np.zeros(model.dim(group))
                parts.append(agg)
            cur = np.concatenate(parts)
            for w, b in [(model.fusion_w, model.fusion_b)] + model.fc:
                cur = relu(w @ cur + b)
            expected = sigmoid(float(model.out_w @ cur + model.out_b[0]))
            assert got == pytest.approx(expected, abs=1e-12)

    def test_empty_group_equals_zero_embedding_ads(self, toy_problem):
        # Fused representation is unchanged whether a group is absent or
        # present with ads that embed to the zero vector.
        import dataclasses

        _, _, examples = toy_problem
        model = build("dstn-p", toy_problem, seed=7)
        ex = next(e for e in examples if e.clicked)
        zeroed = model.clone()
        for ad in ex.clicked:
            for idx_list in ad.indices:
                for i in idx_list:
                    zeroed.embedding.e[i] = 0.0
        without, _ = forward(zeroed, dataclasses.replace(ex, clicked=()))
        with_zero, _ = forward(zeroed, ex)
        assert without == pytest.approx(with_zero, abs=1e-15)

    def test_eval_forward_is_deterministic(self, toy_problem):
        _, _, examples = toy_problem
        model = build("dstn-i", toy_problem, seed=8, dropout=0.5)
        a, _ = forward_batch(model, examples, mode="eval")
        b, _ = forward_batch(model, examples, mode="eval")
        np.testing.assert_array_equal(a, b)

    def test_train_forward_needs_rng_when_dropout_on(self, toy_problem):
        _, _, examples = toy_problem
        model = build("dnn", toy_problem, seed=9, dropout=0.5)
        with pytest.raises(ContractViolation):
            forward_batch(model, examples, mode="train")

    def test_lr_uses_target_features_only(self, toy_problem):
        import dataclasses

        _, _, examples = toy_problem
        model = build("lr", toy_problem, seed=10)
        ex = next(e for e in examples if e.clicked or e.contextual)
        stripped = dataclasses.replace(ex, contextual=(), clicked=(), unclicked=())
        assert forward(model, ex)[0] == forward(model, stripped)[0]


class TestLoss:
    def test_half_prediction_positive_label(self):
        assert loss([0.5], [1]) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_two_example_batch(self):
        assert loss([0.9, 0.1], [1, 0]) == pytest.approx(0.105361, abs=1e-6)

    def test_perfect_limit_goes_to_zero(self):
        assert loss([1.0 - 1e-12], [1]) < 1e-11

    def test_contract_violations(self):
        with pytest.raises(ContractViolation):
            loss([0.0], [0])
        with pytest.raises(ContractViolation):
            loss([1.0], [1])
        with pytest.raises(ContractViolation):
            loss([0.5], [2])
        with pytest.raises(ContractViolation):
            loss([0.5, 0.5], [1])

    def test_logit_form_agrees(self):
        rng = make_rng(14)
        logits = rng.normal(size=50) * 3
        y = rng.integers(0, 2, size=50).astype(float)
        assert loss_from_logits(logits, y) == pytest.approx(loss(sigmoid(logits), y), rel=1e-12)


class TestBackward:
    def test_logit_gradient_identity(self, toy_problem):
        # d loss / d logit == pctr - y for a single example.
        _, _, examples = toy_problem
        model = build("dstn-i", toy_problem, seed=15)
        ex = examples[0]
        pctr, trace = forward_batch(model, [ex], mode="train")
        grads = backward(model, [ex], trace)
        np.testing.assert_allclose(grads.dense["out.b"], [pctr[0] - ex.label], rtol=1e-12)

    def test_no_aux_ads_means_zero_attention_grads(self, toy_problem):
        import dataclasses

        _, _, examples = toy_problem
        model = build("dstn-i", toy_problem, seed=16)
        bare = [dataclasses.replace(examples[0], contextual=(), clicked=(), unclicked=())]
        _, trace = forward_batch(model, bare, mode="train")
        grads = backward(model, bare, trace)
        for group in AUX_GROUPS:
            for suffix in ("Wtc", "btc1", "h", "btc2"):
                np.testing.assert_array_equal(grads.dense[f"attn.{group}.{suffix}"], 0.0)

    def test_trace_batch_mismatch_rejected(self, toy_problem):
        _, _, examples = toy_problem
        model = build("dstn-p", toy_problem, seed=17)
        _, trace = forward_batch(model, examples[:4], mode="train")
        with pytest.raises(ContractViolation):
            backward(model, examples[4:8], trace)

    def test_untouched_embedding_rows_absent(self, toy_problem):
        _, _, examples = toy_problem
        model = build("dstn-p", toy_problem, seed=18)
        batch = examples[:2]
        _, trace = forward_batch(model, batch, mode="train")
        grads = backward(model, batch, trace)
        touched = {i for ex in batch
                   for inst in [ex.target, *ex.contextual, *ex.clicked, *ex.unclicked]
                   for idx in inst.indices for i in idx}
        assert set(grads.emb_rows.tolist()) == touched


class TestCheckpoint:
    def test_round_trip_preserves_forward(self, toy_problem, tmp_path):
        schemas, vocab, examples = toy_problem
        for variant in Variant:
            model = build(variant, toy_problem, seed=19, dropout=0.25)
            path = tmp_path / f"{variant.value}.ckpt"
            save_model(path, model, "sh", "vh")
            loaded, header = load_model(path, schemas)
            assert header["variant"] == variant.header_name
            assert loaded.dropout_p == 0.25
            a, _ = forward_batch(model, examples)
            b, _ = forward_batch(loaded, examples)
            np.testing.assert_array_equal(a, b)

    def test_save_is_byte_deterministic(self, toy_problem, tmp_path):
        model = build("dstn-s", toy_problem, seed=20)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_model(p1, model, "sh", "vh")
        save_model(p2, model, "sh", "vh")
        assert p1.read_bytes() == p2.read_bytes()
