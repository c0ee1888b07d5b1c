"""Objective-function tests: closed-form values, oracle equality, sampling
statistics, variant dispatch, and gradient checks."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from mlmlab import autodiff as ad
from mlmlab import encoder as enc
from mlmlab import objectives as obj
from mlmlab.corpus import MaskedBatch
from mlmlab.errors import ConfigurationError, ContractError
from mlmlab.rng import AnchorStreams, stream

from oracles import oracle_cross_entropy, oracle_infonce, oracle_tc


def fake_output(hidden, logits):
    return enc.EncoderOutput(hidden=ad.tensor(hidden, requires_grad=True),
                             logits=ad.tensor(logits, requires_grad=True))


def simple_batch(original, input_ids=None, mask=None):
    original = np.asarray(original, dtype=np.int64)
    input_ids = original if input_ids is None else np.asarray(input_ids)
    pads = original == 0
    mask = np.zeros_like(pads) if mask is None else np.asarray(mask, dtype=bool)
    return MaskedBatch(input_ids=np.array(input_ids), original_ids=original,
                       mask_flags=mask, pad_flags=pads,
                       seq_index=np.arange(original.shape[0]))


def content_batch(rng, rows, content, vocab=40, mask_ratio=0.0):
    """Rows of [CLS] c... [SEP] with optional random mask flags."""
    width = content + 2
    ids = rng.integers(5, vocab, size=(rows, width))
    ids[:, 0] = 2
    ids[:, -1] = 3
    mask = np.zeros((rows, width), dtype=bool)
    if mask_ratio > 0:
        for r in range(rows):
            k = max(1, round(mask_ratio * content))
            mask[r, rng.choice(np.arange(1, content + 1), size=k, replace=False)] = True
    return simple_batch(ids, mask=mask)


class TestMlmLoss:
    def test_uniform_logits_ln_vocab(self):
        batch = simple_batch([[2, 7, 3]], mask=[[False, True, False]])
        out = fake_output(np.zeros((1, 3, 4)), np.zeros((1, 3, 8)))
        assert abs(obj.mlm_loss(out, batch).item() - math.log(8)) < 1e-12

    def test_dominant_logit_vanishes(self):
        batch = simple_batch([[2, 7, 3]], mask=[[False, True, False]])
        logits = np.full((1, 3, 8), -20.0)
        logits[0, 1, 7] = 20.0
        out = fake_output(np.zeros((1, 3, 4)), logits)
        assert obj.mlm_loss(out, batch).item() < 1e-8

    def test_two_position_oracle(self):
        # Synthetic vocab of 3: targets 2 and 0 at the two masked positions.
        original = np.array([[2, 0, 1]])
        batch = MaskedBatch(
            input_ids=original.copy(), original_ids=original,
            mask_flags=np.array([[True, True, False]]),
            pad_flags=np.zeros((1, 3), dtype=bool), seq_index=np.array([0]))
        logits = np.zeros((1, 3, 3))
        logits[0, 0] = [1.0, 2.0, 3.0]
        logits[0, 1] = [0.0, 0.0, 1.0]
        out = fake_output(np.zeros((1, 3, 2)), logits)
        expected = oracle_cross_entropy([[1, 2, 3], [0, 0, 1]], [2, 0])
        npt.assert_allclose(obj.mlm_loss(out, batch).item(), expected, rtol=1e-12)

    def test_empty_mask_contract_error(self):
        batch = simple_batch([[2, 7, 3]])
        out = fake_output(np.zeros((1, 3, 4)), np.zeros((1, 3, 8)))
        with pytest.raises(ContractError):
            obj.mlm_loss(out, batch)

    def test_pooled_over_batch_not_two_level(self):
        # One masked position in row 0, three in row 1: the mean weights all
        # four positions equally.
        batch = simple_batch(
            [[2, 7, 3, 0, 0, 0], [2, 8, 9, 10, 7, 3]],
            mask=[[False, True] + [False] * 4,
                  [False, True, True, True, False, False]])
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 6, 12))
        out = fake_output(np.zeros((2, 6, 4)), logits)
        rows = [logits[0, 1], logits[1, 1], logits[1, 2], logits[1, 3]]
        targets = [7, 8, 9, 10]
        expected = oracle_cross_entropy(rows, targets)
        npt.assert_allclose(obj.mlm_loss(out, batch).item(), expected, rtol=1e-12)


class TestTpLoss:
    def test_uniform_logits(self):
        batch = simple_batch([[2, 5, 7, 3]])
        out = fake_output(np.zeros((1, 4, 4)), np.zeros((1, 4, 8)))
        assert abs(obj.tp_loss(out, batch).item() - math.log(8)) < 1e-12

    def test_all_masked_equals_mlm(self):
        rng = np.random.default_rng(1)
        batch = content_batch(rng, 2, 5, mask_ratio=1.0)
        assert (batch.mask_flags == batch.content_flags()).all()
        logits = rng.normal(size=(2, 7, 40))
        out = fake_output(np.zeros((2, 7, 4)), logits)
        assert obj.tp_loss(out, batch).item() == obj.mlm_loss(out, batch).item()

    def test_unmasked_only_restriction(self):
        batch = simple_batch([[2, 7, 9, 3]],
                             mask=[[False, True, False, False]])
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(1, 4, 12))
        out = fake_output(np.zeros((1, 4, 4)), logits)
        expected = oracle_cross_entropy([logits[0, 2]], [9])
        npt.assert_allclose(obj.tp_loss(out, batch, unmasked_only=True).item(),
                            expected, rtol=1e-12)


class TestGlobalBiasScore:
    def test_identity_and_arithmetic(self):
        h = ad.tensor(np.array([1.0, 2.0]))
        e = ad.tensor(np.array([0.5, 0.5]))
        npt.assert_array_equal(obj.global_bias(h, e).data, [0.5, 1.5])
        npt.assert_array_equal(obj.global_bias(h, h).data, [0.0, 0.0])

    def test_reconstruction_bitwise(self):
        rng = np.random.default_rng(3)
        h = ad.tensor(rng.normal(size=(64,)))
        e = ad.tensor(rng.normal(scale=0.02, size=(64,)))
        g = obj.global_bias(h, e)
        npt.assert_array_equal(g.data, h.data - e.data)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            obj.global_bias(ad.tensor(np.ones(3)), ad.tensor(np.ones(4)))

    def test_score_equal_vectors_at_default_temperature(self):
        g = ad.tensor(np.array([0.3, -0.7, 0.2]))
        assert abs(obj.score(g, g, 0.07).item() - 14.2857) < 1e-4

    def test_score_orthogonal(self):
        a = ad.tensor(np.array([1.0, 0.0]))
        b = ad.tensor(np.array([0.0, 1.0]))
        assert obj.score(a, b, 0.07).item() == 0.0

    def test_score_derived_value(self):
        a = ad.tensor(np.array([1.0, 0.0]))
        b = ad.tensor(np.array([1.0, 1.0]))
        assert abs(obj.score(a, b, 0.5).item() - 1.41421) < 1e-4

    def test_score_bound(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = ad.tensor(rng.normal(size=(8,)) * 10.0 ** rng.integers(-8, 4))
            b = ad.tensor(rng.normal(size=(8,)) * 10.0 ** rng.integers(-8, 4))
            assert abs(obj.score(a, b, 0.07).item()) <= 1 / 0.07 + 1e-9


class TestInfonce:
    def test_all_equal_scores(self):
        for k in (1, 10, 50):
            s = ad.tensor(np.array(0.37))
            negs = ad.tensor(np.full(k, 0.37))
            got = obj.infonce_loss(s, negs).item()
            assert abs(got - math.log(k + 1)) < 1e-12

    def test_separated_scores_vanish(self):
        tau = 0.07
        s = ad.tensor(np.array(1 / tau))
        negs = ad.tensor(np.full(50, -1 / tau))
        assert obj.infonce_loss(s, negs).item() < 1e-10

    def test_two_way_tie(self):
        got = obj.infonce_loss(ad.tensor(np.array(0.0)),
                               ad.tensor(np.array([0.0]))).item()
        assert abs(got - math.log(2)) < 1e-12

    def test_matches_oracle_and_bounds(self):
        rng = np.random.default_rng(5)
        tau, k = 0.07, 20
        for _ in range(30):
            sp = rng.uniform(-1 / tau, 1 / tau)
            sn = rng.uniform(-1 / tau, 1 / tau, size=k)
            got = obj.infonce_loss(ad.tensor(np.array(sp)),
                                   ad.tensor(sn)).item()
            npt.assert_allclose(got, oracle_infonce(sp, sn), rtol=1e-12)
            assert 0 < got <= math.log(1 + k * math.exp(2 / tau))

    def test_alignment_monotonicity(self):
        rng = np.random.default_rng(6)
        negs = ad.tensor(rng.uniform(-5, 5, size=10))
        values = [obj.infonce_loss(ad.tensor(np.array(sp)), negs).item()
                  for sp in np.linspace(-10.0, 10.0, 9)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_overflow_safe(self):
        got = obj.infonce_loss(ad.tensor(np.array(1000.0)),
                               ad.tensor(np.array([999.0, -1000.0]))).item()
        assert np.isfinite(got) and got > 0


class TestSamplePositive:
    def test_boundary_clipping(self):
        # Content at positions 1..3, anchor at 1, W=5: candidates 2 and 3.
        draws = {obj.sample_positive(1, [1, 2, 3], 5, stream(0, "t", i))
                 for i in range(64)}
        assert draws == {2, 3}

    def test_window_one_adjacent(self):
        for i in range(32):
            got = obj.sample_positive(5, [3, 4, 5, 6, 7], 1, stream(1, "t", i))
            assert got in (4, 6)

    def test_no_candidate_returns_none(self):
        assert obj.sample_positive(1, [1], 5, stream(0, "t", 0)) is None
        assert obj.sample_positive(10, [1, 10], 5, stream(0, "t", 0)) is None

    def test_uniformity_monte_carlo(self):
        # Interior anchor, W=2: candidates {3,4,6,7}; 10,000 draws.
        counts = {3: 0, 4: 0, 6: 0, 7: 0}
        for i in range(10_000):
            counts[obj.sample_positive(5, list(range(1, 10)), 2,
                                       stream(2, "t", i))] += 1
        for c in counts.values():
            assert abs(c - 2500) < 150


class TestSampleNegatives:
    def batch(self, rows=3, content=4):
        return content_batch(np.random.default_rng(7), rows, content)

    def test_other_rows_only(self):
        batch = self.batch(rows=2)
        negs = obj.sample_negatives(0, batch, 50, stream(3, "t", 0))
        assert all(r == 1 for r, _ in negs)

    def test_pool_equals_k_is_permutation(self):
        batch = self.batch(rows=3, content=4)  # pool for row 0 = 8 positions
        negs = obj.sample_negatives(0, batch, 8, stream(3, "t", 1))
        assert sorted(negs) == sorted(
            (r, p) for r, p in np.argwhere(batch.content_flags()) if r != 0)

    def test_small_pool_with_replacement(self):
        batch = self.batch(rows=2, content=4)  # pool = 4 < K = 50
        negs = obj.sample_negatives(0, batch, 50, stream(3, "t", 2))
        assert len(negs) == 50
        assert len(set(negs)) <= 4
        assert all(r == 1 for r, _ in negs)

    def test_single_row_configuration_error(self):
        batch = self.batch(rows=1)
        with pytest.raises(ConfigurationError):
            obj.sample_negatives(0, batch, 5, stream(3, "t", 3))

    def test_references_are_content(self):
        batch = self.batch(rows=4, content=6)
        negs = obj.sample_negatives(2, batch, 50, stream(3, "t", 4))
        content = batch.content_flags()
        assert all(content[r, p] for r, p in negs)


class TestTcLoss:
    def make_setup(self, rng, rows=2, content=4, d=3, vocab=40, **cfg_over):
        batch = content_batch(rng, rows, content, vocab=vocab)
        hidden = rng.normal(size=(rows, content + 2, d))
        table = ad.tensor(rng.normal(size=(vocab, d)), requires_grad=True)
        out = fake_output(hidden, np.zeros((rows, content + 2, vocab)))
        cfg = obj.ObjectiveConfig(variant="taco", negatives=5, window=5,
                                  temperature=0.07, **cfg_over)
        return batch, out, {"tok_emb": table}, cfg

    def test_degenerate_symmetric_case(self):
        # Identical hidden states and identical embeddings everywhere: every
        # score ties, every anchor contributes exactly ln(K+1).
        batch = content_batch(np.random.default_rng(8), 3, 4)
        hidden = np.tile(np.array([0.3, -0.2, 0.9]), (3, 6, 1))
        table = ad.tensor(np.tile(np.array([0.1, 0.1, 0.1]), (40, 1)))
        out = fake_output(hidden, np.zeros((3, 6, 40)))
        cfg = obj.ObjectiveConfig(negatives=7)
        got = obj.tc_loss(out, batch, {"tok_emb": table}, cfg,
                          AnchorStreams(0, 1))
        assert abs(got.item() - math.log(8)) < 1e-12

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(9)
        batch, out, params, cfg = self.make_setup(rng)
        streams = AnchorStreams(17, 3)
        got = obj.tc_loss(out, batch, params, cfg, streams).item()
        samples = obj.contrastive_samples(batch, cfg, AnchorStreams(17, 3))
        expected = oracle_tc(out.hidden.data, params["tok_emb"].data,
                             batch.original_ids, samples, cfg.temperature)
        assert abs(got - expected) < 1e-10

    def test_oracle_equality_across_seeds_and_shapes(self):
        for i, (rows, content) in enumerate([(2, 4), (3, 6), (4, 3)]):
            rng = np.random.default_rng(100 + i)
            batch, out, params, cfg = self.make_setup(rng, rows, content, d=5)
            streams = AnchorStreams(i, i + 1)
            got = obj.tc_loss(out, batch, params, cfg, streams).item()
            samples = obj.contrastive_samples(batch, cfg, AnchorStreams(i, i + 1))
            expected = oracle_tc(out.hidden.data, params["tok_emb"].data,
                                 batch.original_ids, samples, cfg.temperature)
            assert abs(got - expected) < 1e-10

    def test_two_level_vs_flat_mean(self):
        # Unequal content lengths (2 vs 6): sequence-first averaging weighs
        # the short row's anchors more than a flat token mean would.
        rng = np.random.default_rng(10)
        ids = np.zeros((2, 8), dtype=np.int64)
        ids[0, :4] = [2, 7, 8, 3]
        ids[1] = [2, 9, 10, 11, 12, 13, 14, 3]
        batch = simple_batch(ids)
        hidden = rng.normal(size=(2, 8, 4))
        table = ad.tensor(rng.normal(size=(40, 4)))
        out = fake_output(hidden, np.zeros((2, 8, 40)))
        cfg = obj.ObjectiveConfig(negatives=3)
        streams = AnchorStreams(5, 9)
        got = obj.tc_loss(out, batch, {"tok_emb": table}, cfg, streams).item()
        samples = obj.contrastive_samples(batch, cfg, AnchorStreams(5, 9))
        two_level = oracle_tc(hidden, table.data, ids, samples, cfg.temperature)
        flat = oracle_tc(hidden, table.data, ids, samples, cfg.temperature,
                         two_level=False)
        assert abs(got - two_level) < 1e-10
        assert abs(got - flat) > 1e-6

    def test_concentrated_equals_taco_at_full_mask(self):
        rng = np.random.default_rng(11)
        batch = content_batch(rng, 3, 5, mask_ratio=1.0)
        hidden = rng.normal(size=(3, 7, 4))
        table = ad.tensor(rng.normal(size=(40, 4)))
        out = fake_output(hidden, np.zeros((3, 7, 40)))
        base = dict(negatives=4, window=5, temperature=0.07)
        a = obj.tc_loss(out, batch, {"tok_emb": table},
                        obj.ObjectiveConfig(variant="taco", **base),
                        AnchorStreams(2, 7))
        b = obj.tc_loss(out, batch, {"tok_emb": table},
                        obj.ObjectiveConfig(variant="concentrated_taco", **base),
                        AnchorStreams(2, 7))
        assert a.item() == b.item()

    def test_concentrated_uses_only_masked_anchors(self):
        rng = np.random.default_rng(12)
        batch = content_batch(rng, 2, 6, mask_ratio=0.3)
        cfg = obj.ObjectiveConfig(variant="concentrated_taco", negatives=3)
        samples = obj.contrastive_samples(batch, cfg, AnchorStreams(0, 1))
        anchors = {s.anchor for s in samples}
        masked = {(r, p) for r, p in np.argwhere(batch.mask_flags)}
        assert anchors <= masked
        assert len(anchors) == len(masked)

    def test_anchor_embedding_source_input_token(self):
        rng = np.random.default_rng(13)
        batch = content_batch(rng, 2, 5, mask_ratio=0.4)
        corrupted = batch.original_ids.copy()
        corrupted[batch.mask_flags] = 1  # [MASK]
        batch.input_ids = corrupted
        hidden = rng.normal(size=(2, 7, 4))
        table = ad.tensor(rng.normal(size=(40, 4)))
        out = fake_output(hidden, np.zeros((2, 7, 40)))
        values = {}
        for source in ("original_token", "input_token"):
            cfg = obj.ObjectiveConfig(negatives=4,
                                      anchor_embedding_source=source)
            got = obj.tc_loss(out, batch, {"tok_emb": table}, cfg,
                              AnchorStreams(1, 1)).item()
            ids = batch.original_ids if source == "original_token" \
                else batch.input_ids
            samples = obj.contrastive_samples(batch, cfg, AnchorStreams(1, 1))
            expected = oracle_tc(hidden, table.data, ids, samples,
                                 cfg.temperature)
            assert abs(got - expected) < 1e-10
            values[source] = got
        assert values["original_token"] != values["input_token"]

    def test_single_row_batch_rejected(self):
        rng = np.random.default_rng(14)
        batch = content_batch(rng, 1, 5)
        out = fake_output(rng.normal(size=(1, 7, 4)), np.zeros((1, 7, 40)))
        with pytest.raises(ConfigurationError):
            obj.tc_loss(out, batch, {"tok_emb": ad.tensor(np.zeros((40, 4)))},
                        obj.ObjectiveConfig(), AnchorStreams(0, 1))

    def test_no_anchor_contract_error(self):
        # Two rows, one content token each: no in-window positive anywhere.
        ids = np.array([[2, 7, 3], [2, 9, 3]])
        batch = simple_batch(ids)
        rng = np.random.default_rng(15)
        out = fake_output(rng.normal(size=(2, 3, 4)), np.zeros((2, 3, 40)))
        with pytest.raises(ContractError):
            obj.tc_loss(out, batch, {"tok_emb": ad.tensor(np.zeros((40, 4)))},
                        obj.ObjectiveConfig(), AnchorStreams(0, 1))

    def test_gradient_flows_to_hidden_and_embeddings(self):
        rng = np.random.default_rng(16)
        batch, out, params, cfg = self.make_setup(rng)
        loss = obj.tc_loss(out, batch, params, cfg, AnchorStreams(0, 1))
        ad.backward(loss)
        assert out.hidden.grad is not None and np.abs(out.hidden.grad).sum() > 0
        table = params["tok_emb"]
        assert table.grad is not None and np.abs(table.grad).sum() > 0

    def test_tc_gradcheck(self):
        rng = np.random.default_rng(17)
        batch, out, params, cfg = self.make_setup(rng, rows=2, content=3)
        hidden0 = out.hidden.data.copy()
        table = params["tok_emb"]

        def f(h, t):
            o = enc.EncoderOutput(hidden=h, logits=out.logits)
            return obj.tc_loss(o, batch, {"tok_emb": t}, cfg,
                               AnchorStreams(0, 1))

        h = ad.tensor(hidden0, requires_grad=True)
        report = ad.gradcheck(f, [h, table], delta=1e-5, tol=1e-6)
        assert report.passed, report.summary()


class TestTotalLoss:
    def setup_case(self, variant, seed=18):
        rng = np.random.default_rng(seed)
        batch = content_batch(rng, 2, 5, mask_ratio=0.2)
        hidden = rng.normal(size=(2, 7, 4))
        logits = rng.normal(size=(2, 7, 40))
        out = fake_output(hidden, logits)
        params = {"tok_emb": ad.tensor(rng.normal(size=(40, 4)),
                                       requires_grad=True)}
        cfg = obj.ObjectiveConfig(variant=variant, negatives=4)
        return out, batch, params, cfg

    def test_mlm_only_dispatch(self):
        out, batch, params, cfg = self.setup_case("mlm_only")
        breakdown = obj.total_loss(out, batch, params, cfg, AnchorStreams(0, 1))
        assert breakdown.total.item() == obj.mlm_loss(out, batch).item()
        assert breakdown.tc is None and breakdown.tp is None

    def test_taco_additivity_bitwise(self):
        out, batch, params, cfg = self.setup_case("taco")
        b = obj.total_loss(out, batch, params, cfg, AnchorStreams(3, 4))
        assert b.total.item() == b.mlm.item() + b.tc.item()

    def test_concentrated_taco_components(self):
        out, batch, params, cfg = self.setup_case("concentrated_taco")
        b = obj.total_loss(out, batch, params, cfg, AnchorStreams(3, 4))
        assert b.tc is not None and b.tp is None
        assert b.total.item() == b.mlm.item() + b.tc.item()

    def test_extended_mlm_components(self):
        out, batch, params, cfg = self.setup_case("extended_mlm")
        b = obj.total_loss(out, batch, params, cfg, AnchorStreams(3, 4))
        assert b.tp is not None and b.tc is None
        assert b.total.item() == b.mlm.item() + b.tp.item()

    def test_invalid_variant(self):
        out, batch, params, _ = self.setup_case("taco")
        cfg = obj.ObjectiveConfig(variant="nonsense")
        with pytest.raises(ConfigurationError):
            obj.total_loss(out, batch, params, cfg, AnchorStreams(0, 1))

    def test_tc_weight_multiplier(self):
        out, batch, params, cfg = self.setup_case("taco")
        cfg.tc_weight = 0.5
        b = obj.total_loss(out, batch, params, cfg, AnchorStreams(3, 4))
        npt.assert_allclose(b.total.item(),
                            b.mlm.item() + 0.5 * b.tc.item(), rtol=1e-15)
