import numpy as np
import pytest

from adctr.models import Variant, init_model
from adctr.numerics import make_rng
from adctr.serving import (AdServer, ModelScorer, RankProtocolServer, RankRequest, StubScorer,
                           ad_display_id, parse_events, rank_request, rank_over_socket,
                           replay_session, score_batch, write_results)
from adctr.session import SessionStore


def zeroed_model(schemas, vocab, variant="dstn-i"):
    model = init_model(Variant(variant), schemas, vocab.size, make_rng(0), k=4,
                       fc_dims=(8, 4), attention_dim=4, dropout_p=0.0)
    for arr in model.tensors().values():
        arr[...] = 0.0
    return model


def stub_by_ad_id(scores):
    return StubScorer(lambda ad: scores[ad_display_id(ad)])


@pytest.fixture()
def env(tiny_dataset):
    ds, vocab, train, *_ = tiny_dataset
    return ds, vocab, train


class TestScoreBatch:
    def test_zero_params_score_half(self, env):
        ds, vocab, train = env
        model = zeroed_model(ds.schemas, vocab)
        ex = train[0]
        scores = score_batch(model, (ex.clicked, ex.unclicked), ex.contextual,
                             [train[i].target for i in range(4)])
        assert scores == [0.5] * 4

    def test_order_independence(self, env):
        ds, vocab, train = env
        model = init_model(Variant.DSTN_I, ds.schemas, vocab.size, make_rng(3), k=4,
                           fc_dims=(8, 4), attention_dim=4, dropout_p=0.0)
        ex = train[0]
        candidates = [train[i].target for i in range(5)]
        forward_order = score_batch(model, (ex.clicked, ex.unclicked), (), candidates)
        reversed_order = score_batch(model, (ex.clicked, ex.unclicked), (), candidates[::-1])
        np.testing.assert_allclose(forward_order, reversed_order[::-1], rtol=1e-12)


class TestRankRequest:
    def test_single_candidate_scored_in_round_one_only(self, env):
        ds, vocab, train = env
        scorer = ModelScorer(zeroed_model(ds.schemas, vocab))
        req = RankRequest("r1", "u", 100, (train[0].target,), slots=4)
        res = rank_request(scorer, SessionStore(), req)
        assert len(res.ranked) == 1
        assert res.ranked[0].round == 1
        assert scorer.forward_count == 1

    def test_five_candidates_four_slots(self, env):
        ds, vocab, train = env
        candidates = tuple(train[i].target for i in range(5))
        scores = {ad_display_id(c): 0.1 * (i + 1) for i, c in enumerate(candidates)}
        scorer = stub_by_ad_id(scores)
        res = rank_request(scorer, SessionStore(),
                           RankRequest("r", "u", 50, candidates, slots=4))
        assert len(res.ranked) == 4
        assert res.ranked[0].round == 1
        assert all(r.round == 2 for r in res.ranked[1:])
        assert scorer.forward_count == 5 + 4

    def test_stub_ranking_equals_single_round_top_slots(self, env):
        ds, vocab, train = env
        rng = make_rng(5)
        candidates = tuple(train[i].target for i in range(6))
        scores = {ad_display_id(c): float(rng.random()) for c in candidates}
        res = rank_request(stub_by_ad_id(scores), SessionStore(),
                           RankRequest("r", "u", 50, candidates, slots=4))
        expected = sorted(candidates, key=lambda c: -scores[ad_display_id(c)])[:4]
        assert [ad_display_id(r.ad) for r in res.ranked] == [ad_display_id(c) for c in expected]

    def test_ties_broken_by_candidate_ordinal(self, env):
        ds, vocab, train = env
        candidates = tuple(train[i].target for i in range(3))
        res = rank_request(StubScorer(lambda ad: 0.7), SessionStore(),
                           RankRequest("r", "u", 1, candidates, slots=3))
        assert [ad_display_id(r.ad) for r in res.ranked] == [ad_display_id(c) for c in candidates]

    def test_bid_weighting_changes_order(self, env):
        ds, vocab, train = env
        candidates = tuple(train[i].target for i in range(2))
        a, b = (ad_display_id(c) for c in candidates)
        scorer = stub_by_ad_id({a: 0.6, b: 0.5})
        bids = {c.identity(): bid for c, bid in zip(candidates, (1.0, 10.0))}
        plain = rank_request(scorer, SessionStore(), RankRequest("r", "u", 1, candidates, slots=2))
        paid = rank_request(scorer, SessionStore(), RankRequest("r", "u", 1, candidates, slots=2),
                            bids=bids)
        assert ad_display_id(plain.ranked[0].ad) == a
        assert ad_display_id(paid.ranked[0].ad) == b

    def test_round_two_sees_winner_as_context(self, env):
        # The winner's identity must raise every round-2 score it contexts.
        ds, vocab, train = env

        class ContextAware:
            def __init__(self):
                self.forward_count = 0

            def score(self, candidates, contextual, clicked, unclicked, now=0, user_id=""):
                self.forward_count += len(candidates)
                bump = 0.2 if contextual else 0.0
                return [0.5 + bump - 0.01 * i for i in range(len(candidates))]

        scorer = ContextAware()
        candidates = tuple(train[i].target for i in range(3))
        res = rank_request(scorer, SessionStore(), RankRequest("r", "u", 1, candidates, slots=3))
        assert res.ranked[0].pctr == pytest.approx(0.5)       # round 1, no context
        assert res.ranked[1].pctr == pytest.approx(0.7)       # round 2, context bump
        assert scorer.forward_count == 3 + 2

    def test_request_validation(self, env):
        ds, vocab, train = env
        with pytest.raises(ValueError):
            RankRequest("r", "u", 1, (), slots=4)
        with pytest.raises(ValueError):
            RankRequest("r", "u", 1, (train[0].target,), slots=0)

    def test_duplicate_candidates_deduplicated(self, env):
        ds, vocab, train = env
        req = RankRequest("r", "u", 1, (train[0].target, train[0].target, train[1].target))
        assert len(req.candidates) == 2


class TestProtocolShape:
    def test_forward_count_is_2n_minus_1(self, env):
        ds, vocab, train = env
        rng = make_rng(6)
        for _ in range(25):
            n = int(rng.integers(2, 9))
            candidates = tuple(train[int(i)].target
                               for i in rng.choice(len(train), size=n, replace=False))
            scorer = StubScorer(lambda ad: float(rng.random()))
            req = RankRequest("r", "u", 10, candidates, slots=int(rng.integers(1, 5)))
            res = rank_request(scorer, SessionStore(), req)
            assert scorer.forward_count == 2 * len(req.candidates) - 1
            assert res.ranked[0].round == 1

    def test_scaling_scores_preserves_choice(self, env):
        ds, vocab, train = env
        candidates = tuple(train[i].target for i in range(5))
        base = {ad_display_id(c): 0.05 + 0.11 * i for i, c in enumerate(candidates)}
        res1 = rank_request(stub_by_ad_id(base), SessionStore(),
                            RankRequest("r", "u", 1, candidates, slots=3))
        scaled = {k: 3.7 * v for k, v in base.items()}
        res2 = rank_request(stub_by_ad_id(scaled), SessionStore(),
                            RankRequest("r", "u", 1, candidates, slots=3))
        assert [ad_display_id(r.ad) for r in res1.ranked] == \
               [ad_display_id(r.ad) for r in res2.ranked]


def _ad_fields(ex):
    """Aux-group serialization of an example's target ad."""
    return ";".join(f"{n}={','.join(v)}" for n, v in ex.target.raw
                    if n not in ("user_id", "age"))


def _cand_fields(ex):
    """REQ candidate serialization: target fields minus the injected user_id."""
    return ";".join(f"{n}={','.join(v)}" for n, v in ex.target.raw if n != "user_id")


class TestReplay:
    def _events_file(self, tmp_path, ds, train, lines):
        path = tmp_path / "events.tsv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_request_sees_prior_events(self, tmp_path, env):
        ds, vocab, train = env
        ad = _ad_fields(train[0])
        lines = [f"IMP\t100\tu1\t{ad}",
                 f"CLICK\t150\tu1\t{ad}",
                 f"REQ\t200\tu1\tr1\t2\t{_cand_fields(train[1])}|{_cand_fields(train[2])}"]
        events = parse_events(self._events_file(tmp_path, ds, train, lines), ds.schemas, vocab)
        store = SessionStore()
        scorer = ModelScorer(zeroed_model(ds.schemas, vocab))
        results = replay_session(scorer, store, events)
        assert len(results) == 1
        clicked, unclicked = store.get_history("u1", now=200)
        assert len(clicked) == 1 and len(unclicked) == 0  # click retired the impression

    def test_visibility_lag_hides_fresh_events(self, tmp_path, env):
        ds, vocab, train = env
        ad = _ad_fields(train[0])
        lines = [f"IMP\t100\tu1\t{ad}",
                 f"REQ\t105\tu1\tr1\t2\t{_cand_fields(train[1])}"]
        events = parse_events(self._events_file(tmp_path, ds, train, lines), ds.schemas, vocab)

        seen = []

        class Spy:
            forward_count = 0

            def score(self, candidates, contextual, clicked, unclicked, now=0, user_id=""):
                seen.append((len(clicked), len(unclicked)))
                return [0.5] * len(candidates)

        replay_session(Spy(), SessionStore(), events, lag_seconds=10)
        assert seen == [(0, 0)]  # event at ts=100 invisible at ts=105 under lag 10

        seen.clear()
        replay_session(Spy(), SessionStore(), events, lag_seconds=5)
        assert seen == [(0, 1)]  # visible once the lag has elapsed

    def test_non_monotone_user_timestamps_rejected(self, tmp_path, env):
        ds, vocab, train = env
        ad = _ad_fields(train[0])
        lines = [f"IMP\t200\tu1\t{ad}", f"IMP\t100\tu1\t{ad}"]
        events = parse_events(self._events_file(tmp_path, ds, train, lines), ds.schemas, vocab)
        with pytest.raises(ValueError):
            replay_session(StubScorer(lambda ad: 0.5), SessionStore(), events)

    def test_empty_log(self):
        store = SessionStore()
        assert replay_session(StubScorer(lambda ad: 0.5), store, []) == []
        assert store.user_ids() == []

    def test_results_tsv_format(self, tmp_path, env):
        ds, vocab, train = env
        lines = [f"REQ\t100\tu1\tr9\t2\t{_cand_fields(train[1])}|{_cand_fields(train[2])}"]
        events = parse_events(self._events_file(tmp_path, ds, train, lines), ds.schemas, vocab)
        results = replay_session(StubScorer(lambda ad: 0.25), SessionStore(), events)
        out = tmp_path / "results.tsv"
        write_results(out, results)
        rows = [l.split("\t") for l in out.read_text().splitlines()]
        assert [r[0] for r in rows] == ["r9", "r9"]
        assert [r[1] for r in rows] == ["0", "1"]
        assert rows[0][3] == "1" and rows[1][3] == "2"
        assert rows[0][4] == "0.250000"


class TestWireProtocol:
    def test_rank_round_trip(self, env):
        ds, vocab, train = env
        catalog = {}
        for ex in train[:4]:
            rec = {n: v for n, v in ex.target.raw if n not in ("user_id",)}
            catalog[ad_display_id(ex.target)] = rec
        scorer = ModelScorer(zeroed_model(ds.schemas, vocab))
        server = RankProtocolServer(AdServer(scorer, SessionStore()), catalog,
                                    ds.schemas["target"], vocab)
        server.start()
        try:
            host, port = server.address
            ad_ids = sorted(catalog)[:3]
            reply = rank_over_socket(host, port, "u1", 500, 2, ad_ids)
        finally:
            server.stop()
        assert reply.startswith("OK ")
        entries = reply[3:].split(" ")
        assert len(entries) == 2
        ad_id, pctr, rnd = entries[0].split(":")
        assert ad_id in catalog and rnd == "1"
        assert float(pctr) == pytest.approx(0.5)

    def test_malformed_and_unknown(self, env):
        ds, vocab, train = env
        scorer = ModelScorer(zeroed_model(ds.schemas, vocab))
        server = RankProtocolServer(AdServer(scorer, SessionStore()), {},
                                    ds.schemas["target"], vocab)
        assert server.handle_line("HELLO").startswith("ERR")
        assert server.handle_line("RANK u 5 2 nosuch").startswith("ERR unknown ad")
