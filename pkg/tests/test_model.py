import math

import numpy as np
import pytest
import torch

from kgqa.candidates import build_tfidf_index, candidate_pipeline
from kgqa.errors import ConfigError, NoCandidateError, ShapeError
from kgqa.evaluation import ask
from kgqa.kg_store import KnowledgeGraph, tokenize
from kgqa.model import (QAModel, consistent_relation, detect_span, disambiguation_gate, infer,
                        kg_similarity, make_batch, masked_argmax, predict_entity, predict_relation,
                        question_entity_embedding, relation_query_embedding, top_relations, word_similarity)
from kgqa.neural import self_attention

from conftest import make_example, movie_graph, random_graph, tiny_model

F64 = torch.float64


def t(x):
    return torch.tensor(x, dtype=F64)


@pytest.fixture
def model():
    g = movie_graph()
    vocab = {tok for e in g.entities for tok in e.label} | set("who produced directed wrote".split())
    return tiny_model(g, vocab, n=3, hidden=4)


def test_detect_span_zero_weight_is_half(model):
    with torch.no_grad():
        model.span_out.zero_()
    probs = detect_span(model, torch.randn(4, 6, dtype=F64))
    assert torch.equal(probs, torch.full((4,), 0.5, dtype=F64))


def test_detect_span_single_token(model):
    assert detect_span(model, torch.randn(1, 6, dtype=F64)).shape == (1,)


def test_relation_logits_zero_weight_uniform(model):
    with torch.no_grad():
        model.rel_out.zero_()
    logits = predict_relation(model, torch.randn(5, 6, dtype=F64))
    assert torch.equal(logits, torch.zeros(4, dtype=F64))
    assert torch.allclose(torch.softmax(logits, 0), torch.full((4,), 0.25, dtype=F64))


def test_single_relation_softmax_is_one():
    g = KnowledgeGraph(["a", "b"], ["a", "b"], [0, 0], ["r"], [(0, 0, 1)])
    m = tiny_model(g, {"a", "b"}, n=2)
    logits = predict_relation(m, torch.randn(3, 6, dtype=F64))
    assert torch.softmax(logits, 0).tolist() == [1.0]


def test_relation_logits_compose_primitives(model):
    emb = torch.randn(5, 6, dtype=F64)
    H = model.rel_lstm(emb.unsqueeze(0))[0]
    ctx, _ = self_attention(model.rel_att, H)
    expect = torch.tanh(ctx @ model.rel_out)
    assert (predict_relation(model, emb) - expect).abs().max().item() <= 1e-10


def test_entity_embedding_zero_probs():
    assert torch.equal(question_entity_embedding(torch.zeros(3, dtype=F64), torch.randn(3, 4, dtype=F64)),
                       torch.zeros(4, dtype=F64))


def test_entity_embedding_single_token_mask():
    v = torch.randn(2, 4, dtype=F64)
    assert torch.allclose(question_entity_embedding(t([1.0, 0.0]), v), v[0] / 2)


def test_entity_embedding_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        o, w = rng.random(5), rng.normal(size=(5, 7))
        naive = [sum(o[k] * w[k, j] for k in range(5)) / 5 for j in range(7)]
        assert np.abs(question_entity_embedding(t(o), t(w)).numpy() - naive).max() <= 1e-12


def test_word_similarity_identity_and_orthogonal():
    e = t([1.0, 0.0, 0.0])
    cands = t([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    sim = word_similarity(e, cands, torch.tensor([True, True, False]))
    assert sim.tolist() == [1.0, 0.0, -1.0]


def scalar_cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(y * y for y in b))
    return 0.0 if na == 0 or nb == 0 else dot / (na * nb)


def test_word_similarity_matches_loop():
    rng = np.random.default_rng(1)
    for _ in range(100):
        e, c = rng.normal(size=8), rng.normal(size=(4, 8))
        got = word_similarity(t(e), t(c), torch.ones(4, dtype=torch.bool)).numpy()
        assert np.abs(got - [scalar_cos(e, row) for row in c]).max() <= 1e-12


def test_hard_relation_query_selects_row():
    kg = torch.randn(4, 3, dtype=F64)
    logits = t([0.1, 5.0, -1.0, 0.0])
    out = relation_query_embedding(logits, kg, 1.0, "hard", noise=torch.zeros(4, dtype=F64))
    assert torch.equal(out, kg[1])
    assert torch.equal(relation_query_embedding(logits, kg, mode="argmax"), kg[1])


@pytest.mark.parametrize("mode", ["soft", "hard", "argmax"])
def test_single_relation_query(mode):
    kg = torch.randn(1, 3, dtype=F64)
    out = relation_query_embedding(t([0.4]), kg, 1.0, mode, torch.Generator().manual_seed(0))
    assert torch.allclose(out, kg[0], atol=1e-15)


def test_soft_relation_query_is_weighted_sum():
    rng = np.random.default_rng(2)
    for _ in range(100):
        logits, kg, noise = rng.normal(size=5), rng.normal(size=(5, 3)), rng.gumbel(size=5)
        z = [(logits[k] + noise[k]) / 0.7 for k in range(5)]
        m = max(z)
        e = [math.exp(v - m) for v in z]
        y = [v / sum(e) for v in e]
        naive = [sum(y[k] * kg[k, j] for k in range(5)) for j in range(3)]
        got = relation_query_embedding(t(logits), t(kg), 0.7, "soft", noise=t(noise)).numpy()
        assert np.abs(got - naive).max() <= 1e-12


def test_relation_query_shape_mismatch():
    with pytest.raises(ShapeError):
        relation_query_embedding(torch.zeros(3, dtype=F64), torch.zeros(4, 2, dtype=F64))


def test_kg_similarity_identity():
    r = t([0.3, -0.2])
    sim = kg_similarity(r, r.view(1, 1, 2), torch.tensor([[True]]), torch.tensor([True]))
    assert abs(sim.item() - 1.0) <= 1e-12


def test_kg_similarity_hand_cosine():
    sim = kg_similarity(t([1.0, 0.0]), t([[[0.0, 1.0], [1.0, 1.0]]]), torch.tensor([[True, True]]),
                        torch.tensor([True]))
    assert abs(sim.item() - 1 / math.sqrt(2)) <= 1e-12
    assert round(sim.item(), 5) == 0.70711


def test_kg_similarity_exhaustive_loop():
    rng = np.random.default_rng(3)
    for _ in range(100):
        r = rng.normal(size=4)
        rels = rng.normal(size=(4, 3, 4))
        counts = rng.integers(0, 4, size=4)
        mask = np.arange(3)[None, :] < counts[:, None]
        slot = rng.random(4) < 0.8
        naive = []
        for c in range(4):
            best = -1.0
            if slot[c] and counts[c]:
                best = max(scalar_cos(r, rels[c, k]) for k in range(counts[c]))
            naive.append(best)
        got = kg_similarity(t(r), t(rels), torch.tensor(mask), torch.tensor(slot)).numpy()
        assert np.abs(got - naive).max() <= 1e-12


def test_gate_reductions():
    assert disambiguation_gate(torch.zeros(3, dtype=F64), t([0.2, 0.9, -0.4])).item() == 0.5
    assert disambiguation_gate(t([1.0, 2.0, 3.0]), torch.zeros(3, dtype=F64)).item() == 0.5


def test_gate_matches_scalar():
    rng = np.random.default_rng(4)
    for _ in range(100):
        w, s = rng.normal(size=6), rng.uniform(-1, 1, size=6)
        naive = 1 / (1 + math.exp(-sum(a * b for a, b in zip(w, s))))
        assert abs(disambiguation_gate(t(w), t(s)).item() - naive) <= 1e-12


def test_entity_gate_closed():
    scores, best = predict_entity([0.9, 0.1], [0.0, 1.0], 0.0, [True, True])
    assert [round(v, 4) for v in scores.tolist()] == [0.7109, 0.5250]
    assert best.item() == 0


def test_entity_gate_open():
    sc, skg = t([0.2, 0.6]), t([0.9, -0.3])
    scores, _ = predict_entity(sc, skg, 1.0, [True, True])
    assert torch.allclose(scores, torch.sigmoid((sc + skg) / 2))


def test_entity_kg_breaks_tie():
    scores, best = predict_entity([0.8, 0.8], [0.1, 0.9], 0.5, [True, True])
    expect = [1 / (1 + math.exp(-(0.5 * (0.8 + k) / 2 + 0.5 * 0.8))) for k in (0.1, 0.9)]
    assert np.abs(scores.numpy() - expect).max() <= 1e-12
    assert best.item() == 1


def test_masked_slots_never_win():
    scores, best = predict_entity([0.1, 0.9], [0.1, 0.9], 0.5, [True, False])
    assert best.item() == 0
    with pytest.raises(NoCandidateError):
        masked_argmax(scores, torch.tensor([False, False]))


def test_top_relations_ties_to_lower_index():
    assert top_relations([0.5, 0.9, 0.5, 0.1, 0.9, 0.0]) == [1, 4, 0, 2, 3]


def test_consistency_reduction_when_top1_connected():
    rng = np.random.default_rng(5)
    for _ in range(100):
        g = random_graph(rng, 8, 6, 20)
        logits = rng.normal(size=6).tolist()
        e = int(rng.integers(8))
        top1 = top_relations(logits)[0]
        if g.connected_1hop(e, top1):
            assert consistent_relation(logits, e, g) == top1


def test_consistency_exhaustive_top5_scan():
    rng = np.random.default_rng(6)
    checked = 0
    for _ in range(200):
        g = random_graph(rng, 6, 8, 15)
        logits = rng.normal(size=8).tolist()
        e = int(rng.integers(6))
        order = sorted(range(8), key=lambda r: (-logits[r], r))
        connected = [r for r in order[:5] if any(tr.head == e and tr.relation == r for tr in g.triples)]
        expect = connected[0] if connected else order[0]
        assert consistent_relation(logits, e, g) == expect
        checked += bool(connected) and connected[0] != order[0]
    assert checked > 0  # at least some trials exercised the fall-through


def test_top2_connected_when_top1_is_not(movie_kg):
    logits = [0.1, 0.5, 0.9, 0.0]  # top-1 book.author is not attached to the movie
    assert consistent_relation(logits, 0, movie_kg) == 1


def test_infer_abstains_without_candidates(model):
    g = movie_graph()
    cands = candidate_pipeline(build_tfidf_index(g), ["zzz"], 3)
    assert infer(model, ["zzz"], g, cands).status == "abstain"


def test_make_batch_rejects_wrong_n(model):
    g = movie_graph()
    cands = candidate_pipeline(build_tfidf_index(g), tokenize("a beautiful mind"), 5)
    with pytest.raises(ConfigError):
        make_batch(model, g, [tokenize("a beautiful mind")], [cands])


def test_checkpoint_round_trip(model, tmp_path):
    model.save(tmp_path / "m.pt")
    back = QAModel.load(tmp_path / "m.pt")
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    with pytest.raises(ConfigError):
        QAModel.load(tmp_path / "m.pt", n=7)


# --- the running example, trained on a handful of fixture questions ---------------------------------

def test_running_example_infer(movie_model):
    g, idx, m = movie_model
    tokens = tokenize("who is the producer of a beautiful mind")
    pred = infer(m, tokens, g, candidate_pipeline(idx, tokens, 3))
    assert g.entities[pred.entity].key == "m.movie"
    assert g.label(pred.entity) == "a beautiful mind"
    assert g.relations[pred.relation] == "film.produced_by"
    assert [g.label(a) for a in pred.answers] == ["brian grazer"]


def test_running_example_ask(movie_model):
    g, idx, m = movie_model
    rec = ask(m, idx, "Who produced A Beautiful Mind")
    assert rec["entity"]["label"] == "a beautiful mind" and rec["entity"]["key"] == "m.movie"
    assert rec["relation"]["key"] == "film.produced_by"
    assert [a["label"] for a in rec["answers"]] == ["brian grazer"]
    assert 0.0 < rec["gate"] < 1.0


def test_ask_matches_direct_op_rerun(movie_model):
    g, idx, m = movie_model
    rec = ask(m, idx, "who wrote a beautiful mind")
    tokens = tokenize("who wrote a beautiful mind")
    cands = candidate_pipeline(idx, tokens, 3)
    batch = make_batch(m, g, [tokens], [cands])
    with torch.no_grad():
        emb = m.embed(batch.token_ids, batch.extra)
        probs = torch.sigmoid(m.span_lstm(emb) @ m.span_out)
        e_q = question_entity_embedding(probs, emb)
        lab = m.embed(batch.cand_token_ids, batch.extra)
        mask = batch.cand_token_mask.to(F64)
        cand_emb = (mask.unsqueeze(-1) * lab).sum(-2) / mask.sum(-1, keepdim=True).clamp_min(1)
        sim_c = word_similarity(e_q, cand_emb, batch.cand_mask)
        logits = predict_relation(m, emb[0])
        r_q = m.kg_relations[int(logits.argmax())]
        sim_kg = kg_similarity(r_q, m.kg_relations[batch.cand_rels[0]], batch.cand_rel_mask[0], batch.cand_mask[0])
        gate = disambiguation_gate(m.gate_weight, sim_c[0])
    k = len(cands)
    by_id = {c["id"]: c for c in rec["top_candidates"]}
    for j, c in enumerate(cands.entries):
        assert by_id[c.entity_id]["sim_c"] == pytest.approx(sim_c[0, j].item(), abs=1e-12)
        assert by_id[c.entity_id]["sim_kg"] == pytest.approx(sim_kg[j].item(), abs=1e-12)
    assert rec["gate"] == pytest.approx(gate.item(), abs=1e-12)
    assert len(rec["top_candidates"]) == min(5, k)


def test_ask_gibberish_abstains(movie_model):
    g, idx, m = movie_model
    assert ask(m, idx, "qwxz plorb")["status"] == "abstain"
