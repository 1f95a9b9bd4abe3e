import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import write_lines
from eclm.kg_store import (
    AttributeCorruptor, _literals_by_relation, KGFormatError, KnowledgeGraph, Triple, Vocab,
    build_char_vocab, corrupt_batch, encode_chars, family_subgraph, load_attributes,
    load_triples, negative_sample_attribute, negative_sample_triple,
)
from eclm.synthgen import toy_kg


def typed_kg():
    triples = [(f"u{i}", "bought", f"i{j}") for i in range(6) for j in range(4) if (i + j) % 3]
    triples += [(f"i{j}", "in_genre", f"g{j % 2}") for j in range(4)]
    types = {**{f"u{i}": "user" for i in range(6)}, **{f"i{j}": "item" for j in range(4)},
             "g0": "genre", "g1": "genre"}
    return KnowledgeGraph.from_labels("ichiba", triples, entity_types=types)


# ---------------------------------------------------------------- loading


def test_load_counts(tmp_path):
    p = write_lines(tmp_path / "t.tsv", ["u1\tbought\ti1", "u2\tbought\ti1", "u1\tclicked\ti1"])
    kg = load_triples(p)
    assert kg.n_entities == 3
    assert len(kg.relations) == 2
    assert kg.n_triples == 3


def test_duplicates_dropped(tmp_path):
    p = write_lines(tmp_path / "t.tsv", ["u1\tbought\ti1", "u1\tbought\ti1"])
    kg = load_triples(p)
    assert kg.n_triples == 1
    assert kg.n_duplicates == 1


def test_missing_tab_names_line(tmp_path):
    p = write_lines(tmp_path / "t.tsv", ["u1 bought i1", "u2\tbought\ti1"])
    with pytest.raises(KGFormatError, match="line 1"):
        load_triples(p)


def test_bad_line_later(tmp_path):
    p = write_lines(tmp_path / "t.tsv", ["u1\tbought\ti1", "u2\tbought"])
    with pytest.raises(KGFormatError, match="line 2"):
        load_triples(p)


def test_empty_file(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("", encoding="utf-8")
    with pytest.raises(KGFormatError):
        load_triples(p)


def test_attributes(tmp_path):
    p = write_lines(tmp_path / "a.tsv", ["u1\tage\t55.5", "u1\treg_date\t2005-12-04", "u1\tarea\t"])
    kg = load_attributes(p, KnowledgeGraph.empty("demography"))
    attrs = kg.attribute_triples()
    assert [a.literal for a in attrs] == ["55.5", "2005-12-04"]
    assert [a.k for a in attrs] == [4, 10]
    assert kg.n_skipped_literals == 1
    assert set("55.2005-1204") <= set(kg.chars.labels)


def test_two_field_attribute_line_is_skipped(tmp_path):
    p = write_lines(tmp_path / "a.tsv", ["u1\tage\t30", "u2\tarea"])
    kg = load_attributes(p, KnowledgeGraph.empty("demography"))
    assert kg.n_attributes == 1
    assert kg.n_skipped_literals == 1


def test_unknown_chars_map_to_unk():
    chars = build_char_vocab(["123"])
    assert chars.label(0) == "\x00"
    ids = encode_chars("1x3", chars)
    assert ids[1] == 0
    assert ids[0] != 0 and ids[2] != 0


def test_vocab_roundtrip_and_sorted():
    v = Vocab.sorted_from(["b", "a", "c", "a"])
    assert v.labels == ["a", "b", "c"]
    assert all(v[v.label(i)] == i for i in range(len(v)))


def test_load_is_deterministic(tmp_path):
    lines = [f"u{i % 7}\tr{i % 3}\ti{(i * 5) % 11}" for i in range(40)]
    p = write_lines(tmp_path / "t.tsv", lines)
    a, b = load_triples(p), load_triples(p)
    assert a.entities.labels == b.entities.labels
    assert a.triples.tobytes() == b.triples.tobytes()


def test_entity_types_cover_entities(tmp_path):
    p = write_lines(tmp_path / "t.tsv", ["u1\tbought\ti1"])
    tp = write_lines(tmp_path / "types.tsv", ["u1\tuser", "i1\titem"])
    kg = load_triples(p, entity_types=tp)
    assert len(kg.entity_type) == kg.n_entities
    assert kg.type_map() == {"u1": "user", "i1": "item"}


def test_indexes_match_scan():
    kg = toy_kg(30, 120, seed=3)
    for e in range(kg.n_entities):
        assert sorted(kg.by_head(e).tolist()) == np.nonzero(kg.triples[:, 0] == e)[0].tolist()
        assert sorted(kg.by_tail(e).tolist()) == np.nonzero(kg.triples[:, 2] == e)[0].tolist()
    for r in range(len(kg.relations)):
        assert sorted(kg.by_relation(r).tolist()) == np.nonzero(kg.triples[:, 1] == r)[0].tolist()


# ---------------------------------------------------------------- negatives


def test_single_alternative_head():
    kg = KnowledgeGraph.from_labels("v", [("u1", "bought", "i1")],
                                    entity_types={"u1": "user", "u2": "user", "i1": "item"},
                                    extra_entities=["u2"])
    rng = np.random.default_rng(0)
    for _ in range(50):
        neg = negative_sample_triple(kg, Triple(kg.entities["u1"], 0, kg.entities["i1"]), rng)
        if neg.head != kg.entities["u1"]:
            assert (neg.head, neg.tail) == (kg.entities["u2"], kg.entities["i1"])


def test_collision_flag_after_bound():
    # every same-type corruption is itself a positive
    triples = [(u, "r", i) for u in ("u1", "u2") for i in ("i1", "i2")]
    types = {"u1": "user", "u2": "user", "i1": "item", "i2": "item"}
    kg = KnowledgeGraph.from_labels("v", triples, entity_types=types)
    neg, collided = negative_sample_triple(kg, kg.relational_triples()[0], np.random.default_rng(1),
                                           return_flag=True)
    assert collided
    assert kg.contains(np.array([neg.head, neg.relation, neg.tail]))[0]


def test_corruption_side_is_fair():
    kg = toy_kg(10, 30, seed=0)
    rng = np.random.default_rng(7)
    t = kg.relational_triples()[0]
    # a tail corruption never keeps the old tail, since that would be the positive itself
    heads = sum(negative_sample_triple(kg, t, rng).tail == t.tail for _ in range(1000))
    assert abs(heads / 1000 - 0.5) <= 0.05
    chi = stats.chisquare([heads, 1000 - heads])
    assert chi.pvalue > 0.001


@given(seed=st.integers(0, 2**32 - 1))
def test_negatives_respect_type_and_positives(seed):
    kg = typed_kg()
    rng = np.random.default_rng(seed)
    pos = kg.triples
    neg = corrupt_batch(kg, pos, rng)
    changed = (neg != pos).sum(axis=1)
    assert (changed <= 1).all()
    assert (neg[:, 1] == pos[:, 1]).all()
    assert (kg.entity_type[neg[:, 0]] == kg.entity_type[pos[:, 0]]).all()
    assert (kg.entity_type[neg[:, 2]] == kg.entity_type[pos[:, 2]]).all()
    assert not kg.contains(neg).any()


@given(seed=st.integers(0, 2**32 - 1))
def test_single_negative_type_safe(seed):
    kg = typed_kg()
    rng = np.random.default_rng(seed)
    t = kg.relational_triples()[seed % kg.n_triples]
    neg = negative_sample_triple(kg, t, rng)
    assert kg.entity_type[neg.head] == kg.entity_type[t.head]
    assert kg.entity_type[neg.tail] == kg.entity_type[t.tail]
    assert not kg.contains(np.array([neg.head, neg.relation, neg.tail]))[0]


def test_attribute_forced_alternative():
    kg = KnowledgeGraph.from_labels("d", attributes=[("u1", "age", "30"), ("u2", "age", "40")])
    a = kg.attribute_triples()[0]
    neg = negative_sample_attribute(kg, a, np.random.default_rng(0))
    assert neg.literal == "40" and neg.subject == a.subject


def test_attribute_single_literal_falls_back_to_subject():
    types = {"u1": "user", "u2": "user", "u3": "user"}
    kg = KnowledgeGraph.from_labels("d", attributes=[("u1", "area", "A1"), ("u2", "area", "A1")],
                                    entity_types=types, extra_entities=["u3"])
    rng = np.random.default_rng(0)
    negs = [negative_sample_attribute(kg, kg.attribute_triples()[0], rng) for _ in range(50)]
    assert all(n.literal == "A1" for n in negs)
    assert {kg.entities.label(n.subject) for n in negs} <= {"u1", "u2", "u3"}
    lit = np.array([0, 0])
    subj, lits = AttributeCorruptor(kg, lit).corrupt(np.array([0, 1]), rng)
    assert (lits == 0).all()


def test_attribute_alternatives_uniform():
    lits = ["10", "20", "30", "40", "50"]
    kg = KnowledgeGraph.from_labels("d", attributes=[(f"u{i}", "age", x) for i, x in enumerate(lits)])
    rng = np.random.default_rng(3)
    a = kg.attribute_triples()[0]
    cache = _literals_by_relation(kg)
    counts = {}
    for _ in range(1000):
        x = negative_sample_attribute(kg, a, rng, cache).literal
        counts[x] = counts.get(x, 0) + 1
    assert set(counts) == {"20", "30", "40", "50"}
    for c in counts.values():
        assert abs(c / 1000 - 0.25) <= 0.04


def test_batched_attribute_corruptor_uniform():
    lits = ["10", "20", "30", "40", "50"]
    kg = KnowledgeGraph.from_labels("d", attributes=[(f"u{i}", "age", x) for i, x in enumerate(lits)])
    cor = AttributeCorruptor(kg, np.arange(5))
    _, out = cor.corrupt(np.zeros(4000, dtype=np.int64), np.random.default_rng(0))
    freq = np.bincount(out, minlength=5) / 4000
    assert freq[0] == 0
    assert np.all(np.abs(freq[1:] - 0.25) <= 0.04)


# ---------------------------------------------------------------- family view


def family_kg():
    triples = [("u1", "spouse", "u2"), ("u1", "bought", "i1"), ("u2", "bought", "i2"),
               ("u1", "parent", "u3"), ("u3", "bought", "i9"), ("u4", "bought", "i1")]
    return KnowledgeGraph.from_labels("family", triples)


def test_family_rule():
    sub = family_subgraph(family_kg(), ["u1"])
    got = set(sub.triple_labels())
    assert ("u1", "spouse", "u2") in got
    assert ("u2", "bought", "i2") in got
    assert ("u3", "bought", "i9") in got
    assert ("u1", "bought", "i1") not in got
    assert ("u4", "bought", "i1") not in got


def test_family_isolated_user():
    sub = family_subgraph(family_kg(), ["u4", "u99"])
    assert sub.n_triples == 0
    assert "u4" in sub.entities and "u99" in sub.entities
    assert sub.degree()[sub.entities["u4"]] == 0


@given(st.sets(st.sampled_from(["u1", "u2", "u3", "u4"]), min_size=1))
def test_family_never_keeps_input_interactions(users):
    sub = family_subgraph(family_kg(), users)
    for h, r, _ in sub.triple_labels():
        if r not in ("spouse", "parent", "child"):
            assert h not in users
