import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordcert.embeddings import (
    PAD_ID,
    EmbeddingParseError,
    EmbeddingTable,
    SynonymTable,
    build_synonym_table,
    compute_ogn_mean,
    cosine_similarity,
    decode_instance,
    encode_instance,
    load_embedding_table,
    similarity_to_interval,
)


def _table(rng, vocab, d=3):
    return EmbeddingTable([f"w{i}" for i in range(vocab)], rng.standard_normal((vocab, d)))


def test_parse_two_lines():
    t = load_embedding_table(io.BytesIO(b"good 1 0 0\nbad -1 0.5 0\n"), 3)
    assert len(t) == 3
    assert t.words[0] == "<pad>"
    assert np.all(t.pad_vector == 0)
    np.testing.assert_array_equal(t["bad"], [-1, 0.5, 0])


def test_parse_short_line_names_it():
    with pytest.raises(EmbeddingParseError, match="line 2"):
        load_embedding_table(io.StringIO("a 1 2 3\nb 1 2\n"), 3)


def test_parse_duplicate_word():
    with pytest.raises(EmbeddingParseError, match="duplicate"):
        load_embedding_table(io.StringIO("a 1 2 3\na 1 2 3\n"), 3)


def test_parse_empty_file():
    with pytest.raises(EmbeddingParseError):
        load_embedding_table(io.StringIO("\n\n"), 3)


def test_cosine_basics():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])


def test_interval_mapping_reproduces_exemplars():
    # s=5: similarity 0.788 lands on step 1, 0.223 on step 4
    assert similarity_to_interval(0.788, 5) == 1
    assert similarity_to_interval(0.223, 5) == 4
    # a duplicate vector clamps to the first step, a far word to s
    assert similarity_to_interval(1.0, 5) == 1
    assert similarity_to_interval(-1.0, 5) == 5


def test_synonyms_match_brute_force():
    rng = np.random.default_rng(11)
    table = _table(rng, 6)
    syn = build_synonym_table(table, 3)
    assert syn.epsilon == 5 / 3
    vecs = table.vectors
    for i in range(1, 7):
        sims = []
        for j in range(1, 7):
            if j != i:
                sims.append((-cosine_similarity(vecs[i], vecs[j]), j))
        sims.sort()
        expect = [table.words[j] for _, j in sims[:3]]
        assert [x.word for x in syn[table.words[i]]] == expect


def test_duplicate_vector_sits_on_step_one():
    table = EmbeddingTable(["a", "b", "c", "d"], [[1, 0], [1, 0], [0, 1], [-1, 0.2]])
    syn = build_synonym_table(table, 2)
    first = syn["a"][0]
    assert first.word == "b" and first.interval == 1


def test_zero_vector_skipped():
    table = EmbeddingTable(["a", "b", "z", "c"], [[1, 0], [0.5, 0.5], [0, 0], [0, 1]])
    syn = build_synonym_table(table, 2)
    assert syn.skipped == ["z"]
    assert all(x.word != "z" for x in syn["a"])


def test_synonym_json_round_trip():
    rng = np.random.default_rng(2)
    syn = build_synonym_table(_table(rng, 12), 4)
    back = SynonymTable.from_json(syn.to_json())
    assert back.s == 4 and back.entries == syn.entries


def test_s_too_large():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        build_synonym_table(_table(rng, 5), 5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), vocab=st.integers(4, 40), s=st.integers(1, 3))
def test_synonym_lists_sorted_with_monotone_steps(seed, vocab, s):
    rng = np.random.default_rng(seed)
    syn = build_synonym_table(_table(rng, vocab), s)
    for word, entries in syn.entries.items():
        assert len(entries) == s
        sims = [x.sim for x in entries]
        steps = [x.interval for x in entries]
        assert sims == sorted(sims, reverse=True)
        assert steps == sorted(steps)
        assert word not in [x.word for x in entries]


def test_encode_pads_short_text():
    table = EmbeddingTable(["a", "b"], [[1, 2], [3, 4]])
    inst = encode_instance(["a", "b"], 4, table, label=1)
    np.testing.assert_array_equal(inst.rows[2:], 0)
    np.testing.assert_array_equal(inst.positions, np.arange(4))
    assert inst.num_words == 2 and inst.label == 1


def test_encode_truncates_long_text():
    table = EmbeddingTable(list("abcdef"), np.eye(6))
    inst = encode_instance(list("abcdef"), 4, table)
    assert decode_instance(inst, table) == list("abcd")


def test_encode_full_length_rows_are_lookups():
    rng = np.random.default_rng(0)
    table = _table(rng, 5)
    toks = ["w3", "w0", "w4", "w1"]
    inst = encode_instance(toks, 4, table)
    for i, t in enumerate(toks):
        np.testing.assert_array_equal(inst.rows[i], table[t])


def test_unknown_token_becomes_pad(caplog):
    table = EmbeddingTable(["a"], [[1.0]])
    inst = encode_instance(["a", "zzz"], 2, table)
    assert inst.token_ids.tolist() == [1, PAD_ID]
    assert "zzz" in caplog.text


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(1, 12))
def test_encode_decode_lossless_at_max_length(seed, n):
    rng = np.random.default_rng(seed)
    table = _table(rng, 9)
    toks = [f"w{i}" for i in rng.integers(0, 9, size=n)]
    assert decode_instance(encode_instance(toks, n, table), table) == toks


def test_ogn_mean_cases():
    v = np.array([0.5, -2.0, 1.0])
    assert np.array_equal(compute_ogn_mean(EmbeddingTable(["a"], [v])), v)
    assert np.allclose(compute_ogn_mean(EmbeddingTable(["a", "b"], [v, -v])), 0)
    rng = np.random.default_rng(5)
    vecs = rng.standard_normal((100, 4))
    got = compute_ogn_mean(EmbeddingTable([f"w{i}" for i in range(100)], vecs))
    # pad row excluded; compare with compensated summation
    ref = [math.fsum(vecs[:, j]) / 100 for j in range(4)]
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-14)


def test_pad_word_reserved():
    with pytest.raises(ValueError):
        EmbeddingTable(["<pad>"], [[1.0]])


def test_positions_must_be_permutation():
    table = EmbeddingTable(["a", "b"], [[1.0], [2.0]])
    inst = encode_instance(["a", "b"], 2, table)
    with pytest.raises(ValueError):
        inst.replace(positions=np.array([0, 0]))
    for perm in itertools.permutations(range(2)):
        assert sorted(inst.replace(positions=np.array(perm)).render().ravel()) == [1.0, 2.0]
