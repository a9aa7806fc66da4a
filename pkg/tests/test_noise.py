import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from wordcert.embeddings import EmbeddingTable, build_synonym_table, encode_instance
from wordcert.noise import (
    Mechanism,
    NoiseModel,
    PerturbationSpec,
    SmoothingConfig,
    SubstitutionKernel,
    apply_bernoulli_deletion,
    apply_gaussian_noise,
    apply_permutation,
    apply_substitution_noise,
    deletion_transform,
    group_permutations,
    insertion_transform,
    perturbation_norm,
    rng_for,
    sample_group_permutation,
    staircase_pmf,
)

SIG = 0.001


def _inst(n, d=2, words=None, seed=0):
    rng = np.random.default_rng(seed)
    vocab = max(n, 2)
    table = EmbeddingTable([f"x{i}" for i in range(vocab)], rng.standard_normal((vocab, d)))
    words = words if words is not None else n
    return encode_instance([f"x{i}" for i in range(words)], n, table), table


def _naive_render(inst):
    return [tuple(r) for r in inst.render()]


# -- staircase law -----------------------------------------------------------


def test_pmf_degenerate_lexicon():
    assert staircase_pmf(0, 1.0).tolist() == [1.0]


def test_pmf_s2_eps1_high_precision():
    mpmath.mp.dps = 40
    w = [mpmath.e ** (-k) for k in range(3)]
    ref = [float(x / sum(w)) for x in w]
    got = staircase_pmf(2, 1.0)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-15)
    # the quoted 4-digit figures; the middle one is 0.244728, so allow 1e-4
    np.testing.assert_allclose(got, [0.6652, 0.2448, 0.0900], atol=1e-4)


def test_pmf_ratio_across_three_steps():
    p = staircase_pmf(5, 1.0)
    assert p[4] / p[1] == pytest.approx(math.exp(-3), rel=1e-12)


def test_pmf_general_gamma_sub_steps():
    # each step mixes the two sub-step densities exp(-k eps) and exp(-(k+1) eps)
    eps, g = 0.7, 0.4
    p = staircase_pmf(3, eps, gamma=g)
    raw = [g * math.exp(-k * eps) + (1 - g) * math.exp(-(k + 1) * eps) for k in range(4)]
    np.testing.assert_allclose(p, np.array(raw) / sum(raw), rtol=1e-13)


@pytest.mark.parametrize("args", [(-1, 1.0), (3, 0.0), (3, -1.0)])
def test_pmf_domain(args):
    with pytest.raises(ValueError):
        staircase_pmf(*args)


# -- substitution sampler ----------------------------------------------------


def _line_table(s):
    # word "a" and s synonyms, one per step, placed by cosine
    words, vecs = ["a"], [[1.0, 0.0]]
    for k in range(1, s + 1):
        sim = 1.0 - k / s
        words.append(f"b{k}")
        vecs.append([sim, math.sqrt(max(0.0, 1 - sim * sim))])
    return EmbeddingTable(words, np.array(vecs))


def test_point_mass_pmf_is_identity():
    table = _line_table(2)
    syn = build_synonym_table(table, 2)
    inst = encode_instance(["a", "b1"], 3, table)
    out = apply_substitution_noise(inst, SubstitutionKernel(table, syn), [1.0, 0.0, 0.0], rng_for(0))
    assert np.array_equal(out.token_ids, inst.token_ids)
    assert np.array_equal(out.rows, inst.rows)


def test_step_frequencies_match_pmf():
    table = _line_table(2)
    syn = build_synonym_table(table, 2)
    kernel = SubstitutionKernel(table, syn)
    steps = {syn_.word: syn_.interval for syn_ in syn["a"]}
    assert sorted(steps.values()) == [1, 2]
    pmf = staircase_pmf(2, 1.0)
    draws = kernel.draw(np.array([table.index["a"]]), pmf, rng_for(7), 1_000_000)[:, 0]
    idx = {table.index["a"]: 0, **{table.index[w]: k for w, k in steps.items()}}
    counts = np.bincount([idx[int(x)] for x in np.unique(draws)], minlength=3)
    freq = np.zeros(3)
    for wid, c in zip(*np.unique(draws, return_counts=True)):
        freq[idx[int(wid)]] += c
    assert counts.sum() == 3
    assert stats.chisquare(freq, pmf * freq.sum()).pvalue > SIG


def test_sparse_steps_fall_back_to_step_one():
    # only synonym sits on step 1; every k >= 1 draw must produce it
    table = EmbeddingTable(["a", "b", "c"], [[1.0, 0.0], [0.99, 0.01], [-1.0, 0.0]])
    syn = build_synonym_table(table, 1)
    kernel = SubstitutionKernel(table, syn)
    assert kernel.count[table.index["a"], 1] == 1
    pmf = np.array([0.0, 1.0])
    draws = kernel.draw(np.array([table.index["a"]]), pmf, rng_for(1), 1000)
    assert set(draws.ravel().tolist()) == {table.index["b"]}


def test_substitution_skips_pad():
    table = _line_table(2)
    syn = build_synonym_table(table, 2)
    inst = encode_instance(["a"], 3, table)
    out = apply_substitution_noise(inst, SubstitutionKernel(table, syn), [0.0, 0.0, 1.0], rng_for(3))
    assert out.token_ids[1:].tolist() == [0, 0]
    assert np.all(out.rows[1:] == 0)


# -- permutations --------------------------------------------------------------


def test_lambda_one_is_identity():
    r = group_permutations(7, 1, rng_for(0), 100)
    assert np.all(r == np.arange(7))


def test_lambda_out_of_range():
    with pytest.raises(ValueError):
        sample_group_permutation(3, 4, rng_for(0))
    with pytest.raises(ValueError):
        sample_group_permutation(3, 0, rng_for(0))


def test_full_shuffle_uniform_on_s3():
    r = group_permutations(3, 3, rng_for(5), 1_000_000)
    keys = r @ np.array([9, 3, 1])
    perms = [p[0] * 9 + p[1] * 3 + p[2] for p in itertools.permutations(range(3))]
    freq = np.array([np.sum(keys == k) for k in perms])
    assert freq.sum() == 1_000_000
    assert stats.chisquare(freq).pvalue > SIG


def test_group_shuffle_law_matches_enumeration():
    from wordcert.oracle import group_permutation_law

    n, lam = 4, 2
    law = group_permutation_law(n, lam)
    r = group_permutations(n, lam, rng_for(9), 400_000)
    keys = [tuple(x) for x in r]
    uniq, counts = np.unique(np.array(keys), axis=0, return_counts=True)
    seen = {tuple(int(v) for v in u): c for u, c in zip(uniq, counts)}
    assert set(seen) <= set(law)
    obs = np.array([seen.get(k, 0) for k in law])
    exp = np.array([law[k] for k in law]) * len(keys)
    assert stats.chisquare(obs, exp).pvalue > SIG


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 9), lam=st.integers(1, 9), seed=st.integers(0, 2**32 - 1))
def test_group_shuffle_is_bijection(n, lam, seed):
    lam = min(lam, n)
    r = sample_group_permutation(n, lam, rng_for(seed))
    assert sorted(r.tolist()) == list(range(n))


def test_permutation_identity_and_involution():
    inst, _ = _inst(4)
    assert np.array_equal(apply_permutation(inst, np.arange(4)).render(), inst.render())
    swap = np.array([1, 0, 2, 3])
    twice = apply_permutation(apply_permutation(inst, swap), swap)
    assert np.array_equal(twice.render(), inst.render())


def test_permutation_rejects_non_bijection():
    inst, _ = _inst(3)
    with pytest.raises(ValueError):
        apply_permutation(inst, [0, 0, 1])


def test_permutation_composition_exhaustive_n4():
    inst, _ = _inst(4)
    for r1 in itertools.permutations(range(4)):
        r1 = np.array(r1)
        once = apply_permutation(inst, r1)
        for r2 in itertools.permutations(range(4)):
            r2 = np.array(r2)
            a = apply_permutation(once, r2).render()
            b = apply_permutation(inst, r2[r1]).render()
            assert np.array_equal(a, b)


def test_permutation_composition_random_n8():
    inst, _ = _inst(8)
    rng = np.random.default_rng(3)
    for _ in range(300):
        r1, r2 = rng.permutation(8), rng.permutation(8)
        a = apply_permutation(apply_permutation(inst, r1), r2)
        assert np.array_equal(a.render(), apply_permutation(inst, r2[r1]).render())
        assert sorted(map(tuple, a.rows)) == sorted(map(tuple, inst.rows))


# -- gaussian and bernoulli --------------------------------------------------


def test_zero_gaussian_is_identity():
    inst, _ = _inst(3)
    out = apply_gaussian_noise(inst, 0.0, np.zeros(2), rng_for(0))
    assert np.array_equal(out.rows, inst.rows)


def test_gaussian_moments():
    mean = np.array([0.3, -1.1])
    ids = np.zeros((500_000, 1), dtype=np.int64)
    rows = np.zeros((500_000, 1, 2))
    pos = np.zeros((500_000, 1), dtype=np.int64)
    cfg = SmoothingConfig(Mechanism.INSERTION, sigma=1.0, mean=mean)
    _, out, _ = NoiseModel(cfg).apply(ids, rows, pos, rng_for(4))
    x = out.reshape(-1, 2)
    n = len(x)
    se = 1 / math.sqrt(n)
    assert np.all(np.abs(x.mean(axis=0) - mean) < 4 * se)
    # var of the sample variance of a normal is 2 / n
    assert np.all(np.abs(x.var(axis=0, ddof=1) - 1.0) < 4 * math.sqrt(2 / n))


def test_gaussian_touches_pad_rows():
    inst, _ = _inst(4, words=1)
    out = apply_gaussian_noise(inst, 0.5, None, rng_for(1))
    assert not np.allclose(out.rows[1:], 0)


def test_deletion_extremes():
    inst, _ = _inst(5, words=3)
    same = apply_bernoulli_deletion(inst, 0.0, rng_for(0))
    assert np.array_equal(same.rows, inst.rows)
    gone = apply_bernoulli_deletion(inst, 1.0, rng_for(0))
    assert np.all(gone.rows == 0) and np.all(gone.token_ids == 0)


def test_deletion_count_is_binomial():
    n, draws = 20, 100_000
    inst, _ = _inst(n)
    cfg = SmoothingConfig(Mechanism.DELETION, p=0.5)
    ids, _, _ = NoiseModel(cfg).sample(inst, rng_for(8), draws)
    deleted = np.sum(ids == 0, axis=1)
    obs = np.bincount(deleted, minlength=n + 1)
    exp = stats.binom.pmf(np.arange(n + 1), n, 0.5) * draws
    # pool the thin tails so every expected cell is >= 5
    keep = exp >= 5
    obs_p = np.append(obs[keep], obs[~keep].sum())
    exp_p = np.append(exp[keep], exp[~keep].sum())
    assert stats.chisquare(obs_p, exp_p * obs_p.sum() / exp_p.sum()).pvalue > SIG


# -- insertion / deletion transforms -----------------------------------------


def _naive_insert(seq, positions, vectors, n):
    out = list(seq)
    for p, v in zip(positions, vectors):
        out.insert(p, tuple(v))
    return out[:n]


def test_insert_one_in_middle():
    inst, _ = _inst(4)
    new = np.array([9.0, 9.0])
    out = insertion_transform(inst, [1], [new])
    x = _naive_render(inst)
    assert _naive_render(out) == [x[0], (9.0, 9.0), x[1], x[2]]
    np.testing.assert_array_equal(out.rows[:3], inst.rows[:3])
    np.testing.assert_array_equal(out.rows[3], new)


def test_insert_two():
    inst, _ = _inst(5)
    vecs = np.array([[7.0, 7.0], [8.0, 8.0]])
    out = insertion_transform(inst, [0, 2], vecs)
    assert _naive_render(out) == _naive_insert(_naive_render(inst), [0, 2], vecs, 5)


def test_insert_nothing_and_too_many():
    inst, _ = _inst(3)
    assert np.array_equal(insertion_transform(inst, [], []).render(), inst.render())
    with pytest.raises(ValueError):
        insertion_transform(inst, [0, 1, 2, 3], np.zeros((4, 2)))


@settings(max_examples=60, deadline=None)
@given(data=st.data(), n=st.integers(1, 8))
def test_insert_matches_naive(data, n):
    inst, _ = _inst(n, seed=n)
    m = data.draw(st.integers(0, n))
    positions = sorted(data.draw(st.lists(st.integers(0, n - 1), min_size=m, max_size=m, unique=True)))
    vecs = np.arange(2 * m, dtype=float).reshape(m, 2) + 100
    out = insertion_transform(inst, positions, vecs)
    assert _naive_render(out) == _naive_insert(_naive_render(inst), positions, vecs, n)


def test_delete_second_word():
    inst, _ = _inst(4)
    x = _naive_render(inst)
    out = deletion_transform(inst, [1])
    assert _naive_render(out) == [x[0], x[2], x[3], (0.0, 0.0)]


def test_delete_edge_cases():
    inst, _ = _inst(4)
    assert np.array_equal(deletion_transform(inst, []).render(), inst.render())
    assert np.all(deletion_transform(inst, range(4)).rows == 0)
    with pytest.raises(ValueError):
        deletion_transform(inst, [1, 1])


# -- perturbation norms ------------------------------------------------------


def test_norms():
    assert perturbation_norm(PerturbationSpec("R", target=[3, 2, 1, 0])) == 8
    for kind in "SRID":
        assert perturbation_norm(PerturbationSpec(kind)) == 0
    # four closest synonyms for every one of 50 words
    assert perturbation_norm(PerturbationSpec("S", intervals=[4] * 50)) == 200
    assert perturbation_norm(PerturbationSpec("D", positions=[0, 3])) == 2


# -- presets and config -----------------------------------------------------


def test_presets():
    assert [SmoothingConfig.preset("substitution", lv, 50).s for lv in ("Low", "Med", "High")] == [50, 100, 250]
    assert [SmoothingConfig.preset("deletion", lv, 50).p for lv in ("Low", "Med", "High")] == [0.3, 0.5, 0.7]
    lstm = [SmoothingConfig.preset("insertion", lv, 50).sigma for lv in ("Low", "Med", "High")]
    bert = [SmoothingConfig.preset("insertion", lv, 50, backbone="bert").sigma for lv in ("Low", "Med", "High")]
    assert lstm == [0.1, 0.2, 0.3] and bert == [0.5, 1.0, 1.5]
    assert [2 * SmoothingConfig.preset("reorder", lv, 64).lam for lv in ("Low", "Med", "High")] == [16, 32, 64]
    assert SmoothingConfig(Mechanism.SUBSTITUTION, s=100).epsilon == 5 / 100


def test_config_round_trip_and_validation():
    cfg = SmoothingConfig(Mechanism.INSERTION, sigma=0.2, mean=[0.1, 0.2], ogn=True)
    back = SmoothingConfig.from_json(cfg.to_json())
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        SmoothingConfig(Mechanism.REORDER, lam=5).validate(4)
    with pytest.raises(ValueError):
        SmoothingConfig(Mechanism.DELETION, p=1.5).validate()


def test_replay_is_bit_identical():
    inst, table = _inst(6)
    cfg = SmoothingConfig(Mechanism.DELETION, p=0.4)
    a = NoiseModel(cfg).sample(inst, rng_for(42, 1, 3), 50)
    b = NoiseModel(cfg).sample(inst, rng_for(42, 1, 3), 50)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
