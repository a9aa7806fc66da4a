import io
import math

import numpy as np
import pytest

from wordcert.bounds import rad_reorder, rad_substitution
from wordcert.certify import (
    CertifyResult,
    certified_accuracy_curve,
    certify,
    certify_dataset,
    instance_seed,
    max_certified_radius,
    read_results_csv,
    results_from_rows,
    sample_under_noise,
    write_curve_csv,
    write_results_csv,
)
from wordcert.classifier import PositionGatedClassifier
from wordcert.embeddings import EmbeddingTable, build_synonym_table, encode_instance
from wordcert.noise import NoiseModel, SmoothingConfig
from wordcert.oracle import ExactContext, exact_smoothed_distribution


def sign_model(n, d):
    """Class 1 iff the pooled first coordinate is positive."""
    m = PositionGatedClassifier(n, d, 2, hidden=2, seed=0)
    m.gains[:] = 1.0
    m.W1[:] = 0.0
    m.W1[0] = [1.0, -1.0]
    m.b1[:] = 0.0
    m.W2[:] = [[-50.0, 50.0], [50.0, -50.0]]
    m.b2[:] = 0.0
    return m


class CoinModel:
    """Ignores its input and flips a fair coin."""

    C = 2

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict_batch(self, rows, positions):
        return self.rng.integers(0, 2, size=len(rows))


@pytest.fixture
def tiny():
    # b is the nearest synonym of a and sits on the other side of the boundary
    table = EmbeddingTable(["a", "b", "c", "d"], [[0.1, 1.0], [-0.1, 1.0], [0.8, 0.6], [-1.0, 0.0]])
    syn = build_synonym_table(table, 2)
    inst = encode_instance(["a"], 1, table, label=1)
    return table, syn, inst


def test_zero_noise_counts_are_one_hot(tiny):
    table, _, inst = tiny
    model = sign_model(1, 2)
    noise = NoiseModel(SmoothingConfig("deletion", p=0.0))
    counts = sample_under_noise(model, inst, noise, 5000, seed=3)
    assert counts.tolist() == [0, 5000]


def test_worker_count_does_not_matter(tiny):
    table, syn, inst = tiny
    model = sign_model(1, 2)
    noise = NoiseModel(SmoothingConfig("substitution", s=2), table, syn)
    one = sample_under_noise(model, inst, noise, 30_000, seed=9, workers=1)
    eight = sample_under_noise(model, inst, noise, 30_000, seed=9, workers=8)
    assert one.tolist() == eight.tolist()
    assert one.sum() == 30_000


def test_frequencies_match_exact_law(tiny):
    table, syn, inst = tiny
    model = sign_model(1, 2)
    cfg = SmoothingConfig("substitution", s=2, gamma=1.0)
    exact = exact_smoothed_distribution(model, inst, cfg, context=ExactContext.build(table, syn))
    assert 0.01 < exact[1] < 0.99  # the noise must actually move the label
    N = 100_000
    counts = sample_under_noise(model, inst, NoiseModel(cfg, table, syn), N, seed=1)
    sd = math.sqrt(N * exact[1] * (1 - exact[1]))
    assert abs(counts[1] - N * exact[1]) <= 3 * sd


def test_all_votes_give_closed_form(tiny):
    table, _, inst = tiny
    model = sign_model(1, 2)
    cfg = SmoothingConfig("reorder", lam=1)
    res = certify(model, inst, cfg, N=1000, alpha=0.001)
    assert res.certified and res.label == 1
    assert res.pA_lower == pytest.approx(0.001 ** (1 / 1000), abs=1e-15)
    assert res.radius == pytest.approx(rad_reorder(res.pA_lower, 1 - res.pA_lower, 1))
    assert sum(res.counts) == res.N == 1000
    assert res.alpha == 0.001 and res.n0 == 100


def test_defaults_recorded():
    table = EmbeddingTable(["x"], [[1.0, 0.0]])
    inst = encode_instance(["x"], 1, table)
    res = certify(sign_model(1, 2), inst, SmoothingConfig("deletion", p=0.0), N=10)
    assert (res.n0, res.alpha, res.mechanism) == (100, 0.001, "deletion")


def test_substitution_radius_formula(tiny):
    table, syn, inst = tiny
    model = sign_model(1, 2)
    cfg = SmoothingConfig("substitution", s=2)
    res = certify(model, inst, cfg, N=4000, seed=2, table=table, synonyms=syn)
    if res.certified:
        assert res.radius == rad_substitution(res.pA_lower, res.pB_upper, 2.5)
    else:
        assert res.pA_lower <= 0.5


def test_coin_flip_model_abstains():
    table = EmbeddingTable(["x"], [[1.0, 0.0]])
    insts = [encode_instance(["x"], 1, table)] * 200
    res = certify_dataset(CoinModel(0), insts, SmoothingConfig("deletion", p=0.2), N=1000)
    abstained = sum(not r.certified for r in res)
    assert abstained >= 198
    for r in res:
        assert r.certified == (r.pA_lower > 0.5)


def test_argument_checks(tiny):
    _, _, inst = tiny
    with pytest.raises(ValueError):
        certify(sign_model(1, 2), inst, SmoothingConfig("deletion", p=0.1), N=0)
    with pytest.raises(ValueError):
        certify(sign_model(1, 2), inst, SmoothingConfig("deletion", p=0.1), alpha=1.0)


def test_instance_seed_independent_of_order():
    assert instance_seed(5, "doc-3") == instance_seed(5, "doc-3")
    assert instance_seed(5, 3) != instance_seed(6, 3)


def test_dataset_order_independent():
    table = EmbeddingTable(["x", "y"], [[1.0, 0.0], [-1.0, 0.5]])
    insts = [encode_instance(t, 2, table) for t in (["x", "y"], ["x", "x"], ["y"])]
    model = sign_model(2, 2)
    cfg = SmoothingConfig("deletion", p=0.4)
    fwd = certify_dataset(model, insts, cfg, ids=[0, 1, 2], N=500)
    rev = certify_dataset(model, insts[::-1], cfg, ids=[2, 1, 0], N=500)
    assert [r.counts for r in fwd] == [r.counts for r in rev[::-1]]


def _result(outcome, label, radius):
    return CertifyResult(outcome, label, radius, None, 0.9 if label is not None else 0.4, 0.1, [], 1, 10,
                         0.001, "reorder", 0)


def test_curve_examples():
    res = [_result("certified", 1, 2.0), _result("certified", 0, 1.0), _result("abstain", None, 0.0),
           _result("certified", 1, 0.5)]
    gold = [1, 1, 0, 1]
    assert certified_accuracy_curve(res, gold, [0]) == [(0.0, 0.5)]
    curve = certified_accuracy_curve(res, gold, [0, 0.5, 1, 2, 3])
    assert [a for _, a in curve] == [0.5, 0.5, 0.25, 0.25, 0.0]
    assert max_certified_radius(res, gold) == 2.0


def test_all_abstain_curve():
    res = [_result("abstain", None, 0.0)] * 3
    assert all(a == 0 for _, a in certified_accuracy_curve(res, [0, 1, 0], [0, 1, 2]))
    with pytest.raises(ValueError):
        certified_accuracy_curve([], [], [0])


def test_results_csv_round_trip(tiny):
    res = [_result("certified", 1, 2.5), _result("abstain", None, 0.0)]
    res[0].radius_reorder = 1.25
    buf = io.StringIO()
    write_results_csv(buf, res, [1, 0], ids=["a", "b"])
    buf.seek(0)
    ids, gold, back = results_from_rows(read_results_csv(buf))
    assert ids == ["a", "b"] and gold == [1, 0]
    for r, b in zip(res, back):
        assert (b.outcome, b.label, b.radius, b.radius_reorder, b.pA_lower) == \
            (r.outcome, r.label, r.radius, r.radius_reorder, r.pA_lower)


def test_results_csv_rejects_bad_rows():
    buf = io.StringIO("instance_id,gold\n1,0\n")
    with pytest.raises(ValueError, match="lacks"):
        read_results_csv(buf)
    row = {"instance_id": "1", "gold": "0", "outcome": "maybe", "label": "", "pA_lower": "0.4",
           "radius": "0", "radius_reorder": "", "N": "10", "alpha": "0.001", "mechanism": "reorder", "seed": "0"}
    with pytest.raises(ValueError, match="line 2"):
        results_from_rows([row])


def test_curve_csv():
    buf = io.StringIO()
    write_curve_csv(buf, [(0.0, 1.0), (2.0, 0.5)])
    assert buf.getvalue().splitlines() == ["radius,certified_accuracy", "0.0,1.0", "2.0,0.5"]
