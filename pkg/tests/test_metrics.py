import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from swinecat.errors import ContractError
from swinecat.metrics import confuse, merge, render_kv, render_table, report


def brute_force(cm):
    """Straight-from-definition metrics using plain Python floats."""
    k = len(cm)
    total = sum(sum(row) for row in cm)
    prec, rec, f1, sup = [], [], [], []
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k)) - tp
        fn = sum(cm[c]) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
        sup.append(sum(cm[c]))
    w = [s / total for s in sup]
    return {
        "accuracy": sum(cm[i][i] for i in range(k)) / total,
        "macro_precision": sum(prec) / k, "macro_recall": sum(rec) / k, "macro_f1": sum(f1) / k,
        "weighted_precision": sum(a * b for a, b in zip(w, prec)),
        "weighted_recall": sum(a * b for a, b in zip(w, rec)),
        "weighted_f1": sum(a * b for a, b in zip(w, f1)),
        "per_class": (prec, rec, f1, sup),
    }


def random_cm(rng, k=None):
    k = k or int(rng.integers(2, 10))
    cm = rng.integers(0, 30, (k, k)) * (rng.random((k, k)) < 0.7)
    cm[0, 0] += 1
    return cm


def test_confuse_cases():
    assert np.array_equal(confuse([0, 1, 2], [0, 1, 2], 3), np.eye(3, dtype=int))
    cm = confuse([0, 1], [1, 1], 2)
    assert cm[1, 0] == 1 and cm[1, 1] == 1 and cm.sum() == 2


def test_confuse_matches_counting_loop(rng):
    preds, labels = rng.integers(0, 9, 1000), rng.integers(0, 9, 1000)
    loop = np.zeros((9, 9), dtype=int)
    for p, t in zip(preds, labels):
        loop[t][p] += 1
    assert np.array_equal(confuse(preds, labels, 9), loop)


@pytest.mark.parametrize("preds,labels", [([0, 3], [0, 1]), ([0], [0, 1]), ([-1], [0])])
def test_confuse_contract(preds, labels):
    with pytest.raises(ContractError):
        confuse(preds, labels, 3)


def test_merge_adds_shards(rng):
    p, t = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    assert np.array_equal(merge(confuse(p[:40], t[:40], 4), confuse(p[40:], t[40:], 4)), confuse(p, t, 4))


def test_hand_case():
    rep = report(np.array([[8, 2], [3, 7]]))
    assert rep.accuracy == 0.75
    assert rep.precision[0] == 8 / 11 and rep.recall[0] == 0.8
    assert rep.precision[1] == 7 / 9 and rep.recall[1] == 0.7
    np.testing.assert_allclose(rep.f1, [16 / 21, 14 / 19], rtol=1e-15)
    assert abs(rep.macro_f1 - (16 / 21 + 14 / 19) / 2) < 1e-15


def test_diagonal_is_perfect():
    rep = report(np.diag([3, 5, 1]))
    assert all(v == 1.0 for v in rep.summary().values())


def test_zero_division_yields_zero():
    rep = report(np.array([[4, 0, 0], [2, 0, 0], [0, 0, 0]]))
    assert rep.precision[1] == 0 and rep.recall[1] == 0 and rep.f1[1] == 0
    assert rep.recall[2] == 0 and rep.support[2] == 0


def test_empty_matrix_rejected():
    with pytest.raises(ContractError):
        report(np.zeros((3, 3), dtype=int))


def test_weighted_recall_is_accuracy_exactly(rng):
    for _ in range(100):
        rep = report(random_cm(rng))
        assert rep.weighted_recall == rep.accuracy


def test_report_matches_brute_force(rng):
    for _ in range(100):
        cm = random_cm(rng)
        rep, ref = report(cm), brute_force(cm.tolist())
        for key, val in rep.summary().items():
            assert abs(val - ref[key]) < 1e-9, key
        prec, rec, f1, sup = ref["per_class"]
        np.testing.assert_allclose(rep.precision, prec, atol=1e-9)
        np.testing.assert_allclose(rep.recall, rec, atol=1e-9)
        np.testing.assert_allclose(rep.f1, f1, atol=1e-9)
        assert rep.support.tolist() == sup


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 6)).map(lambda t: (t[0], t[0])), elements=st.integers(0, 50)),
       st.randoms(use_true_random=False))
def test_relabeling_invariance_and_ranges(cm, r):
    if cm.sum() == 0:
        cm[0, 0] = 1
    perm = list(range(len(cm)))
    r.shuffle(perm)
    a, b = report(cm), report(cm[np.ix_(perm, perm)])
    for key in ("accuracy", "macro_precision", "macro_recall", "macro_f1", "weighted_f1"):
        assert abs(a.summary()[key] - b.summary()[key]) < 1e-12
    assert all(0.0 <= v <= 1.0 for v in a.summary().values())
    assert a.support.sum() == cm.sum()
    assert a.weighted_recall == a.accuracy


def test_rendering():
    rep = report(np.array([[8, 2], [3, 7]]))
    table = render_table(rep, ["Healthy", "Glaucoma"])
    assert "Accuracy(%)" in table and "75.00" in table and "Glaucoma" in table
    kv = dict(line.split("=", 1) for line in render_kv(rep).splitlines())
    assert float(kv["accuracy"]) == 0.75 and kv["class1.support"] == "10"
