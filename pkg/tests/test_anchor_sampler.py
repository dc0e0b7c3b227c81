import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from coarse3d.anchor_sampler import (
    ClassTable,
    anchor_budget,
    class_quotas,
    sample_anchors,
    sampling_probabilities,
    shannon_entropy,
)


def test_entropy_extremes_exact():
    assert shannon_entropy(np.array([0.0, 1.0, 0.0])) == 0.0
    for k in (2, 3, 7, 19):
        assert shannon_entropy(np.full(k, 1.0 / k)) == pytest.approx(math.log(k), abs=1e-15)


def test_entropy_closed_form():
    assert shannon_entropy(np.array([0.9, 0.1])) == pytest.approx(oracles.ENTROPY_09_01, abs=1e-12)
    assert shannon_entropy(np.array([0.9, 0.1])) == pytest.approx(0.3251, abs=1e-4)


def test_entropy_errors():
    with pytest.raises(ValueError, match="nonnegative"):
        shannon_entropy(np.array([1.2, -0.2]))
    with pytest.raises(ValueError, match="sum"):
        shannon_entropy(np.array([0.5, 0.6]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 9))
def test_entropy_bounds(seed, k):
    g = np.random.default_rng(seed)
    p = g.dirichlet(np.full(k, 0.3), size=(4, 5))
    h = shannon_entropy(p)
    assert h.shape == (4, 5)
    assert (h >= 0).all() and (h <= math.log(k) + 1e-12).all()


def test_rho_equal_entropy():
    t = sampling_probabilities(np.array([[0.4, 0.4]]), np.array([[1, 1]]), np.ones((1, 2), bool), 2)
    np.testing.assert_allclose(t[1].prob, [0.5, 0.5])
    assert t[0].pixels.shape == (0, 2)


def test_rho_h0_h1():
    t = sampling_probabilities(np.array([[0.0, 1.0]]), np.array([[0, 0]]), np.ones((1, 2), bool), 1)
    np.testing.assert_allclose(t[0].prob, oracles.RHO_H0_H1, atol=1e-12)
    np.testing.assert_allclose(t[0].prob, (0.7311, 0.2689), atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tables_normalised_and_monotone(seed):
    g = np.random.default_rng(seed)
    ent = g.uniform(0, 2, size=(6, 7))
    pred = g.integers(0, 3, size=(6, 7))
    valid = g.uniform(size=(6, 7)) < 0.8
    tables = sampling_probabilities(ent, pred, valid, 3)
    for c, t in tables.items():
        if t.pixels.shape[0]:
            assert abs(t.prob.sum() - 1) < 1e-6
            assert (pred[t.pixels[:, 0], t.pixels[:, 1]] == c).all()
            assert valid[t.pixels[:, 0], t.pixels[:, 1]].all()
    # lowering one pixel's entropy raises its weight relative to every other pixel of its class
    r, c = np.argwhere(valid)[0]
    cls = pred[r, c]
    ent2 = ent.copy()
    ent2[r, c] *= 0.5
    before = sampling_probabilities(ent, pred, valid, 3)[cls]
    after = sampling_probabilities(ent2, pred, valid, 3)[cls]
    i = np.flatnonzero((before.pixels == [r, c]).all(1))[0]
    if ent[r, c] > 0 and before.prob.size > 1:
        j = (i + 1) % before.prob.size
        assert after.prob[i] / after.prob[j] > before.prob[i] / before.prob[j]


# -- schedule ---------------------------------------------------------------


def test_budget_examples():
    assert anchor_budget(3, 5, 100, 1000) == 0
    assert anchor_budget(5, 5, 100, 1000) == 1
    assert anchor_budget(99, 5, 100, 1000) == 500
    with pytest.raises(ValueError):
        anchor_budget(0, 10, 10, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 20), st.integers(21, 120), st.integers(0, 5000))
def test_budget_monotone_and_bounded(warm, total, count):
    b = [anchor_budget(e, warm, total, count) for e in range(total)]
    assert all(x <= y for x, y in zip(b, b[1:]))
    assert max(b) <= count
    if count:
        assert b[total - 1] == max(1, count // 2)


# -- quotas and sampling ----------------------------------------------------


def test_quotas_900_100():
    assert class_quotas(np.array([900, 100]), 10).tolist() == [9, 1]


def test_quotas_floor_of_one():
    assert class_quotas(np.array([990, 5, 5]), 10).tolist() == [8, 1, 1]


def test_quotas_largest_remainder():
    # exact shares 2.7, 0.9, 5.4 -> floors 2, 0, 5; the two spare seats go to remainders .9 and .7
    assert class_quotas(np.array([3, 1, 6]), 9).tolist() == [3, 1, 5]
    assert class_quotas(np.array([3, 1, 6]), 10).tolist() == [3, 1, 6]


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=6), st.integers(0, 200))
def test_quota_properties(counts, budget):
    counts = np.array(counts)
    q = class_quotas(counts, budget)
    assert q.sum() == min(budget, counts.sum())
    assert (q <= counts).all() and (q >= 0).all()
    if budget >= (counts > 0).sum():
        assert (q[counts > 0] >= 1).all()


def _tables(g, sizes):
    out = {}
    base = 0
    for c, n in enumerate(sizes):
        pix = np.stack([np.full(n, c), base + np.arange(n)], 1)
        w = g.uniform(0.1, 1, n)
        out[c] = ClassTable(c, pix, w / w.sum())
        base += n
    return out


def test_sample_zero_budget():
    assert len(sample_anchors(_tables(np.random.default_rng(0), [3, 4]), 0, seed=1)) == 0


def test_sample_exhaustive():
    t = _tables(np.random.default_rng(0), [3, 4, 2])
    s = sample_anchors(t, 9, seed=1)
    got = sorted(map(tuple, s.pixels.tolist()))
    want = sorted(map(tuple, np.concatenate([x.pixels for x in t.values()]).tolist()))
    assert got == want


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 30))
def test_sample_properties(seed, budget):
    g = np.random.default_rng(seed)
    t = _tables(g, [int(n) for n in g.integers(0, 12, 3)])
    s = sample_anchors(t, budget, seed, epoch=7)
    a = sample_anchors(t, budget, seed, epoch=7)
    assert np.array_equal(s.pixels, a.pixels) and s.epoch == 7
    assert len({tuple(p) for p in s.pixels.tolist()}) == len(s)
    # anchors keep the class of the table they were drawn from
    assert (s.pixels[:, 0] == s.classes).all()
    assert len(s) == min(budget, sum(x.pixels.shape[0] for x in t.values()))
