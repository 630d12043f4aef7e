import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpcmin import ring
from mpcmin.approx import quad_activation, two_quad_softmax, two_relu_softmax
from mpcmin.tensor import PlainEvaluator, softmax_rows


def row_sum_error(p):
    return np.abs(ring.signed(p).sum(-1) - 4096)


@pytest.mark.parametrize("kind", ["exact", "2relu", "2quad"])
def test_rows_sum_to_one(kind, rng):
    ev = PlainEvaluator()
    for n in (1, 3, 17, 64):
        x = ring.encode_array(rng.normal(size=(20, n)) * 3)
        p = softmax_rows(ev, x, kind=kind)
        assert np.all(row_sum_error(p) <= n)
        assert np.all(ring.signed(p) >= 0)


def test_two_relu_fallback_uniform():
    ev = PlainEvaluator()
    x = ring.encode_array(-np.ones((1, 4)))
    p = two_relu_softmax(ev, x)
    assert np.all(ring.decode_array(p) == 0.25)


def test_two_relu_counts_compare_not_exp(rng):
    ev = PlainEvaluator()
    two_relu_softmax(ev, ring.encode_array(rng.normal(size=(2, 3, 5))))
    assert ev.counters.get("nonarith.Compare") == 30
    assert ev.counters.get("nonarith.SoftmaxDiv") == 30
    assert ev.counters.get("nonarith.SoftmaxExp") == 0
    assert ev.counters.get("softmax_batches") == 2


def test_two_quad_formula(rng):
    ev = PlainEvaluator()
    xf = rng.normal(size=(4, 6))
    p = ring.decode_array(two_quad_softmax(ev, ring.encode_array(xf)))
    q = (xf + 5) ** 2
    assert np.max(np.abs(p - q / q.sum(-1, keepdims=True))) < 2e-3
    assert ev.counters.get("nonarith.SoftmaxExp") == 0


def test_masked_variants_ignore_invalid(rng):
    valid = np.tril(np.ones((4, 4), dtype=bool))
    for kind in ("exact", "2relu", "2quad"):
        p = softmax_rows(PlainEvaluator(), ring.encode_array(rng.normal(size=(4, 4))), valid, kind=kind)
        assert np.all(p[~valid] == 0), kind


def test_quad_uses_only_truncation(rng):
    ev = PlainEvaluator()
    quad_activation(ev, ring.encode_array(rng.normal(size=10)))
    snap = ev.counters.snapshot()["prefill"]["other"]
    kinds = {k for k in snap if k.startswith("nonarith.")}
    assert kinds == {"nonarith.Trunc"}
    assert snap["nonarith.Trunc"] == 20


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-8, 8, allow_nan=False), min_size=2, max_size=12))
def test_two_relu_preserves_argmax(xs):
    x = ring.encode_array(xs)
    vals = ring.signed(x)
    if vals.max() <= 0:
        return
    p = two_relu_softmax(PlainEvaluator(), x[None, :])[0]
    top = np.flatnonzero(vals == vals.max())
    assert int(np.argmax(ring.signed(p))) in top


def test_two_relu_closed_form():
    p = ring.decode_array(two_relu_softmax(PlainEvaluator(), ring.encode_array([[1.0, 2.0, 3.0]])))
    assert np.max(np.abs(p - np.array([1, 2, 3]) / 6)) <= 2.0**-12


def test_two_quad_constant_row_uniform():
    p = ring.decode_array(two_quad_softmax(PlainEvaluator(), ring.encode_array([[0.7] * 4])))
    assert np.all(p == 0.25)


def test_two_quad_counts(rng):
    ev = PlainEvaluator()
    two_quad_softmax(ev, ring.encode_array(rng.normal(size=(3, 5))))
    assert ev.counters.get("triple_mults") == 15
    assert ev.counters.get("calls.SoftmaxExp") == 0


def test_quad_at_zero_is_c0():
    out = quad_activation(PlainEvaluator(), ring.encode_array([0.0]), 0.3, -0.2, 0.75)
    assert ring.decode_array(out)[0] == 0.75


def test_quad_matches_polynomial(rng):
    for _ in range(100):
        xf = rng.uniform(-3, 3, size=(2, 3))
        out = ring.decode_array(quad_activation(PlainEvaluator(), ring.encode_array(xf)))
        assert np.max(np.abs(out - (0.125 * xf**2 + 0.25 * xf + 0.5))) < 3 * 2.0**-12
