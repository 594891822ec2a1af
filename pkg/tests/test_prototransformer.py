import csv
import math

import numpy as np
import pytest

from mspt import autodiff as ad
from mspt.autodiff import DimensionError
from mspt.bench import _best_time
from mspt.gradcheck import check_gradients
from mspt.prototransformer import (
    PTParams,
    dense_self_attention,
    pt_attention_cost,
    pt_forward,
    pt_init,
    write_attention_csv,
)


def _params(wq, wk, wv, n_iters=1):
    mk = lambda w: ad.parameter(np.asarray(w, float))
    return PTParams([mk(wq)], [mk(wk)], [mk(wv)], ("s20",), n_iters)


def _rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


def test_zero_query_weights_give_uniform_map():
    X, P = _rand((7, 3), 0), _rand((4, 3), 1)
    wv = _rand((3, 3), 2)
    out = pt_forward(ad.constant(P), ad.constant(X), _params(np.zeros((3, 3)), _rand((3, 3), 3), wv))
    np.testing.assert_allclose(out.a_map, np.full((4, 7), 1 / 7), atol=1e-15)
    np.testing.assert_allclose(out.p_hat.data, np.tile(X.mean(0) @ wv, (4, 1)), atol=1e-12)


def test_single_instance_bag():
    X, wv = _rand((1, 3), 0), _rand((3, 3), 1)
    for seed in (5, 6):
        out = pt_forward(ad.constant(_rand((4, 3), seed)), ad.constant(X), _params(_rand((3, 3), 2), _rand((3, 3), 3), wv))
        np.testing.assert_array_equal(out.a_map, np.ones((4, 1)))
        np.testing.assert_allclose(out.p_hat.data, np.tile(X @ wv, (4, 1)), atol=1e-14)


def test_small_integer_case_against_scalar_oracle():
    P = [[1, 0], [0, 1]]
    X = [[1, 2], [0, 1], [2, 0]]
    Wq = [[1, 0], [1, 1]]
    Wk = [[0, 1], [1, 0]]
    Wv = [[1, 1], [0, 2]]

    def mm(A, B):
        return [[sum(A[i][t] * B[t][j] for t in range(len(B))) for j in range(len(B[0]))] for i in range(len(A))]

    Q, Kx, V = mm(P, Wq), mm(X, Wk), mm(X, Wv)
    expected = []
    for q in Q:
        logits = [(q[0] * k[0] + q[1] * k[1]) / math.sqrt(2) for k in Kx]
        z = sum(math.exp(l) for l in logits)
        a = [math.exp(l) / z for l in logits]
        expected.append([sum(a[j] * V[j][c] for j in range(3)) for c in range(2)])

    out = pt_forward(ad.constant(np.array(P, float)), ad.constant(np.array(X, float)), _params(Wq, Wk, Wv))
    np.testing.assert_allclose(out.p_hat.data, expected, atol=1e-12)


def test_attention_rows_are_distributions_and_outputs_convex():
    X, P = _rand((9, 4), 0), _rand((3, 4), 1)
    params = pt_init(4, ("s20",), seed=3)
    out = pt_forward(ad.constant(P), ad.constant(X), params)
    assert np.all(np.abs(out.a_map.sum(1) - 1) <= 1e-9)
    assert np.all((out.a_map > 0) & (out.a_map < 1))
    V = X @ params.w_v[0].data
    np.testing.assert_allclose(out.p_hat.data, out.a_map @ V, atol=1e-12)
    # reference: keys projected explicitly, no reassociation
    q = P @ params.w_q[0].data
    logits = q @ (X @ params.w_k[0].data).T / 2.0
    ref = np.exp(logits - logits.max(1, keepdims=True))
    np.testing.assert_allclose(out.a_map, ref / ref.sum(1, keepdims=True), atol=1e-13)
    lo, hi = V.min(0), V.max(0)
    assert np.all(out.p_hat.data >= lo - 1e-12) and np.all(out.p_hat.data <= hi + 1e-12)


def test_permuting_instances_permutes_map_columns():
    X, P = _rand((11, 5), 0), _rand((4, 5), 1)
    params = pt_init(5, ("s20",), seed=0)
    perm = np.random.default_rng(2).permutation(11)
    a = pt_forward(ad.constant(P), ad.constant(X), params)
    b = pt_forward(ad.constant(P), ad.constant(X[perm]), params)
    np.testing.assert_allclose(b.p_hat.data, a.p_hat.data, atol=1e-12)
    np.testing.assert_allclose(b.a_map, a.a_map[:, perm], atol=1e-15)


def test_iterated_passes_feed_output_back_as_queries():
    X, P = _rand((6, 3), 0), _rand((2, 3), 1)
    one = pt_init(3, ("s20",), n_iters=1, seed=4)
    two = pt_init(3, ("s20",), n_iters=2, seed=4)
    first = pt_forward(ad.constant(P), ad.constant(X), one).p_hat
    again = pt_forward(first, ad.constant(X), one)
    out = pt_forward(ad.constant(P), ad.constant(X), two)
    np.testing.assert_allclose(out.p_hat.data, again.p_hat.data, atol=1e-14)
    np.testing.assert_allclose(out.a_map, again.a_map, atol=1e-15)


def test_dimension_mismatch():
    params = pt_init(3, ("s20",))
    with pytest.raises(DimensionError):
        pt_forward(ad.constant(np.zeros((2, 4))), ad.constant(np.zeros((5, 3))), params)
    with pytest.raises(DimensionError):
        pt_forward(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((5, 2))), params)


def test_gradients_match_finite_differences():
    params = pt_init(4, ("s20",), n_iters=2, seed=1)
    X, P = ad.constant(_rand((5, 4), 0)), ad.constant(_rand((2, 4), 1))
    target = _rand((2, 4), 2)

    def loss():
        out = pt_forward(P, X, params).p_hat
        diff = ad.sub(out, ad.constant(target))
        return ad.sum_all(ad.mul(diff, diff))

    errors = check_gradients(loss, params.named())
    assert max(errors.values()) <= 1e-4, errors


def test_dense_reference_equals_pt_with_instances_as_queries():
    X = _rand((8, 3), 0)
    params = pt_init(3, ("s20",), seed=2)
    w = [m.data for m in (params.w_q[0], params.w_k[0], params.w_v[0])]
    out = pt_forward(ad.constant(X), ad.constant(X), params)
    np.testing.assert_allclose(dense_self_attention(X, *w), out.p_hat.data, atol=1e-12)


# -- cost ----------------------------------------------------------------------

def test_cost_doubling_n_doubles_n_terms():
    a, b = pt_attention_cost(1000, 16, 64), pt_attention_cost(2000, 16, 64)
    assert b.attention == 2 * a.attention
    assert b.projections == a.projections


def test_cost_with_k_equal_n_is_quadratic():
    c = pt_attention_cost(300, 300, 8)
    assert c.attention == 4 * 300 ** 2 * 8


def test_cost_ratio_prototypes_versus_all_instances():
    few, full = pt_attention_cost(5900, 16, 512), pt_attention_cost(5900, 5900, 512)
    assert few.attention / full.attention == pytest.approx(16 / 5900, rel=1e-12)
    assert few.total / full.total == pytest.approx(16 / 5900, rel=1e-12)


def test_cost_rejects_nonpositive():
    with pytest.raises(ValueError):
        pt_attention_cost(0, 1, 1)


# -- init ----------------------------------------------------------------------

def test_init_seeded_and_independent_per_scale():
    a, b = pt_init(6, seed=3), pt_init(6, seed=3)
    for x, y in zip(a.named().values(), b.named().values()):
        np.testing.assert_array_equal(x.data, y.data)
    assert len(a.w_q) == 3
    assert not np.array_equal(a.w_q[0].data, a.w_q[1].data)
    assert not np.array_equal(a.w_v[1].data, a.w_v[2].data)


def test_init_variance_is_one_over_dk():
    p = pt_init(128, ("s20",), seed=0)
    entries = np.concatenate([m.data.ravel() for m in p.named().values()])
    assert entries.size >= 10_000
    assert entries.var(ddof=1) == pytest.approx(1 / 128, rel=0.03)


def test_init_rejects_zero_dim():
    with pytest.raises(ValueError):
        pt_init(0)


# -- export and runtime --------------------------------------------------------

def test_attention_csv_columns(tmp_path):
    amap = np.array([[0.25, 0.75], [0.5, 0.5]])
    write_attention_csv(tmp_path / "a.csv", [("bag0", "s20", amap)])
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["bag_id", "scale", "prototype_index", "instance_index", "weight"]
    assert len(rows) == 5
    assert rows[2][:4] == ["bag0", "s20", "0", "1"] and float(rows[2][4]) == 0.75


@pytest.mark.slow
def test_runtime_linear_in_bag_size():
    # median over several doublings; single ratios are noisy on a shared machine
    rng = np.random.default_rng(0)
    params = pt_init(64, ("s20",), seed=0)
    P = ad.constant(rng.standard_normal((16, 64)))
    ns = (4096, 8192, 16384, 32768)
    times = []
    for n in ns:
        X = ad.constant(rng.standard_normal((n, 64)))
        times.append(_best_time(lambda: pt_forward(P, X, params), 15))
    ratio = float(np.median([b / a for a, b in zip(times, times[1:])]))
    assert 1.6 <= ratio <= 2.6, (ratio, times)
