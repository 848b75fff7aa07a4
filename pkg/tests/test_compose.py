import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from unite_sampler.compose import (
    CompositionSpec,
    ExpertBundle,
    SpecViolation,
    classifier_free_epsilon,
    compose_epsilon,
    compose_epsilon_gpoe,
    compose_from_predictions,
    gpoe_from_predictions,
    unconditional_blend,
)
from unite_sampler.experts import NULL, GaussianExpert, GmmExpert, Label
from unite_sampler.oracle import GridSpec, blend_unconditional, diffused_marginal_density, product_density
from unite_sampler.schedule import make_cosine_schedule, make_linear_schedule, remap_timestep


class TableExpert:
    """Returns fixed epsilons per condition regardless of state and time."""

    def __init__(self, values, dim=1):
        self.values = {k: np.asarray(v, dtype=float) for k, v in values.items()}
        self.dim = dim
        self.calls = []

    def epsilon(self, z, cond, t, schedule):
        self.calls.append((cond, t))
        z = np.asarray(z)
        return np.broadcast_to(self.values[cond], z.shape).copy()


def fixed_bundle(pairs, schedule):
    experts = [TableExpert({Label(0): c, NULL: u}) for c, u in pairs]
    return ExpertBundle(tuple((e, Label(0)) for e in experts), schedule), experts


def term_rel(diff, *terms):
    scale = max(float(np.max(np.abs(t))) for t in terms)
    return float(np.max(np.abs(diff))) / scale


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(1000)


def test_spec_validation():
    CompositionSpec((0.5, 0.5), (1.0, 3.0))
    with pytest.raises(SpecViolation, match="sum to 1"):
        CompositionSpec((0.5, 0.4), (1.0, 1.0))
    with pytest.raises(SpecViolation, match=">= 0"):
        CompositionSpec((1.5, -0.5), (1.0, 1.0))
    with pytest.raises(SpecViolation, match="w_i >= 1"):
        CompositionSpec((0.5, 0.5), (0.5, 1.0))
    assert CompositionSpec((0.5, 0.5), (0.5, 1.0), allow_weak_weights=True).w == (0.5, 1.0)
    with pytest.raises(SpecViolation):
        CompositionSpec((1.0,), (1.0, 1.0))


def test_single_expert_identity(sched, backend):
    b, _ = fixed_bundle([([0.37], [9.0])], sched)
    assert compose_epsilon(b, CompositionSpec((1.0,), (1.0,)), [0.0], 10).tolist() == [0.37]


def test_forced_arithmetic(sched, backend):
    b, _ = fixed_bundle([([1.0], [0.0]), ([3.0], [2.0])], sched)
    assert compose_epsilon(b, CompositionSpec((0.5, 0.5), (1.0, 1.0)), [0.0], 5).tolist() == [3.0]
    assert compose_epsilon(b, CompositionSpec((0.5, 0.5), (1.0, 2.0)), [0.0], 5).tolist() == [5.0]
    assert unconditional_blend(b, (0.5, 0.5), [0.0], 5).tolist() == [1.0]


def test_gpoe_forced_arithmetic(sched):
    b, _ = fixed_bundle([([1.0], [0.0]), ([0.0], [1.0])], sched)
    out = compose_epsilon_gpoe(b, (0.3, 0.7), (2.0, 1.0), [0.0], 3)
    assert out[0] == pytest.approx(0.6, abs=1e-15)


def test_gpoe_matches_weighted_and_unweighted(sched):
    b, _ = fixed_bundle([([1.3], [0.2]), ([-0.4], [2.0]), ([0.9], [-1.1])], sched)
    a = (0.2, 0.5, 0.3)
    for w in [(1.0, 1.0, 1.0), (1.5, 2.0, 4.0)]:
        g = compose_epsilon_gpoe(b, a, w, [0.0], 7)
        c = compose_epsilon(b, CompositionSpec(a, w), [0.0], 7)
        assert abs(g[0] - c[0]) <= 1e-15 * 8


def test_cfg_examples(sched):
    ex = TableExpert({Label(0): [1.0], NULL: [0.5]})
    assert classifier_free_epsilon(ex, [0.0], Label(0), 1, 0.0, sched).tolist() == [1.0]
    assert classifier_free_epsilon(ex, [0.0], Label(0), 1, 1.0, sched).tolist() == [1.5]
    with pytest.raises(SpecViolation):
        classifier_free_epsilon(ex, [0.0], Label(0), 1, -0.5, sched)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 20), hnp.arrays(np.float64, (2, 4), elements=st.floats(-100, 100)))
def test_cfg_is_single_expert_composition(w, vals):
    sched = make_linear_schedule(10)
    # use the guidance weight that 1 + w actually represents
    w = (1.0 + w) - 1.0
    ec, eu = vals
    ex = TableExpert({Label(0): ec, NULL: eu}, dim=4)
    b = ExpertBundle(((ex, Label(0)),), sched)
    cfg = classifier_free_epsilon(ex, np.zeros(4), Label(0), 3, w, sched)
    comp = compose_epsilon(b, CompositionSpec((1.0,), (1.0 + w,)), np.zeros(4), 3)
    assert np.max(np.abs(cfg - comp)) <= 1e-15


@st.composite
def predictions(draw):
    n = draw(st.integers(1, 4))
    d = draw(st.sampled_from([1, 2, 8]))
    vals = st.floats(-10, 10)
    c = draw(hnp.arrays(np.float64, (n, d), elements=vals))
    u = draw(hnp.arrays(np.float64, (n, d), elements=vals))
    raw = draw(hnp.arrays(np.float64, n, elements=st.floats(0.01, 1.0)))
    a = raw / raw.sum()
    w = draw(hnp.arrays(np.float64, n, elements=st.floats(1.0, 10.0)))
    return c, u, a, w


@settings(max_examples=300, deadline=None)
@given(predictions())
def test_gpoe_equals_weighted_form(case):
    c, u, a, w = case
    diff = compose_from_predictions(c, u, a, w) - gpoe_from_predictions(c, u, a, w)
    scale = max(np.max(np.abs(w[:, None] * c)), np.max(np.abs((w.sum() - 1) * u)), 1.0)
    assert np.max(np.abs(diff)) <= 1e-14 * scale


@settings(max_examples=200, deadline=None)
@given(predictions())
def test_linearity_superposition(case):
    c, u, a, w = case
    c2, u2 = c[::-1].copy(), u[::-1].copy()
    lhs = compose_from_predictions(c + 2.0 * c2, u + 2.0 * u2, a, w)
    rhs = compose_from_predictions(c, u, a, w) + 2.0 * compose_from_predictions(c2, u2, a, w)
    zero = compose_from_predictions(np.zeros_like(c), np.zeros_like(u), a, w)
    assert np.all(zero == 0.0)
    scale = max(np.max(np.abs(c)), np.max(np.abs(u)), 1.0) * (w.sum() * 6)
    assert np.max(np.abs(lhs - rhs)) <= 1e-13 * scale


@settings(max_examples=200, deadline=None)
@given(predictions(), st.randoms())
def test_permutation_equivariance(case, rnd):
    c, u, a, w = case
    p = list(range(len(a)))
    rnd.shuffle(p)
    diff = compose_from_predictions(c, u, a, w) - compose_from_predictions(c[p], u[p], a[p], w[p])
    scale = max(np.max(np.abs(w[:, None] * c)), np.max(np.abs((w.sum() - 1) * u)), 1.0)
    assert np.max(np.abs(diff)) <= 1e-14 * scale


def test_reliability_changes_only_blend(sched):
    b, _ = fixed_bundle([([1.0], [0.25]), ([2.0], [-0.75])], sched)
    w = (1.5, 2.0)
    for a in [(1.0, 0.0), (0.0, 1.0), (0.3, 0.7)]:
        blend = sum(ai * u for ai, u in zip(a, [0.25, -0.75]))
        expected = 1.5 * 1.0 + 2.0 * 2.0 - 2.5 * blend
        assert compose_epsilon(b, CompositionSpec(a, w), [0.0], 4)[0] == pytest.approx(expected, abs=1e-14)


def test_one_hot_blend_is_exact_and_skips_zero_expert(sched, backend):
    e1 = GaussianExpert({NULL: ([0.3], [1.2]), Label(0): ([1.0], [0.8])})
    e2 = GmmExpert({NULL: ([0.5, 0.5], [[-1.0], [1.0]], [[0.7], [0.7]]), Label(0): ([1.0], [[-0.5]], [[0.6]])})
    b = ExpertBundle(((e1, Label(0)), (e2, Label(0))), sched)
    z = np.linspace(-3, 3, 41)[:, None]
    for t in (1, 250, 1000):
        np.testing.assert_array_equal(unconditional_blend(b, (1.0, 0.0), z, t), e1.epsilon(z, NULL, t, sched))
        np.testing.assert_array_equal(unconditional_blend(b, (0.0, 1.0), z, t), e2.epsilon(z, NULL, t, sched))


def test_skip_optimisations_do_not_query(sched):
    b, (e1, e2) = fixed_bundle([([1.0], [0.0]), ([3.0], [2.0])], sched)
    compose_epsilon(b, CompositionSpec((1.0, 0.0), (1.5, 1.0)), [0.0], 9)
    assert (NULL, 9) not in e2.calls and (NULL, 9) in e1.calls
    single, (e,) = fixed_bundle([([1.0], [float("nan")])], sched)
    assert compose_epsilon(single, CompositionSpec((1.0,), (1.0,)), [0.0], 9).tolist() == [1.0]
    assert all(c is not NULL for c, _ in e.calls)


def test_remapped_expert_schedule(sched):
    other = make_cosine_schedule(400)
    ex = TableExpert({Label(0): [1.0], NULL: [0.0]})
    b = ExpertBundle(((ex, Label(0), other),), sched)
    compose_epsilon(b, CompositionSpec((1.0,), (1.0,)), [0.0], 600)
    assert ex.calls[-1] == (Label(0), remap_timestep(sched, other, 600))


def test_bundle_validation(sched):
    e1 = TableExpert({Label(0): [1.0], NULL: [0.0]}, dim=1)
    e2 = TableExpert({Label(0): [1.0, 1.0], NULL: [0.0, 0.0]}, dim=2)
    with pytest.raises(ValueError):
        ExpertBundle(((e1, Label(0)), (e2, Label(0))), sched)
    with pytest.raises(ValueError):
        ExpertBundle((), sched)
    b = ExpertBundle(((e1, Label(0)),), sched)
    with pytest.raises(SpecViolation):
        compose_epsilon(b, CompositionSpec((0.5, 0.5), (1.0, 1.0)), [0.0], 1)
    with pytest.raises(ValueError):
        compose_epsilon(b, CompositionSpec((1.0,), (1.0,)), [0.0, 0.0], 1)


def test_composed_epsilon_matches_grid_product_score(sched, backend):
    """At t=1 the composed epsilon is the score of the cellwise product density."""
    p1 = (np.array([0.8]), np.array([0.7]))
    p2 = (np.array([-0.4]), np.array([0.5]))
    n1 = (np.array([0.0]), np.array([1.3]))
    n2 = (np.array([0.2]), np.array([1.1]))
    e1 = GaussianExpert({NULL: n1, Label(0): p1})
    e2 = GaussianExpert({NULL: n2, Label(0): p2})
    b = ExpertBundle(((e1, Label(0)), (e2, Label(0))), sched)
    a, w = (0.4, 0.6), (1.0, 1.0)
    grid = GridSpec(((-3.0, 3.0),), (60001,))
    t = 1
    prod = product_density(
        [diffused_marginal_density(p1, sched, t, grid), diffused_marginal_density(p2, sched, t, grid)],
        blend_unconditional([diffused_marginal_density(n1, sched, t, grid), diffused_marginal_density(n2, sched, t, grid)], a),
        w,
    )
    x = grid.centers(0)
    logm = np.log(prod.mass)
    score = np.gradient(logm, x)
    keep = (prod.mass > 1e-3 * prod.mass.max())
    keep[[0, -1]] = False
    eps = compose_epsilon(b, CompositionSpec(a, w), x[keep][:, None], t)[:, 0]
    implied = -eps / math.sqrt(1 - sched.alpha_bars[t])
    rel = np.abs(implied - score[keep]) / np.maximum(np.abs(score[keep]), 1e-2)
    assert np.max(rel) <= 1e-3
