import itertools

import numpy as np
import pytest

from backend import induction
from backend.induction import Thresholds
from backend.mean_field import MarginalsBatch, cd_sweep_batch, mf_converge_batch
from backend.model import (Dataset, Feature, FeatureError, Instance, State, VariableSchema,
                           canonical_pair, init_unary_model)


def _batch(schema, probs):
    probs = np.asarray(probs, dtype=float)
    m = len(probs)
    return MarginalsBatch(schema, probs, np.zeros((m, schema.n_vars), dtype=bool),
                          np.ones(m, dtype=np.int64), np.ones(m, dtype=bool))


def _fixture(make_model, seed, n_vars=8, m=6):
    model = make_model((2,) * n_vars, seed=seed, scale=1.5)
    rng = np.random.default_rng(seed)
    data = Dataset(model.schema, tuple(
        Instance(tuple(int(v) for v in rng.integers(0, 2, n_vars)),
                 tuple(bool(h) for h in rng.random(n_vars) < 0.3))
        for _ in range(m)))
    q0 = mf_converge_batch(model, data)
    return model, q0, cd_sweep_batch(model, q0)


def test_table_with_identical_beliefs():
    schema = VariableSchema((2, 2))
    q = _batch(schema, [[0.3, 0.7, 0.6, 0.4], [0.9, 0.1, 0.5, 0.5]])
    table = induction.build_signal_error_table(q, q)
    assert np.all(table.err == 0)
    assert np.array_equal(table.eps0, table.eps1)


def test_table_single_instance_has_no_signal():
    schema = VariableSchema((2, 3))
    table = induction.build_signal_error_table(
        _batch(schema, [[0.3, 0.7, 0.2, 0.3, 0.5]]), _batch(schema, [[0.5, 0.5, 0.1, 0.1, 0.8]]))
    assert np.all(table.eps0 == 0) and np.all(table.eps1 == 0)
    assert table.err.shape == (1, 3)


def test_table_means_and_signals():
    schema = VariableSchema((2,))
    q0 = _batch(schema, [[0.8, 0.2], [0.2, 0.8]])
    table = induction.build_signal_error_table(q0, q0)
    col = table.column(State(0, 1))
    assert table.mean0[col] == pytest.approx(0.5)
    assert table.eps0[:, col] == pytest.approx([-0.3, 0.3])
    with pytest.raises(FeatureError):
        table.column(State(0, 0))


def test_table_invariants(make_model):
    _, q0, q1 = _fixture(make_model, 2, m=9)
    table = induction.build_signal_error_table(q0, q1)
    for arr in (table.err, table.eps0, table.eps1):
        assert np.all(np.abs(arr) <= 1.0)
    assert np.allclose(table.eps0.sum(axis=0), 0.0, atol=1e-9 * 9)
    assert np.allclose(table.eps1.sum(axis=0), 0.0, atol=1e-9 * 9)


def test_decomposition_example():
    parts = induction.decompose_pair_gradient(0.5, 0.5, 0.7, 0.7, 0.5, 0.5)
    assert parts.total == pytest.approx(0.24)
    assert parts.symmetric_total == pytest.approx(0.24)
    zero = induction.decompose_pair_gradient(0.3, 0.6, 0.3, 0.6, 0.4, 0.4)
    assert zero.total == 0.0 and zero.symmetric_total == 0.0


def test_decomposition_identities_hold_for_random_inputs():
    rng = np.random.default_rng(0)
    for q0a, q0b, q1a, q1b, e0a, e0b, e1a, e1b in rng.random((1000, 8)):
        exact = q1a * q1b - q0a * q0b
        parts = induction.decompose_pair_gradient(q0a, q0b, q1a, q1b, e0a, e0b)
        assert abs(parts.total - exact) <= 1e-12
        assert abs(parts.symmetric_total - exact) <= 1e-12
        drifted = induction.decompose_pair_gradient(q0a, q0b, q1a, q1b, e0a, e0b, e1a, e1b)
        assert abs(drifted.symmetric_total - exact) <= 1e-12


def test_grafting_single_pair():
    schema = VariableSchema((2, 2))
    model = init_unary_model(schema)
    q0 = _batch(schema, [[0.1, 0.9, 0.1, 0.9]])
    q1 = _batch(schema, [[0.5, 0.5, 0.5, 0.5]])
    scores = induction.grafting_scores(model, q0, q1)
    assert scores.get(canonical_pair(State(0, 1), State(1, 1))) == pytest.approx(-0.56)
    assert len(induction.grafting_scores(model, q0, q0)) == 0


def test_grafting_skips_active_features(make_model):
    model, q0, q1 = _fixture(make_model, 1)
    scores = induction.grafting_scores(model, q0, q1)
    active = {f for f in model.features if len(f.states) == 2}
    assert active
    assert not any(f in active for f, _ in scores.items())


def test_grafting_matches_raw_products(make_model):
    model, q0, q1 = _fixture(make_model, 3, n_vars=6, m=4)
    unary = init_unary_model(model.schema)
    scores = induction.grafting_scores(unary, q0, q1)
    for a, b in itertools.combinations(range(6), 2):
        f = canonical_pair(State(a, 1), State(b, 1))
        expected = sum(q1.probs[i, 2 * a + 1] * q1.probs[i, 2 * b + 1]
                       - q0.probs[i, 2 * a + 1] * q0.probs[i, 2 * b + 1] for i in range(4))
        assert scores.get(f) == pytest.approx(expected, abs=1e-14)


def test_grafting_explicit_candidates_agree(make_model):
    model, q0, q1 = _fixture(make_model, 4)
    unary = init_unary_model(model.schema)
    everything = induction.grafting_scores(unary, q0, q1)
    some = [f for f, _ in itertools.islice(everything.items(), 10)]
    picked = induction.grafting_scores(unary, q0, q1, candidates=some)
    for f in some:
        assert picked.get(f) == pytest.approx(everything.get(f), abs=1e-14)
    with pytest.raises(FeatureError):
        induction.grafting_scores(unary, q0, q1, candidates=[Feature((State(0, 1),))])


def test_cfi_single_accumulation():
    schema = VariableSchema((2, 2))
    # A = (0, 1): signal 0.6, no error. B = (1, 1): error 0.5, no signal.
    table = induction.SignalErrorTable(
        schema, np.array([1, 3]),
        err=np.array([[0.0, 0.5]]),
        eps0=np.array([[0.6, 0.0]]), eps1=np.array([[0.6, 0.0]]),
        mean0=np.array([0.2, 0.2]), mean1=np.array([0.2, 0.2]))
    scores = induction.cfi_scores(table, Thresholds(0.2, 0.2))
    assert scores.as_dict() == pytest.approx({canonical_pair(State(0, 1), State(1, 1)): 0.30})
    assert scores.accumulations == 1
    assert scores.one_sided == 1


def test_cfi_high_thresholds_are_empty(make_model):
    _, q0, q1 = _fixture(make_model, 5)
    table = induction.build_signal_error_table(q0, q1)
    scores = induction.cfi_scores(table, Thresholds(1.0, 1.0))
    assert len(scores) == 0
    assert scores.accumulations == 0


@pytest.mark.parametrize("seed", range(6))
def test_cfi_plus_mean_terms_equals_grafting(make_model, seed):
    model, q0, q1 = _fixture(make_model, seed)
    unary = init_unary_model(model.schema)
    table = induction.build_signal_error_table(q0, q1)
    cfi = induction.cfi_scores(table, Thresholds(0.0, 0.0))
    grafting = induction.grafting_scores(unary, q0, q1)
    for f, score in grafting.items():
        assert cfi.get(f) + induction.mean_correction(table, f) == pytest.approx(score, abs=1e-10)


def test_cfi_equals_grafting_when_error_sums_vanish(make_model):
    model, q0, _ = _fixture(make_model, 7, m=8)
    order = np.roll(np.arange(8), 3)
    q1 = _batch(model.schema, q0.probs[order])
    unary = init_unary_model(model.schema)
    table = induction.build_signal_error_table(q0, q1)
    assert np.allclose(table.err.sum(axis=0), 0.0, atol=1e-12)
    cfi = induction.cfi_scores(table, Thresholds(0.0, 0.0))
    for f, score in induction.grafting_scores(unary, q0, q1).items():
        assert induction.mean_correction(table, f) == pytest.approx(0.0, abs=1e-12)
        # E1 == E0 here, so the q0-mean form of the residual agrees too
        assert cfi.get(f) == pytest.approx(score, abs=1e-10)


def _brute_force_accumulations(table, th):
    variables = table.schema.slot_variable[table.slots]
    count = 0
    one_sided = 0
    for i in range(table.n_instances):
        sig = np.abs(table.signal[i]) > th.t_sig
        err = np.abs(table.err[i]) > th.t_err
        for a, b in itertools.product(range(len(table.slots)), repeat=2):
            if variables[a] != variables[b] and sig[a] and err[b]:
                count += 1
                if not (sig[b] and err[a]):
                    one_sided += 1
    return count, one_sided


@pytest.mark.parametrize("t", [0.0, 0.05, 0.1, 0.3])
def test_accumulation_counts_match_brute_force(make_model, t):
    model = make_model((2, 3, 2, 4, 2), seed=9, scale=2.0)
    rng = np.random.default_rng(9)
    data = Dataset(model.schema, tuple(
        Instance(tuple(int(rng.integers(c)) for c in model.schema.cardinalities),
                 tuple(bool(h) for h in rng.random(5) < 0.3))
        for _ in range(7)))
    q0 = mf_converge_batch(model, data)
    table = induction.build_signal_error_table(q0, cd_sweep_batch(model, q0))
    scores = induction.cfi_scores(table, Thresholds(t, t))
    assert (scores.accumulations, scores.one_sided) == _brute_force_accumulations(table, Thresholds(t, t))


def test_raising_thresholds_never_adds_work(make_model):
    _, q0, q1 = _fixture(make_model, 10, m=10)
    table = induction.build_signal_error_table(q0, q1)
    counts = [induction.cfi_scores(table, Thresholds(t, t)).accumulations
              for t in (0.0, 0.02, 0.05, 0.1, 0.2, 0.4)]
    assert counts == sorted(counts, reverse=True)
    err_only = [induction.cfi_scores(table, Thresholds(t, 0.0)).accumulations for t in (0.0, 0.1, 0.3)]
    assert err_only == sorted(err_only, reverse=True)


def test_score_map_drops_zeros_and_sorts():
    schema = VariableSchema((2, 2, 2))
    scores = induction.ScoreMap(schema, [3, 1, 1], [5, 5, 3], [0.5, 0.0, -0.2])
    assert len(scores) == 2
    assert [f for f, _ in scores.items()] == [canonical_pair(State(0, 1), State(1, 1)),
                                               canonical_pair(State(1, 1), State(2, 1))]
    assert canonical_pair(State(0, 1), State(2, 1)) not in scores


def test_select_top_gates_everything():
    schema = VariableSchema((2, 2, 2))
    scores = induction.ScoreMap(schema, [1, 1], [3, 5], [0.4, -0.3])
    assert induction.select_top(scores, 5, gate=0.5) == []


def test_select_top_takes_j():
    schema = VariableSchema((2,) * 16)
    space_pairs = list(itertools.combinations(range(16), 2))[:100]
    a = [2 * x + 1 for x, _ in space_pairs]
    b = [2 * y + 1 for _, y in space_pairs]
    scores = induction.ScoreMap(schema, a, b, np.linspace(3.0, 4.0, 100))
    picked = induction.select_top(scores, 50, gate=2.0)
    assert len(picked) == 50
    assert picked[0] == scores.feature(99)


def test_select_top_tie_prefers_lower_canonical_feature():
    schema = VariableSchema((2, 2, 2))
    scores = induction.ScoreMap(schema, [3, 1], [5, 5], [0.7, -0.7])
    picked = induction.select_top(scores, 1, gate=0.1)
    assert picked == [canonical_pair(State(0, 1), State(2, 1))]
    with pytest.raises(ValueError):
        induction.select_top(scores, 0, gate=0.1)


def test_higher_order_examples(make_batch):
    schema = VariableSchema((2, 2, 2))
    states = [State(0, 1), State(1, 1), State(2, 1)]
    q0 = make_batch(schema, [[0.5] * 6]).row(0)
    q1 = make_batch(schema, [[0.0, 1.0] * 3]).row(0)
    assert induction.higher_order_gradient(states, q0, q1) == pytest.approx(0.875)
    assert induction.higher_order_gradient(states, q0, q0) == 0.0
    with pytest.raises(FeatureError):
        induction.higher_order_gradient(states[:2], q0, q1)


def test_higher_order_forms_agree(make_batch, random_beliefs):
    schema = VariableSchema((2, 3, 2, 4))
    p0 = random_beliefs(schema, 50, seed=1)
    p1 = random_beliefs(schema, 50, seed=2)
    states = [State(0, 1), State(1, 2), State(2, 0), State(3, 3)]
    for i in range(50):
        direct, expanded = induction.higher_order_terms(
            states, make_batch(schema, p0[i:i + 1]).row(0), make_batch(schema, p1[i:i + 1]).row(0))
        assert abs(direct - expanded) <= 1e-14
