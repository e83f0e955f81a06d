import math

import numpy as np
import pytest

from backend import mean_field as mf
from backend.model import (CandidateSpace, Dataset, Feature, Instance, Model, State,
                           VariableSchema, activate_features, canonical_pair, init_unary_model)
from backend.oracle import exact_conditional, exact_marginals


def sigmoid(w):
    return math.exp(w) / (1 + math.exp(w))


def pair_model(w, unary=(0.0, 0.0)):
    schema = VariableSchema((2, 2))
    features = (Feature((State(0, 1),)), Feature((State(1, 1),)), canonical_pair(State(0, 1), State(1, 1)))
    return Model(schema, features, np.array([unary[0], unary[1], w]))


def test_update_variable_zero_weights_is_uniform():
    model = init_unary_model(VariableSchema((3, 2)))
    q = mf.mf_converge(model, Instance((2, 1), (True, False)))
    assert mf.update_variable(model, q, 0) == pytest.approx([1 / 3] * 3)


@pytest.mark.parametrize("w", [0.0, 1.3, -4.0, 50.0])
def test_update_variable_isolated_unary(w):
    model = init_unary_model(VariableSchema((2,))).with_weights([w])
    q = mf.mf_converge(model, Instance((0,), (True,)))
    assert mf.update_variable(model, q, 0)[1] == pytest.approx(sigmoid(w))


def test_update_variable_clamped_neighbour():
    model = pair_model(1.7)
    q = mf.mf_converge(model, Instance((1, 0), (False, True)))
    assert mf.update_variable(model, q, 1)[1] == pytest.approx(sigmoid(1.7))


def test_no_hidden_variables_gives_point_mass():
    model = pair_model(2.0, (0.5, -1.0))
    q = mf.mf_converge(model, Instance.observed([1, 0]))
    assert q.probs.tolist() == [0.0, 1.0, 1.0, 0.0]
    assert q.clamped.all()


def test_single_hidden_zero_weights():
    model = init_unary_model(VariableSchema((2, 2)))
    q = mf.mf_converge(model, Instance((1, 0), (False, True)))
    assert q.vector(1) == pytest.approx([0.5, 0.5])


def test_two_variable_chain_closed_form():
    model = pair_model(5.0)
    q = mf.mf_converge(model, Instance((1, 0), (False, True)))
    assert q.prob(State(1, 1)) == pytest.approx(math.exp(5) / (1 + math.exp(5)), abs=1e-12)
    assert q.prob(State(1, 1)) == pytest.approx(0.9933, abs=1e-4)


def test_cd_sweep_zero_weights_is_uniform():
    model = init_unary_model(VariableSchema((2, 3)))
    inst = Instance.observed([1, 2])
    q1 = mf.cd_sweep(model, inst, mf.mf_converge(model, inst))
    assert q1.probs == pytest.approx([0.5, 0.5, 1 / 3, 1 / 3, 1 / 3])
    assert not q1.clamped.any()


def test_cd_sweep_isolated_observed_variable():
    model = init_unary_model(VariableSchema((2,))).with_weights([0.8])
    inst = Instance.observed([1])
    q1 = mf.cd_sweep(model, inst, mf.mf_converge(model, inst))
    assert q1.prob(State(0, 1)) == pytest.approx(sigmoid(0.8))


def test_expect_feature_examples(make_batch):
    schema = VariableSchema((2, 2))
    q = make_batch(schema, [[0.7, 0.3, 0.75, 0.25]]).row(0)
    assert mf.expect_feature(Feature((State(0, 1),)), q) == pytest.approx(0.3)
    assert mf.expect_feature(canonical_pair(State(0, 0), State(1, 1)), q) == pytest.approx(0.175)
    q = make_batch(schema, [[0.2, 0.8, 0.75, 0.25]]).row(0)
    assert mf.expect_feature(canonical_pair(State(0, 1), State(1, 0)), q) == pytest.approx(0.6)
    point = make_batch(schema, [[0.0, 1.0, 1.0, 0.0]]).row(0)
    assert mf.expect_feature(canonical_pair(State(0, 1), State(1, 0)), point) == 1.0


def test_expect_feature_quarter_times_point_eight(make_batch):
    q = make_batch(VariableSchema((2, 2)), [[0.75, 0.25, 0.2, 0.8]]).row(0)
    assert mf.expect_feature(canonical_pair(State(0, 1), State(1, 1)), q) == pytest.approx(0.2)


def test_entropy_examples(make_batch):
    schema = VariableSchema((2, 2, 2))
    uniform = make_batch(schema, [[0.5] * 6]).row(0)
    assert mf.entropy(uniform) == pytest.approx(3 * math.log(2))
    clamped = make_batch(schema, [[0, 1, 1, 0, 0, 1]], clamped=[[True] * 3]).row(0)
    assert mf.entropy(clamped) == 0.0
    single = make_batch(VariableSchema((2,)), [[0.9, 0.1]]).row(0)
    assert mf.entropy(single) == pytest.approx(0.3251, abs=1e-4)


def test_free_energy_examples(make_batch):
    schema = VariableSchema((2, 2, 2))
    zero = init_unary_model(schema)
    assert mf.free_energy(zero, make_batch(schema, [[0.5] * 6]).row(0)) == pytest.approx(-3 * math.log(2))
    model = pair_model(2.0, (0.5, -1.0))
    point = mf.mf_converge(model, Instance.observed([1, 1]))
    assert mf.free_energy(model, point) == pytest.approx(-(0.5 - 1.0 + 2.0))


def test_batch_rows_are_normalized_and_clamped(make_model):
    model = make_model((2, 3, 2, 4), seed=1, scale=2.0)
    rng = np.random.default_rng(0)
    values = [tuple(int(rng.integers(c)) for c in model.schema.cardinalities) for _ in range(20)]
    hidden = rng.random((20, 4)) < 0.5
    data = Dataset(model.schema, tuple(Instance(v, tuple(h)) for v, h in zip(values, hidden)))
    q = mf.mf_converge_batch(model, data)
    offsets = model.schema.offsets
    for k in range(4):
        sums = q.probs[:, offsets[k]:offsets[k + 1]].sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-9)
        rows = np.flatnonzero(~hidden[:, k])
        assert np.all(q.probs[rows, offsets[k] + data.values[rows, k]] == 1.0)


def test_fixed_point_after_convergence(make_model):
    model = make_model((2,) * 6, seed=3, scale=1.5)
    inst = Instance((0, 1, 0, 1, 1, 0), (True, False, True, True, False, True))
    q = mf.mf_converge(model, inst, max_sweeps=500, tol=1e-10)
    assert q.converged
    for k in inst.hidden_vars:
        assert np.max(np.abs(mf.update_variable(model, q, k) - q.vector(k))) < 1e-8


def test_batched_inference_equals_per_instance(make_model):
    model = make_model((2, 2, 3, 2, 2), seed=5, scale=2.0)
    rng = np.random.default_rng(1)
    instances = tuple(
        Instance(tuple(int(rng.integers(c)) for c in model.schema.cardinalities),
                 tuple(bool(h) for h in rng.random(5) < 0.6))
        for _ in range(150))
    data = Dataset(model.schema, instances)
    q0 = mf.mf_converge_batch(model, data)
    q1 = mf.cd_sweep_batch(model, q0)
    for i in (0, 127, 128, 149):
        single = mf.mf_converge(model, instances[i])
        assert np.allclose(q0.probs[i], single.probs, atol=1e-12)
        assert np.allclose(q1.probs[i], mf.cd_sweep(model, instances[i], single).probs, atol=1e-12)


def test_thread_count_does_not_change_results(make_model):
    model = make_model((2,) * 6, seed=8, scale=2.0)
    rng = np.random.default_rng(2)
    data = Dataset(model.schema, tuple(
        Instance(tuple(int(v) for v in rng.integers(0, 2, 6)), tuple(bool(h) for h in rng.random(6) < 0.5))
        for _ in range(200)))
    one = mf.mf_converge_batch(model, data, threads=1)
    four = mf.mf_converge_batch(model, data, threads=4)
    assert np.array_equal(one.probs, four.probs)
    assert np.array_equal(mf.cd_sweep_batch(model, one, threads=1).probs,
                          mf.cd_sweep_batch(model, four, threads=4).probs)


def test_non_convergence_is_flagged(make_model, caplog):
    model = make_model((2,) * 5, seed=2, scale=3.0, density=1.0)
    data = Dataset(model.schema, (Instance((0,) * 5, (True,) * 5),))
    q = mf.mf_converge_batch(model, data, max_sweeps=1, tol=1e-300)
    assert q.n_unconverged == 1
    assert "did not converge" in caplog.text


def _sweeps(model, q, order_hidden):
    """Apply single coordinate updates, yielding free energies after each full sweep."""
    pot = mf.Potentials(model)
    probs = q.probs.copy()
    offsets = model.schema.offsets
    energies = [mf.free_energy(model, mf.Marginals(model.schema, probs.copy(), q.clamped))]
    for _ in range(5):
        for k in order_hidden:
            probs[offsets[k]:offsets[k + 1]] = mf.update_variable(
                model, mf.Marginals(model.schema, probs, q.clamped), k, pot)
        energies.append(mf.free_energy(model, mf.Marginals(model.schema, probs.copy(), q.clamped)))
    return energies


@pytest.mark.parametrize("seed", range(200))
def test_free_energy_never_increases(make_model, seed):
    rng = np.random.default_rng(seed)
    cards = tuple(int(c) for c in rng.integers(2, 4, 5))
    model = make_model(cards, seed=seed, scale=3.0)
    values = tuple(int(rng.integers(c)) for c in cards)
    hidden = tuple(bool(h) for h in rng.random(5) < 0.6)
    inst = Instance(values, hidden)
    start = mf.Marginals(model.schema, mf.initial_probs(model.schema, np.array([values]),
                                                       np.array([hidden]))[0],
                         ~np.array(hidden))
    energies = _sweeps(model, start, [k for k in range(5) if hidden[k]])
    assert all(b <= a + 1e-9 for a, b in zip(energies, energies[1:]))
    q0 = mf.mf_converge(model, inst)
    q1 = mf.cd_sweep(model, inst, q0)
    assert mf.free_energy(model, q1) <= mf.free_energy(model, q0) + 1e-9


def test_isolated_variable_matches_exact_conditional():
    schema = VariableSchema((2, 3, 2))
    features = (Feature((State(0, 1),)), Feature((State(1, 1),)), Feature((State(1, 2),)),
                Feature((State(2, 1),)), canonical_pair(State(0, 1), State(2, 1)))
    model = Model(schema, features, np.array([0.3, -1.2, 0.7, 0.4, 1.1]))
    inst = Instance((1, 0, 0), (False, True, True))
    q = mf.mf_converge(model, inst, tol=1e-12, max_sweeps=500)
    exact = exact_marginals(exact_conditional(model, inst))
    assert np.allclose(q.vector(1), exact[1], atol=1e-8)


def test_potentials_only_hold_features_of_each_variable():
    unary = mf.Potentials(init_unary_model(VariableSchema((2, 3, 2))))
    assert unary.n_couplings == 0
    assert all(n.size == 0 for n in unary.neighbours)
    pot = mf.Potentials(pair_model(0.7))
    assert pot.n_couplings == 2
    assert pot.neighbours[0].tolist() == [3]
    assert pot.neighbours[1].tolist() == [1]
    schema = VariableSchema((2,) * 6)
    full = activate_features(init_unary_model(schema), CandidateSpace(schema).pairwise())
    assert all(n.size == 5 for n in mf.Potentials(full).neighbours)


def test_fields_match_dense_coupling(make_model, random_beliefs):
    model = make_model((2, 3, 2, 4), seed=5, scale=2.0, density=0.7)
    pot = mf.Potentials(model)
    dense = pot.coupling.toarray()
    probs = random_beliefs(model.schema, 6, seed=5)
    rows = np.array([1, 4])
    offsets = model.schema.offsets
    for k in range(model.schema.n_vars):
        lo, hi = offsets[k], offsets[k + 1]
        expected = probs @ dense[:, lo:hi] + pot.unary[lo:hi]
        assert np.allclose(pot.fields(probs, k), expected, atol=1e-12)
        assert np.allclose(pot.fields(probs, k, rows), expected[rows], atol=1e-12)


def test_large_weights_do_not_overflow():
    model = pair_model(60.0, unary=(50.0, -50.0))
    q = mf.mf_converge(model, Instance((0, 0), (True, True)))
    assert np.all(np.isfinite(q.probs))
    assert q.vector(0).sum() == pytest.approx(1.0)
    assert q.vector(1).sum() == pytest.approx(1.0)
