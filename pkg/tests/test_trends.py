"""Desk-scale trend checks on synthetic networks. Minutes each; run with CRF_CFI_SLOW=1."""
import time

import numpy as np
import pytest

from backend.datagen import SyntheticSpec, gibbs_chain, sample_structure
from backend.evalx import cross_validate, histogram, make_splits
from backend.induction import Thresholds, build_signal_error_table
from backend.mean_field import cd_sweep_batch, mf_converge_batch
from backend.trainer import TrainConfig, TrainMode, train

pytestmark = pytest.mark.slow

SETTINGS = dict(l1=2.0, batch_size=50, max_iterations=200)


def _network(nodes, seed=3):
    spec = SyntheticSpec(nodes, degree=5.0, samples=200, burn_in=200, thinning=10, seed=seed)
    return gibbs_chain(sample_structure(spec).model, spec)


@pytest.fixture(scope="module")
def data_200():
    return _network(200)


def test_training_time_falls_as_thresholds_rise(data_200):
    times = []
    for t in (0.0, 0.2, 0.4, 0.6):
        start = time.perf_counter()
        train(data_200, TrainConfig(mode=TrainMode.CFI, thresholds=Thresholds(t, t), **SETTINGS))
        times.append(time.perf_counter() - start)
    for slower, faster in zip(times, times[1:]):
        assert faster <= 1.1 * slower


def test_contrastive_scoring_skips_most_accumulations(data_200):
    _, grafting = train(data_200, TrainConfig(mode=TrainMode.GRAFTING, **SETTINGS))
    _, cfi = train(data_200, TrainConfig(mode=TrainMode.CFI, thresholds=Thresholds(0.2, 0.2),
                                         **SETTINGS))
    assert cfi.scored_pairs < 0.5 * grafting.scored_pairs


@pytest.mark.parametrize("nodes", [50, 100, 200])
def test_method_ordering_by_time_and_error(nodes):
    data = _network(nodes)
    splits = make_splits(data, 3, 1.0 / 3)
    times, errors = {}, {}
    for mode in (TrainMode.FULL, TrainMode.GRAFTING, TrainMode.CFI):
        cfg = TrainConfig(mode=mode, **SETTINGS)
        results = cross_validate(data, lambda masked: train(masked, cfg), splits)
        times[mode] = sum(r.wall_time_seconds for _, _, r in results)
        errors[mode] = np.mean([r.error_rate for _, _, r in results])
    assert times[TrainMode.FULL] > times[TrainMode.GRAFTING] > times[TrainMode.CFI]
    assert errors[TrainMode.CFI] <= errors[TrainMode.GRAFTING] + 0.02


def test_errors_concentrate_near_zero_after_training(data_200):
    model, _ = train(data_200, TrainConfig(mode=TrainMode.CFI, **SETTINGS))
    q0 = mf_converge_batch(model, data_200)
    table = build_signal_error_table(q0, cd_sweep_batch(model, q0), model.policy)
    bins = histogram(table.err.ravel(), 0.1)
    near = sum(count for lo, hi, count in bins if -0.1 - 1e-9 <= lo and hi <= 0.1 + 1e-9)
    assert near >= 0.6 * table.err.size
