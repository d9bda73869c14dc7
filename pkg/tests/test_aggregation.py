import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedchain.aggregation import AggregationConfig, fed_avg, importance_from_sample_counts
from fedchain.errors import ConfigError, EmptyInput, ShapeError
from fedchain.model import ModelWeights, init_model

from conftest import random_model


def scalar(v):
    return ModelWeights.from_arrays([(np.array([[float(v)]]), np.array([0.0]))])


def test_importance_examples():
    assert importance_from_sample_counts([100] * 5) == [0.2] * 5
    assert importance_from_sample_counts([10, 100, 100, 100, 100]) == [10 / 410] + [100 / 410] * 4
    assert importance_from_sample_counts([7]) == [1.0]
    with pytest.raises(EmptyInput):
        importance_from_sample_counts([])
    with pytest.raises(ConfigError):
        importance_from_sample_counts([3, 0])


def test_config_validation():
    with pytest.raises(ConfigError):
        AggregationConfig([0.5, 0.6])
    with pytest.raises(ConfigError):
        AggregationConfig([1.5, -0.5])
    assert AggregationConfig.uniform(4).importance == [0.25] * 4


def test_zero_deltas_return_global():
    g = init_model([4, 3, 2], 0)
    out = fed_avg(g, [g.copy() for _ in range(3)], AggregationConfig.uniform(3))
    assert out.bit_equal(g)


def test_single_client_takes_over():
    g, c = init_model([4, 3], 0), init_model([4, 3], 1)
    assert fed_avg(g, [c], AggregationConfig([1.0])).bit_equal(c)


def test_symmetric_deltas_cancel():
    out = fed_avg(scalar(1.0), [scalar(0.0), scalar(2.0)], AggregationConfig([0.5, 0.5]))
    assert out.layers[0].weight[0, 0] == 1.0


def test_server_rate_scales_step():
    out = fed_avg(scalar(1.0), [scalar(3.0)], AggregationConfig([1.0], server_rate=0.5))
    assert out.layers[0].weight[0, 0] == 2.0


def test_inputs_unmodified_and_errors():
    g = init_model([4, 3], 0)
    clients = [init_model([4, 3], s) for s in (1, 2)]
    snapshot = [c.copy() for c in clients]
    fed_avg(g, clients, AggregationConfig.uniform(2))
    assert all(a.bit_equal(b) for a, b in zip(clients, snapshot))
    with pytest.raises(ConfigError):
        fed_avg(g, clients, AggregationConfig.uniform(3))
    with pytest.raises(ShapeError):
        fed_avg(g, [init_model([4, 2], 0)], AggregationConfig([1.0]))


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6))
def test_consensus_is_bit_exact(seed, k):
    rng = np.random.default_rng(seed)
    g, w = random_model(rng, [5, 4, 3]), random_model(rng, [5, 4, 3])
    cfg = AggregationConfig(list(rng.dirichlet(np.ones(k))))
    assert fed_avg(g, [w.copy() for _ in range(k)], cfg).bit_equal(w)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 7))
def test_uniform_equals_brute_force_mean(seed, k):
    rng = np.random.default_rng(seed)
    g = random_model(rng, [6, 5, 2])
    clients = [random_model(rng, [6, 5, 2]) for _ in range(k)]
    out = fed_avg(g, clients, AggregationConfig.uniform(k))
    for i, layer in enumerate(out.layers):
        for attr in ("weight", "bias"):
            got = getattr(layer, attr)
            for idx in np.ndindex(got.shape):
                mean = sum(getattr(c.layers[i], attr)[idx] for c in clients) / k
                assert abs(got[idx] - mean) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    g = random_model(rng, [3, 4, 2])
    clients = [random_model(rng, [3, 4, 2]) for _ in range(4)]
    p = [0.1, 0.2, 0.3, 0.4]
    order = rng.permutation(4)
    a = fed_avg(g, clients, AggregationConfig(p, 0.7))
    b = fed_avg(g, [clients[i] for i in order], AggregationConfig([p[i] for i in order], 0.7))
    assert np.allclose(a.flatten(), b.flatten(), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(-5, 5))
def test_linearity_in_one_client(g, w1, w2, c):
    p = [0.3, 0.7]
    base = fed_avg(scalar(g), [scalar(w1), scalar(w2)], AggregationConfig(p)).layers[0].weight[0, 0]
    moved = fed_avg(scalar(g), [scalar(g + c * (w1 - g)), scalar(w2)], AggregationConfig(p)).layers[0].weight[0, 0]
    # the output delta from client 1 scales with c * p_1
    expected = base + p[0] * (c - 1) * (w1 - g)
    assert moved == pytest.approx(expected, abs=1e-9)
