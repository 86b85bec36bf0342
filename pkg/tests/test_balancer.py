import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import sampler_p
from usmtl.balancer import BalancerConfig, TaskBalancer
from usmtl.heads import Family

FAM = {"a": Family.DETECTION, "b": Family.CLASSIFICATION, "c": Family.SEGMENTATION, "d": Family.REGRESSION}


def balancer(sizes=None, **cfg):
    sizes = sizes or {"a": 10, "b": 10, "c": 10, "d": 10}
    return TaskBalancer(sizes, {k: FAM.get(k, Family.DETECTION) for k in sizes}, BalancerConfig(**cfg), seed=3)


def test_defaults():
    cfg = BalancerConfig()
    assert (cfg.temperature, cfg.ema_beta, cfg.gamma, cfg.clamp_lo, cfg.clamp_hi, cfg.ema_init) == \
        (0.7, 0.98, 0.5, 0.25, 4.0, 1.0)


def test_ema_examples():
    bal = balancer()
    bal.update_ema("a", 1.0)
    assert bal.ema[0] == 1.0
    bal.update_ema("b", 2.0)
    assert abs(bal.ema[1] - 1.02) < 1e-15


@pytest.mark.parametrize("L", [0.0, 0.3, 2.5])
def test_ema_geometric_series(L):
    bal = balancer()
    for _ in range(1000):
        bal.update_ema("c", L)
    expected = max(L, 1e-8) + (1.0 - max(L, 1e-8)) * 0.98**1000
    assert abs(bal.ema[2] - expected) < 1e-12
    assert bal.ema[2] > 0


def test_ema_errors():
    bal = balancer()
    with pytest.raises(KeyError, match="zz"):
        bal.update_ema("zz", 1.0)
    for bad in (-1.0, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            bal.update_ema("a", bad)


def test_uniform_when_symmetric():
    np.testing.assert_allclose(balancer().probabilities(), 0.25, atol=1e-15)


def test_infinite_temperature_uniform():
    bal = balancer({"a": 1, "b": 50, "c": 7, "d": 300}, temperature=math.inf)
    bal.ema[:] = [0.1, 3.0, 9.0, 1.0]
    np.testing.assert_allclose(bal.probabilities(), 0.25, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=2, max_size=6), st.data(), st.floats(0.2, 5.0))
def test_probabilities_match_oracle(sizes, data, tau):
    ema = data.draw(st.lists(st.floats(1e-3, 20.0), min_size=len(sizes), max_size=len(sizes)))
    ids = [f"t{i}" for i in range(len(sizes))]
    bal = TaskBalancer(dict(zip(ids, sizes)), config=BalancerConfig(temperature=tau))
    bal.ema[:] = ema
    freq = [s / sum(sizes) for s in sizes]
    p = bal.probabilities()
    np.testing.assert_allclose(p, sampler_p(freq, ema, tau), rtol=1e-9, atol=1e-300)
    assert abs(p.sum() - 1) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-2, 10.0), min_size=3, max_size=3), st.floats(1e-3, 1e3), st.integers(1, 50))
def test_scale_invariance(ema, c, k):
    a = TaskBalancer({"x": 2, "y": 5, "z": 9})
    b = TaskBalancer({"x": 2 * k, "y": 5 * k, "z": 9 * k})
    a.ema[:] = ema
    b.ema[:] = np.array(ema) * c
    np.testing.assert_allclose(a.probabilities(), b.probabilities(), rtol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1e-2, 10.0), min_size=4, max_size=4), st.integers(0, 3), st.floats(1.01, 5.0))
def test_monotone_in_own_ema(ema, k, factor):
    bal = balancer({"a": 3, "b": 8, "c": 1, "d": 4})
    bal.ema[:] = ema
    before = bal.probabilities()[k]
    bal.ema[k] *= factor
    assert bal.probabilities()[k] > before


def test_ordering_invariance():
    a = TaskBalancer({"x": 2, "y": 5, "z": 9})
    b = TaskBalancer({"z": 9, "x": 2, "y": 5})
    a.ema[:] = [0.5, 1.5, 3.0]
    b.ema[:] = [3.0, 0.5, 1.5]
    pa, pb = a.probability_map(), b.probability_map()
    for t in pa:
        assert abs(pa[t] - pb[t]) < 1e-15


def test_draw_frequencies():
    bal = TaskBalancer({"a": 100, "b": 300, "c": 50, "d": 550}, seed=11)
    bal.ema[:] = [2.0, 0.5, 1.0, 0.8]
    p = bal.probabilities()
    draws = [bal.sample_task() for _ in range(100_000)]
    for i, t in enumerate(bal.task_ids):
        assert abs(draws.count(t) / len(draws) - p[i]) < 0.02


def test_seeded_determinism():
    def seq(seed):
        bal = TaskBalancer({"a": 5, "b": 9, "c": 2}, seed=seed)
        out = []
        for i in range(200):
            t = bal.sample_task()
            out.append(t)
            bal.update_ema(t, 0.1 * (i % 7))
        return out, bal.ema.tobytes()

    assert seq(4) == seq(4)
    assert seq(4)[0] != seq(5)[0]


# ------------------------------------------------------------- dynamic weight


def test_dynamic_weight_examples():
    bal = balancer()
    assert bal.dynamic_weight("a") == 1.0
    bal = TaskBalancer({"a": 1, "b": 1}, {"a": Family.DETECTION, "b": Family.CLASSIFICATION})
    bal.ema[:] = [1.0, 7.0]  # mean 4, ratio 0.25
    assert abs(bal.dynamic_weight("a") - 0.5) < 1e-15
    sizes = {f"t{i}": 1 for i in range(200)}
    bal = TaskBalancer(sizes, {t: Family.CLASSIFICATION for t in sizes})
    bal.ema[:] = 1.0
    bal.ema[0] = 199.0  # mean 1.99, ratio 100 -> 10 -> clamped
    assert bal.dynamic_weight("t0") == 4.0


def test_dynamic_weight_lower_clamp():
    bal = TaskBalancer({"a": 1, "b": 1}, {"a": Family.DETECTION, "b": Family.DETECTION})
    bal.ema[:] = [1e-6, 10.0]
    assert bal.dynamic_weight("a") == 0.25


@pytest.mark.parametrize("task", ["c", "d"])
def test_dynamic_weight_rejects_raw_families(task):
    with pytest.raises(ValueError):
        balancer().dynamic_weight(task)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=2, max_size=6))
def test_dynamic_weight_in_bounds(ema):
    ids = [f"t{i}" for i in range(len(ema))]
    bal = TaskBalancer(dict.fromkeys(ids, 1))
    bal.ema[:] = ema
    for t in ids:
        w = bal.dynamic_weight(t)
        assert 0.25 <= w <= 4.0
        rel = bal.ema[bal.task_ids.index(t)] / bal.ema.mean()
        assert abs(w - min(4.0, max(0.25, math.sqrt(rel)))) < 1e-12


def test_constructor_errors():
    with pytest.raises(ValueError):
        TaskBalancer({})
    with pytest.raises(ValueError):
        TaskBalancer({"a": 0})
