import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cass import numkernel as nk
from cass.optim import Optimizer, SwaState, adam_step, cosine_anneal, sgd_step, swa_update


class TestCosineAnneal:
    def test_endpoints_exact(self):
        assert cosine_anneal(1e-3, 1e-6, 0, 16) == 1e-3
        assert cosine_anneal(1e-3, 1e-6, 16, 16) == 1e-6

    def test_midpoint(self):
        assert cosine_anneal(1e-3, 1e-6, 8, 16) == pytest.approx(1e-6 + 0.5 * (1e-3 - 1e-6), rel=1e-12)

    def test_warm_period_climbs_back(self):
        values = [cosine_anneal(1e-3, 1e-6, t, 16) for t in range(33)]
        assert values[32] == pytest.approx(1e-3, rel=1e-12)
        assert all(values[t] >= values[t + 1] for t in range(16))
        assert all(values[t] <= values[t + 1] for t in range(16, 32))

    @settings(max_examples=100)
    @given(st.integers(0, 500), st.integers(1, 40))
    def test_bounded(self, t, t_max):
        lr = cosine_anneal(1e-3, 1e-6, t, t_max)
        assert 1e-6 - 1e-18 <= lr <= 1e-3 + 1e-18

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            cosine_anneal(1e-3, 1e-6, -1, 16)
        with pytest.raises(ValueError):
            cosine_anneal(1e-3, 1e-6, 0, 0)


class TestAdam:
    def test_single_scalar_step_matches_closed_form(self):
        out = adam_step({"w": np.array(0.0)}, {"w": np.array(1.0)}, {}, lr=0.1)
        # m_hat = v_hat = 1 after bias correction, so the move is lr / (1 + eps)
        assert abs(float(out["w"]) - (-0.1 / (1.0 + 1e-8))) < 1e-12

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        grads = rng.standard_normal(5)
        state, p = {}, {"w": np.array(0.3)}
        m = v = 0.0
        w = 0.3
        for t, g in enumerate(grads, start=1):
            p = adam_step(p, {"w": np.array(g)}, state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert abs(float(p["w"]) - w) < 1e-15

    def test_name_mismatch(self):
        with pytest.raises(KeyError, match="name-set mismatch"):
            adam_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, {}, 0.1)


class TestSgd:
    def test_plain_step(self):
        out = sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}, lr=0.1, momentum=0.0)
        np.testing.assert_array_equal(out["w"], np.array([1.0, 2.0]) - 0.1 * np.array([0.5, -1.0]))

    def test_momentum_accumulates(self):
        state = {}
        p = {"w": np.array(0.0)}
        p = sgd_step(p, {"w": np.array(1.0)}, 0.1, 0.9, state)
        p = sgd_step(p, {"w": np.array(1.0)}, 0.1, 0.9, state)
        assert float(p["w"]) == pytest.approx(-0.1 - 0.1 * 1.9, abs=1e-15)


class TestSwa:
    def test_three_snapshots(self):
        state = SwaState()
        for v in (1.0, 2.0, 3.0):
            swa_update(state, {"w": np.array(v)})
        assert state.snapshot_count == 3
        assert abs(float(state.averaged["w"]) - 2.0) < 1e-15

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 3)), elements=st.floats(-100, 100)))
    def test_matches_arithmetic_mean(self, snaps):
        state = SwaState()
        for row in snaps:
            swa_update(state, {"w": row})
        assert np.max(np.abs(state.averaged["w"] - snaps.mean(axis=0))) < 1e-12

    def test_mismatched_names(self):
        state = swa_update(SwaState(), {"a": np.zeros(2)})
        with pytest.raises(KeyError):
            swa_update(state, {"b": np.zeros(2)})


def test_optimizer_updates_in_place_and_clears_grads():
    w = nk.parameter(np.array([1.0, -1.0], dtype=np.float32))
    w.grad = np.array([1.0, 1.0], dtype=np.float32)
    opt = Optimizer({"w": w}, "sgd", momentum=0.0)
    opt.step(0.5)
    np.testing.assert_array_equal(w.data, [0.5, -1.5])
    assert w.grad is None and w.data.dtype == np.float32


def test_optimizer_rejects_unknown_kind():
    with pytest.raises(ValueError):
        Optimizer({}, "rmsprop")
