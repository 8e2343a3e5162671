from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedistill.ntk import (InstabilityError, KernelRegimeSystem, cd_closed_form, cd_iterate, cd_limit,
                           cd_update, gradient_flow_oracle, kd_error, kd_fixed_point, peer_sum,
                           residual_curve, rounds_to_tolerance, warm_start_system)


def toy(**kw):
    base = dict(y=[1.0], a=1.0, lam=1.0, C=2, teacher_pred=[0.0], initial_outputs=[[0.0], [2.0]])
    base.update(kw)
    return KernelRegimeSystem(**base)


class TestKd:
    def test_fixed_point_value(self):
        assert kd_fixed_point(toy()).tolist() == [0.5]

    def test_small_lambda_returns_labels(self):
        sys = toy(lam=1e-12, teacher_pred=[7.0])
        assert kd_fixed_point(sys) == pytest.approx([1.0], abs=1e-10)

    def test_ideal_teacher(self):
        assert kd_fixed_point(toy(teacher_pred=[1.0])).tolist() == [1.0]
        assert kd_error(toy(teacher_pred=[1.0])) == 0.0

    def test_error_value(self):
        assert kd_error(toy()) == 0.5

    def test_error_factor_grows_with_lambda(self):
        assert kd_error(toy(lam=2.0)) == pytest.approx(2 / 3, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_error_equals_fixed_point_gap(self, seed):
        rng = np.random.default_rng(seed)
        sys = KernelRegimeSystem(rng.standard_normal(6), rng.uniform(0.1, 10), rng.uniform(0.1, 10),
                                 teacher_pred=rng.standard_normal(6))
        assert kd_error(sys) == pytest.approx(np.linalg.norm(kd_fixed_point(sys) - sys.y), abs=1e-12)

    def test_teacher_required(self):
        with pytest.raises(ValueError):
            kd_fixed_point(toy(teacher_pred=None))


class TestOracle:
    def test_converges_to_half(self):
        assert gradient_flow_oracle(toy(), 1e-3, 100_000) == pytest.approx([0.5], abs=1e-6)

    def test_stays_at_fixed_point(self):
        sys = toy()
        start = kd_fixed_point(sys)
        assert gradient_flow_oracle(sys, 1e-2, 100, start=start) == pytest.approx(start, abs=1e-15)

    def test_step_robust(self):
        a = gradient_flow_oracle(toy(), 1e-3, 100_000)
        b = gradient_flow_oracle(toy(), 5e-4, 200_000)
        assert abs(a[0] - b[0]) <= 1e-6

    def test_limit_independent_of_kernel(self):
        rng = np.random.default_rng(0)
        B = rng.standard_normal((4, 4))
        H = B @ B.T + 4 * np.eye(4)
        sys = KernelRegimeSystem(rng.standard_normal(4), 1.0, 2.0, teacher_pred=rng.standard_normal(4))
        step = 0.5 / (np.linalg.eigvalsh(H).max() * 3)
        assert gradient_flow_oracle(sys, step, 20_000, kernel=H) == pytest.approx(kd_fixed_point(sys), abs=1e-9)

    def test_divergence_detected(self):
        with pytest.raises(InstabilityError, match="smaller step"):
            gradient_flow_oracle(toy(), 5.0, 10_000)


class TestCd:
    def test_labels_are_fixed(self):
        sys = toy()
        assert cd_update(sys, [[1.0], [1.0]]).tolist() == [[1.0], [1.0]]

    def test_hand_iteration(self):
        assert cd_update(toy(), [[0.0], [2.0]]).tolist() == [[1.5], [0.5]]

    def test_closed_form_examples(self):
        sys = toy()
        assert cd_closed_form(sys, 0).tolist() == [2.0]
        assert cd_closed_form(sys, 1) == pytest.approx([0.5], abs=1e-15)
        assert cd_closed_form(sys, 200) == pytest.approx(sys.lam * sys.y, abs=1e-15)

    def test_negative_round(self):
        with pytest.raises(ValueError):
            cd_closed_form(toy(), -1)

    def test_needs_two_workers(self):
        with pytest.raises(ValueError):
            toy(C=1, initial_outputs=None)

    def test_limit_is_labels(self):
        assert cd_limit(toy()).tolist() == [1.0]

    def test_hundred_rounds_reach_labels(self):
        traj = cd_iterate(toy(), 100)
        assert abs(traj[-1][0][0] - 1.0) <= 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2, 3, 7]))
    def test_mean_moves_toward_labels(self, seed, C):
        rng = np.random.default_rng(seed)
        sys = KernelRegimeSystem(rng.standard_normal(5), rng.uniform(0.1, 10), rng.uniform(0.1, 10), C,
                                 initial_outputs=rng.standard_normal((C, 5)))
        traj = cd_iterate(sys, 10)
        gaps = [np.linalg.norm(f.mean(axis=0) - sys.y) for f in traj]
        assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2, 5, 100]))
    def test_closed_form_matches_recurrence(self, seed, C):
        rng = np.random.default_rng(seed)
        sys = KernelRegimeSystem(rng.standard_normal(3), rng.uniform(0.1, 10), rng.uniform(0.1, 10), C,
                                 initial_outputs=rng.standard_normal((C, 3)))
        traj = cd_iterate(sys, 50)
        for r in range(51):
            v = peer_sum(sys, traj[r])
            assert np.allclose(cd_closed_form(sys, r), v, rtol=1e-9, atol=1e-12)

    def test_rate_bound(self):
        sys = warm_start_system(np.arange(20) % 3, 2, 1.0, 1.0, 1.0, seed=4)
        curve = residual_curve(sys, 30).max(axis=1)
        rate = max(sys.self_factor, abs(sys.cross_factor))
        assert np.all(curve[1:] <= curve[0] * rate ** np.arange(1, 31) * (1 + 1e-9) * 2)

    def test_cross_factor_decreases_in_workers(self):
        mags = [abs(Fraction(1) / ((C - 1) * (1 + 1))) for C in (2, 3, 5, 100)]
        assert all(b < a for a, b in zip(mags, mags[1:]))
        assert abs(toy(C=5, initial_outputs=None).cross_factor) < abs(toy(initial_outputs=None).cross_factor)

    def test_rounds_to_tolerance(self):
        sys = warm_start_system(np.zeros(5), 2, 1.0, 1.0, 0.5, seed=0)
        r = rounds_to_tolerance(sys, 1e-3)
        traj = cd_iterate(sys, r)
        assert np.max(np.abs(traj[r] - sys.y)) <= 1e-3
        assert np.max(np.abs(traj[r - 1] - sys.y)) > 1e-3


def test_shape_checks():
    with pytest.raises(ValueError):
        KernelRegimeSystem([1.0, 2.0], teacher_pred=[1.0])
    with pytest.raises(ValueError):
        KernelRegimeSystem([1.0], C=3, initial_outputs=[[0.0], [1.0]])
    with pytest.raises(ValueError):
        KernelRegimeSystem([1.0], a=0.0)
