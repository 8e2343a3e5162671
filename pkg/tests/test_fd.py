import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedistill.data import LabeledDataset, ShardPlan, shard, synth_classification, train_test_split
from fedistill.fd import (LogitTable, TrainConfig, accuracy, global_ensemble, local_sgd, local_train_phase,
                          payload_bytes, run_fd, run_fl)
from fedistill.nn import CROSS_ENTROPY, MSE, AggregationError, Mlp, backward, forward
from fedistill.channel import preset


def table_from(values):
    values = np.asarray(values, dtype=np.float64)
    t = LogitTable(values.shape[0], values.shape[1])
    t.add(np.arange(values.shape[0]), values)
    return t


@pytest.fixture(scope="module")
def task():
    full = synth_classification(10, 50, 8, seed=0)
    train, test = train_test_split(full, 0.2, seed=0)
    return shard(train, 2, ShardPlan("iid", seed=0)), test


def fresh(n=2, dims=(8, 16, 10)):
    return [Mlp(list(dims), "tanh", seed=100 + c) for c in range(n)]


class TestLogitTable:
    def test_counts_and_means(self):
        t = LogitTable(3, 2)
        t.add([0, 0, 2], [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        assert t.counts.tolist() == [2, 0, 1]
        assert t.averages().tolist() == [[2.0, 3.0], [0.0, 0.0], [5.0, 6.0]]
        assert np.all(t.sums[~t.present] == 0)


class TestEnsemble:
    def test_three_workers(self):
        view = global_ensemble([table_from([[v]]) for v in (1.0, 2.0, 3.0)])
        assert view.targets[:, 0, 0].tolist() == [2.5, 2.0, 1.5]

    def test_identical_tables(self):
        vals = [[0.5, -1.0], [2.0, 3.0]]
        view = global_ensemble([table_from(vals) for _ in range(4)])
        for c in range(4):
            assert np.array_equal(view.targets[c], vals)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
    def test_brute_force_and_mean_identity(self, C, seed):
        rng = np.random.default_rng(seed)
        vals = rng.standard_normal((C, 3, 2))
        view = global_ensemble([table_from(v) for v in vals])
        for c in range(C):
            others = [vals[j] for j in range(C) if j != c]
            assert np.allclose(view.targets[c], sum(others) / (C - 1), rtol=0, atol=1e-12)
        assert np.allclose(view.targets.sum(axis=0), vals.sum(axis=0), rtol=0, atol=1e-12)

    def test_missing_label_carries_previous(self):
        a = LogitTable(2, 1)
        a.add([0, 1], [[1.0], [4.0]])
        b = LogitTable(2, 1)
        b.add([0, 1], [[3.0], [8.0]])
        first = global_ensemble([a, b])
        a2 = LogitTable(2, 1)
        a2.add([0], [[10.0]])
        b2 = LogitTable(2, 1)
        b2.add([0], [[20.0]])
        second = global_ensemble([a2, b2], first)
        assert second.targets[0, 0, 0] == 20.0
        assert second.targets[0, 1, 0] == 8.0  # carried
        assert second.mask.all()

    def test_missing_label_without_history_is_masked(self):
        a = LogitTable(2, 1)
        a.add([0], [[1.0]])
        b = LogitTable(2, 1)
        b.add([0, 1], [[3.0], [5.0]])
        view = global_ensemble([a, b])
        assert view.mask.tolist() == [[True, True], [True, False]]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            global_ensemble([LogitTable(2, 1), LogitTable(2, 3)])

    def test_needs_two(self):
        with pytest.raises(ValueError):
            global_ensemble([LogitTable(2, 1)])


class TestLocalPhase:
    def test_zero_lambda_is_plain_sgd(self, task):
        shards, _ = task
        m = fresh(1)[0]
        targets = np.ones((10, 10))
        a, _ = local_train_phase(m, shards[0], targets, 5, 8, 0.1, 0.0, (CROSS_ENTROPY, CROSS_ENTROPY),
                                 np.random.default_rng(1))
        b = local_sgd(m, shards[0], 5, 8, 0.1, (CROSS_ENTROPY, CROSS_ENTROPY), np.random.default_rng(1))
        assert np.array_equal(a.weights, b.weights)

    def test_zero_steps(self, task):
        shards, _ = task
        m = fresh(1)[0]
        out, table = local_train_phase(m, shards[0], None, 0, 8, 0.1, 0.0, (MSE, MSE))
        assert np.array_equal(out.weights, m.weights)
        assert table.counts.sum() == 0

    def test_single_sample_trace(self):
        ds = LabeledDataset([[0.5, -0.5]], [1], 3)
        m = Mlp([2, 4, 3], "tanh", seed=0)
        out, table = local_train_phase(m, ds, None, 1, 1, 0.5, 0.0, (MSE, MSE), logit_layer="hidden")
        # oracle: step first, then record the updated model's logit
        stepped = m.weights - 0.5 * backward(m, ds.samples, ds.one_hot(), kinds=(MSE, MSE))
        expected = forward(Mlp([2, 4, 3], "tanh", weights=stepped), ds.samples[0])[1]
        assert table.counts.tolist() == [0, 1, 0]
        assert np.array_equal(table.averages()[1], expected)
        assert np.count_nonzero(np.any(table.averages() != 0, axis=1)) == 1

    def test_empty_shard(self):
        with pytest.raises(ValueError):
            local_train_phase(Mlp([2, 3]), LabeledDataset(np.zeros((0, 2)), [], 3), None, 1, 1, 0.1, 0.0,
                              (MSE, MSE))


class TestPayload:
    def test_fd(self):
        assert payload_bytes("fd", None, 10, 10, 4) == (400, 400)

    def test_fl_reference_count(self):
        assert payload_bytes("fl", 12_544, 10, 10, 4) == (50_176, 50_176)
        assert payload_bytes("fl", 12_544, 10, 10, 4)[0] / payload_bytes("fd", None, 10, 10, 4)[0] == 125.44

    def test_fl_f64(self):
        m = Mlp([8, 16, 10])
        assert payload_bytes("fl", m, 10, 10, 8)[0] == 8 * m.n_params

    def test_independence(self):
        assert payload_bytes("fd", Mlp([3, 2]), 10, 10)[0] == payload_bytes("fd", Mlp([300, 2]), 10, 10)[0]
        assert payload_bytes("fl", 500, 10, 10)[0] == payload_bytes("fl", 500, 1000, 10)[0]

    def test_bad_width(self):
        with pytest.raises(ValueError):
            payload_bytes("fd", None, 10, 10, 2)


class TestRunFd:
    def test_zero_rounds(self, task):
        shards, test = task
        assert run_fd(fresh(), shards, 0, TrainConfig()) == []

    def test_learns_and_accounts(self, task):
        shards, test = task
        models = fresh()
        before = accuracy(models[0], test)
        reports = run_fd(models, shards, 5, TrainConfig(), test, seed=1)
        assert len(reports) == 5
        assert min(reports[-1].accuracies) > before
        for rep in reports:
            assert rep.uplink_bytes == [400, 400] and rep.downlink_bytes == [400, 400]

    def test_symmetric_workers_stay_identical(self, task):
        shards, _ = task
        models = [Mlp([8, 16, 10], "tanh", seed=5) for _ in range(3)]
        run_fd(models, [shards[0]] * 3, 3, TrainConfig(local_steps=5), seed=2)
        assert np.array_equal(models[0].weights, models[1].weights)
        assert np.array_equal(models[0].weights, models[2].weights)

    def test_parallel_matches_serial(self, task):
        shards, test = task
        a, b = fresh(), fresh()
        ra = run_fd(a, shards, 3, TrainConfig(local_steps=5), test, seed=3, n_jobs=1)
        rb = run_fd(b, shards, 3, TrainConfig(local_steps=5), test, seed=3, n_jobs=2)
        assert [list(r.rows()) for r in ra] == [list(r.rows()) for r in rb]
        assert all(np.array_equal(x.weights, y.weights) for x, y in zip(a, b))

    def test_needs_two_workers(self, task):
        shards, _ = task
        with pytest.raises(ValueError):
            run_fd(fresh(1), shards[:1], 1, TrainConfig())

    def test_more_uplinks_than_fl_on_asymmetric(self, task):
        shards, _ = task
        link = preset("asymmetric")
        fd = run_fd(fresh(), shards, 2, TrainConfig(local_steps=2), channel=link)
        fl = run_fl(fresh(), shards, 2, TrainConfig(local_steps=2), channel=link)
        n_fd = sum(sum(r.uplink_delivered) for r in fd)
        n_fl = sum(sum(r.uplink_delivered) for r in fl)
        assert n_fd > n_fl


class TestRunFl:
    def test_identical_start_identical_end(self, task):
        shards, _ = task
        models = [Mlp([8, 16, 10], "tanh", seed=9) for _ in range(2)]
        run_fl(models, [shards[0], shards[0]], 1, TrainConfig(local_steps=3))
        assert np.array_equal(models[0].weights, models[1].weights)

    def test_improves(self, task):
        shards, test = task
        models = fresh()
        reports = run_fl(models, shards, 5, TrainConfig(), test, seed=0)
        assert reports[-1].accuracies[0] > reports[0].accuracies[0] or reports[0].accuracies[0] == 1.0
        m = models[0]
        assert reports[0].uplink_bytes[0] == 4 * m.n_params
        assert run_fl(fresh(), shards, 1, TrainConfig(float_width=8))[0].uplink_bytes[0] == 8 * m.n_params

    def test_heterogeneous(self, task):
        shards, _ = task
        with pytest.raises(AggregationError):
            run_fl([Mlp([8, 16, 10]), Mlp([8, 12, 10])], shards, 1, TrainConfig())

    def test_round_reports_have_rows(self, task):
        shards, test = task
        rep = run_fl(fresh(), shards, 1, TrainConfig(local_steps=1), test)[0]
        rows = list(rep.rows())
        assert [r["worker"] for r in rows] == [0, 1]
        assert set(rows[0]) >= {"round", "worker", "loss", "accuracy", "uplink_bytes", "downlink_bytes"}
