import numpy as np
import pytest

from braingnn.autodiff import Tensor
from braingnn.graph import GraphDataset, GraphError, make_graph
from braingnn.model import GNNModel, ModelConfig, predict
from braingnn.training import (
    AdamState, Metrics, TrainConfig, adam_step, evaluate, kfold_split,
    lr_schedule, metrics_from_predictions, train,
)


def _toy_dataset(n_subjects=10, copies=3, seed=0):
    """Linearly separable single-node graphs: attribute column 1 carries the
    label signal."""
    rng = np.random.default_rng(seed)
    graphs = []
    for s in range(n_subjects):
        label = s % 2
        for _ in range(copies):
            x = rng.normal(size=(4, 10))
            x[:, 1] += 3.0 * (2 * label - 1)
            edges = [(0, 1, rng.normal(size=3)), (2, 3, rng.normal(size=3))]
            graphs.append(make_graph(x, edges, f"s{s:02d}", label))
    return GraphDataset(graphs)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # with a single constant gradient, bias correction makes the first
        # update exactly lr * sign(g)
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        state = AdamState(p)
        g = np.array([0.5, -2.0, 1e-3])
        assert adam_step(state, p, {"w": g}, lr=0.001)
        expected = -0.001 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p["w"].data, expected, rtol=1e-6)

    def test_constant_gradient_two_steps(self):
        # hand-computed: m_hat = g, v_hat = g^2 at every step for constant g
        p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        state = AdamState(p)
        for _ in range(2):
            adam_step(state, p, {"w": np.array([1.0])}, lr=0.1)
        assert p["w"].data[0] == pytest.approx(-0.2, rel=1e-6)

    def test_nonfinite_gradient_skips_update(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        state = AdamState(p)
        assert not adam_step(state, p, {"w": np.array([np.nan])}, lr=0.1)
        assert p["w"].data[0] == 1.0
        assert state.step == 0

    def test_descends_quadratic(self):
        p = {"w": Tensor(np.array([5.0]), requires_grad=True)}
        state = AdamState(p)
        for _ in range(2000):
            adam_step(state, p, {"w": 2 * p["w"].data}, lr=0.01)
        assert abs(p["w"].data[0]) < 1e-3


class TestLrSchedule:
    def test_decade_boundaries(self):
        cfg = TrainConfig()
        assert lr_schedule(cfg, 0) == pytest.approx(0.001)
        assert lr_schedule(cfg, 49) == pytest.approx(0.001)
        assert lr_schedule(cfg, 50) == pytest.approx(0.0001)
        assert lr_schedule(cfg, 99) == pytest.approx(0.0001)
        assert lr_schedule(cfg, 100) == pytest.approx(0.00001)
        assert lr_schedule(cfg, 299) == pytest.approx(0.001 * 10 ** -5)

    def test_custom_decay(self):
        cfg = TrainConfig(lr0=1.0, decay_factor=2.0, decay_every=10)
        assert lr_schedule(cfg, 25) == pytest.approx(0.25)


class TestKFold:
    def test_partition_covers_everything_once(self):
        ds = _toy_dataset(n_subjects=11, copies=2)
        splits = kfold_split(ds, folds=5, seed=0)
        assert len(splits) == 5
        all_test = [i for _, test in splits for i in test]
        assert sorted(all_test) == list(range(len(ds.graphs)))
        for train_idx, test_idx in splits:
            assert sorted(train_idx + test_idx) == list(range(len(ds.graphs)))

    def test_no_subject_leakage(self):
        ds = _toy_dataset(n_subjects=13, copies=3)
        for train_idx, test_idx in kfold_split(ds, folds=5, seed=1):
            train_subj = {ds.graphs[i].subject_id for i in train_idx}
            test_subj = {ds.graphs[i].subject_id for i in test_idx}
            assert not (train_subj & test_subj)

    def test_deterministic_given_seed(self):
        ds = _toy_dataset()
        assert kfold_split(ds, 5, seed=7) == kfold_split(ds, 5, seed=7)
        assert kfold_split(ds, 5, seed=7) != kfold_split(ds, 5, seed=8)

    def test_balanced_fold_sizes(self):
        ds = _toy_dataset(n_subjects=10, copies=1)
        sizes = [len(test) for _, test in kfold_split(ds, 5, seed=0)]
        assert sizes == [2] * 5

    def test_too_few_subjects_rejected(self):
        ds = _toy_dataset(n_subjects=3, copies=2)
        with pytest.raises(GraphError):
            kfold_split(ds, folds=5, seed=0)


class TestMetrics:
    def test_hand_example(self):
        # true (1,1,0,0), pred (1,0,1,0): tp=1 fp=1 fn=1 tn=1
        m = metrics_from_predictions(np.array([1, 1, 0, 0]),
                                     np.array([1, 0, 1, 0]))
        assert m.accuracy == pytest.approx(0.5)
        assert m.precision == pytest.approx(0.5)
        assert m.recall == pytest.approx(0.5)
        assert m.f_score == pytest.approx(0.5)

    def test_always_positive_predictor(self):
        # true (1,0,0,0) pred all 1: acc 0.25, precision 0.25, recall 1,
        # f = 2*0.25/1.25 = 0.4
        m = metrics_from_predictions(np.array([1, 0, 0, 0]), np.ones(4, dtype=int))
        assert m.accuracy == pytest.approx(0.25)
        assert m.precision == pytest.approx(0.25)
        assert m.recall == pytest.approx(1.0)
        assert m.f_score == pytest.approx(0.4)

    def test_degenerate_no_positives(self):
        m = metrics_from_predictions(np.zeros(3, dtype=int), np.zeros(3, dtype=int))
        assert m.accuracy == 1.0
        assert m.precision == 0.0 and m.recall == 0.0 and m.f_score == 0.0

    def test_perfect(self):
        m = metrics_from_predictions(np.array([0, 1, 1]), np.array([0, 1, 1]))
        assert (m.accuracy, m.f_score, m.precision, m.recall) == (1, 1, 1, 1)


class TestTrain:
    def test_learns_separable_toy_problem(self):
        ds = _toy_dataset(seed=3)
        m = GNNModel(ModelConfig(), seed=0)
        cfg = TrainConfig(epochs=30, batch_size=8, seed=0)
        m, log = train(m, ds.graphs, cfg)
        assert log[-1]["acc"] >= 0.95
        assert log[-1]["loss"] < log[0]["loss"]

    def test_deterministic_replay(self):
        ds = _toy_dataset(seed=4)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
        m1, log1 = train(GNNModel(ModelConfig(), seed=1), ds.graphs, cfg)
        m2, log2 = train(GNNModel(ModelConfig(), seed=1), ds.graphs, cfg)
        assert log1 == log2
        for k in m1.params:
            assert np.array_equal(m1.params[k].data, m2.params[k].data)

    def test_log_schema_and_file(self, tmp_path):
        ds = _toy_dataset(seed=5)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=0)
        path = tmp_path / "log.csv"
        _, log = train(GNNModel(ModelConfig(), seed=2), ds.graphs, cfg,
                       log_path=path)
        assert [row["epoch"] for row in log] == [0, 1]
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,lr,loss,acc,f1,precision,recall"
        assert len(lines) == 3
        assert float(lines[1].split(",")[1]) == 0.001

    def test_evaluate_threshold(self):
        ds = _toy_dataset(seed=6)
        m = GNNModel(ModelConfig(), seed=3)
        met = evaluate(m, ds.graphs)
        p1 = predict(m, ds.graphs)
        true = np.array([g.label for g in ds.graphs])
        manual = metrics_from_predictions(true, (p1 >= 0.5).astype(int))
        assert met == manual
