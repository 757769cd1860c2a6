import math

import numpy as np
import pytest

from graphmft import tensor as T
from graphmft import train as train_mod
from graphmft.data import Dataset, SynthConfig, gen_synthetic, split_dataset
from graphmft.metrics import compute_metrics, confusion_matrix
from graphmft.model import GraphMFT, ModelConfig
from graphmft.tensor import Tensor
from graphmft.train import (
    AdamState,
    AdamW,
    NonFiniteGradient,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    cross_entropy,
    evaluate,
    loss,
    train,
)


def toy_splits(n_conv=12, seed=0, **kw):
    d = gen_synthetic(SynthConfig(n_conv=n_conv, m_range=(3, 6), num_classes=3, dims=(4, 4, 4), seed=seed, **kw))
    return d, split_dataset(d, (0.5, 0.25, 0.25), seed=seed)


def toy_model_cfg(header, **kw):
    return ModelConfig.for_header(header, **{**dict(d=8, K=2, L=1, h=4, P=1, F=1, dropout=0.0), **kw})


class TestLoss:
    @pytest.mark.parametrize("C", [2, 6])
    def test_uniform_logits_give_log_c(self, C):
        value = cross_entropy(Tensor(np.zeros((5, C))), np.arange(5) % C).item()
        assert abs(value - math.log(C)) < 1e-4

    def test_six_classes_value(self):
        assert cross_entropy(Tensor(np.zeros((1, 6))), [3]).item() == pytest.approx(1.7918, abs=1e-4)

    def test_confident_logits_go_to_zero(self):
        labels = np.array([0, 2, 1])
        onehot = np.eye(3)[labels]
        values = [cross_entropy(Tensor(onehot * s), labels).item() for s in (1, 5, 20, 60)]
        assert all(a > b for a, b in zip(values, values[1:])) and values[-1] < 1e-20

    def test_matches_per_utterance_oracle(self):
        r = np.random.default_rng(0)
        z, y = r.standard_normal((3, 4)), np.array([1, 3, 0])
        want = sum(-(z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i]))) for i in range(3)) / 3
        assert abs(cross_entropy(Tensor(z), y).item() - want) < 1e-6

    def test_normalised_by_total_utterances(self):
        r = np.random.default_rng(1)
        a, b = r.standard_normal((2, 3)), r.standard_normal((5, 3))
        ya, yb = np.array([0, 1]), np.array([2, 2, 0, 1, 1])
        joint = loss([Tensor(a), Tensor(b)], [ya, yb]).item()
        want = (cross_entropy(Tensor(a), ya).item() * 2 + cross_entropy(Tensor(b), yb).item() * 5) / 7
        assert joint == pytest.approx(want, abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss([], [])

    def test_initial_loss_near_log_c(self):
        d, _ = toy_splits(n_conv=20, transition_stickiness=1 / 3)
        model = GraphMFT(toy_model_cfg(d.header), seed=0)
        value = cross_entropy(model(d.conversations), d.labels()).item()
        assert 0.9 * math.log(3) <= value <= 1.1 * math.log(3)


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


class TestAdamW:
    def new(self, value):
        theta = np.array([value], dtype=np.float64)
        return theta, AdamState(np.zeros(1), np.zeros(1))

    def test_zero_gradient_no_decay(self):
        theta, state = self.new(1.5)
        adamw_step(theta, np.zeros(1), state, lr=0.1)
        assert theta[0] == 1.5

    def test_first_step(self):
        theta, state = self.new(1.0)
        adamw_step(theta, np.ones(1), state, lr=0.1)
        assert theta[0] == pytest.approx(0.9, abs=1e-7)

    def test_matches_scalar_reference(self):
        grads = [0.3, -1.2, 0.7, 2.5, -0.1]
        theta, state = self.new(0.4)
        for g in grads:
            adamw_step(theta, np.array([g]), state, lr=0.05)
        assert abs(theta[0] - adam_reference(0.4, grads, 0.05)) < 1e-12

    def test_moments_advance(self):
        theta, state = self.new(1.0)
        adamw_step(theta, np.ones(1), state, lr=0.1)
        first = 1.0 - theta[0]
        adamw_step(theta, np.ones(1), state, lr=0.1)
        assert state.t == 2 and state.m[0] != 0.1
        assert theta[0] != pytest.approx(1.0 - first)

    def test_decoupled_decay(self):
        theta, state = self.new(2.0)
        adamw_step(theta, np.zeros(1), state, lr=0.1, weight_decay=0.5)
        assert theta[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_non_finite_gradient_aborts_without_partial_update(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        a.grad, b.grad = np.ones(2), np.array([1.0, np.nan])
        opt = AdamW({"a": a, "b": b}, lr=0.1)
        with pytest.raises(NonFiniteGradient, match="b"):
            opt.step()
        assert np.array_equal(a.data, np.ones(2)) and opt.state["a"].t == 0

    def test_state_shape_checked(self):
        with pytest.raises(T.ShapeError):
            adamw_step(np.ones(2), np.ones(2), AdamState(np.zeros(3), np.zeros(3)), lr=0.1)


class TestTrain:
    def test_lr_zero_changes_nothing(self):
        d, (tr, va, _) = toy_splits()
        cfg = toy_model_cfg(d.header)
        tc = TrainConfig(lr=0.0, batch_size=4, max_epochs=3, l2_lambda=0.0, dropout=0.0, seed=3)
        model, hist = train(cfg, tc, tr, va)
        init = GraphMFT(cfg, train_mod._seed_streams(3)[0])
        for name, arr in init.state_dict().items():
            assert np.array_equal(model.state_dict()[name], arr)
        assert len({(r["acc"], r["wf1"]) for r in hist.rows}) == 1
        assert hist.best_epoch == 1

    def test_deterministic(self):
        d, (tr, va, _) = toy_splits()
        cfg = toy_model_cfg(d.header, dropout=0.5)
        tc = TrainConfig(lr=5e-3, batch_size=3, max_epochs=3, seed=5)
        m1, h1 = train(cfg, tc, tr, va)
        m2, h2 = train(cfg, tc, tr, va)
        assert h1.to_csv() == h2.to_csv()
        assert all(np.array_equal(a, m2.state_dict()[k]) for k, a in m1.state_dict().items())

    def test_one_small_step_decreases_loss(self):
        d, _ = toy_splits()
        conv = d.conversations[0]
        model = GraphMFT(toy_model_cfg(d.header), seed=1)
        opt = AdamW(model.params(), lr=1e-4)
        before = cross_entropy(model(conv), conv.labels)
        T.backward(before)
        opt.step()
        assert cross_entropy(model(conv), conv.labels).item() < before.item()

    def test_history_csv(self):
        d, (tr, va, _) = toy_splits()
        _, hist = train(toy_model_cfg(d.header), TrainConfig(lr=1e-3, max_epochs=2, batch_size=4), tr, va)
        lines = hist.to_csv().splitlines()
        assert lines[0] == "epoch,loss,acc,wf1" and len(lines) == 3

    def test_patience_stops_early(self):
        d, (tr, va, _) = toy_splits()
        _, hist = train(toy_model_cfg(d.header), TrainConfig(lr=0.0, max_epochs=10, patience=2), tr, va)
        assert len(hist.rows) == 3

    def test_divergence_keeps_last_good_weights(self, monkeypatch):
        d, (tr, va, _) = toy_splits()
        calls = {"n": 0}
        real = train_mod.cross_entropy

        def flaky(logits, labels):
            calls["n"] += 1
            out = real(logits, labels)
            return out * math.inf if calls["n"] > 2 else out

        monkeypatch.setattr(train_mod, "cross_entropy", flaky)
        with pytest.raises(TrainingDiverged) as info:
            train(toy_model_cfg(d.header), TrainConfig(lr=1e-3, batch_size=len(tr.conversations), max_epochs=5), tr, va)
        assert info.value.last_good is not None and len(info.value.history) == 2

    def test_empty_splits_rejected(self):
        d, (tr, _, _) = toy_splits()
        with pytest.raises(ValueError):
            train(toy_model_cfg(d.header), TrainConfig(), tr, Dataset(d.header, [], "valid"))

    @pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(batch_size=0), dict(dropout=1.0), dict(grad_clip=0.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestMetrics:
    def test_hand_derived_case(self):
        m = compute_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
        assert m.accuracy == 0.75
        assert m.per_class_f1[0] == pytest.approx(2 / 3) and m.per_class_f1[1] == pytest.approx(0.8)
        assert round(m.weighted_f1, 4) == 0.7333

    def test_counting_oracle(self):
        r = np.random.default_rng(0)
        y, p = r.integers(4, size=200), r.integers(4, size=200)
        m = compute_metrics(y, p, 4)
        for c in range(4):
            tp = sum(1 for a, b in zip(y, p) if a == b == c)
            fp = sum(1 for a, b in zip(y, p) if b == c != a)
            fn = sum(1 for a, b in zip(y, p) if a == c != b)
            assert m.per_class_f1[c] == pytest.approx(2 * tp / (2 * tp + fp + fn))
        assert m.weighted_f1 == pytest.approx(sum(np.mean(y == c) * m.per_class_f1[c] for c in range(4)))

    def test_all_correct(self):
        m = compute_metrics([2, 0, 1], [2, 0, 1], 3)
        assert m.accuracy == 1.0 and m.weighted_f1 == 1.0

    def test_zero_support_class(self):
        m = compute_metrics([0, 1, 1], [0, 1, 0], 3)
        assert m.per_class_f1[2] == 0.0 and m.support[2] == 0
        assert m.weighted_f1 == pytest.approx((1 / 3) * m.per_class_f1[0] + (2 / 3) * m.per_class_f1[1])

    def test_balanced_binary_weighted_equals_macro(self):
        m = compute_metrics([0, 0, 1, 1, 0, 1], [0, 1, 1, 0, 0, 1], 2)
        assert m.weighted_f1 == pytest.approx(np.mean(m.per_class_f1))

    def test_confusion_rows_are_supports(self):
        y, p = [0, 2, 2, 1, 0, 2], [0, 0, 2, 1, 1, 2]
        cm = confusion_matrix(y, p, 3)
        assert cm[2, 0] == 1 and list(cm.sum(axis=1)) == [2, 1, 3]

    def test_confusion_csv_and_report(self):
        m = compute_metrics([0, 1, 1], [0, 1, 0], 2)
        assert m.confusion_csv().splitlines() == ["true\\pred,0,1", "0,1,0", "1,1,1"]
        head, vals = m.report().splitlines()
        assert head.split("|")[-2].strip() == "Acc" and vals.split("|")[-2].strip() == "66.67"

    def test_evaluate_is_order_invariant(self):
        d, _ = toy_splits()
        model = GraphMFT(toy_model_cfg(d.header), seed=2)
        reversed_set = Dataset(d.header, d.conversations[::-1], d.split)
        a, b = evaluate(model, d), evaluate(model, reversed_set)
        assert a.to_json() == b.to_json()

    def test_evaluate_empty(self):
        d, _ = toy_splits()
        with pytest.raises(ValueError):
            evaluate(GraphMFT(toy_model_cfg(d.header)), Dataset(d.header, [], "test"))
