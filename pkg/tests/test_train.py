import json
import math

import numpy as np
import pytest
from scipy import stats

from drowzee.data import EEGDataset, SplitSpec, split_dataset, synth_generate
from drowzee.model import ModelConfig, build_model, checkpoint_bytes
from drowzee.nn import Module
from drowzee.tensor import Tensor, as_tensor, backward, finite_diff_check
from drowzee.train import (AdamState, BandPowerLogistic, NonFiniteGradientError, TrainConfig,
                           adam_step, cross_entropy, cross_validate, evaluate, t_interval, train,
                           write_log, write_summary)

TINY = dict(base_dim=8, state_size=4)


def tiny_model(seed=0):
    return build_model(ModelConfig(**TINY, init_seed=seed))


@pytest.fixture(scope="module")
def splits():
    return split_dataset(synth_generate(120, seed=5), SplitSpec(seed=0))


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.zeros(3), requires_grad=True)
    adam_step({"p": p}, {"p": np.array([1.0, -2.0, 0.5])}, AdamState(), TrainConfig(learning_rate=0.1))
    assert np.allclose(p.data, [-0.1, 0.1, -0.1], atol=1e-8)


def test_adam_zero_gradient_leaves_parameter():
    p = Tensor(np.ones(3), requires_grad=True)
    adam_step({"p": p}, {"p": np.zeros(3)}, AdamState(), TrainConfig())
    assert np.array_equal(p.data, np.ones(3))


def test_adam_constant_gradient_after_many_steps():
    p = Tensor(np.zeros(2), requires_grad=True)
    state, cfg = AdamState(), TrainConfig(learning_rate=1e-3)
    for _ in range(1000):
        adam_step({"p": p}, {"p": np.array([3.0, -0.2])}, state, cfg)
    assert state.t == 1000
    assert np.allclose(p.data, [-1.0, 1.0], atol=1e-6)


def test_adam_is_scale_invariant_for_tiny_eps():
    cfg = TrainConfig(learning_rate=0.01, eps=1e-12)
    g = np.random.default_rng(0).normal(size=5)
    out = []
    for scale in (1.0, 1000.0):
        p, st = Tensor(np.zeros(5), requires_grad=True), AdamState()
        for _ in range(3):
            adam_step({"p": p}, {"p": scale * g}, st, cfg)
        out.append(p.data.copy())
    assert np.allclose(out[0], out[1], rtol=1e-9, atol=1e-15)


def test_adam_rejects_non_finite_gradient_without_updating():
    p = Tensor(np.ones(2), requires_grad=True)
    q = Tensor(np.ones(2), requires_grad=True)
    state = AdamState()
    with pytest.raises(NonFiniteGradientError) as info:
        adam_step({"p": p, "q": q}, {"p": np.ones(2), "q": np.array([np.nan, 0.0])}, state, TrainConfig())
    assert info.value.param_name == "q"
    assert np.array_equal(p.data, np.ones(2)) and state.t == 0


def test_train_config_validation():
    for bad in ({"learning_rate": -1e-3}, {"learning_rate": float("inf")}, {"batch_size": 1},
                {"max_epochs": 0}, {"beta1": 1.0}, {"patience": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros((3, 2)), np.array([0, 1, 1])).item() == pytest.approx(math.log(2), abs=1e-12)
    sat = cross_entropy(np.array([[800.0, -800.0]]), np.array([0])).item()
    assert np.isfinite(sat) and sat == pytest.approx(0.0, abs=1e-12)
    wrong = cross_entropy(np.array([[800.0, -800.0]]), np.array([1])).item()
    assert wrong == pytest.approx(1600.0)


def test_cross_entropy_gradcheck(rng):
    z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    y = np.array([0, 2, 1, 2])
    assert finite_diff_check(lambda: cross_entropy(z, y), {"logits": z}).passed
    backward(cross_entropy(z, y))
    assert np.allclose(z.grad.sum(axis=1), 0, atol=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 2)), np.array([0, 2]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 2)), np.array([0]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 2)), np.array([0.0, 1.0]))


class SignModel(Module):
    """Predicts class 1 when the first sample is positive, optionally always ``const``."""

    def __init__(self, const=None):
        self.const = const

    def forward(self, x):
        v = as_tensor(x).data[:, 0, 0, 0]
        if self.const is not None:
            v = np.full_like(v, -1.0 if self.const == 0 else 1.0)
        return Tensor(np.stack([-v, v], axis=1))


def sign_dataset(n=20):
    labels = np.tile([0, 1], n // 2)
    epochs = np.zeros((n, 17, 200, 1), np.float32)
    epochs[:, 0, 0, 0] = 2 * labels - 1
    return EEGDataset(epochs, labels)


def test_evaluate_examples():
    d = sign_dataset()
    rep = evaluate(SignModel(const=0), d)
    assert rep.accuracy == 50.0 and rep.confusion.tolist() == [[10, 0], [10, 0]]
    perfect = evaluate(SignModel(), d)
    assert perfect.accuracy == 100.0 and perfect.n == 20
    assert np.trace(perfect.confusion) == 20
    with pytest.raises(ValueError):
        evaluate(SignModel(), d.subset(np.array([], dtype=int)))
    with pytest.raises(ValueError):
        evaluate(SignModel(), EEGDataset(d.epochs, None))


def test_t_interval_fixture():
    mean, half = t_interval([79, 80, 81, 80, 80])
    assert mean == 80.0
    s = math.sqrt(0.5)
    assert half == pytest.approx(stats.t.ppf(0.975, 4) * s / math.sqrt(5), rel=1e-12)
    assert half == pytest.approx(2.776 * s / math.sqrt(5), rel=1e-3)


def test_t_interval_zero_variance_and_monotonicity():
    assert t_interval([85.0] * 5) == (85.0, 0.0)
    narrow = t_interval([79, 80, 81, 80, 80])[1]
    wide = t_interval([70, 80, 90, 80, 80])[1]
    assert wide > narrow
    assert t_interval([79, 80, 81, 80, 80], level=0.99)[1] > narrow


def test_lr_zero_keeps_everything_fixed(splits):
    tr, va, _ = splits
    m = tiny_model()
    before = checkpoint_bytes(m)
    res = train(m, tr, va, TrainConfig(learning_rate=0.0, max_epochs=3, patience=None))
    assert checkpoint_bytes(res.model) == before
    assert len({r.val_acc for r in res.history}) == 1
    # batches are reshuffled each epoch, so the mean loss agrees only up to summation order
    losses = [r.train_loss for r in res.history]
    assert max(losses) - min(losses) < 1e-12


def test_training_is_deterministic(splits):
    tr, va, _ = splits
    cfg = TrainConfig(max_epochs=2, seed=3)
    a = train(tiny_model(), tr, va, cfg)
    b = train(tiny_model(), tr, va, cfg)
    assert a.log_text() == b.log_text()
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)


def test_training_loss_decreases(splits):
    tr, va, _ = splits
    res = train(tiny_model(), tr, va, TrainConfig(learning_rate=3e-3, max_epochs=5, patience=None))
    assert len(res.history) == 5
    assert res.history[-1].train_loss < res.history[0].train_loss
    assert res.best_val_acc == max(r.val_acc for r in res.history)
    assert res.history[res.best_epoch - 1].val_acc == res.best_val_acc


def test_early_stopping_and_callback(splits):
    tr, va, _ = splits
    seen = []
    res = train(tiny_model(), tr, va, TrainConfig(learning_rate=0.0, max_epochs=10, patience=2),
                on_epoch=seen.append)
    assert len(res.history) == 3 and seen == res.history


def test_cross_validate_is_deterministic():
    d = synth_generate(60, seed=2)
    cfg = TrainConfig(max_epochs=1, seed=1)
    a = cross_validate(tiny_model, d, k=3, cfg=cfg)
    b = cross_validate(tiny_model, d, k=3, cfg=cfg)
    assert a.fold_accuracies == b.fold_accuracies and len(a.fold_accuracies) == 3
    assert a.confusion.sum() == 60
    assert a.mean == pytest.approx(np.mean(a.fold_accuracies))


def test_band_power_baseline(splits):
    tr, _, te = splits
    rep = BandPowerLogistic().fit(tr).evaluate(te)
    assert rep.accuracy >= 90.0


def test_log_and_summary_files(tmp_path, splits):
    tr, va, _ = splits
    res = train(tiny_model(), tr, va, TrainConfig(learning_rate=0.0, max_epochs=2, patience=None))
    write_log(res, tmp_path / "run.log")
    lines = (tmp_path / "run.log").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("epoch=1 train_loss=")
    write_summary(tmp_path / "s.json", best_epoch=res.best_epoch, acc=np.float64(50.0))
    assert json.loads((tmp_path / "s.json").read_text()) == {"acc": 50.0, "best_epoch": 1}
