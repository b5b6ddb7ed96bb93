import csv

import numpy as np
import pytest

from advmix.config import DatasetSpec, TrainConfig
from advmix.data import make_synthetic
from advmix.mixblock import linear_mix
from advmix.model import Architecture, checkpoint_bytes
from advmix.trainer import (
    DivergenceError,
    MixSets,
    Trainer,
    TrainLogRow,
    baseline_input_mixup_step,
    classifier_step,
    cosine_lr,
    generator_step,
    plain_step,
    sgd_update,
    train_epoch,
    write_log,
)

from conftest import tiny_problem

ARCH = Architecture(1, 8, 3, (4, 4, 8, 8), 1)


def small_data(n=24):
    (x, y), _ = make_synthetic(DatasetSpec(channels=1, image_size=8, n_train=n, n_test=3))
    return x, y


def small_config(**kw):
    base = dict(batch_size=12, n_mix=3, epochs=2, widths=ARCH.widths)
    base.update(kw)
    return TrainConfig(**base).resolved()


def params_equal(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


# ------------------------------------------------------------------ steps


def test_zero_classifier_rate_keeps_weights():
    _, state, s = tiny_problem(0)
    before = state.clone()
    classifier_step(state, s, small_config(n_mix=2, batch_size=4), {}, 0.0)
    assert params_equal(state.classifier.params, before.classifier.params)


def test_zero_generator_rate_keeps_theta():
    _, state, s = tiny_problem(0)
    before = state.clone()
    generator_step(state, s, small_config(n_mix=2, batch_size=4), 0.0)
    assert params_equal(state.generator, before.generator)


def test_classifier_step_isolation():
    _, state, s = tiny_problem(1)
    before = state.clone()
    classifier_step(state, s, small_config(n_mix=2, batch_size=4), {}, 0.05)
    assert params_equal(state.generator, before.generator)
    assert params_equal(state.teacher.params, before.teacher.params)
    assert params_equal(state.encoder.params, before.encoder.params)
    assert not params_equal(state.classifier.params, before.classifier.params)


def test_generator_step_isolation():
    _, state, s = tiny_problem(1)
    before = state.clone()
    generator_step(state, s, small_config(n_mix=2, batch_size=4), 0.05)
    assert params_equal(state.classifier.params, before.classifier.params)
    assert params_equal(state.classifier.buffers, before.classifier.buffers)
    assert params_equal(state.teacher.params, before.teacher.params)
    assert params_equal(state.encoder.params, before.encoder.params)
    assert not params_equal(state.generator, before.generator)


def test_zero_gradient_moves_only_by_weight_decay():
    w = {"a": np.array([1.0, -2.0])}
    sgd_update(w, {"a": np.zeros(2)}, {}, 0.1, 0.0, 0.01)
    np.testing.assert_allclose(w["a"], [1.0 - 0.001, -2.0 + 0.002])


def test_momentum_accumulates():
    w, vel = {"a": np.zeros(1)}, {}
    sgd_update(w, {"a": np.ones(1)}, vel, 1.0, 0.9, 0.0)
    sgd_update(w, {"a": np.ones(1)}, vel, 1.0, 0.9, 0.0)
    np.testing.assert_allclose(w["a"], [-(1 + 1.9)])


def test_nonfinite_loss_aborts_step():
    _, state, s = tiny_problem(2)
    bad = MixSets(s.X.copy(), s.Y, s.lam)
    bad.X[0, 0, 0, 0, 0] = np.nan
    before = state.clone()
    with pytest.raises(DivergenceError):
        classifier_step(state, bad, small_config(n_mix=2, batch_size=4), {}, 0.1, x_mix=bad.X[:, 0])
    assert params_equal(state.classifier.params, before.classifier.params)


def test_mixup_ratio_one_is_plain_step():
    _, a, s = tiny_problem(3)
    b = a.clone()
    sets = MixSets(s.X, s.Y, np.tile([1.0, 0.0], (len(s.X), 1)))
    cfg = small_config(mode="input-mixup", n_mix=2, batch_size=4)
    baseline_input_mixup_step(a, sets, cfg, {}, 0.05)
    plain_step(b, s.X[:, 0], s.Y[:, 0].argmax(axis=1), cfg, {}, 0.05)
    for k in a.classifier.params:
        np.testing.assert_allclose(a.classifier.params[k], b.classifier.params[k], atol=1e-14, rtol=0)


def test_mixup_half_on_identical_images():
    x = np.random.default_rng(0).uniform(size=(1, 1, 4, 4))
    X = np.stack([x, x], axis=1)
    np.testing.assert_allclose(linear_mix(X, np.array([[0.5, 0.5]])), x, atol=1e-15)


def test_mixup_needs_pairs():
    _, state, s = tiny_problem(0, N=3)
    with pytest.raises(ValueError):
        baseline_input_mixup_step(state, s, small_config(n_mix=3), {}, 0.1)


def test_cosine_lr_endpoints():
    assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
    assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)
    assert cosine_lr(0.1, 10, 10) == pytest.approx(0.0, abs=1e-15)


# ------------------------------------------------------------------ epochs


def test_no_ascent_keeps_generator():
    x, y = small_data()
    tr = Trainer(small_config(t2=0), ARCH)
    before = {k: v.copy() for k, v in tr.state.generator.items()}
    rows = tr.train_epoch(x, y, 0)
    assert params_equal(tr.state.generator, before)
    assert len(rows) == 2


def test_vanilla_mode_is_plain_training():
    x, y = small_data()
    tr = Trainer(small_config(mode="vanilla"), ARCH)
    before = {k: v.copy() for k, v in tr.state.generator.items()}
    rows = tr.train_epoch(x, y, 0)
    assert params_equal(tr.state.generator, before)
    assert all(r.l_amce == 0 and r.generator_total == 0 for r in rows)
    assert all(r.classifier_total == r.l_ace > 0 for r in rows)


def test_input_mixup_mode_runs():
    x, y = small_data()
    tr = Trainer(small_config(mode="input-mixup", n_mix=2), ARCH)
    rows = tr.train_epoch(x, y, 0)
    assert all(r.l_mce > 0 for r in rows)


def test_with_and_without_ascent_log_same_rows(tmp_path):
    x, y = small_data()
    logs = []
    for t2 in (1, 0):
        tr = Trainer(small_config(t2=t2), ARCH)
        rows = tr.fit(x, y)
        path = tmp_path / f"log{t2}.csv"
        write_log(path, rows)
        with open(path) as fh:
            logs.append(list(csv.reader(fh)))
    assert logs[0][0] == logs[1][0] == TrainLogRow.header()
    assert len(logs[0]) == len(logs[1]) == 1 + 4


def test_ema_tracks_classifier_and_copies_stats():
    x, y = small_data()
    tr = Trainer(small_config(xi_start=0.5), ARCH)
    tr.train_epoch(x, y, 0)
    s = tr.state
    assert params_equal(s.teacher.buffers, s.classifier.buffers)
    assert not params_equal(s.teacher.params, s.classifier.params)


def test_xi_logged_rises_to_one():
    x, y = small_data()
    rows = Trainer(small_config(epochs=3), ARCH).fit(x, y)
    xis = [r.xi for r in rows]
    assert xis[0] == pytest.approx(0.999)
    assert all(a <= b for a, b in zip(xis, xis[1:]))
    assert xis[-1] < 1.0


def test_training_is_reproducible():
    x, y = small_data()
    blobs = []
    for _ in range(2):
        tr = Trainer(small_config(), ARCH)
        tr.fit(x, y)
        blobs.append(checkpoint_bytes(tr.state))
    assert blobs[0] == blobs[1]


def test_functional_train_epoch():
    x, y = small_data()
    tr = Trainer(small_config(), ARCH)
    state, rows = train_epoch(tr.state, x, y, tr.config, 0)
    assert state is tr.state
    assert [r.step for r in rows] == [1, 2]


def test_divergent_batches_are_skipped_then_raise():
    x, y = small_data()
    x = x.copy()
    x[:] = np.nan
    tr = Trainer(small_config(max_skips=1, epochs=1), ARCH)
    with pytest.raises(DivergenceError):
        tr.fit(x, y)
    assert tr.skips == 2


def test_collapsed_teacher_features_skip_the_batch(monkeypatch):
    import advmix.trainer as trainer_mod
    from advmix import diffmath as dm

    def collapsed(*args, **kwargs):
        raise dm.ZeroNormError("zero-norm input")

    monkeypatch.setattr(trainer_mod, "generator_loss", collapsed)
    x, y = small_data()
    tr = Trainer(small_config(epochs=1, max_skips=5), ARCH)
    rows = tr.train_epoch(x, y, 0)
    assert rows == [] and tr.skips == 2
