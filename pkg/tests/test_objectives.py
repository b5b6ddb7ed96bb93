import math

import numpy as np
import pytest

from advmix import diffmath as dm
from advmix.mixblock import generate, linear_mix, mix_labels
from advmix.objectives import (
    LossReport,
    LossWeights,
    ace_loss,
    amce_loss,
    classifier_loss,
    classifier_objective,
    cosine_loss,
    generator_loss,
    generator_objective,
    mce_loss,
    network_fn,
)

from conftest import tiny_problem


def linear_net(W):
    """Stand-in network: logits = flat(x) @ W, features = flat(x)."""

    def run(x):
        x = dm.as_tensor(x)
        flat = dm.reshape(x, (x.shape[0], -1))
        return dm.matmul(flat, W), flat

    return run


def ce_np(logits, target):
    z = logits - logits.max()
    logp = z - math.log(np.exp(z).sum())
    return float(-(target * logp).sum())


@pytest.fixture
def lin():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(4, 3))
    X = rng.uniform(size=(2, 1, 2, 2))
    return W, X, linear_net(W)


# --------------------------------------------------------------------- ACE


def test_ace_single_image_is_plain_ce(lin):
    W, X, net = lin
    y = np.eye(3)[[1]]
    got = float(ace_loss(net, X[:1], y, np.array([1.0])).data)
    assert got == pytest.approx(ce_np(X[0].ravel() @ W, y[0]), abs=1e-12)


def test_ace_zero_weight_ignores_sample(lin):
    W, X, net = lin
    Y = np.eye(3)[[0, 2]]
    base = float(ace_loss(net, X, Y, np.array([0.0, 1.0])).data)
    X2 = X.copy()
    X2[0] += 5.0
    assert float(ace_loss(net, X2, Y, np.array([0.0, 1.0])).data) == base


def test_ace_scalar_oracle(lin):
    W, X, net = lin
    Y = np.eye(3)[[0, 2]]
    expected = 0.6 * ce_np(X[0].ravel() @ W, Y[0]) + 0.4 * ce_np(X[1].ravel() @ W, Y[1])
    assert float(ace_loss(net, X, Y, np.array([0.6, 0.4])).data) == pytest.approx(expected, abs=1e-12)


def test_ace_rejects_off_simplex(lin):
    _, X, net = lin
    with pytest.raises(ValueError):
        ace_loss(net, X, np.eye(3)[[0, 1]], np.array([0.6, 0.6]))


# -------------------------------------------------------------------- AMCE


def test_amce_matching_prediction_gives_entropy():
    y = np.array([0.2, 0.3, 0.5])
    net = lambda x: (dm.as_tensor(np.log(y)[None]), None)  # noqa: E731
    expected = -float(np.sum(y * np.log(y)))
    assert float(amce_loss(net, np.zeros((1, 1, 1)), y).data) == pytest.approx(expected, abs=1e-12)


def test_amce_confident_correct_goes_to_zero():
    net = lambda x: (dm.as_tensor(np.array([[80.0, 0.0]])), None)  # noqa: E731
    assert float(amce_loss(net, np.zeros((1, 1, 1)), np.array([1.0, 0.0])).data) < 1e-30


def test_amce_half_half_oracle():
    net = lambda x: (dm.as_tensor(np.array([[2.0, 0.0]])), None)  # noqa: E731
    p0 = math.exp(2) / (math.exp(2) + 1)
    expected = -0.5 * math.log(p0) - 0.5 * math.log(1 - p0)
    assert float(amce_loss(net, np.zeros((1, 1, 1)), np.array([0.5, 0.5])).data) == pytest.approx(expected, abs=1e-14)


# --------------------------------------------------------------------- MCE


def test_mce_identical_inputs_equal_amce(lin):
    _, X, net = lin
    X = np.stack([X[0], X[0]])
    y_mix = np.array([0.3, 0.7, 0.0])
    a = float(mce_loss(net, X, np.array([0.4, 0.6]), y_mix).data)
    b = float(amce_loss(net, X[0], y_mix).data)
    assert a == pytest.approx(b, abs=1e-14)


def test_mce_degenerate_ratio(lin):
    W, X, net = lin
    y_mix = np.array([0.0, 1.0, 0.0])
    assert float(mce_loss(net, X, np.array([1.0, 0.0]), y_mix).data) == pytest.approx(ce_np(X[0].ravel() @ W, y_mix), abs=1e-12)


def test_mce_pipeline_oracle(lin):
    W, X, net = lin
    lam = np.array([0.35, 0.65])
    Y = np.eye(3)[[0, 1]]
    y_mix = lam[0] * Y[0] + lam[1] * Y[1]
    mixed = lam[0] * X[0] + lam[1] * X[1]
    expected = ce_np(mixed.ravel() @ W, y_mix)
    assert float(mce_loss(net, X, lam, y_mix).data) == pytest.approx(expected, abs=1e-12)


# ------------------------------------------------------------------ cosine


def cos_np(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_cosine_self_similarity(lin):
    _, X, net = lin
    assert float(cosine_loss(net, X[0], X, np.array([1.0, 0.0])).data) == pytest.approx(1.0, abs=1e-14)


def test_cosine_equal_similarities():
    # the mix is at 60 degrees from both sources
    X = np.array([[[[1.0, 0.0]]], [[[0.0, 1.0]]]])
    x_mix = np.array([[[1.0, 1.0]]]) / math.sqrt(2)
    s = cos_np(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    net = linear_net(np.zeros((2, 2)))
    assert float(cosine_loss(net, x_mix, X, np.array([0.5, 0.5])).data) == pytest.approx(s, abs=1e-14)


def test_cosine_oracle(lin):
    _, X, net = lin
    x_mix = np.random.default_rng(1).uniform(size=(1, 2, 2))
    lam = np.array([0.3, 0.7])
    expected = sum(lam[n] * cos_np(x_mix.ravel(), X[n].ravel()) for n in range(2))
    assert float(cosine_loss(net, x_mix, X, lam).data) == pytest.approx(expected, abs=1e-12)


def test_cosine_zero_features_rejected(lin):
    _, X, net = lin
    with pytest.raises(ValueError):
        cosine_loss(net, np.zeros((1, 2, 2)), X, np.array([0.5, 0.5]))


# -------------------------------------------------------------- composites


def test_classifier_objective_arithmetic():
    assert classifier_objective(1.0, 0.4, 0.6, 0.5) == pytest.approx(1.5, abs=1e-15)


def test_classifier_objective_alpha_one_drops_ace():
    assert classifier_objective(1.0, 0.4, 0.6, 1.0) == classifier_objective(1.0, 0.4, 123.0, 1.0)


def test_generator_objective_arithmetic():
    assert generator_objective(1.0, 0.5, 0.2, 0.3) == pytest.approx(0.99, abs=1e-15)


def test_generator_objective_beta_one_drops_cosine():
    assert generator_objective(1.0, 0.5, 0.2, 1.0) == generator_objective(1.0, 0.5, -7.0, 1.0)


def test_objectives_reject_out_of_range_weights():
    with pytest.raises(ValueError):
        classifier_objective(1.0, 1.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        generator_objective(1.0, 1.0, 1.0, -0.1)
    with pytest.raises(ValueError):
        LossWeights(alpha=2.0)


def test_full_total_combines_reports():
    r = LossReport(l_amce_teacher=0.5, l_cosine=0.2, classifier_total=1.5)
    assert r.full_total(LossWeights(0.5, 0.3)) == pytest.approx(1.5 - 0.15 + 0.14)


def test_classifier_loss_matches_separate_terms():
    arch, state, s = tiny_problem(3)
    x_mix = generate(arch, s.X, s.lam, state.generator, state.encoder, 3)[0].data
    _, report = classifier_loss(state, s.X, s.Y, s.lam, x_mix, 0.5, training=False)
    net = network_fn(arch, state.classifier)
    y_mix = mix_labels(s.Y, s.lam)
    assert report.l_amce == pytest.approx(float(amce_loss(net, x_mix, y_mix).data), abs=1e-12)
    assert report.l_mce == pytest.approx(float(mce_loss(net, s.X, s.lam, y_mix).data), abs=1e-12)
    assert report.l_ace == pytest.approx(float(ace_loss(net, s.X, s.Y, s.lam).data), abs=1e-12)
    assert report.classifier_total == pytest.approx(report.l_amce + 0.5 * report.l_mce + 0.5 * report.l_ace, abs=1e-12)
    assert np.allclose(linear_mix(s.X, s.lam).shape, x_mix.shape)


@pytest.mark.parametrize("seed", range(3))
def test_generator_objective_grad(seed):
    _, state, s = tiny_problem(seed)
    names = sorted(state.generator)

    def f(*arrays):
        return generator_loss(state, s.X, s.Y, s.lam, 0.3, dict(zip(names, arrays)))[0]

    assert dm.grad_check(f, [state.generator[k] for k in names]) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_classifier_objective_grad(seed):
    arch, state, s = tiny_problem(seed)
    x_mix = generate(arch, s.X, s.lam, state.generator, state.encoder, 3)[0].data
    names = ["head.weight", "head.bias", "stage1.block0.bn1.gamma", "stem.conv.weight"]

    def f(*arrays):
        p = dict(state.classifier.params)
        p.update(zip(names, arrays))
        return classifier_loss(state, s.X, s.Y, s.lam, x_mix, 0.5, p, training=True, update_stats=False)[0]

    assert dm.grad_check(f, [state.classifier.params[k] for k in names]) < 1e-4


def _track(params):
    return {k: dm.Tensor(v, requires_grad=True) for k, v in params.items()}


def _untouched(params):
    return all(t.grad is None or not t.grad.any() for t in params.values())


@pytest.mark.parametrize("seed", range(3))
def test_no_gradient_reaches_teacher_or_encoder(seed):
    arch, state, s = tiny_problem(seed)
    state.teacher.params = _track(state.teacher.params)
    state.encoder.params = _track(state.encoder.params)
    state.classifier.params = _track(state.classifier.params)
    theta = _track(state.generator)
    with dm.Tape() as tape:
        total, _, x_mix = generator_loss(state, s.X, s.Y, s.lam, 0.3, theta)
        tape.backward(total)
    assert _untouched(state.teacher.params) and _untouched(state.encoder.params)
    assert _untouched(state.classifier.params)
    assert any(t.grad is not None and t.grad.any() for t in theta.values())
    with dm.Tape() as tape:
        total, _ = classifier_loss(state, s.X, s.Y, s.lam, x_mix.data, 0.5, state.classifier.params, update_stats=False)
        tape.backward(total)
    assert _untouched(state.teacher.params) and _untouched(state.encoder.params)
    assert any(t.grad is not None and t.grad.any() for t in state.classifier.params.values())
