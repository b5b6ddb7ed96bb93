"""Fast built-in property checks, run by ``advmix selftest``.

These mirror the heavier pytest suite at reduced size so an installed
package can check itself without the test tree.
"""

from __future__ import annotations

import time

import numpy as np

from . import diffmath as dm
from .config import TrainConfig
from .mixblock import generate, init_generator
from .model import Architecture, init_classifier, init_state
from .objectives import classifier_loss, generator_loss
from .trainer import MixSets, classifier_step, generator_step


def _tiny(seed: int):
    rng = np.random.default_rng(seed)
    arch = Architecture(1, 8, 3, (4, 4, 8, 8), 1)
    state = init_state(arch, 3, rng)
    K, N = 2, 2
    X = rng.uniform(size=(K, N, 1, 8, 8))
    Y = np.eye(3)[rng.integers(0, 3, size=(K, N))]
    lam = rng.dirichlet(np.ones(N), size=K)
    return arch, state, MixSets(X, Y, lam)


def check_primitive_grads() -> bool:
    rng = np.random.default_rng(0)
    c = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    cases = [
        (lambda x: dm.sum_(dm.mul(dm.softmax(x, 1), c)), rng.normal(size=(3, 4))),
        (lambda x: dm.sum_(dm.mul(dm.conv2d(x, w, stride=2, padding=1), 1.0)), rng.normal(size=(2, 2, 5, 5))),
        (lambda x: dm.sum_(dm.mul(dm.upsample_bilinear(x, (5, 7)), np.arange(35.0).reshape(5, 7))), rng.normal(size=(2, 3, 4))),
    ]
    return all(dm.grad_check(f, x) < 1e-5 for f, x in cases)


def check_generator_grad() -> bool:
    arch, state, s = _tiny(0)
    names = sorted(state.generator)

    def f(*arrays):
        theta = dict(zip(names, arrays))
        total, _, _ = generator_loss(state, s.X, s.Y, s.lam, 0.3, theta)
        return total

    return dm.grad_check(f, [state.generator[k] for k in names]) < 1e-4


def check_masks() -> bool:
    rng = np.random.default_rng(0)
    arch = Architecture(3, 16, 3, (4, 6, 8, 8), 1)
    for n in (2, 3, 4, 5):
        clf = init_classifier(arch, rng)
        enc = clf.prefix(3)
        theta = init_generator(8, rng)
        X = rng.uniform(size=(3, n, 3, 16, 16))
        lam = rng.dirichlet(np.ones(n), size=3)
        x_mix, masks = generate(arch, X, lam, theta, enc, 3)
        if np.abs(masks.data.sum(axis=1) - 1).max() > 1e-5:
            return False
        if np.any(x_mix.data < X.min(axis=1) - 1e-6) or np.any(x_mix.data > X.max(axis=1) + 1e-6):
            return False
    return True


def check_isolation() -> bool:
    arch, state, s = _tiny(1)
    cfg = TrainConfig(n_mix=2, batch_size=4).resolved()
    before = state.clone()
    classifier_step(state, s, cfg, {}, 0.01)
    ok = all(np.array_equal(state.generator[k], before.generator[k]) for k in state.generator)
    ok &= all(np.array_equal(state.teacher.params[k], before.teacher.params[k]) for k in state.teacher.params)
    mid = state.clone()
    generator_step(state, s, cfg, 0.01)
    ok &= all(np.array_equal(state.classifier.params[k], mid.classifier.params[k]) for k in state.classifier.params)
    ok &= all(np.array_equal(state.encoder.params[k], mid.encoder.params[k]) for k in state.encoder.params)
    return bool(ok)


def check_descent() -> bool:
    arch, state, s = _tiny(2)
    x_mix = generate(arch, s.X, s.lam, state.generator, state.encoder, 3)[0].data
    cfg = TrainConfig(n_mix=2, batch_size=4, momentum=0.0, weight_decay=0.0).resolved()

    def value():
        return classifier_loss(state, s.X, s.Y, s.lam, x_mix, cfg.alpha)[1].classifier_total

    v0 = value()
    classifier_step(state, s, cfg, {}, 1e-4, x_mix)
    return value() < v0


CHECKS = {
    "primitive gradients": check_primitive_grads,
    "generator objective gradient": check_generator_grad,
    "mask normalization and convexity": check_masks,
    "parameter isolation": check_isolation,
    "classifier descent": check_descent,
}


def run_all(verbose: bool = False) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            passed = bool(fn())
        except Exception as exc:  # reported, not raised
            passed = False
            name = f"{name} ({exc})"
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}  [{time.perf_counter() - t0:.2f}s]")
    return ok
