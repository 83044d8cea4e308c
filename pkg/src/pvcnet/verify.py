"""Finite-difference gradient suite shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import BatchNormState, Tape, Tensor, backward, grad_check
from .model import Model, NetworkConfig, build, spp_forward

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_error: float
    checked: int
    kinks: int

    @property
    def ok(self) -> bool:
        return self.max_error <= TOLERANCE and self.checked > 0


def _weights(rng, shape):
    return rng.normal(size=shape)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    def run(name, fn, point):
        r = grad_check(fn, point, STEP)
        out.append(CheckResult(name, r.max_error, r.checked, len(r.kinks)))

    x3 = rng.normal(size=(2, 3, 11))
    w_proj = _weights(rng, (2, 3, 11))
    k = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    proj4 = _weights(rng, (2, 4, 11))

    def proj(t, w):
        return ad.tensor_sum(ad.mul(t, Tensor(w)))

    run("conv1d/input", lambda t: proj(ad.conv1d(t, k, b), proj4), x3)
    run("conv1d/kernel", lambda t: proj(ad.conv1d(x3, t, b), proj4), k)
    run("conv1d/bias", lambda t: proj(ad.conv1d(x3, k, t), proj4), b)
    proj_v = _weights(rng, (2, 4, 5))
    run("conv1d/valid-stride2", lambda t: proj(ad.conv1d(t, k, b, "valid", 2), proj_v), x3)
    k4 = rng.normal(size=(4, 3, 4))
    run("conv1d/even-kernel", lambda t: proj(ad.conv1d(t, k4, b), proj4), x3)

    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    st = BatchNormState.fresh(3)
    run("batchnorm/train-input",
        lambda t: proj(ad.batchnorm1d(t, gamma, beta, st, "train", update_stats=False), w_proj), x3)
    run("batchnorm/gamma",
        lambda t: proj(ad.batchnorm1d(x3, t, beta, st, "train", update_stats=False), w_proj), gamma)
    run("batchnorm/beta",
        lambda t: proj(ad.batchnorm1d(x3, gamma, t, st, "train", update_stats=False), w_proj), beta)
    warm = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2, size=3), 1)
    run("batchnorm/infer-input",
        lambda t: proj(ad.batchnorm1d(t, gamma, beta, warm, "infer"), w_proj), x3)

    run("relu", lambda t: proj(ad.relu(t), w_proj), x3)
    run("sigmoid", lambda t: proj(ad.sigmoid(t), w_proj), x3 * 3)
    proj_p = _weights(rng, (2, 3, 5))
    run("maxpool1d", lambda t: proj(ad.maxpool1d(t, 2, 2), proj_p), x3)
    proj_p3 = _weights(rng, (2, 3, 5))
    run("maxpool1d/overlap", lambda t: proj(ad.maxpool1d(t, 3, 2), proj_p3), x3)
    run("avgpool1d", lambda t: proj(ad.avgpool1d(t, 2, 2), proj_p), x3)
    y3 = rng.normal(size=(2, 2, 11))
    proj_c = _weights(rng, (2, 5, 11))
    run("concat/a", lambda t: proj(ad.concat_channels(t, y3), proj_c), x3)
    run("concat/b", lambda t: proj(ad.concat_channels(x3, t), proj_c), y3)
    x2 = rng.normal(size=(3, 6))
    w2, b2 = rng.normal(size=(2, 6)), rng.normal(size=2)
    proj_l = _weights(rng, (3, 2))
    run("linear/input", lambda t: proj(ad.linear(t, w2, b2), proj_l), x2)
    run("linear/weight", lambda t: proj(ad.linear(x2, t, b2), proj_l), w2)
    run("linear/bias", lambda t: proj(ad.linear(x2, w2, t), proj_l), b2)
    proj_s = _weights(rng, (2, 15))
    run("spp[1,4]", lambda t: proj(spp_forward(t, [1, 4]), proj_s), x3)

    y = np.array([1, 0, 0, 1, 0])
    p = rng.uniform(0.05, 0.95, size=5)
    run("weighted_bce", lambda t: losses.weighted_bce(t, y), p)
    run("focal_loss", lambda t: losses.focal_loss(t, y, 3.0), p)

    # conv -> relu -> linear composite
    wl = rng.normal(size=(1, 44))
    run("conv+relu+linear",
        lambda t: ad.tensor_sum(ad.linear(ad.flatten(ad.relu(ad.conv1d(t, k, b))), wl)), x3)
    return out


def model_gradient_check(model: Model, x: np.ndarray, y: np.ndarray, loss: str = "weighted",
                         max_coords: int | None = None, seed: int = 0) -> CheckResult:
    """Check every parameter tensor of ``model`` against central differences.

    Train-mode batch norm is evaluated without touching running statistics.
    ``max_coords`` samples that many coordinates per parameter tensor.
    """
    fn_loss = losses.loss_fn(loss)
    params = model.parameters()
    with Tape():
        probs = model.forward(x, "train", update_stats=False)
        grads = backward(fn_loss(probs, y), params)
    grads = {k: v.copy() for k, v in grads.items()}

    def value() -> float:
        return float(fn_loss(model.forward(x, "train", update_stats=False), y).data.item())

    rng = np.random.default_rng(seed)
    worst, checked, kinks = 0.0, 0, 0
    f0 = value()
    for p in params:
        flat = p.tensor.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        g = grads[p.name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + STEP
            fp = value()
            flat[i] = orig - STEP
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * STEP)
            if abs((fp - f0) - (f0 - fm)) / STEP > 1e-3 * max(1.0, abs(num)):
                kinks += 1
                continue
            err = abs(g[i] - num) / max(1.0, abs(g[i]), abs(num))
            worst = max(worst, err)
            checked += 1
    return CheckResult(f"model/{model.config.variant}/{loss}", worst, checked, kinks)


def tiny_model(seed: int = 0) -> Model:
    # length 16 leaves 2 positions at the head, so the pyramid stops at 2 bins
    return build(NetworkConfig(growth=4, block_layers=[1, 1, 1], stem_filters=4, spp_levels=[1, 2], seed=seed))


def run_suite(seed: int = 0) -> list[CheckResult]:
    results = primitive_checks(seed)
    rng = np.random.default_rng(seed + 1)
    m = tiny_model(seed)
    x = rng.normal(size=(4, 1, 16))
    y = np.array([1, 0, 0, 1])
    results.append(model_gradient_check(m, x, y, "weighted"))
    results.append(model_gradient_check(m, x, y, "focal"))
    return results
