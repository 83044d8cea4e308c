"""Class-weighted binary cross-entropy and its focal variant.

Both losses are sums over the batch (not means) and are oriented for
minimization. Class weights come from the batch itself: a class holding
a fraction ``f`` of the batch gets weight ``1 - f``.
"""

from __future__ import annotations

import logging
from decimal import Decimal

import numpy as np

from .autodiff import Tensor, _make, _as_tensor

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-12

# number of times clamping fired since the last reset
clamp_events = 0


def reset_clamp_events() -> None:
    global clamp_events
    clamp_events = 0


def class_weights(targets) -> tuple[float, float]:
    """Return ``(eta_pvc, eta_nonpvc)`` for a batch of binary targets."""
    t = np.asarray(targets)
    n = t.size
    if n == 0:
        raise ValueError("class weights need a nonempty batch")
    n_pvc = int(np.count_nonzero(t == 1))
    return 1.0 - n_pvc / n, 1.0 - (n - n_pvc) / n


def _clamp(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    global clamp_events
    clipped = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    fired = clipped != p
    if fired.any():
        clamp_events += int(fired.sum())
        log.debug("probability clamped for %d samples", int(fired.sum()))
    return clipped, ~fired


def _prepare(outputs, targets):
    outputs = _as_tensor(outputs)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if outputs.data.shape != y.shape:
        raise ValueError(f"outputs {outputs.data.shape} and targets {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be 0 or 1")
    eta_pvc, eta_non = class_weights(y)
    eta = np.where(y == 1, eta_pvc, eta_non)
    return outputs, y, eta


def weighted_bce(outputs, targets, weighted: bool = True) -> Tensor:
    """``-sum eta * [y ln p + (1 - y) ln(1 - p)]``.

    With ``weighted=False`` every weight is 1 (the unweighted ablation).
    """
    outputs, y, eta = _prepare(outputs, targets)
    if not weighted:
        eta = np.ones_like(eta)
    p, live = _clamp(outputs.data)
    terms = eta * (y * np.log(p) + (1 - y) * np.log(1 - p))
    value = -np.sum(terms)

    def _backward(g):
        grad = -eta * (y / p - (1 - y) / (1 - p))
        return (g * grad * live,)

    return _make(np.array(value), "weighted_bce", (outputs,), _backward)


def focal_loss(outputs, targets, gamma: float = 3.0, weighted: bool = True) -> Tensor:
    """``-sum eta * (1 - p_t)**gamma * ln p_t`` with ``p_t`` the true-class probability."""
    outputs, y, eta = _prepare(outputs, targets)
    if not weighted:
        eta = np.ones_like(eta)
    p, live = _clamp(outputs.data)
    pt = np.where(y == 1, p, 1 - p)
    mod = (1 - pt) ** gamma
    log_pt = np.log(pt)
    terms = eta * (mod * log_pt)
    value = -np.sum(terms)

    def _backward(g):
        dmod = gamma * (1 - pt) ** (gamma - 1) if gamma != 0 else np.zeros_like(pt)
        d_pt = -eta * (-dmod * log_pt + mod / pt)
        sign = np.where(y == 1, 1.0, -1.0)
        return (g * d_pt * sign * live,)

    return _make(np.array(value), "focal_loss", (outputs,), _backward)


def modulating_factor(output: float, target: int, gamma: float = 3.0) -> float:
    """``(1 - p_t)**gamma`` for one sample, evaluated in decimal arithmetic.

    Working from the shortest decimal form of ``output`` keeps hand-checkable
    cases exact: ``(1 - 0.9)**3`` returns ``0.001`` rather than ``0.000999...``.
    """
    p = Decimal(repr(float(output)))
    pt = p if target == 1 else 1 - p
    return float((1 - pt) ** Decimal(repr(float(gamma))))


def loss_fn(kind: str, gamma: float = 3.0, weighted: bool = True):
    """Return ``f(outputs, targets) -> Tensor`` for ``kind`` in {weighted, focal, unweighted}."""
    if kind == "weighted":
        return lambda o, t: weighted_bce(o, t, weighted)
    if kind == "unweighted":
        return lambda o, t: weighted_bce(o, t, False)
    if kind == "focal":
        return lambda o, t: focal_loss(o, t, gamma, weighted)
    raise ValueError(f"unknown loss {kind!r}; choose weighted, unweighted or focal")
