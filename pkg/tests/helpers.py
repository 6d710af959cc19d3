"""Shared test oracles: finite differences, relative error, routing reference."""

import numpy as np

from stmoe.tensor import Tensor


def np_softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def soft_moe_reference(tokens, phi, w1, b1, w2, b2, num_experts, slots_per_expert):
    """Straight-line routing reimplementation with explicit expert/slot loops."""
    logits = tokens @ phi
    dispatch = np_softmax(logits, axis=0)
    combine = np_softmax(logits, axis=1)
    slot_inputs = dispatch.T @ tokens
    slot_outputs = np.zeros_like(slot_inputs)
    for e in range(num_experts):
        for p in range(slots_per_expert):
            slot = e * slots_per_expert + p
            h = np.maximum(slot_inputs[slot] @ w1[e] + b1[e, 0], 0)
            slot_outputs[slot] = h @ w2[e] + b2[e, 0]
    return combine @ slot_outputs, dispatch, combine


def finite_diff_grad(loss_fn, param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. one parameter.

    Independent of the autodiff path: perturbs raw entries and re-runs
    the forward computation.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = loss_fn()
        flat[i] = orig - h
        minus = loss_fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
