"""Two-layer perceptron with hand-written backpropagation.

Parameters live in a plain dict ``{"W1", "b1", "W2", "b2"}`` so deltas can be
flattened, averaged and compared as vectors.  Extra non-trainable entries:
``x_mean`` and ``x_scale`` standardize every input pixel before the first
layer, and ``steps`` counts the updates applied to the model.
"""
from __future__ import annotations

import numpy as np

PARAM_KEYS = ("W1", "b1", "W2", "b2")


def input_stats(x: np.ndarray, floor: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and (floored) std of a clean image set."""
    xr = x.reshape(len(x), -1)
    return xr.mean(axis=0), xr.std(axis=0) + floor


def init_params(input_dim: int, classes: int, hidden: int = 128, seed: int = 0,
                x_mean=None, x_scale=None) -> dict:
    rng = np.random.default_rng(seed)
    return {
        "x_mean": np.zeros(input_dim) if x_mean is None else np.asarray(x_mean, float).ravel(),
        "x_scale": np.ones(input_dim) if x_scale is None else np.asarray(x_scale, float).ravel(),
        "W1": rng.normal(0.0, np.sqrt(2.0 / input_dim), (input_dim, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, classes)),
        "b2": np.zeros(classes),
        "steps": np.zeros((), dtype=np.int64),
    }


def flatten(params: dict) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in PARAM_KEYS])


def unflatten(vec: np.ndarray, like: dict) -> dict:
    out, off = {}, 0
    for k in PARAM_KEYS:
        n = like[k].size
        out[k] = vec[off:off + n].reshape(like[k].shape)
        off += n
    return out


def num_params(params: dict) -> int:
    return sum(params[k].size for k in PARAM_KEYS)


def _as_rows(params: dict, x: np.ndarray) -> np.ndarray:
    return (x.reshape(len(x), -1) - params["x_mean"]) / params["x_scale"]


def hidden(params: dict, x: np.ndarray) -> np.ndarray:
    """Last hidden layer activations (the feature map)."""
    return np.maximum(_as_rows(params, x) @ params["W1"] + params["b1"], 0.0)


def logits(params: dict, x: np.ndarray) -> np.ndarray:
    return hidden(params, x) @ params["W2"] + params["b2"]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(params: dict, x: np.ndarray, batch: int = 2048) -> np.ndarray:
    return np.concatenate([logits(params, x[i:i + batch]).argmax(axis=1)
                           for i in range(0, len(x), batch)]) if len(x) else np.zeros(0, int)


def accuracy(params: dict, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(params, x) == y)) if len(y) else float("nan")


def loss(params: dict, x: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    z = logits(params, x)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_grads(params: dict, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient with respect to every parameter."""
    xr = _as_rows(params, x)
    n = len(xr)
    pre = xr @ params["W1"] + params["b1"]
    h = np.maximum(pre, 0.0)
    z = h @ params["W2"] + params["b2"]
    p = softmax(z)
    nll = -np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean()
    dz = p
    dz[np.arange(n), y] -= 1.0
    dz /= n
    dh = (dz @ params["W2"].T) * (pre > 0)
    grads = {
        "W1": xr.T @ dh,
        "b1": dh.sum(axis=0),
        "W2": h.T @ dz,
        "b2": dz.sum(axis=0),
    }
    return float(nll), grads


def input_grad(params: dict, x: np.ndarray, y) -> np.ndarray:
    """Gradient of the per-sample cross-entropy with respect to the input pixels."""
    single = x.ndim == 2
    xb = x[None] if single else x
    yb = np.atleast_1d(y)
    xr = _as_rows(params, xb)
    pre = xr @ params["W1"] + params["b1"]
    p = softmax(np.maximum(pre, 0.0) @ params["W2"] + params["b2"])
    dz = p
    dz[np.arange(len(yb)), yb] -= 1.0
    dx = ((dz @ params["W2"].T) * (pre > 0)) @ params["W1"].T / params["x_scale"]
    dx = dx.reshape(xb.shape)
    return dx[0] if single else dx
