"""Dense-layer math, parameter storage, and gradient checking.

Everything here works on float64 numpy arrays. Model state lives in a
ParamStore: a flat dict of named tensors plus Adam moment slots, so the
optimizer and the checkpoint writer never need to know the model layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .rng import RngStream

__all__ = [
    "Matrix",
    "ParamStore",
    "RngStream",
    "as_matrix",
    "xavier_init",
    "relu",
    "dense_forward",
    "dense_backward",
    "adam_step",
    "finite_diff_check",
]

# Plain numpy arrays are the matrix type; as_matrix is the checked entry point.
Matrix = np.ndarray


def as_matrix(arr: object, name: str = "array") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {out.shape}")
    return np.ascontiguousarray(out)


@dataclass
class ParamStore:
    """Named tensors plus optimizer state.

    ``m`` and ``v`` are the Adam first/second moment estimates, lazily
    created with the same keys as ``tensors``. ``step`` counts completed
    optimizer updates and drives bias correction.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise ContractError(f"tensor {name!r} already registered")
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def copy(self) -> "ParamStore":
        return ParamStore(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            step=self.step,
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
        )


def xavier_init(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    For a 1-D shape (a bias) fan_in is the length and fan_out is 1. Biases
    are drawn rather than zeroed so every tensor goes through the same
    initializer.
    """
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise DimensionError(f"xavier_init supports 1-D or 2-D shapes, got {shape}")
    if fan_in <= 0 or fan_out <= 0:
        raise ContractError(f"shape entries must be positive, got {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# cache layout: (x, w, pre-activation, activation name)
DenseCache = tuple[np.ndarray, np.ndarray, np.ndarray, str]

_ACTIVATIONS = ("relu", "identity")


def dense_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, activation: str = "identity"
) -> tuple[np.ndarray, DenseCache]:
    """Affine layer y = act(x @ w + b).

    ``x`` is (n, d_in) or (d_in,); the cache feeds dense_backward.
    """
    if activation not in _ACTIVATIONS:
        raise ContractError(f"unknown activation {activation!r}")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"dense_forward expects x 2-D, w 2-D, b 1-D; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"incompatible dense shapes: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    pre = x @ w + b
    out = relu(pre) if activation == "relu" else pre
    if squeeze:
        out = out[0]
    return out, (x, w, pre, activation)


def dense_backward(
    d_out: np.ndarray, cache: DenseCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) for dense_forward given upstream d_out."""
    x, w, pre, activation = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    squeeze = d_out.ndim == 1
    if squeeze:
        d_out = d_out[None, :]
    if d_out.shape != pre.shape:
        raise DimensionError(
            f"d_out shape {d_out.shape} does not match forward output {pre.shape}"
        )
    if activation == "relu":
        d_pre = d_out * (pre > 0.0)
    else:
        d_pre = d_out
    dx = d_pre @ w.T
    dw = x.T @ d_pre
    db = d_pre.sum(axis=0)
    if squeeze:
        dx = dx[0]
    return dx, dw, db


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update over every tensor in the store, in place.

    The gradient dict must cover exactly the registered tensors; a missing
    or extra key means the caller built the wrong computation graph, which
    should fail loudly rather than silently freeze a layer.
    """
    if set(grads.keys()) != set(store.tensors.keys()):
        missing = sorted(set(store.tensors) - set(grads))
        extra = sorted(set(grads) - set(store.tensors))
        raise ContractError(
            f"gradient keys do not match parameters (missing {missing}, extra {extra})"
        )
    store.step += 1
    t = store.step
    for name, theta in store.tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {g.shape}, parameter is {theta.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
        if name not in store.m:
            store.m[name] = np.zeros_like(theta)
            store.v[name] = np.zeros_like(theta)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    h: float = 1e-6,
    sample: int | None = None,
) -> dict[str, float]:
    """Compare analytic gradients against central differences.

    ``loss_fn`` maps a parameter dict to (loss, grads). Returns the max
    relative error per tensor, where relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6). ``sample``
    caps the number of coordinates probed per tensor (chosen by a fixed
    rng so reruns probe the same spots).
    """
    if h <= 0:
        raise ContractError("h must be positive")
    _, analytic = loss_fn(params)
    if set(analytic.keys()) != set(params.keys()):
        raise ContractError("loss_fn returned gradients for a different key set")
    pick_rng = np.random.default_rng(0)
    errors: dict[str, float] = {}
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for name in sorted(params.keys()):
        theta = work[name]
        n_coords = theta.size
        if sample is not None and sample < n_coords:
            idx = pick_rng.choice(n_coords, size=sample, replace=False)
        else:
            idx = np.arange(n_coords)
        flat = theta.reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_fn(work)
            flat[i] = orig - h
            down, _ = loss_fn(work)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
        errors[name] = worst
    return errors
