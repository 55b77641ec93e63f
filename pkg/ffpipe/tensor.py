# ffpipe/tensor.py
"""
Dense linear algebra helpers, activations, initialization and Adam.

Matrices are 2-D numpy arrays. float64 inputs go through a fixed-order
accumulating matmul so results are bit-reproducible and equal to the naive
triple loop; float32 inputs use BLAS for speed.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .exceptions import DimensionError, NumericError


Matrix = np.ndarray

NORM_FLOOR = 1e-12

# Independent random streams derived from one base seed.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_NEG = 3
STREAM_PARTITION = 4
STREAM_BLOBS = 5
STREAM_HEAD = 6


def derive_seed(base_seed: int, *keys: int) -> int:
    """
    Derive a child seed from a base seed and a tuple of integer keys.

    The same (base_seed, keys) always yields the same seed, on any node.

    Args:
        base_seed: Run-level seed (non-negative)
        *keys: Stream tag and indices (layer, chapter, epoch, ...)

    Returns:
        A 63-bit integer seed
    """
    seq = np.random.SeedSequence([int(base_seed), *(int(k) for k in keys)])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def get_rng(seed: int) -> np.random.Generator:
    """Return a numpy Generator seeded with ``seed``."""
    return np.random.default_rng(seed)


def ensure_finite(x: np.ndarray, what: str) -> np.ndarray:
    """Raise NumericError if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise NumericError(what)
    return x


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Matrix product a @ b.

    Args:
        a: m x k matrix
        b: k x n matrix

    Returns:
        m x n matrix

    Raises:
        DimensionError: If a.cols != b.rows
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    dtype = np.result_type(a, b)
    if dtype != np.float64:
        return np.matmul(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    # k ascending: out[i, j] == ((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0)


def row_normalize(x: Matrix) -> Matrix:
    """
    Scale each row to unit L2 norm.

    Rows whose norm is below 1e-12 are returned unchanged.
    """
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    safe = norms >= NORM_FLOOR
    return np.where(safe, x / np.where(safe, norms, 1), x).astype(x.dtype, copy=False)


def softmax_rows(x: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction."""
    z = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def log_softmax_rows(x: Matrix) -> Matrix:
    z = x - np.max(x, axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: exact 0.5 at zero, no overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, z)


def init_layer(in_dim: int,
               out_dim: int,
               rng_seed: int,
               dtype: np.dtype = np.float64) -> Tuple[Matrix, np.ndarray]:
    """
    Initialize a dense layer.

    Weights are uniform in [-1/sqrt(in_dim), +1/sqrt(in_dim)], bias is zero.

    Args:
        in_dim: Fan-in
        out_dim: Fan-out
        rng_seed: Seed; identical seeds give identical weights
        dtype: Array dtype

    Returns:
        (weights in_dim x out_dim, bias of length out_dim)
    """
    if in_dim < 1 or out_dim < 1:
        raise DimensionError("init_layer", (in_dim,), (out_dim,))
    limit = 1.0 / np.sqrt(in_dim)
    rng = get_rng(rng_seed)
    weights = rng.uniform(-limit, limit, size=(in_dim, out_dim)).astype(dtype)
    bias = np.zeros(out_dim, dtype=dtype)
    return weights, bias


@dataclass
class AdamState:
    """First/second moment estimates for one parameter array."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> 'AdamState':
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **hyper)

    def copy(self) -> 'AdamState':
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """
    Apply one bias-corrected Adam update.

    Args:
        param: Parameter array
        grad: Gradient with the same shape
        state: Moment state for ``param``; updated in place, t += 1
        lr: Learning rate

    Returns:
        The updated parameter array (a new array)

    Raises:
        DimensionError: If shapes disagree
    """
    if grad.shape != param.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError("adam_step", param.shape, grad.shape)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * (grad * grad)
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return (param - update).astype(param.dtype, copy=False)


def softmax_cross_entropy(logits: Matrix, labels: np.ndarray) -> Tuple[float, Matrix]:
    """
    Mean cross-entropy of integer labels under softmax(logits).

    Returns:
        (loss, dL/dlogits)
    """
    labels = np.asarray(labels)
    n = len(labels)
    log_p = log_softmax_rows(logits)
    loss = float(-np.mean(log_p[np.arange(n), labels]))
    grad = softmax_rows(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
