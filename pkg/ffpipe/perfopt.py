# ffpipe/perfopt.py
"""
Performance-optimized layer training.

Every FF layer gets its own softmax classifier. A layer and its classifier are
trained together by backpropagating cross-entropy through exactly those two
layers; the layer's input is the detached, normalized output of the layer
below. No negative data is involved and images carry no label overlay.
"""
from dataclasses import dataclass
from typing import Literal, Sequence, Tuple

import numpy as np

from .exceptions import DimensionError, ValidationError
from .layers import FFLayer, forward
from .tensor import (
    AdamState,
    Matrix,
    adam_step,
    ensure_finite,
    init_layer,
    log_softmax_rows,
    matmul,
    row_normalize,
    softmax_cross_entropy,
)

PerfOptMode = Literal['last', 'all']


@dataclass
class PerLayerHead:
    """Softmax classifier attached to one FF layer."""
    weights: Matrix
    bias: np.ndarray
    adam_w: AdamState
    adam_b: AdamState
    layer_index: int

    @classmethod
    def create(cls,
               layer_width: int,
               num_classes: int,
               layer_index: int,
               rng_seed: int,
               dtype: np.dtype = np.float64) -> 'PerLayerHead':
        weights, bias = init_layer(layer_width, num_classes, rng_seed, dtype=dtype)
        return cls(weights, bias, AdamState.zeros_like(weights), AdamState.zeros_like(bias), layer_index)

    def copy(self) -> 'PerLayerHead':
        return PerLayerHead(self.weights.copy(), self.bias.copy(),
                            self.adam_w.copy(), self.adam_b.copy(), self.layer_index)


def perfopt_objective(layer: FFLayer,
                      head: PerLayerHead,
                      x_in: Matrix,
                      labels: np.ndarray) -> Tuple[float, Matrix, np.ndarray, Matrix, np.ndarray]:
    """
    Cross-entropy of head(relu(x_in W + b)) and its gradients.

    Returns:
        (loss, dW, db, dW_head, db_head)
    """
    if layer.out_dim != head.weights.shape[0]:
        raise DimensionError("perfopt head", layer.weights.shape, head.weights.shape)
    z = matmul(x_in, layer.weights) + layer.bias
    y = np.maximum(z, 0)
    logits = matmul(y, head.weights) + head.bias
    loss, d_logits = softmax_cross_entropy(logits, labels)

    grad_wh = matmul(y.T, d_logits)
    grad_bh = np.sum(d_logits, axis=0)
    d_z = matmul(d_logits, head.weights.T) * (z > 0)
    grad_w = matmul(x_in.T, d_z)
    grad_b = np.sum(d_z, axis=0)
    dtype = layer.weights.dtype
    return (loss, grad_w.astype(dtype, copy=False), grad_b.astype(dtype, copy=False),
            grad_wh.astype(dtype, copy=False), grad_bh.astype(dtype, copy=False))


def train_perfopt_layer(layer: FFLayer,
                        head: PerLayerHead,
                        x_in: Matrix,
                        labels: np.ndarray,
                        lr: float) -> float:
    """
    One Adam step on a layer and its head.

    Args:
        layer: FF layer, updated in place
        head: The layer's classifier, updated in place
        x_in: Normalized output of the previous layer (or the normalized image for the first layer)
        labels: True classes
        lr: Learning rate for both

    Returns:
        Cross-entropy loss before the update
    """
    if x_in.ndim != 2 or x_in.shape[1] != layer.in_dim:
        raise DimensionError("train_perfopt_layer", x_in.shape, layer.weights.shape)
    loss, grad_w, grad_b, grad_wh, grad_bh = perfopt_objective(layer, head, x_in, labels)
    ensure_finite(np.asarray(loss), "perfopt loss")
    layer.weights = adam_step(layer.weights, grad_w, layer.adam_w, lr)
    layer.bias = adam_step(layer.bias, grad_b, layer.adam_b, lr)
    head.weights = adam_step(head.weights, grad_wh, head.adam_w, lr)
    head.bias = adam_step(head.bias, grad_bh, head.adam_b, lr)
    return loss


def perfopt_log_probs(layers: Sequence[FFLayer],
                      heads: Sequence[PerLayerHead],
                      images: Matrix) -> Tuple[Matrix, ...]:
    """Per-layer head log-probabilities for raw images."""
    if len(layers) != len(heads):
        raise ValidationError(f"{len(layers)} layers but {len(heads)} perfopt heads")
    out = []
    h = row_normalize(images)
    for layer, head in zip(layers, heads):
        y = forward(layer, h)
        out.append(log_softmax_rows(matmul(y, head.weights) + head.bias))
        h = row_normalize(y)
    return tuple(out)


def predict_perfopt_batch(layers: Sequence[FFLayer],
                          heads: Sequence[PerLayerHead],
                          images: Matrix,
                          mode: PerfOptMode = 'all') -> np.ndarray:
    log_probs = perfopt_log_probs(layers, heads, images)
    if mode == 'last':
        combined = log_probs[-1]
    elif mode == 'all':
        combined = np.mean(np.stack(log_probs), axis=0)
    else:
        raise ValidationError(f"Unknown perfopt prediction mode: {mode}")
    return np.argmax(combined, axis=1)


def predict_perfopt(layers: Sequence[FFLayer],
                    heads: Sequence[PerLayerHead],
                    image: np.ndarray,
                    mode: PerfOptMode = 'all') -> int:
    """
    Classify one raw image.

    Args:
        mode: 'last' uses the final head; 'all' averages log-probabilities of every head
    """
    return int(predict_perfopt_batch(layers, heads, image.reshape(1, -1), mode)[0])
