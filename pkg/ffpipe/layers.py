# ffpipe/layers.py
"""
Forward-Forward layers.

A layer is trained locally: positive inputs (images overlaid with their true
label) should produce goodness above ``theta``, negative inputs (wrong label)
goodness below it. Goodness is the sum of squared ReLU activations.

Every layer input is L2 row-normalized: the label-embedded image before the
first layer, the activations before each later one. A layer cannot read the
previous layer's goodness off the input magnitude, and the first layer does
not see raw pixel sums.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .exceptions import DimensionError, LabelRangeError, ValidationError
from .tensor import (
    AdamState,
    Matrix,
    adam_step,
    ensure_finite,
    init_layer,
    matmul,
    relu,
    row_normalize,
    sigmoid,
    softplus,
)

DEFAULT_THETA = 0.01
NEUTRAL_LABEL_VALUE = 0.1


@dataclass
class FFLayer:
    """One trainable layer with its optimizer state and threshold."""
    weights: Matrix
    bias: np.ndarray
    adam_w: AdamState
    adam_b: AdamState
    theta: float = DEFAULT_THETA

    def __post_init__(self):
        if self.theta < 0:
            raise ValidationError(f"theta must be >= 0 (got {self.theta})")
        if self.bias.shape != (self.weights.shape[1],):
            raise DimensionError("FFLayer bias", self.weights.shape, self.bias.shape)
        if self.adam_w.m.shape != self.weights.shape or self.adam_b.m.shape != self.bias.shape:
            raise DimensionError("FFLayer adam state", self.weights.shape, self.adam_w.m.shape)

    @classmethod
    def create(cls,
               in_dim: int,
               out_dim: int,
               rng_seed: int,
               theta: float = DEFAULT_THETA,
               dtype: np.dtype = np.float64) -> 'FFLayer':
        weights, bias = init_layer(in_dim, out_dim, rng_seed, dtype=dtype)
        return cls(weights, bias, AdamState.zeros_like(weights), AdamState.zeros_like(bias), theta)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> 'FFLayer':
        return FFLayer(self.weights.copy(), self.bias.copy(),
                       self.adam_w.copy(), self.adam_b.copy(), self.theta)


def _check_label(label: int, num_classes: int) -> None:
    if not 0 <= int(label) < num_classes:
        raise LabelRangeError(label, num_classes)


def embed_label(image: np.ndarray, label: int, num_classes: int) -> np.ndarray:
    """
    Overlay a 1-of-C label on the first ``num_classes`` pixels.

    Args:
        image: Flat pixel vector in [0, 1]
        label: Class index to encode
        num_classes: Number of classes

    Returns:
        A copy of ``image`` with the label region replaced

    Raises:
        LabelRangeError: If label is outside [0, num_classes)
    """
    if image.shape[-1] < num_classes:
        raise DimensionError("embed_label", image.shape, (num_classes,))
    _check_label(label, num_classes)
    out = image.copy()
    out[:num_classes] = 0.0
    out[int(label)] = 1.0
    return out


def embed_labels(images: Matrix, labels: np.ndarray, num_classes: int) -> Matrix:
    """Batch form of embed_label: row i gets label ``labels[i]``."""
    if images.shape[1] < num_classes or images.shape[0] != len(labels):
        raise DimensionError("embed_labels", images.shape, (len(labels), num_classes))
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise LabelRangeError(bad, num_classes)
    out = images.copy()
    out[:, :num_classes] = 0.0
    out[np.arange(len(labels)), labels] = 1.0
    return out


def embed_neutral(image: np.ndarray, num_classes: int) -> np.ndarray:
    """Set the label region to the neutral value 0.1 in every position."""
    if image.shape[-1] < num_classes:
        raise DimensionError("embed_neutral", image.shape, (num_classes,))
    out = image.copy()
    out[..., :num_classes] = NEUTRAL_LABEL_VALUE
    return out


def forward(layer: FFLayer, x: Matrix) -> Matrix:
    """
    Raw layer activations relu(x W + b), not normalized.

    Raises:
        DimensionError: If x.cols != layer input dim
    """
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise DimensionError("forward", x.shape, layer.weights.shape)
    return relu(matmul(x, layer.weights) + layer.bias)


def goodness(activations: Matrix) -> np.ndarray:
    """Per-row sum of squared activations."""
    return np.sum(activations * activations, axis=1)


def p_real(g, theta: float = DEFAULT_THETA):
    """Probability that an input is positive: logistic(g - theta)."""
    return sigmoid(np.asarray(g) - theta)


def forward_network(layers: Sequence[FFLayer], x: Matrix) -> List[Matrix]:
    """
    Run ``x`` through every layer, normalizing each layer input.

    Returns:
        The raw (un-normalized) activations of each layer
    """
    raw = []
    h = row_normalize(x)
    for layer in layers:
        y = forward(layer, h)
        raw.append(y)
        h = row_normalize(y)
    return raw


def layer_input(layers: Sequence[FFLayer], x: Matrix, index: int) -> Matrix:
    """Input seen by ``layers[index]``: normalized x pushed through the layers below it."""
    h = row_normalize(x)
    for layer in layers[:index]:
        h = row_normalize(forward(layer, h))
    return h


def _pass_terms(layer: FFLayer, batch: Matrix, positive: bool) -> Tuple[float, Matrix, np.ndarray]:
    y = forward(layer, batch)
    s = goodness(y) - layer.theta
    if positive:
        loss = float(np.mean(softplus(-s)))
        dg = -(1.0 - sigmoid(s)) / len(batch)
    else:
        loss = float(np.mean(softplus(s)))
        dg = sigmoid(s) / len(batch)
    # dg/dy = 2y; the ReLU mask is implied since y == 0 where z <= 0
    dz = (2.0 * dg)[:, None] * y
    return loss, matmul(batch.T, dz), np.sum(dz, axis=0)


def ff_pass(layer: FFLayer, batch: Matrix, positive: bool) -> Tuple[float, Matrix, np.ndarray]:
    """
    Loss and gradient of a single positive or negative pass.

    The positive pass term is mean(-log sigmoid(g - theta)), the negative one
    mean(-log sigmoid(theta - g)).

    Returns:
        (loss, dL/dW, dL/db)
    """
    loss, grad_w, grad_b = _pass_terms(layer, batch, positive)
    return loss, grad_w.astype(layer.weights.dtype, copy=False), grad_b.astype(layer.bias.dtype, copy=False)


def ff_objective(layer: FFLayer, pos_batch: Matrix, neg_batch: Matrix) -> Tuple[float, Matrix, np.ndarray]:
    """
    Forward-Forward loss and its analytic gradient: the positive pass on
    ``pos_batch`` plus the negative pass on ``neg_batch``.

    Returns:
        (loss, dL/dW, dL/db)
    """
    loss_pos, grad_w_pos, grad_b_pos = _pass_terms(layer, pos_batch, positive=True)
    loss_neg, grad_w_neg, grad_b_neg = _pass_terms(layer, neg_batch, positive=False)
    loss = loss_pos + loss_neg
    grad_w = grad_w_pos + grad_w_neg
    grad_b = grad_b_pos + grad_b_neg
    return loss, grad_w.astype(layer.weights.dtype, copy=False), grad_b.astype(layer.bias.dtype, copy=False)


def ff_batch_update(layer: FFLayer, pos_batch: Matrix, neg_batch: Matrix, lr: float) -> float:
    """
    One positive/negative pass on a batch followed by one Adam step.

    Args:
        layer: Layer to update in place
        pos_batch: Positive (correctly labelled) inputs
        neg_batch: Negative (wrongly labelled) inputs
        lr: Learning rate

    Returns:
        The loss before the update

    Raises:
        DimensionError: If a batch does not match the layer input dim
        NumericError: If the loss or gradients are not finite
    """
    loss, grad_w, grad_b = ff_objective(layer, pos_batch, neg_batch)
    ensure_finite(np.asarray(loss), "forward-forward loss")
    ensure_finite(grad_w, "forward-forward weight gradient")
    layer.weights = adam_step(layer.weights, grad_w, layer.adam_w, lr)
    layer.bias = adam_step(layer.bias, grad_b, layer.adam_b, lr)
    return loss
