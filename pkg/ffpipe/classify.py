# ffpipe/classify.py
"""Goodness-accumulation and softmax-head prediction."""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .exceptions import DimensionError, ValidationError
from .layers import FFLayer, embed_labels, embed_neutral, forward_network, goodness
from .tensor import (
    AdamState,
    Matrix,
    adam_step,
    ensure_finite,
    init_layer,
    matmul,
    row_normalize,
    softmax_cross_entropy,
)

SCORE_CHUNK = 2048


def scored_layers(num_layers: int) -> Tuple[int, ...]:
    """Indices of layers whose activity feeds prediction: all but the first."""
    if num_layers < 1:
        raise ValidationError("network has no layers")
    return tuple(range(1, num_layers)) if num_layers > 1 else (0,)


def goodness_scores(layers: Sequence[FFLayer], images: Matrix, num_classes: int) -> Matrix:
    """
    Accumulated goodness for every candidate label.

    For each candidate c the images are overlaid with label c and run through
    the network; goodness of all but the first layer is summed.

    Args:
        layers: Trained FF layers
        images: n x d raw images
        num_classes: Number of candidate labels

    Returns:
        n x num_classes score matrix
    """
    used = scored_layers(len(layers))
    n = images.shape[0]
    scores = np.zeros((n, num_classes), dtype=np.float64)
    for start in range(0, n, SCORE_CHUNK):
        chunk = images[start:start + SCORE_CHUNK]
        for c in range(num_classes):
            embedded = embed_labels(chunk, np.full(len(chunk), c), num_classes)
            raw = forward_network(layers, embedded)
            total = np.zeros(len(chunk), dtype=np.float64)
            for i in used:
                total += goodness(raw[i])
            scores[start:start + SCORE_CHUNK, c] = total
    return scores


def predict_goodness_batch(layers: Sequence[FFLayer], images: Matrix, num_classes: int) -> np.ndarray:
    if len(layers) < 2:
        raise ValidationError("goodness prediction needs at least 2 layers")
    # argmax returns the first maximum, so ties go to the lowest label
    return np.argmax(goodness_scores(layers, images, num_classes), axis=1)


def predict_goodness(layers: Sequence[FFLayer], image: np.ndarray, num_classes: int) -> int:
    """
    Classify one image by the label with maximum accumulated goodness.

    Performs exactly ``num_classes`` forward sweeps.
    """
    return int(predict_goodness_batch(layers, image.reshape(1, -1), num_classes)[0])


@dataclass
class SoftmaxHead:
    """Softmax classifier over the activity of all but the first FF layer."""
    weights: Matrix
    bias: np.ndarray
    adam_w: AdamState
    adam_b: AdamState
    input_layers: Tuple[int, ...]

    @classmethod
    def create(cls,
               layer_widths: Sequence[int],
               num_classes: int,
               rng_seed: int,
               dtype: np.dtype = np.float64) -> 'SoftmaxHead':
        """
        Build an untrained head.

        Args:
            layer_widths: Output width of every FF layer
            num_classes: Number of classes
            rng_seed: Initialization seed
            dtype: Array dtype
        """
        inputs = scored_layers(len(layer_widths))
        in_dim = sum(layer_widths[i] for i in inputs)
        weights, bias = init_layer(in_dim, num_classes, rng_seed, dtype=dtype)
        return cls(weights, bias, AdamState.zeros_like(weights), AdamState.zeros_like(bias), inputs)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> 'SoftmaxHead':
        return SoftmaxHead(self.weights.copy(), self.bias.copy(),
                           self.adam_w.copy(), self.adam_b.copy(), self.input_layers)


def head_features(head: SoftmaxHead, layers: Sequence[FFLayer], images: Matrix) -> Matrix:
    """Neutral-label forward pass; normalized activations of the head's input layers, concatenated."""
    neutral = embed_neutral(images, head.num_classes)
    raw = forward_network(layers, neutral)
    feats = np.concatenate([row_normalize(raw[i]) for i in head.input_layers], axis=1)
    if feats.shape[1] != head.weights.shape[0]:
        raise DimensionError("softmax head input", feats.shape, head.weights.shape)
    return feats


def train_softmax_head(head: SoftmaxHead,
                       layers: Sequence[FFLayer],
                       x: Matrix,
                       labels: np.ndarray,
                       lr: float) -> float:
    """
    One Adam step on the head; FF layers are read-only inputs.

    Args:
        head: Head to update in place
        layers: Frozen FF layers
        x: Raw images (label region is overwritten with the neutral label)
        labels: True classes
        lr: Learning rate

    Returns:
        Cross-entropy loss before the update
    """
    feats = head_features(head, layers, x)
    logits = matmul(feats, head.weights) + head.bias
    loss, d_logits = softmax_cross_entropy(logits, labels)
    ensure_finite(np.asarray(loss), "softmax head loss")
    grad_w = matmul(feats.T, d_logits).astype(head.weights.dtype, copy=False)
    grad_b = np.sum(d_logits, axis=0).astype(head.bias.dtype, copy=False)
    head.weights = adam_step(head.weights, grad_w, head.adam_w, lr)
    head.bias = adam_step(head.bias, grad_b, head.adam_b, lr)
    return loss


def head_logits(head: SoftmaxHead, layers: Sequence[FFLayer], images: Matrix) -> Matrix:
    return matmul(head_features(head, layers, images), head.weights) + head.bias


def predict_softmax_batch(head: SoftmaxHead, layers: Sequence[FFLayer], images: Matrix) -> np.ndarray:
    preds = []
    for start in range(0, images.shape[0], SCORE_CHUNK):
        preds.append(np.argmax(head_logits(head, layers, images[start:start + SCORE_CHUNK]), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def predict_softmax(head: SoftmaxHead, layers: Sequence[FFLayer], image: np.ndarray) -> int:
    """Classify one image with a single neutral-labelled forward sweep."""
    return int(predict_softmax_batch(head, layers, image.reshape(1, -1))[0])
