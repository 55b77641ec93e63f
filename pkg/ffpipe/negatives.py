# ffpipe/negatives.py
"""
Negative-label strategies.

adaptive: the most predicted incorrect label, recomputed after every chapter
random:   a fresh uniformly drawn incorrect label after every chapter
fixed:    one uniformly drawn incorrect label per instance for the whole run
"""
import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .classify import goodness_scores
from .exceptions import LabelRangeError, ValidationError
from .layers import FFLayer
from .tensor import STREAM_NEG, Matrix, derive_seed, get_rng

logger = logging.getLogger(__name__)

NegStrategy = Literal['adaptive', 'random', 'fixed']

_FIXED_KEY = 0
_RANDOM_KEY = 1


@dataclass
class NegAssignment:
    """Per-instance negative label."""
    strategy: NegStrategy
    labels: np.ndarray
    true_labels: np.ndarray
    num_classes: int
    rng_seed: int
    chapter: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.labels.shape != self.true_labels.shape:
            raise ValidationError("negative and true label arrays differ in length")
        if self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise LabelRangeError(int(self.labels.max()), self.num_classes)
            if np.any(self.labels == self.true_labels):
                raise ValidationError("a negative label equals the true label")


def _random_incorrect(true_labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    if num_classes < 2:
        raise ValidationError(f"negative labels need at least 2 classes (got {num_classes})")
    rng = get_rng(seed)
    offsets = rng.integers(1, num_classes, size=len(true_labels))
    return (np.asarray(true_labels, dtype=np.int64) + offsets) % num_classes


def assign_fixed_neg(true_labels: np.ndarray, num_classes: int, rng_seed: int) -> NegAssignment:
    """
    Draw one incorrect label per instance, uniform over the other classes.

    Args:
        true_labels: Class of every training instance
        num_classes: Number of classes (>= 2)
        rng_seed: Run seed

    Returns:
        A NegAssignment kept for the whole run
    """
    seed = derive_seed(rng_seed, STREAM_NEG, _FIXED_KEY)
    labels = _random_incorrect(true_labels, num_classes, seed)
    return NegAssignment('fixed', labels, true_labels, num_classes, rng_seed)


def resample_random_neg(assignment: NegAssignment, chapter: int, rng_seed: int) -> NegAssignment:
    """
    Draw fresh incorrect labels for ``chapter``.

    The draw depends only on (rng_seed, chapter), so every node agrees.
    """
    seed = derive_seed(rng_seed, STREAM_NEG, _RANDOM_KEY, chapter)
    labels = _random_incorrect(assignment.true_labels, assignment.num_classes, seed)
    return NegAssignment('random', labels, assignment.true_labels, assignment.num_classes, rng_seed, chapter)


def assign_adaptive_neg(layers: Sequence[FFLayer],
                        x: Matrix,
                        true_labels: np.ndarray,
                        num_classes: int,
                        rng_seed: int = 0,
                        chapter: int = 0) -> NegAssignment:
    """
    Pick the incorrect label the network currently scores highest.

    Args:
        layers: Current network
        x: Raw training images
        true_labels: True classes
        num_classes: Number of classes
        rng_seed: Carried along for bookkeeping
        chapter: Chapter the assignment was computed after

    Returns:
        NegAssignment with the highest-goodness incorrect label (ties to lowest index)
    """
    if not layers:
        raise ValidationError("adaptive negatives need a non-empty network")
    true_labels = np.asarray(true_labels, dtype=np.int64)
    scores = goodness_scores(layers, x, num_classes)
    scores[np.arange(len(true_labels)), true_labels] = -np.inf
    labels = np.argmax(scores, axis=1)
    return NegAssignment('adaptive', labels, true_labels, num_classes, rng_seed, chapter)


def initial_negatives(strategy: NegStrategy,
                      layers: Sequence[FFLayer],
                      x: Matrix,
                      true_labels: np.ndarray,
                      num_classes: int,
                      rng_seed: int) -> NegAssignment:
    """Negatives used by the first chapter."""
    if strategy == 'adaptive':
        return assign_adaptive_neg(layers, x, true_labels, num_classes, rng_seed, chapter=0)
    fixed = assign_fixed_neg(true_labels, num_classes, rng_seed)
    if strategy == 'fixed':
        return fixed
    if strategy == 'random':
        return resample_random_neg(fixed, 0, rng_seed)
    raise ValidationError(f"Unknown negative strategy: {strategy}")


def update_negatives(assignment: NegAssignment,
                     layers: Sequence[FFLayer],
                     x: Matrix,
                     chapter: int) -> NegAssignment:
    """Refresh negatives once ``chapter`` has finished."""
    if assignment.strategy == 'adaptive':
        logger.debug("Recomputing adaptive negatives after chapter %d on %d instances", chapter, len(x))
        return assign_adaptive_neg(layers, x, assignment.true_labels, assignment.num_classes,
                                   assignment.rng_seed, chapter)
    if assignment.strategy == 'random':
        return resample_random_neg(assignment, chapter, assignment.rng_seed)
    return assignment
