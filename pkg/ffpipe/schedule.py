# ffpipe/schedule.py
"""
Epoch/split/chapter arithmetic.

E epochs are divided into S splits; a chapter is C = E / S consecutive epochs
of one layer's training and is the unit of work and exchange between nodes.
Chapters are numbered from 1, layers and nodes from 0.
"""
from dataclasses import dataclass, replace
from typing import List, Literal, Optional, Tuple

import numpy as np

from .exceptions import PlanError, ValidationError
from .tensor import STREAM_SHUFFLE, derive_seed, get_rng

RunMode = Literal['sequential', 'single', 'all', 'federated']
ClassifierMode = Literal['goodness', 'softmax', 'perfopt-last', 'perfopt-all']
Precision = Literal['float32', 'float64']

VALID_MODES = {'sequential', 'single', 'all', 'federated'}
VALID_NEG_STRATEGIES = {'adaptive', 'random', 'fixed'}
VALID_CLASSIFIERS = {'goodness', 'softmax', 'perfopt-last', 'perfopt-all'}
VALID_PRECISIONS = {'float32', 'float64'}


@dataclass(frozen=True)
class TrainingPlan:
    """Schedule and hyperparameters shared by every node of a run."""
    layers: Tuple[int, ...]
    epochs: int
    splits: int
    nodes: int = 1
    batch_size: int = 64
    lr_ff: float = 0.01
    lr_head: float = 0.0001
    theta: float = 0.01
    cooldown_start_epoch: Optional[float] = None
    seed: int = 0
    neg_strategy: str = 'adaptive'
    classifier: str = 'goodness'
    mode: str = 'sequential'
    precision: str = 'float64'
    num_classes: int = 10
    batch_delay_ms: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(int(w) for w in self.layers))
        self.validate()

    def validate(self) -> None:
        """
        Check plan invariants.

        Raises:
            PlanError: If any invariant is violated
        """
        if len(self.layers) < 2 or min(self.layers) < 1:
            raise PlanError(f"layers must list an input width and at least one layer width (got {self.layers})")
        if self.epochs < 1 or self.splits < 1:
            raise PlanError(f"epochs and splits must be >= 1 (got E={self.epochs}, S={self.splits})")
        if self.epochs % self.splits:
            raise PlanError(f"splits must divide epochs (E={self.epochs}, S={self.splits})")
        if self.batch_size < 1:
            raise PlanError(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.nodes < 1:
            raise PlanError(f"nodes must be >= 1 (got {self.nodes})")
        if self.mode not in VALID_MODES:
            raise PlanError(f"Invalid mode: {self.mode}. Must be one of: {', '.join(sorted(VALID_MODES))}")
        if self.mode == 'sequential' and self.nodes != 1:
            raise PlanError(f"sequential mode runs on one node (got {self.nodes})")
        if self.mode == 'single' and self.nodes != self.num_layers:
            raise PlanError(
                f"single-layer mode needs one node per layer ({self.num_layers} layers, {self.nodes} nodes)")
        if self.neg_strategy not in VALID_NEG_STRATEGIES:
            raise PlanError(f"Invalid negative strategy: {self.neg_strategy}. "
                            f"Must be one of: {', '.join(sorted(VALID_NEG_STRATEGIES))}")
        if self.classifier not in VALID_CLASSIFIERS:
            raise PlanError(f"Invalid classifier: {self.classifier}. "
                            f"Must be one of: {', '.join(sorted(VALID_CLASSIFIERS))}")
        if self.precision not in VALID_PRECISIONS:
            raise PlanError(f"Invalid precision: {self.precision}")
        if self.theta < 0:
            raise PlanError(f"theta must be >= 0 (got {self.theta})")
        if self.num_classes < 2 or self.num_classes > self.layers[0]:
            raise PlanError(f"num_classes must be in [2, input width] (got {self.num_classes})")
        if self.seed < 0:
            raise PlanError(f"seed must be >= 0 (got {self.seed})")

    @property
    def chapter_epochs(self) -> int:
        """C = E / S."""
        return self.epochs // self.splits

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    @property
    def perfopt(self) -> bool:
        return self.classifier.startswith('perfopt')

    @property
    def softmax_head(self) -> bool:
        return self.classifier == 'softmax'

    @property
    def uses_negatives(self) -> bool:
        return not self.perfopt

    def with_changes(self, **changes) -> 'TrainingPlan':
        return replace(self, **changes)

    def global_epoch(self, chapter: int, mini_epoch: int) -> int:
        """1-based epoch index of mini-epoch ``mini_epoch`` of ``chapter``."""
        return (chapter - 1) * self.chapter_epochs + mini_epoch

    def chapter_owner(self, chapter: int) -> int:
        """Node that trains ``chapter`` in All-Layers and Federated runs."""
        return (chapter - 1) % self.nodes

    def chapters_for_node(self, node: int) -> List[int]:
        return [c for c in range(1, self.splits + 1) if self.chapter_owner(c) == node]

    def publisher(self, layer_index: int, chapter: int) -> int:
        """Node expected to publish (layer_index, chapter)."""
        if self.mode == 'single':
            return layer_index
        if self.mode in ('all', 'federated'):
            return self.chapter_owner(chapter)
        return 0

    def negatives_publisher(self) -> int:
        """Node that publishes adaptive negatives in single-layer runs."""
        return self.num_layers - 1

    def batch_order(self, layer_index: int, chapter: int, epoch: int, n: int) -> np.ndarray:
        """Shuffle order for one epoch of one layer; identical on every node."""
        seed = derive_seed(self.seed, STREAM_SHUFFLE, layer_index, chapter, epoch)
        return get_rng(seed).permutation(n)

    def batches(self, order: np.ndarray) -> List[np.ndarray]:
        return [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]


def lr_cooldown(base_lr: float, epoch_index: int, epochs: int, cooldown_start: Optional[float] = None) -> float:
    """
    Learning rate for a 1-based epoch.

    Constant up to ``cooldown_start`` (default E/2), then decays linearly:
    base_lr * (1 + E - e) / (E - cooldown_start). With the default start this
    is base_lr * 2 * (1 + E - e) / E, reaching 2 * base_lr / E at e = E.

    Raises:
        ValidationError: If epoch_index is outside [1, E]
    """
    if not 1 <= epoch_index <= epochs:
        raise ValidationError(f"epoch_index must be in [1, {epochs}] (got {epoch_index})")
    start = epochs / 2 if cooldown_start is None else cooldown_start
    if epoch_index <= start or start >= epochs:
        return base_lr
    return base_lr * (1 + epochs - epoch_index) / (epochs - start)


def snapshot_readers(plan: TrainingPlan, layer_index: int, chapter: int) -> int:
    """
    How many gets a (layer, chapter) publication will receive.

    Heads travel with their layer and share its count. The final chapter is
    read once more when the trained network is assembled.
    """
    final = 1 if chapter == plan.splits else 0
    if plan.mode == 'single':
        if layer_index >= plan.num_layers:
            return final
        return plan.num_layers - 1 - layer_index + final
    if plan.mode in ('all', 'federated'):
        return 1
    return final


def negatives_readers(plan: TrainingPlan, chapter: int) -> int:
    """Gets of published adaptive negatives: every single-layer node but the publisher."""
    if plan.mode == 'single' and chapter < plan.splits:
        return plan.num_layers - 1
    return 0
