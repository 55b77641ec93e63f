# ffpipe/engine.py
"""
Chapter training shared by every run mode.

A ChapterEngine holds one node's copy of the network, its negatives and its
clock. Run modes decide which (layer, chapter) pairs a node trains and which
snapshots it installs in between; the numeric work per chapter is always
the same, which is what makes the run modes agree bitwise.
"""
import logging
import math
import time
from typing import List, Optional

import numpy as np

from .classify import SoftmaxHead, train_softmax_head
from .data import Dataset
from .exceptions import FFPipeError, ValidationError
from .layers import FFLayer, embed_labels, ff_batch_update, layer_input
from .metrics import EVALUATION_NODE, MetricsRecord, NodeClock, RunMetrics
from .model import Model
from .negatives import NegAssignment, initial_negatives, resample_random_neg, update_negatives
from .perfopt import PerLayerHead, train_perfopt_layer
from .schedule import TrainingPlan, lr_cooldown
from .tensor import STREAM_HEAD, STREAM_INIT, derive_seed

logger = logging.getLogger(__name__)


def initial_layers(plan: TrainingPlan) -> List[FFLayer]:
    """The seeded, untrained network; identical on every node."""
    return [FFLayer.create(plan.layers[i], plan.layers[i + 1], derive_seed(plan.seed, STREAM_INIT, i),
                           theta=plan.theta, dtype=plan.dtype)
            for i in range(plan.num_layers)]


def initial_softmax_head(plan: TrainingPlan) -> SoftmaxHead:
    return SoftmaxHead.create(plan.layers[1:], plan.num_classes,
                              derive_seed(plan.seed, STREAM_HEAD, plan.num_layers), dtype=plan.dtype)


def initial_perfopt_heads(plan: TrainingPlan) -> List[PerLayerHead]:
    return [PerLayerHead.create(plan.layers[i + 1], plan.num_classes, i,
                                derive_seed(plan.seed, STREAM_HEAD, i), dtype=plan.dtype)
            for i in range(plan.num_layers)]


class ChapterEngine:
    """One node's training state and the per-chapter update loop."""

    def __init__(self,
                 plan: TrainingPlan,
                 dataset: Dataset,
                 node_id: int = 0,
                 clock: Optional[NodeClock] = None):
        """
        Args:
            plan: Run plan
            dataset: Training data this node sees
            node_id: Node identity for metrics
            clock: Shared clock, a fresh one if omitted
        """
        if dataset.dim != plan.layers[0]:
            raise ValidationError(f"{dataset.name} has {dataset.dim} features, plan expects {plan.layers[0]}")
        if dataset.num_classes != plan.num_classes:
            raise ValidationError(
                f"{dataset.name} has {dataset.num_classes} classes, plan expects {plan.num_classes}")
        self.plan = plan
        self.data = dataset.astype(plan.dtype)
        self.node_id = node_id
        self.clock = clock or NodeClock()
        self.metrics = RunMetrics()
        self.layers = initial_layers(plan)
        self.head = initial_softmax_head(plan) if plan.softmax_head else None
        self.perfopt_heads = initial_perfopt_heads(plan) if plan.perfopt else []
        self.negatives: Optional[NegAssignment] = None

    def init_negatives(self) -> None:
        """Negatives for the first chapter, computed from the untrained network."""
        if not self.plan.uses_negatives:
            return
        with self.clock.busy():
            self.negatives = initial_negatives(self.plan.neg_strategy, self.layers, self.data.images,
                                               self.data.labels, self.plan.num_classes, self.plan.seed)

    def prepare_negatives(self, chapter: int) -> None:
        """
        Install the negatives used by ``chapter``.

        Random negatives depend only on the chapter, so every node derives the
        same ones. Fixed negatives never change. Adaptive negatives are left
        as the caller installed them.
        """
        if not self.plan.uses_negatives or self.negatives is None:
            return
        if self.plan.neg_strategy == 'random':
            self.negatives = resample_random_neg(self.negatives, chapter - 1, self.plan.seed)

    def refresh_negatives(self, chapter: int) -> NegAssignment:
        """Recompute adaptive negatives on this node's data after ``chapter``."""
        with self.clock.busy():
            self.negatives = update_negatives(self.negatives, self.layers, self.data.images, chapter)
        return self.negatives

    def set_negative_labels(self, labels: np.ndarray, chapter: int) -> None:
        """Install negatives published by another node."""
        current = self.negatives
        self.negatives = NegAssignment(current.strategy, labels, current.true_labels, current.num_classes,
                                       current.rng_seed, chapter)

    def train_layer(self, index: int, chapter: int) -> float:
        """
        Train ``layers[index]`` for the C epochs of ``chapter``.

        Returns:
            Mean batch loss of the last epoch
        """
        plan = self.plan
        if plan.uses_negatives and self.negatives is None:
            raise FFPipeError("negatives were not initialized", node_id=self.node_id, chapter=chapter)
        n = len(self.data)
        loss = math.nan
        for mini_epoch in range(1, plan.chapter_epochs + 1):
            epoch = plan.global_epoch(chapter, mini_epoch)
            lr = lr_cooldown(plan.lr_ff, epoch, plan.epochs, plan.cooldown_start_epoch)
            lr_head = lr_cooldown(plan.lr_head, epoch, plan.epochs, plan.cooldown_start_epoch)
            losses = []
            for batch in plan.batches(plan.batch_order(index, chapter, mini_epoch, n)):
                with self.clock.busy():
                    losses.append(self._train_batch(index, batch, lr, lr_head))
                    if plan.batch_delay_ms:
                        time.sleep(plan.batch_delay_ms / 1e3)
            loss = float(np.mean(losses))
            self.metrics.records.append(self.clock.record(self.node_id, chapter, epoch, index, loss))
        logger.debug("node %d trained layer %d chapter %d (loss %.5f)", self.node_id, index, chapter, loss)
        return loss

    def _train_batch(self, index: int, batch: np.ndarray, lr: float, lr_head: float) -> float:
        x = self.data.images[batch]
        y = self.data.labels[batch]
        if self.plan.perfopt:
            h = layer_input(self.layers, x, index)
            return train_perfopt_layer(self.layers[index], self.perfopt_heads[index], h, y, lr)

        num_classes = self.plan.num_classes
        pos = layer_input(self.layers, embed_labels(x, y, num_classes), index)
        neg = layer_input(self.layers, embed_labels(x, self.negatives.labels[batch], num_classes), index)
        self.metrics.negative_batches += 1
        loss = ff_batch_update(self.layers[index], pos, neg, lr)
        if self.head is not None and index == self.plan.num_layers - 1:
            train_softmax_head(self.head, self.layers, x, y, lr_head)
        return loss

    def evaluate(self, test_set: Dataset, chapter: int) -> float:
        """Test accuracy (percent) of this node's current network, recorded as an evaluation row."""
        with self.clock.busy():
            model = Model.from_engine(self)
            accuracy = model.accuracy(test_set, self.plan.classifier)
        record = self.clock.record(self.node_id, chapter, self.plan.global_epoch(chapter, self.plan.chapter_epochs),
                                   self.plan.num_layers - 1, accuracy=accuracy)
        self.metrics.records.append(MetricsRecord(EVALUATION_NODE, record.chapter, record.epoch, record.layer,
                                                  test_accuracy=accuracy, busy_ms=record.busy_ms,
                                                  idle_ms=record.idle_ms, comm_ms=record.comm_ms,
                                                  wall_ms=record.wall_ms))
        logger.info("node %d chapter %d test accuracy %.2f%%", self.node_id, chapter, accuracy)
        return accuracy

    def finish(self) -> RunMetrics:
        """Close the clock and return this node's metrics."""
        self.metrics.timings[self.node_id] = self.clock.timing(self.node_id)
        return self.metrics
