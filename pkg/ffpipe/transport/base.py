# ffpipe/transport/base.py
import logging
from abc import ABC, abstractmethod
from collections import Counter
from typing import Optional

import numpy as np

from ..exceptions import DependencyTimeoutError
from ..metrics import MetricsRecord
from ..schedule import TrainingPlan
from ..wire import LayerSnapshot, SnapshotKind

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0


class BaseTransport(ABC):
    """
    Blocking publish/get rendezvous between the nodes of one run.

    Subclasses move values; this class owns timeouts, diagnostics and
    traffic accounting.
    """

    def __init__(self, plan: TrainingPlan, node_id: Optional[int] = None, timeout: float = DEFAULT_TIMEOUT):
        """
        Args:
            plan: Run plan, used to name expected publishers in diagnostics
            node_id: This node, None for the orchestrator
            timeout: Seconds a get waits before giving up
        """
        self.plan = plan
        self.node_id = node_id
        self.timeout = timeout
        self.traffic: Counter = Counter()

    def publish_layer(self, snapshot: LayerSnapshot) -> None:
        logger.debug("node %s publishes %s layer %d chapter %d", self.node_id,
                     SnapshotKind(snapshot.kind).name, snapshot.layer_index, snapshot.chapter)
        self._put_snapshot(snapshot)

    def get_layer(self,
                  chapter: int,
                  layer_index: int,
                  kind: SnapshotKind = SnapshotKind.FF_LAYER,
                  timeout: Optional[float] = None) -> LayerSnapshot:
        """
        Block until (kind, layer_index, chapter) has been published.

        Raises:
            DependencyTimeoutError: Nothing arrived within the timeout
            PipelineAbortedError: Another node aborted the run
        """
        timeout = self.timeout if timeout is None else timeout
        snapshot = self._take_snapshot((int(kind), layer_index, chapter), timeout)
        if snapshot is None:
            publisher = self.plan.publisher(min(layer_index, self.plan.num_layers - 1), chapter)
            error = DependencyTimeoutError(SnapshotKind(kind).name, chapter, timeout, layer_index, publisher)
            logger.error("node %s: %s", self.node_id, error)
            raise error
        logger.debug("node %s got %s layer %d chapter %d", self.node_id, SnapshotKind(kind).name,
                     layer_index, chapter)
        return snapshot

    def publish_negatives(self, chapter: int, labels: np.ndarray) -> None:
        logger.debug("node %s publishes negatives after chapter %d", self.node_id, chapter)
        self._put_negatives(chapter, np.asarray(labels, dtype=np.int64))

    def get_negatives(self, chapter: int, timeout: Optional[float] = None) -> np.ndarray:
        """Block until the negatives computed after ``chapter`` arrive."""
        timeout = self.timeout if timeout is None else timeout
        labels = self._take_negatives(chapter, timeout)
        if labels is None:
            error = DependencyTimeoutError("negative labels", chapter, timeout,
                                           publisher=self.plan.negatives_publisher())
            logger.error("node %s: %s", self.node_id, error)
            raise error
        return labels

    def send_metrics(self, record: MetricsRecord) -> None:
        self._send_metrics(record)

    @abstractmethod
    def done(self, detail: str = '') -> None:
        """Report this node finished."""

    @abstractmethod
    def abort(self, reason: str) -> None:
        """Abort the run; every blocked get on every node fails."""

    def close(self) -> None:
        pass

    @abstractmethod
    def _put_snapshot(self, snapshot: LayerSnapshot) -> None:
        pass

    @abstractmethod
    def _take_snapshot(self, key, timeout: float) -> Optional[LayerSnapshot]:
        pass

    @abstractmethod
    def _put_negatives(self, chapter: int, labels: np.ndarray) -> None:
        pass

    @abstractmethod
    def _take_negatives(self, chapter: int, timeout: float) -> Optional[np.ndarray]:
        pass

    @abstractmethod
    def _send_metrics(self, record: MetricsRecord) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
