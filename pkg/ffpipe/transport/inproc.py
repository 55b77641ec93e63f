# ffpipe/transport/inproc.py
"""Transport for nodes running as threads of one process."""
from typing import Optional

import numpy as np

from ..metrics import MetricsRecord
from ..schedule import TrainingPlan, negatives_readers, snapshot_readers
from ..wire import NEGATIVES_HEADER, LayerSnapshot, MsgType
from .base import DEFAULT_TIMEOUT, BaseTransport
from .board import Board


class InProcessTransport(BaseTransport):
    """
    Shares one Board between all nodes.

    Snapshots are deep-copied on publish, so a publisher that keeps training
    never alters what its readers receive.
    """

    def __init__(self,
                 board: Board,
                 plan: TrainingPlan,
                 node_id: Optional[int] = None,
                 timeout: float = DEFAULT_TIMEOUT):
        super().__init__(plan, node_id, timeout)
        self.board = board

    def _put_snapshot(self, snapshot: LayerSnapshot) -> None:
        size = snapshot.payload_size()
        self.traffic[MsgType.LAYER_SNAPSHOT] += size
        self.board.traffic[MsgType.LAYER_SNAPSHOT] += size
        self.board.put(('snap',) + snapshot.key, snapshot.copy(),
                       snapshot_readers(self.plan, snapshot.layer_index, snapshot.chapter))

    def _take_snapshot(self, key, timeout: float) -> Optional[LayerSnapshot]:
        return self.board.take(('snap',) + tuple(key), timeout)

    def _put_negatives(self, chapter: int, labels: np.ndarray) -> None:
        size = NEGATIVES_HEADER.size + 2 * len(labels)
        self.traffic[MsgType.NEG_LABELS] += size
        self.board.traffic[MsgType.NEG_LABELS] += size
        self.board.put(('neg', chapter), labels.copy(), negatives_readers(self.plan, chapter))

    def _take_negatives(self, chapter: int, timeout: float) -> Optional[np.ndarray]:
        return self.board.take(('neg', chapter), timeout)

    def _send_metrics(self, record: MetricsRecord) -> None:
        self.traffic[MsgType.METRICS] += len(record.to_bytes())
        self.board.add_record(record)

    def done(self, detail: str = '') -> None:
        self.traffic[MsgType.CONTROL] += len(detail)
        self.board.mark_done(self.node_id, detail)

    def abort(self, reason: str) -> None:
        self.board.abort(self.node_id, reason)


class InProcessNetwork:
    """Board plus transports for nodes that are threads of this process."""

    def __init__(self, plan: TrainingPlan, timeout: float = DEFAULT_TIMEOUT):
        self.plan = plan
        self.timeout = timeout
        self.board = Board()

    def connect(self, node_id: Optional[int]) -> InProcessTransport:
        return InProcessTransport(self.board, self.plan, node_id, self.timeout)

    def close(self) -> None:
        pass
