# ffpipe/transport/board.py
"""Keyed rendezvous store shared by the in-process transport and the TCP board server."""
import logging
import threading
import time
from collections import Counter
from typing import Any, Dict, Hashable, List, Optional, Tuple

from ..exceptions import PipelineAbortedError
from ..metrics import MetricsRecord

logger = logging.getLogger(__name__)

# wake interval for waiters; aborts and shutdowns are seen at least this often
POLL_SECONDS = 0.5


class Board:
    """
    Publications awaiting their readers.

    A value published under a key is handed to exactly ``readers`` gets and
    then dropped. Gets block until the key appears, the board is aborted or
    the timeout expires.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._entries: Dict[Hashable, List[Any]] = {}
        self.records: List[MetricsRecord] = []
        self.done: Dict[int, str] = {}
        self.aborted: Optional[Tuple[Optional[int], str]] = None
        self.traffic: Counter = Counter()

    def put(self, key: Hashable, value: Any, readers: int) -> None:
        if readers <= 0:
            logger.debug("Dropping %s: no readers", key)
            return
        with self._cond:
            if key in self._entries:
                logger.warning("Republished %s replaces an unread publication", key)
            self._entries[key] = [value, readers]
            self._cond.notify_all()

    def take(self, key: Hashable, timeout: float) -> Optional[Any]:
        """
        Wait for ``key`` and consume one read of it.

        Returns:
            The published value, or None on timeout

        Raises:
            PipelineAbortedError: If the run was aborted meanwhile
        """
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                self._check_aborted()
                entry = self._entries.get(key)
                if entry is not None:
                    entry[1] -= 1
                    if entry[1] <= 0:
                        del self._entries[key]
                    return entry[0]
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(min(remaining, POLL_SECONDS))

    def pending(self) -> List[Hashable]:
        with self._cond:
            return list(self._entries)

    def add_record(self, record: MetricsRecord) -> None:
        with self._cond:
            self.records.append(record)

    def mark_done(self, node_id: int, detail: str = '') -> None:
        with self._cond:
            self.done[node_id] = detail
            self._cond.notify_all()

    def wait_done(self, nodes: int, timeout: float) -> bool:
        """Block until ``nodes`` nodes reported done; False on timeout."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while len(self.done) < nodes:
                self._check_aborted()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(min(remaining, POLL_SECONDS))
            return True

    def abort(self, node_id: Optional[int], reason: str) -> None:
        with self._cond:
            if self.aborted is None:
                logger.error("Run aborted by %s: %s",
                             f"node {node_id}" if node_id is not None else "orchestrator", reason)
                self.aborted = (node_id, reason)
            self._cond.notify_all()

    def _check_aborted(self) -> None:
        if self.aborted is not None:
            raise PipelineAbortedError(*self.aborted)
