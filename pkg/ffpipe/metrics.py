# ffpipe/metrics.py
"""Per-node timing, training metrics, CSV/summary output and utilization."""
import csv
import json
import math
import struct
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from .exceptions import ProtocolError

CSV_HEADER = ['node', 'chapter', 'epoch', 'layer', 'loss', 'acc', 'busy_ms', 'idle_ms', 'comm_ms', 'wall_ms']

EVALUATION_NODE = -1

_RECORD = struct.Struct('<hHHhddddddd')


@dataclass
class MetricsRecord:
    """One row of training metrics; times are cumulative for the node."""
    node_id: int
    chapter: int
    epoch: int
    layer: int
    train_loss: float = math.nan
    test_accuracy: float = math.nan
    busy_ms: float = 0.0
    idle_ms: float = 0.0
    comm_ms: float = 0.0
    wall_ms: float = 0.0
    timestamp: float = field(default_factory=time.time)

    def to_bytes(self) -> bytes:
        """Encode as a MetricsSample payload."""
        return _RECORD.pack(self.node_id, self.chapter, self.epoch, self.layer, self.timestamp,
                            self.train_loss, self.test_accuracy,
                            self.busy_ms, self.idle_ms, self.comm_ms, self.wall_ms)

    @classmethod
    def from_bytes(cls, payload: bytes) -> 'MetricsRecord':
        if len(payload) != _RECORD.size:
            raise ProtocolError(f"MetricsSample payload is {len(payload)} bytes, expected {_RECORD.size}")
        (node, chapter, epoch, layer, ts, loss, acc, busy, idle, comm, wall) = _RECORD.unpack(payload)
        return cls(node, chapter, epoch, layer, loss, acc, busy, idle, comm, wall, ts)

    def csv_row(self) -> List[str]:
        def fmt(x: float) -> str:
            return '' if math.isnan(x) else f"{x:.6g}"
        return [str(self.node_id), str(self.chapter), str(self.epoch), str(self.layer),
                fmt(self.train_loss), fmt(self.test_accuracy),
                f"{self.busy_ms:.3f}", f"{self.idle_ms:.3f}", f"{self.comm_ms:.3f}", f"{self.wall_ms:.3f}"]


class NodeClock:
    """
    Wall-clock decomposition for one node.

    Busy and communication time are measured; idle is the remainder, so
    busy + idle + comm == wall by construction.
    """

    def __init__(self):
        self.started = time.perf_counter()
        self.busy_s = 0.0
        self.comm_s = 0.0

    @contextmanager
    def busy(self):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.busy_s += time.perf_counter() - t0

    @contextmanager
    def comm(self):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.comm_s += time.perf_counter() - t0

    def timing(self, node_id: int) -> 'NodeTiming':
        wall = time.perf_counter() - self.started
        idle = max(wall - self.busy_s - self.comm_s, 0.0)
        return NodeTiming(node_id, self.busy_s * 1e3, idle * 1e3, self.comm_s * 1e3,
                          (self.busy_s + idle + self.comm_s) * 1e3)

    def record(self, node_id: int, chapter: int, epoch: int, layer: int,
               loss: float = math.nan, accuracy: float = math.nan) -> MetricsRecord:
        t = self.timing(node_id)
        return MetricsRecord(node_id, chapter, epoch, layer, loss, accuracy,
                             t.busy_ms, t.idle_ms, t.comm_ms, t.wall_ms)


@dataclass
class NodeTiming:
    node_id: int
    busy_ms: float
    idle_ms: float
    comm_ms: float
    wall_ms: float

    @property
    def utilization(self) -> float:
        return self.busy_ms / self.wall_ms if self.wall_ms > 0 else 1.0


@dataclass
class RunMetrics:
    """Everything a run reports besides the trained model."""
    records: List[MetricsRecord] = field(default_factory=list)
    timings: Dict[int, NodeTiming] = field(default_factory=dict)
    wall_seconds: float = 0.0
    negative_batches: int = 0
    traffic: Counter = field(default_factory=Counter)
    test_accuracy: float = math.nan

    def merge_node(self, other: 'RunMetrics') -> None:
        self.records.extend(other.records)
        self.timings.update(other.timings)
        self.negative_batches += other.negative_batches
        self.traffic.update(other.traffic)


@dataclass
class UtilizationReport:
    nodes: List[NodeTiming]
    pipeline_seconds: float
    sequential_seconds: Optional[float]
    speedup: float
    utilization: float

    def lines(self) -> List[str]:
        out = [f"pipeline wall time: {self.pipeline_seconds:.2f}s"]
        if self.sequential_seconds is not None:
            out.append(f"sequential wall time: {self.sequential_seconds:.2f}s")
        out.append(f"speedup: {self.speedup:.2f}x over {len(self.nodes)} node(s), "
                   f"utilization {100 * self.utilization:.1f}%")
        for t in self.nodes:
            out.append(f"  node {t.node_id}: busy {t.busy_ms:.0f}ms idle {t.idle_ms:.0f}ms "
                       f"comm {t.comm_ms:.0f}ms wall {t.wall_ms:.0f}ms ({100 * t.utilization:.1f}% busy)")
        return out


def utilization_report(metrics: RunMetrics, sequential_seconds: Optional[float] = None) -> UtilizationReport:
    """
    Per-node busy/idle/communication breakdown and speedup.

    Args:
        metrics: Metrics of a completed run
        sequential_seconds: Wall time of the equivalent sequential run, if known

    Returns:
        UtilizationReport; speedup = sequential / pipeline time and
        utilization = speedup / N. Without a baseline a single node counts as
        fully utilized.
    """
    nodes = [metrics.timings[k] for k in sorted(metrics.timings)]
    n = max(len(nodes), 1)
    pipeline = metrics.wall_seconds
    if sequential_seconds is not None and pipeline > 0:
        speedup = sequential_seconds / pipeline
    elif n > 1 and pipeline > 0:
        # estimate: total busy time is what one node would have spent
        speedup = sum(t.busy_ms for t in nodes) / 1e3 / pipeline
    else:
        speedup = 1.0
    return UtilizationReport(nodes, pipeline, sequential_seconds, speedup, speedup / n)


def write_metrics_csv(path: Path, records: Iterable[MetricsRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(r.csv_row())
    return path


def read_metrics_csv(path: Path) -> List[MetricsRecord]:
    def num(s: str) -> float:
        return float(s) if s != '' else math.nan

    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ProtocolError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRecord(int(row['node']), int(row['chapter']), int(row['epoch']), int(row['layer']),
                              num(row['loss']), num(row['acc']), float(row['busy_ms']),
                              float(row['idle_ms']), float(row['comm_ms']), float(row['wall_ms']), 0.0)
                for row in reader]


@dataclass
class RunSummary:
    wall_seconds: float
    test_accuracy: float
    utilization: Dict[int, float]

    def to_json(self) -> str:
        data = asdict(self)
        data['utilization'] = {str(k): round(v, 6) for k, v in self.utilization.items()}
        return json.dumps(data, indent=2, sort_keys=True)


def summarize(records: List[MetricsRecord]) -> RunSummary:
    """
    Rebuild the run summary from metrics rows alone.

    Wall time is the largest cumulative wall reading, accuracy the last
    evaluated accuracy, and each node's utilization comes from its last row.
    """
    wall_ms = max((r.wall_ms for r in records), default=0.0)
    accuracy = next((r.test_accuracy for r in reversed(records) if not math.isnan(r.test_accuracy)), math.nan)
    last: Dict[int, MetricsRecord] = {}
    for r in records:
        if r.node_id != EVALUATION_NODE:
            last[r.node_id] = r
    utilization = {k: (r.busy_ms / r.wall_ms if r.wall_ms > 0 else 1.0) for k, r in sorted(last.items())}
    return RunSummary(wall_ms / 1e3, accuracy, utilization)
