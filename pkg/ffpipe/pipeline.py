# ffpipe/pipeline.py
"""
Run modes.

Sequential training runs every (chapter, layer) on one engine. The pipelined
modes run one NodeRunner per node; runners only meet through a transport's
publish/get rendezvous:

- Single-Layer: node i owns layer i. In chapter c it waits for layers j < i
  at chapter c, trains its layer, and publishes it.
- All-Layers: chapter c belongs to node (c - 1) mod N, which trains every
  layer after receiving it from the owner of chapter c - 1.
- Federated: the All-Layers ring where each node trains on its own partition.

The trained network is assembled from the chapter-S publications.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

from .data import Dataset
from .engine import ChapterEngine, initial_layers, initial_perfopt_heads, initial_softmax_head
from .exceptions import FFPipeError, PartitionError, PipelineAbortedError, PlanError, ProtocolError
from .metrics import EVALUATION_NODE, MetricsRecord, NodeTiming, RunMetrics
from .model import Model
from .schedule import TrainingPlan, snapshot_readers
from .transport import DEFAULT_TIMEOUT, BaseTransport, InProcessNetwork, TcpNetwork
from .wire import LayerSnapshot, SnapshotKind

logger = logging.getLogger(__name__)

Network = Union[InProcessNetwork, TcpNetwork]


@dataclass
class RunResult:
    model: Model
    metrics: RunMetrics


def publish_layer(transport: BaseTransport, snapshot: LayerSnapshot) -> None:
    """Make ``snapshot`` available to the nodes that will ask for it."""
    transport.publish_layer(snapshot)


def get_layer(transport: BaseTransport,
              chapter: int,
              layer_index: int,
              kind: SnapshotKind = SnapshotKind.FF_LAYER) -> LayerSnapshot:
    """Block until (layer_index, chapter) is published and return it."""
    snapshot = transport.get_layer(chapter, layer_index, kind)
    if (snapshot.layer_index, snapshot.chapter, snapshot.kind) != (layer_index, chapter, kind):
        raise ProtocolError(f"Asked for {SnapshotKind(kind).name} layer {layer_index} chapter {chapter}, "
                            f"received layer {snapshot.layer_index} chapter {snapshot.chapter}")
    return snapshot


class NodeRunner:
    """One node of a pipelined run."""

    def __init__(self,
                 plan: TrainingPlan,
                 dataset: Dataset,
                 node_id: int,
                 transport: BaseTransport,
                 test_set: Optional[Dataset] = None,
                 eval_every: int = 0):
        """
        Args:
            plan: Run plan
            dataset: Data this node trains on
            node_id: Node index in [0, N)
            transport: Connection to the other nodes
            test_set: Data for periodic evaluation
            eval_every: Evaluate every this many chapters (0: never)
        """
        self.plan = plan
        self.node_id = node_id
        self.transport = transport
        self.engine = ChapterEngine(plan, dataset, node_id)
        self.test_set = test_set
        self.eval_every = eval_every
        self.chapter: Optional[int] = None
        self._sent = 0

    @property
    def clock(self):
        return self.engine.clock

    def run(self) -> RunMetrics:
        """
        Train this node's share of the schedule.

        Raises:
            FFPipeError: With node and chapter context; other nodes are aborted first
        """
        try:
            if self.plan.mode == 'single':
                self._run_single_layer()
            elif self.plan.mode in ('all', 'federated'):
                self._run_ring()
            else:
                raise PlanError(f"{self.plan.mode} runs have no pipeline nodes")
            metrics = self.engine.finish()
            self._flush_metrics()
            timing = metrics.timings[self.node_id]
            with self.clock.comm():
                self.transport.done(json.dumps({
                    'negative_batches': metrics.negative_batches,
                    'busy_ms': timing.busy_ms,
                    'idle_ms': timing.idle_ms,
                    'comm_ms': timing.comm_ms,
                    'wall_ms': timing.wall_ms,
                }))
            logger.info("node %d finished", self.node_id)
            return metrics
        except PipelineAbortedError as e:
            raise e.with_context(self.node_id, self.chapter)
        except FFPipeError as e:
            e.with_context(self.node_id, self.chapter)
            self.transport.abort(e.message)
            raise
        except Exception as e:
            self.transport.abort(f"node {self.node_id}: {type(e).__name__}: {e}")
            raise
        finally:
            self.transport.close()

    def _run_single_layer(self) -> None:
        plan, engine = self.plan, self.engine
        own = self.node_id
        last = plan.num_layers - 1
        adaptive = plan.uses_negatives and plan.neg_strategy == 'adaptive'
        engine.init_negatives()
        for chapter in range(1, plan.splits + 1):
            self.chapter = chapter
            if adaptive and chapter > 1 and own != last:
                engine.set_negative_labels(self.transport.get_negatives(chapter - 1), chapter - 1)
            for j in range(own):
                engine.layers[j] = get_layer(self.transport, chapter, j).to_layer(plan.theta)
                if plan.perfopt:
                    engine.perfopt_heads[j] = get_layer(self.transport, chapter, j,
                                                        SnapshotKind.PERFOPT_HEAD).to_perfopt_head()
            engine.prepare_negatives(chapter)
            logger.info("node %d chapter %d: training layer %d", own, chapter, own)
            engine.train_layer(own, chapter)
            self._publish(own, chapter)
            if own == last:
                if adaptive and chapter < plan.splits:
                    labels = engine.refresh_negatives(chapter).labels
                    with self.clock.comm():
                        self.transport.publish_negatives(chapter, labels)
                self._maybe_evaluate(chapter)
            self._flush_metrics()

    def _run_ring(self) -> None:
        plan, engine = self.plan, self.engine
        chapters = plan.chapters_for_node(self.node_id)
        if not chapters:
            logger.info("node %d owns no chapters (N=%d > S=%d)", self.node_id, plan.nodes, plan.splits)
            return
        adaptive = plan.uses_negatives and plan.neg_strategy == 'adaptive'
        engine.init_negatives()
        for chapter in chapters:
            self.chapter = chapter
            engine.prepare_negatives(chapter)
            logger.info("node %d chapter %d: training all %d layers", self.node_id, chapter, plan.num_layers)
            for index in range(plan.num_layers):
                if chapter > 1:
                    self._install(index, chapter - 1)
                engine.train_layer(index, chapter)
                self._publish(index, chapter)
            if adaptive and chapter + plan.nodes <= plan.splits:
                engine.refresh_negatives(chapter)
            self._maybe_evaluate(chapter)
            self._flush_metrics()

    def _install(self, index: int, chapter: int) -> None:
        """Take over layer ``index`` (and the heads travelling with it) as published after ``chapter``."""
        plan, engine = self.plan, self.engine
        engine.layers[index] = get_layer(self.transport, chapter, index).to_layer(plan.theta)
        if plan.perfopt:
            engine.perfopt_heads[index] = get_layer(self.transport, chapter, index,
                                                    SnapshotKind.PERFOPT_HEAD).to_perfopt_head()
        if engine.head is not None and index == plan.num_layers - 1:
            engine.head = get_layer(self.transport, chapter, plan.num_layers,
                                    SnapshotKind.SOFTMAX_HEAD).to_softmax_head()

    def _publish(self, index: int, chapter: int) -> None:
        plan, engine = self.plan, self.engine
        snapshots = []
        if snapshot_readers(plan, index, chapter):
            snapshots.append(LayerSnapshot.from_layer(engine.layers[index], index, chapter))
            if plan.perfopt:
                snapshots.append(LayerSnapshot.from_perfopt_head(engine.perfopt_heads[index], chapter))
        if engine.head is not None and index == plan.num_layers - 1 \
                and snapshot_readers(plan, plan.num_layers, chapter):
            snapshots.append(LayerSnapshot.from_softmax_head(engine.head, plan.num_layers, chapter))
        with self.clock.comm():
            for snapshot in snapshots:
                publish_layer(self.transport, snapshot)

    def _maybe_evaluate(self, chapter: int) -> None:
        if self.test_set is not None and self.eval_every and chapter % self.eval_every == 0 \
                and chapter < self.plan.splits:
            self.engine.evaluate(self.test_set, chapter)

    def _flush_metrics(self) -> None:
        records = self.engine.metrics.records
        with self.clock.comm():
            for record in records[self._sent:]:
                self.transport.send_metrics(record)
        self._sent = len(records)


def assemble_model(plan: TrainingPlan, transport: BaseTransport) -> Model:
    """Collect the chapter-S publications into the trained model."""
    final = plan.splits
    layers = [get_layer(transport, final, i).to_layer(plan.theta) for i in range(plan.num_layers)]
    head = None
    if plan.softmax_head:
        head = get_layer(transport, final, plan.num_layers, SnapshotKind.SOFTMAX_HEAD).to_softmax_head()
    perfopt_heads = []
    if plan.perfopt:
        perfopt_heads = [get_layer(transport, final, i, SnapshotKind.PERFOPT_HEAD).to_perfopt_head()
                         for i in range(plan.num_layers)]
    return Model(layers, plan.num_classes, head, perfopt_heads)


def collect_metrics(plan: TrainingPlan, network: Network, wall_seconds: float) -> RunMetrics:
    """Merge what the nodes reported to the board."""
    board = network.board
    metrics = RunMetrics(records=list(board.records), wall_seconds=wall_seconds)
    for node_id, detail in sorted(board.done.items()):
        stats = json.loads(detail) if detail else {}
        metrics.negative_batches += int(stats.get('negative_batches', 0))
        metrics.timings[node_id] = NodeTiming(node_id, stats.get('busy_ms', 0.0), stats.get('idle_ms', 0.0),
                                              stats.get('comm_ms', 0.0), stats.get('wall_ms', 0.0))
    metrics.traffic.update({k: v for k, v in board.traffic.items()})
    return metrics


def finalize(plan: TrainingPlan,
             model: Model,
             metrics: RunMetrics,
             test_set: Optional[Dataset]) -> RunResult:
    """Final test evaluation, recorded as an evaluation row."""
    if test_set is not None:
        metrics.test_accuracy = model.accuracy(test_set, plan.classifier)
        metrics.records.append(MetricsRecord(EVALUATION_NODE, plan.splits, plan.epochs, plan.num_layers - 1,
                                             test_accuracy=metrics.test_accuracy,
                                             wall_ms=metrics.wall_seconds * 1e3))
        logger.info("final test accuracy %.2f%% (%s)", metrics.test_accuracy, plan.classifier)
    return RunResult(model, metrics)


def open_network(plan: TrainingPlan,
                 transport: Union[str, Network] = 'inproc',
                 timeout: float = DEFAULT_TIMEOUT) -> Network:
    if not isinstance(transport, str):
        return transport
    if transport == 'inproc':
        return InProcessNetwork(plan, timeout)
    if transport == 'tcp':
        return TcpNetwork(plan, timeout)
    raise PlanError(f"Unknown transport: {transport}")


def run_nodes(plan: TrainingPlan,
              datasets: Sequence[Dataset],
              transport: Union[str, Network] = 'inproc',
              test_set: Optional[Dataset] = None,
              eval_every: int = 0,
              timeout: float = DEFAULT_TIMEOUT) -> RunResult:
    """
    Run every node of a pipelined plan as a thread of this process.

    Args:
        plan: Single-Layer, All-Layers or Federated plan
        datasets: Training data per node
        transport: 'inproc', 'tcp' (loopback board server) or an open network
        test_set: Evaluation data
        eval_every: Evaluation cadence in chapters (0: final only)
        timeout: Seconds any get may wait

    Raises:
        FFPipeError: The first node failure; nodes that were merely aborted
            are reported only if nothing else failed
    """
    if len(datasets) != plan.nodes:
        raise PlanError(f"{len(datasets)} datasets for {plan.nodes} nodes")
    network = open_network(plan, transport, timeout)
    started = time.perf_counter()
    try:
        runners = [NodeRunner(plan, datasets[n], n, network.connect(n), test_set, eval_every)
                   for n in range(plan.nodes)]
        with ThreadPoolExecutor(max_workers=plan.nodes, thread_name_prefix='ffpipe-node') as pool:
            futures = [pool.submit(runner.run) for runner in runners]
            errors: List[BaseException] = [f.exception() for f in futures if f.exception() is not None]
        if errors:
            root = next((e for e in errors if not isinstance(e, PipelineAbortedError)), errors[0])
            raise root
        with network.connect(None) as collector:
            model = assemble_model(plan, collector)
        metrics = collect_metrics(plan, network, time.perf_counter() - started)
    finally:
        network.close()
    return finalize(plan, model, metrics, test_set)


def _check_mode(plan: TrainingPlan, mode: str) -> None:
    if plan.mode != mode:
        raise PlanError(f"plan is for {plan.mode} training, not {mode}")


def run_sequential(plan: TrainingPlan,
                   dataset: Dataset,
                   neg_lag: int = 1,
                   test_set: Optional[Dataset] = None,
                   eval_every: int = 0) -> RunResult:
    """
    Train on one node, chapter by chapter and layer by layer.

    Args:
        plan: Sequential plan
        dataset: Training data
        neg_lag: Chapter c uses adaptive negatives computed after chapter
            c - neg_lag (the initial ones while c <= neg_lag). An All-Layers
            run on N nodes behaves like neg_lag=N.
        test_set: Evaluation data
        eval_every: Evaluation cadence in chapters (0: final only)
    """
    _check_mode(plan, 'sequential')
    if neg_lag < 1:
        raise PlanError(f"neg_lag must be >= 1 (got {neg_lag})")
    started = time.perf_counter()
    engine = ChapterEngine(plan, dataset)
    adaptive = plan.uses_negatives and plan.neg_strategy == 'adaptive'
    engine.init_negatives()
    history: Dict[int, object] = {0: engine.negatives}
    for chapter in range(1, plan.splits + 1):
        if adaptive:
            engine.negatives = history[max(chapter - neg_lag, 0)]
        engine.prepare_negatives(chapter)
        logger.info("chapter %d/%d", chapter, plan.splits)
        for index in range(plan.num_layers):
            engine.train_layer(index, chapter)
        if adaptive and chapter + neg_lag <= plan.splits:
            history[chapter] = engine.refresh_negatives(chapter)
            history.pop(chapter - neg_lag, None)
        if test_set is not None and eval_every and chapter % eval_every == 0 and chapter < plan.splits:
            engine.evaluate(test_set, chapter)
    metrics = engine.finish()
    metrics.wall_seconds = time.perf_counter() - started
    return finalize(plan, Model.from_engine(engine), metrics, test_set)


def run_single_layer_pff(plan: TrainingPlan,
                         dataset: Dataset,
                         transport: Union[str, Network] = 'inproc',
                         test_set: Optional[Dataset] = None,
                         eval_every: int = 0,
                         timeout: float = DEFAULT_TIMEOUT) -> RunResult:
    """One node per layer; see the module docstring."""
    _check_mode(plan, 'single')
    return run_nodes(plan, [dataset] * plan.nodes, transport, test_set, eval_every, timeout)


def run_all_layers_pff(plan: TrainingPlan,
                       dataset: Dataset,
                       transport: Union[str, Network] = 'inproc',
                       test_set: Optional[Dataset] = None,
                       eval_every: int = 0,
                       timeout: float = DEFAULT_TIMEOUT) -> RunResult:
    """Every node trains the whole network, chapters passed round a ring."""
    _check_mode(plan, 'all')
    return run_nodes(plan, [dataset] * plan.nodes, transport, test_set, eval_every, timeout)


def run_federated_pff(plan: TrainingPlan,
                      partitions: Sequence[Dataset],
                      transport: Union[str, Network] = 'inproc',
                      test_set: Optional[Dataset] = None,
                      eval_every: int = 0,
                      timeout: float = DEFAULT_TIMEOUT) -> RunResult:
    """
    The All-Layers ring over private partitions; only snapshots cross the transport.

    Raises:
        PartitionError: Wrong number of partitions or an empty one
    """
    _check_mode(plan, 'federated')
    if len(partitions) != plan.nodes:
        raise PartitionError(f"{len(partitions)} partitions for {plan.nodes} nodes")
    for i, part in enumerate(partitions):
        if len(part) == 0:
            raise PartitionError(f"Partition {i} is empty")
    return run_nodes(plan, partitions, transport, test_set, eval_every, timeout)


def run_plan(plan: TrainingPlan,
             train: Union[Dataset, Sequence[Dataset]],
             transport: Union[str, Network] = 'inproc',
             test_set: Optional[Dataset] = None,
             eval_every: int = 0,
             timeout: float = DEFAULT_TIMEOUT) -> RunResult:
    """Dispatch on ``plan.mode``; federated runs take a list of partitions."""
    if plan.mode == 'sequential':
        return run_sequential(plan, train, test_set=test_set, eval_every=eval_every)
    if plan.mode == 'single':
        return run_single_layer_pff(plan, train, transport, test_set, eval_every, timeout)
    if plan.mode == 'all':
        return run_all_layers_pff(plan, train, transport, test_set, eval_every, timeout)
    return run_federated_pff(plan, train, transport, test_set, eval_every, timeout)


def untrained_model(plan: TrainingPlan) -> Model:
    """The seeded network every node starts from."""
    return Model(initial_layers(plan), plan.num_classes,
                 initial_softmax_head(plan) if plan.softmax_head else None,
                 initial_perfopt_heads(plan) if plan.perfopt else [])
