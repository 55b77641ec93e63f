# ffpipe/client.py
import logging
import math
import subprocess
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .config import RunConfig
from .data import Dataset, load_cifar10, load_mnist_idx, partition, synthetic_blobs
from .exceptions import ConfigError, DatasetError
from .fetch import DatasetFetcher, cifar10_paths, mnist_paths
from .metrics import (
    RunMetrics,
    UtilizationReport,
    summarize,
    utilization_report,
    write_metrics_csv,
)
from .model import Model
from .pipeline import (
    NodeRunner,
    RunResult,
    assemble_model,
    collect_metrics,
    finalize,
    run_plan,
)
from .schedule import TrainingPlan
from .transport import TcpNetwork, TcpTransport

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.json'
MODEL_FILE = 'model.ffm'
CONFIG_FILE = 'run.ini'


class PipelineClient:
    """Runs, joins, evaluates and benchmarks training runs described by a RunConfig."""

    def __init__(self, config: RunConfig):
        """
        Args:
            config: Validated run configuration
        """
        self.config = config
        self.plan: TrainingPlan = config.to_plan()
        self._data: Optional[Tuple[Dataset, Dataset]] = None

    def load_data(self) -> Tuple[Dataset, Dataset]:
        """
        Training and test sets for the configured dataset.

        Raises:
            DatasetError: Missing or malformed files
        """
        if self._data is not None:
            return self._data
        cfg = self.config
        dtype = self.plan.dtype
        if cfg.dataset == 'mnist':
            paths = mnist_paths(cfg.data_dir)
            train = load_mnist_idx(paths['train_images'], paths['train_labels'], dtype, name='mnist-train')
            test = load_mnist_idx(paths['test_images'], paths['test_labels'], dtype, name='mnist-test')
        elif cfg.dataset == 'cifar10':
            paths = cifar10_paths(cfg.data_dir)
            train = load_cifar10(paths['train'], dtype, name='cifar10-train')
            test = load_cifar10(paths['test'], dtype, name='cifar10-test')
        elif cfg.dataset == 'blobs':
            blobs = synthetic_blobs(cfg.blobs_train + cfg.blobs_test, cfg.layers[0], cfg.num_classes,
                                    cfg.blobs_separation, cfg.seed, dtype=dtype)
            train = blobs.subset(slice(0, cfg.blobs_train), name='blobs-train')
            test = blobs.subset(slice(cfg.blobs_train, None), name='blobs-test')
        else:
            raise ConfigError(f"Unknown dataset: {cfg.dataset}")

        if cfg.train_limit:
            train = train.subset(slice(0, cfg.train_limit))
        if cfg.test_limit:
            test = test.subset(slice(0, cfg.test_limit))
        if train.dim != cfg.layers[0]:
            raise DatasetError(f"{train.name} has {train.dim} features but layers start at {cfg.layers[0]}")
        self._data = (train, test)
        return self._data

    def node_datasets(self, train: Dataset) -> List[Dataset]:
        """Training data per node: partitions for federated runs, the full set otherwise."""
        if self.plan.mode == 'federated':
            return partition(train, self.plan.nodes, self.config.partition, self.config.seed)
        return [train] * self.plan.nodes

    def train(self, spawn_workers: bool = True) -> RunResult:
        """
        Run the configured plan.

        With the TCP transport this process hosts the board server; workers are
        spawned as local processes unless ``spawn_workers`` is False, in which
        case it waits for ``ffpipe worker`` processes to connect.
        """
        train, test = self.load_data()
        if self.plan.mode == 'sequential' or self.config.transport == 'inproc':
            data = self.node_datasets(train) if self.plan.mode == 'federated' else train
            return run_plan(self.plan, data, self.config.transport, test, self.config.eval_every,
                            self.config.timeout)
        return self._serve(test, spawn_workers)

    def _serve(self, test: Dataset, spawn_workers: bool) -> RunResult:
        cfg = self.config
        network = TcpNetwork(self.plan, cfg.timeout, cfg.host, cfg.port)
        started = time.perf_counter()
        workers: List[subprocess.Popen] = []
        try:
            host, port = network.address
            if spawn_workers:
                config_path = cfg.with_changes(host=host, port=port).save(Path(cfg.out_dir) / CONFIG_FILE)
                for node in range(self.plan.nodes):
                    workers.append(subprocess.Popen([
                        sys.executable, '-m', 'ffpipe', 'worker', '--config', str(config_path),
                        '--node', str(node), '--host', host, '--port', str(port),
                    ]))
                logger.info("Spawned %d workers against %s:%d", len(workers), host, port)
            else:
                logger.warning("Board server waiting for %d workers on %s:%d", self.plan.nodes, host, port)
            self._wait_for_workers(network, workers)
            with network.connect(None) as collector:
                model = assemble_model(self.plan, collector)
            metrics = collect_metrics(self.plan, network, time.perf_counter() - started)
        finally:
            for proc in workers:
                if proc.poll() is None:
                    proc.terminate()
                proc.wait()
            network.close()
        return finalize(self.plan, model, metrics, test)

    def _wait_for_workers(self, network: TcpNetwork, workers: List[subprocess.Popen]) -> None:
        board = network.board
        while not board.wait_done(self.plan.nodes, 1.0):
            for node, proc in enumerate(workers):
                code = proc.poll()
                if code is not None and code != 0 and node not in board.done:
                    board.abort(None, f"worker {node} exited with status {code}")

    def worker(self, node_id: int, host: str, port: int) -> RunMetrics:
        """
        Join a TCP run as ``node_id``.

        Raises:
            TransportError: Board server unreachable, timeouts, aborts
        """
        if self.plan.mode == 'sequential':
            raise ConfigError("sequential runs have no workers")
        if not 0 <= node_id < self.plan.nodes:
            raise ConfigError(f"node id {node_id} outside [0, {self.plan.nodes})")
        train, test = self.load_data()
        dataset = self.node_datasets(train)[node_id]
        transport = TcpTransport(self.plan, host, port, node_id, self.config.timeout)
        runner = NodeRunner(self.plan, dataset, node_id, transport, test, self.config.eval_every)
        return runner.run()

    def evaluate(self, model_path: Path, classifier: Optional[str] = None) -> float:
        """Accuracy (percent) of a saved model on the configured test set."""
        model = Model.load(model_path)
        _, test = self.load_data()
        return model.accuracy(test, classifier or self.config.classifier)

    def bench(self, delay_ms: float) -> UtilizationReport:
        """
        Time the sequential schedule against the configured pipeline with a
        fixed per-batch delay added to every training step.
        """
        train, test = self.load_data()
        delayed = self.plan.with_changes(batch_delay_ms=delay_ms)
        sequential = delayed.with_changes(mode='sequential', nodes=1)
        baseline = run_plan(sequential, train)
        pipelined = delayed if delayed.mode != 'sequential' else delayed.with_changes(mode='all')
        data = self.node_datasets(train) if pipelined.mode == 'federated' else train
        result = run_plan(pipelined, data, self.config.transport, timeout=self.config.timeout)
        logger.info("bench: sequential %.2fs, %s on %d nodes %.2fs", baseline.metrics.wall_seconds,
                    pipelined.mode, pipelined.nodes, result.metrics.wall_seconds)
        return utilization_report(result.metrics, baseline.metrics.wall_seconds)

    def write_outputs(self, result: RunResult, out_dir: Optional[Path] = None) -> Dict[str, Path]:
        """Write metrics CSV, summary and model file."""
        out_dir = Path(out_dir or self.config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            'metrics': write_metrics_csv(out_dir / METRICS_FILE, result.metrics.records),
            'model': result.model.save(out_dir / MODEL_FILE),
        }
        summary = summarize(result.metrics.records)
        if not math.isnan(result.metrics.test_accuracy):
            summary.test_accuracy = result.metrics.test_accuracy
        summary.wall_seconds = max(summary.wall_seconds, result.metrics.wall_seconds)
        paths['summary'] = out_dir / SUMMARY_FILE
        paths['summary'].write_text(summary.to_json())
        return paths

    @staticmethod
    def fetch(data_dir: Path, dataset: str) -> None:
        fetcher = DatasetFetcher(data_dir)
        if dataset == 'mnist':
            fetcher.fetch_mnist()
        elif dataset == 'cifar10':
            fetcher.fetch_cifar10()
        else:
            raise ConfigError(f"Nothing to fetch for dataset {dataset}")
