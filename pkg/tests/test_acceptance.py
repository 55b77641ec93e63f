"""
Desk-scale runs. Skipped unless pytest is given --runslow; the MNIST and
CIFAR-10 ones also need the dataset files (see ``ffpipe fetch``).
"""
import pytest

from ffpipe.client import PipelineClient
from ffpipe.config import load_config
from ffpipe.data import partition
from ffpipe.pipeline import run_federated_pff, run_sequential, untrained_model

pytestmark = pytest.mark.slow

_DESK_RUNS = {}


def _desk(mnist_dir, **changes):
    """Train (once per setting) at desk scale on MNIST."""
    key = tuple(sorted(changes.items()))
    if key not in _DESK_RUNS:
        client = PipelineClient(load_config(preset='desk', data_dir=mnist_dir, **changes))
        _DESK_RUNS[key] = (client, client.train())
    return _DESK_RUNS[key]


class TestSpeedup:
    def test_four_node_ring(self):
        config = load_config(preset='test', layers='24,32,32,32,32', epochs=20, splits=20, mode='all', nodes=4,
                             neg='random', blobs_train=64, batch_size=16)
        report = PipelineClient(config).bench(delay_ms=20)
        assert report.speedup >= 3.0, '\n'.join(report.lines())

    def test_single_node_has_no_speedup(self):
        config = load_config(preset='test', epochs=10, splits=10, mode='all', nodes=1, neg='random',
                             blobs_train=64)
        report = PipelineClient(config).bench(delay_ms=20)
        assert report.speedup == pytest.approx(1.0, abs=0.05)


@pytest.mark.data
class TestMnist:
    def test_untrained_is_chance(self, mnist_dir):
        client = PipelineClient(load_config(preset='desk', data_dir=mnist_dir))
        _, test = client.load_data()
        assert untrained_model(client.plan).accuracy(test) == pytest.approx(10.0, abs=2.0)

    def test_adaptive_goodness(self, mnist_dir):
        _, result = _desk(mnist_dir)
        assert result.metrics.test_accuracy >= 95.0

    def test_strategy_ordering(self, mnist_dir):
        _, adaptive = _desk(mnist_dir)
        _, random = _desk(mnist_dir, neg='random')
        _, fixed = _desk(mnist_dir, neg='fixed')
        assert adaptive.metrics.test_accuracy >= random.metrics.test_accuracy
        assert random.metrics.test_accuracy >= fixed.metrics.test_accuracy - 0.3
        assert random.metrics.wall_seconds < adaptive.metrics.wall_seconds

    def test_perfopt(self, mnist_dir):
        _, adaptive = _desk(mnist_dir)
        client, result = _desk(mnist_dir, classifier='perfopt-all')
        assert result.metrics.test_accuracy >= 95.0
        assert result.metrics.negative_batches == 0
        assert result.metrics.wall_seconds < adaptive.metrics.wall_seconds
        _, test = client.load_data()
        last = result.model.accuracy(test, 'perfopt-last')
        assert result.metrics.test_accuracy >= last - 0.5

    def test_ring_matches_desk_accuracy(self, mnist_dir):
        _, result = _desk(mnist_dir, mode='all', nodes=4)
        assert result.metrics.test_accuracy >= 95.0

    def test_federated_beats_single_partitions(self, mnist_dir):
        config = load_config(preset='desk', data_dir=mnist_dir, mode='federated', nodes=2, partition='byclass',
                             epochs=4, splits=4)
        client = PipelineClient(config)
        train, test = client.load_data()
        parts = partition(train, 2, 'byclass')
        federated = run_federated_pff(client.plan, parts, test_set=test).metrics.test_accuracy
        solo = client.plan.with_changes(mode='sequential', nodes=1)
        baselines = [run_sequential(solo, part, test_set=test).metrics.test_accuracy for part in parts]
        assert federated >= max(baselines) + 10.0


@pytest.mark.data
class TestCifar:
    def test_record_counts(self, cifar_dir):
        client = PipelineClient(load_config(dataset='cifar10', data_dir=cifar_dir, layers='3072,500,500'))
        train, test = client.load_data()
        assert (len(train), len(test)) == (50000, 10000)
        assert train.labels.min() == 0 and train.labels.max() == 9

    def test_short_perfopt_run(self, cifar_dir):
        config = load_config(dataset='cifar10', data_dir=cifar_dir, layers='3072,500,500,500', epochs=5, splits=5,
                             classifier='perfopt-all')
        assert PipelineClient(config).train().metrics.test_accuracy > 35.0
