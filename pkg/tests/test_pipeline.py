import time

import numpy as np
import pytest

from ffpipe.config import RunConfig
from ffpipe.data import partition
from ffpipe.exceptions import DependencyTimeoutError, PartitionError, PlanError
from ffpipe.layers import embed_labels, forward_network
from ffpipe.metrics import EVALUATION_NODE
from ffpipe.pipeline import (
    run_all_layers_pff,
    run_federated_pff,
    run_nodes,
    run_plan,
    run_sequential,
    run_single_layer_pff,
    untrained_model,
)
from ffpipe.transport import InProcessNetwork, InProcessTransport
from ffpipe.wire import MsgType, SnapshotKind

from conftest import INPUT_DIM, assert_same_model, sparse_strokes


class JitterTransport(InProcessTransport):
    """Delays every publication by a random few milliseconds."""

    def __init__(self, *args, max_delay=0.02, seed=0, **kwargs):
        super().__init__(*args, **kwargs)
        self.max_delay = max_delay
        self._rng = np.random.default_rng([seed, self.node_id if self.node_id is not None else 99])

    def _put_snapshot(self, snapshot):
        time.sleep(float(self._rng.uniform(0, self.max_delay)))
        super()._put_snapshot(snapshot)


class JitterNetwork(InProcessNetwork):
    def __init__(self, plan, timeout, max_delay=0.02, seed=0):
        super().__init__(plan, timeout)
        self.max_delay = max_delay
        self.seed = seed

    def connect(self, node_id):
        return JitterTransport(self.board, self.plan, node_id, self.timeout, max_delay=self.max_delay, seed=self.seed)


class RecordingTransport(InProcessTransport):
    """Appends ('put' | 'got', node, layer, chapter) to a shared event list."""

    def __init__(self, *args, events, **kwargs):
        super().__init__(*args, **kwargs)
        self.events = events

    def _put_snapshot(self, snapshot):
        if snapshot.kind == SnapshotKind.FF_LAYER:
            self.events.append(('put', self.node_id, snapshot.layer_index, snapshot.chapter))
        super()._put_snapshot(snapshot)

    def _take_snapshot(self, key, timeout):
        snapshot = super()._take_snapshot(key, timeout)
        kind, layer_index, chapter = key
        if kind == SnapshotKind.FF_LAYER and self.node_id is not None:
            self.events.append(('got', self.node_id, layer_index, chapter))
        return snapshot


class RecordingNetwork(InProcessNetwork):
    def __init__(self, plan, timeout):
        super().__init__(plan, timeout)
        self.events = []

    def connect(self, node_id):
        return RecordingTransport(self.board, self.plan, node_id, self.timeout, events=self.events)


class SilentTransport(InProcessTransport):
    def _put_snapshot(self, snapshot):
        pass


class SilentNodeNetwork(InProcessNetwork):
    """Node ``silent`` never publishes anything."""

    def __init__(self, plan, timeout, silent):
        super().__init__(plan, timeout)
        self.silent = silent

    def connect(self, node_id):
        cls = SilentTransport if node_id == self.silent else InProcessTransport
        return cls(self.board, self.plan, node_id, self.timeout)


@pytest.fixture
def sequential(make_plan, train_set):
    cache = {}

    def _run(neg_lag=1, **changes):
        key = (neg_lag, tuple(sorted(changes.items())))
        if key not in cache:
            cache[key] = run_sequential(make_plan(**changes), train_set, neg_lag=neg_lag)
        return cache[key]
    return _run


class TestAllLayers:
    @pytest.mark.parametrize('neg', ['random', 'fixed'])
    @pytest.mark.parametrize('nodes', [1, 2, 4])
    def test_matches_sequential(self, make_plan, train_set, sequential, neg, nodes):
        result = run_all_layers_pff(make_plan(mode='all', nodes=nodes, neg_strategy=neg), train_set)
        assert_same_model(result.model, sequential(neg_strategy=neg).model)

    @pytest.mark.parametrize('nodes', [1, 2])
    def test_adaptive_matches_lagged_sequential(self, make_plan, train_set, sequential, nodes):
        result = run_all_layers_pff(make_plan(mode='all', nodes=nodes, neg_strategy='adaptive'), train_set)
        assert_same_model(result.model, sequential(neg_lag=nodes, neg_strategy='adaptive').model)

    def test_tcp_matches_inproc(self, make_plan, train_set):
        plan = make_plan(mode='all', nodes=2, neg_strategy='adaptive')
        tcp = run_all_layers_pff(plan, train_set, transport='tcp', timeout=30.0)
        inproc = run_all_layers_pff(plan, train_set)
        assert_same_model(tcp.model, inproc.model)
        assert tcp.metrics.traffic[MsgType.LAYER_SNAPSHOT] > 0

    def test_jitter_does_not_change_result(self, make_plan, train_set, sequential):
        plan = make_plan(mode='all', nodes=2)
        result = run_all_layers_pff(plan, train_set, transport=JitterNetwork(plan, timeout=30.0))
        assert_same_model(result.model, sequential().model)

    @pytest.mark.parametrize('nodes,depth,splits,epochs,classifier,neg', [
        (2, 2, 2, 4, 'goodness', 'random'),
        (3, 4, 6, 6, 'goodness', 'fixed'),
        (8, 3, 16, 16, 'goodness', 'random'),
        (5, 8, 5, 5, 'goodness', 'random'),
        (4, 2, 8, 8, 'softmax', 'random'),
        (7, 5, 4, 8, 'softmax', 'fixed'),
        (1, 8, 3, 3, 'softmax', 'random'),
        (8, 8, 16, 16, 'perfopt-all', 'random'),
        (3, 6, 12, 12, 'perfopt-last', 'random'),
    ])
    def test_random_delays_keep_result(self, make_plan, train_set, nodes, depth, splits, epochs, classifier, neg):
        changes = dict(layers=(INPUT_DIM,) + (10,) * depth, splits=splits, epochs=epochs, classifier=classifier,
                       neg_strategy=neg)
        plan = make_plan(mode='all', nodes=nodes, **changes)
        network = JitterNetwork(plan, timeout=30.0, max_delay=0.005, seed=100 * nodes + depth)
        result = run_all_layers_pff(plan, train_set, transport=network)
        assert_same_model(result.model, run_sequential(make_plan(**changes), train_set).model)

    def test_more_nodes_than_chapters(self, make_plan, train_set, sequential):
        result = run_all_layers_pff(make_plan(mode='all', nodes=6), train_set)
        assert_same_model(result.model, sequential().model)
        assert set(result.metrics.timings) == set(range(6))

    def test_softmax_head_travels_with_last_layer(self, make_plan, train_set, sequential):
        result = run_all_layers_pff(make_plan(mode='all', nodes=2, classifier='softmax'), train_set)
        assert result.model.head is not None
        assert_same_model(result.model, sequential(classifier='softmax').model)

    def test_perfopt_uses_no_negatives(self, make_plan, train_set, sequential):
        result = run_all_layers_pff(make_plan(mode='all', nodes=2, classifier='perfopt-all'), train_set)
        baseline = sequential(classifier='perfopt-all')
        assert result.metrics.negative_batches == 0
        assert baseline.metrics.negative_batches == 0
        assert len(result.model.perfopt_heads) == 3
        assert_same_model(result.model, baseline.model)

    def test_missing_publication_times_out(self, make_plan, train_set):
        plan = make_plan(mode='all', nodes=2)
        with pytest.raises(DependencyTimeoutError) as info:
            run_all_layers_pff(plan, train_set, transport=SilentNodeNetwork(plan, 1.0, silent=1), timeout=1.0)
        assert info.value.publisher == 1


class TestSingleLayer:
    @pytest.mark.parametrize('neg', ['adaptive', 'random'])
    def test_matches_sequential(self, make_plan, train_set, sequential, neg):
        result = run_single_layer_pff(make_plan(mode='single', nodes=3, neg_strategy=neg), train_set)
        assert_same_model(result.model, sequential(neg_strategy=neg).model)

    def test_layers_wait_on_the_layer_below(self, make_plan, train_set):
        plan = make_plan(mode='single', nodes=3)
        network = RecordingNetwork(plan, timeout=30.0)
        run_single_layer_pff(plan, train_set, transport=network)
        events = network.events
        got = {(node, layer, chapter) for kind, node, layer, chapter in events if kind == 'got'}
        assert got == {(node, layer, chapter) for node in range(3) for layer in range(node)
                       for chapter in range(1, plan.splits + 1)}
        assert not any(node == 0 for node, _, _ in got)
        for node, layer, chapter in got:
            assert events.index(('put', layer, layer, chapter)) < events.index(('got', node, layer, chapter))
        for kind, node, layer, chapter in events:
            if kind == 'put':
                for below in range(node):
                    assert events.index(('got', node, below, chapter)) < events.index(('put', node, node, chapter))
        assert events.index(('put', 0, 0, 1)) < events.index(('put', 1, 1, 1))

    def test_adaptive_negatives_cross_the_transport(self, make_plan, train_set):
        result = run_single_layer_pff(make_plan(mode='single', nodes=3, neg_strategy='adaptive'), train_set)
        assert result.metrics.traffic[MsgType.NEG_LABELS] > 0

    def test_tcp_matches_inproc(self, make_plan, train_set, sequential):
        plan = make_plan(mode='single', nodes=3, neg_strategy='adaptive')
        result = run_single_layer_pff(plan, train_set, transport='tcp', timeout=30.0)
        assert_same_model(result.model, sequential(neg_strategy='adaptive').model)


class TestFederated:
    def test_identical_partitions_match_all_layers(self, make_plan, train_set):
        ring = run_all_layers_pff(make_plan(mode='all', nodes=2, neg_strategy='adaptive'), train_set)
        federated = run_federated_pff(make_plan(mode='federated', nodes=2, neg_strategy='adaptive'),
                                      [train_set, train_set])
        assert_same_model(federated.model, ring.model)

    def test_only_snapshots_cross_the_transport(self, make_plan, train_set, test_set):
        plan = make_plan(mode='federated', nodes=2, neg_strategy='adaptive')
        result = run_federated_pff(plan, partition(train_set, 2, 'byclass'), test_set=test_set)
        assert result.metrics.traffic[MsgType.NEG_LABELS] == 0
        assert result.metrics.traffic[MsgType.LAYER_SNAPSHOT] > 0
        assert 0.0 <= result.metrics.test_accuracy <= 100.0

    def test_partition_count(self, make_plan, train_set):
        with pytest.raises(PartitionError):
            run_federated_pff(make_plan(mode='federated', nodes=2), [train_set])


class TestRunPlan:
    def test_mode_mismatch(self, make_plan, train_set):
        with pytest.raises(PlanError):
            run_sequential(make_plan(mode='all', nodes=2), train_set)
        with pytest.raises(PlanError):
            run_all_layers_pff(make_plan(), train_set)

    def test_dataset_count(self, make_plan, train_set):
        with pytest.raises(PlanError):
            run_nodes(make_plan(mode='all', nodes=2), [train_set])

    def test_neg_lag(self, make_plan, train_set):
        with pytest.raises(PlanError):
            run_sequential(make_plan(), train_set, neg_lag=0)

    def test_dispatch(self, make_plan, train_set, sequential):
        assert_same_model(run_plan(make_plan(mode='all', nodes=2), train_set).model, sequential().model)
        assert_same_model(run_plan(make_plan(), train_set).model, sequential().model)

    def test_periodic_evaluation(self, make_plan, train_set, test_set):
        result = run_all_layers_pff(make_plan(mode='all', nodes=2), train_set, test_set=test_set, eval_every=1)
        rows = [r for r in result.metrics.records if r.node_id == EVALUATION_NODE]
        assert sorted(r.chapter for r in rows) == [1, 2, 3, 4]
        assert rows[-1].test_accuracy == result.metrics.test_accuracy

    def test_training_rows_per_epoch(self, make_plan, train_set):
        result = run_all_layers_pff(make_plan(mode='all', nodes=2), train_set)
        rows = [r for r in result.metrics.records if r.node_id != EVALUATION_NODE]
        assert len(rows) == 4 * 3
        assert {r.node_id for r in rows if r.chapter % 2 == 1} == {0}
        assert all(np.isfinite(r.train_loss) for r in rows)

    def test_final_accuracy_is_model_accuracy(self, make_plan, train_set, test_set):
        plan = make_plan(neg_strategy='adaptive')
        result = run_sequential(plan, train_set, test_set=test_set)
        assert result.metrics.test_accuracy == result.model.accuracy(test_set)
        assert 0.0 <= result.metrics.test_accuracy <= 100.0

    def test_untrained_model_is_the_shared_start(self, make_plan):
        plan = make_plan(mode='all', nodes=2, classifier='softmax')
        assert_same_model(untrained_model(plan), untrained_model(plan.with_changes(mode='sequential', nodes=1)))


class TestLearning:
    def test_goodness_learns_at_default_rates(self, make_plan):
        defaults = RunConfig()
        data = sparse_strokes(4000)
        train, test = data.subset(slice(0, 3000), name='train'), data.subset(slice(3000, None), name='test')
        plan = make_plan(layers=(784, 200, 200, 200), num_classes=10, batch_size=defaults.batch_size,
                         lr_ff=defaults.lr_ff, lr_head=defaults.lr_head, theta=defaults.theta,
                         neg_strategy='adaptive', precision='float32')
        model = run_sequential(plan, train).model
        for raw in forward_network(model.layers, embed_labels(test.images, test.labels, 10)):
            assert np.mean(raw > 0) > 0
        assert model.accuracy(test, 'goodness') >= 50.0
