import math
import time

import pytest

from ffpipe.exceptions import ProtocolError
from ffpipe.metrics import (
    EVALUATION_NODE,
    MetricsRecord,
    NodeClock,
    NodeTiming,
    RunMetrics,
    read_metrics_csv,
    summarize,
    utilization_report,
    write_metrics_csv,
)


def test_clock_accounts_for_all_wall_time():
    clock = NodeClock()
    with clock.busy():
        time.sleep(0.02)
    with clock.comm():
        time.sleep(0.01)
    time.sleep(0.01)
    t = clock.timing(3)
    assert t.busy_ms >= 20 and t.comm_ms >= 10 and t.idle_ms > 0
    assert t.busy_ms + t.idle_ms + t.comm_ms == pytest.approx(t.wall_ms)
    assert 0 < t.utilization < 1


def test_clock_counts_busy_on_error():
    clock = NodeClock()
    with pytest.raises(RuntimeError):
        with clock.busy():
            time.sleep(0.01)
            raise RuntimeError('fail')
    assert clock.busy_s >= 0.01


class TestRecord:
    def test_bytes(self):
        record = MetricsRecord(2, 5, 9, 1, 0.25, math.nan, 10.0, 2.0, 1.0, 13.0)
        decoded = MetricsRecord.from_bytes(record.to_bytes())
        assert decoded.node_id == 2 and decoded.layer == 1
        assert decoded.train_loss == 0.25
        assert math.isnan(decoded.test_accuracy)
        assert decoded.wall_ms == 13.0

    def test_evaluation_node_survives_encoding(self):
        record = MetricsRecord(EVALUATION_NODE, 1, 2, -1, test_accuracy=87.5)
        assert MetricsRecord.from_bytes(record.to_bytes()).node_id == EVALUATION_NODE

    def test_wrong_size(self):
        with pytest.raises(ProtocolError):
            MetricsRecord.from_bytes(MetricsRecord(0, 1, 1, 0).to_bytes()[:-1])


class TestCsv:
    @pytest.fixture
    def records(self):
        return [
            MetricsRecord(0, 1, 1, 0, 0.7, busy_ms=10.0, idle_ms=5.0, comm_ms=1.0, wall_ms=16.0),
            MetricsRecord(1, 1, 1, 1, 0.6, busy_ms=8.0, idle_ms=6.0, comm_ms=2.0, wall_ms=16.0),
            MetricsRecord(0, 2, 2, 0, 0.5, busy_ms=20.0, idle_ms=5.0, comm_ms=1.0, wall_ms=26.0),
            MetricsRecord(EVALUATION_NODE, 2, 2, -1, test_accuracy=91.25, wall_ms=30.0),
        ]

    def test_summary_from_csv_matches(self, tmp_path, records):
        path = write_metrics_csv(tmp_path / 'out' / 'metrics.csv', records)
        read = read_metrics_csv(path)
        assert len(read) == len(records)
        assert [r.node_id for r in read] == [0, 1, 0, EVALUATION_NODE]
        direct, rebuilt = summarize(records), summarize(read)
        assert rebuilt.wall_seconds == pytest.approx(0.030, rel=1e-3)
        assert rebuilt.test_accuracy == pytest.approx(direct.test_accuracy, rel=1e-3)
        assert rebuilt.utilization.keys() == {0, 1}
        assert rebuilt.utilization[0] == pytest.approx(20 / 26, rel=1e-3)
        assert rebuilt.utilization[1] == pytest.approx(direct.utilization[1], rel=1e-3)

    def test_empty_cells_for_missing_values(self, tmp_path, records):
        path = write_metrics_csv(tmp_path / 'metrics.csv', records)
        rows = path.read_text().splitlines()
        assert rows[0] == 'node,chapter,epoch,layer,loss,acc,busy_ms,idle_ms,comm_ms,wall_ms'
        assert rows[1].split(',')[5] == ''

    def test_unexpected_header(self, tmp_path):
        path = tmp_path / 'metrics.csv'
        path.write_text('a,b\n1,2\n')
        with pytest.raises(ProtocolError):
            read_metrics_csv(path)

    def test_summary_json(self, records):
        text = summarize(records).to_json()
        assert '"test_accuracy": 91.25' in text
        assert '"0"' in text


class TestUtilization:
    def test_speedup_against_baseline(self):
        metrics = RunMetrics(timings={0: NodeTiming(0, 900, 100, 0, 1000), 1: NodeTiming(1, 800, 150, 50, 1000)},
                             wall_seconds=1.0)
        report = utilization_report(metrics, sequential_seconds=1.8)
        assert report.speedup == pytest.approx(1.8)
        assert report.utilization == pytest.approx(0.9)
        assert any('speedup' in line for line in report.lines())
        assert [t.node_id for t in report.nodes] == [0, 1]

    def test_single_node_without_baseline(self):
        metrics = RunMetrics(timings={0: NodeTiming(0, 500, 0, 0, 500)}, wall_seconds=0.5)
        assert utilization_report(metrics).speedup == 1.0
