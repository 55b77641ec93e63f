import json
import re

import pytest

from ffpipe.cli import EXIT_ERROR, EXIT_OK, build_parser, main
from ffpipe.metrics import CSV_HEADER


def _train(tmp_path, *extra):
    return main(['train', '--preset', 'test', '--out', str(tmp_path), *extra])


def _summary(out_dir):
    return json.loads((out_dir / 'summary.json').read_text())


class TestTrain:
    def test_writes_outputs(self, tmp_path, capsys):
        assert _train(tmp_path) == EXIT_OK
        out = capsys.readouterr().out
        assert re.search(r'test accuracy \d+\.\d{2}%', out)
        for name in ('metrics.csv', 'summary.json', 'model.ffm'):
            assert (tmp_path / name).exists()
        assert (tmp_path / 'metrics.csv').read_text().splitlines()[0] == ','.join(CSV_HEADER)
        summary = _summary(tmp_path)
        assert 0.0 <= summary['test_accuracy'] <= 100.0
        assert summary['wall_seconds'] > 0

    def test_same_seed_same_accuracy(self, tmp_path):
        first, second = tmp_path / 'a', tmp_path / 'b'
        assert _train(first, '--seed', '3', '--mode', 'all', '--nodes', '2') == EXIT_OK
        assert _train(second, '--seed', '3', '--mode', 'all', '--nodes', '2') == EXIT_OK
        assert _summary(first)['test_accuracy'] == _summary(second)['test_accuracy']
        assert (first / 'model.ffm').read_bytes() == (second / 'model.ffm').read_bytes()

    @pytest.mark.parametrize('extra', [
        ['--epochs', '3', '--splits', '2'],
        ['--splits', '0'],
        ['--mode', 'single', '--nodes', '5'],
    ])
    def test_invalid_plan(self, tmp_path, capsys, extra):
        assert _train(tmp_path, *extra) == EXIT_ERROR
        assert capsys.readouterr().err.startswith('error:')

    def test_bad_choice_is_a_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            _train(tmp_path, '--mode', 'ring')
        assert info.value.code == 2

    def test_mode_alias(self):
        args = build_parser().parse_args(['train', '--mode', 'fed'])
        assert args.mode == 'fed'
        assert args.spawn is True

    def test_tcp_workers_match_sequential(self, tmp_path, capsys):
        common = ['--epochs', '4', '--splits', '4', '--neg', 'random', '--seed', '5']
        assert _train(tmp_path / 'seq', *common) == EXIT_OK
        assert _train(tmp_path / 'tcp', *common, '--mode', 'all', '--nodes', '4', '--transport', 'tcp',
                      '--timeout', '60') == EXIT_OK
        assert (tmp_path / 'tcp' / 'run.ini').exists()
        assert 'mode all on 4 node(s)' in capsys.readouterr().out
        assert (tmp_path / 'tcp' / 'model.ffm').read_bytes() == (tmp_path / 'seq' / 'model.ffm').read_bytes()


class TestEvaluate:
    def test_prints_accuracy(self, tmp_path, capsys):
        assert _train(tmp_path) == EXIT_OK
        capsys.readouterr()
        assert main(['evaluate', '--preset', 'test', '--model', str(tmp_path / 'model.ffm')]) == EXIT_OK
        out = capsys.readouterr().out.strip()
        assert re.fullmatch(r'\d+\.\d{2}', out)
        assert float(out) == pytest.approx(_summary(tmp_path)['test_accuracy'], abs=0.01)

    def test_missing_model(self, tmp_path, capsys):
        assert main(['evaluate', '--preset', 'test', '--model', str(tmp_path / 'absent.ffm')]) == EXIT_ERROR
        assert 'not found' in capsys.readouterr().err


class TestOtherCommands:
    def test_bench(self, capsys):
        assert main(['bench', '--preset', 'test', '--mode', 'all', '--nodes', '2', '--delay-ms', '0']) == EXIT_OK
        assert 'speedup' in capsys.readouterr().out

    def test_bench_shows_single_layer_stagger(self, capsys):
        code = main(['bench', '--preset', 'test', '--mode', 'single', '--nodes', '2', '--neg', 'random',
                     '--delay-ms', '5'])
        assert code == EXIT_OK
        idle = {int(node): float(ms) for node, ms in
                re.findall(r'node (\d+): busy \d+ms idle (\d+)ms', capsys.readouterr().out)}
        assert set(idle) == {0, 1}
        # node 1 cannot start before node 0 has trained chapter 1: 2 epochs x 16 batches x 5ms
        assert idle[1] >= 100
        assert idle[0] < idle[1]

    def test_worker_needs_pipelined_mode(self, capsys):
        code = main(['worker', '--preset', 'test', '--node', '0', '--host', '127.0.0.1', '--port', '1'])
        assert code == EXIT_ERROR
        assert 'no workers' in capsys.readouterr().err

    def test_worker_node_range(self, capsys):
        code = main(['worker', '--preset', 'test', '--mode', 'all', '--nodes', '2', '--node', '2',
                     '--host', '127.0.0.1', '--port', '1'])
        assert code == EXIT_ERROR

    def test_command_required(self):
        with pytest.raises(SystemExit):
            main([])
