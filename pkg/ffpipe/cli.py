# ffpipe/cli.py
"""
Command line entry point.

    python -m ffpipe train --preset desk --mode all --nodes 4
    python -m ffpipe worker --config runs/run.ini --node 2 --host 10.0.0.5 --port 7000
    python -m ffpipe evaluate --model runs/model.ffm --classifier softmax
    python -m ffpipe bench --mode all --nodes 4 --delay-ms 5
    python -m ffpipe fetch --dataset mnist
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .client import PipelineClient
from .config import MODE_ALIASES, VALID_DATASETS, VALID_PRESETS, VALID_TRANSPORTS, load_config
from .exceptions import FFPipeError
from .schedule import VALID_CLASSIFIERS, VALID_MODES, VALID_NEG_STRATEGIES, VALID_PRECISIONS

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s [%(threadName)s] %(message)s'

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_UNEXPECTED = 2

_configured = False


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root handler once; level from the argument, FFPIPE_LOG or WARNING."""
    global _configured
    name = (level or os.getenv('FFPIPE_LOG') or 'WARNING').upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    if not _configured:
        logging.basicConfig(level=numeric, format=LOG_FORMAT, stream=sys.stderr)
        _configured = True
    else:
        logging.getLogger().setLevel(numeric)


def _layers(text: str):
    try:
        return tuple(int(w) for w in text.split(',') if w.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"layers must be comma-separated integers: {text!r}")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=Path, help='INI file with [plan], [data] and [run] sections')
    parser.add_argument('--preset', choices=sorted(VALID_PRESETS))
    parser.add_argument('--mode', choices=sorted(VALID_MODES | set(MODE_ALIASES)))
    parser.add_argument('--neg', choices=sorted(VALID_NEG_STRATEGIES))
    parser.add_argument('--classifier', choices=sorted(VALID_CLASSIFIERS))
    parser.add_argument('--nodes', type=int)
    parser.add_argument('--transport', choices=sorted(VALID_TRANSPORTS))
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out', dest='out_dir', type=Path, help='Output directory')
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--splits', type=int)
    parser.add_argument('--layers', type=_layers, help='Layer widths, e.g. 784,500,500,500')
    parser.add_argument('--batch-size', dest='batch_size', type=int)
    parser.add_argument('--precision', choices=sorted(VALID_PRECISIONS))
    parser.add_argument('--dataset', choices=sorted(VALID_DATASETS))
    parser.add_argument('--data-dir', dest='data_dir', type=Path)
    parser.add_argument('--partition', choices=['iid', 'byclass'])
    parser.add_argument('--eval-every', dest='eval_every', type=int, help='Evaluate every N chapters')
    parser.add_argument('--timeout', type=float, help='Seconds a node waits for a dependency')
    parser.add_argument('--log-level', dest='log_level')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='ffpipe', description='Pipelined Forward-Forward training')
    commands = parser.add_subparsers(dest='command', required=True)

    train = commands.add_parser('train', help='Run training and write metrics, summary and model')
    _add_run_options(train)
    train.add_argument('--host', help='Board server interface (tcp transport)')
    train.add_argument('--port', type=int, help='Board server port (tcp transport)')
    train.add_argument('--no-spawn', dest='spawn', action='store_false',
                       help='Wait for remote workers instead of spawning local ones')

    worker = commands.add_parser('worker', help='Join a TCP run as one node')
    _add_run_options(worker)
    worker.add_argument('--node', type=int, required=True)
    worker.add_argument('--host', required=True)
    worker.add_argument('--port', type=int, required=True)

    evaluate = commands.add_parser('evaluate', help='Test accuracy of a saved model')
    _add_run_options(evaluate)
    evaluate.add_argument('--model', type=Path, required=True)

    bench = commands.add_parser('bench', help='Sequential vs pipelined wall time with a per-batch delay')
    _add_run_options(bench)
    bench.add_argument('--delay-ms', dest='delay_ms', type=float, default=5.0)

    fetch = commands.add_parser('fetch', help='Download MNIST or CIFAR-10')
    fetch.add_argument('--dataset', choices=['mnist', 'cifar10'], default='mnist')
    fetch.add_argument('--data-dir', dest='data_dir', type=Path)
    fetch.add_argument('--log-level', dest='log_level')
    return parser


_OVERRIDES = ('preset', 'mode', 'neg', 'classifier', 'nodes', 'transport', 'seed', 'out_dir', 'epochs',
              'splits', 'layers', 'batch_size', 'precision', 'dataset', 'data_dir', 'partition',
              'eval_every', 'timeout', 'log_level', 'host', 'port')


def _client(args: argparse.Namespace) -> PipelineClient:
    overrides = {key: getattr(args, key, None) for key in _OVERRIDES}
    if args.command == 'worker':
        overrides['transport'] = 'tcp'
    config = load_config(args.config, **overrides)
    setup_logging(config.log_level)
    return PipelineClient(config)


def cmd_train(args: argparse.Namespace) -> int:
    client = _client(args)
    result = client.train(spawn_workers=args.spawn)
    paths = client.write_outputs(result)
    metrics = result.metrics
    print(f"mode {client.plan.mode} on {client.plan.nodes} node(s): "
          f"{metrics.wall_seconds:.2f}s, test accuracy {metrics.test_accuracy:.2f}%")
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_worker(args: argparse.Namespace) -> int:
    client = _client(args)
    client.worker(args.node, args.host, args.port)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    client = _client(args)
    print(f"{client.evaluate(args.model, args.classifier):.2f}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    client = _client(args)
    report = client.bench(args.delay_ms)
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_fetch(args: argparse.Namespace) -> int:
    setup_logging(args.log_level or 'INFO')
    data_dir = args.data_dir or Path(os.getenv('FFPIPE_DATA_DIR', 'data'))
    PipelineClient.fetch(data_dir, args.dataset)
    print(f"{args.dataset} ready in {data_dir}")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'worker': cmd_worker,
    'evaluate': cmd_evaluate,
    'bench': cmd_bench,
    'fetch': cmd_fetch,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(getattr(args, 'log_level', None))
    try:
        return COMMANDS[args.command](args)
    except FFPipeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"unexpected error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED
