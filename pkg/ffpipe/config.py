# ffpipe/config.py
import configparser
import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Set, Tuple, Union

from .exceptions import ConfigError
from .schedule import VALID_CLASSIFIERS, VALID_MODES, VALID_NEG_STRATEGIES, VALID_PRECISIONS, TrainingPlan

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Everything a run needs: the training plan, where the data is, and how nodes talk."""
    # [plan]
    layers: Tuple[int, ...] = (784, 2000, 2000, 2000, 2000)
    batch_size: int = 64
    epochs: int = 100
    splits: int = 100
    lr_ff: float = 0.01
    lr_head: float = 0.0001
    theta: float = 0.01
    cooldown_start_epoch: Optional[float] = None
    seed: int = 0
    neg: str = 'adaptive'
    classifier: str = 'goodness'
    mode: str = 'sequential'
    nodes: int = 1
    precision: str = 'float32'
    batch_delay_ms: float = 0.0
    # [data]
    dataset: str = 'mnist'
    data_dir: Path = Path('data')
    num_classes: int = 10
    partition: str = 'iid'
    train_limit: int = 0
    test_limit: int = 0
    blobs_train: int = 1000
    blobs_test: int = 500
    blobs_separation: float = 4.0
    # [run]
    preset: str = 'paper'
    transport: str = 'inproc'
    host: str = '127.0.0.1'
    port: int = 0
    timeout: float = 120.0
    out_dir: Path = Path('runs')
    eval_every: int = 0
    log_level: str = 'WARNING'

    def validate(self) -> None:
        """
        Check every setting before any worker starts.

        Raises:
            ConfigError: On the first invalid setting
        """
        checks = [
            ('mode', self.mode, VALID_MODES),
            ('neg', self.neg, VALID_NEG_STRATEGIES),
            ('classifier', self.classifier, VALID_CLASSIFIERS),
            ('precision', self.precision, VALID_PRECISIONS),
            ('dataset', self.dataset, VALID_DATASETS),
            ('partition', self.partition, VALID_PARTITION_SCHEMES),
            ('transport', self.transport, VALID_TRANSPORTS),
            ('preset', self.preset, VALID_PRESETS),
        ]
        for name, value, valid in checks:
            if value not in valid:
                raise ConfigError(f"Invalid {name}: {value}. Must be one of: {', '.join(sorted(valid))}")
        if self.dataset in FIXED_CLASS_DATASETS and self.num_classes != FIXED_CLASS_DATASETS[self.dataset]:
            raise ConfigError(f"{self.dataset} has {FIXED_CLASS_DATASETS[self.dataset]} classes "
                              f"(got num_classes={self.num_classes})")
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be > 0 (got {self.timeout})")
        if self.eval_every < 0 or self.train_limit < 0 or self.test_limit < 0:
            raise ConfigError("eval_every, train_limit and test_limit must be >= 0")
        if not 0 <= self.port <= 65535:
            raise ConfigError(f"port must be in [0, 65535] (got {self.port})")
        self.to_plan()

    def to_plan(self) -> TrainingPlan:
        """
        Raises:
            PlanError: If the plan invariants do not hold
        """
        return TrainingPlan(
            layers=tuple(self.layers),
            epochs=self.epochs,
            splits=self.splits,
            nodes=self.nodes,
            batch_size=self.batch_size,
            lr_ff=self.lr_ff,
            lr_head=self.lr_head,
            theta=self.theta,
            cooldown_start_epoch=self.cooldown_start_epoch,
            seed=self.seed,
            neg_strategy=self.neg,
            classifier=self.classifier,
            mode=self.mode,
            precision=self.precision,
            num_classes=self.num_classes,
            batch_delay_ms=self.batch_delay_ms,
        )

    def with_changes(self, **changes) -> 'RunConfig':
        return replace(self, **changes)

    def save(self, path: Union[str, Path]) -> Path:
        """Write the config in the format load_config reads."""
        parser = configparser.ConfigParser()
        for section, keys in SECTIONS.items():
            parser[section] = {key: _format(getattr(self, key)) for key in sorted(keys)}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            parser.write(f)
        return path


# Validation sets
VALID_PRESETS: Set[str] = {'paper', 'desk', 'test'}
VALID_DATASETS: Set[str] = {'mnist', 'cifar10', 'blobs'}
VALID_PARTITION_SCHEMES: Set[str] = {'iid', 'byclass'}
VALID_TRANSPORTS: Set[str] = {'inproc', 'tcp'}

FIXED_CLASS_DATASETS: Dict[str, int] = {'mnist': 10, 'cifar10': 10}

MODE_ALIASES: Dict[str, str] = {'seq': 'sequential', 'fed': 'federated'}

PRESETS: Dict[str, Dict[str, Any]] = {
    'paper': {},
    'desk': {'layers': (784, 500, 500, 500), 'epochs': 20, 'splits': 20},
    'test': {'layers': (24, 32, 32), 'epochs': 4, 'splits': 2, 'batch_size': 16, 'dataset': 'blobs',
             'num_classes': 4, 'precision': 'float64', 'blobs_train': 256, 'blobs_test': 128,
             'lr_ff': 0.03, 'lr_head': 0.01},
}

SECTIONS: Dict[str, Set[str]] = {
    'plan': {'layers', 'batch_size', 'epochs', 'splits', 'lr_ff', 'lr_head', 'theta', 'cooldown_start_epoch',
             'seed', 'neg', 'classifier', 'mode', 'nodes', 'precision', 'batch_delay_ms'},
    'data': {'dataset', 'data_dir', 'num_classes', 'partition', 'train_limit', 'test_limit',
             'blobs_train', 'blobs_test', 'blobs_separation'},
    'run': {'preset', 'transport', 'host', 'port', 'timeout', 'out_dir', 'eval_every', 'log_level'},
}

ENV_VARS: Dict[str, str] = {
    'FFPIPE_LOG': 'log_level',
    'FFPIPE_DATA_DIR': 'data_dir',
    'FFPIPE_OUT_DIR': 'out_dir',
    'FFPIPE_SEED': 'seed',
    'FFPIPE_TIMEOUT': 'timeout',
    'FFPIPE_HOST': 'host',
    'FFPIPE_PORT': 'port',
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


def _parse(key: str, raw: Any) -> Any:
    """Convert a text setting to the field's type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"Unknown setting: {key}")
    if not isinstance(raw, str):
        return tuple(int(w) for w in raw) if key == 'layers' else raw
    text = raw.strip()
    try:
        if key == 'layers':
            return tuple(int(w) for w in text.replace(' ', '').split(',') if w)
        if key == 'cooldown_start_epoch':
            return None if text.lower() in ('', 'none') else float(text)
        if key == 'mode':
            return MODE_ALIASES.get(text, text)
        field_type = _FIELD_TYPES[key]
        if field_type is int:
            return int(text)
        if field_type is float:
            return float(text)
        if field_type is Path:
            return Path(text).expanduser()
        return text
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: {raw!r}")


def _read_file(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}")
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"{path}: unknown setting {key} in [{section}]")
            values[key] = raw
    return values


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> RunConfig:
    """
    Build a RunConfig.

    Layers, later ones winning: the preset's values, FFPIPE_* environment
    variables, the config file, then ``overrides`` (None values are ignored).
    The preset itself is picked from overrides, the file, FFPIPE_PRESET or
    'paper', in that order.

    Raises:
        ConfigError: Unknown settings, bad values or an invalid plan
    """
    overrides = {k: v for k, v in overrides.items() if v is not None}
    from_file = _read_file(path) if path is not None else {}
    preset = overrides.get('preset') or from_file.get('preset') or os.getenv('FFPIPE_PRESET') or 'paper'
    if preset not in PRESETS:
        raise ConfigError(f"Invalid preset: {preset}. Must be one of: {', '.join(sorted(VALID_PRESETS))}")

    values: Dict[str, Any] = dict(PRESETS[preset], preset=preset)
    for env_name, key in ENV_VARS.items():
        raw = os.getenv(env_name)
        if raw:
            values[key] = _parse(key, raw)
    for key, raw in from_file.items():
        values[key] = _parse(key, raw)
    for key, raw in overrides.items():
        values[key] = _parse(key, raw)

    config = RunConfig(**values)
    if isinstance(config.log_level, str):
        config.log_level = config.log_level.upper()
    config.validate()
    logger.debug("Loaded config: %s", config)
    return config
