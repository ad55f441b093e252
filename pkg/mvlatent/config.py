'''
Strict JSON run configurations.

A run config has the sections data, model, train, eval and out. Unknown keys
are rejected with their dotted path, and the fully resolved config (defaults
included) is what gets written next to every run.
'''

import dataclasses
import json

from dataclasses import dataclass, field
from pathlib import Path

from mvlatent.datasets import DataConfig
from mvlatent.distributions import ObservationModel
from mvlatent.evaluation import EvalConfig
from mvlatent.objectives import ModelConfig
from mvlatent.training import TrainConfig
from mvlatent.utils import ConfigError, get_logger, write_json

log = get_logger(__name__)

SECTIONS = {'data': DataConfig, 'model': ModelConfig, 'train': TrainConfig, 'eval': EvalConfig}
NESTED = {(ModelConfig, 'obs_x'): ObservationModel, (ModelConfig, 'obs_y'): ObservationModel}
DEFAULT_OUT = 'runs/default'


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = DEFAULT_OUT

    def to_dict(self):
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _build(cls, values, prefix):
    if not isinstance(values, dict):
        raise ConfigError(f'expected an object, got {type(values).__name__}', prefix)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError('unknown key', f'{prefix}.{key}')
    kwargs = {}
    for key, value in values.items():
        nested = NESTED.get((cls, key))
        kwargs[key] = _build(nested, value, f'{prefix}.{key}') if nested is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), prefix)


def parse_value(text):
    '''JSON literal when it parses, otherwise the raw string'''
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(document, assignment):
    '''Apply one `section.key=value` assignment to a raw config document'''
    if '=' not in assignment:
        raise ConfigError(f'override {assignment!r} is not of the form section.key=value')
    path, text = assignment.split('=', 1)
    keys = path.strip().split('.')
    if keys[0] not in SECTIONS and keys != ['out']:
        raise ConfigError('unknown section', keys[0])
    if keys == ['out']:
        document['out'] = parse_value(text)
        return document
    if len(keys) < 2:
        raise ConfigError('override needs a key inside the section', path)
    node = document.setdefault(keys[0], {})
    for key in keys[1:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError('cannot set a key inside a non-object value', path)
    node[keys[-1]] = parse_value(text)
    return document


def build_run_config(document):
    if not isinstance(document, dict):
        raise ConfigError('run config must be a JSON object')
    for key in document:
        if key not in SECTIONS and key != 'out':
            raise ConfigError('unknown key', key)
    sections = {name: _build(cls, document.get(name, {}), name) for name, cls in SECTIONS.items()}
    out = document.get('out', DEFAULT_OUT)
    if not isinstance(out, str):
        raise ConfigError('must be a path string', 'out')
    return RunConfig(out=out, **sections)


def load_run_config(path=None, overrides=(), seed=None, out=None):
    '''
    Read a run config (or start from defaults), apply --set overrides, then
    --seed and --out, and validate the result
    '''
    document = {}
    if path is not None:
        try:
            with open(path, encoding='utf-8') as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f'invalid JSON ({e})', str(path))
    for assignment in overrides or ():
        document = apply_override(document, assignment)
    if seed is not None:
        document.setdefault('train', {})['seed'] = seed
        document.setdefault('data', {})['seed'] = seed
    if out is not None:
        document['out'] = str(out)
    run_cfg = build_run_config(document)
    log.debug(f'Resolved config: {run_cfg}')
    return run_cfg


def write_resolved(run_cfg, directory):
    path = Path(directory) / 'config.resolved.json'
    write_json(path, run_cfg.to_dict())
    return path
