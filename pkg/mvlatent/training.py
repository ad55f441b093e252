'''
Adam optimisation of the multi-view objectives, metric logging and checkpoints.
'''

import json
import time

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
from packaging.version import InvalidVersion, Version

from mvlatent import tensor as T
from mvlatent.distributions import ObservationModel
from mvlatent.evaluation import extract_features, private_orthogonality
from mvlatent.networks import MlpSpec, Network
from mvlatent.objectives import (
    NETWORK_ORDER,
    Batch,
    BiElboTerms,
    ModelBundle,
    ObjectiveConfig,
    ObjectiveKind,
    build_bundle,
    compute_loss,
    sample_negatives,
)
from mvlatent.tensor import NumericalError, RngState, ShapeError, Tensor
from mvlatent.utils import ConfigError, format_value, get_logger, write_json

log = get_logger(__name__)

FORMAT_VERSION = '1.0'
METRIC_COLUMNS = ('epoch', 'step', 'total', 'kl_z', 'kl_hx', 'kl_hy', 'rec_x', 'rec_y', 'wall_ms')
DZ_GRID = (10, 20, 30, 40, 50)
DROPOUT_GRID = (0.0, 0.1, 0.2, 0.4)


class TrainingAborted(NumericalError):
    def __init__(self, epoch, step, terms, op='train'):
        self.epoch = epoch
        self.step = step
        self.terms = terms
        breakdown = terms.as_dict() if terms is not None else 'no completed step'
        super().__init__(op, f'Non-finite value in {op} at epoch {epoch}, step {step}; last terms: {breakdown}')


class CheckpointError(ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f'{path}: {message}')


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    L: int = 1
    mu: float = 0.5
    dropout_rate: float = 0.0
    view_lik_weights: List[float] = field(default_factory=lambda: [1.0, 1.0])
    margin: float = 0.5
    eval_every: int = 0
    clip_norm: Optional[float] = None
    track_orthogonality: bool = False
    log_wall_time: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.view_lik_weights = [float(w) for w in self.view_lik_weights]
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 0:
            raise ValueError('epochs and eval_every must be >= 0, batch_size >= 1')
        if self.learning_rate <= 0:
            raise ValueError(f'learning_rate must be positive, got {self.learning_rate}')
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f'clip_norm must be positive, got {self.clip_norm}')
        self.objective(training=True)

    def objective(self, training=True):
        return ObjectiveConfig(
            L=self.L,
            mu=self.mu,
            view_lik_weights=tuple(self.view_lik_weights),
            dropout_rate=self.dropout_rate,
            margin=self.margin,
            training=training,
        )


class AdamState:
    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @classmethod
    def fresh(cls, params, **kwargs):
        return cls([p.shape for p in params], **kwargs)

    def hyperparameters(self):
        return {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps, 't': self.t}


def adam_step(params, grads, state):
    '''
    In-place Adam update:
    m <- b1 m + (1 - b1) g, v <- b2 v + (1 - b2) g^2,
    theta <- theta - lr m_hat / (sqrt(v_hat) + eps)
    '''
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError('adam', [len(params), len(grads), len(state.m)], 'parameter, gradient and state counts differ')
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError('adam', [p.shape, g.shape, state.m[i].shape])
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def clip_gradients(grads, max_norm):
    '''Rescale all gradients together so their global norm is at most max_norm'''
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads], norm
    return grads, norm


class TrainState:
    def __init__(self, adam, seed, epoch=0):
        self.adam = adam
        self.seed = seed
        self.epoch = epoch


class TrainResult(NamedTuple):
    bundle: ModelBundle
    state: TrainState
    metrics: list


def save_checkpoint(path, bundle, state):
    '''
    Directory with manifest.json, params.bin (little-endian float64 in manifest
    order) and adam.bin (first moments, then second moments)
    '''
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = bundle.parameters()
    manifest = {
        'format_version': FORMAT_VERSION,
        'objective_kind': bundle.kind.value,
        'dims': {'d_x': bundle.d_x, 'd_y': bundle.d_y, 'd_z': bundle.d_z, 'd_hx': bundle.d_hx, 'd_hy': bundle.d_hy},
        'networks': {name: net.spec.to_dict() for name, net in bundle.named_networks()},
        'log_sigma_clamp': list(next(iter(bundle.networks.values())).log_sigma_clamp),
        'observation': {'x': bundle.obs_x.to_dict(), 'y': bundle.obs_y.to_dict()},
        'rng': {'seed': state.seed, 'epoch': state.epoch},
        'parameters': [{'name': name, 'shape': list(t.shape)} for name, t in params],
        'adam': state.adam.hyperparameters(),
    }
    with open(path / 'params.bin', 'wb') as f:
        for _, t in params:
            f.write(t.data.astype('<f8').tobytes())
    with open(path / 'adam.bin', 'wb') as f:
        for m in state.adam.m:
            f.write(m.astype('<f8').tobytes())
        for v in state.adam.v:
            f.write(v.astype('<f8').tobytes())
    write_json(path / 'manifest.json', manifest)
    log.info(f'Saved checkpoint (epoch {state.epoch}) to {path}')


def _read_blob(path, expected_values):
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) != 8 * expected_values:
        raise CheckpointError(path, f'blob length mismatch: expected {8 * expected_values} bytes, found {len(raw)}')
    return np.frombuffer(raw, dtype='<f8').astype(np.float64)


def load_checkpoint(path):
    path = Path(path)
    with open(path / 'manifest.json', encoding='utf-8') as f:
        text = f.read()
    try:
        manifest = json.loads(text)
        version = Version(manifest['format_version'])
    except (json.JSONDecodeError, KeyError, TypeError, InvalidVersion) as e:
        raise CheckpointError(path / 'manifest.json', f'corrupt manifest ({e})')
    if version.major != Version(FORMAT_VERSION).major:
        raise CheckpointError(path, f'format version {version} is not compatible with {FORMAT_VERSION}')

    try:
        kind = ObjectiveKind.parse(manifest['objective_kind'])
        dims = manifest['dims']
        clamp = tuple(manifest['log_sigma_clamp'])
        entries = manifest['parameters']
        shapes = [tuple(e['shape']) for e in entries]
        specs = {name: MlpSpec.from_dict(spec) for name, spec in manifest['networks'].items()}
        obs_x = ObservationModel.from_dict(manifest['observation']['x'])
        obs_y = ObservationModel.from_dict(manifest['observation']['y'])
        adam_meta = manifest['adam']
        rng_meta = manifest['rng']
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(path / 'manifest.json', f'corrupt manifest ({e})')

    counts = [int(np.prod(s)) for s in shapes]
    flat = _read_blob(path / 'params.bin', sum(counts))
    offsets = np.cumsum([0] + counts)
    values = {e['name']: flat[offsets[i] : offsets[i + 1]].reshape(shapes[i]) for i, e in enumerate(entries)}

    networks = {}
    for name in NETWORK_ORDER:
        if name not in specs:
            continue
        spec = specs[name]
        layers = len(spec.layer_widths) - 1
        try:
            weights = [Tensor(values[f'{name}.W{i}'], requires_grad=True, name=f'{name}.W{i}') for i in range(layers)]
            biases = [Tensor(values[f'{name}.b{i}'], requires_grad=True, name=f'{name}.b{i}') for i in range(layers)]
            networks[name] = Network(spec, weights, biases, clamp)
        except (KeyError, ShapeError) as e:
            raise CheckpointError(path, f'parameters do not match network {name} ({e})')
    bundle = ModelBundle(kind, networks, obs_x, obs_y, dims['d_z'], dims['d_hx'], dims['d_hy'])
    if [name for name, _ in bundle.parameters()] != [e['name'] for e in entries]:
        raise CheckpointError(path, 'parameter order differs from the manifest')

    adam = AdamState(shapes, adam_meta['lr'], adam_meta['beta1'], adam_meta['beta2'], adam_meta['eps'])
    adam.t = adam_meta['t']
    moments = _read_blob(path / 'adam.bin', 2 * sum(counts))
    half = sum(counts)
    for i, shape in enumerate(shapes):
        adam.m[i] = moments[offsets[i] : offsets[i + 1]].reshape(shape).copy()
        adam.v[i] = moments[half + offsets[i] : half + offsets[i + 1]].reshape(shape).copy()
    log.info(f'Loaded {kind.value} checkpoint (epoch {rng_meta["epoch"]}) from {path}')
    return bundle, TrainState(adam, rng_meta['seed'], rng_meta['epoch'])


def check_grids(model_cfg, train_cfg):
    '''Warn about hyperparameters outside the usual tuning grids'''
    if model_cfg.kind.is_variational and model_cfg.d_z not in DZ_GRID:
        log.warning(f'd_z={model_cfg.d_z} is outside the usual grid {DZ_GRID}')
    if train_cfg.dropout_rate not in DROPOUT_GRID:
        log.warning(f'dropout_rate={train_cfg.dropout_rate} is outside the usual grid {DROPOUT_GRID}')


def _metric_row(epoch, step, terms, wall_ms):
    if isinstance(terms, BiElboTerms):
        terms = terms.combined()
    row = {'epoch': epoch, 'step': step, 'wall_ms': wall_ms}
    row.update(terms.as_dict())
    return row


def write_table(path, columns, rows):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(','.join(columns) + '\n')
        for row in rows:
            f.write(','.join(format_value(row.get(c)) for c in columns) + '\n')


def write_metrics(path, rows):
    write_table(path, METRIC_COLUMNS, rows)


def read_table(path):
    rows = []
    with open(path, encoding='utf-8') as f:
        header = f.readline().strip().split(',')
        for line in f:
            cells = line.rstrip('\n').split(',')
            row = {}
            for name, cell in zip(header, cells):
                if cell == '':
                    row[name] = None
                elif name in ('epoch', 'step'):
                    row[name] = int(cell)
                else:
                    row[name] = float(cell)
            rows.append(row)
    return rows


def _orthogonality(bundle, dataset):
    idx = dataset.split_indices('tune') if 'tune' in dataset.splits else dataset.split_indices('train')
    x, y = dataset.x[idx], dataset.y[idx]
    return private_orthogonality(bundle, extract_features(bundle, x, y, 'z_from_x'), x, y)


def train(model_cfg, train_cfg, dataset, out_dir=None, resume=None):
    '''
    Run train_cfg.epochs epochs of minibatch Adam on the train split.

    Every epoch visits the samples in a permutation drawn from the 'shuffle'
    substream; step s of epoch e draws its noise and dropout masks from
    substream('step', e, s). Resuming from a checkpoint continues after its
    last completed epoch and reproduces the uninterrupted run.
    '''
    train_idx = dataset.split_indices('train')
    n = len(train_idx)
    if n == 0:
        raise ConfigError('training split is empty', 'data')
    if train_cfg.batch_size > n:
        raise ConfigError(f'batch_size {train_cfg.batch_size} exceeds the {n} training samples', 'train.batch_size')
    root = RngState(train_cfg.seed)

    if resume is not None:
        bundle, state = load_checkpoint(resume)
        if state.seed != train_cfg.seed:
            raise ConfigError(f'checkpoint was trained with seed {state.seed}, not {train_cfg.seed}', 'train.seed')
        if bundle.kind != model_cfg.kind:
            raise ConfigError(f'checkpoint holds a {bundle.kind.value} model', 'model.objective_kind')
    else:
        bundle = build_bundle(model_cfg, dataset.d_x, dataset.d_y, root)
        params = [t for _, t in bundle.parameters()]
        adam = AdamState.fresh(
            params, lr=train_cfg.learning_rate, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.adam_eps
        )
        state = TrainState(adam, train_cfg.seed, 0)
    if bundle.kind == ObjectiveKind.CONTRASTIVE and n < 2:
        raise ConfigError('contrastive training needs at least two samples', 'data')
    check_grids(model_cfg, train_cfg)

    params = [t for _, t in bundle.parameters()]
    cfg = train_cfg.objective(training=True)
    steps_per_epoch = -(-n // train_cfg.batch_size)

    metrics, ortho_rows = [], []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume is not None and (out_dir / 'metrics.csv').exists():
            metrics = [r for r in read_table(out_dir / 'metrics.csv') if r['epoch'] <= state.epoch]
        if resume is not None and (out_dir / 'orthogonality.csv').exists():
            ortho_rows = [r for r in read_table(out_dir / 'orthogonality.csv') if r['epoch'] <= state.epoch]
    track = train_cfg.track_orthogonality and bundle.kind.is_private

    def persist():
        if out_dir is None:
            return
        write_metrics(out_dir / 'metrics.csv', metrics)
        if track:
            write_table(out_dir / 'orthogonality.csv', ('epoch', 'lambda_z_hx', 'lambda_z_hy'), ortho_rows)
        save_checkpoint(out_dir / 'checkpoint', bundle, state)

    last_terms = None
    global_step = state.epoch * steps_per_epoch
    for epoch in range(state.epoch + 1, train_cfg.epochs + 1):
        order = train_idx[root.substream('shuffle', epoch).generator.permutation(n)]
        negatives = None
        if bundle.kind == ObjectiveKind.CONTRASTIVE:
            negatives = train_idx[sample_negatives(n, root.substream('negatives', epoch))]
            partner = dict(zip(train_idx.tolist(), negatives.tolist()))
        totals = []
        for step in range(steps_per_epoch):
            global_step += 1
            idx = order[step * train_cfg.batch_size : (step + 1) * train_cfg.batch_size]
            batch = Batch(dataset.x[idx], dataset.y[idx], idx)
            batch_negatives = dataset.y[[partner[i] for i in idx.tolist()]] if negatives is not None else None
            started = time.perf_counter()
            try:
                with T.Tape() as tape:
                    loss, terms = compute_loss(bundle, batch, cfg, root.substream('step', epoch, step), batch_negatives)
                    grads = T.backward(tape, loss)
            except NumericalError as e:
                log.error(f'Aborting at epoch {epoch}, step {step}: {e}')
                if out_dir is not None:
                    write_metrics(out_dir / 'metrics.csv', metrics)
                raise TrainingAborted(epoch, step, last_terms, e.op)
            grad_list = [grads[p].data if p in grads else np.zeros(p.shape) for p in params]
            if train_cfg.clip_norm is not None:
                grad_list, norm = clip_gradients(grad_list, train_cfg.clip_norm)
                log.debug(f'gradient norm {norm:.4g}')
            adam_step(params, grad_list, state.adam)
            wall_ms = (time.perf_counter() - started) * 1000.0 if train_cfg.log_wall_time else None
            last_terms = terms.combined() if isinstance(terms, BiElboTerms) else terms
            metrics.append(_metric_row(epoch, global_step, terms, wall_ms))
            totals.append(last_terms.total)
            log.debug(f'epoch {epoch} step {step}: objective {last_terms.total:.6g}')

        state.epoch = epoch
        log.info(f'Epoch {epoch}/{train_cfg.epochs}: mean objective {np.mean(totals):.6g} over {len(totals)} steps')
        periodic = train_cfg.eval_every and epoch % train_cfg.eval_every == 0
        if track and (periodic or epoch == train_cfg.epochs):
            scores = _orthogonality(bundle, dataset)
            ortho_rows.append({'epoch': epoch, **scores})
            log.info(f'Epoch {epoch}: lambda(Z, H_x)={scores["lambda_z_hx"]} lambda(Z, H_y)={scores["lambda_z_hy"]}')
        if periodic and epoch != train_cfg.epochs:
            persist()

    persist()
    return TrainResult(bundle, state, metrics)

