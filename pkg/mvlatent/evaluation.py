'''
Downstream evaluation of learned representations.
'''

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg
from scipy.stats import multivariate_normal

from mvlatent.networks import encode_mean
from mvlatent.tensor import ShapeError, Tensor
from mvlatent.utils import chunk_ranges, format_value, get_logger, worker_count

log = get_logger(__name__)

FEATURE_SOURCES = ('z_from_x', 'z_from_y', 'hx', 'hy', 'concat_zx_zy')
C_GRID = (0.01, 0.1, 1.0, 10.0)
CCA_RIDGE = 1e-6
CHUNK_ROWS = 256


@dataclass
class EvalConfig:
    features: List[str] = field(default_factory=lambda: ['z_from_x'])
    c_grid: List[float] = field(default_factory=lambda: list(C_GRID))
    raw_baseline: bool = False
    cca_baseline: bool = False
    iterations: int = 200

    def __post_init__(self):
        unknown = [f for f in self.features if f not in FEATURE_SOURCES]
        if unknown:
            raise ValueError(f'Unknown feature sources {unknown}, expected any of {FEATURE_SOURCES}')
        if not self.c_grid or min(self.c_grid) <= 0:
            raise ValueError(f'c_grid needs positive values, got {self.c_grid}')
        if self.iterations < 2:
            raise ValueError(f'iterations must be >= 2, got {self.iterations}')


class FeatureMatrix:
    def __init__(self, values, source):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError('features', [values.shape], f'features must be a matrix, got shape {values.shape}')
        if not np.all(np.isfinite(values)):
            raise ValueError(f'{source} features contain non-finite values')
        self.values = values
        self.source = source

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def __repr__(self):
        return f'FeatureMatrix({self.source}, {self.rows}x{self.cols})'


def _as_values(feats):
    if isinstance(feats, FeatureMatrix):
        return feats.values
    return np.asarray(feats, dtype=np.float64)


def _posterior_means(net, inputs):
    '''Means for all rows, computed in chunks on a thread pool and reassembled in row order'''
    ranges = chunk_ranges(inputs.shape[0], max(1, inputs.shape[0] // CHUNK_ROWS))
    results = {}
    with ThreadPoolExecutor(max_workers=worker_count(len(ranges))) as executor:
        futures = {executor.submit(lambda a, b: encode_mean(net, Tensor(inputs[a:b])).data, a, b): a for a, b in ranges}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return np.concatenate([results[a] for a, _ in ranges], axis=0)


def extract_features(bundle, x=None, y=None, which='z_from_x'):
    '''Posterior means (no sampling, dropout off) of the requested encoder'''
    if which not in FEATURE_SOURCES:
        raise ValueError(f'Unknown feature source {which!r}, expected one of {FEATURE_SOURCES}')
    needs = {
        'z_from_x': [('enc_zx', x)],
        'z_from_y': [('enc_zy', y)],
        'hx': [('enc_hx', x)],
        'hy': [('enc_hy', y)],
        'concat_zx_zy': [('enc_zx', x), ('enc_zy', y)],
    }[which]
    blocks = []
    for name, inputs in needs:
        if name not in bundle.networks:
            raise ValueError(f'{which} features need encoder {name}, which this {bundle.kind.value} model lacks')
        if inputs is None:
            raise ValueError(f'{which} features need the {name[-1]} view')
        blocks.append(_posterior_means(bundle.networks[name], np.asarray(inputs, dtype=np.float64)))
    return FeatureMatrix(np.concatenate(blocks, axis=1), which)


class LinearClassifier:
    '''One-vs-all linear scores; prediction is the argmax, ties go to the lowest class'''

    def __init__(self, weights, biases, reg=None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.biases = np.asarray(biases, dtype=np.float64)
        self.reg = reg

    @property
    def class_count(self):
        return self.weights.shape[0]

    def scores(self, feats):
        values = _as_values(feats)
        if values.shape[1] != self.weights.shape[1]:
            raise ShapeError('classifier', [values.shape, self.weights.shape])
        return values @ self.weights.T + self.biases

    def predict(self, feats):
        return np.argmax(self.scores(feats), axis=1)


def train_linear_classifier(feats, labels, reg, iterations=200):
    '''
    Per class, minimise (1 / (2 reg)) |w|^2 + mean hinge(1 - y (w.x + b)).

    Full-batch subgradient steps of size reg / t on w, followed by projection onto
    the ball of radius sqrt(reg); the bias takes steps of size 1 / sqrt(t). The
    returned classifier averages the second half of the iterates.
    '''
    X = _as_values(feats)
    labels = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != labels.shape[0]:
        raise ShapeError('classifier', [X.shape, labels.shape])
    if reg <= 0:
        raise ValueError(f'reg must be positive, got {reg}')
    if labels.min() < 0:
        raise ValueError('labels must be nonnegative')
    if len(np.unique(labels)) < 2:
        raise ValueError('Cannot train a classifier on a single class')

    n, d = X.shape
    k = int(labels.max()) + 1
    Y = np.where(labels[:, None] == np.arange(k)[None, :], 1.0, -1.0)
    W = np.zeros((k, d))
    b = np.zeros(k)
    W_sum = np.zeros((k, d))
    b_sum = np.zeros(k)
    radius = np.sqrt(reg)
    start = iterations // 2
    for t in range(1, iterations + 1):
        margins = Y * (X @ W.T + b)
        active = np.where(margins < 1.0, Y, 0.0)
        W = (1.0 - 1.0 / t) * W + (reg / t) * ((active.T @ X) / n)
        norms = np.sqrt(np.sum(W * W, axis=1))
        over = norms > radius
        W[over] *= (radius / norms[over])[:, None]
        b = b + active.mean(axis=0) / np.sqrt(t)
        if t > start:
            W_sum += W
            b_sum += b
    count = iterations - start
    return LinearClassifier(W_sum / count, b_sum / count, reg)


def classification_error(clf, feats, labels):
    labels = np.asarray(labels)
    return float(np.mean(clf.predict(feats) != labels))


def select_classifier(train_feats, train_labels, tune_feats, tune_labels, grid=C_GRID, iterations=200):
    '''Fit one classifier per reg value and keep the lowest tune error (first wins ties)'''
    best = None
    for reg in grid:
        clf = train_linear_classifier(train_feats, train_labels, reg, iterations)
        error = classification_error(clf, tune_feats, tune_labels)
        log.debug(f'reg={reg}: tune error {error:.4f}')
        if best is None or error < best[1]:
            best = (clf, error)
    return best


def orthogonality_score(Z, H):
    '''|H^T Z|_F^2 / (|H|_F^2 |Z|_F^2)'''
    Z, H = _as_values(Z), _as_values(H)
    if Z.shape[0] != H.shape[0]:
        raise ShapeError('orthogonality_score', [Z.shape, H.shape])
    z_norm = np.sum(Z * Z)
    h_norm = np.sum(H * H)
    if z_norm == 0 or h_norm == 0:
        raise ValueError('orthogonality_score needs nonzero feature matrices')
    cross = H.T @ Z
    return float(np.sum(cross * cross) / (h_norm * z_norm))


@dataclass
class CcaResult:
    proj_x: np.ndarray
    proj_y: np.ndarray
    correlations: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray

    def transform_x(self, X):
        return (np.asarray(X) - self.mean_x) @ self.proj_x

    def transform_y(self, Y):
        return (np.asarray(Y) - self.mean_y) @ self.proj_y


def _inverse_sqrt(cov):
    values, vectors = scipy.linalg.eigh(cov)
    if values.min() <= 0:
        raise ValueError(f'Covariance is rank deficient beyond ridge repair (min eigenvalue {values.min():.3e})')
    return (vectors / np.sqrt(values)) @ vectors.T


def linear_cca(X, Y, k, ridge=CCA_RIDGE):
    '''
    Classical CCA: whiten each view, then take the top-k singular pairs of the
    whitened cross-covariance.
    '''
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    n, d_x = X.shape
    d_y = Y.shape[1]
    if Y.shape[0] != n:
        raise ShapeError('linear_cca', [X.shape, Y.shape])
    if not 1 <= k <= min(d_x, d_y):
        raise ValueError(f'k must lie in [1, {min(d_x, d_y)}], got {k}')
    if n <= max(d_x, d_y):
        raise ValueError(f'linear_cca needs more samples than dimensions, got N={n}, d={max(d_x, d_y)}')

    mean_x, mean_y = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mean_x, Y - mean_y
    c_xx = Xc.T @ Xc / (n - 1) + ridge * np.eye(d_x)
    c_yy = Yc.T @ Yc / (n - 1) + ridge * np.eye(d_y)
    c_xy = Xc.T @ Yc / (n - 1)
    w_x, w_y = _inverse_sqrt(c_xx), _inverse_sqrt(c_yy)
    U, S, Vt = scipy.linalg.svd(w_x @ c_xy @ w_y)
    proj_x = w_x @ U[:, :k]
    proj_y = w_y @ Vt[:k].T
    # fix signs so the largest loading of each x direction is positive
    signs = np.sign(proj_x[np.argmax(np.abs(proj_x), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    return CcaResult(proj_x * signs, proj_y * signs, np.clip(S[:k], 0.0, 1.0), mean_x, mean_y)


def analytic_linear_gaussian_loglik(W_x, W_y, x, y, A_x=None, A_y=None):
    '''
    Exact log p(x, y) of the linear Gaussian model x = W_x z + A_x h_x + e_x,
    y = W_y z + A_y h_y + e_y with standard normal z, h_x, h_y and unit noise.
    Batched inputs give one value per row.
    '''
    W_x, W_y = np.atleast_2d(np.asarray(W_x, dtype=np.float64)), np.atleast_2d(np.asarray(W_y, dtype=np.float64))
    d_x, d_y = W_x.shape[0], W_y.shape[0]
    c_xx = W_x @ W_x.T + np.eye(d_x)
    c_yy = W_y @ W_y.T + np.eye(d_y)
    if A_x is not None:
        A_x = np.atleast_2d(np.asarray(A_x, dtype=np.float64))
        c_xx = c_xx + A_x @ A_x.T
    if A_y is not None:
        A_y = np.atleast_2d(np.asarray(A_y, dtype=np.float64))
        c_yy = c_yy + A_y @ A_y.T
    c_xy = W_x @ W_y.T
    cov = np.block([[c_xx, c_xy], [c_xy.T, c_yy]])
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError('Joint covariance is not positive definite')
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    joint = np.concatenate([x.reshape(-1, d_x), y.reshape(-1, d_y)], axis=1)
    values = multivariate_normal(mean=np.zeros(d_x + d_y), cov=cov).logpdf(joint)
    return float(values) if x.ndim <= 1 and np.ndim(values) == 0 else np.atleast_1d(values)


def export_features_csv(feats, labels, path):
    values = _as_values(feats)
    labels = np.asarray(labels)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(','.join([f'f{i}' for i in range(values.shape[1])] + ['label']) + '\n')
        for row, label in zip(values, labels):
            f.write(','.join([format_value(float(v)) for v in row] + [str(int(label))]) + '\n')
    log.info(f'Wrote {values.shape[0]} feature rows to {path}')


def _split_arrays(dataset, split):
    idx = dataset.split_indices(split)
    return dataset.x[idx], dataset.y[idx], dataset.labels[idx]


def _evaluate_matrix(train, tune, test, eval_cfg):
    (f_train, l_train), (f_tune, l_tune), (f_test, l_test) = train, tune, test
    clf, tune_error = select_classifier(f_train, l_train, f_tune, l_tune, eval_cfg.c_grid, eval_cfg.iterations)
    return {
        'C': clf.reg,
        'tune_error': tune_error,
        'error_rate': classification_error(clf, f_test, l_test),
        'dim': int(_as_values(f_train).shape[1]),
    }


def evaluate(bundle, dataset, eval_cfg=None):
    '''
    Linear-classifier report on the test split, reg chosen on the tune split.
    Private models also get the orthogonality of shared and private features.
    '''
    eval_cfg = eval_cfg or EvalConfig()
    if dataset.labels is None:
        raise ValueError('Evaluation needs labelled data')
    splits = {name: _split_arrays(dataset, name) for name in ('train', 'tune', 'test')}
    report = {'objective_kind': bundle.kind.value, 'features': {}, 'baselines': {}}

    for which in eval_cfg.features:
        log.info(f'Evaluating {which} features')
        mats = [(extract_features(bundle, x, y, which), labels) for x, y, labels in splits.values()]
        report['features'][which] = _evaluate_matrix(*mats, eval_cfg)

    if eval_cfg.raw_baseline:
        log.info('Evaluating raw view-1 baseline')
        report['baselines']['raw_x'] = _evaluate_matrix(*[(x, labels) for x, _, labels in splits.values()], eval_cfg)

    if eval_cfg.cca_baseline:
        log.info('Evaluating linear CCA baseline')
        x_train, y_train, _ = splits['train']
        cca = linear_cca(x_train, y_train, min(bundle.d_z, x_train.shape[1], y_train.shape[1]))
        mats = [(cca.transform_x(x), labels) for x, _, labels in splits.values()]
        report['baselines']['cca_x'] = _evaluate_matrix(*mats, eval_cfg)

    if bundle.kind.is_private:
        x_test, y_test, _ = splits['test']
        z = extract_features(bundle, x_test, y_test, 'z_from_x')
        report['orthogonality'] = private_orthogonality(bundle, z, x_test, y_test)
    return report


def private_orthogonality(bundle, z, x, y):
    '''lambda(Z, H_x) and lambda(Z, H_y) for the available private encoders'''
    scores = {'lambda_z_hx': None, 'lambda_z_hy': None}
    if 'enc_hx' in bundle.networks:
        scores['lambda_z_hx'] = orthogonality_score(z, extract_features(bundle, x, y, 'hx'))
    if 'enc_hy' in bundle.networks:
        scores['lambda_z_hy'] = orthogonality_score(z, extract_features(bundle, x, y, 'hy'))
    return scores
