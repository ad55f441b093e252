'''
Training losses of the multi-view models.

Every loss is the negative of the objective it stands for, averaged over the
minibatch, and comes with an itemised breakdown of its terms.
'''

from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from mvlatent import tensor as T
from mvlatent.distributions import (
    DiagonalGaussian,
    ObservationModel,
    bernoulli_log_lik,
    kl_to_standard_normal,
    reparameterize,
)
from mvlatent.networks import Dropout, MlpSpec, decode, encode, encode_mean, init_network
from mvlatent.tensor import ShapeError, Tensor
from mvlatent.utils import get_logger

log = get_logger(__name__)

NETWORK_ORDER = ('enc_zx', 'enc_zy', 'enc_hx', 'enc_hy', 'dec_x', 'dec_y')
NORM_EPS = 1e-24


class ObjectiveKind(Enum):
    VCCA = 'vcca'
    VCCA_PRIVATE = 'vcca_private'
    BI_VCCA = 'bi_vcca'
    BI_VCCA_PRIVATE = 'bi_vcca_private'
    MVAE = 'mvae'
    MVAE_VAR = 'mvae_var'
    CONTRASTIVE = 'contrastive'

    @property
    def is_private(self):
        return self in (ObjectiveKind.VCCA_PRIVATE, ObjectiveKind.BI_VCCA_PRIVATE)

    @property
    def is_bi(self):
        return self in (ObjectiveKind.BI_VCCA, ObjectiveKind.BI_VCCA_PRIVATE)

    @property
    def is_variational(self):
        return self in (
            ObjectiveKind.VCCA,
            ObjectiveKind.VCCA_PRIVATE,
            ObjectiveKind.BI_VCCA,
            ObjectiveKind.BI_VCCA_PRIVATE,
        )

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f'Unknown objective kind {value!r}, expected one of {[k.value for k in cls]}')


def default_obs_x():
    return ObservationModel('bernoulli')


def default_obs_y():
    return ObservationModel('gaussian_learned', sigmoid_mean=True)


@dataclass
class ModelConfig:
    objective_kind: str = 'vcca'
    d_z: int = 10
    d_hx: int = 30
    d_hy: int = 30
    hidden_widths: List[int] = field(default_factory=lambda: [128, 128])
    decoder_widths: Optional[List[int]] = None
    obs_x: ObservationModel = field(default_factory=default_obs_x)
    obs_y: ObservationModel = field(default_factory=default_obs_y)

    def __post_init__(self):
        self.objective_kind = ObjectiveKind.parse(self.objective_kind).value
        if isinstance(self.obs_x, dict):
            self.obs_x = ObservationModel.from_dict(self.obs_x)
        if isinstance(self.obs_y, dict):
            self.obs_y = ObservationModel.from_dict(self.obs_y)
        if self.d_z <= 0 or self.d_hx < 0 or self.d_hy < 0:
            raise ValueError(f'Latent dims must be d_z > 0 and d_hx, d_hy >= 0, got {self.d_z}, {self.d_hx}, {self.d_hy}')

    @property
    def kind(self):
        return ObjectiveKind(self.objective_kind)


@dataclass
class ObjectiveConfig:
    L: int = 1
    mu: float = 0.5
    view_lik_weights: Tuple[float, float] = (1.0, 1.0)
    dropout_rate: float = 0.0
    margin: float = 0.5
    training: bool = True

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f'L must be >= 1, got {self.L}')
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f'mu must lie in [0, 1], got {self.mu}')
        if len(self.view_lik_weights) != 2 or min(self.view_lik_weights) <= 0:
            raise ValueError(f'view_lik_weights must be two positive reals, got {self.view_lik_weights}')
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f'dropout_rate must lie in [0, 1), got {self.dropout_rate}')
        if self.margin < 0:
            raise ValueError(f'margin must be nonnegative, got {self.margin}')


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    indices: Optional[np.ndarray] = None

    @property
    def size(self):
        return self.x.shape[0]

    def sample_ids(self):
        if self.indices is None:
            return np.arange(self.size)
        return np.asarray(self.indices)


@dataclass
class ElboTerms:
    '''Batch-mean terms in nats; total is the objective value (the negative loss)'''

    total: float
    kl_z: Optional[float] = None
    kl_hx: Optional[float] = None
    kl_hy: Optional[float] = None
    rec_x: Optional[float] = None
    rec_y: Optional[float] = None

    FIELDS = ('total', 'kl_z', 'kl_hx', 'kl_hy', 'rec_x', 'rec_y')

    def as_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}


@dataclass
class BiElboTerms:
    from_x: ElboTerms
    from_y: ElboTerms
    mu: float

    @property
    def total(self):
        return self.combined().total

    def combined(self):
        '''mu-weighted view of the two bounds'''
        values = {}
        for name in ElboTerms.FIELDS:
            a, b = getattr(self.from_x, name), getattr(self.from_y, name)
            values[name] = None if a is None or b is None else self.mu * a + (1.0 - self.mu) * b
        return ElboTerms(**values)


class ModelBundle:
    '''
    Networks, observation models and latent sizes of one model variant
    '''

    def __init__(self, kind, networks, obs_x, obs_y, d_z, d_hx=0, d_hy=0):
        self.kind = ObjectiveKind.parse(kind)
        self.networks = dict(networks)
        self.obs_x = obs_x
        self.obs_y = obs_y
        self.d_z = d_z
        self.d_hx = d_hx if self.kind.is_private else 0
        self.d_hy = d_hy if self.kind.is_private else 0
        missing = [name for name in self.required_networks() if name not in self.networks]
        if missing:
            raise ValueError(f'{self.kind.value} bundle is missing networks {missing}')
        unknown = set(self.networks) - set(NETWORK_ORDER)
        if unknown:
            raise ValueError(f'Unknown network names {sorted(unknown)}')

    def required_networks(self):
        if self.kind == ObjectiveKind.CONTRASTIVE:
            return ['enc_zx', 'enc_zy']
        names = ['enc_zx']
        if self.kind.is_bi:
            names.append('enc_zy')
        if self.kind.is_private:
            if self.d_hx > 0:
                names.append('enc_hx')
            if self.d_hy > 0:
                names.append('enc_hy')
        return names + ['dec_x', 'dec_y']

    @property
    def d_x(self):
        return self.networks['enc_zx'].spec.input_dim

    @property
    def d_y(self):
        if 'dec_y' in self.networks:
            return self.networks['dec_y'].spec.output_dim
        return self.networks['enc_zy'].spec.input_dim

    def named_networks(self):
        return [(name, self.networks[name]) for name in NETWORK_ORDER if name in self.networks]

    def parameters(self):
        '''(qualified name, tensor) pairs in checkpoint order'''
        params = []
        for net_name, net in self.named_networks():
            for name, t in net.parameters:
                params.append((f'{net_name}.{name}', t))
        return params

    def set_log_sigma_clamp(self, clamp):
        for net in self.networks.values():
            net.log_sigma_clamp = clamp

    def __repr__(self):
        nets = ', '.join(f'{name}={net!r}' for name, net in self.named_networks())
        return f'ModelBundle({self.kind.value}, d_z={self.d_z}, d_hx={self.d_hx}, d_hy={self.d_hy}, {nets})'


def build_bundle(model_cfg, d_x, d_y, rng):
    '''Create freshly initialised networks for the configured objective kind'''
    kind = model_cfg.kind
    enc_widths = model_cfg.hidden_widths
    dec_widths = model_cfg.decoder_widths if model_cfg.decoder_widths is not None else enc_widths
    d_z, d_hx, d_hy = model_cfg.d_z, model_cfg.d_hx, model_cfg.d_hy
    obs_x, obs_y = model_cfg.obs_x, model_cfg.obs_y
    specs = {}

    if kind == ObjectiveKind.CONTRASTIVE:
        specs['enc_zx'] = MlpSpec(d_x, enc_widths, 'gaussian_means', d_z)
        specs['enc_zy'] = MlpSpec(d_y, enc_widths, 'gaussian_means', d_z)
    elif kind in (ObjectiveKind.MVAE, ObjectiveKind.MVAE_VAR):
        specs['enc_zx'] = MlpSpec(d_x, enc_widths, 'gaussian_means', d_z)
        squash_x = obs_x.kind == 'bernoulli' or obs_x.sigmoid_mean
        squash_y = obs_y.kind == 'bernoulli' or obs_y.sigmoid_mean
        specs['dec_x'] = MlpSpec(d_z, dec_widths, 'gaussian_means', d_x, squash_x)
        if kind == ObjectiveKind.MVAE_VAR:
            specs['dec_y'] = MlpSpec(d_z, dec_widths, 'bernoulli_means', d_y)
        else:
            specs['dec_y'] = MlpSpec(d_z, dec_widths, 'gaussian_means', d_y, squash_y)
    else:
        specs['enc_zx'] = MlpSpec(d_x, enc_widths, 'gaussian_params', d_z)
        if kind.is_bi:
            specs['enc_zy'] = MlpSpec(d_y, enc_widths, 'gaussian_params', d_z)
        if kind.is_private:
            if d_hx > 0:
                specs['enc_hx'] = MlpSpec(d_x, enc_widths, 'gaussian_params', d_hx)
            if d_hy > 0:
                specs['enc_hy'] = MlpSpec(d_y, enc_widths, 'gaussian_params', d_hy)
        else:
            d_hx = d_hy = 0
        specs['dec_x'] = MlpSpec(d_z + d_hx, dec_widths, obs_x.head, d_x, obs_x.sigmoid_mean)
        specs['dec_y'] = MlpSpec(d_z + d_hy, dec_widths, obs_y.head, d_y, obs_y.sigmoid_mean)

    networks = {name: init_network(spec, rng.substream('init', name), name) for name, spec in specs.items()}
    bundle = ModelBundle(kind, networks, obs_x, obs_y, model_cfg.d_z, model_cfg.d_hx, model_cfg.d_hy)
    log.debug(f'Built {bundle}')
    return bundle


def _check_batch(bundle, batch):
    if batch.x.ndim != 2 or batch.y.ndim != 2 or batch.x.shape[0] != batch.y.shape[0]:
        raise ShapeError('batch', [batch.x.shape, batch.y.shape])
    if batch.x.shape[1] != bundle.d_x or batch.y.shape[1] != bundle.d_y:
        raise ShapeError(
            'batch',
            [batch.x.shape, batch.y.shape],
            f'batch widths {batch.x.shape[1]}, {batch.y.shape[1]} do not match model widths {bundle.d_x}, {bundle.d_y}',
        )


def _noise(rng, ids, L, width):
    '''
    (L * N, width) standard normal block, row l * N + n belongs to sample ids[n];
    each sample draws its block from rng.substream('eps', id)
    '''
    blocks = np.stack([rng.substream('eps', int(i)).generator.standard_normal((L, width)) for i in ids], axis=1)
    return blocks.reshape(L * len(ids), width)


def _tile(q, L):
    return DiagonalGaussian(T.tile_rows(q.mu, L), T.tile_rows(q.log_sigma, L), clamp=q.clamp)


def _batch_mean(t):
    return T.mean(t)


class _Private(NamedTuple):
    q_hx: Optional[DiagonalGaussian]
    q_hy: Optional[DiagonalGaussian]
    kl_hx: Optional[Tensor]
    kl_hy: Optional[Tensor]


def _private_posteriors(bundle, batch, cfg, rng):
    if not bundle.kind.is_private:
        return None
    drop = Dropout(cfg.dropout_rate, rng.substream('private'), cfg.training)
    q_hx = q_hy = kl_hx = kl_hy = None
    if bundle.d_hx > 0:
        q_hx = encode(bundle.networks['enc_hx'], Tensor(batch.x), drop)
        kl_hx = _batch_mean(kl_to_standard_normal(q_hx))
    if bundle.d_hy > 0:
        q_hy = encode(bundle.networks['enc_hy'], Tensor(batch.y), drop)
        kl_hy = _batch_mean(kl_to_standard_normal(q_hy))
    return _Private(q_hx, q_hy, kl_hx, kl_hy)


def _bound(bundle, batch, cfg, rng, view, private):
    '''Negative ELBO with q(z | view) and the shared decoders'''
    L = cfg.L
    w_x, w_y = cfg.view_lik_weights
    drop = Dropout(cfg.dropout_rate, rng, cfg.training)
    x, y = Tensor(batch.x), Tensor(batch.y)

    q_z = encode(bundle.networks['enc_zx' if view == 'x' else 'enc_zy'], x if view == 'x' else y, drop)
    kl_z = _batch_mean(kl_to_standard_normal(q_z))

    d_hx = bundle.d_hx if private is not None else 0
    d_hy = bundle.d_hy if private is not None else 0
    eps = _noise(rng, batch.sample_ids(), L, bundle.d_z + d_hx + d_hy)
    z = reparameterize(_tile(q_z, L), eps[:, : bundle.d_z])
    latent_x = latent_y = z
    if d_hx > 0:
        h_x = reparameterize(_tile(private.q_hx, L), eps[:, bundle.d_z : bundle.d_z + d_hx])
        latent_x = T.concat([z, h_x])
    if d_hy > 0:
        h_y = reparameterize(_tile(private.q_hy, L), eps[:, bundle.d_z + d_hx :])
        latent_y = T.concat([z, h_y])

    rec_x = _batch_mean(bundle.obs_x.log_lik(T.tile_rows(x, L), decode(bundle.networks['dec_x'], latent_x, drop)))
    rec_y = _batch_mean(bundle.obs_y.log_lik(T.tile_rows(y, L), decode(bundle.networks['dec_y'], latent_y, drop)))

    kl = kl_z
    kl_hx = kl_hy = None
    if private is not None:
        kl_hx = private.kl_hx if private.kl_hx is not None else Tensor(0.0)
        kl_hy = private.kl_hy if private.kl_hy is not None else Tensor(0.0)
        kl = T.add(T.add(kl, kl_hx), kl_hy)
    loss = T.sub(kl, T.add(T.scale(rec_x, w_x), T.scale(rec_y, w_y)))

    terms = ElboTerms(
        total=-loss.item(),
        kl_z=kl_z.item(),
        kl_hx=None if kl_hx is None else kl_hx.item(),
        kl_hy=None if kl_hy is None else kl_hy.item(),
        rec_x=rec_x.item(),
        rec_y=rec_y.item(),
    )
    return loss, terms


def conditioned_bound(bundle, batch, cfg, rng, view='x'):
    '''
    Single bound conditioned on one view. The y-conditioned bound draws from
    rng.substream('bound', 'y'), exactly as inside bi_vcca_loss.
    '''
    if view not in ('x', 'y'):
        raise ValueError(f'view must be x or y, got {view!r}')
    _check_batch(bundle, batch)
    private = _private_posteriors(bundle, batch, cfg, rng)
    bound_rng = rng if view == 'x' else rng.substream('bound', 'y')
    return _bound(bundle, batch, cfg, bound_rng, view, private)


def vcca_loss(bundle, batch, cfg, rng):
    '''
    mean_i KL(q(z|x_i) || N(0, I)) - 1/L sum_l w_x log p(x_i|z_il) + w_y log p(y_i|z_il)
    '''
    if bundle.kind != ObjectiveKind.VCCA:
        raise ValueError(f'vcca_loss needs a vcca bundle, got {bundle.kind.value}')
    return conditioned_bound(bundle, batch, cfg, rng, 'x')


def vcca_private_loss(bundle, batch, cfg, rng):
    '''
    As vcca_loss with private variables h_x, h_y: their KL terms join the shared one
    and the decoders read concat(z, h).
    '''
    if bundle.kind != ObjectiveKind.VCCA_PRIVATE:
        raise ValueError(f'vcca_private_loss needs a vcca_private bundle, got {bundle.kind.value}')
    return conditioned_bound(bundle, batch, cfg, rng, 'x')


def bi_vcca_loss(bundle, batch, cfg, rng):
    '''
    mu * bound(q(z|x)) + (1 - mu) * bound(q(z|y)), sharing the decoders and,
    for private models, the private posteriors
    '''
    if not bundle.kind.is_bi:
        raise ValueError(f'bi_vcca_loss needs a bi_vcca bundle, got {bundle.kind.value}')
    if not 0.0 <= cfg.mu <= 1.0:
        raise ValueError(f'mu must lie in [0, 1], got {cfg.mu}')
    _check_batch(bundle, batch)
    private = _private_posteriors(bundle, batch, cfg, rng)
    loss_x, terms_x = _bound(bundle, batch, cfg, rng, 'x', private)
    loss_y, terms_y = _bound(bundle, batch, cfg, rng.substream('bound', 'y'), 'y', private)
    loss = T.add(T.scale(loss_x, cfg.mu), T.scale(loss_y, 1.0 - cfg.mu))
    return loss, BiElboTerms(terms_x, terms_y, cfg.mu)


def _squared_error(x, mean):
    return T.scale(T.sum(T.square(T.sub(x, mean)), axis=-1), 0.5)


def mvae_loss(bundle, batch, cfg, rng=None):
    '''mean_i w_x 1/2 |x_i - g_x(f(x_i))|^2 + w_y 1/2 |y_i - g_y(f(x_i))|^2'''
    _check_batch(bundle, batch)
    w_x, w_y = cfg.view_lik_weights
    drop = Dropout(cfg.dropout_rate, rng, cfg.training) if rng is not None else None
    x, y = Tensor(batch.x), Tensor(batch.y)
    code = encode_mean(bundle.networks['enc_zx'], x, drop)
    err_x = _batch_mean(_squared_error(x, decode(bundle.networks['dec_x'], code, drop).mean))
    err_y = _batch_mean(_squared_error(y, decode(bundle.networks['dec_y'], code, drop).mean))
    loss = T.add(T.scale(err_x, w_x), T.scale(err_y, w_y))
    return loss, ElboTerms(total=-loss.item(), rec_x=-err_x.item(), rec_y=-err_y.item())


def mvae_var_loss(bundle, batch, cfg, rng=None):
    '''mvae_loss with a cross-entropy view-2 term'''
    _check_batch(bundle, batch)
    dec_y = bundle.networks['dec_y']
    if dec_y.spec.head != 'bernoulli_means':
        raise ValueError(f'mvae_var_loss needs a bernoulli_means view-2 decoder, got {dec_y.spec.head}')
    w_x, w_y = cfg.view_lik_weights
    drop = Dropout(cfg.dropout_rate, rng, cfg.training) if rng is not None else None
    x, y = Tensor(batch.x), Tensor(batch.y)
    code = encode_mean(bundle.networks['enc_zx'], x, drop)
    err_x = _batch_mean(_squared_error(x, decode(bundle.networks['dec_x'], code, drop).mean))
    rec_y = _batch_mean(bernoulli_log_lik(y, decode(dec_y, code, drop).mean))
    loss = T.sub(T.scale(err_x, w_x), T.scale(rec_y, w_y))
    return loss, ElboTerms(total=-loss.item(), rec_x=-err_x.item(), rec_y=rec_y.item())


def cosine_distance(a, b):
    '''Row-wise 1 - <a, b> / (|a| |b|) with |v| = sqrt(|v|^2 + 1e-24)'''
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError('cosine_distance', [a.shape, b.shape])
    norm_a = T.sqrt(T.add(T.sum(T.square(a), axis=-1), NORM_EPS))
    norm_b = T.sqrt(T.add(T.sum(T.square(b), axis=-1), NORM_EPS))
    cos = T.div(T.sum(T.mul(a, b), axis=-1), T.mul(norm_a, norm_b))
    return T.sub(1.0, cos)


def contrastive_hinge(f_pos, g_pos, g_neg, m):
    '''mean max(0, m + dis(f(x+), g(y+)) - dis(f(x+), g(y-)))'''
    if m < 0:
        raise ValueError(f'margin must be nonnegative, got {m}')
    gap = T.sub(cosine_distance(f_pos, g_pos), cosine_distance(f_pos, g_neg))
    return T.mean(T.relu(T.add(gap, float(m))))


def contrastive_loss(f_net, g_net, batch, negatives, m):
    '''
    negatives: view-2 rows of the mismatched examples, aligned with the batch,
    or integer row indices into batch.y
    '''
    negatives = np.asarray(negatives)
    if np.issubdtype(negatives.dtype, np.integer):
        if negatives.shape != (batch.size,):
            raise ShapeError('contrastive_loss', [negatives.shape], f'need one negative per sample, got {negatives.shape}')
        negatives = batch.y[negatives]
    if negatives.shape != batch.y.shape:
        raise ShapeError('contrastive_loss', [batch.y.shape, negatives.shape])
    f_pos = encode_mean(f_net, Tensor(batch.x))
    g_pos = encode_mean(g_net, Tensor(batch.y))
    g_neg = encode_mean(g_net, Tensor(negatives))
    loss = contrastive_hinge(f_pos, g_pos, g_neg, m)
    return loss, ElboTerms(total=-loss.item())


def sample_negatives(n, rng):
    '''One uniform partner per sample in range(n), never the sample itself'''
    if n < 2:
        raise ValueError(f'Need at least two samples to draw negatives, got {n}')
    draws = rng.generator.integers(0, n - 1, size=n)
    return draws + (draws >= np.arange(n))


def compute_loss(bundle, batch, cfg, rng, negatives=None):
    kind = bundle.kind
    if kind == ObjectiveKind.VCCA:
        return vcca_loss(bundle, batch, cfg, rng)
    if kind == ObjectiveKind.VCCA_PRIVATE:
        return vcca_private_loss(bundle, batch, cfg, rng)
    if kind.is_bi:
        return bi_vcca_loss(bundle, batch, cfg, rng)
    if kind == ObjectiveKind.MVAE:
        return mvae_loss(bundle, batch, cfg, rng)
    if kind == ObjectiveKind.MVAE_VAR:
        return mvae_var_loss(bundle, batch, cfg, rng)
    if negatives is None:
        raise ValueError('contrastive loss needs negatives')
    return contrastive_loss(bundle.networks['enc_zx'], bundle.networks['enc_zy'], batch, negatives, cfg.margin)
