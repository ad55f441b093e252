'''
Diagonal Gaussian posteriors, observation likelihoods and the closed-form KL to N(0, I).

All densities reduce over the last axis: a (d,) input gives a scalar, an (N, d) batch
gives one value per row.
'''

import math

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from mvlatent import tensor as T
from mvlatent.tensor import ShapeError, Tensor

LOG_SIGMA_CLAMP = (-7.0, 7.0)
BERNOULLI_CLAMP = (1e-7, 1.0 - 1e-7)
LOG_2PI = math.log(2.0 * math.pi)

OBSERVATION_KINDS = ('bernoulli', 'gaussian_fixed', 'gaussian_learned')


class DiagonalGaussian:
    '''
    N(mu, diag(exp(log_sigma)^2)); log_sigma is clamped on construction
    '''

    def __init__(self, mu, log_sigma, clamp=LOG_SIGMA_CLAMP):
        mu, log_sigma = T.as_tensor(mu), T.as_tensor(log_sigma)
        if mu.shape != log_sigma.shape:
            raise ShapeError('gaussian', [mu.shape, log_sigma.shape])
        self.mu = mu
        self.log_sigma = T.clip(log_sigma, *clamp)
        self.clamp = clamp

    @property
    def dim(self):
        return self.mu.shape[-1]

    @property
    def sigma(self):
        return np.exp(self.log_sigma.data)

    def log_prob(self, z):
        return gaussian_log_lik(z, self.mu, log_sigma=self.log_sigma)

    def __repr__(self):
        return f'DiagonalGaussian(shape={self.mu.shape})'


def standard_normal(shape):
    return DiagonalGaussian(np.zeros(shape), np.zeros(shape))


def kl_to_standard_normal(q):
    '''KL(q || N(0, I)) = -1/2 sum_j (1 + log sigma_j^2 - sigma_j^2 - mu_j^2)'''
    two_log_sigma = T.scale(q.log_sigma, 2.0)
    inner = T.sub(T.sub(T.add(two_log_sigma, 1.0), T.exp(two_log_sigma)), T.square(q.mu))
    return T.scale(T.sum(inner, axis=-1), -0.5)


def reparameterize(q, eps):
    '''z = mu + sigma * eps; eps is treated as a constant'''
    eps = T.as_tensor(eps)
    if eps.shape != q.mu.shape:
        raise ShapeError('reparameterize', [q.mu.shape, eps.shape])
    return T.add(q.mu, T.mul(T.exp(q.log_sigma), Tensor(eps.data)))


def bernoulli_log_lik(x, mean, clamp=BERNOULLI_CLAMP):
    '''
    sum_j x_j log m_j + (1 - x_j) log(1 - m_j)

    Targets may be real valued in [0, 1] (cross-entropy form).
    '''
    x, mean = T.as_tensor(x), T.as_tensor(mean)
    if x.shape != mean.shape:
        raise ShapeError('bernoulli_log_lik', [x.shape, mean.shape])
    m = T.clip(mean, *clamp)
    target = Tensor(x.data)
    on = T.mul(target, T.log(m))
    off = T.mul(T.sub(1.0, target), T.log(T.sub(1.0, m)))
    return T.sum(T.add(on, off), axis=-1)


def gaussian_log_lik(x, mean, sigma=None, log_sigma=None):
    '''
    sum_j -1/2 log(2 pi sigma_j^2) - (x_j - mean_j)^2 / (2 sigma_j^2)

    Pass either a fixed `sigma` (scalar or one value per dimension) or a
    `log_sigma` tensor of the same shape as `mean`.
    '''
    x, mean = T.as_tensor(x), T.as_tensor(mean)
    if x.shape != mean.shape:
        raise ShapeError('gaussian_log_lik', [x.shape, mean.shape])
    if (sigma is None) == (log_sigma is None):
        raise ValueError('gaussian_log_lik needs exactly one of sigma and log_sigma')
    diff = T.sub(Tensor(x.data), mean)
    d = x.shape[-1]

    if log_sigma is not None:
        log_sigma = T.as_tensor(log_sigma)
        if log_sigma.shape != mean.shape:
            raise ShapeError('gaussian_log_lik', [mean.shape, log_sigma.shape])
        quad = T.div(T.square(diff), T.exp(T.scale(log_sigma, 2.0)))
        inner = T.add(T.scale(quad, 0.5), log_sigma)
        return T.sub(-0.5 * d * LOG_2PI, T.sum(inner, axis=-1))

    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise ValueError(f'sigma must be positive, got {sigma}')
    if sigma.ndim == 0:
        s2 = float(sigma) ** 2
        const = -0.5 * d * math.log(2.0 * math.pi * s2)
        return T.add(T.scale(T.sum(T.square(diff), axis=-1), -0.5 / s2), const)
    if sigma.shape != (d,):
        raise ShapeError('gaussian_log_lik', [x.shape, sigma.shape], f'sigma needs {d} entries, got {sigma.shape}')
    const = float(-0.5 * np.sum(np.log(2.0 * np.pi * sigma**2)))
    weights = Tensor(np.broadcast_to(1.0 / sigma**2, diff.shape))
    return T.add(T.scale(T.sum(T.mul(T.square(diff), weights), axis=-1), -0.5), const)


class ObservationParams(NamedTuple):
    mean: Tensor
    log_sigma: Optional[Tensor] = None


@dataclass
class ObservationModel:
    '''
    Likelihood family of one view.

    kind: 'bernoulli' (sigmoid means), 'gaussian_fixed' (isotropic or per-dim sigma)
    or 'gaussian_learned' (decoder also outputs log sigma)
    sigmoid_mean: squash Gaussian means into [0, 1] for image data
    '''

    kind: str = 'bernoulli'
    sigma: Optional[float] = None
    sigmoid_mean: bool = False

    def __post_init__(self):
        if self.kind not in OBSERVATION_KINDS:
            raise ValueError(f'Unknown observation model {self.kind!r}, expected one of {OBSERVATION_KINDS}')
        if self.kind == 'gaussian_fixed':
            if self.sigma is None:
                self.sigma = 1.0
            if np.any(np.asarray(self.sigma) <= 0):
                raise ValueError(f'Fixed sigma must be positive, got {self.sigma}')

    @property
    def head(self):
        return {
            'bernoulli': 'bernoulli_means',
            'gaussian_fixed': 'gaussian_means',
            'gaussian_learned': 'gaussian_means_log_sigma',
        }[self.kind]

    def log_lik(self, x, params):
        if self.kind == 'bernoulli':
            return bernoulli_log_lik(x, params.mean)
        if self.kind == 'gaussian_fixed':
            return gaussian_log_lik(x, params.mean, sigma=self.sigma)
        return gaussian_log_lik(x, params.mean, log_sigma=params.log_sigma)

    def stddev(self, params):
        '''Per-pixel standard deviation of the observation distribution'''
        mean = params.mean.data
        if self.kind == 'bernoulli':
            m = np.clip(mean, *BERNOULLI_CLAMP)
            return np.sqrt(m * (1.0 - m))
        if self.kind == 'gaussian_fixed':
            return np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), mean.shape).copy()
        return np.exp(params.log_sigma.data)

    def to_dict(self):
        sigma = self.sigma
        if sigma is not None and np.ndim(sigma) > 0:
            sigma = [float(s) for s in np.asarray(sigma)]
        return {'kind': self.kind, 'sigma': sigma, 'sigmoid_mean': self.sigmoid_mean}

    @classmethod
    def from_dict(cls, data):
        return cls(kind=data['kind'], sigma=data.get('sigma'), sigmoid_mean=data.get('sigmoid_mean', False))
