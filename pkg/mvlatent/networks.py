'''
Multilayer perceptrons with relu hidden layers and the heads used by encoders and decoders.
'''

import math

from dataclasses import dataclass, field
from typing import List

import numpy as np

from mvlatent import tensor as T
from mvlatent.distributions import LOG_SIGMA_CLAMP, DiagonalGaussian, ObservationParams
from mvlatent.tensor import ShapeError, Tensor

HEADS = ('gaussian_params', 'bernoulli_means', 'gaussian_means', 'gaussian_means_log_sigma')


@dataclass
class MlpSpec:
    '''
    head: gaussian_params outputs (mu, log_sigma) of a posterior, the other heads
    parameterize an observation model
    output_dim: d_out (gaussian_params and gaussian_means_log_sigma emit 2 * d_out values)
    sigmoid_output: squash gaussian means into [0, 1]
    '''

    input_dim: int
    hidden_widths: List[int] = field(default_factory=lambda: [128, 128])
    head: str = 'gaussian_params'
    output_dim: int = 10
    sigmoid_output: bool = False

    def __post_init__(self):
        self.hidden_widths = list(self.hidden_widths)
        if self.head not in HEADS:
            raise ValueError(f'Unknown head {self.head!r}, expected one of {HEADS}')
        if self.input_dim <= 0 or self.output_dim <= 0 or any(w <= 0 for w in self.hidden_widths):
            raise ValueError(f'All widths must be positive: {self}')

    @property
    def head_width(self):
        if self.head in ('gaussian_params', 'gaussian_means_log_sigma'):
            return 2 * self.output_dim
        return self.output_dim

    @property
    def layer_widths(self):
        return [self.input_dim] + self.hidden_widths + [self.head_width]

    def to_dict(self):
        return {
            'input_dim': self.input_dim,
            'hidden_widths': list(self.hidden_widths),
            'head': self.head,
            'output_dim': self.output_dim,
            'sigmoid_output': self.sigmoid_output,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class Network:
    def __init__(self, spec, weights, biases, log_sigma_clamp=LOG_SIGMA_CLAMP):
        self.spec = spec
        self.weights = weights
        self.biases = biases
        self.log_sigma_clamp = log_sigma_clamp
        widths = spec.layer_widths
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ShapeError('network', [w.shape, b.shape], f'layer {i} does not match {spec}')

    @property
    def parameters(self):
        '''Ordered (name, tensor) pairs: W0, b0, W1, b1, ...'''
        params = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params.append((f'W{i}', w))
            params.append((f'b{i}', b))
        return params

    @property
    def parameter_count(self):
        return sum(t.size for _, t in self.parameters)

    def forward(self, inputs, dropout=None):
        '''
        Raw head output. Dropout, when given, is applied to the inputs and after
        every hidden relu.
        '''
        h = T.as_tensor(inputs)
        if h.shape[-1] != self.spec.input_dim:
            raise ShapeError('network', [h.shape], f'expected input width {self.spec.input_dim}, got {h.shape[-1]}')
        if dropout is not None:
            h = dropout(h)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.affine(h, w, b)
            if i < last:
                h = T.relu(h)
                if dropout is not None:
                    h = dropout(h)
        return h

    def __repr__(self):
        return f'Network({self.spec.layer_widths}, head={self.spec.head})'


def init_network(spec, rng, name=None):
    '''
    He initialisation N(0, 2/fan_in) for relu layers, N(0, 1/fan_in) for the head, zero biases
    '''
    widths = spec.layer_widths
    weights, biases = [], []
    last = len(widths) - 2
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        std = math.sqrt((1.0 if i == last else 2.0) / fan_in)
        draws = rng.substream('layer', i).generator.standard_normal((fan_in, fan_out))
        prefix = f'{name}.' if name else ''
        weights.append(Tensor(std * draws, requires_grad=True, name=f'{prefix}W{i}'))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f'{prefix}b{i}'))
    return Network(spec, weights, biases)


class Dropout:
    '''
    Inverted dropout whose k-th mask is drawn from rng.substream('dropout', k)
    '''

    def __init__(self, rate, rng=None, training=True):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f'Dropout rate must be in [0, 1), got {rate}')
        self.rate = rate
        self.rng = rng
        self.training = training
        self.count = 0

    @property
    def active(self):
        return self.training and self.rate > 0

    def __call__(self, t):
        if not self.active:
            return t
        stream = self.rng.substream('dropout', self.count)
        self.count += 1
        return apply_dropout(t, self.rate, stream, self.training)


def apply_dropout(t, rate, rng, training):
    '''Zero each entry with probability `rate`, scale survivors by 1/(1 - rate); identity at evaluation'''
    if not 0.0 <= rate < 1.0:
        raise ValueError(f'Dropout rate must be in [0, 1), got {rate}')
    t = T.as_tensor(t)
    if not training or rate == 0:
        return t
    keep = rng.generator.random(t.shape) >= rate
    return T.dropout_mask(t, keep / (1.0 - rate))


def encode(net, inputs, dropout=None):
    '''q(latent | inputs) as a DiagonalGaussian with clamped log sigma'''
    if net.spec.head != 'gaussian_params':
        raise ValueError(f'encode needs a gaussian_params head, got {net.spec.head}')
    out = net.forward(inputs, dropout)
    d = net.spec.output_dim
    return DiagonalGaussian(T.slice_last(out, 0, d), T.slice_last(out, d, 2 * d), clamp=net.log_sigma_clamp)


def encode_mean(net, inputs, dropout=None):
    '''Deterministic code: the posterior mean, or the full output of a mean head'''
    out = net.forward(inputs, dropout)
    if net.spec.head == 'gaussian_params':
        return T.slice_last(out, 0, net.spec.output_dim)
    return out


def decode(net, latent, dropout=None):
    '''Observation-model parameters for a latent (for private models latent = concat(z, h))'''
    head = net.spec.head
    if head == 'gaussian_params':
        raise ValueError('decode needs an observation head, got gaussian_params')
    out = net.forward(latent, dropout)
    if head == 'bernoulli_means':
        return ObservationParams(T.sigmoid(out))
    d = net.spec.output_dim
    if head == 'gaussian_means_log_sigma':
        mean = T.slice_last(out, 0, d)
        log_sigma = T.clip(T.slice_last(out, d, 2 * d), *net.log_sigma_clamp)
    else:
        mean, log_sigma = out, None
    if net.spec.sigmoid_output:
        mean = T.sigmoid(mean)
    return ObservationParams(mean, log_sigma)
