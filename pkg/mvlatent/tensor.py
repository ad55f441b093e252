'''
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current thread
(see `Tape`) whenever one of their inputs participates in it. Leaves that
require gradients join the tape the first time an operation uses them.
'''

import hashlib
import threading

import numpy as np
from scipy.special import expit

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

_local = threading.local()


class ShapeError(ValueError):
    def __init__(self, op, shapes, message=None):
        self.op = op
        self.shapes = shapes
        super().__init__(message or f'{op}: incompatible shapes {shapes}')


class NumericalError(ArithmeticError):
    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f'{op}: non-finite result')


class Tensor:
    '''
    Row-major float64 array that may take part in a gradient tape.

    Scalars have shape (). Every other dimension must be positive.
    '''

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in self.data.shape):
            raise ShapeError('tensor', [self.data.shape], f'dimension sizes must be positive, got {self.data.shape}')
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        label = f' name={self.name!r}' if self.name else ''
        return f'Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ('tensor', 'parents', 'vjp', 'grad')

    def __init__(self, tensor, parents, vjp):
        self.tensor = tensor
        self.parents = parents
        self.vjp = vjp
        self.grad = None


class Tape:
    '''
    Ordered record of primitive operations.

    Use as a context manager; the tape is active for the current thread only.
    Nodes are appended as operations run, so their order is topological.
    '''

    def __init__(self):
        self.nodes = []
        self._index = {}

    def __enter__(self):
        stack = getattr(_local, 'stack', None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, tensor):
        return id(tensor) in self._index

    def tracks(self, tensor):
        return id(tensor) in self._index or tensor.requires_grad

    def _node_for(self, tensor):
        node = self._index.get(id(tensor))
        if node is None:
            # leaf joining the tape
            node = _Node(tensor, (), None)
            self.nodes.append(node)
            self._index[id(tensor)] = node
        return node

    def record(self, out, inputs, vjp):
        parents = tuple(self._node_for(t) if self.tracks(t) else None for t in inputs)
        node = _Node(out, parents, vjp)
        self.nodes.append(node)
        self._index[id(out)] = node
        return node


def active_tape():
    stack = getattr(_local, 'stack', None)
    return stack[-1] if stack else None


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_finite(op, value):
    if not np.all(np.isfinite(value)):
        raise NumericalError(op)


def _result(op, inputs, value, vjp):
    _check_finite(op, value)
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _elementwise_shapes(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, [a.shape, b.shape])


def _reduce_to(grad, shape):
    # scalar operands receive the summed gradient
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum())
    return grad


def affine(x, weight, bias):
    '''x @ weight + bias, with bias added to every row'''
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[0] or bias.shape != weight.shape[1:]:
        raise ShapeError('affine', [x.shape, weight.shape, bias.shape])
    xd, wd = x.data, weight.data

    def vjp(g):
        gx = g @ wd.T
        gw = np.outer(xd, g) if xd.ndim == 1 else xd.T @ g
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return _result('affine', (x, weight, bias), xd @ wd + bias.data, vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('matmul', [a.shape, b.shape])
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _result('matmul', (a, b), ad @ bd, vjp)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes('add', a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result('add', (a, b), a.data + b.data, vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes('sub', a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result('sub', (a, b), a.data - b.data, vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes('mul', a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _result('mul', (a, b), ad * bd, vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _elementwise_shapes('div', a, b)
    ad, bd = a.data, b.data
    with np.errstate(all='ignore'):
        value = ad / bd

    def vjp(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return _result('div', (a, b), value, vjp)


def scale(t, factor):
    t = as_tensor(t)
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _result('scale', (t,), t.data * factor, vjp)


def relu(t):
    t = as_tensor(t)
    # subgradient at exactly 0 is 0
    mask = t.data > 0

    def vjp(g):
        return (g * mask,)

    return _result('relu', (t,), np.where(mask, t.data, 0.0), vjp)


def sigmoid(t):
    t = as_tensor(t)
    s = expit(t.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _result('sigmoid', (t,), s, vjp)


def exp(t):
    t = as_tensor(t)
    with np.errstate(over='ignore'):
        e = np.exp(t.data)

    def vjp(g):
        return (g * e,)

    return _result('exp', (t,), e, vjp)


def log(t):
    t = as_tensor(t)
    td = t.data
    with np.errstate(divide='ignore', invalid='ignore'):
        value = np.log(td)

    def vjp(g):
        return (g / td,)

    return _result('log', (t,), value, vjp)


def square(t):
    t = as_tensor(t)
    td = t.data

    def vjp(g):
        return (2.0 * g * td,)

    return _result('square', (t,), td * td, vjp)


def sqrt(t):
    t = as_tensor(t)
    with np.errstate(invalid='ignore'):
        r = np.sqrt(t.data)

    def vjp(g):
        with np.errstate(divide='ignore'):
            return (g / (2.0 * r),)

    return _result('sqrt', (t,), r, vjp)


def clip(t, lo, hi):
    '''Clamp to [lo, hi]; the gradient is passed through inside the range and zero outside it'''
    t = as_tensor(t)
    inside = (t.data >= lo) & (t.data <= hi)

    def vjp(g):
        return (g * inside,)

    return _result('clip', (t,), np.clip(t.data, lo, hi), vjp)


def sum(t, axis=None):
    '''Sum of all entries (axis=None) or along the last axis (axis=-1)'''
    t = as_tensor(t)
    if axis not in (None, -1):
        raise ValueError(f'sum supports axis=None or axis=-1, got {axis}')
    shape = t.shape
    if axis is None:
        value = np.asarray(t.data.sum())

        def vjp(g):
            return (np.broadcast_to(g, shape).copy(),)

    else:
        value = t.data.sum(axis=-1)

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, -1), shape).copy(),)

    return _result('sum', (t,), value, vjp)


def mean(t, axis=None):
    t = as_tensor(t)
    count = t.size if axis is None else t.shape[-1]
    return scale(sum(t, axis=axis), 1.0 / count)


def concat(tensors):
    '''Concatenate along the last axis'''
    tensors = [as_tensor(t) for t in tensors]
    leading = {t.shape[:-1] for t in tensors}
    if len(leading) != 1 or any(t.ndim == 0 for t in tensors):
        raise ShapeError('concat', [t.shape for t in tensors])
    widths = [t.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return _result('concat', tuple(tensors), np.concatenate([t.data for t in tensors], axis=-1), vjp)


def slice_last(t, start, stop):
    '''Columns [start, stop) of the last axis'''
    t = as_tensor(t)
    if t.ndim == 0 or not 0 <= start < stop <= t.shape[-1]:
        raise ShapeError('slice', [t.shape], f'slice: cannot take [{start}, {stop}) of shape {t.shape}')
    shape = t.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _result('slice', (t,), t.data[..., start:stop].copy(), vjp)


def tile_rows(t, reps):
    '''Stack `reps` copies of a matrix on top of each other'''
    t = as_tensor(t)
    if t.ndim != 2 or reps < 1:
        raise ShapeError('tile_rows', [t.shape], f'tile_rows: need a matrix and reps >= 1, got {t.shape}, {reps}')
    rows = t.shape[0]

    def vjp(g):
        return (g.reshape(reps, rows, -1).sum(axis=0),)

    return _result('tile_rows', (t,), np.tile(t.data, (reps, 1)), vjp)


def dropout_mask(t, mask):
    '''Multiply by a constant (already rescaled) dropout mask'''
    t = as_tensor(t)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != t.shape:
        raise ShapeError('dropout_mask', [t.shape, mask.shape])

    def vjp(g):
        return (g * mask,)

    return _result('dropout_mask', (t,), t.data * mask, vjp)


OPS = {
    'affine': affine,
    'matmul': matmul,
    'add': add,
    'sub': sub,
    'mul': mul,
    'div': div,
    'scale': scale,
    'relu': relu,
    'sigmoid': sigmoid,
    'exp': exp,
    'log': log,
    'square': square,
    'sqrt': sqrt,
    'clip': clip,
    'sum': sum,
    'mean': mean,
    'concat': concat,
    'slice': slice_last,
    'tile_rows': tile_rows,
    'dropout_mask': dropout_mask,
}


def forward(op_kind, *inputs, **kwargs):
    try:
        op = OPS[op_kind]
    except KeyError:
        raise ValueError(f'Unknown op {op_kind!r}')
    if op_kind == 'concat':
        return op(inputs, **kwargs)
    return op(*inputs, **kwargs)


def backward(tape, loss):
    '''
    Reverse pass from a scalar loss.

    Returns a dict mapping every leaf tensor with requires_grad that took part
    in computing the loss to its gradient Tensor.
    '''
    if loss.shape != ():
        raise ShapeError('backward', [loss.shape], f'loss must be a scalar, got shape {loss.shape}')
    if loss not in tape:
        raise ValueError('loss is not recorded on this tape')

    for node in tape.nodes:
        node.grad = None
    end = tape.nodes.index(tape._index[id(loss)])
    tape.nodes[end].grad = np.ones(())

    for node in reversed(tape.nodes[: end + 1]):
        if node.grad is None or node.vjp is None:
            continue
        for parent, grad in zip(node.parents, node.vjp(node.grad)):
            if parent is None:
                continue
            grad = np.asarray(grad, dtype=np.float64)
            _check_finite('backward', grad)
            parent.grad = grad.copy() if parent.grad is None else parent.grad + grad

    grads = {}
    for node in tape.nodes[: end + 1]:
        if not node.parents and node.tensor.requires_grad:
            value = node.grad if node.grad is not None else np.zeros(node.tensor.shape)
            grads[node.tensor] = Tensor(value)
    return grads


def splitmix64(value):
    '''64-bit avalanche finaliser of the SplitMix64 generator'''
    z = (value + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_int(key):
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode('utf-8'), digest_size=8).digest(), 'little')
    if isinstance(key, (int, np.integer)):
        return int(key) & MASK64
    raise TypeError(f'substream keys must be int or str, got {type(key).__name__}')


def mix(state, key):
    return splitmix64(state ^ splitmix64(_key_int(key)))


class RngState:
    '''
    Deterministic random source backed by the Philox counter-based generator.

    The Philox key is splitmix64(seed) for the root stream; substream(k1, k2, ...)
    folds each key in with mix(state, k) = splitmix64(state ^ splitmix64(k)).
    Substreams depend only on (seed, keys), never on draws already made.
    '''

    def __init__(self, seed, path=()):
        self.seed = int(seed) & MASK64
        self.path = tuple(path)
        key = splitmix64(self.seed)
        for k in self.path:
            key = mix(key, k)
        self.key = key
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, *keys):
        return RngState(self.seed, self.path + keys)

    def to_dict(self):
        return {'seed': self.seed, 'path': list(self.path)}

    @classmethod
    def from_dict(cls, data):
        return cls(data['seed'], tuple(data.get('path', ())))

    def __repr__(self):
        return f'RngState(seed={self.seed}, path={self.path})'


def sample_standard_normal(rng, shape):
    return Tensor(rng.generator.standard_normal(shape))


def sample_uniform(rng, shape, lo, hi):
    if not lo < hi:
        raise ValueError(f'sample_uniform needs lo < hi, got [{lo}, {hi})')
    values = rng.generator.uniform(lo, hi, shape)
    # uniform() can round up to hi for some (lo, hi)
    return Tensor(np.where(values >= hi, np.nextafter(hi, lo), values))
