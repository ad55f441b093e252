import numpy as np
import pytest

from mvlatent import tensor as T
from mvlatent import utils
from mvlatent.datasets import TwoViewDataset
from mvlatent.distributions import ObservationModel
from mvlatent.networks import MlpSpec, Network
from mvlatent.objectives import ModelBundle, ModelConfig, build_bundle
from mvlatent.tensor import RngState, Tensor


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow training tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def reset_log_level(monkeypatch):
    # main() sets the verbosity once per process
    monkeypatch.setattr(utils, 'log_level', None)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def linear_network(weight, bias, head='gaussian_means'):
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    spec = MlpSpec(weight.shape[0], [], head, weight.shape[1] // (2 if head == 'gaussian_params' else 1))
    return Network(spec, [Tensor(weight, requires_grad=True)], [Tensor(np.asarray(bias, dtype=np.float64), requires_grad=True)])


def linear_gaussian_bundle(kind, W_x, W_y, enc, A_x=None, A_y=None, enc_hx=None, enc_hy=None):
    '''
    Bundle whose decoders are the linear maps of x = W_x z (+ A_x h_x) + e, y = W_y z (+ A_y h_y) + e
    with unit Gaussian noise; enc* are (weight, bias) pairs of linear gaussian_params encoders.
    '''
    W_x, W_y = np.atleast_2d(W_x), np.atleast_2d(W_y)
    d_x, d_z = W_x.shape
    d_y = W_y.shape[0]
    dec_x = W_x.T if A_x is None else np.vstack([W_x.T, np.atleast_2d(A_x).T])
    dec_y = W_y.T if A_y is None else np.vstack([W_y.T, np.atleast_2d(A_y).T])
    networks = {
        'enc_zx': linear_network(*enc, head='gaussian_params'),
        'dec_x': linear_network(dec_x, np.zeros(d_x)),
        'dec_y': linear_network(dec_y, np.zeros(d_y)),
    }
    d_hx = d_hy = 0
    if enc_hx is not None:
        networks['enc_hx'] = linear_network(*enc_hx, head='gaussian_params')
        d_hx = np.atleast_2d(A_x).shape[1]
    if enc_hy is not None:
        networks['enc_hy'] = linear_network(*enc_hy, head='gaussian_params')
        d_hy = np.atleast_2d(A_y).shape[1]
    obs = ObservationModel('gaussian_fixed', sigma=1.0)
    return ModelBundle(kind, networks, obs, obs, d_z, d_hx, d_hy)


def small_bundle(kind='vcca', d_x=6, d_y=5, seed=0, **overrides):
    values = {'objective_kind': kind, 'd_z': 2, 'd_hx': 2, 'd_hy': 3, 'hidden_widths': [7]}
    values.update(overrides)
    return build_bundle(ModelConfig(**values), d_x, d_y, RngState(seed))


def tiny_dataset(n_train=40, n_tune=12, n_test=12, d_x=6, d_y=5, classes=3, seed=0):
    '''Two noisy linear views of a class-dependent code'''
    rng = np.random.default_rng(seed)
    n = n_train + n_tune + n_test
    labels = np.arange(n) % classes
    centres = rng.normal(size=(classes, 2)) * 2.0
    code = centres[labels] + 0.3 * rng.normal(size=(n, 2))
    x = 1.0 / (1.0 + np.exp(-(code @ rng.normal(size=(2, d_x)) + 0.1 * rng.normal(size=(n, d_x)))))
    y = 1.0 / (1.0 + np.exp(-(code @ rng.normal(size=(2, d_y)) + 0.1 * rng.normal(size=(n, d_y)))))
    splits = {
        'train': np.arange(n_train),
        'tune': np.arange(n_train, n_train + n_tune),
        'test': np.arange(n_train + n_tune, n),
    }
    return TwoViewDataset(x, y, labels, splits)


@pytest.fixture
def dataset():
    return tiny_dataset()


@pytest.fixture
def run_dir(tmp_path):
    path = tmp_path / 'run'
    path.mkdir()
    return path


class ReluMargin:
    '''Smallest |input| relu has seen since the last reset()'''

    def __init__(self):
        self.value = np.inf

    def reset(self):
        self.value = np.inf


@pytest.fixture
def relu_margin(monkeypatch):
    margin = ReluMargin()
    original = T.relu

    def recording(t):
        t = T.as_tensor(t)
        margin.value = min(margin.value, float(np.min(np.abs(t.data))))
        return original(t)

    monkeypatch.setattr(T, 'relu', recording)
    return margin



def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def finite_difference_error(fn, arrays, step=1e-5):
    '''
    Largest relative error between tape gradients and central differences of a
    scalar-valued fn(*tensors)
    '''
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*leaves)
        grads = T.backward(tape, out)
    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = grads[leaves[k]].data if leaves[k] in grads else np.zeros(a.shape)
        numeric = np.zeros(a.shape)
        for idx in np.ndindex(a.shape):
            values = []
            for sign in (1.0, -1.0):
                moved = [b.copy() for b in arrays]
                moved[k][idx] += sign * step
                values.append(fn(*[Tensor(b) for b in moved]).item())
            numeric[idx] = (values[0] - values[1]) / (2.0 * step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def parameter_gradient_error(bundle, loss_fn, rng, entries=5, step=1e-5):
    '''Relative error of the tape gradient of loss_fn() on a few random entries of every parameter'''
    params = [t for _, t in bundle.parameters()]
    with T.Tape() as tape:
        loss, _ = loss_fn()
        grads = T.backward(tape, loss)
    analytic, numeric = [], []
    for p in params:
        grad = grads[p].data if p in grads else np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for j in rng.choice(flat.size, size=min(entries, flat.size), replace=False):
            original = flat[j]
            values = []
            for sign in (1.0, -1.0):
                flat[j] = original + sign * step
                values.append(loss_fn()[0].item())
            flat[j] = original
            analytic.append(grad.reshape(-1)[j])
            numeric.append((values[0] - values[1]) / (2.0 * step))
    return relative_error(analytic, numeric)
