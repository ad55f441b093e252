'''
Image grids of reconstructions and private-variable traversals, written as binary PGM.
'''

import math

from pathlib import Path

import numpy as np

from mvlatent import tensor as T
from mvlatent.distributions import ObservationModel, reparameterize
from mvlatent.networks import decode, encode, encode_mean
from mvlatent.objectives import ObjectiveKind
from mvlatent.tensor import RngState, Tensor
from mvlatent.utils import get_logger

log = get_logger(__name__)

SEPARATOR = 1.0


def write_pgm(path, image):
    '''8-bit binary PGM (P5) with values round(255 * clamp(v, 0, 1))'''
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f'PGM images are 2-D, got shape {image.shape}')
    pixels = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    height, width = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(f'P5\n{width} {height}\n255\n'.encode('ascii'))
        f.write(pixels.tobytes())
    log.info(f'Wrote {width}x{height} grid to {path}')


def read_pgm(path):
    with open(path, 'rb') as f:
        raw = f.read()
    parts = raw.split(b'\n', 3)
    if len(parts) != 4 or parts[0] != b'P5':
        raise ValueError(f'{path} is not a binary PGM file written by write_pgm')
    width, height = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    pixels = np.frombuffer(parts[3][: width * height], dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def image_side(width):
    side = int(round(math.sqrt(width)))
    if side * side != width:
        raise ValueError(f'{width} pixels do not form a square image')
    return side


def compose_grid(cells, side):
    '''rows of s x s cells on a canvas with 1-pixel separators'''
    rows = len(cells)
    cols = max(len(r) for r in cells)
    canvas = np.full((rows * side + rows - 1, cols * side + cols - 1), SEPARATOR)
    for r, row in enumerate(cells):
        for c, cell in enumerate(row):
            top, left = r * (side + 1), c * (side + 1)
            canvas[top : top + side, left : left + side] = np.asarray(cell).reshape(side, side)
    return canvas


def _observation_y(bundle):
    if bundle.kind in (ObjectiveKind.MVAE, ObjectiveKind.MVAE_VAR):
        if bundle.networks['dec_y'].spec.head == 'bernoulli_means':
            return ObservationModel('bernoulli')
        return ObservationModel('gaussian_fixed', sigma=1.0)
    return bundle.obs_y


def reconstruct_grid(bundle, x, y, path=None, rng=None):
    '''
    One row per sample: view-2 input, reconstruction mean, reconstruction stddev.
    z is the mean of q(z|x); private models add a draw of h_y from q(h_y|y).
    '''
    if 'dec_y' not in bundle.networks:
        raise ValueError(f'{bundle.kind.value} models have no view-2 decoder')
    x, y = np.atleast_2d(np.asarray(x, dtype=np.float64)), np.atleast_2d(np.asarray(y, dtype=np.float64))
    side = image_side(y.shape[1])
    latent = encode_mean(bundle.networks['enc_zx'], Tensor(x))
    if bundle.kind.is_private and bundle.d_hy > 0:
        rng = rng or RngState(0)
        q_hy = encode(bundle.networks['enc_hy'], Tensor(y))
        eps = rng.substream('hy').generator.standard_normal(q_hy.mu.shape)
        latent = T.concat([latent, reparameterize(q_hy, eps)])
    params = decode(bundle.networks['dec_y'], latent)
    stddev = _observation_y(bundle).stddev(params)
    mean = params.mean.data
    cells = [[y[i], mean[i], stddev[i]] for i in range(y.shape[0])]
    canvas = compose_grid(cells, side)
    if path is not None:
        write_pgm(path, canvas)
    return canvas


def private_traversal_grid(bundle, x_inputs, n, path=None, rng=None, with_inputs=False):
    '''
    n x n decoder means: row r shares z (mean of q(z|x_r)), column c shares h_x,
    with h_x = 0 in column 0 and draws from N(0, I) elsewhere
    '''
    if not bundle.kind.is_private or 'enc_hx' not in bundle.networks:
        raise ValueError(f'Traversal needs a private model with view-1 private variables, got {bundle.kind.value}')
    x_inputs = np.atleast_2d(np.asarray(x_inputs, dtype=np.float64))
    if x_inputs.shape[0] < n:
        raise ValueError(f'Need {n} inputs for an {n}x{n} traversal, got {x_inputs.shape[0]}')
    side = image_side(x_inputs.shape[1])
    rng = rng or RngState(0)

    z = encode_mean(bundle.networks['enc_zx'], Tensor(x_inputs[:n])).data
    h = np.zeros((n, bundle.d_hx))
    for c in range(1, n):
        h[c] = rng.substream('hx', c).generator.standard_normal(bundle.d_hx)
    latents = np.concatenate([np.repeat(z, n, axis=0), np.tile(h, (n, 1))], axis=1)
    means = decode(bundle.networks['dec_x'], Tensor(latents)).mean.data.reshape(n, n, -1)

    cells = []
    for r in range(n):
        row = [x_inputs[r]] if with_inputs else []
        cells.append(row + [means[r, c] for c in range(n)])
    canvas = compose_grid(cells, side)
    if path is not None:
        write_pgm(path, canvas)
    return canvas
