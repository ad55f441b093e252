'''
Two-view datasets: a deterministic synthetic glyph generator, IDX ingestion and
noisy-pair construction from labelled images.
'''

import gzip
import itertools
import json
import math
import struct

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from mvlatent.tensor import RngState, Tensor, sample_uniform
from mvlatent.utils import chunk_ranges, get_logger, worker_count, write_json

log = get_logger(__name__)

SPLITS = ('train', 'tune', 'test')
STROKE_WIDTH = 0.06
SNAP_TOL = 1e-9

# endpoints in unit square coordinates (col, row)
PRIMITIVES = {
    'top': ((0.2, 0.25), (0.8, 0.25)),
    'bottom': ((0.2, 0.75), (0.8, 0.75)),
    'left': ((0.25, 0.2), (0.25, 0.8)),
    'right': ((0.75, 0.2), (0.75, 0.8)),
    'hmid': ((0.2, 0.5), (0.8, 0.5)),
    'vmid': ((0.5, 0.2), (0.5, 0.8)),
    'diag': ((0.2, 0.2), (0.8, 0.8)),
    'anti': ((0.8, 0.2), (0.2, 0.8)),
    'ring': ((0.5, 0.5), 0.27),
}

BASE_GLYPHS = [
    ('ring',),
    ('vmid',),
    ('top', 'anti', 'bottom'),
    ('top', 'hmid', 'bottom', 'right'),
    ('hmid', 'vmid'),
    ('diag', 'anti'),
    ('left', 'hmid', 'bottom'),
    ('top', 'anti'),
    ('ring', 'hmid'),
    ('left', 'right', 'top', 'bottom'),
]


class IdxFormatError(ValueError):
    def __init__(self, path, message, expected=None, actual=None):
        self.path = path
        self.expected = expected
        self.actual = actual
        super().__init__(f'{path}: {message}')


@dataclass
class SynthConfig:
    class_count: int = 10
    side: int = 16
    n_train: int = 5000
    n_tune: int = 1000
    n_test: int = 1000
    rotation: Tuple[float, float] = (-math.pi / 4, math.pi / 4)
    noise: Tuple[float, float] = (0.0, 1.0)
    jitter: float = 0.1
    max_shift: int = 1
    seed: int = 0

    def __post_init__(self):
        self.rotation = tuple(self.rotation)
        self.noise = tuple(self.noise)
        if self.class_count < 2:
            raise ValueError(f'class_count must be >= 2, got {self.class_count}')
        if self.side < 4:
            raise ValueError(f'side must be >= 4, got {self.side}')
        if self.class_count > len(glyph_catalog()):
            raise ValueError(f'At most {len(glyph_catalog())} glyph classes are available, got {self.class_count}')
        if min(self.n_train, self.n_tune, self.n_test) < 1:
            raise ValueError('Every split needs at least one sample')
        if not self.rotation[0] <= self.rotation[1] or not self.noise[0] < self.noise[1]:
            raise ValueError(f'Invalid ranges rotation={self.rotation} noise={self.noise}')
        if self.jitter < 0 or self.max_shift < 0:
            raise ValueError('jitter and max_shift must be nonnegative')

    @property
    def sizes(self):
        return {'train': self.n_train, 'tune': self.n_tune, 'test': self.n_test}


@dataclass
class DataConfig(SynthConfig):
    '''
    Where the data of a run comes from: a saved dataset directory (`path`), a
    pair of IDX files, or the synthetic generator configured by the inherited fields
    '''

    path: Optional[str] = None
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    limit: Optional[int] = None

    def synth_config(self):
        return SynthConfig(**{k: v for k, v in asdict(self).items() if k in SynthConfig.__dataclass_fields__})


class TwoViewDataset:
    def __init__(self, x, y, labels=None, splits=None, image_shape=None, factors=None, meta=None):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f'Views need equal row counts, got {self.x.shape} and {self.y.shape}')
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        if self.labels is not None and self.labels.shape != (len(self),):
            raise ValueError(f'Expected {len(self)} labels, got {self.labels.shape}')
        if splits is None:
            splits = {'train': np.arange(len(self))}
        self.splits = {name: np.asarray(idx, dtype=np.int64) for name, idx in splits.items()}
        self._check_splits()
        self.image_shape = tuple(image_shape) if image_shape is not None else None
        self.factors = {name: np.asarray(v, dtype=np.float64) for name, v in (factors or {}).items()}
        self.meta = dict(meta or {})

    def _check_splits(self):
        seen = np.zeros(len(self), dtype=bool)
        for name, idx in self.splits.items():
            if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
                raise ValueError(f'Split {name} has indices outside [0, {len(self)})')
            if np.any(seen[idx]) or len(np.unique(idx)) != len(idx):
                raise ValueError(f'Split {name} overlaps another split')
            seen[idx] = True

    def __len__(self):
        return self.x.shape[0]

    @property
    def d_x(self):
        return self.x.shape[1]

    @property
    def d_y(self):
        return self.y.shape[1]

    def split_indices(self, name):
        try:
            return self.splits[name]
        except KeyError:
            raise ValueError(f'Dataset has no {name!r} split, only {sorted(self.splits)}')

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.x.astype('<f8').tofile(path / 'x.bin')
        self.y.astype('<f8').tofile(path / 'y.bin')
        if self.labels is not None:
            self.labels.astype('<i8').tofile(path / 'labels.bin')
        for name, values in self.factors.items():
            values.astype('<f8').tofile(path / f'factor_{name}.bin')
        meta = dict(self.meta)
        meta.update(
            {
                'x_shape': list(self.x.shape),
                'y_shape': list(self.y.shape),
                'has_labels': self.labels is not None,
                'image_shape': list(self.image_shape) if self.image_shape else None,
                'factors': sorted(self.factors),
                'splits': {name: [int(i) for i in idx] for name, idx in self.splits.items()},
            }
        )
        write_json(path / 'meta.json', meta)
        log.info(f'Saved {len(self)} samples to {path}')

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path / 'meta.json', encoding='utf-8') as f:
            meta = json.load(f)

        def read(name, dtype, shape):
            values = np.fromfile(path / name, dtype=dtype)
            if values.size != int(np.prod(shape)):
                raise ValueError(f'{path / name}: expected {int(np.prod(shape))} values, found {values.size}')
            return values.reshape(shape)

        n = meta['x_shape'][0]
        x = read('x.bin', '<f8', meta['x_shape'])
        y = read('y.bin', '<f8', meta['y_shape'])
        labels = read('labels.bin', '<i8', (n,)) if meta.get('has_labels') else None
        factors = {name: read(f'factor_{name}.bin', '<f8', (n,)) for name in meta.get('factors', [])}
        extra = {k: v for k, v in meta.items() if k not in ('x_shape', 'y_shape', 'has_labels', 'image_shape', 'factors', 'splits')}
        return cls(x, y, labels, meta['splits'], meta.get('image_shape'), factors, extra)


def glyph_catalog():
    '''Stroke sets of all available classes: the curated glyphs, then unused primitive pairs'''
    catalog = list(BASE_GLYPHS)
    used = set(frozenset(g) for g in catalog)
    for pair in itertools.combinations(PRIMITIVES, 2):
        if frozenset(pair) not in used:
            catalog.append(pair)
            used.add(frozenset(pair))
    return catalog


def _segment_distance(px, py, p0, p1):
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render_glyph(strokes, side):
    '''Noise-free s x s prototype with values in [0, 1]'''
    coords = (np.arange(side) + 0.5) / side
    px, py = np.meshgrid(coords, coords)
    img = np.zeros((side, side))
    for name in strokes:
        shape = PRIMITIVES[name]
        if name == 'ring':
            (cx, cy), radius = shape
            dist = np.abs(np.hypot(px - cx, py - cy) - radius)
        else:
            dist = _segment_distance(px, py, *shape)
        img = np.maximum(img, np.exp(-0.5 * (dist / STROKE_WIDTH) ** 2))
    return img


def glyph_instance(prototype, rng, jitter=0.1, max_shift=1):
    '''Prototype shifted by up to max_shift pixels per axis plus clamped Gaussian pixel jitter'''
    shift = rng.substream('shift').generator.integers(-max_shift, max_shift + 1, size=2)
    img = ndimage.shift(prototype, shift, order=0, mode='constant', cval=0.0)
    img = img + jitter * rng.substream('jitter').generator.standard_normal(prototype.shape)
    return np.clip(img, 0.0, 1.0)


def rotate_image(img, angle):
    '''
    Counterclockwise rotation about the image centre with bilinear interpolation;
    source pixels outside the image read as 0.
    '''
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f'rotate_image needs a 2-D image, got shape {img.shape}')
    if not math.isfinite(angle):
        raise ValueError(f'angle must be finite, got {angle}')
    rows, cols = img.shape
    cr, cc = (rows - 1) / 2.0, (cols - 1) / 2.0
    out_r, out_c = np.meshgrid(np.arange(rows, dtype=np.float64) - cr, np.arange(cols, dtype=np.float64) - cc, indexing='ij')
    cos, sin = math.cos(angle), math.sin(angle)
    src_c = cc + out_c * cos - out_r * sin
    src_r = cr + out_c * sin + out_r * cos
    coords = np.stack([src_r, src_c])
    snapped = np.round(coords)
    coords = np.where(np.abs(coords - snapped) < SNAP_TOL, snapped, coords)
    out = ndimage.map_coordinates(img, coords, order=1, mode='constant', cval=0.0)
    return np.clip(out, 0.0, 1.0)


def _draw_angle(rng, rotation):
    lo, hi = rotation
    if lo == hi:
        return float(lo)
    return float(sample_uniform(rng, (), lo, hi).data)


def _parallel_rows(n, fn):
    '''Call fn(start, stop) on index chunks in a thread pool; results are concatenated in index order'''
    ranges = chunk_ranges(n, worker_count() * 4)
    results = {}
    with ThreadPoolExecutor(max_workers=worker_count(len(ranges))) as executor:
        futures = {executor.submit(fn, a, b): a for a, b in ranges}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return [results[a] for a, _ in ranges]


def _split_layout(sizes):
    splits, start = {}, 0
    for name in SPLITS:
        splits[name] = np.arange(start, start + sizes[name])
        start += sizes[name]
    return splits, start


def generate_two_view(cfg):
    '''
    Synthetic two-view glyph data. Sample i has class i mod K; view 1 is a rotated
    instance of the class glyph, view 2 an independent instance plus uniform noise,
    truncated to [0, 1]. The class is the only factor the views share.
    '''
    catalog = glyph_catalog()
    prototypes = [render_glyph(catalog[k], cfg.side) for k in range(cfg.class_count)]
    splits, n = _split_layout(cfg.sizes)
    root = RngState(cfg.seed)
    pixels = cfg.side * cfg.side

    def make(start, stop):
        x = np.empty((stop - start, pixels))
        y = np.empty((stop - start, pixels))
        angles = np.empty(stop - start)
        for row, i in enumerate(range(start, stop)):
            rng = root.substream('sample', i)
            label = i % cfg.class_count
            angle = _draw_angle(rng.substream('angle'), cfg.rotation)
            view1 = glyph_instance(prototypes[label], rng.substream('view1'), cfg.jitter, cfg.max_shift)
            x[row] = rotate_image(view1, angle).ravel()
            view2 = glyph_instance(prototypes[label], rng.substream('view2'), cfg.jitter, cfg.max_shift)
            noise = sample_uniform(rng.substream('noise'), view2.shape, *cfg.noise).data
            y[row] = np.clip(view2 + noise, 0.0, 1.0).ravel()
            angles[row] = angle
        return x, y, angles

    log.info(f'Generating {n} synthetic samples ({cfg.class_count} classes, {cfg.side}x{cfg.side})')
    parts = _parallel_rows(n, make)
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    angles = np.concatenate([p[2] for p in parts])
    labels = np.arange(n) % cfg.class_count
    meta = {'generator': 'glyphs', 'config': asdict(cfg), 'seed': cfg.seed}
    return TwoViewDataset(x, y, labels, splits, (cfg.side, cfg.side), {'angle': angles}, meta)


IDX_TYPES = {
    0x08: np.dtype('>u1'),
    0x09: np.dtype('>i1'),
    0x0B: np.dtype('>i2'),
    0x0C: np.dtype('>i4'),
    0x0D: np.dtype('>f4'),
    0x0E: np.dtype('>f8'),
}


def _read_bytes(path):
    path = Path(path)
    with open(path, 'rb') as f:
        head = f.read(2)
    opener = gzip.open if head == b'\x1f\x8b' else open
    with opener(path, 'rb') as f:
        return f.read()


def read_idx(path):
    '''Raw array of an IDX file (plain or gzip-compressed), in its stored element type'''
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(path, f'header needs 4 bytes, found {len(raw)}', 4, len(raw))
    zero, type_code, ndim = struct.unpack('>HBB', raw[:4])
    if zero != 0:
        raise IdxFormatError(path, f'bad magic 0x{raw[:4].hex()}')
    if type_code not in IDX_TYPES:
        raise IdxFormatError(path, f'unsupported element type 0x{type_code:02x}')
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(path, f'truncated header: expected {header} bytes, found {len(raw)}', header, len(raw))
    dims = struct.unpack(f'>{ndim}I', raw[4:header])
    dtype = IDX_TYPES[type_code]
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        kind = 'truncated payload' if len(raw) < expected else 'trailing bytes'
        raise IdxFormatError(path, f'{kind}: expected {expected} bytes, found {len(raw)}', expected, len(raw))
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def load_idx(path):
    '''IDX data as a float Tensor; unsigned-byte payloads are rescaled to [0, 1]'''
    data = read_idx(path)
    values = data.astype(np.float64)
    if data.dtype == np.dtype('>u1'):
        values = values / 255.0
    log.info(f'Loaded {path} with shape {list(values.shape)}')
    return Tensor(values)


def load_idx_labels(path):
    data = read_idx(path)
    if data.ndim != 1:
        raise IdxFormatError(path, f'label files are 1-D, found {data.ndim} dimensions')
    return data.astype(np.int64)


def default_splits(n):
    '''50K/10K/10K for full MNIST, otherwise the same 5:1:1 proportions'''
    if n >= 70000:
        return (50000, 10000, 10000)
    n_tune = n // 7
    return (n - 2 * n_tune, n_tune, n_tune)


def choose_partner(index, candidates, rng):
    '''Uniform same-class partner other than `index`; falls back to itself when it is alone'''
    others = candidates[candidates != index]
    if others.size == 0:
        log.warning(f'Sample {index} has no other instance of its class, pairing it with itself')
        return int(index)
    return int(others[rng.generator.integers(0, others.size)])


def make_noisy_mnist(images, labels, seed, splits=None, rotation=(-math.pi / 4, math.pi / 4), noise=(0.0, 1.0)):
    '''
    View 1: images rotated by a uniform angle. View 2: a random other image of the
    same label from the same split plus uniform noise, truncated to [0, 1].
    '''
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if labels.shape != (n,):
        raise ValueError(f'Expected {n} labels, got {labels.shape}')
    if images.ndim == 2:
        side = int(round(math.sqrt(images.shape[1])))
        if side * side != images.shape[1]:
            raise ValueError(f'Flat images must be square, got {images.shape[1]} pixels')
        images = images.reshape(n, side, side)
    if images.min() < 0 or images.max() > 1:
        raise ValueError('Images must lie in [0, 1]')

    sizes = dict(zip(SPLITS, splits or default_splits(n)))
    layout, total = _split_layout(sizes)
    if total > n:
        raise ValueError(f'Splits {sizes} need {total} images, got {n}')
    split_of = np.full(n, -1)
    for k, name in enumerate(SPLITS):
        split_of[layout[name]] = k
    pools = {}
    for i in range(total):
        pools.setdefault((labels[i], split_of[i]), []).append(i)
    pools = {key: np.asarray(idx) for key, idx in pools.items()}
    root = RngState(seed)
    pixels = images.shape[1] * images.shape[2]

    def make(start, stop):
        x = np.empty((stop - start, pixels))
        y = np.empty((stop - start, pixels))
        angles = np.empty(stop - start)
        partners = np.empty(stop - start, dtype=np.int64)
        for row, i in enumerate(range(start, stop)):
            rng = root.substream('sample', i)
            angle = _draw_angle(rng.substream('angle'), rotation)
            x[row] = rotate_image(images[i], angle).ravel()
            partner = choose_partner(i, pools[(labels[i], split_of[i])], rng.substream('partner'))
            extra = sample_uniform(rng.substream('noise'), images[partner].shape, *noise).data
            y[row] = np.clip(images[partner] + extra, 0.0, 1.0).ravel()
            angles[row] = angle
            partners[row] = partner
        return x, y, angles, partners

    log.info(f'Pairing {total} images into noisy two-view samples')
    parts = _parallel_rows(total, make)
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    angles = np.concatenate([p[2] for p in parts])
    meta = {'generator': 'noisy_pairs', 'seed': seed, 'partners': [int(v) for v in np.concatenate([p[3] for p in parts])]}
    return TwoViewDataset(x, y, labels[:total], layout, images.shape[1:], {'angle': angles}, meta)


def load_dataset(data_cfg):
    '''Dataset described by a DataConfig'''
    if data_cfg.path:
        log.info(f'Loading dataset from {data_cfg.path}')
        return TwoViewDataset.load(data_cfg.path)
    if data_cfg.idx_images:
        if not data_cfg.idx_labels:
            raise ValueError('idx_images needs idx_labels')
        images = load_idx(data_cfg.idx_images).data
        labels = load_idx_labels(data_cfg.idx_labels)
        if data_cfg.limit:
            images, labels = images[: data_cfg.limit], labels[: data_cfg.limit]
        return make_noisy_mnist(images, labels, data_cfg.seed, rotation=data_cfg.rotation, noise=data_cfg.noise)
    return generate_two_view(data_cfg.synth_config())
