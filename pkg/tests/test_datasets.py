import gzip
import math
import struct

import numpy as np
import pytest

from mvlatent import datasets
from mvlatent.datasets import (
    DataConfig,
    IdxFormatError,
    SynthConfig,
    TwoViewDataset,
    choose_partner,
    default_splits,
    generate_two_view,
    glyph_catalog,
    load_dataset,
    load_idx,
    load_idx_labels,
    make_noisy_mnist,
    read_idx,
    render_glyph,
    rotate_image,
)
from mvlatent.tensor import RngState
from mvlatent.utils import THREADS_ENV

SMALL = dict(class_count=4, side=8, n_train=24, n_tune=8, n_test=8, seed=5)


def write_idx(path, array, type_code=0x08, compress=False, extra=b''):
    array = np.asarray(array)
    header = struct.pack('>HBB', 0, type_code, array.ndim) + struct.pack(f'>{array.ndim}I', *array.shape)
    payload = header + array.tobytes() + extra
    if compress:
        payload = gzip.compress(payload)
    path.write_bytes(payload)
    return path


def test_generator_is_deterministic_and_labelled_round_robin():
    a = generate_two_view(SynthConfig(**SMALL))
    b = generate_two_view(SynthConfig(**SMALL))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.labels, np.arange(40) % 4)
    assert {name: len(idx) for name, idx in a.splits.items()} == {'train': 24, 'tune': 8, 'test': 8}
    assert a.x.shape == (40, 64) and a.image_shape == (8, 8)
    assert a.x.min() >= 0 and a.x.max() <= 1 and a.y.min() >= 0 and a.y.max() <= 1
    angles = a.factors['angle']
    assert np.all(np.abs(angles) <= math.pi / 4)

    c = generate_two_view(SynthConfig(**dict(SMALL, seed=6)))
    assert not np.array_equal(a.x, c.x)


def test_generator_does_not_depend_on_thread_count(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, '1')
    serial = generate_two_view(SynthConfig(**SMALL))
    monkeypatch.setenv(THREADS_ENV, '4')
    parallel = generate_two_view(SynthConfig(**SMALL))
    np.testing.assert_array_equal(serial.x, parallel.x)
    np.testing.assert_array_equal(serial.y, parallel.y)


def test_views_share_only_the_class():
    data = generate_two_view(SynthConfig(**dict(SMALL, noise=(0.0, 1e-9), rotation=(0.0, 0.0), jitter=0.0, max_shift=0)))
    # with rotation, jitter and shift disabled both views are the class prototype
    np.testing.assert_allclose(data.x, data.y, atol=1e-8)
    for k in range(4):
        rows = data.x[data.labels == k]
        np.testing.assert_array_equal(rows, np.repeat(rows[:1], len(rows), axis=0))


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(class_count=1)
    with pytest.raises(ValueError):
        SynthConfig(class_count=len(glyph_catalog()) + 1)
    with pytest.raises(ValueError):
        SynthConfig(noise=(1.0, 0.0))
    with pytest.raises(ValueError):
        SynthConfig(n_test=0)


def test_glyphs_are_distinct():
    images = [render_glyph(strokes, 16).ravel() for strokes in glyph_catalog()[:10]]
    for i in range(10):
        for j in range(i + 1, 10):
            assert np.abs(images[i] - images[j]).max() > 0.5


def quarter_turn(img):
    '''Counterclockwise quarter turn by moving every pixel explicitly'''
    n = img.shape[0]
    out = np.empty_like(img)
    for r in range(n):
        for c in range(n):
            out[n - 1 - c, r] = img[r, c]
    return out


def test_rotate_image():
    img = np.zeros((5, 5))
    img[1, 2] = 1.0
    np.testing.assert_array_equal(rotate_image(img, 0.0), img)
    np.testing.assert_array_equal(rotate_image(img, math.pi / 2), quarter_turn(img))
    with pytest.raises(ValueError):
        rotate_image(np.zeros(4), 0.1)
    with pytest.raises(ValueError):
        rotate_image(img, float('nan'))


def test_quarter_turn_moves_pixels_exactly():
    pattern = np.array([[0.1, 0.2], [0.3, 0.4]])
    # top-right goes to top-left
    np.testing.assert_array_equal(rotate_image(pattern, math.pi / 2), [[0.2, 0.4], [0.1, 0.3]])
    np.testing.assert_array_equal(rotate_image(pattern, math.pi / 2), quarter_turn(pattern))
    img = np.random.default_rng(3).uniform(size=(5, 5))
    np.testing.assert_array_equal(rotate_image(img, math.pi / 2), quarter_turn(img))
    np.testing.assert_array_equal(rotate_image(img, math.pi), quarter_turn(quarter_turn(img)))


def test_rotation_round_trip():
    r, c = np.mgrid[:21, :21] - 10.0
    blob = np.exp(-(r**2 + c**2) / (2 * 3.0**2))
    for angle in (0.3, -0.7, math.pi / 5):
        back = rotate_image(rotate_image(blob, angle), -angle)
        assert np.max(np.abs(back - blob)) < 0.15


def test_idx_round_trip(tmp_path):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = write_idx(tmp_path / 'images.idx', images)
    np.testing.assert_array_equal(read_idx(path), images)
    np.testing.assert_array_equal(load_idx(path).data, images / 255.0)

    gz = write_idx(tmp_path / 'images.idx.gz', images, compress=True)
    np.testing.assert_array_equal(read_idx(gz), images)


def test_idx_other_element_types(tmp_path):
    values = np.array([[1.5, -2.25], [3.0, 0.125]], dtype='>f8')
    path = write_idx(tmp_path / 'doubles.idx', values, type_code=0x0E)
    np.testing.assert_array_equal(load_idx(path).data, values)
    shorts = np.array([-3, 300], dtype='>i2')
    np.testing.assert_array_equal(load_idx(write_idx(tmp_path / 'shorts.idx', shorts, 0x0B)).data, [-3.0, 300.0])


def test_idx_labels(tmp_path):
    labels = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
    loaded = load_idx_labels(write_idx(tmp_path / 'labels.idx', labels))
    np.testing.assert_array_equal(loaded, labels)
    assert loaded.dtype == np.int64
    with pytest.raises(IdxFormatError):
        load_idx_labels(write_idx(tmp_path / 'grid.idx', np.zeros((2, 2), dtype=np.uint8)))


def test_idx_format_errors(tmp_path):
    images = np.zeros((2, 2), dtype=np.uint8)
    truncated = tmp_path / 'truncated.idx'
    truncated.write_bytes(write_idx(tmp_path / 'full.idx', images).read_bytes()[:-1])
    with pytest.raises(IdxFormatError) as e:
        read_idx(truncated)
    assert (e.value.expected, e.value.actual) == (16, 15)
    assert 'expected 16 bytes, found 15' in str(e.value)

    with pytest.raises(IdxFormatError) as e:
        read_idx(write_idx(tmp_path / 'trailing.idx', images, extra=b'\x00'))
    assert 'trailing' in str(e.value)

    bad = tmp_path / 'bad.idx'
    bad.write_bytes(b'\x01\x02\x08\x01\x00\x00\x00\x00')
    with pytest.raises(IdxFormatError):
        read_idx(bad)
    with pytest.raises(IdxFormatError):
        read_idx(write_idx(tmp_path / 'type.idx', images, type_code=0x0A))
    short = tmp_path / 'short.idx'
    short.write_bytes(b'\x00\x00')
    with pytest.raises(IdxFormatError):
        read_idx(short)


def test_default_splits():
    assert default_splits(70000) == (50000, 10000, 10000)
    assert default_splits(700) == (500, 100, 100)


def test_choose_partner():
    rng = RngState(0)
    candidates = np.array([3, 5, 9])
    for i in range(20):
        assert choose_partner(5, candidates, rng.substream(i)) in (3, 9)
    assert choose_partner(4, np.array([4]), rng) == 4


def test_noisy_pairs_stay_within_label_and_split():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(70, 4, 4))
    labels = np.arange(70) % 5
    data = make_noisy_mnist(images, labels, seed=1)
    partners = np.array(data.meta['partners'])
    split_of = np.empty(70, dtype=int)
    for k, name in enumerate(('train', 'tune', 'test')):
        split_of[data.splits[name]] = k
    assert np.all(labels[partners] == labels)
    assert np.all(split_of[partners] == split_of)
    assert np.all(partners != np.arange(70))
    assert data.y.min() >= 0 and data.y.max() <= 1

    again = make_noisy_mnist(images.reshape(70, 16), labels, seed=1)
    np.testing.assert_array_equal(again.x, data.x)
    with pytest.raises(ValueError):
        make_noisy_mnist(images * 2.0, labels, seed=1)


def test_partner_depends_only_on_label_and_split(monkeypatch):
    rng = np.random.default_rng(0)
    labels = np.arange(70) % 5
    split_of = np.repeat([0, 1, 2], (50, 10, 10))
    calls = []

    def recording(index, candidates, stream):
        calls.append((index, candidates.copy()))
        return choose_partner(index, candidates, stream)

    monkeypatch.setattr(datasets, 'choose_partner', recording)
    monkeypatch.setenv(THREADS_ENV, '1')
    first = make_noisy_mnist(rng.uniform(size=(70, 4, 4)), labels, seed=1)
    assert sorted(i for i, _ in calls) == list(range(70))
    for index, candidates in calls:
        expected = np.flatnonzero((labels == labels[index]) & (split_of == split_of[index]))
        np.testing.assert_array_equal(np.sort(candidates), expected)

    # different pixels, same labels: the pairing does not look at the images
    second = make_noisy_mnist(rng.uniform(size=(70, 4, 4)), labels, seed=1)
    assert first.meta['partners'] == second.meta['partners']
    assert not np.array_equal(first.y, second.y)



def test_dataset_save_and_load(tmp_path):
    data = generate_two_view(SynthConfig(**SMALL))
    data.save(tmp_path / 'data')
    loaded = TwoViewDataset.load(tmp_path / 'data')
    np.testing.assert_array_equal(loaded.x, data.x)
    np.testing.assert_array_equal(loaded.labels, data.labels)
    np.testing.assert_array_equal(loaded.factors['angle'], data.factors['angle'])
    np.testing.assert_array_equal(loaded.split_indices('test'), data.split_indices('test'))
    assert loaded.image_shape == (8, 8)
    assert loaded.meta['seed'] == 5

    data.save(tmp_path / 'again')
    for name in ('x.bin', 'y.bin', 'labels.bin', 'factor_angle.bin', 'meta.json'):
        assert (tmp_path / 'data' / name).read_bytes() == (tmp_path / 'again' / name).read_bytes()


def test_dataset_validation():
    with pytest.raises(ValueError):
        TwoViewDataset(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        TwoViewDataset(np.zeros((3, 2)), np.zeros((3, 2)), splits={'train': [0, 1], 'test': [1, 2]})
    with pytest.raises(ValueError):
        TwoViewDataset(np.zeros((3, 2)), np.zeros((3, 2))).split_indices('tune')


def test_load_dataset_sources(tmp_path):
    images = (np.arange(14 * 9) % 256).astype(np.uint8).reshape(14, 3, 3)
    labels = (np.arange(14) % 2).astype(np.uint8)
    cfg = DataConfig(
        idx_images=str(write_idx(tmp_path / 'img.idx', images)),
        idx_labels=str(write_idx(tmp_path / 'lab.idx', labels)),
        seed=2,
    )
    data = load_dataset(cfg)
    assert data.x.shape == (14, 9) and len(data.split_indices('train')) == 10

    data.save(tmp_path / 'saved')
    assert load_dataset(DataConfig(path=str(tmp_path / 'saved'))).x.shape == (14, 9)
    assert load_dataset(DataConfig(**SMALL)).x.shape == (40, 64)
    with pytest.raises(ValueError):
        load_dataset(DataConfig(idx_images=cfg.idx_images))
