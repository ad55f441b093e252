import math

import numpy as np
import pytest
from scipy import integrate, stats

from mvlatent.evaluation import (
    EvalConfig,
    FeatureMatrix,
    analytic_linear_gaussian_loglik,
    classification_error,
    evaluate,
    export_features_csv,
    extract_features,
    linear_cca,
    orthogonality_score,
    select_classifier,
    train_linear_classifier,
)
from mvlatent.tensor import ShapeError

from conftest import small_bundle


def blobs(n, rng, spread=0.5):
    labels = np.arange(n) % 2
    centres = np.array([[-4.0, 0.0], [4.0, 0.0]])
    return centres[labels] + spread * rng.normal(size=(n, 2)), labels


def test_orthogonality_reference_values():
    e1, e2 = np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])
    assert orthogonality_score(e1, e2) == 0.0
    assert orthogonality_score(e1, e1) == pytest.approx(1.0, abs=1e-12)
    assert orthogonality_score(e1, np.array([[1.0], [1.0]])) == pytest.approx(0.5, abs=1e-12)


def test_orthogonality_is_bounded(np_rng):
    for _ in range(1000):
        n = int(np_rng.integers(1, 8))
        Z = np_rng.normal(size=(n, int(np_rng.integers(1, 4))))
        H = np_rng.normal(size=(n, int(np_rng.integers(1, 4))))
        assert 0.0 <= orthogonality_score(Z, H) <= 1.0 + 1e-12


def test_orthogonality_errors():
    with pytest.raises(ShapeError):
        orthogonality_score(np.ones((3, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        orthogonality_score(np.zeros((3, 1)), np.ones((3, 1)))


def test_cca_of_linearly_related_views(np_rng):
    X = np_rng.normal(size=(1000, 3))
    A = np.array([[2.0, 0.5, 0.0], [0.0, 1.0, -0.3], [0.4, 0.0, 1.5]])
    cca = linear_cca(X, X @ A, 3, ridge=0.0)
    np.testing.assert_allclose(cca.correlations, 1.0, atol=1e-8)
    projected = cca.transform_x(X)
    np.testing.assert_allclose(np.cov(projected, rowvar=False), np.eye(3), atol=1e-8)
    np.testing.assert_allclose(projected, cca.transform_y(X @ A), atol=1e-6)


def test_cca_recovers_shared_signal_correlation(np_rng):
    n = 100000
    z = np_rng.normal(size=n)
    x = np.stack([z + np_rng.normal(size=n), np_rng.normal(size=n)], axis=1)
    y = np.stack([z + np_rng.normal(size=n), np_rng.normal(size=n)], axis=1)
    cca = linear_cca(x, y, 2)
    # corr(z + e1, z + e2) = 1 / 2
    assert cca.correlations[0] == pytest.approx(0.5, abs=0.02)
    assert cca.correlations[1] < 0.05
    assert abs(cca.proj_x[0, 0]) > abs(cca.proj_x[1, 0])


def test_cca_argument_errors(np_rng):
    X = np_rng.normal(size=(10, 2))
    with pytest.raises(ValueError):
        linear_cca(X, X, 3)
    with pytest.raises(ValueError):
        linear_cca(X[:2], X[:2], 1)
    with pytest.raises(ShapeError):
        linear_cca(X, X[:5], 1)


def test_classifier_separates_blobs(np_rng):
    X, labels = blobs(200, np_rng)
    clf = train_linear_classifier(X, labels, reg=1.0)
    X_test, labels_test = blobs(100, np_rng)
    assert classification_error(clf, X_test, labels_test) == 0.0
    assert clf.class_count == 2
    assert classification_error(clf, FeatureMatrix(X_test, 'raw'), labels_test) == 0.0


def test_classifier_argument_errors(np_rng):
    X, labels = blobs(10, np_rng)
    with pytest.raises(ValueError):
        train_linear_classifier(X, np.zeros(10, dtype=int), 1.0)
    with pytest.raises(ValueError):
        train_linear_classifier(X, labels, 0.0)
    with pytest.raises(ShapeError):
        train_linear_classifier(X, labels[:5], 1.0)
    clf = train_linear_classifier(X, labels, 1.0)
    with pytest.raises(ShapeError):
        clf.predict(np.ones((2, 3)))


def test_select_classifier_keeps_first_of_ties(np_rng):
    X, labels = blobs(100, np_rng)
    X_tune, labels_tune = blobs(40, np_rng)
    clf, error = select_classifier(X, labels, X_tune, labels_tune, grid=(0.01, 0.1, 1.0))
    assert error == 0.0
    assert clf.reg == 0.01


def test_classifier_on_random_labels_is_at_chance(np_rng):
    X, X_test = np_rng.normal(size=(2000, 5)), np_rng.normal(size=(2000, 5))
    labels, labels_test = np_rng.integers(0, 10, 2000), np_rng.integers(0, 10, 2000)
    clf = train_linear_classifier(X, labels, reg=1.0)
    assert classification_error(clf, X_test, labels_test) == pytest.approx(0.9, abs=0.05)


def test_classifier_is_scale_covariant(np_rng):
    X = np_rng.normal(size=(300, 4))
    labels = np_rng.integers(0, 3, 300)
    X_test = np_rng.normal(size=(100, 4))
    for reg in (0.01, 1.0, 100.0):
        clf = train_linear_classifier(X, labels, reg)
        doubled = train_linear_classifier(2.0 * X, labels, reg / 4.0)
        np.testing.assert_array_equal(doubled.predict(2.0 * X_test), clf.predict(X_test))
        np.testing.assert_allclose(doubled.weights, clf.weights / 2.0, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(doubled.biases, clf.biases, rtol=1e-12, atol=1e-15)



def test_extract_features(dataset):
    bundle = small_bundle('vcca_private')
    feats = extract_features(bundle, dataset.x, dataset.y, 'concat_zx_zy')
    assert (feats.rows, feats.cols) == (len(dataset), 4)
    assert extract_features(bundle, dataset.x, which='hx').cols == 2
    assert extract_features(bundle, y=dataset.y, which='hy').cols == 3
    again = extract_features(bundle, dataset.x, dataset.y, 'z_from_x')
    np.testing.assert_array_equal(again.values, feats.values[:, :2])

    with pytest.raises(ValueError):
        extract_features(small_bundle('vcca'), dataset.x, which='hx')
    with pytest.raises(ValueError):
        extract_features(bundle, dataset.x, which='z_from_y')
    with pytest.raises(ValueError):
        extract_features(bundle, dataset.x, which='h')


def test_evaluate_report(dataset):
    cfg = EvalConfig(features=['z_from_x', 'concat_zx_zy'], raw_baseline=True, cca_baseline=True, iterations=20)
    report = evaluate(small_bundle('vcca_private'), dataset, cfg)
    assert report['objective_kind'] == 'vcca_private'
    assert set(report['features']) == {'z_from_x', 'concat_zx_zy'}
    assert report['features']['concat_zx_zy']['dim'] == 4
    for entry in list(report['features'].values()) + list(report['baselines'].values()):
        assert 0.0 <= entry['error_rate'] <= 1.0
        assert entry['C'] in cfg.c_grid
    assert report['baselines']['raw_x']['dim'] == 6
    assert report['baselines']['cca_x']['dim'] == 2
    for value in report['orthogonality'].values():
        assert 0.0 <= value <= 1.0

    plain = evaluate(small_bundle('vcca'), dataset, EvalConfig(iterations=20))
    assert 'orthogonality' not in plain and plain['baselines'] == {}


def test_orthogonality_without_view_two_private_encoder(dataset):
    report = evaluate(small_bundle('vcca_private', d_hy=0), dataset, EvalConfig(iterations=20))
    assert report['orthogonality']['lambda_z_hy'] is None
    assert 0.0 <= report['orthogonality']['lambda_z_hx'] <= 1.0


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(features=['pixels'])
    with pytest.raises(ValueError):
        EvalConfig(c_grid=[0.0])
    with pytest.raises(ValueError):
        EvalConfig(c_grid=[])


def test_export_features_csv(tmp_path):
    path = tmp_path / 'features.csv'
    export_features_csv(FeatureMatrix([[0.5, -1.0], [2.0, 0.25]], 'z_from_x'), [1, 0], path)
    assert path.read_text().splitlines() == ['f0,f1,label', '0.5,-1.0,1', '2.0,0.25,0']


def test_feature_matrix_rejects_non_finite():
    with pytest.raises(ValueError):
        FeatureMatrix([[np.nan]], 'z_from_x')
    with pytest.raises(ShapeError):
        FeatureMatrix([1.0, 2.0], 'z_from_x')


def test_analytic_loglik_by_hand():
    # x = z + e, y = z + e' gives covariance [[2, 1], [1, 2]] with determinant 3
    x, y = 0.7, -0.4
    quad = (2 * x * x - 2 * x * y + 2 * y * y) / 3.0
    expected = -math.log(2 * math.pi) - 0.5 * math.log(3.0) - 0.5 * quad
    assert analytic_linear_gaussian_loglik([[1.0]], [[1.0]], [x], [y]) == pytest.approx(expected, abs=1e-12)

    # a private factor on x adds A A^T to its variance
    det = 3.0 * 2.0 - 1.0
    quad = (2 * x * x - 2 * x * y + 3 * y * y) / det
    expected = -math.log(2 * math.pi) - 0.5 * math.log(det) - 0.5 * quad
    assert analytic_linear_gaussian_loglik([[1.0]], [[1.0]], [x], [y], A_x=[[1.0]]) == pytest.approx(expected, abs=1e-12)


def test_analytic_loglik_is_batched(np_rng):
    x, y = np_rng.normal(size=(4, 2)), np_rng.normal(size=(4, 1))
    W_x, W_y = np_rng.normal(size=(2, 1)), np_rng.normal(size=(1, 1))
    values = analytic_linear_gaussian_loglik(W_x, W_y, x, y)
    assert values.shape == (4,)
    assert values[2] == pytest.approx(analytic_linear_gaussian_loglik(W_x, W_y, x[2], y[2]))


def test_cca_of_independent_views_is_near_zero(np_rng):
    X, Y = np_rng.normal(size=(100000, 2)), np_rng.normal(size=(100000, 2))
    assert np.all(linear_cca(X, Y, 2).correlations < 0.02)
    assert linear_cca(X[:, 0], X[:, 0], 1).correlations[0] == pytest.approx(1.0, abs=1e-4)


def test_analytic_loglik_matches_quadrature(np_rng):
    for _ in range(10):
        W_x, W_y = np_rng.normal(size=(2, 1)), np_rng.normal(size=(1, 1))
        A_x = np_rng.normal(size=(2, 1))
        x, y = np_rng.normal(size=2), np_rng.normal(size=1)

        def joint(z, h=None):
            mean_x = W_x[:, 0] * z if h is None else W_x[:, 0] * z + A_x[:, 0] * h
            log_p = stats.norm.logpdf(z) + stats.norm.logpdf(x, mean_x).sum() + stats.norm.logpdf(y, W_y[:, 0] * z).sum()
            return math.exp(log_p if h is None else log_p + stats.norm.logpdf(h))

        marginal, _ = integrate.quad(joint, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-11)
        assert analytic_linear_gaussian_loglik(W_x, W_y, x, y) == pytest.approx(math.log(marginal), abs=1e-7)

        # private factor: integrate h_x out too
        marginal, _ = integrate.dblquad(lambda h, z: joint(z, h), -12.0, 12.0, -12.0, 12.0, epsabs=1e-12, epsrel=1e-10)
        expected = analytic_linear_gaussian_loglik(W_x, W_y, x, y, A_x=A_x)
        assert expected == pytest.approx(math.log(marginal), abs=1e-6)
