import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdesc.descriptor import Descriptor, Kind, NormState
from kdesc.exceptions import DegenerateInputError, FormatError
from kdesc.postprocess import (PairList, Variant, WhiteningModel, apply_batch, apply_transform, fit_lw,
                               fit_pca, load_model, pair_scatter, power_law, project, save_model)


def unit_rows(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def pair_cov(Y, labels):
    S, n = np.zeros((Y.shape[1],) * 2), 0
    for c in np.unique(labels):
        Z = Y[labels == c]
        for i in range(len(Z)):
            D = Z[i + 1:] - Z[i]
            S += D.T @ D
            n += len(D)
    return S / n


# -- power law -------------------------------------------------------------------

def test_power_law_examples():
    v = np.array([4.0, -9.0, 0.0])
    assert np.array_equal(power_law(v, 0.5), [2.0, -3.0, 0.0])
    assert np.array_equal(power_law(v, 1.0), v)
    with pytest.raises(ValueError):
        power_law(v, 0.0)
    with pytest.raises(ValueError):
        power_law(v, 1.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
def test_power_law_composition(vals):
    v = np.array(vals)
    assert np.allclose(power_law(power_law(v, 0.5), 0.5), power_law(v, 0.25), rtol=1e-12, atol=1e-300)


# -- PCA ----------------------------------------------------------------------------

def test_pca_diagonal_covariance(rng):
    Z = rng.normal(size=(5000, 3))
    Z = (Z - Z.mean(0))
    Z = Z @ np.linalg.inv(np.linalg.cholesky(np.cov(Z.T, bias=True))).T  # exact identity covariance
    X = Z * np.sqrt([3.0, 2.0, 1.0])
    m = fit_pca(X, 2)
    assert np.allclose(np.abs(m.A), [[1, 0], [0, 1], [0, 0]], atol=1e-10)
    assert np.all(m.A.max(axis=0) > 0)


def test_pca_reconstruction_error(rng):
    X = rng.normal(size=(400, 10)) @ rng.normal(size=(10, 10))
    d = 4
    m = fit_pca(X, d)
    Xc = X - m.mu
    resid = Xc - (Xc @ m.A) @ m.A.T
    err = np.mean(np.sum(resid ** 2, axis=1))
    vals = np.sort(np.linalg.eigvalsh(Xc.T @ Xc / len(X)))[::-1]
    assert err == pytest.approx(vals[d:].sum(), rel=1e-6)
    assert np.allclose(np.linalg.norm(m.A, axis=0), 1.0)


def test_pca_sign_convention(rng):
    m = fit_pca(rng.normal(size=(200, 6)), 6)
    idx = np.argmax(np.abs(m.A), axis=0)
    assert np.all(m.A[idx, np.arange(6)] > 0)


def test_pca_rank_deficiency(rng):
    X = np.zeros((50, 5))
    X[:, :2] = rng.normal(size=(50, 2))
    assert fit_pca(X, 2).d_out == 2
    with pytest.raises(DegenerateInputError):
        fit_pca(X, 3)
    with pytest.raises(ValueError):
        fit_pca(X[:4], 2)


def test_pca_mean_input_is_degenerate(rng):
    X = unit_rows(rng.normal(size=(100, 8)))
    m = fit_pca(X, 4)
    with pytest.raises(DegenerateInputError):
        apply_batch(m, m.mu)


def test_pca_apply_matches_hand_computation():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    m = WhiteningModel(np.zeros(3), A, Variant.PCA, alpha=0.5)
    out = apply_transform(m, Descriptor([0.6, -0.8, 0.0], Kind.COMBINED))
    # y = (0.6, -0.8) -> (sqrt 0.6, -sqrt 0.8), squared norm 1.4
    assert np.allclose(out.values, [np.sqrt(0.6 / 1.4), -np.sqrt(0.8 / 1.4)], atol=1e-15)
    assert out.kind is Kind.POSTPROCESSED and out.norm_state is NormState.UNIT


# -- apply -----------------------------------------------------------------------------

def test_identity_model(rng):
    x = unit_rows(rng.normal(size=(3, 5)))
    m = WhiteningModel(np.zeros(5), np.eye(5), Variant.LW, alpha=1.0)
    assert np.allclose(apply_batch(m, x), x, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_projection_is_affine(seed):
    rng = np.random.default_rng(seed)
    m = WhiteningModel(rng.normal(size=6), rng.normal(size=(6, 3)), Variant.LW)
    x, y = rng.normal(size=6), rng.normal(size=6)
    assert np.allclose(project(m, x) - project(m, y), m.A.T @ (x - y), atol=1e-10)


def test_rotation_preserves_dot_products(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(7, 7)))
    m = WhiteningModel(np.zeros(7), Q, Variant.LW, alpha=1.0)
    X = unit_rows(rng.normal(size=(20, 7)))
    Y = apply_batch(m, X)
    assert np.allclose(Y @ Y.T, X @ X.T, atol=1e-10)


def test_similarity_expansion(rng):
    for _ in range(100):
        d, k = 12, 5
        A, mu = rng.normal(size=(d, k)), rng.normal(size=d)
        p, q = rng.normal(size=d), rng.normal(size=d)
        AAt = A @ A.T
        expanded = p @ AAt @ q - p @ AAt @ mu - q @ AAt @ mu + mu @ AAt @ mu
        direct = (A.T @ (p - mu)) @ (A.T @ (q - mu))
        assert abs(expanded - direct) <= 1e-10 * (1 + abs(direct))


def test_apply_dimension_check(rng):
    m = WhiteningModel(np.zeros(4), np.eye(4)[:, :2], Variant.LW)
    with pytest.raises(ValueError):
        apply_batch(m, np.ones((1, 5)))


# -- learned whitening ----------------------------------------------------------------

def _clouds(rng, n_classes=30, per_class=20, dim=6, noise=None, spread=3.0):
    centers = rng.normal(scale=spread, size=(n_classes, dim))
    noise = np.eye(dim) if noise is None else noise
    labels = np.repeat(np.arange(n_classes), per_class)
    X = centers[labels] + rng.normal(size=(len(labels), dim)) @ noise
    return X, labels


def test_lw_isotropic_noise_reduces_to_scaled_pca(rng):
    d, step = 4, 0.6
    centers = rng.normal(scale=3.0, size=(2 * d, d))
    X, labels = [], []
    for k, c in enumerate(centers):
        e = np.eye(d)[k % d]
        X += [c, c + step * e]
        labels += [k, k]
    X, labels = np.array(X), np.array(labels)
    # matching differences are +-step e_j, each axis twice: C_S = (step^2 / d) I
    sigma = step / np.sqrt(d)
    n = len(X)
    neg = [(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] != labels[j]]
    C_D = sum(np.outer(X[i] - X[j], X[i] - X[j]) for i, j in neg) / len(neg)
    vals, vecs = np.linalg.eigh(C_D)
    U = vecs[:, ::-1][:, :2]
    m = fit_lw(X, labels, 2)
    assert np.allclose(np.abs(m.A), np.abs(U) / sigma, atol=1e-8)


def test_lw_whitening_property(rng):
    mix = rng.normal(size=(8, 8))
    X, labels = _clouds(rng, n_classes=50, per_class=12, dim=8, noise=mix)
    m = fit_lw(X, labels, 4)
    vals = np.linalg.eigvalsh(pair_cov(project(m, X), labels))
    assert np.all((vals > 0.8) & (vals < 1.2))
    assert np.linalg.norm(pair_cov(project(m, X), labels) - np.eye(4)) / 4 < 5e-2


def test_lw_two_clusters_find_separation_direction(rng):
    direction = np.array([1.0, 2.0, -1.0, 0.5])
    direction /= np.linalg.norm(direction)
    n = 300
    labels = np.repeat([0, 1], n)
    X = rng.normal(scale=0.3, size=(2 * n, 4)) + np.outer(np.where(labels == 0, -5.0, 5.0), direction)
    m = fit_lw(X, labels, 1)
    # the retained axis in input space is the row of W U mapping x to its coordinate
    axis = m.A[:, 0] / np.linalg.norm(m.A[:, 0])
    assert abs(axis @ direction) >= 0.99


def test_lw_explicit_pairs_match_labels(rng):
    X, labels = _clouds(rng, n_classes=6, per_class=5, dim=4)
    pos = [(i, j) for i in range(30) for j in range(i + 1, 30) if labels[i] == labels[j]]
    neg = [(i, j) for i in range(30) for j in range(i + 1, 30) if labels[i] != labels[j]]
    a = fit_lw(X, labels, 3)
    b = fit_lw(X, labels, 3, pairs=PairList(pos, neg))
    assert np.allclose(a.A, b.A, atol=1e-9)


def test_lw_sampled_negatives_are_seeded(rng):
    X, labels = _clouds(rng, n_classes=10, per_class=10, dim=4)
    a = fit_lw(X, labels, 2, seed=5, max_negatives=500)
    b = fit_lw(X, labels, 2, seed=5, max_negatives=500)
    assert np.array_equal(a.A, b.A) and a.seed == 5


def test_pair_scatter_closed_form(rng):
    X, labels = _clouds(rng, n_classes=4, per_class=6, dim=3)
    pos = np.array([(i, j) for i in range(24) for j in range(i + 1, 24) if labels[i] == labels[j]])
    S = pair_scatter(X, pos)
    assert np.allclose(S / len(pos), pair_cov(X, labels), atol=1e-12)


def test_lw_errors(rng):
    X, labels = _clouds(rng, n_classes=3, per_class=4, dim=3)
    with pytest.raises(ValueError):
        fit_lw(X, np.zeros(len(X)), 2)
    with pytest.raises(ValueError):
        fit_lw(X, labels, 4)
    with pytest.raises(DegenerateInputError):
        fit_lw(np.tile(X[:, :1], 3), labels, 2)
    with pytest.raises(ValueError):
        PairList([(1, 1)], [])
    with pytest.raises(ValueError):
        PairList([(0, 5)], [(0, 1)]).validate(labels)


# -- model file -----------------------------------------------------------------------

def test_model_round_trip(tmp_path, rng):
    m = WhiteningModel(rng.normal(size=5), rng.normal(size=(5, 3)), Variant.PCA, alpha=0.5, seed=2**63 + 7)
    path = tmp_path / "m.kpwm"
    save_model(m, path)
    data = path.read_bytes()
    assert data[:4] == b"KPWM"
    assert struct.unpack_from("<IBIId", data, 4) == (1, 0, 5, 3, 0.5)
    assert len(data) == 4 + 4 + 1 + 4 + 4 + 8 + 8 * 5 + 8 * 15 + 8
    # column-major A: the first d_in values after mu are the first column
    first_col = np.frombuffer(data, "<f8", 5, 25 + 40)
    assert np.array_equal(first_col, m.A[:, 0])
    back = load_model(path)
    assert np.array_equal(back.mu, m.mu) and np.array_equal(back.A, m.A)
    assert (back.variant, back.alpha, back.seed) == (m.variant, m.alpha, m.seed)


def test_model_corruption(tmp_path, rng):
    m = WhiteningModel(np.zeros(3), np.eye(3), Variant.LW)
    path = tmp_path / "m.kpwm"
    save_model(m, path)
    good = path.read_bytes()
    for bad in (b"XXXX" + good[4:], good[:-3], good[:10], good[:4] + struct.pack("<I", 9) + good[8:]):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            load_model(path)
