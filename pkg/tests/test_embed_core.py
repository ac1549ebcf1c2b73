import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mispdpo import embed_core as ec
from mispdpo.errors import DegenerateInputError, DimensionError, InsufficientDataError, NumericError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vectors(min_size=1, max_size=8):
    return st.integers(min_size, max_size).flatmap(lambda n: arrays(np.float64, n, elements=finite))


def test_fuse_two_vectors():
    assert ec.fuse([1, 2], [3, 4]).tolist() == [3, 4, 6, 8]


def test_fuse_zero_image_annihilates():
    out = ec.fuse(np.zeros(3), [0.5, -2.0, 7.0, 1.0])
    assert out.shape == (12,) and not out.any()


def test_fuse_row_major_layout(rng):
    a, b = rng.normal(size=3), rng.normal(size=5)
    out = ec.fuse(a, b)
    for i in range(3):
        for j in range(5):
            assert out[i * 5 + j] == a[i] * b[j]


def test_fuse_unit_vectors_have_unit_norm(rng):
    a = rng.normal(size=8)
    b = rng.normal(size=8)
    a /= math.sqrt(sum(t * t for t in a))
    b /= math.sqrt(sum(t * t for t in b))
    assert np.linalg.norm(ec.fuse(a, b)) == pytest.approx(1.0, rel=1e-12)


@given(vectors(), vectors())
def test_fuse_norm_identity(a, b):
    expected = math.hypot(*a) * math.hypot(*b)
    assert math.hypot(*ec.fuse(a, b)) == pytest.approx(expected, rel=1e-12, abs=1e-300)


def test_fuse_normalize_flag(rng):
    out = ec.fuse(3 * rng.normal(size=4), 2 * rng.normal(size=6), normalize=True)
    assert np.linalg.norm(out) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("a,b,err", [([], [1.0], DimensionError), ([1.0], [np.nan], NumericError),
                                     ([np.inf], [1.0], NumericError)])
def test_fuse_rejects_bad_input(a, b, err):
    with pytest.raises(err):
        ec.fuse(a, b)


def test_fuse_rows_matches_fuse(rng):
    hv, ht = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    rows = ec.fuse_rows(hv, ht)
    for r in range(4):
        np.testing.assert_array_equal(rows[r], ec.fuse(hv[r], ht[r]))


def test_difference_examples():
    assert ec.difference([3, 4, 6, 8], [1, 1, 1, 1], "c").values.tolist() == [2, 3, 5, 7]
    p = np.array([1.5, -2.0, 0.25])
    assert not ec.difference(p, p).values.any()


def test_difference_carries_id_and_acts_as_array():
    d = ec.difference([1.0, 2.0], [0.0, 0.0], candidate_id="neg-7")
    assert d.candidate_id == "neg-7"
    assert np.asarray(d).tolist() == [1.0, 2.0]


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                     arrays(np.float64, n, elements=finite))))
def test_difference_antisymmetric(pair):
    p, c = pair
    np.testing.assert_array_equal(ec.difference(p, c).values, -ec.difference(c, p).values)


def test_difference_length_mismatch():
    with pytest.raises(DimensionError):
        ec.difference([1, 2, 3], [1, 2])


def test_cosine_examples():
    assert ec.cosine([1, 0], [0, 1]) == 0.0
    assert ec.cosine([1, 2], [2, 4]) == pytest.approx(1.0, abs=1e-15)
    v = [0.3, -1.2, 4.0]
    assert ec.cosine(v, v) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=50)
@given(vectors(2, 6).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(v, s1, s2):
    u = v[::-1].copy() + 1.0
    if np.linalg.norm(u) < 1e-3:
        return
    assert ec.cosine(s1 * v, s2 * u) == pytest.approx(ec.cosine(v, u), abs=1e-12)
    assert ec.cosine(s1 * v, v) == pytest.approx(1.0, abs=1e-12)


def test_cosine_zero_vector_is_degenerate():
    with pytest.raises(DegenerateInputError):
        ec.cosine([0.0, 0.0], [1.0, 0.0])


def test_project_2d_on_planar_data_is_lossless(rng):
    pts = rng.normal(size=(10, 2))
    pts -= pts.mean(axis=0)
    proj = ec.project_2d(pts)
    back = proj.points @ proj.components + proj.mean
    np.testing.assert_allclose(back, pts, atol=1e-12)


def test_project_2d_collinear_points():
    direction = np.array([1.0, -2.0, 0.5, 3.0, 0.0])
    proj = ec.project_2d([0.0 * direction, 1.0 * direction, 3.0 * direction])
    assert proj.explained_variance[1] == pytest.approx(0.0, abs=1e-20)
    assert proj.explained_variance[0] > 0


def test_project_2d_variance_matches_covariance_eigenvalues(rng):
    x = rng.normal(size=(50, 16))
    eig = np.sort(np.linalg.eigh(np.cov(x, rowvar=False))[0])[::-1]
    proj = ec.project_2d(x)
    got = proj.points.var(axis=0, ddof=1)
    np.testing.assert_allclose(got, eig[:2], rtol=1e-10)
    assert got.sum() == pytest.approx(eig[:2].sum(), rel=1e-10)


def test_project_2d_sign_convention_and_determinism(rng):
    x = rng.normal(size=(20, 6))
    a, b = ec.project_2d(x), ec.project_2d(-x + 0.0)
    for comp in a.components:
        assert comp[np.argmax(np.abs(comp))] > 0
    np.testing.assert_array_equal(a.points, ec.project_2d(x).points)
    # negating the data flips projected points, never the components
    np.testing.assert_allclose(np.abs(a.components), np.abs(b.components), atol=1e-12)


def test_project_2d_needs_two_vectors():
    with pytest.raises(InsufficientDataError):
        ec.project_2d([[1.0, 2.0]])


def test_cap_dimension_off_by_default(rng):
    x = rng.normal(size=(3, 10))
    np.testing.assert_array_equal(ec.cap_dimension(x, limit=4), x)


def test_cap_dimension_projects_when_enabled(rng):
    x = rng.normal(size=(3, 4000))
    out = ec.cap_dimension(x, limit=1000, target_dim=256, seed=7, enabled=True)
    assert out.shape == (3, 256)
    np.testing.assert_array_equal(out, ec.cap_dimension(x, limit=1000, target_dim=256, seed=7, enabled=True))
    # norms are preserved in expectation
    ratio = np.linalg.norm(out, axis=1) / np.linalg.norm(x, axis=1)
    assert np.all((ratio > 0.8) & (ratio < 1.2))
