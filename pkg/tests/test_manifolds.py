from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgfm import tensor as T
from rgfm.manifolds import (DomainError, Manifold, clip_tangent_t, dist0, exp0, exp0_t, log0, log0_t, project,
                            project_t, tangent_aggregate)
from rgfm.tensor import Tensor

from conftest import grad_rel_error

CURVATURES = [-2.0, -1.0, 0.0, 1.0]


def test_exp0_examples():
    np.testing.assert_array_equal(exp0(Manifold(0.0), [0.5, 0.0]), [[0.5, 0.0]])
    np.testing.assert_allclose(exp0(Manifold(-1.0), [0.5, 0.0]), [[math.tanh(0.5), 0.0]], atol=1e-15)
    assert exp0(Manifold(-1.0), [0.5, 0.0])[0, 0] == pytest.approx(0.46212, abs=1e-5)
    assert exp0(Manifold(-4.0), [0.5, 0.0])[0, 0] == pytest.approx(0.38080, abs=1e-5)
    assert exp0(Manifold(1.0), [0.5, 0.0])[0, 0] == pytest.approx(math.tan(0.5), abs=1e-15)


def test_log0_examples():
    np.testing.assert_allclose(log0(Manifold(-1.0), [0.46212, 0.0]), [[0.5, 0.0]], atol=1e-5)
    np.testing.assert_array_equal(log0(Manifold(0.0), [[1.0, 2.0]]), [[1.0, 2.0]])


def test_dist0_examples():
    assert dist0(Manifold(-1.0), [0.46212, 0.0])[0] == pytest.approx(0.5, abs=1e-5)
    assert dist0(Manifold(0.0), [3.0, 4.0])[0] == 5.0


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(CURVATURES), st.integers(1, 6), st.integers(0, 10**6))
def test_exp_log_inverse(kappa, d, seed):
    m = Manifold(kappa)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3, d))
    # sqrt|k| |v| <= 1.2, which is also below pi/2 for k > 0
    scale = m.sqrt_abs if kappa else 1.0
    v *= rng.uniform(0, 1.2, size=(3, 1)) / (np.linalg.norm(v, axis=1, keepdims=True) * scale)
    np.testing.assert_allclose(log0(m, exp0(m, v)), v, atol=1e-9)
    np.testing.assert_allclose(dist0(m, exp0(m, v)), np.linalg.norm(v, axis=1), atol=1e-9)


@pytest.mark.parametrize("kappa", [-1e-4, 1e-4])
def test_continuity_at_zero(kappa):
    v = np.array([[0.3, -0.4, 0.5]])
    assert np.abs(exp0(Manifold(kappa), v) - v).max() <= 1e-5
    assert np.abs(log0(Manifold(kappa), v) - v).max() <= 1e-5


def test_taylor_branch_matches_closed_form_near_cutoff():
    m = Manifold(-1.0)
    for r in (0.99e-4, 1.01e-4):
        v = np.array([[r, 0.0]])
        assert exp0(m, v)[0, 0] == pytest.approx(math.tanh(r), rel=1e-14)
        assert log0(m, v)[0, 0] == pytest.approx(math.atanh(r), rel=1e-14)


def test_domain_errors():
    with pytest.raises(DomainError):
        exp0(Manifold(1.0), [[2.0, 0.0]])
    with pytest.raises(DomainError):
        log0(Manifold(-1.0), [[1.0, 0.0]])


def test_project_examples():
    m = Manifold(-1.0)
    np.testing.assert_allclose(project(m, [[2.0, 0.0]]), [[1 - m.eps, 0.0]], atol=1e-15)
    p = np.array([[0.3, 0.2]])
    np.testing.assert_array_equal(project(m, p), p)
    np.testing.assert_array_equal(project(Manifold(1.0), [[5.0, 0.0]]), [[5.0, 0.0]])


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([-4.0, -2.0, -1.0, 0.0, 1.0]), st.integers(0, 10**6))
def test_project_idempotent(kappa, seed):
    m = Manifold(kappa)
    p = np.random.default_rng(seed).normal(scale=2.0, size=(4, 3))
    once = project(m, p)
    np.testing.assert_array_equal(project(m, once), once)


def test_tangent_aggregate_examples():
    m = Manifold(-1.0)
    p = np.array([[0.2, 0.3]])
    np.testing.assert_allclose(tangent_aggregate(m, p, [1.0]), p, atol=1e-15)
    q = exp0(m, [[0.4, -0.1], [-0.4, 0.1]])
    np.testing.assert_allclose(tangent_aggregate(m, q, [0.5, 0.5]), [[0.0, 0.0]], atol=1e-15)
    pts = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    w = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(tangent_aggregate(Manifold(0.0), pts, w), [w @ pts], atol=1e-12)
    with pytest.raises(ValueError):
        tangent_aggregate(m, pts * 0.1, [0.5, 0.6, -0.1])


@pytest.mark.parametrize("kappa", CURVATURES + [-4.0, 2.0])
def test_manifold_map_gradients(kappa):
    m = Manifold(kappa)
    rng = np.random.default_rng(int(abs(kappa) * 10) + 3)
    for _ in range(5):
        raw = rng.normal(size=(3, 4))
        # keep points inside the ball and tangents inside the chart
        raw *= rng.uniform(0.05, 0.9, size=(3, 1)) / (np.linalg.norm(raw, axis=1, keepdims=True) * max(m.sqrt_abs, 1.0))
        v = Tensor(raw, True)
        w = rng.normal(size=(3, 4))
        assert grad_rel_error(lambda: T.sum_all(T.mul(exp0_t(m, v), Tensor(w))), [v]) < 1e-4
        assert grad_rel_error(lambda: T.sum_all(T.mul(log0_t(m, v), Tensor(w))), [v]) < 1e-4


def test_clip_gradients():
    rng = np.random.default_rng(0)
    m = Manifold(-1.0)
    x = Tensor(rng.normal(scale=2.0, size=(4, 3)), True)
    w = rng.normal(size=(4, 3))
    assert grad_rel_error(lambda: T.sum_all(T.mul(project_t(m, x), Tensor(w))), [x]) < 1e-4
    sph = Manifold(2.0)
    assert grad_rel_error(lambda: T.sum_all(T.mul(clip_tangent_t(sph, x), Tensor(w))), [x]) < 1e-4
    assert (np.linalg.norm(clip_tangent_t(sph, x).data, axis=1) * sph.sqrt_abs < math.pi / 2).all()


def test_tensor_maps_match_numpy():
    rng = np.random.default_rng(5)
    for kappa in CURVATURES:
        m = Manifold(kappa)
        v = rng.normal(scale=0.3, size=(5, 3))
        np.testing.assert_array_equal(exp0_t(m, Tensor(v)).data, exp0(m, v))
        np.testing.assert_array_equal(log0_t(m, Tensor(v)).data, log0(m, v))
