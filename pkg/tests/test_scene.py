import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import CubicHermiteSpline
from scipy.spatial.transform import Rotation

from deblurgs.grad import ParamStore, check_gradient
from deblurgs.scene import (ControlPoints, Gaussian, GaussianArrays, Kind, MissingControlPoints,
                            SceneModel, covariance_3d, gaussian_at_time, logit,
                            quat_to_rotmat, quat_to_rotmat_backward, sigmoid,
                            spline_eval, spline_weights)

from conftest import random_gaussians, small_intrinsics, small_scene


def reference_spline(points, n_frames):
    """scipy's Hermite spline on the same knots and tangents."""
    n = len(points)
    tangents = np.empty_like(points)
    tangents[1:-1] = (points[2:] - points[:-2]) / 2
    tangents[0] = points[1] - points[0]
    tangents[-1] = points[-1] - points[-2]
    knots = np.linspace(0, n_frames - 1, n)
    return CubicHermiteSpline(knots, points, tangents * (n - 1) / (n_frames - 1))


def test_reproduces_control_points(rng):
    pts = rng.normal(size=(12, 3))
    n_frames = 23  # t_s = t * 11 / 22 hits every knot at even t
    for j in range(12):
        np.testing.assert_allclose(spline_eval(ControlPoints(pts), 2 * j, n_frames), pts[j],
                                   atol=1e-12)


def test_constant_spline(rng):
    c = rng.normal(size=3)
    ctrl = ControlPoints(np.tile(c, (6, 1)))
    for t in np.linspace(0, 9, 17):
        np.testing.assert_allclose(spline_eval(ctrl, t, 10), c, atol=1e-14)


def test_linear_reproduction():
    d = np.array([0.3, -1.0, 2.0])
    ctrl = ControlPoints(np.arange(12)[:, None] * d)
    n_frames = 24
    for t in np.linspace(0, 23, 101):
        ts = t / 23 * 11
        np.testing.assert_allclose(spline_eval(ctrl, t, n_frames), ts * d, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 14), st.integers(3, 30), st.integers(0, 10_000))
def test_matches_scipy_hermite(n_ctrl, n_frames, seed):
    pts = np.random.default_rng(seed).normal(size=(n_ctrl, 3))
    ref = reference_spline(pts, n_frames)
    for t in np.linspace(0, n_frames - 1, 29):
        np.testing.assert_allclose(spline_eval(ControlPoints(pts), t, n_frames), ref(t),
                                   atol=1e-10)


def test_weight_derivative(rng):
    for t in (0.1, 3.3, 7.0, 11.9):
        w, dw = spline_weights(t, 13, 6)
        h = 1e-6
        num = (spline_weights(t + h, 13, 6)[0] - spline_weights(t - h, 13, 6)[0]) / (2 * h)
        np.testing.assert_allclose(dw, num, atol=1e-7)


def test_clamped_outside_range(rng):
    pts = rng.normal(size=(5, 3))
    ctrl = ControlPoints(pts)
    np.testing.assert_allclose(spline_eval(ctrl, -0.7, 8), pts[0])
    np.testing.assert_allclose(spline_eval(ctrl, 9.2, 8), pts[-1])
    assert not np.any(spline_weights(-0.7, 8, 5)[1])


def test_c1_across_knots(rng):
    ctrl = ControlPoints(rng.normal(size=(7, 3)))
    h = 1e-4
    for knot in range(1, 6):
        t = knot * 12 / 6
        second = (spline_eval(ctrl, t + h, 13) - 2 * spline_eval(ctrl, t, 13)
                  + spline_eval(ctrl, t - h, 13)) / h**2
        assert np.all(np.isfinite(second))
        assert np.max(np.abs(second)) < 1e3
        left = (spline_eval(ctrl, t, 13) - spline_eval(ctrl, t - h, 13)) / h
        right = (spline_eval(ctrl, t + h, 13) - spline_eval(ctrl, t, 13)) / h
        assert np.max(np.abs(left - right)) < 1e-3


def test_control_point_validation():
    with pytest.raises(ValueError):
        ControlPoints(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ControlPoints(np.full((5, 3), np.nan))


def test_gaussian_at_time():
    g = Gaussian(np.array([1.0, 2.0, 3.0]))
    assert gaussian_at_time(g, None, 4.2, 10) is g
    c = np.array([0.5, 0.5, 4.0])
    dyn = Gaussian(np.zeros(3), kind=Kind.DYNAMIC, logit_opacity=1.5)
    out = gaussian_at_time(dyn, ControlPoints(np.tile(c, (5, 1))), 0.5, 10)
    np.testing.assert_allclose(out.mean, c)
    assert out.logit_opacity == 1.5
    line = ControlPoints(np.arange(6)[:, None] * np.array([1.0, 0.0, 0.0]))
    mid = gaussian_at_time(dyn, line, 4.5, 10)
    np.testing.assert_allclose(mid.mean, [2.5, 0, 0], atol=1e-12)
    with pytest.raises(MissingControlPoints):
        gaussian_at_time(dyn, None, 1.0, 10)


def test_covariance_examples():
    np.testing.assert_allclose(covariance_3d(Gaussian(np.zeros(3), log_scale=np.log([1, 2, 3]))),
                               np.diag([1.0, 4.0, 9.0]), atol=1e-12)
    q = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    np.testing.assert_allclose(covariance_3d(Gaussian(np.zeros(3), q, np.log([1, 2, 1]))),
                               np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_eigenvalues(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        ls = rng.normal(size=3) * 0.5
        cov = covariance_3d(Gaussian(np.zeros(3), q / np.linalg.norm(q), ls))
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(np.exp(2 * ls)),
                                   atol=1e-9)


def test_quaternion_matches_scipy(rng):
    q = rng.normal(size=(10, 4))
    ours = quat_to_rotmat(q)
    theirs = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()  # scipy is scalar-last
    np.testing.assert_allclose(ours, theirs, atol=1e-12)


def test_quaternion_backward(rng):
    q = rng.normal(size=4)
    g = rng.normal(size=(3, 3))
    rep = check_gradient(lambda x: np.sum(g * quat_to_rotmat(x[None])[0]), q,
                         quat_to_rotmat_backward(q[None], g[None])[0], h=1e-6, tol=1e-7)
    assert rep.passed, str(rep)


def test_sigmoid_logit_roundtrip():
    p = np.linspace(0.01, 0.99, 50)
    np.testing.assert_allclose(sigmoid(logit(p)), p, atol=1e-14)
    assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0


def test_scene_requires_static_and_frames(rng):
    empty_static = GaussianArrays.empty()
    with pytest.raises(ValueError):
        SceneModel.create(ParamStore(), small_intrinsics(), 6, empty_static,
                          random_gaussians(rng, 2), np.zeros((2, 5, 3)))
    with pytest.raises(ValueError):
        SceneModel.create(ParamStore(), small_intrinsics(), 2, random_gaussians(rng, 2),
                          GaussianArrays.empty(), np.zeros((0, 5, 3)))


def test_scene_arrays_and_grad_routing(rng):
    scene = small_scene(rng)
    t = 2.7
    arr = scene.arrays_at_time(t)
    assert len(arr) == scene.n_static + scene.n_dynamic
    np.testing.assert_array_equal(arr.dynamic, [False] * 5 + [True] * 3)
    for (g, ctrl), mu in zip(scene.dynamic_gaussians(t), scene.dynamic_means(t)):
        np.testing.assert_allclose(spline_eval(ctrl, t, scene.n_frames), mu, atol=1e-12)

    # d/dctrl of sum(W * dynamic means) through accumulate_grads
    W = rng.normal(size=(3, 3))
    grads = GaussianArrays(np.vstack([np.zeros((5, 3)), W]), np.zeros((8, 4)), np.zeros((8, 3)),
                           np.zeros(8), np.zeros((8, 3)))
    gt = []
    scene.store.zero_grad()
    scene.accumulate_grads(t, grads, gt)
    ctrl = scene.store.view("dynamic.ctrl")

    def f(x):
        old = ctrl.copy()
        ctrl[...] = x.reshape(ctrl.shape)
        v = np.sum(W * scene.dynamic_means(t))
        ctrl[...] = old
        return v

    rep = check_gradient(f, ctrl.ravel().copy(), scene.store.grad("dynamic.ctrl").ravel(),
                         h=1e-6, tol=1e-5)
    assert rep.passed, str(rep)
    h = 1e-6
    num_t = (np.sum(W * scene.dynamic_means(t + h)) - np.sum(W * scene.dynamic_means(t - h))) / (2 * h)
    assert gt[0] == pytest.approx(num_t, rel=1e-6)


def test_project_constraints(rng):
    scene = small_scene(rng)
    scene.store.view("static.quats")[...] *= 3.0
    scene.store.view("dynamic.colors")[0] = [-0.2, 0.5, 1.4]
    scene.project_constraints()
    np.testing.assert_allclose(np.linalg.norm(scene.store.view("static.quats"), axis=1), 1.0)
    np.testing.assert_allclose(scene.store.view("dynamic.colors")[0], [0.0, 0.5, 1.0])
