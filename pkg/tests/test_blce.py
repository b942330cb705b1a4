from types import SimpleNamespace

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.ndimage import gaussian_filter

from deblurgs.blce import (BlceConfig, BlurFeature, BlurScore, ImageSmallerThanCrop,
                           LatentCameraNet, LatentMode, blur_score, bound_axis,
                           bound_axis_backward, decode_latent_poses, integrate_latents,
                           latent_times, low_frequency_window)
from deblurgs.geometry import Pose, ScrewAxis, compose, pose_inverse, screw_exp
from deblurgs.grad import ParamStore, check_gradient, finite_diff_check

from conftest import random_pose

SMALL = BlceConfig(n_latent=5, feature_dim=4, latent_dim=6, feature_hidden=(8,),
                   encoder_hidden=(8,), field_hidden=(10,), decoder_hidden=(8,))


def naive_dft2(img):
    """Direct double sum, no FFT."""
    h, w = img.shape
    fy = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    out = np.zeros((h, w), complex)
    for u in range(h):
        for v in range(w):
            out[u, v] = np.sum(img * fy[u][:, None] * fx[v][None, :])
    return out


def naive_beta(lum, s):
    mag = np.abs(naive_dft2(lum))
    h, w = lum.shape
    # DC moves to (h//2, w//2) after centering; the window is the s-by-s block around it
    shifted = np.roll(mag, (h // 2, w // 2), axis=(0, 1))
    r0, c0 = h // 2 - s // 2, w // 2 - s // 2
    return shifted[r0:r0 + s, c0:c0 + s].sum() / mag.sum()


def textured(rng, size=64):
    img = gaussian_filter(rng.uniform(size=(size, size, 3)), (1.0, 1.0, 0))
    yy, xx = np.mgrid[0:size, 0:size] / size
    return np.clip(img + 0.3 * ((np.floor(xx * 8) + np.floor(yy * 8)) % 2)[..., None], 0, 1)


def test_constant_image_beta_is_one():
    assert blur_score(np.full((32, 32, 3), 0.4), 20).beta == pytest.approx(1.0, abs=1e-12)


def test_impulse_beta():
    img = np.zeros((64, 64))
    img[10, 37] = 1.0
    assert blur_score(img, 20).beta == pytest.approx(400 / 4096, abs=1e-6)


def test_matches_naive_dft(rng):
    for shape, s in (((12, 12), 4), ((11, 14), 5), ((9, 8), 3)):
        lum = rng.uniform(size=shape)
        assert blur_score(lum, s).beta == pytest.approx(naive_beta(lum, s), abs=1e-12)


def test_window_contains_dc():
    for h, w in ((64, 64), (63, 65), (20, 21)):
        rows, cols = low_frequency_window((h, w), 20)
        assert rows.start <= h // 2 < rows.stop and cols.start <= w // 2 < cols.stop
        assert rows.stop - rows.start == 20 and cols.stop - cols.start == 20


def test_blur_raises_beta(rng):
    img = textured(rng)
    assert blur_score(gaussian_filter(img, (2, 2, 0))).beta > blur_score(img).beta


def test_small_image_rejected():
    with pytest.raises(ImageSmallerThanCrop):
        blur_score(np.zeros((19, 40, 3)), 20)


def test_bound_axis(rng):
    raw = rng.normal(size=(50, 6)) * 5
    out = bound_axis(raw, 1.0)
    assert np.all(np.linalg.norm(out, axis=1) <= 1.0)
    # direction is kept
    np.testing.assert_allclose(out / np.linalg.norm(out, axis=1, keepdims=True),
                               raw / np.linalg.norm(raw, axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(bound_axis(np.full((1, 6), 1e-6), 1.0), np.full((1, 6), 1e-6),
                               rtol=1e-10)
    np.testing.assert_array_equal(bound_axis(np.zeros((2, 6)), 0.5), 0.0)


@pytest.mark.parametrize("scale", [1e-5, 1e-3, 0.1, 1.0, 4.0])
def test_bound_axis_backward(rng, scale):
    raw = rng.normal(size=(3, 6)) * scale
    g = rng.normal(size=(3, 6))
    rep = check_gradient(lambda x: np.sum(g * bound_axis(x.reshape(3, 6), 0.7)), raw.ravel().copy(),
                         bound_axis_backward(raw, 0.7, g), h=1e-7 * max(scale, 1e-2), tol=1e-6)
    assert rep.passed, str(rep)


def test_latent_times():
    np.testing.assert_allclose(latent_times(5), [0, 0.25, 0.5, 0.75, 1])
    np.testing.assert_array_equal(latent_times(1), [0.0])


def _net(mode=LatentMode.BLUR_ADAPTIVE, config=SMALL, seed=0):
    store = ParamStore()
    cfg = BlceConfig(**{**config.__dict__, "mode": mode})
    return LatentCameraNet(store, cfg, np.random.default_rng(seed), n_frames=4)


def test_zero_feature_network():
    net = _net()
    net.store.view("blce.feature")[...] = 0.0
    phi = net.blur_feature(BlurScore(0.37))[0].phi
    np.testing.assert_array_equal(phi, 0.0)


def test_equal_beta_equal_feature():
    net = _net()
    a = net.blur_feature(BlurScore(0.5, 0))[0].phi
    b = net.blur_feature(BlurScore(0.5, 3))[0].phi
    np.testing.assert_array_equal(a, b)


def test_zero_field_keeps_state(rng):
    net = _net()
    net.store.view("blce.field")[...] = 0.0
    states = integrate_latents(random_pose(rng), BlurFeature(rng.normal(size=4)), net)
    for s in states[1:]:
        np.testing.assert_array_equal(s.z, states[0].z)


def test_constant_field(rng):
    net = _net()
    spec = net.field_spec
    params = np.zeros(spec.n_params)
    c = rng.normal(size=6)
    params[-6:] = c  # only the output bias
    net.store.view("blce.field")[...] = params
    z0 = rng.normal(size=6)
    states, _ = net.integrate_latents(z0, BlurFeature(np.zeros(4)))
    for s in states:
        np.testing.assert_allclose(s.z, z0 + c * s.u, atol=1e-12)


def linear_field_params(net, A):
    """ReLU layers that realise z -> A z: hidden (A z, -A z), output p - q."""
    d = A.shape[0]
    n_in = net.field_spec.n_in
    w1 = np.zeros((n_in, 2 * d))
    w1[:d, :d] = A.T
    w1[:d, d:] = -A.T
    w2 = np.vstack([np.eye(d), -np.eye(d)])
    return np.concatenate([w1.ravel(), np.zeros(2 * d), w2.ravel(), np.zeros(d)])


def _linear_net(substeps, n_latent=3):
    cfg = BlceConfig(**{**SMALL.__dict__, "field_hidden": (12,), "substeps": substeps,
                        "n_latent": n_latent})
    return LatentCameraNet(ParamStore(), cfg, np.random.default_rng(0))


def test_linear_field_matches_matrix_exponential(rng):
    A = rng.normal(size=(6, 6))
    A *= 0.9 / np.linalg.norm(A, 2)
    z0 = rng.normal(size=6)
    net = _linear_net(4, n_latent=9)
    net.store.view("blce.field")[...] = linear_field_params(net, A)
    for s in net.integrate_latents(z0, BlurFeature(np.zeros(4)))[0]:
        np.testing.assert_allclose(s.z, expm(A * s.u) @ z0, atol=1e-6)


def test_rk4_order(rng):
    A = rng.normal(size=(6, 6))
    A *= 2.0 / np.linalg.norm(A, 2)
    z0 = rng.normal(size=6)
    exact = expm(A) @ z0
    errs = []
    for sub in (1, 2, 4):
        net = _linear_net(sub)
        net.store.view("blce.field")[...] = linear_field_params(net, A)
        errs.append(np.linalg.norm(net.integrate_latents(z0, BlurFeature(np.zeros(4)))[0][-1].z - exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.5), orders


def test_zero_decoder_gives_frame_pose(rng):
    net = _net()  # decoder output layer starts at zero
    pose = random_pose(rng)
    traj = net.forward(pose, BlurScore(0.3, 1)).trajectory
    assert len(traj) == SMALL.n_latent and traj.frame_index == 1
    for p in traj.poses:
        np.testing.assert_allclose(p.matrix, pose.matrix, atol=1e-15)


def test_latent_poses_bounded(rng):
    net = _net()
    net.store.view("blce.decoder")[...] = rng.normal(size=net.store.shape("blce.decoder")) * 10
    pose = random_pose(rng)
    traj = net.forward(pose, BlurScore(0.3)).trajectory
    for p, s in zip(traj.poses, traj.screw_axes):
        assert p.is_valid(1e-9)
        assert np.linalg.norm(s.as_vector()) <= SMALL.max_axis
        np.testing.assert_allclose(compose(pose_inverse(pose), p).matrix,
                                   screw_exp(s).matrix, atol=1e-12)


def test_trajectory_deterministic(rng):
    pose = random_pose(rng)
    a = _net(seed=3).forward(pose, BlurScore(0.4)).trajectory
    b = _net(seed=3).forward(pose, BlurScore(0.4)).trajectory
    for p, q in zip(a.poses, b.poses):
        np.testing.assert_array_equal(p.matrix, q.matrix)


def test_module_functions_agree(rng):
    net = _net()
    net.store.view("blce.decoder")[...] = rng.normal(size=net.store.shape("blce.decoder")) * 0.3
    pose = random_pose(rng)
    score = BlurScore(0.6, 2)
    whole = net.forward(pose, score).trajectory
    phi = net.blur_feature(score)[0]
    parts = decode_latent_poses(integrate_latents(pose, phi, net), pose, net, 2)
    for p, q in zip(whole.poses, parts.poses):
        np.testing.assert_array_equal(p.matrix, q.matrix)


def projection_loss(traj, points, weights, fx=20.0, cx=8.0):
    """Sum of weighted pixel coordinates of points seen by every latent camera."""
    total = 0.0
    for p, w in zip(traj.poses, weights):
        cam = (points - p.translation) @ p.rotation
        px = fx * cam[:, :2] / cam[:, 2:3] + cx
        total += np.sum(w * px)
    return total


def projection_pose_grads(traj, points, weights, fx=20.0):
    """Hand-derived d(loss)/d(R, t) of each camera-to-world latent pose."""
    out = []
    for p, w in zip(traj.poses, weights):
        rel = points - p.translation
        cam = rel @ p.rotation
        X, Y, Z = cam.T
        g = np.stack([w[:, 0] * fx / Z, w[:, 1] * fx / Z,
                      -(w[:, 0] * fx * X + w[:, 1] * fx * Y) / Z**2], axis=1)
        out.append(SimpleNamespace(rotation=rel.T @ g, translation=-p.rotation @ g.sum(axis=0)))
    return out


@pytest.mark.parametrize("mode", list(LatentMode))
def test_full_chain_gradient(rng, mode):
    net = _net(mode)
    store = net.store
    store.values[:] += rng.normal(size=store.values.size) * 0.05
    frame = textured(rng, 24)
    score = blur_score(frame, 8, frame_index=2)
    pose = random_pose(rng, 0.1, 0.1)
    points = np.column_stack([rng.uniform(-0.5, 0.5, (4, 2)), rng.uniform(3, 5, 4)])
    points = points @ pose.rotation.T + pose.translation
    weights = rng.normal(size=(SMALL.n_latent, 4, 2))

    store.zero_grad()
    tp = net.forward(pose, score)
    net.backward(tp, projection_pose_grads(tp.trajectory, points, weights))
    rep = finite_diff_check(lambda s: projection_loss(net.forward(pose, score).trajectory,
                                                      points, weights), store, h=1e-5, tol=1e-3)
    assert rep.passed, str(rep)


def test_spline_mode_interpolates_end_axes(rng):
    net = _net(LatentMode.SPLINE)
    ends = rng.normal(size=(2, 6)) * 0.1
    net.store.view("blce.spline_axes")[1] = ends
    raw = net.forward(Pose.identity(), BlurScore(0.5, 1)).raw_axes
    np.testing.assert_allclose(raw[0], ends[0])
    np.testing.assert_allclose(raw[-1], ends[1])
    np.testing.assert_allclose(raw[2], ends.mean(axis=0))
