import json

import numpy as np
import pytest

from deblurgs.blce import LatentTrajectory, blur_score
from deblurgs.blursynth import (SyntheticSceneSpec, oracle_blur, read_dataset, read_f32,
                                read_png, render_blurry, write_dataset, write_f32, write_png)
from deblurgs.geometry import Pose
from deblurgs.lcee import LatentTimestamps, latent_timestamps
from deblurgs.rasterizer import rasterize

from conftest import random_pose, small_scene

TINY = dict(width=24, height=24, focal=24.0, n_frames=4, oversample=16,
            wall_half_extent=2.5, wall_spacing=0.5)


def _latents(rng, n=9):
    poses = [random_pose(rng, 0.03, 0.05) for _ in range(n)]
    return LatentTrajectory(poses, [None] * n, 2)


def test_blurry_is_mean_of_independent_renders(rng):
    scene = small_scene(rng)
    traj = _latents(rng)
    taus = latent_timestamps(2, 0.8, 9)
    res = render_blurry(scene, 2, traj, taus)
    singles = [rasterize(scene.arrays_at_time(float(tau)), p, scene.intrinsics).image
               for tau, p in zip(taus.taus, traj.poses)]
    np.testing.assert_allclose(res.blurry.color, sum(s.color for s in singles) / 9, atol=1e-12)
    np.testing.assert_allclose(res.blurry.depth, sum(s.depth for s in singles) / 9, atol=1e-12)
    np.testing.assert_allclose(res.blurry.color.mean(axis=(0, 1)),
                               np.mean([s.color.mean(axis=(0, 1)) for s in singles], axis=0),
                               atol=1e-14)


def test_identical_latents_give_single_render(rng):
    scene = small_scene(rng)
    pose = random_pose(rng, 0.03, 0.05)
    traj = LatentTrajectory([pose] * 9, [None] * 9, 1)
    res = render_blurry(scene, 1, traj, latent_timestamps(1, 0.0, 9))
    single = rasterize(scene.arrays_at_time(1.0), pose, scene.intrinsics).image
    np.testing.assert_allclose(res.blurry.color, single.color, atol=1e-15)


def test_length_mismatch(rng):
    scene = small_scene(rng)
    with pytest.raises(ValueError):
        render_blurry(scene, 0, _latents(rng, 3), latent_timestamps(0, 0.5, 4))


def test_zero_exposure_copies_sharp():
    fr = oracle_blur(SyntheticSceneSpec(**TINY, exposures=[0.0]), 1)
    np.testing.assert_array_equal(fr.blurry, fr.sharp)
    np.testing.assert_array_equal(fr.depth, fr.sharp_depth)


def test_oracle_is_midpoint_average():
    spec = SyntheticSceneSpec(**TINY, exposures=[0.5])
    fr = oracle_blur(spec, 2)
    times = 2 - 0.25 + 0.5 * (np.arange(16) + 0.5) / 16
    ref = np.mean([spec.render_sharp(s).color for s in times], axis=0)
    np.testing.assert_allclose(fr.blurry, ref, atol=1e-12)
    np.testing.assert_array_equal(fr.sharp, spec.render_sharp(2).color)
    assert fr.mask.any()


def test_oracle_converges_with_oversampling():
    spec = SyntheticSceneSpec(**{**TINY, "oversample": 64}, exposures=[0.6])
    a = oracle_blur(spec, 1, 64).blurry
    b = oracle_blur(spec, 1, 128).blurry
    assert np.max(np.abs(a - b)) < 1e-3


def test_static_camera_blur_only_near_object():
    spec = SyntheticSceneSpec(**TINY, exposures=[0.8], shake_amplitude=0.0, drift=0.0)
    fr = oracle_blur(spec, 1)
    moving = np.zeros(fr.mask.shape, bool)
    for s in np.linspace(0.6, 1.4, 9):
        moving |= spec.render_sharp(s).dynamic_alpha > 1e-3
    assert moving.any() and not moving.all()
    np.testing.assert_allclose(fr.blurry[~moving], fr.sharp[~moving], atol=1e-6)


def test_blurry_frame_scores_higher():
    spec = SyntheticSceneSpec(exposures=[0.8], oversample=16, n_frames=4)
    fr = oracle_blur(spec, 1)
    assert blur_score(fr.blurry).beta > blur_score(fr.sharp).beta


def test_f32_roundtrip(tmp_path, rng):
    img = rng.uniform(size=(5, 7, 3)).astype(np.float32)
    write_f32(tmp_path / "a.f32", img)
    np.testing.assert_array_equal(read_f32(tmp_path / "a.f32"), img)
    raw = (tmp_path / "a.f32").read_bytes()
    assert raw[:8] == (7).to_bytes(4, "little") + (5).to_bytes(4, "little")
    depth = rng.uniform(size=(4, 6)).astype(np.float32)
    write_f32(tmp_path / "d.f32", depth)
    assert read_f32(tmp_path / "d.f32").shape == (4, 6)


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (6, 5, 3)) / 255.0
    write_png(tmp_path / "a.png", img)
    np.testing.assert_allclose(read_png(tmp_path / "a.png"), img, atol=1e-12)


def test_dataset_roundtrip(tmp_path):
    spec = SyntheticSceneSpec(**TINY, exposures=[0.3, 0.8])
    root = write_dataset(spec, tmp_path / "ds")
    ds = read_dataset(root)
    man = json.loads((root / "manifest.json").read_text())
    assert len(man["poses"]) == ds.n_frames == 4
    assert ds.exposures == [0.3, 0.8, 0.3, 0.8]
    assert ds.scene == spec
    for t in range(4):
        fr = oracle_blur(spec, t)
        np.testing.assert_array_equal(ds.blurry[t], fr.blurry.astype(np.float32))
        np.testing.assert_array_equal(ds.depth[t], fr.depth.astype(np.float32))
        np.testing.assert_array_equal(ds.masks[t], fr.mask)
        np.testing.assert_allclose(ds.poses[t].matrix, spec.camera_pose(t).matrix, atol=1e-15)
    again = write_dataset(spec, tmp_path / "ds2")
    for name in sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file()):
        assert (root / name).read_bytes() == (again / name).read_bytes(), name


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        SyntheticSceneSpec(exposures=[-0.1])
    with pytest.raises(ValueError):
        SyntheticSceneSpec(oversample=8)
    with pytest.raises(ValueError):
        SyntheticSceneSpec.from_dict({"bogus": 1})
    (tmp_path / "s.json").write_text(json.dumps({"n_frames": 5, "exposures": 0.4}))
    spec = SyntheticSceneSpec.load(tmp_path / "s.json")
    assert spec.n_frames == 5 and spec.exposure(3) == 0.4
