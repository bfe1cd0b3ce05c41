import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deblur_splat.blur_field import BlurField, EncodingConfig
from deblur_splat.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from deblur_splat.errors import InvalidInputError, LoadError
from deblur_splat.gaussians import Camera
from deblur_splat.metrics import psnr
from deblur_splat.pointcloud import PointCloud
from deblur_splat.scene import (
    DefocusParams,
    SceneDataset,
    ToySceneConfig,
    generate_toy_scene,
    load_scene,
    save_scene,
    synth_defocus,
)

from conftest import random_cloud, simple_camera

TINY = ToySceneConfig(width=32, height=24, focal=28.0)


def two_camera_dataset(rng):
    cams = [
        Camera.look_at((x, 0.1, -3.0), (0, 0, 0), fx=20.123456789, fy=21.5, cx=8.25, cy=6.0, width=16, height=12,
                       name=f"cam{i}")
        for i, x in enumerate((-0.3, 0.4))
    ]
    imgs = [np.round(rng.uniform(0, 1, (12, 16, 3)) * 255) / 255 for _ in cams]
    pts = PointCloud(rng.normal(size=(10, 3)).astype(np.float32), rng.integers(0, 256, (10, 3)) / 255)
    return SceneDataset(cams, imgs, ["train", "test"], ["images/cam0.png", "images/cam1.png"], pts)


# -- load / save ------------------------------------------------------------------

def test_roundtrip_two_cameras(tmp_path, rng):
    ds = two_camera_dataset(rng)
    save_scene(ds, tmp_path)
    back = load_scene(tmp_path)
    assert len(back) == 2
    assert back.splits == ["train", "test"]
    for a, b in zip(ds.cameras, back.cameras):
        np.testing.assert_array_equal(a.world_to_camera, b.world_to_camera)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height, a.name) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height, b.name)
    for a, b in zip(ds.images, back.images):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.points.positions, ds.points.positions)


def test_missing_image_names_path(tmp_path, rng):
    save_scene(two_camera_dataset(rng), tmp_path)
    (tmp_path / "images" / "cam1.png").unlink()
    with pytest.raises(LoadError, match="cam1.png"):
        load_scene(tmp_path)


def test_size_mismatch_names_camera(tmp_path, rng):
    save_scene(two_camera_dataset(rng), tmp_path)
    doc = json.loads((tmp_path / "cameras.json").read_text())
    doc["cameras"][0]["width"] = 17
    (tmp_path / "cameras.json").write_text(json.dumps(doc))
    with pytest.raises(LoadError, match="cam0"):
        load_scene(tmp_path)


@pytest.mark.parametrize(
    "mutate, needle",
    [
        (lambda c: c.pop("fx"), "fx"),
        (lambda c: c.update(split="val"), "split"),
        (lambda c: c.update(R=[1, 0, 0]), "'R'"),
        (lambda c: c.update(R=[2, 0, 0, 0, 1, 0, 0, 0, 1]), "orthonormal"),
    ],
)
def test_schema_violations(tmp_path, rng, mutate, needle):
    save_scene(two_camera_dataset(rng), tmp_path)
    doc = json.loads((tmp_path / "cameras.json").read_text())
    mutate(doc["cameras"][1])
    (tmp_path / "cameras.json").write_text(json.dumps(doc))
    with pytest.raises(LoadError, match=needle):
        load_scene(tmp_path)


def test_missing_files(tmp_path):
    with pytest.raises(LoadError, match="cameras.json"):
        load_scene(tmp_path)
    (tmp_path / "cameras.json").write_text("{not json")
    with pytest.raises(LoadError, match="invalid JSON"):
        load_scene(tmp_path)


# -- synth_defocus ------------------------------------------------------------------

def test_zero_strength_is_identity(rng):
    img = rng.uniform(0, 1, (10, 12, 3))
    out = synth_defocus(img, rng.uniform(1, 9, (10, 12)), DefocusParams(blur_strength=0.0))
    np.testing.assert_allclose(out, img, atol=1e-15)


def test_in_focus_is_identity(rng):
    img = rng.uniform(0, 1, (10, 12, 3))
    out = synth_defocus(img, np.full((10, 12), 4.0), DefocusParams(focus_depth=4.0, blur_strength=50))
    np.testing.assert_allclose(out, img, atol=1e-15)


@settings(max_examples=15)
@given(st.floats(0, 1), st.floats(0, 60), st.integers(0, 2**31))
def test_constant_image_stays_constant(v, strength, seed):
    rng = np.random.default_rng(seed)
    img = np.full((9, 11, 3), v)
    out = synth_defocus(img, rng.uniform(1, 12, (9, 11)), DefocusParams(blur_strength=strength))
    np.testing.assert_allclose(out, v, atol=1e-12)


@pytest.mark.parametrize("ramp", [0.0, 5.0])
def test_energy_preserved_in_interior(rng, ramp):
    # content kept away from the border; depth constant or a smooth ramp
    img = np.zeros((48, 48, 3))
    img[16:32, 16:32] = rng.uniform(0, 1, (16, 16, 3))
    depth = 3.0 + ramp * np.mgrid[0:48, 0:48][1] / 47
    out = synth_defocus(img, depth, DefocusParams(focus_depth=4.0, blur_strength=8.0, max_sigma=3.0))
    assert abs(out.sum() - img.sum()) / img.sum() < 0.005


def test_defocus_input_errors(rng):
    img = rng.uniform(0, 1, (4, 4, 3))
    with pytest.raises(InvalidInputError):
        synth_defocus(img, np.zeros((4, 4)), DefocusParams())
    with pytest.raises(InvalidInputError):
        synth_defocus(img, np.ones((4, 5)), DefocusParams())
    with pytest.raises(InvalidInputError):
        DefocusParams(focus_depth=0.0)
    with pytest.raises(InvalidInputError):
        DefocusParams(blur_strength=-1.0)


def test_noise_is_seeded(rng):
    img = rng.uniform(0, 1, (6, 6, 3))
    p = DefocusParams(noise_std=0.05)
    a = synth_defocus(img, np.full((6, 6), 3.0), p, rng_seed=4)
    b = synth_defocus(img, np.full((6, 6), 3.0), p, rng_seed=4)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - img).max() > 0


# -- toy scene ------------------------------------------------------------------------

def test_toy_scene_deterministic(tmp_path):
    generate_toy_scene(tmp_path / "a", seed=3, n_gaussians=10, n_train=4, n_test=2, cfg=TINY)
    generate_toy_scene(tmp_path / "b", seed=3, n_gaussians=10, n_train=4, n_test=2, cfg=TINY)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_toy_scene_splits_and_sharp_tests(tmp_path):
    ds = generate_toy_scene(tmp_path, seed=1, n_gaussians=12, n_train=6, n_test=2,
                            params=DefocusParams(blur_strength=30.0), cfg=TINY)
    assert len(ds.indices("train")) == 6 and len(ds.indices("test")) == 2
    gt, _ = load_checkpoint(tmp_path / "ground_truth.ckpt")
    from deblur_splat.scene import render_depth, to_uint8

    for i in ds.indices("test"):
        sharp, _ = render_depth(gt, ds.cameras[i], TINY.background_depth)
        np.testing.assert_array_equal(ds.images[i], to_uint8(sharp) / 255.0)
    for i in ds.indices("train"):
        sharp, _ = render_depth(gt, ds.cameras[i], TINY.background_depth)
        assert psnr(ds.images[i], to_uint8(sharp) / 255.0) < 60


def test_toy_scene_undersamples_far_plane(tmp_path):
    from deblur_splat.pointcloud import relative_depth

    ds = generate_toy_scene(tmp_path, seed=2, n_gaussians=40, n_train=6, n_test=2, cfg=TINY)
    gt, _ = load_checkpoint(tmp_path / "ground_truth.ckpt")
    train = [ds.cameras[i] for i in ds.indices("train")]
    zr = relative_depth(gt.positions, train)
    near = np.sum(zr < 1 - TINY.far_fraction)
    far = len(gt) - near
    d = np.linalg.norm(ds.points.positions[:, None] - gt.positions[None], axis=-1).argmin(1)
    per_near = np.isin(d, np.nonzero(zr < 1 - TINY.far_fraction)[0]).sum() / near
    per_far = np.isin(d, np.nonzero(zr >= 1 - TINY.far_fraction)[0]).sum() / far
    assert per_far < per_near


def test_blur_calibration_floor(tmp_path):
    ds = generate_toy_scene(tmp_path, seed=0, n_gaussians=40, n_train=6, n_test=2,
                            params=DefocusParams(blur_strength=20.0, focus_range=(3.0, 10.0)))
    assert max(ds.extras["blur_info"]["blurred_psnr_train"]) < 35.0


def test_invalid_gaussian_count(tmp_path):
    with pytest.raises(InvalidInputError):
        generate_toy_scene(tmp_path, n_gaussians=0)


# -- checkpoint -----------------------------------------------------------------------

def test_checkpoint_roundtrip_is_float32_exact(rng, tmp_path):
    cloud = random_cloud(rng, 25, sh_degree=2)
    save_checkpoint(tmp_path / "c.ckpt", cloud)
    back, field = load_checkpoint(tmp_path / "c.ckpt")
    assert field is None
    r = cloud.rounded_to_float32()
    for name, arr in r.params().items():
        np.testing.assert_array_equal(getattr(back, name), arr)
    # a second trip is lossless
    assert encode_checkpoint(back) == encode_checkpoint(cloud)


def test_checkpoint_header_layout(rng):
    data = encode_checkpoint(random_cloud(rng, 3, sh_degree=1))
    assert data[:8] == b"DBSPLAT\x00"
    assert int.from_bytes(data[8:12], "little") == 1
    assert int.from_bytes(data[16:24], "little") == 3
    assert int.from_bytes(data[24:32], "little") == 1
    assert len(data) == 32 + 4 * 3 * (3 + 4 + 3 + 1 + 4 * 3)


def test_checkpoint_with_blur_field(rng, camera):
    cloud = random_cloud(rng, 6)
    field = BlurField.create(EncodingConfig(2, 3), [-1, -1, -1], [1, 1, 1], hidden=8, seed=1, output_scale=0.3)
    back, f2 = decode_checkpoint(encode_checkpoint(cloud, field))
    a = field.predict_offsets(back, camera)
    b = f2.predict_offsets(back, camera)
    np.testing.assert_allclose(a.delta_s, b.delta_s, atol=1e-5)
    assert f2.encoding.L_x == 2 and f2.encoding.L_v == 3


@pytest.mark.parametrize(
    "corrupt, needle",
    [
        (lambda d: b"XXXXXXXX" + d[8:], "magic"),
        (lambda d: d[:8] + (7).to_bytes(4, "little") + d[12:], "version"),
        (lambda d: d[:-3], "truncated"),
        (lambda d: d + b"JUNKJUNK" + (0).to_bytes(8, "little"), "section"),
    ],
)
def test_checkpoint_errors(rng, corrupt, needle):
    data = encode_checkpoint(random_cloud(rng, 3))
    with pytest.raises(LoadError, match=needle):
        decode_checkpoint(corrupt(data))


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "nope.ckpt")
