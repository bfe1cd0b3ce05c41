import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deblur_splat.blur_field import BlurField, EncodingConfig
from deblur_splat.errors import ContractViolation
from deblur_splat.gaussians import GaussianCloud
from deblur_splat.rasterizer import (
    Overrides,
    RasterConfig,
    Splats,
    backprop_projection,
    project_cloud,
    rasterize_backward,
    rasterize_forward,
    render,
)

import gradcheck
from conftest import random_cloud, simple_camera
from oracles import composite_naive

NO_STOP = RasterConfig(t_stop=0.0)


def make_splats(means, covs, colors, opacities, depths):
    means = np.asarray(means, float).reshape(-1, 2)
    covs = np.asarray(covs, float).reshape(-1, 2, 2)
    A, B, C = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = A * C - B * B
    n = len(means)
    return Splats(
        means2d=means,
        cov2d=covs,
        conics=np.stack([C / det, -B / det, A / det], 1),
        extents=3.0 * np.sqrt(np.stack([A, C], 1)) + 1e-9,
        depths=np.asarray(depths, float),
        colors=np.asarray(colors, float).reshape(-1, 3),
        opacities=np.asarray(opacities, float),
        source_index=np.arange(n),
        n_source=n,
    )


def random_splats(rng, n, width, height):
    means = rng.uniform(-4, [width + 4, height + 4], (n, 2))
    L = rng.normal(0, 1, (n, 2, 2)) * rng.uniform(0.5, 4, (n, 1, 1))
    covs = L @ np.swapaxes(L, 1, 2) + 0.3 * np.eye(2)
    return make_splats(
        means, covs, rng.uniform(0, 1, (n, 3)), rng.uniform(0.05, 1.0, n), rng.uniform(1, 10, n)
    )


def oracle_for(splats, cam, bg):
    return composite_naive(
        splats.means2d, splats.cov2d, splats.colors, splats.opacities, splats.depths, cam.width, cam.height, bg
    )


# -- project_cloud -------------------------------------------------------------

def test_all_behind_camera_is_empty(rng):
    cloud = random_cloud(rng, 20)
    cloud.positions[:, 2] = -10 - np.abs(cloud.positions[:, 2])
    cam = simple_camera(eye=(0, 0, 0), target=(0, 0, 1))
    assert len(project_cloud(cloud, cam)) == 0


def test_identity_overrides_match_plain(rng, camera):
    cloud = random_cloud(rng, 30)
    a = project_cloud(cloud, camera)
    b = project_cloud(cloud, camera, Overrides(cloud.rotations.copy(), np.exp(cloud.log_scales)))
    for name in ("means2d", "cov2d", "depths", "colors", "opacities", "source_index"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_on_axis_projects_to_principal_point():
    cam = simple_camera(width=40, height=30, eye=(0, 0, -5), target=(0, 0, 0))
    cloud = GaussianCloud([[0, 0, 0]], [[1, 0, 0, 0]], [[-2, -2, -2]], [0.0], np.zeros((1, 1, 3)))
    s = project_cloud(cloud, cam)
    np.testing.assert_allclose(s.means2d[0], [cam.cx, cam.cy], atol=1e-12)
    assert s.depths[0] == pytest.approx(5.0)


def test_guard_band_and_far_plane_cull(camera):
    cloud = GaussianCloud(
        [[100.0, 0, 0], [0, 0, 2000.0], [0, 0, 0]], np.tile([1.0, 0, 0, 0], (3, 1)),
        np.full((3, 3), -2.0), np.zeros(3), np.zeros((3, 1, 3)),
    )
    s = project_cloud(cloud, camera)
    np.testing.assert_array_equal(s.source_index, [2])


# -- rasterize_forward ---------------------------------------------------------

def test_single_saturated_splat():
    cam = simple_camera(width=16, height=16)
    s = make_splats([[8.5, 8.5]], [np.eye(2)], [[0.2, 0.4, 0.8]], [1.0], [1.0])
    out = rasterize_forward(s, cam, np.zeros(3))
    np.testing.assert_allclose(out.image[8, 8], 0.99 * np.array([0.2, 0.4, 0.8]), atol=1e-15)


def test_two_half_alpha_splats():
    cam = simple_camera(width=16, height=16)
    c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
    s = make_splats([[4.5, 4.5], [4.5, 4.5]], [np.eye(2)] * 2, [c2, c1], [0.5, 0.5], [2.0, 1.0])
    out = rasterize_forward(s, cam, bg)
    np.testing.assert_allclose(out.image[4, 4], 0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-15)
    assert out.final_transmittance[4, 4] == pytest.approx(0.25)
    assert out.contributor_count[4, 4] == 2


def test_fifty_splat_scene_matches_oracle():
    rng = np.random.default_rng(7)
    cam = simple_camera(width=32, height=32)
    bg = np.array([0.1, 0.3, 0.2])
    s = random_splats(rng, 50, 32, 32)
    img, final_t, _ = oracle_for(s, cam, bg)
    out = rasterize_forward(s, cam, bg, NO_STOP)
    assert np.abs(out.image - img).max() <= 1e-6
    assert np.abs(out.final_transmittance - final_t).max() <= 1e-6


@settings(max_examples=8)
@given(st.integers(0, 2**31), st.integers(1, 200), st.integers(1, 32), st.integers(1, 32))
def test_tiled_equals_oracle(seed, n, w, h):
    rng = np.random.default_rng(seed)
    cam = simple_camera(width=w, height=h)
    bg = rng.uniform(0, 1, 3)
    s = random_splats(rng, n, w, h)
    img, _, _ = oracle_for(s, cam, bg)
    out = rasterize_forward(s, cam, bg, NO_STOP)
    assert np.abs(out.image - img).max() <= 1e-6


def test_early_stop_error_bounded_by_threshold():
    rng = np.random.default_rng(3)
    cam = simple_camera(width=32, height=32)
    s = random_splats(rng, 200, 32, 32)
    s.opacities[:] = 0.99
    img, _, _ = oracle_for(s, cam, np.zeros(3))
    out = rasterize_forward(s, cam, np.zeros(3))
    stopped = out.final_transmittance < 1e-4
    assert stopped.any()
    assert np.abs(out.image - img).max() <= 1e-4


@settings(max_examples=15)
@given(st.integers(0, 2**31), st.integers(1, 120))
def test_conservation(seed, n):
    rng = np.random.default_rng(seed)
    cam = simple_camera(width=24, height=20)
    s = random_splats(rng, n, 24, 20)
    # white splats on black: the image is the accumulated weight
    s.colors[:] = 1.0
    out = rasterize_forward(s, cam, np.zeros(3), NO_STOP)
    np.testing.assert_allclose(out.final_transmittance + out.image[..., 0], 1.0, atol=1e-6)
    assert np.all((out.final_transmittance >= 0) & (out.final_transmittance <= 1))


@settings(max_examples=15)
@given(st.integers(0, 2**31))
def test_equal_depth_order_uses_source_index(seed):
    rng = np.random.default_rng(seed)
    cam = simple_camera(width=20, height=20)
    s = random_splats(rng, 30, 20, 20)
    s.depths[:] = 5.0
    s.opacities = np.minimum(s.opacities, 0.9)
    a = rasterize_forward(s, cam, np.zeros(3))
    # permuting the rows (each keeps its source index) must not change a bit
    perm = rng.permutation(30)
    p = make_splats(s.means2d[perm], s.cov2d[perm], s.colors[perm], s.opacities[perm], s.depths[perm])
    p.source_index = s.source_index[perm]
    b = rasterize_forward(p, cam, np.zeros(3))
    np.testing.assert_array_equal(a.image, b.image)


def test_permuting_cloud_keeps_image(rng, camera):
    cloud = random_cloud(rng, 40)
    perm = rng.permutation(40)
    a = render(cloud, camera)
    b = render(cloud.subset(perm), camera)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_thread_count_does_not_change_output(rng, camera):
    import numba

    cloud = random_cloud(rng, 60)
    before = numba.get_num_threads()
    a = render(cloud, camera)
    numba.set_num_threads(1)
    try:
        b = render(cloud, camera)
    finally:
        numba.set_num_threads(before)
    np.testing.assert_array_equal(a, b)


# -- backward -------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients(rng, camera):
    cloud = random_cloud(rng, 20)
    from deblur_splat.rasterizer import render_with_state

    s, out = render_with_state(cloud, camera)
    sg = rasterize_backward(out, s, np.zeros_like(out.image))
    cg = backprop_projection(s, sg, cloud)
    for arr in cg.as_dict().values():
        assert not np.any(arr)


def test_single_splat_color_gradient_is_alpha():
    cam = simple_camera(width=16, height=16)
    s = make_splats([[8.5, 8.5]], [np.eye(2)], [[0.2, 0.4, 0.8]], [0.6], [1.0])
    out = rasterize_forward(s, cam, np.zeros(3))
    up = np.zeros_like(out.image)
    up[8, 8] = 1.0
    g = rasterize_backward(out, s, up)
    np.testing.assert_allclose(g.colors[0], 0.6, atol=1e-15)


def test_backward_rejects_foreign_state(rng, camera):
    cloud = random_cloud(rng, 10)
    s1 = project_cloud(cloud, camera)
    s2 = project_cloud(cloud, camera)
    out = rasterize_forward(s1, camera)
    with pytest.raises(ContractViolation):
        rasterize_backward(out, s2, np.zeros_like(out.image))
    with pytest.raises(ContractViolation):
        rasterize_backward(out, s1, np.zeros((2, 2, 3)))


def test_backward_is_bitwise_reproducible(rng, camera):
    cloud = random_cloud(rng, 80)
    from deblur_splat.rasterizer import render_with_state

    up = rng.normal(size=(camera.height, camera.width, 3))
    runs = []
    for _ in range(2):
        s, out = render_with_state(cloud, camera)
        runs.append(backprop_projection(s, rasterize_backward(out, s, up), cloud))
    for name in gradcheck.CLOUD_GROUPS:
        np.testing.assert_array_equal(getattr(runs[0], name), getattr(runs[1], name))


@pytest.mark.parametrize("seed", [0, 1])
def test_cloud_gradients_match_finite_differences(seed):
    cloud, cam, weights = gradcheck.small_scene(seed, sh_degree=2)
    errors = gradcheck.check_all(cloud, cam, weights)
    assert max(errors.values()) <= 1e-4, errors


# -- render ---------------------------------------------------------------------

def test_render_with_all_ones_field_equals_plain(rng, camera):
    cloud = random_cloud(rng, 25)
    field = BlurField.create(EncodingConfig(), zero=True)
    np.testing.assert_array_equal(render(cloud, camera), render(cloud, camera, field))


def test_empty_cloud_renders_background(camera):
    img = render(GaussianCloud.empty(1), camera, background=np.array([0.2, 0.5, 0.7]))
    np.testing.assert_array_equal(img, np.broadcast_to([0.2, 0.5, 0.7], img.shape))
