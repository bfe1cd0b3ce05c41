import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deblur_splat.errors import DegenerateCovarianceError, InvalidInputError
from deblur_splat.gaussians import (
    DILATION,
    SH_C0,
    Camera,
    GaussianCloud,
    covariance3d,
    eval_gaussian2d,
    eval_sh,
    normalize_quat,
    project_covariance,
    quat_to_rotmat,
)

from conftest import simple_camera
from oracles import quat_matrix

finite = st.floats(-10, 10, allow_nan=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
scales = arrays(np.float64, 3, elements=st.floats(1e-3, 5.0))


def axis_camera(fx=50.0, fy=40.0):
    return Camera(np.eye(4), fx=fx, fy=fy, cx=16, cy=16, width=32, height=32)


# -- covariance3d -------------------------------------------------------------

def test_identity_rotation_unit_scale():
    np.testing.assert_allclose(covariance3d([1, 0, 0, 0], [1, 1, 1]), np.eye(3), atol=1e-15)


def test_identity_rotation_is_diagonal_of_squares():
    np.testing.assert_allclose(covariance3d([1, 0, 0, 0], [2, 3, 0.5]), np.diag([4, 9, 0.25]), atol=1e-15)


def test_quarter_turn_about_z_swaps_axes():
    # oracle: explicit R S S^T R^T with R written out for 90 degrees about z
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    S = np.diag([2.0, 1, 1])
    expected = R @ S @ S.T @ R.T
    np.testing.assert_allclose(expected, np.diag([1.0, 4, 1]))
    q = [np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]
    np.testing.assert_allclose(covariance3d(q, [2, 1, 1]), expected, atol=1e-12)


def test_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        covariance3d([1, 0, 0, np.nan], [1, 1, 1])
    with pytest.raises(InvalidInputError):
        covariance3d([1, 0, 0, 0], [1, np.inf, 1])


@given(quats, scales)
def test_covariance_symmetric_psd(q, s):
    cov = covariance3d(q, s)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12 * max(1.0, s.max() ** 2)


def test_covariance_psd_thousand_samples():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(1000, 4))
    s = np.exp(rng.uniform(-3, 1, (1000, 3)))
    cov = covariance3d(q, s)
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-12)
    np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-14)


@given(quats, scales)
def test_covariance_rotation_consistent(q, s):
    R = quat_matrix(q)
    np.testing.assert_allclose(covariance3d(q, s), R @ covariance3d([1, 0, 0, 0], s) @ R.T, atol=1e-12)


@given(quats)
def test_rotation_matrix_matches_oracle(q):
    np.testing.assert_allclose(quat_to_rotmat(q), quat_matrix(q), atol=1e-12)


@given(quats)
def test_normalize_idempotent(q):
    n1 = normalize_quat(q)
    assert abs(np.linalg.norm(n1) - 1) < 1e-9
    np.testing.assert_allclose(normalize_quat(n1), n1, atol=1e-15)


# -- project_covariance ---------------------------------------------------------

def test_zero_covariance_gives_dilation():
    out = project_covariance(np.zeros((3, 3)), axis_camera(), [0.3, -0.2, 2.0])
    np.testing.assert_allclose(out, DILATION * np.eye(2), atol=1e-15)


def test_isotropic_on_axis():
    fx, fy, sigma, z = 50.0, 40.0, 0.2, 3.0
    out = project_covariance(sigma**2 * np.eye(3), axis_camera(fx, fy), [0, 0, z])
    expected = np.diag([(fx * sigma / z) ** 2, (fy * sigma / z) ** 2]) + DILATION * np.eye(2)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_doubling_depth_quarters_footprint():
    cam = axis_camera()
    a = project_covariance(0.04 * np.eye(3), cam, [0, 0, 2.0], dilation=0.0)
    b = project_covariance(0.04 * np.eye(3), cam, [0, 0, 4.0], dilation=0.0)
    np.testing.assert_allclose(np.diag(b), np.diag(a) / 4, rtol=1e-12)


def test_behind_camera_is_culled():
    assert project_covariance(np.eye(3), axis_camera(), [0, 0, -1.0]) is None
    assert project_covariance(np.eye(3), axis_camera(), [0, 0, 0.0]) is None


@given(quats, scales, st.floats(0.1, 10), arrays(np.float64, 2, elements=st.floats(-1, 1)))
def test_projection_congruence(q, s, k, xy):
    cam = simple_camera()
    cov = covariance3d(q, s)
    t = np.array([xy[0], xy[1], 3.0])
    base = project_covariance(cov, cam, t) - DILATION * np.eye(2)
    scaled = project_covariance(k * cov, cam, t) - DILATION * np.eye(2)
    np.testing.assert_allclose(scaled, k * base, atol=1e-12 * max(1.0, np.abs(k * base).max()))


# -- eval_gaussian2d ------------------------------------------------------------

def test_gaussian2d_examples():
    assert eval_gaussian2d(np.eye(2), [0, 0]) == 1.0
    assert eval_gaussian2d(np.eye(2), [1, 0]) == pytest.approx(0.6065306597, abs=1e-10)
    assert eval_gaussian2d(np.diag([4.0, 1.0]), [2, 0]) == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_gaussian2d_singular():
    with pytest.raises(DegenerateCovarianceError):
        eval_gaussian2d(np.array([[1.0, 1.0], [1.0, 1.0]]), [0, 0])


@given(
    arrays(np.float64, 2, elements=st.floats(0.1, 5)),
    st.floats(-0.9, 0.9),
    arrays(np.float64, 2, elements=st.floats(-6, 6)),
)
def test_gaussian2d_range(diag, rho, off):
    b = rho * np.sqrt(diag[0] * diag[1])
    cov = np.array([[diag[0], b], [b, diag[1]]])
    w = eval_gaussian2d(cov, off)
    assert 0.0 <= w <= 1.0
    if np.any(off != 0):
        assert w < 1.0 or np.abs(off).max() < 1e-7
    else:
        assert w == 1.0


# -- eval_sh -------------------------------------------------------------------

def test_sh_degree0():
    c = np.array([[0.3, -0.1, 1.0]])
    out = eval_sh(c, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(out, c[0] * 0.28209479 + 0.5, atol=1e-8)
    assert SH_C0 == pytest.approx(0.28209479, abs=1e-8)


def test_sh_zero_is_grey():
    np.testing.assert_allclose(eval_sh(np.zeros((9, 3)), np.array([0.6, 0.0, 0.8])), [0.5, 0.5, 0.5])


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_sh_degree1_dc_only_view_independent(v):
    sh = np.zeros((4, 3))
    sh[0] = [0.2, -0.4, 0.9]
    a = eval_sh(sh, v / np.linalg.norm(v))
    b = eval_sh(sh, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_sh_clamped_at_zero():
    sh = np.full((1, 3), -10.0)
    np.testing.assert_array_equal(eval_sh(sh, np.array([0.0, 0, 1])), np.zeros(3))


# -- containers ----------------------------------------------------------------

def test_camera_rejects_non_orthonormal():
    W = np.eye(4)
    W[0, 0] = 1.1
    with pytest.raises(InvalidInputError):
        Camera(W, fx=1, fy=1, cx=0, cy=0, width=4, height=4)


def test_camera_rejects_bad_planes_and_size():
    with pytest.raises(InvalidInputError):
        Camera(np.eye(4), fx=1, fy=1, cx=0, cy=0, width=4, height=4, near=2.0, far=1.0)
    with pytest.raises(InvalidInputError):
        Camera(np.eye(4), fx=1, fy=1, cx=0, cy=0, width=0, height=4)


def test_look_at_center_and_forward():
    cam = simple_camera(eye=(1.0, 2.0, -3.0), target=(0.0, 0.0, 0.0))
    np.testing.assert_allclose(cam.center, [1, 2, -3], atol=1e-12)
    np.testing.assert_allclose(cam.forward, -np.array([1, 2, -3]) / np.sqrt(14), atol=1e-12)
    np.testing.assert_allclose(cam.to_camera(np.zeros((1, 3)))[0, :2], 0, atol=1e-12)


def test_cloud_shape_validation():
    with pytest.raises(InvalidInputError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)), np.zeros(3), np.zeros((2, 1, 3)))
    with pytest.raises(InvalidInputError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)), np.zeros(2), np.zeros((2, 5, 3)))


def test_activations_in_range(rng):
    from conftest import random_cloud

    c = random_cloud(rng, 50)
    assert np.all(c.scales > 0)
    assert np.all((c.opacities > 0) & (c.opacities < 1))
    assert c.sh.shape[1] * 3 == 3 * (c.sh_degree + 1) ** 2
