"""Gaussian primitives: covariance construction, EWA projection, SH color.

Quaternions are stored as (w, x, y, z). All batched functions broadcast over
leading axes, so a single Gaussian is just a batch of shape ().
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCovarianceError, InvalidInputError

# Low-pass filter added to the diagonal of every projected covariance (px^2).
DILATION = 0.3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 3


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_coeffs(k: int) -> int:
    d = int(round(np.sqrt(k))) - 1
    if (d + 1) ** 2 != k or not 0 <= d <= MAX_SH_DEGREE:
        raise InvalidInputError(f"{k} SH coefficients do not form a degree 0-3 basis")
    return d


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(p):
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# quaternions


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InvalidInputError("cannot normalize a zero quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of the normalized quaternion ``q`` (any nonzero norm)."""
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_vjp(q: np.ndarray, dL_dR: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q/|q|) back to the raw (un-normalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    G = dL_dR
    g = lambda i, j: G[..., i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (
        y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
        + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2)
    )
    dy = 2 * (
        -2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
        - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2)
    )
    dz = 2 * (
        -2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
        + y * g(1, 2) + x * g(2, 0) + y * g(2, 1)
    )
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # normalization Jacobian (I - qn qn^T) / |q|
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# covariance


def covariance3d(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """World-space covariance R S S^T R^T from a quaternion and positive axis scales."""
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise InvalidInputError("covariance3d received non-finite input")
    if np.any(scale <= 0):
        raise InvalidInputError("scale components must be positive")
    M = quat_to_rotmat(rotation) * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def perspective_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """First-order Jacobian of the pinhole projection at camera-space point ``t``."""
    t = np.asarray(t, dtype=np.float64)
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    J = np.zeros(t.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / tz
    J[..., 0, 2] = -fx * tx / (tz * tz)
    J[..., 1, 1] = fy / tz
    J[..., 1, 2] = -fy * ty / (tz * tz)
    return J


def project_covariance(
    cov3d: np.ndarray,
    camera: "Camera",
    mean_camera: np.ndarray,
    dilation: float = DILATION,
) -> np.ndarray | None:
    """Screen-space covariance J W Sigma W^T J^T plus the low-pass dilation.

    Returns ``None`` (cull signal) for a mean at or behind the camera plane.
    """
    mean_camera = np.asarray(mean_camera, dtype=np.float64)
    if np.any(mean_camera[..., 2] <= 0):
        return None
    T = perspective_jacobian(mean_camera, camera.fx, camera.fy) @ camera.R
    cov2d = T @ np.asarray(cov3d, dtype=np.float64) @ np.swapaxes(T, -1, -2)
    return cov2d + dilation * np.eye(2)


def eval_gaussian2d(cov2d: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Unnormalized 2D Gaussian weight exp(-0.5 d^T cov^-1 d)."""
    cov2d = np.asarray(cov2d, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    det = a * c - b * b
    if np.any(~(det > 1e-300)):
        raise DegenerateCovarianceError("2D covariance is singular or not positive definite")
    dx, dy = offset[..., 0], offset[..., 1]
    maha = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det
    return np.exp(-0.5 * maha)


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, shape (..., (degree+1)^2)."""
    x, y, z = np.moveaxis(np.asarray(dirs, dtype=np.float64), -1, 0)
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction components), shape (..., (degree+1)^2, 3)."""
    x, y, z = np.moveaxis(np.asarray(dirs, dtype=np.float64), -1, 0)
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        k = SH_C2
        rows += [
            (k[0] * y, k[0] * x, zero),
            (zero, k[1] * z, k[1] * y),
            (-2 * k[2] * x, -2 * k[2] * y, 4 * k[2] * z),
            (k[3] * z, zero, k[3] * x),
            (2 * k[4] * x, -2 * k[4] * y, zero),
        ]
    if degree >= 3:
        k = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (6 * k[0] * x * y, k[0] * (3 * xx - 3 * yy), zero),
            (k[1] * y * z, k[1] * x * z, k[1] * x * y),
            (-2 * k[2] * x * y, k[2] * (4 * zz - xx - 3 * yy), 8 * k[2] * y * z),
            (-6 * k[3] * x * z, -6 * k[3] * y * z, k[3] * (6 * zz - 3 * xx - 3 * yy)),
            (k[4] * (4 * zz - 3 * xx - yy), -2 * k[4] * x * y, 8 * k[4] * x * z),
            (2 * k[5] * x * z, -2 * k[5] * y * z, k[5] * (xx - yy)),
            (k[6] * (3 * xx - 3 * yy), -6 * k[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """RGB from SH coefficients ``sh`` of shape (..., K, 3).

    Uses the splatting convention ``max(sum_k sh_k Y_k(v) + 0.5, 0)``.
    """
    sh = np.asarray(sh, dtype=np.float64)
    v = np.asarray(view_dir, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    v = np.where(n > 0, v / np.where(n > 0, n, 1.0), np.array([0.0, 0.0, 1.0]))
    degree = sh_degree_from_coeffs(sh.shape[-2])
    basis = sh_basis(v, degree)
    rgb = np.einsum("...k,...kc->...c", basis, sh) + 0.5
    return np.maximum(rgb, 0.0)


def rgb_to_sh0(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# containers


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Pixel (row i, col j) is sampled at image coordinates (j + 0.5, i + 0.5).
    """

    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 1000.0
    name: str = ""

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        self.validate()

    @classmethod
    def from_rt(cls, R, t, **kw) -> "Camera":
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = t
        return cls(W, **kw)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), **kw) -> "Camera":
        """Camera at ``eye`` looking toward ``target``; camera y points down the image."""
        eye = np.asarray(eye, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - eye
        f /= np.linalg.norm(f)
        r = np.cross(np.asarray(up, dtype=np.float64), f)
        r /= np.linalg.norm(r)
        d = np.cross(f, r)
        R = np.stack([r, d, f])
        return cls.from_rt(R, -R @ eye, **kw)

    def validate(self) -> None:
        W = self.world_to_camera
        if W.shape != (4, 4) or not np.all(np.isfinite(W)):
            raise InvalidInputError("world_to_camera must be a finite 4x4 matrix")
        R = W[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise InvalidInputError("camera rotation block is not orthonormal")
        if not self.near < self.far:
            raise InvalidInputError("camera near plane must be closer than far plane")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("camera image size must be at least 1x1")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        return self.R[2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def resized(self, width: int, height: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return Camera(
            self.world_to_camera.copy(), self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
            width, height, self.near, self.far, self.name,
        )


PARAM_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


@dataclass
class GaussianCloud:
    """Structure-of-arrays set of N Gaussians.

    ``sh`` has shape (N, (D+1)^2, 3); scale and opacity are stored
    pre-activation (log and logit).
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    _n: int = field(init=False, repr=False)

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "opacity_logits": (n,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidInputError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise InvalidInputError(f"sh has shape {self.sh.shape}, expected ({n}, K, 3)")
        sh_degree_from_coeffs(self.sh.shape[1])
        self._n = n

    def __len__(self) -> int:
        return self._n

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_coeffs(self.sh.shape[1])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianCloud":
        k = num_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_points(
        cls,
        positions: np.ndarray,
        colors: np.ndarray,
        sh_degree: int = 2,
        initial_opacity: float = 0.1,
        neighbors: int = 3,
    ) -> "GaussianCloud":
        """Isotropic Gaussians at ``positions``.

        Scale is the mean distance to the ``neighbors`` nearest other points.
        """
        from scipy.spatial import cKDTree

        positions = np.asarray(positions, dtype=np.float64)
        n = len(positions)
        if n == 0:
            return cls.empty(sh_degree)
        k = min(neighbors + 1, n)
        if k > 1:
            d, _ = cKDTree(positions).query(positions, k=k)
            mean_d = np.mean(d[:, 1:], axis=1)
        else:
            mean_d = np.ones(n)
        mean_d = np.maximum(mean_d, 1e-7)
        sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
        sh[:, 0, :] = rgb_to_sh0(colors)
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return cls(
            positions.copy(),
            rot,
            np.repeat(np.log(mean_d)[:, None], 3, axis=1),
            np.full(n, inverse_sigmoid(initial_opacity)),
            sh,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in PARAM_FIELDS))

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f)[index] for f in PARAM_FIELDS))

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if other.sh.shape[1] != self.sh.shape[1]:
            raise InvalidInputError("cannot concatenate clouds with different SH degrees")
        return GaussianCloud(
            *(np.concatenate([getattr(self, f), getattr(other, f)]) for f in PARAM_FIELDS)
        )

    def rounded_to_float32(self) -> "GaussianCloud":
        """The cloud exactly as it will read back from a checkpoint."""
        return GaussianCloud(
            *(getattr(self, f).astype(np.float32).astype(np.float64) for f in PARAM_FIELDS)
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f))) for f in PARAM_FIELDS)
