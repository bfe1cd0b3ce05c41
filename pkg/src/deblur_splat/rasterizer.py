"""Tile-based splat rasterizer with an exact reverse-mode pass.

The pipeline is ``project_cloud`` -> ``rasterize_forward`` and, for training,
``rasterize_backward`` -> ``backprop_projection``. Everything runs in float64.

A splat contributes to a pixel only inside its ``cutoff_sigma`` ellipse and
only when its alpha reaches ``alpha_min``; tiles bin splats by the axis-aligned
box of that ellipse, so tiling never changes the composited result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractViolation, InvalidInputError
from .gaussians import (
    DILATION,
    Camera,
    GaussianCloud,
    rotmat_vjp,
    sh_basis,
    sh_basis_grad,
    sigmoid,
)


@dataclass
class RasterConfig:
    tile_size: int = 16
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_stop: float = 1e-4
    cutoff_sigma: float = 3.0
    dilation: float = DILATION
    # Means further than this fraction of the image size outside the frame are culled.
    guard_band: float = 0.5


@dataclass
class Overrides:
    """Per-Gaussian replacement rotation (raw quaternion) and activated scale."""

    rotations: np.ndarray
    scales: np.ndarray


@dataclass
class Splats:
    """Projected, culled Gaussians in structure-of-arrays form, one row per splat."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    extents: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    source_index: np.ndarray
    n_source: int
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.depths)


@dataclass
class RenderOutput:
    image: np.ndarray
    final_transmittance: np.ndarray
    contributor_count: np.ndarray
    depth: np.ndarray
    background: np.ndarray
    # forward state consumed by rasterize_backward
    offsets: np.ndarray = field(repr=False)
    pairs: np.ndarray = field(repr=False)
    last: np.ndarray = field(repr=False)
    splats_id: int = field(repr=False)
    config: RasterConfig = field(repr=False)
    tiles_x: int = field(repr=False)


@dataclass
class SplatGradients:
    means2d: np.ndarray
    conics: np.ndarray  # (a, b, c); b is per off-diagonal entry
    colors: np.ndarray
    opacities: np.ndarray
    background: np.ndarray


@dataclass
class CloudGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    # set when the forward pass used overrides
    rotation_overrides: np.ndarray | None = None
    scale_overrides: np.ndarray | None = None
    # screen-space positional gradient per Gaussian (zero when not visible)
    means2d: np.ndarray | None = None
    visible: np.ndarray | None = None

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }


def project_cloud(
    cloud: GaussianCloud,
    camera: Camera,
    overrides: Overrides | None = None,
    config: RasterConfig | None = None,
) -> Splats:
    cfg = config or RasterConfig()
    n = len(cloud)
    if overrides is None:
        quats_all = cloud.rotations
        scales_all = np.exp(cloud.log_scales)
    else:
        if overrides.rotations.shape != (n, 4) or overrides.scales.shape != (n, 3):
            raise ContractViolation("override arrays must match the cloud size")
        quats_all, scales_all = overrides.rotations, overrides.scales

    t_all, uv = np.empty((n, 3)), np.empty((n, 2))
    R_all, M_all, cov3d_all = np.empty((n, 3, 3)), np.empty((n, 3, 3)), np.empty((n, 3, 3))
    J_all, T_all, cov2d_all = np.empty((n, 2, 3)), np.empty((n, 2, 3)), np.empty((n, 2, 2))
    conics_all, ext_all = np.empty((n, 3)), np.empty((n, 2))
    status = np.empty(n, dtype=np.int8)
    _kernels.project_gaussians(
        np.ascontiguousarray(cloud.positions, dtype=np.float64),
        np.ascontiguousarray(quats_all, dtype=np.float64),
        np.ascontiguousarray(scales_all, dtype=np.float64),
        np.ascontiguousarray(camera.R), np.ascontiguousarray(camera.t, dtype=np.float64),
        camera.fx, camera.fy, camera.cx, camera.cy, camera.near, camera.far,
        cfg.guard_band * camera.width, cfg.guard_band * camera.height, camera.width, camera.height,
        cfg.dilation, cfg.cutoff_sigma,
        t_all, uv, R_all, M_all, cov3d_all, J_all, T_all, cov2d_all, conics_all, ext_all, status,
    )
    if np.any(status == 2):
        raise InvalidInputError("cannot normalize a zero quaternion")
    idx = np.nonzero(status == 0)[0]
    if len(idx) == n:
        # nothing culled: the kernel outputs are already compact
        t, R, M, cov3d, J, T, cov2d = t_all, R_all, M_all, cov3d_all, J_all, T_all, cov2d_all
        conics, ext, means2d = conics_all, ext_all, uv
    else:
        t, R, M, cov3d, J, T, cov2d = (a[idx] for a in (t_all, R_all, M_all, cov3d_all, J_all, T_all, cov2d_all))
        conics, ext, means2d = conics_all[idx], ext_all[idx], uv[idx]
    quats, scales = quats_all[idx], scales_all[idx]

    dirs = cloud.positions[idx] - camera.center
    dir_norm = np.linalg.norm(dirs, axis=1, keepdims=True)
    unit = dirs / np.maximum(dir_norm, 1e-30)
    sh = cloud.sh[idx]
    basis = sh_basis(unit, cloud.sh_degree)
    raw_rgb = np.einsum("nk,nkc->nc", basis, sh) + 0.5
    colors = np.maximum(raw_rgb, 0.0)

    return Splats(
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        extents=ext,
        depths=t[:, 2].copy(),
        colors=colors,
        opacities=sigmoid(cloud.opacity_logits[idx]),
        source_index=idx,
        n_source=n,
        cache=dict(
            t=t, J=J, T=T, R=R, M=M, cov3d=cov3d, quats=quats, scales=scales,
            unit=unit, dir_norm=dir_norm, basis=basis, color_live=raw_rgb > 0,
            camera=camera, overrides=overrides is not None, sh_degree=cloud.sh_degree,
        ),
    )


def _tile_ranges(splats: Splats, camera: Camera, tile: int):
    W, H = camera.width, camera.height
    mx, my = splats.means2d[:, 0], splats.means2d[:, 1]
    ex, ey = splats.extents[:, 0], splats.extents[:, 1]
    # inclusive pixel ranges whose centres (p + 0.5) can fall inside the ellipse box
    x_lo = np.clip(np.ceil(mx - ex - 0.5), 0, W).astype(np.int64)
    x_hi = np.clip(np.floor(mx + ex - 0.5), -1, W - 1).astype(np.int64)
    y_lo = np.clip(np.ceil(my - ey - 0.5), 0, H).astype(np.int64)
    y_hi = np.clip(np.floor(my + ey - 0.5), -1, H - 1).astype(np.int64)
    empty = (x_lo > x_hi) | (y_lo > y_hi)
    tx0, tx1 = x_lo // tile, x_hi // tile
    ty0, ty1 = y_lo // tile, y_hi // tile
    tx0[empty], tx1[empty] = 1, 0
    return tx0, tx1, ty0, ty1


def rasterize_forward(
    splats: Splats,
    camera: Camera,
    background=None,
    config: RasterConfig | None = None,
) -> RenderOutput:
    cfg = config or RasterConfig()
    W, H, tile = camera.width, camera.height, cfg.tile_size
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    # equal depths composite in source order, wherever they sit in the list
    if np.all(splats.source_index[1:] > splats.source_index[:-1]):
        order = np.argsort(splats.depths, kind="stable")
    else:
        order = np.lexsort((splats.source_index, splats.depths))
    tx0, tx1, ty0, ty1 = _tile_ranges(splats, camera, tile)
    offsets, pairs = _kernels.bin_splats(order, tx0, tx1, ty0, ty1, tiles_x, tiles_x * tiles_y)

    image = np.empty((H, W, 3))
    final_t = np.empty((H, W))
    last = np.empty((H, W), dtype=np.int64)
    count = np.empty((H, W), dtype=np.int32)
    depth = np.empty((H, W))
    _kernels.forward_tiles(
        offsets, pairs,
        np.ascontiguousarray(splats.means2d), np.ascontiguousarray(splats.conics),
        np.ascontiguousarray(splats.colors), np.ascontiguousarray(splats.opacities),
        np.ascontiguousarray(splats.depths), np.ascontiguousarray(splats.extents),
        W, H, tile, tiles_x, bg,
        cfg.alpha_max, cfg.alpha_min, cfg.t_stop, cfg.cutoff_sigma ** 2,
        image, final_t, last, count, depth,
    )
    return RenderOutput(
        image=image, final_transmittance=final_t, contributor_count=count, depth=depth,
        background=bg, offsets=offsets, pairs=pairs, last=last, splats_id=id(splats),
        config=cfg, tiles_x=tiles_x,
    )


def rasterize_backward(out: RenderOutput, splats: Splats, dl_dimage: np.ndarray) -> SplatGradients:
    """Exact gradients of the composited image with respect to every splat attribute."""
    if out.splats_id != id(splats):
        raise ContractViolation("render output was produced from a different splat list")
    dl_dimage = np.ascontiguousarray(dl_dimage, dtype=np.float64)
    if dl_dimage.shape != out.image.shape:
        raise ContractViolation(f"gradient shape {dl_dimage.shape} != image shape {out.image.shape}")
    cfg = out.config
    H, W = out.image.shape[:2]
    pair_grads = np.zeros((len(out.pairs), _kernels.PAIR_GRAD_WIDTH))
    _kernels.backward_tiles(
        out.offsets, out.pairs,
        np.ascontiguousarray(splats.means2d), np.ascontiguousarray(splats.conics),
        np.ascontiguousarray(splats.colors), np.ascontiguousarray(splats.opacities), np.ascontiguousarray(splats.extents),
        W, H, cfg.tile_size, out.tiles_x, out.background,
        cfg.alpha_max, cfg.alpha_min, cfg.cutoff_sigma ** 2,
        out.final_transmittance, out.last, dl_dimage, pair_grads,
    )
    g = _kernels.reduce_pairs(out.pairs, pair_grads, len(splats))
    return SplatGradients(
        means2d=g[:, 0:2],
        conics=g[:, 2:5],
        colors=g[:, 5:8],
        opacities=g[:, 8],
        background=np.einsum("hw,hwc->c", out.final_transmittance, dl_dimage),
    )


def backprop_projection(splats: Splats, grads: SplatGradients, cloud: GaussianCloud) -> CloudGradients:
    """Chain splat gradients through projection, covariance and SH to cloud parameters."""
    c = splats.cache
    cam: Camera = c["camera"]
    n = splats.n_source
    idx = splats.source_index
    out = CloudGradients(
        positions=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        log_scales=np.zeros((n, 3)),
        opacity_logits=np.zeros(n),
        sh=np.zeros((n,) + cloud.sh.shape[1:]),
        means2d=np.zeros((n, 2)),
        visible=np.zeros(n, dtype=bool),
    )
    if len(splats) == 0:
        if c.get("overrides"):
            out.rotation_overrides = np.zeros((n, 4))
            out.scale_overrides = np.zeros((n, 3))
        return out
    out.visible[idx] = True
    out.means2d[idx] = grads.means2d

    # conic = inv(cov2d): dL/dcov2d = -K G K
    ga, gb, gc = grads.conics[:, 0], grads.conics[:, 1], grads.conics[:, 2]
    G = np.stack([np.stack([ga, gb], -1), np.stack([gb, gc], -1)], -2)
    K = np.stack(
        [np.stack([splats.conics[:, 0], splats.conics[:, 1]], -1),
         np.stack([splats.conics[:, 1], splats.conics[:, 2]], -1)], -2,
    )
    G2 = -K @ G @ K

    T, cov3d, J = c["T"], c["cov3d"], c["J"]
    dT = 2.0 * G2 @ T @ cov3d
    G3 = np.swapaxes(T, 1, 2) @ G2 @ T
    dJ = dT @ cam.R.T

    t = c["t"]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy
    iz, iz2, iz3 = 1.0 / tz, 1.0 / tz**2, 1.0 / tz**3
    gu, gv = grads.means2d[:, 0], grads.means2d[:, 1]
    dt = np.empty_like(t)
    dt[:, 0] = gu * fx * iz - dJ[:, 0, 2] * fx * iz2
    dt[:, 1] = gv * fy * iz - dJ[:, 1, 2] * fy * iz2
    dt[:, 2] = (
        -gu * fx * tx * iz2 - gv * fy * ty * iz2
        - dJ[:, 0, 0] * fx * iz2 - dJ[:, 1, 1] * fy * iz2
        + dJ[:, 0, 2] * 2 * fx * tx * iz3 + dJ[:, 1, 2] * 2 * fy * ty * iz3
    )
    dpos = dt @ cam.R

    # cov3d = M M^T with M = R diag(s)
    R, M, scales = c["R"], c["M"], c["scales"]
    dM = 2.0 * G3 @ M
    dscale = np.einsum("nij,nij->nj", dM, R)
    dR = dM * scales[:, None, :]
    dquat = rotmat_vjp(c["quats"], dR)

    # colour = max(sh . basis + 0.5, 0)
    draw = grads.colors * c["color_live"]
    out.sh[idx] = c["basis"][:, :, None] * draw[:, None, :]
    if c["sh_degree"] > 0:
        sh = cloud.sh[idx]
        unit = c["unit"]
        dbasis = np.einsum("nkc,nc->nk", sh, draw)
        dunit = np.einsum("nk,nkj->nj", dbasis, sh_basis_grad(unit, c["sh_degree"]))
        dpos += (dunit - unit * np.sum(unit * dunit, axis=1, keepdims=True)) / c["dir_norm"]

    out.positions[idx] = dpos
    op = splats.opacities
    out.opacity_logits[idx] = grads.opacities * op * (1.0 - op)
    if c["overrides"]:
        out.rotation_overrides = np.zeros((n, 4))
        out.scale_overrides = np.zeros((n, 3))
        out.rotation_overrides[idx] = dquat
        out.scale_overrides[idx] = dscale
    else:
        out.rotations[idx] = dquat
        out.log_scales[idx] = dscale * scales
    return out


def render_with_state(cloud, camera, overrides=None, background=None, config=None):
    splats = project_cloud(cloud, camera, overrides, config)
    return splats, rasterize_forward(splats, camera, background, config)


def render(cloud: GaussianCloud, camera: Camera, blur_field=None, background=None, config=None) -> np.ndarray:
    """Render an RGB image; the blur field is consulted only when one is passed."""
    overrides = None
    if blur_field is not None:
        from .blur_field import apply_offsets

        overrides = apply_offsets(cloud, blur_field.predict_offsets(cloud, camera))
    _, out = render_with_state(cloud, camera, overrides, background, config)
    return out.image
