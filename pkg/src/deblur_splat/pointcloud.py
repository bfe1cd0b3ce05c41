"""Sparse point-cloud compensation: extra points with KNN colors, depth-scaled pruning,
and adaptive density control. Also PLY input/output for colored point clouds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError, LoadError
from .gaussians import Camera, GaussianCloud, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)

IDW_EPS = 1e-8


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise InvalidInputError("positions and colors must have the same length")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidInputError("point positions must be finite")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class AugmentConfig:
    N_st: int = 2500
    N_p: int = 100_000
    K: int = 4
    t_d: float = 10.0
    # per-axis (min, max) sampling box; defaults to the existing cloud's extent
    bounds: tuple | None = None

    def __post_init__(self):
        if self.N_p < 1 or self.K < 1 or not self.t_d > 0:
            raise InvalidInputError("augmentation needs N_p >= 1, K >= 1 and t_d > 0")


@dataclass
class PruneConfig:
    t_p: float = 5e-3
    w_p: float = 0.3

    def __post_init__(self):
        if not (0 < self.t_p < 1 and 0 < self.w_p <= 1):
            raise InvalidInputError("pruning needs 0 < t_p < 1 and 0 < w_p <= 1")


@dataclass
class DensityConfig:
    interval: int = 100
    start: int = 500
    stop: int = 15_000
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01
    clone_nudge: float = 0.5


# ---------------------------------------------------------------------------
# point augmentation


def add_extra_points(cloud: PointCloud, cfg: AugmentConfig, rng_seed=0) -> PointCloud:
    """Append uniformly sampled points that have at least one neighbor within t_d.

    A kept point's color is the inverse-distance-weighted mean of its valid
    neighbors among the K nearest original points.
    """
    n = len(cloud)
    if n == 0:
        raise InvalidInputError("cannot augment an empty point cloud")
    pos = cloud.positions
    lo, hi = (pos.min(axis=0), pos.max(axis=0)) if cfg.bounds is None else map(np.asarray, cfg.bounds)
    rng = np.random.default_rng(rng_seed)
    cand = rng.uniform(lo, hi, size=(cfg.N_p, 3))
    k = min(cfg.K, n)
    _, nbr = cKDTree(pos).query(cand, k=k)
    nbr = nbr.reshape(cfg.N_p, k)
    new_pos, new_col = _interpolate_colors(cand, nbr, pos, cloud.colors, cfg.t_d)
    return PointCloud(np.concatenate([pos, new_pos]), np.concatenate([cloud.colors, new_col]))


def _interpolate_colors(cand, nbr, pos, colors, t_d):
    dist = np.sqrt(np.sum((cand[:, None, :] - pos[nbr]) ** 2, axis=-1))
    valid = dist <= t_d
    keep = valid.any(axis=1)
    w = np.where(valid, 1.0 / (dist + IDW_EPS), 0.0)[keep]
    col = np.sum(w[..., None] * colors[nbr[keep]], axis=1) / np.sum(w, axis=1, keepdims=True)
    return cand[keep], col


# ---------------------------------------------------------------------------
# depth-based pruning


def depth_prune_threshold(z_rel, cfg: PruneConfig):
    """Opacity threshold falling linearly from t_p (nearest) to t_p * w_p (farthest)."""
    z = np.asarray(z_rel, dtype=np.float64)
    if np.any((z < 0) | (z > 1)):
        log.warning("relative depth outside [0, 1] clamped")
        z = np.clip(z, 0.0, 1.0)
    # t_p * (1 - (1 - w_p) z), arranged so both endpoints come out exact
    far = cfg.t_p * cfg.w_p
    out = np.where(z >= 1.0, far, np.maximum(cfg.t_p + z * (far - cfg.t_p), far))
    return float(out) if out.ndim == 0 else out


def relative_depth(positions: np.ndarray, cameras: list[Camera]) -> np.ndarray:
    """Rank-normalized depth along the mean training-camera forward axis (0 near, 1 far)."""
    n = len(positions)
    if n == 0:
        return np.zeros(0)
    fwd = np.mean([c.forward for c in cameras], axis=0)
    fwd /= np.linalg.norm(fwd)
    origin = np.mean([c.center for c in cameras], axis=0)
    d = (positions - origin) @ fwd
    if n == 1:
        return np.zeros(1)
    rank = np.empty(n)
    rank[np.argsort(d, kind="stable")] = np.arange(n)
    return rank / (n - 1)


# ---------------------------------------------------------------------------
# adaptive density control


@dataclass
class DensityStats:
    """Running screen-space gradient statistics between density-control steps."""

    grad_accum: np.ndarray
    denom: np.ndarray
    pos_grad: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensityStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def add(self, means2d_grad: np.ndarray, position_grad: np.ndarray, visible: np.ndarray, camera: Camera):
        # gradient w.r.t. normalized device coordinates, the scale tau_grad is quoted in
        g = means2d_grad * np.array([camera.width / 2.0, camera.height / 2.0])
        self.grad_accum[visible] += np.linalg.norm(g[visible], axis=1)
        self.denom[visible] += 1
        self.pos_grad[visible] += position_grad[visible]


@dataclass
class DensityReport:
    source: np.ndarray  # row in the previous cloud each new row came from
    fresh: np.ndarray  # rows created by cloning or splitting
    n_pruned: int = 0
    n_cloned: int = 0
    n_split: int = 0
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def prune_mask(cloud: GaussianCloud, cameras: list[Camera], cfg: PruneConfig) -> tuple[np.ndarray, np.ndarray]:
    thr = np.atleast_1d(depth_prune_threshold(relative_depth(cloud.positions, cameras), cfg))
    return cloud.opacities < thr, thr


def adaptive_density_control(
    cloud: GaussianCloud,
    stats: DensityStats,
    cameras: list[Camera],
    prune_cfg: PruneConfig,
    cfg: DensityConfig,
    scene_extent: float,
    rng: np.random.Generator,
    densify: bool = True,
) -> tuple[GaussianCloud, DensityReport]:
    """Clone/split high-gradient Gaussians, then prune by the depth-scaled opacity rule."""
    n = len(cloud)
    avg = np.where(stats.denom > 0, stats.grad_accum / np.maximum(stats.denom, 1), 0.0)
    big = np.max(cloud.scales, axis=1) > cfg.percent_dense * scene_extent
    hot = (avg >= cfg.grad_threshold) if densify else np.zeros(n, dtype=bool)
    clone = hot & ~big
    split = hot & big

    parts = [cloud]
    source = [np.arange(n)]
    fresh = [np.zeros(n, dtype=bool)]

    ci = np.nonzero(clone)[0]
    if len(ci):
        c = cloud.subset(ci)
        g = stats.pos_grad[ci]
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        step = cfg.clone_nudge * np.max(c.scales, axis=1, keepdims=True)
        c.positions = c.positions - step * np.where(gn > 0, g / np.where(gn > 0, gn, 1.0), 0.0)
        parts.append(c)
        source.append(ci)
        fresh.append(np.ones(len(ci), dtype=bool))

    si = np.nonzero(split)[0]
    if len(si):
        children = cloud.subset(np.repeat(si, 2))
        R = quat_to_rotmat(children.rotations)
        local = rng.standard_normal((len(children), 3)) * children.scales
        children.positions = children.positions + np.einsum("nij,nj->ni", R, local)
        children.log_scales = children.log_scales - np.log(cfg.split_factor)
        parts.append(children)
        source.append(np.repeat(si, 2))
        fresh.append(np.ones(len(children), dtype=bool))

    merged = parts[0]
    for p in parts[1:]:
        merged = merged.concat(p)
    source = np.concatenate(source)
    fresh = np.concatenate(fresh)
    # split parents leave the cloud
    keep = np.ones(len(merged), dtype=bool)
    keep[si] = False
    merged, source, fresh = merged.subset(keep), source[keep], fresh[keep]

    pruned, thr = prune_mask(merged, cameras, prune_cfg)
    out = merged.subset(~pruned)
    return out, DensityReport(
        source=source[~pruned],
        fresh=fresh[~pruned],
        n_pruned=int(pruned.sum()),
        n_cloned=len(ci),
        n_split=len(si),
        thresholds=thr,
    )


def reset_opacity(cloud: GaussianCloud, value: float) -> None:
    cap = np.log(value / (1.0 - value))
    np.minimum(cloud.opacity_logits, cap, out=cloud.opacity_logits)


def cloud_to_points(cloud: GaussianCloud) -> PointCloud:
    from .gaussians import SH_C0

    rgb = np.clip(cloud.sh[:, 0, :] * SH_C0 + 0.5, 0.0, 1.0)
    return PointCloud(cloud.positions.copy(), rgb)


def opacity_of(cloud: GaussianCloud) -> np.ndarray:
    return sigmoid(cloud.opacity_logits)


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            rec = np.empty(len(cloud), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                              ("red", "u1"), ("green", "u1"), ("blue", "u1")])
            for i, k in enumerate("xyz"):
                rec[k] = cloud.positions[:, i]
            rec["red"], rec["green"], rec["blue"] = rgb.T
            f.write(rec.tobytes())
        else:
            for p, c in zip(cloud.positions.astype(np.float32), rgb):
                xyz = " ".join(repr(float(v)) for v in p)
                f.write(f"{xyz} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))


def read_ply(path) -> PointCloud:
    """Read the vertex element of an ASCII or little/big-endian binary PLY."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise LoadError(f"{path}: cannot read point cloud ({e})") from e
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise LoadError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise LoadError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise LoadError(f"{path}: unknown property type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise LoadError(f"{path}: unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise LoadError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    if any(dt is None for _, dt in props):
        raise LoadError(f"{path}: list properties on vertices are not supported")
    names = [p for p, _ in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise LoadError(f"{path}: vertex property {req!r} missing")
    body = data[body_start:]
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")[:count]
        try:
            table = np.array([[float(v) for v in r.split()[: len(props)]] for r in rows])
        except ValueError as e:
            raise LoadError(f"{path}: malformed ASCII vertex row ({e})") from e
        table = table.reshape(count, len(props))
        col = {n: table[:, i] for i, n in enumerate(names)}
    else:
        endian = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(n, endian + dt) for n, dt in props])
        if len(body) < dtype.itemsize * count:
            raise LoadError(f"{path}: truncated vertex data")
        rec = np.frombuffer(body, dtype=dtype, count=count)
        col = {n: rec[n].astype(np.float64) for n in names}
    pos = np.stack([col["x"], col["y"], col["z"]], axis=1)
    if all(c in col for c in ("red", "green", "blue")):
        rgb = np.stack([col["red"], col["green"], col["blue"]], axis=1)
        red_type = np.dtype(dict(props)["red"])
        if red_type.kind in "iu":
            # integer channels use their full range, e.g. 0..255 for uchar
            rgb = rgb / float(np.iinfo(red_type).max)
    else:
        rgb = np.full((count, 3), 0.5)
    return PointCloud(pos, rgb)
