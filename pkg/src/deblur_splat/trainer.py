"""Training loop: blurred-view reconstruction through the blur field, sharp evaluation without it."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .blur_field import BlurField, EncodingConfig, apply_offsets
from .checkpoint import save_checkpoint
from .errors import ContractViolation, InvalidInputError, LoadError
from .gaussians import GaussianCloud, inverse_sigmoid, num_sh_coeffs, rgb_to_sh0
from .metrics import psnr, ssim, ssim_and_grad
from .optim import Adam, NonFiniteGradient
from .pointcloud import (
    AugmentConfig,
    DensityConfig,
    DensityStats,
    PruneConfig,
    add_extra_points,
    adaptive_density_control,
    cloud_to_points,
    reset_opacity,
)
from .rasterizer import (
    RasterConfig,
    backprop_projection,
    rasterize_backward,
    render,
    render_with_state,
)
from .scene import SceneDataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "loss", "l1", "dssim", "psnr_eval", "gaussian_count", "wall_ms")


class NumericFailure(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 30_000
    lambda_dssim: float = 0.2
    # learning rates
    lr_mlp: float = 1e-3
    lr_position: float = 1.6e-4
    lr_position_final_factor: float = 0.01
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    # point augmentation
    N_st: int = 2500
    N_p: int = 100_000
    K: int = 4
    t_d: float = 10.0
    extra_points: bool = True
    # depth-based pruning
    t_p: float = 5e-3
    w_p: float = 0.3
    # adaptive density control
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15_000
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    opacity_reset_interval: int = 3000
    scene_extent: float = 0.0  # 0: derive from the training cameras
    # model
    sh_degree: int = 2
    L_x: int = 4
    L_v: int = 4
    mlp_hidden: int = 64
    mlp_layers: int = 3
    mlp_output_scale: float = 0.01
    blur_field_from: int = 0  # iterations rendered without offsets before the field engages
    use_blur_field: bool = True
    initial_opacity: float = 0.1
    # bookkeeping
    seed: int = 0
    deterministic: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    log_interval: int = 10
    eval_interval: int = 1000
    checkpoint_interval: int = 0
    hard_fail_nan: bool = False

    def __post_init__(self):
        self.background = tuple(float(v) for v in self.background)
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise InvalidInputError("lambda_dssim must lie in [0, 1]")
        for name in ("lr_position", "lr_sh", "lr_opacity", "lr_scale", "lr_rotation"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0")
        if self.lr_mlp < 0:
            raise InvalidInputError("lr_mlp must be >= 0")
        if not 0 <= self.sh_degree <= 3:
            raise InvalidInputError("sh_degree must be in 0..3")
        self.augment_config()
        self.prune_config()

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(N_st=self.N_st, N_p=self.N_p, K=self.K, t_d=self.t_d)

    def prune_config(self) -> PruneConfig:
        return PruneConfig(t_p=self.t_p, w_p=self.w_p)

    def density_config(self) -> DensityConfig:
        return DensityConfig(
            interval=self.densify_interval, start=self.densify_from, stop=self.densify_until,
            grad_threshold=self.grad_threshold, percent_dense=self.percent_dense,
            split_factor=self.split_factor, opacity_reset_interval=self.opacity_reset_interval,
        )

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    def replace(self, **overrides) -> "TrainConfig":
        unknown = set(overrides) - self.field_names()
        if unknown:
            raise InvalidInputError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d


def photometric_loss(rendered: np.ndarray, target: np.ndarray, lambda_dssim: float = 0.2):
    """(1 - lambda) L1 + lambda (1 - SSIM); returns (loss, dL/drendered, l1, dssim)."""
    if rendered.shape != target.shape:
        raise ContractViolation(f"rendered {rendered.shape} and target {target.shape} differ")
    diff = rendered - target
    n = diff.size
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_dssim) * np.sign(diff) / n
    dssim = 0.0
    if lambda_dssim > 0:
        s, ds = ssim_and_grad(rendered, target)
        dssim = 1.0 - s
        grad = grad - lambda_dssim * ds
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim, grad, l1, dssim


def position_lr(cfg: TrainConfig, iteration: int, extent: float) -> float:
    """Log-linear decay from lr_position to lr_position * final_factor, scaled by scene extent."""
    frac = min(max(iteration / cfg.iterations, 0.0), 1.0)
    lr0 = cfg.lr_position * extent
    lr1 = lr0 * cfg.lr_position_final_factor
    return float(np.exp((1 - frac) * np.log(lr0) + frac * np.log(lr1)))


def cameras_extent(cameras) -> float:
    centers = np.array([c.center for c in cameras])
    return float(1.1 * np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))) or 1.0


def gaussians_for_new_points(new_pos, new_col, all_pos, sh_degree, initial_opacity) -> GaussianCloud:
    """Fresh Gaussians for appended points: scale from the 3 nearest points in the grown cloud."""
    n = len(new_pos)
    if n == 0:
        return GaussianCloud.empty(sh_degree)
    k = min(4, len(all_pos))
    d, _ = cKDTree(all_pos).query(new_pos, k=k)
    d = d.reshape(n, k)
    mean_d = np.maximum(np.mean(d[:, 1:], axis=1) if k > 1 else np.ones(n), 1e-7)
    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(new_col)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        new_pos, rot, np.repeat(np.log(mean_d)[:, None], 3, axis=1),
        np.full(n, inverse_sigmoid(initial_opacity)), sh,
    )


def evaluate(cloud: GaussianCloud, dataset: SceneDataset, indices, background=(0, 0, 0), config=None):
    """Per-view PSNR/SSIM of plain (blur-field-free) renders against dataset images."""
    rows = []
    for i in indices:
        img = render(cloud, dataset.cameras[i], None, np.asarray(background, float), config)
        rows.append((dataset.cameras[i].name, psnr(img, dataset.images[i]), ssim(img, dataset.images[i])))
    return rows


@dataclass
class TrainResult:
    cloud: GaussianCloud
    blur_field: BlurField | None
    log_rows: list[dict]
    eval_rows: list[tuple]
    events: list[dict] = field(default_factory=list)

    @property
    def test_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.eval_rows])) if self.eval_rows else float("nan")

    @property
    def test_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.eval_rows])) if self.eval_rows else float("nan")


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else ("inf" if v > 0 else "nan")
    return str(v)


def train(dataset: SceneDataset, config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    cfg = config
    train_ids = dataset.indices("train")
    test_ids = dataset.indices("test")
    if not train_ids:
        raise LoadError("dataset has no training views")
    if len(dataset.points) == 0:
        raise LoadError("dataset has an empty initial point cloud")
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(cfg.seed)
    rcfg = RasterConfig()
    bg = np.asarray(cfg.background, dtype=np.float64)
    train_cams = [dataset.cameras[i] for i in train_ids]
    extent = cfg.scene_extent if cfg.scene_extent > 0 else cameras_extent(train_cams)
    dcfg = cfg.density_config()
    pcfg = cfg.prune_config()

    cloud = GaussianCloud.from_points(
        dataset.points.positions, dataset.points.colors, cfg.sh_degree, cfg.initial_opacity
    )
    blur_field = None
    if cfg.use_blur_field:
        lo, hi = dataset.points.positions.min(axis=0), dataset.points.positions.max(axis=0)
        blur_field = BlurField.create(
            EncodingConfig(cfg.L_x, cfg.L_v), lo, hi, cfg.mlp_hidden, cfg.mlp_layers, seed=cfg.seed,
            output_scale=cfg.mlp_output_scale,
        )
    adam = Adam(hard_fail=cfg.hard_fail_nan)
    sh_lr = np.full((1, num_sh_coeffs(cfg.sh_degree), 1), cfg.lr_sh / 20.0)
    sh_lr[0, 0, 0] = cfg.lr_sh
    stats = DensityStats.zeros(len(cloud))

    log_rows: list[dict] = []
    events: list[dict] = []
    csv_file = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_file = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    def eval_now(c):
        if not test_ids:
            return []
        calls = blur_field.forward_calls if blur_field is not None else 0
        rows = evaluate(c.rounded_to_float32(), dataset, test_ids, bg, rcfg)
        if blur_field is not None and blur_field.forward_calls != calls:
            raise ContractViolation("evaluation consulted the blur field")
        return rows

    order: list[int] = []
    t0 = time.perf_counter()
    eval_rows: list[tuple] = []
    try:
        for it in range(1, cfg.iterations + 1):
            if not order:
                order = list(rng.permutation(train_ids))
            vi = order.pop()
            cam = dataset.cameras[vi]

            offsets = overrides = None
            field_on = blur_field is not None and it > cfg.blur_field_from
            if field_on:
                offsets = blur_field.predict_offsets(cloud, cam)
                overrides = apply_offsets(cloud, offsets)
            splats, out = render_with_state(cloud, cam, overrides, bg, rcfg)
            loss, dimg, l1, dssim = photometric_loss(out.image, dataset.images[vi], cfg.lambda_dssim)
            sg = rasterize_backward(out, splats, dimg)
            cg = backprop_projection(splats, sg, cloud)
            wgrads = blur_field.backward(cloud, offsets, cg) if field_on else None

            if it < cfg.densify_until:
                stats.add(cg.means2d, cg.positions, cg.visible, cam)

            lrs = {
                "positions": position_lr(cfg, it, extent),
                "rotations": cfg.lr_rotation,
                "log_scales": cfg.lr_scale,
                "opacity_logits": cfg.lr_opacity,
                "sh": sh_lr,
            }
            for name, grad in cg.as_dict().items():
                adam.step(name, getattr(cloud, name), grad, lrs[name])
            if wgrads is not None and cfg.lr_mlp > 0:
                params = blur_field.params()
                for name, grad in wgrads.items():
                    adam.step("mlp." + name, params[name], grad, cfg.lr_mlp)
                blur_field.touch()
            if not cloud.is_finite():
                raise NumericFailure(f"non-finite Gaussian parameters at iteration {it}")

            if cfg.extra_points and it == cfg.N_st:
                pts = add_extra_points(cloud_to_points(cloud), cfg.augment_config(), rng_seed=cfg.seed + it)
                n_old = len(cloud)
                new = gaussians_for_new_points(
                    pts.positions[n_old:], pts.colors[n_old:], pts.positions, cfg.sh_degree, cfg.initial_opacity
                )
                cloud = cloud.concat(new)
                for name in cloud.params():
                    adam.extend(name, len(new))
                stats = DensityStats.zeros(len(cloud))
                events.append({"iteration": it, "event": "extra_points", "added": len(new)})

            if it < cfg.densify_until and it > cfg.densify_from and it % cfg.densify_interval == 0:
                before = len(cloud)
                cloud, rep = adaptive_density_control(cloud, stats, train_cams, pcfg, dcfg, extent, rng)
                for name in cloud.params():
                    adam.remap(name, rep.source, rep.fresh)
                stats = DensityStats.zeros(len(cloud))
                events.append({
                    "iteration": it, "event": "density", "before": before, "after": len(cloud),
                    "pruned": rep.n_pruned, "cloned": rep.n_cloned, "split": rep.n_split,
                    "threshold_min": float(rep.thresholds.min()) if len(rep.thresholds) else None,
                    "threshold_max": float(rep.thresholds.max()) if len(rep.thresholds) else None,
                })
                if len(cloud) == 0:
                    raise NumericFailure(f"density control removed every Gaussian at iteration {it}")
            if (
                cfg.opacity_reset_interval > 0
                and it < cfg.densify_until
                and it % cfg.opacity_reset_interval == 0
            ):
                reset_opacity(cloud, dcfg.opacity_reset_value)
                adam.remap("opacity_logits", np.arange(len(cloud)), np.ones(len(cloud), dtype=bool))

            psnr_eval = None
            if it == cfg.iterations or (cfg.eval_interval > 0 and it % cfg.eval_interval == 0):
                eval_rows = eval_now(cloud)
                if eval_rows:
                    psnr_eval = float(np.mean([r[1] for r in eval_rows]))
            if it % cfg.log_interval == 0 or it == cfg.iterations or psnr_eval is not None:
                wall = 0 if cfg.deterministic else int(round((time.perf_counter() - t0) * 1000))
                row = dict(
                    iteration=it, loss=float(loss), l1=l1, dssim=float(dssim), psnr_eval=psnr_eval,
                    gaussian_count=len(cloud), wall_ms=wall,
                )
                log_rows.append(row)
                if writer is not None:
                    writer.writerow([_fmt(row[k]) for k in LOG_COLUMNS])
                if progress is not None:
                    progress(row)
            if out_dir is not None and cfg.checkpoint_interval > 0 and it % cfg.checkpoint_interval == 0:
                save_checkpoint(out_dir / "checkpoint.ckpt", cloud, blur_field)
    except NonFiniteGradient as e:
        raise NumericFailure(str(e)) from e
    finally:
        if csv_file is not None:
            csv_file.close()

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.ckpt", cloud, blur_field)
    return TrainResult(cloud, blur_field, log_rows, eval_rows, events)
