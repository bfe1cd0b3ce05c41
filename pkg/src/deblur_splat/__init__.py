"""Defocus-deblurring 3D Gaussian splatting on a CPU tile rasterizer."""

__version__ = "0.1.0"

from .blur_field import BlurField, EncodingConfig, apply_offsets, encode
from .gaussians import Camera, GaussianCloud, covariance3d, eval_gaussian2d, eval_sh, project_covariance
from .metrics import psnr, ssim
from .pointcloud import AugmentConfig, PointCloud, PruneConfig, add_extra_points, depth_prune_threshold
from .rasterizer import RasterConfig, project_cloud, rasterize_backward, rasterize_forward, render
from .trainer import TrainConfig, train

__all__ = [
    "AugmentConfig", "BlurField", "Camera", "EncodingConfig", "GaussianCloud", "PointCloud",
    "PruneConfig", "RasterConfig", "TrainConfig", "add_extra_points", "apply_offsets",
    "covariance3d", "depth_prune_threshold", "encode", "eval_gaussian2d", "eval_sh",
    "project_covariance", "project_cloud", "psnr", "rasterize_backward", "rasterize_forward",
    "render", "ssim", "train",
]
