"""Desk-scale experiment presets shared by the CLI, scripts and the acceptance suite.

The full-size training defaults in :class:`TrainConfig` assume tens of
thousands of iterations on real captures. The toy scenes here are 80x60 px
with a few dozen Gaussians, so schedules are scaled to the iteration budget.
"""

from __future__ import annotations

from .scene import DefocusParams, ToySceneConfig
from .trainer import TrainConfig

# large ground-truth blobs so that blur is a visible fraction of each one
TOY_PIXEL_SIGMA = (4.0, 10.0)
TOY_BLUR_STRENGTH = 60.0
TOY_MAX_SIGMA = 8.0


def toy_scene_config(width: int = 80, height: int = 60) -> ToySceneConfig:
    return ToySceneConfig(width=width, height=height, focal=70.0 * width / 80, pixel_sigma=TOY_PIXEL_SIGMA)


def toy_defocus(blur_strength: float = TOY_BLUR_STRENGTH, max_sigma: float = TOY_MAX_SIGMA,
                focus_depth: float | None = None) -> DefocusParams:
    """Per-view random focal plane across the scene depth unless focus_depth is given."""
    if focus_depth is not None:
        return DefocusParams(focus_depth=focus_depth, blur_strength=blur_strength, max_sigma=max_sigma)
    return DefocusParams(blur_strength=blur_strength, max_sigma=max_sigma,
                         focus_range=ToySceneConfig().depth_range)


def toy_train_config(iterations: int = 5000, **overrides) -> TrainConfig:
    """Training schedule scaled to `iterations`; keyword overrides win."""
    base = dict(
        iterations=iterations,
        N_st=iterations // 4,
        N_p=20_000,
        t_d=0.3,
        densify_until=iterations // 2,
        opacity_reset_interval=iterations // 2 + 1,
        blur_field_from=iterations // 4,
        lr_mlp=1e-2,
        mlp_output_scale=0.1,
        eval_interval=iterations,
        log_interval=50,
    )
    base.update(overrides)
    return TrainConfig(**base)
