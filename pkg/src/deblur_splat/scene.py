"""Scene datasets on disk, synthetic defocus blur, and the toy-scene generator.

Directory layout::

    cameras.json     {"cameras": [{"name", "split", "R", "t", "fx", "fy",
                                   "cx", "cy", "width", "height", "image"}]}
    images/*.png     8-bit RGB
    points.ply       initial colored point cloud

``R``/``t`` are the world-to-camera rotation (row-major) and translation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from PIL import Image

from .errors import InvalidInputError, LoadError
from .gaussians import Camera, GaussianCloud, inverse_sigmoid, rgb_to_sh0
from .metrics import psnr
from .pointcloud import PointCloud, read_ply, write_ply
from .rasterizer import RasterConfig, render_with_state


@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: list[np.ndarray]
    splits: list[str]
    image_paths: list[str]
    points: PointCloud
    root: Path | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cameras)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def camera_by_name(self, name: str) -> int:
        for i, c in enumerate(self.cameras):
            if c.name == name:
                return i
        raise KeyError(name)


@dataclass
class DefocusParams:
    """Thin-lens style blur: sigma = blur_strength * |1/depth - 1/focus_depth| px.

    With ``focus_range`` set, the toy generator draws a focal plane per view
    from that interval instead of using ``focus_depth``.
    """

    focus_depth: float = 4.0
    blur_strength: float = 12.0
    max_sigma: float = 6.0
    noise_std: float = 0.0
    focus_range: tuple | None = None

    def __post_init__(self):
        if not self.focus_depth > 0 or self.blur_strength < 0:
            raise InvalidInputError("need focus_depth > 0 and blur_strength >= 0")
        if self.focus_range is not None:
            lo, hi = self.focus_range
            if not 0 < lo <= hi:
                raise InvalidInputError("focus_range must satisfy 0 < lo <= hi")

    def at_focus(self, focus_depth: float) -> "DefocusParams":
        return DefocusParams(focus_depth, self.blur_strength, self.max_sigma, self.noise_std)


# ---------------------------------------------------------------------------
# images


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", compress_level=6, optimize=False)


# ---------------------------------------------------------------------------
# load / save

_CAMERA_KEYS = ("name", "split", "R", "t", "fx", "fy", "cx", "cy", "width", "height", "image")


def _camera_from_json(entry: dict, where: str) -> Camera:
    missing = [k for k in _CAMERA_KEYS if k not in entry]
    if missing:
        raise LoadError(f"{where}: missing field(s) {', '.join(missing)}")
    if entry["split"] not in ("train", "test"):
        raise LoadError(f"{where}: field 'split' must be 'train' or 'test', got {entry['split']!r}")
    R = np.asarray(entry["R"], dtype=np.float64)
    t = np.asarray(entry["t"], dtype=np.float64)
    if R.shape != (9,):
        raise LoadError(f"{where}: field 'R' must hold 9 numbers")
    if t.shape != (3,):
        raise LoadError(f"{where}: field 't' must hold 3 numbers")
    try:
        return Camera.from_rt(
            R.reshape(3, 3), t,
            fx=float(entry["fx"]), fy=float(entry["fy"]), cx=float(entry["cx"]), cy=float(entry["cy"]),
            width=int(entry["width"]), height=int(entry["height"]), name=str(entry["name"]),
        )
    except (InvalidInputError, TypeError, ValueError) as e:
        raise LoadError(f"{where}: {e}") from e


def load_scene(path) -> SceneDataset:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise LoadError(f"{cam_file}: file not found")
    try:
        doc = json.loads(cam_file.read_text())
    except json.JSONDecodeError as e:
        raise LoadError(f"{cam_file}: invalid JSON ({e})") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("cameras"), list):
        raise LoadError(f"{cam_file}: top-level field 'cameras' must be a list")
    cameras, images, splits, paths = [], [], [], []
    for i, entry in enumerate(doc["cameras"]):
        where = f"{cam_file} camera[{i}]"
        if isinstance(entry, dict) and "name" in entry:
            where += f" ({entry['name']})"
        cam = _camera_from_json(entry, where)
        img_path = root / entry["image"]
        if not img_path.is_file():
            raise LoadError(f"{where}: image {img_path} not found")
        img = read_png(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise LoadError(
                f"{where}: image {img_path} is {img.shape[1]}x{img.shape[0]}, "
                f"camera declares {cam.width}x{cam.height}"
            )
        cameras.append(cam)
        images.append(img)
        splits.append(entry["split"])
        paths.append(entry["image"])
    if not cameras:
        raise LoadError(f"{cam_file}: no cameras")
    ply = root / "points.ply"
    if not ply.is_file():
        raise LoadError(f"{ply}: file not found")
    return SceneDataset(cameras, images, splits, paths, read_ply(ply), root=root)


def camera_to_json(cam: Camera, split: str, image: str) -> dict:
    return {
        "name": cam.name,
        "split": split,
        "R": [float(v) for v in cam.R.reshape(-1)],
        "t": [float(v) for v in cam.t],
        "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
        "width": int(cam.width), "height": int(cam.height),
        "image": image,
    }


def save_scene(dataset: SceneDataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for cam, img, split, rel in zip(dataset.cameras, dataset.images, dataset.splits, dataset.image_paths):
        write_png(root / rel, img)
        entries.append(camera_to_json(cam, split, rel))
    # json emits shortest round-trip reprs, so floats reload bit-exactly
    (root / "cameras.json").write_text(json.dumps({"cameras": entries}, indent=1) + "\n")
    write_ply(root / "points.ply", dataset.points)


# ---------------------------------------------------------------------------
# defocus blur


@njit(cache=True)
def _scatter_blur(img, sigma):
    H, W, C = img.shape
    acc = np.zeros((H, W, C))
    wsum = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            s = sigma[y, x]
            if s < 0.25:
                for c in range(C):
                    acc[y, x, c] += img[y, x, c]
                wsum[y, x] += 1.0
                continue
            r = int(math.ceil(3.0 * s))
            inv = 1.0 / (2.0 * s * s)
            z = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    z += math.exp(-(dx * dx + dy * dy) * inv)
            for dy in range(-r, r + 1):
                yy = y + dy
                if yy < 0 or yy >= H:
                    continue
                for dx in range(-r, r + 1):
                    xx = x + dx
                    if xx < 0 or xx >= W:
                        continue
                    k = math.exp(-(dx * dx + dy * dy) * inv) / z
                    for c in range(C):
                        acc[yy, xx, c] += k * img[y, x, c]
                    wsum[yy, xx] += k
    return acc, wsum


def defocus_sigma(depth: np.ndarray, params: DefocusParams) -> np.ndarray:
    return np.minimum(params.max_sigma, params.blur_strength * np.abs(1.0 / depth - 1.0 / params.focus_depth))


def synth_defocus(sharp: np.ndarray, depth: np.ndarray, params: DefocusParams, rng_seed=0) -> np.ndarray:
    """Spatially varying Gaussian-PSF blur: each source pixel scatters with its own sigma."""
    sharp = np.asarray(sharp, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != sharp.shape[:2]:
        raise InvalidInputError("depth map must match the image size")
    if np.any(~(depth > 0)):
        raise InvalidInputError("depths must be positive")
    acc, wsum = _scatter_blur(np.ascontiguousarray(sharp), defocus_sigma(depth, params))
    out = acc / np.maximum(wsum, 1e-12)[..., None]
    if params.noise_std > 0:
        out = out + np.random.default_rng(rng_seed).normal(0.0, params.noise_std, out.shape)
    return out


# ---------------------------------------------------------------------------
# toy scene


@dataclass
class ToySceneConfig:
    width: int = 80
    height: int = 60
    focal: float = 70.0
    depth_range: tuple = (3.0, 10.0)
    pixel_sigma: tuple = (1.5, 4.0)
    opacity: float = 0.98
    baseline: float = 0.6
    points_per_gaussian: int = 4
    far_fraction: float = 0.4
    far_keep: float = 0.3
    point_noise: float = 0.3
    color_noise: float = 0.03
    background_depth: float = 15.0


def toy_ground_truth(seed: int, n_gaussians: int, cfg: ToySceneConfig) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    lo, hi = cfg.depth_range
    z = 1.0 / rng.uniform(1.0 / hi, 1.0 / lo, n_gaussians)
    half_w = 0.4 * cfg.width / cfg.focal
    half_h = 0.4 * cfg.height / cfg.focal
    x = rng.uniform(-half_w, half_w, n_gaussians) * z
    y = rng.uniform(-half_h, half_h, n_gaussians) * z
    px = rng.uniform(*cfg.pixel_sigma, n_gaussians)
    aniso = rng.uniform(0.6, 1.4, (n_gaussians, 3))
    scales = (px * z / cfg.focal)[:, None] * aniso
    q = rng.normal(size=(n_gaussians, 4))
    colors = rng.uniform(0.1, 0.95, (n_gaussians, 3))
    sh = rgb_to_sh0(colors)[:, None, :]
    return GaussianCloud(
        np.stack([x, y, z], axis=1), q / np.linalg.norm(q, axis=1, keepdims=True),
        np.log(scales), np.full(n_gaussians, inverse_sigmoid(cfg.opacity)), sh,
    )


def toy_cameras(seed: int, n_views: int, cfg: ToySceneConfig) -> list[Camera]:
    rng = np.random.default_rng(seed + 1)
    lo, hi = cfg.depth_range
    target = np.array([0.0, 0.0, 0.5 * (lo + hi)])
    cams = []
    for i in range(n_views):
        eye = np.array([rng.uniform(-1, 1) * cfg.baseline, rng.uniform(-1, 1) * cfg.baseline * 0.7, 0.0])
        cams.append(
            Camera.look_at(
                eye, target, fx=cfg.focal, fy=cfg.focal, cx=cfg.width / 2, cy=cfg.height / 2,
                width=cfg.width, height=cfg.height, name=f"view_{i:03d}",
            )
        )
    return cams


def sparse_points(gt: GaussianCloud, cameras: list[Camera], seed: int, cfg: ToySceneConfig) -> PointCloud:
    """SfM-like sparse cloud: a few noisy samples per Gaussian, far-plane ones thinned."""
    from .pointcloud import relative_depth

    rng = np.random.default_rng(seed + 2)
    zr = relative_depth(gt.positions, cameras)
    colors = np.clip(gt.sh[:, 0, :] * 0.28209479177387814 + 0.5, 0, 1)
    pos, col = [], []
    for i in range(len(gt)):
        far = zr[i] >= 1.0 - cfg.far_fraction
        n = cfg.points_per_gaussian
        if far:
            n = int(rng.binomial(n, cfg.far_keep))
        for _ in range(n):
            pos.append(gt.positions[i] + rng.normal(size=3) * gt.scales[i] * cfg.point_noise)
            col.append(np.clip(colors[i] + rng.normal(size=3) * cfg.color_noise, 0, 1))
    if not pos:
        pos, col = [gt.positions[0]], [colors[0]]
    return PointCloud(np.array(pos), np.array(col))


def render_depth(cloud: GaussianCloud, camera: Camera, background_depth: float):
    """Sharp image and expected depth (background depth fills remaining transmittance)."""
    _, out = render_with_state(cloud, camera, config=RasterConfig())
    T = out.final_transmittance
    depth = out.depth * (1.0 - T) + T * background_depth
    return out.image, depth


def generate_toy_scene(
    out_dir,
    seed: int = 0,
    n_gaussians: int = 40,
    n_train: int = 12,
    n_test: int = 4,
    params: DefocusParams | None = None,
    cfg: ToySceneConfig | None = None,
) -> SceneDataset:
    """Write a forward-facing synthetic scene: blurred train views, sharp test views.

    Besides the dataset proper, ``reference/`` holds the blurred version of
    every test view and the sharp version of every train view, and
    ``ground_truth.ckpt`` holds the generating cloud.
    """
    if n_gaussians < 1:
        raise InvalidInputError("n_gaussians must be >= 1")
    params = params or DefocusParams()
    cfg = cfg or ToySceneConfig()
    gt = toy_ground_truth(seed, n_gaussians, cfg)
    cams = toy_cameras(seed, n_train + n_test, cfg)
    test_every = max(1, (n_train + n_test) // max(n_test, 1))
    test_ids = set(list(range(test_every - 1, n_train + n_test, test_every))[:n_test])
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "reference").mkdir(parents=True, exist_ok=True)

    focus_rng = np.random.default_rng(seed + 3)
    images, splits, paths, focus = [], [], [], []
    blur_psnr = {"train": [], "test": []}
    for i, cam in enumerate(cams):
        sharp, depth = render_depth(gt, cam, cfg.background_depth)
        sharp_q = to_uint8(sharp) / 255.0
        f = params.focus_depth if params.focus_range is None else float(focus_rng.uniform(*params.focus_range))
        focus.append(f)
        blurred = synth_defocus(sharp, depth, params.at_focus(f), rng_seed=seed * 1000 + i)
        blurred = to_uint8(blurred) / 255.0
        split = "test" if i in test_ids else "train"
        blur_psnr[split].append(psnr(blurred, sharp_q))
        if split == "train":
            images.append(blurred)
            write_png(out / "reference" / f"{cam.name}_sharp.png", sharp_q)
        else:
            images.append(sharp_q)
            write_png(out / "reference" / f"{cam.name}_blurred.png", blurred)
        splits.append(split)
        paths.append(f"images/{cam.name}.png")

    points = sparse_points(gt, [c for c, s in zip(cams, splits) if s == "train"], seed, cfg)
    ds = SceneDataset(cams, images, splits, paths, points, root=out)
    save_scene(ds, out)

    from .checkpoint import save_checkpoint

    save_checkpoint(out / "ground_truth.ckpt", gt)
    info = {
        "seed": seed,
        "n_gaussians": n_gaussians,
        "focus_depth": [round(f, 6) for f in focus],
        "blur_strength": params.blur_strength,
        "max_sigma": params.max_sigma,
        "blurred_psnr_train": [round(v, 6) for v in blur_psnr["train"]],
        "blurred_psnr_test": [round(v, 6) for v in blur_psnr["test"]],
    }
    (out / "reference" / "blur_info.json").write_text(json.dumps(info, indent=1) + "\n")
    ds.extras["blur_info"] = info
    return ds


def blurred_test_baseline(dataset: SceneDataset) -> float:
    """Mean PSNR of the blurred test views against the sharp ones (needs ``reference/``)."""
    if dataset.root is None:
        raise LoadError("dataset has no root directory")
    vals = []
    for i in dataset.indices("test"):
        ref = dataset.root / "reference" / f"{dataset.cameras[i].name}_blurred.png"
        if not ref.is_file():
            raise LoadError(f"{ref}: blurred reference not found")
        vals.append(psnr(read_png(ref), dataset.images[i]))
    return float(np.mean(vals))
