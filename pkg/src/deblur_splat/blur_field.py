"""Per-Gaussian covariance transformation MLP.

For each Gaussian the network reads (gamma(x), r, s, gamma(v)) and predicts
multipliers delta_r (4) and delta_s (3), floored at 1, which dilate the
Gaussian while rendering training views. Rendering test views skips the
network entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidInputError
from .gaussians import Camera, GaussianCloud
from .rasterizer import CloudGradients, Overrides


@dataclass
class EncodingConfig:
    L_x: int = 4
    L_v: int = 4

    def __post_init__(self):
        if self.L_x < 1 or self.L_v < 1:
            raise InvalidInputError("frequency counts must be >= 1")

    @property
    def input_dim(self) -> int:
        return 6 * self.L_x + 4 + 3 + 6 * self.L_v


def encode(p: np.ndarray, L: int) -> np.ndarray:
    """Sinusoidal encoding: for k in 0..L-1, [sin(2^k pi p), cos(2^k pi p)] blocks."""
    if L < 1:
        raise InvalidInputError("L must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    freqs = (2.0 ** np.arange(L)) * np.pi
    arg = p[..., None, :] * freqs[:, None]  # (..., L, d)
    out = np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)  # (..., L, 2d)
    return out.reshape(p.shape[:-1] + (2 * L * p.shape[-1],))


def encode_vjp(p: np.ndarray, L: int, grad: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    d = p.shape[-1]
    freqs = (2.0 ** np.arange(L)) * np.pi
    arg = p[..., None, :] * freqs[:, None]
    g = grad.reshape(p.shape[:-1] + (L, 2 * d))
    gs, gc = g[..., :d], g[..., d:]
    return np.sum((gs * np.cos(arg) - gc * np.sin(arg)) * freqs[:, None], axis=-2)


@dataclass
class OffsetBatch:
    delta_r: np.ndarray
    delta_s: np.ndarray
    raw: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


class BlurField:
    """MLP F(gamma(x), r, s, gamma(v)) -> (delta_r, delta_s).

    ``weights`` is a list of (W, b) with W of shape (fan_in, fan_out). Positions
    are mapped to [-1, 1]^3 by the scene box before encoding. The last layer's
    output is multiplied by ``output_scale`` so a freshly initialized network
    sits close to the identity transform.
    """

    def __init__(self, encoding: EncodingConfig, weights, box_center, box_half, output_scale: float = 1.0):
        self.encoding = encoding
        self.weights = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in weights]
        self.box_center = np.asarray(box_center, dtype=np.float64)
        self.box_half = np.maximum(np.asarray(box_half, dtype=np.float64), 1e-9)
        if self.weights[0][0].shape[0] != encoding.input_dim or self.weights[-1][0].shape[1] != 7:
            raise InvalidInputError("layer shapes do not match the encoding config")
        self.output_scale = float(output_scale)
        self.version = 0
        self.forward_calls = 0

    @classmethod
    def create(
        cls,
        encoding: EncodingConfig | None = None,
        box_min=(-1.0, -1.0, -1.0),
        box_max=(1.0, 1.0, 1.0),
        hidden: int = 64,
        n_hidden: int = 3,
        seed: int = 0,
        zero: bool = False,
        output_scale: float = 1.0,
    ) -> "BlurField":
        """Xavier-uniform weights with zero biases; ``zero=True`` gives all-zero weights."""
        encoding = encoding or EncodingConfig()
        rng = np.random.default_rng(seed)
        dims = [encoding.input_dim] + [hidden] * n_hidden + [7]
        weights = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            W = np.zeros((fan_in, fan_out)) if zero else rng.uniform(-bound, bound, (fan_in, fan_out))
            weights.append((W, np.zeros(fan_out)))
        box_min, box_max = np.asarray(box_min, float), np.asarray(box_max, float)
        return cls(encoding, weights, (box_min + box_max) / 2, (box_max - box_min) / 2, output_scale)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(self.weights):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def touch(self) -> None:
        """Mark weights as modified; offsets computed earlier become stale."""
        self.version += 1

    def copy(self) -> "BlurField":
        return BlurField(
            self.encoding, [(W.copy(), b.copy()) for W, b in self.weights], self.box_center, self.box_half,
            self.output_scale,
        )

    def folded_weights(self):
        """Layers with ``output_scale`` merged into the last one (as stored on disk)."""
        out = [(W, b) for W, b in self.weights[:-1]]
        W, b = self.weights[-1]
        return out + [(W * self.output_scale, b * self.output_scale)]

    # -- forward -------------------------------------------------------------

    def _inputs(self, cloud: GaussianCloud, camera: Camera):
        x = cloud.positions
        p = (x - self.box_center) / self.box_half
        rel = x - camera.center
        dist = np.linalg.norm(rel, axis=1, keepdims=True)
        v = rel / np.maximum(dist, 1e-30)
        s = np.exp(cloud.log_scales)
        h0 = np.concatenate(
            [encode(p, self.encoding.L_x), cloud.rotations, s, encode(v, self.encoding.L_v)], axis=1
        )
        return h0, dict(p=p, v=v, dist=dist, s=s)

    def predict_offsets(self, cloud: GaussianCloud, camera: Camera) -> OffsetBatch:
        if len(cloud) == 0:
            raise InvalidInputError("cannot predict offsets for an empty cloud")
        self.forward_calls += 1
        h, aux = self._inputs(cloud, camera)
        acts = [h]
        pre = []
        for i, (W, b) in enumerate(self.weights):
            z = h @ W + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < len(self.weights) - 1 else z
            acts.append(h)
        raw = h * self.output_scale
        delta = np.maximum(raw + 1.0, 1.0)
        return OffsetBatch(
            delta_r=delta[:, :4],
            delta_s=delta[:, 4:],
            raw=raw,
            cache=dict(acts=acts, pre=pre, version=self.version, n=len(cloud), **aux),
        )

    # -- backward ------------------------------------------------------------

    def backward_offsets(self, offsets: OffsetBatch, dl_ddelta_r: np.ndarray, dl_ddelta_s: np.ndarray):
        """Weight gradients plus gradients on the MLP input block.

        Returns (weight_grads: dict, input_grad: (N, input_dim)).
        """
        c = offsets.cache
        if c.get("version") != self.version:
            raise ContractViolation("offsets were computed with different blur-field weights")
        g = np.concatenate([dl_ddelta_r, dl_ddelta_s], axis=1) * (offsets.raw > 0.0) * self.output_scale
        grads = {}
        for i in range(len(self.weights) - 1, -1, -1):
            W, _ = self.weights[i]
            grads[f"W{i}"] = c["acts"][i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ W.T
            if i > 0:
                g = g * (c["pre"][i - 1] > 0.0)
        return grads, g

    def backward(self, cloud: GaussianCloud, offsets: OffsetBatch, cloud_grads: CloudGradients) -> dict[str, np.ndarray]:
        """Consume override gradients: fill cloud parameter gradients, return MLP weight gradients."""
        if cloud_grads.rotation_overrides is None or cloud_grads.scale_overrides is None:
            raise ContractViolation("cloud gradients carry no override gradients")
        if offsets.cache.get("n") != len(cloud):
            raise ContractViolation("offsets do not match the cloud size")
        g_rot = cloud_grads.rotation_overrides
        g_scale = cloud_grads.scale_overrides
        s = offsets.cache["s"]
        # rotation' = r * delta_r, scale' = s * delta_s
        cloud_grads.rotations = cloud_grads.rotations + offsets.delta_r * g_rot
        d_s = offsets.delta_s * g_scale
        weight_grads, g_in = self.backward_offsets(offsets, cloud.rotations * g_rot, s * g_scale)

        L_x, L_v = self.encoding.L_x, self.encoding.L_v
        nx = 6 * L_x
        g_px = g_in[:, :nx]
        g_r = g_in[:, nx : nx + 4]
        g_s = g_in[:, nx + 4 : nx + 7]
        g_v = g_in[:, nx + 7 :]
        cloud_grads.rotations = cloud_grads.rotations + g_r
        d_s = d_s + g_s
        cloud_grads.log_scales = cloud_grads.log_scales + d_s * s
        dp = encode_vjp(offsets.cache["p"], L_x, g_px) / self.box_half
        v = offsets.cache["v"]
        dv = encode_vjp(v, L_v, g_v)
        dx_v = (dv - v * np.sum(v * dv, axis=1, keepdims=True)) / offsets.cache["dist"]
        cloud_grads.positions = cloud_grads.positions + dp + dx_v
        return weight_grads


def apply_offsets(cloud: GaussianCloud, offsets: OffsetBatch) -> Overrides:
    """Transformed attributes r * delta_r and exp(log_s) * delta_s."""
    n = len(cloud)
    if offsets.delta_r.shape != (n, 4) or offsets.delta_s.shape != (n, 3):
        raise ContractViolation("offset shapes do not match the cloud")
    return Overrides(rotations=cloud.rotations * offsets.delta_r, scales=np.exp(cloud.log_scales) * offsets.delta_s)
