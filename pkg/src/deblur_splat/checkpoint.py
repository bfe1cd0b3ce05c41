"""Binary checkpoint container for a GaussianCloud and an optional blur field.

Layout (all little-endian):
    16-byte header: b"DBSPLAT\\0", uint32 version, uint32 reserved
    int64 N, int64 D
    float32 positions (N,3), rotations (N,4), log_scales (N,3),
            opacity_logits (N,), sh (N,(D+1)^2,3)
    optional tagged section b"BLURFLD\\0", int64 byte length, then
        int32 L_x, int32 L_v, float32 box_center (3), float32 box_half (3),
        int64 n_layers, per layer: int64 rows, int64 cols,
        float32 W (rows*cols, row-major), float32 b (cols)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError
from .gaussians import PARAM_FIELDS, GaussianCloud, num_sh_coeffs

MAGIC = b"DBSPLAT\x00"
VERSION = 1
BLUR_TAG = b"BLURFLD\x00"


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode_checkpoint(cloud: GaussianCloud, blur_field=None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, 0))
    buf.write(struct.pack("<qq", len(cloud), cloud.sh_degree))
    for name in PARAM_FIELDS:
        buf.write(_f32(getattr(cloud, name)))
    if blur_field is not None:
        sec = io.BytesIO()
        enc = blur_field.encoding
        sec.write(struct.pack("<ii", enc.L_x, enc.L_v))
        sec.write(_f32(blur_field.box_center) + _f32(blur_field.box_half))
        layers = blur_field.folded_weights()
        sec.write(struct.pack("<q", len(layers)))
        for W, b in layers:
            sec.write(struct.pack("<qq", *W.shape))
            sec.write(_f32(W) + _f32(b))
        body = sec.getvalue()
        buf.write(BLUR_TAG + struct.pack("<q", len(body)) + body)
    return buf.getvalue()


def save_checkpoint(path, cloud: GaussianCloud, blur_field=None) -> None:
    Path(path).write_bytes(encode_checkpoint(cloud, blur_field))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LoadError(f"{self.path}: checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64).reshape(shape)


def decode_checkpoint(data: bytes, path="<bytes>"):
    """Returns (cloud, blur_field or None)."""
    r = _Reader(data, path)
    head = r.take(16)
    if head[:8] != MAGIC:
        raise LoadError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", head[8:12])
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    n, d = r.unpack("<qq")
    if n < 0 or not 0 <= d <= 3:
        raise LoadError(f"{path}: invalid header N={n} D={d}")
    k = num_sh_coeffs(d)
    cloud = GaussianCloud(r.floats(n, 3), r.floats(n, 4), r.floats(n, 3), r.floats(n), r.floats(n, k, 3))
    field = None
    if r.pos < len(data):
        tag = r.take(8)
        if tag != BLUR_TAG:
            raise LoadError(f"{path}: unknown section tag {tag!r}")
        (length,) = r.unpack("<q")
        end = r.pos + length
        from .blur_field import BlurField, EncodingConfig

        lx, lv = r.unpack("<ii")
        center, half = r.floats(3), r.floats(3)
        (n_layers,) = r.unpack("<q")
        weights = []
        for _ in range(n_layers):
            rows, cols = r.unpack("<qq")
            weights.append((r.floats(rows, cols), r.floats(cols)))
        if r.pos != end:
            raise LoadError(f"{path}: blur-field section length mismatch")
        field = BlurField(EncodingConfig(lx, lv), weights, center, half)
    return cloud, field


def load_checkpoint(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise LoadError(f"{path}: cannot read checkpoint ({e})") from e
    return decode_checkpoint(data, path)
