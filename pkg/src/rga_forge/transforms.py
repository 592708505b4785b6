"""Differentiable 2D input-diversity transforms.

Random similarity transforms (translate/rotate/scale), intensity-scaled
copies for scale-invariant gradient averaging, and the resize-and-pad
diversity transform. All image-valued outputs are differentiable with
respect to the input image; transform parameters are not differentiated.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError, Tensor, _node


@dataclass(frozen=True)
class SimilarityTransform:
    """Translate by (tx, ty) pixels, rotate by theta radians, scale by s, about the image center."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    @property
    def is_identity(self):
        return self.tx == 0.0 and self.ty == 0.0 and self.theta == 0.0 and self.scale == 1.0


IDENTITY = SimilarityTransform()


@dataclass
class TransformConfig:
    # Defaults are sized for the small images this package ships with: on a
    # 16-64 px canvas the feature cells are 4 px, so even modest warps
    # decorrelate the gradient from the unwarped image.
    max_translate_frac: float = 0.02
    max_rotate_rad: float = math.radians(2.0)
    scale_range: tuple = (0.98, 1.02)
    si_scales: tuple = (1.0, 0.5, 0.25)
    dim_prob: float = 0.7
    dim_pad_max_frac: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.max_translate_frac < 1.0:
            raise ValueError(f"max_translate_frac out of [0, 1): {self.max_translate_frac}")
        if self.max_rotate_rad < 0.0:
            raise ValueError(f"max_rotate_rad must be >= 0: {self.max_rotate_rad}")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi: {self.scale_range}")
        if len(self.si_scales) == 0 or any(not 0.0 < c <= 1.0 for c in self.si_scales):
            raise ValueError(f"si_scales must be nonempty with entries in (0, 1]: {self.si_scales}")
        if not 0.0 <= self.dim_prob <= 1.0:
            raise ValueError(f"dim_prob out of [0, 1]: {self.dim_prob}")
        if not 0.0 <= self.dim_pad_max_frac < 1.0:
            raise ValueError(f"dim_pad_max_frac out of [0, 1): {self.dim_pad_max_frac}")


def sample_rst(rng, cfg, w, h):
    """Draw a random similarity transform. Draw order: tx, ty, theta, scale."""
    lim = cfg.max_translate_frac * min(w, h)
    tx = float(rng.uniform(-lim, lim))
    ty = float(rng.uniform(-lim, lim))
    theta = float(rng.uniform(-cfg.max_rotate_rad, cfg.max_rotate_rad))
    scale = float(rng.uniform(cfg.scale_range[0], cfg.scale_range[1]))
    return SimilarityTransform(tx, ty, theta, scale)


def _bilinear_gather(image, sy, sx, clamp_edges):
    """Sample image (Tensor, H x W x C) at float64 coords (sy, sx).

    Returns an output node of shape sy.shape + (C,). With clamp_edges the
    coords are clamped to the image rectangle (border replication);
    otherwise out-of-bounds corners contribute zero.
    """
    data = image.data
    h, w, _ = data.shape
    if clamp_edges:
        sy = np.clip(sy, 0.0, h - 1.0)
        sx = np.clip(sx, 0.0, w - 1.0)
    iy0 = np.floor(sy)
    ix0 = np.floor(sx)
    fy = sy - iy0
    fx = sx - ix0
    iy0 = iy0.astype(np.int64)
    ix0 = ix0.astype(np.int64)

    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            cy = iy0 + dy
            cx = ix0 + dx
            wgt = wy * wx
            inside = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
            wgt = np.where(inside, wgt, 0.0).astype(data.dtype)
            cy = np.clip(cy, 0, h - 1)
            cx = np.clip(cx, 0, w - 1)
            corners.append((cy, cx, wgt))

    out_data = np.zeros(sy.shape + (data.shape[2],), dtype=data.dtype)
    for cy, cx, wgt in corners:
        out_data += data[cy, cx] * wgt[..., None]
    out = _node(out_data, (image,), "bilinear")

    def _bw():
        for cy, cx, wgt in corners:
            np.add.at(image.grad, (cy, cx), out.grad * wgt[..., None])

    out._backward = _bw
    return out


def warp(image, t):
    """Similarity-warp an H x W x 3 image about its center, bilinear, zero fill.

    Inverse mapping: each output pixel reads the source at
    R(-theta) (dest - center - (tx, ty)) / s + center. The identity
    transform reproduces the input bit-exactly (integer sample coords).
    """
    if image.data.ndim != 3:
        raise ShapeError(f"warp expects 3 axes (H, W, C), got {image.data.ndim}")
    h, w, _ = image.data.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    cos_t = math.cos(t.theta)
    sin_t = math.sin(t.theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy = yy - cy - t.ty
    dx = xx - cx - t.tx
    sx = (cos_t * dx + sin_t * dy) / t.scale + cx
    sy = (-sin_t * dx + cos_t * dy) / t.scale + cy
    return _bilinear_gather(image, sy, sx, clamp_edges=False)


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize with half-pixel centers and border replication."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w, _ = image.data.shape
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    sy, sx = np.meshgrid(sy, sx, indexing="ij")
    return _bilinear_gather(image, sy, sx, clamp_edges=True)


def _place_into(image, out_h, out_w, top, left):
    """Embed an image into an out_h x out_w zero canvas at (top, left)."""
    h, w, c = image.data.shape
    data = np.zeros((out_h, out_w, c), dtype=image.data.dtype)
    data[top:top + h, left:left + w] = image.data
    out = _node(data, (image,), "pad")

    def _bw():
        image.grad += out.grad[top:top + h, left:left + w]

    out._backward = _bw
    return out


def scale_copies(image, si_scales):
    """Intensity-scaled copies c * image, one per scale factor."""
    return [image * float(c) for c in si_scales]


def dim_transform(rng, image, cfg):
    """Randomly resize down and zero-pad back to the original size.

    Applied with probability dim_prob, otherwise returns the input
    unchanged. Draw order: gate, new height, new width, top offset,
    left offset.
    """
    gate = float(rng.random())
    if gate >= cfg.dim_prob:
        return image
    h, w, _ = image.data.shape
    max_dh = int(h * cfg.dim_pad_max_frac)
    max_dw = int(w * cfg.dim_pad_max_frac)
    new_h = int(rng.integers(h - max_dh, h + 1))
    new_w = int(rng.integers(w - max_dw, w + 1))
    top = int(rng.integers(0, h - new_h + 1))
    left = int(rng.integers(0, w - new_w + 1))
    small = resize_bilinear(image, new_h, new_w)
    if new_h == h and new_w == w:
        return small
    return _place_into(small, h, w, top, left)


def derive_rng(seed, *subkeys):
    """Deterministic child generator for (seed, subkeys...)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed,) + subkeys)))
