"""Procedurally generated fixture images.

Eight small RGB scenes (16x16 to 64x64) built from seeded soft gradients,
gaussian blobs, and sinusoidal stripes. Scene seeds are committed
constants: regenerating the suite is a pure function of this module, and
every image is snapped to the 8-bit grid so an image loaded back from PNG
equals the generated array exactly.
"""

import numpy as np

from . import pngio


def _blob_scene(rng, h, w, n_blobs):
    img = np.broadcast_to(rng.uniform(0.25, 0.45, 3), (h, w, 3)).copy()
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
        sigma = rng.uniform(0.18, 0.4) * min(h, w)
        color = rng.uniform(0.2, 0.9, 3)
        wgt = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
        img = img * (1 - wgt[..., None]) + color * wgt[..., None]
    return img


def _grad_scene(rng, h, w):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    ang = rng.uniform(0, 2 * np.pi)
    t = np.cos(ang) * xx + np.sin(ang) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0 = rng.uniform(0.15, 0.45, 3)
    c1 = rng.uniform(0.45, 0.8, 3)
    img = c0 + t[..., None] * (c1 - c0)
    cy, cx = rng.uniform(0.3 * h, 0.7 * h), rng.uniform(0.3 * w, 0.7 * w)
    sigma = rng.uniform(0.25, 0.4) * min(h, w)
    color = rng.uniform(0.3, 0.85, 3)
    yy2, xx2 = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    wgt = np.exp(-((yy2 - cy) ** 2 + (xx2 - cx) ** 2) / (2 * sigma * sigma))
    return img * (1 - wgt[..., None]) + color * wgt[..., None]


def _stripe_scene(rng, h, w):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    ang = rng.uniform(0, np.pi)
    period = rng.uniform(0.5, 0.9)
    phase = np.cos(ang) * xx + np.sin(ang) * yy
    t = 0.5 + 0.5 * np.sin(2 * np.pi * phase / period)
    c0 = rng.uniform(0.2, 0.4, 3)
    c1 = rng.uniform(0.5, 0.75, 3)
    return c0 + t[..., None] * (c1 - c0)


def _blobs(seed, h, w):
    return _blob_scene(np.random.default_rng(seed), h, w, max(2, min(h, w) // 16))


def _grad(seed, h, w):
    return _grad_scene(np.random.default_rng(seed), h, w)


def _stripes(seed, h, w):
    return _stripe_scene(np.random.default_rng(seed), h, w)


# (name, height, width, generator, committed scene seed)
_SPECS = (
    ("f0_stripes_16", 16, 16, _stripes, 26),
    ("f1_blobs_24", 24, 24, _blobs, 429),
    ("f2_blobs_32", 32, 32, _blobs, 836),
    ("f3_stripes_32", 32, 32, _stripes, 1247),
    ("f4_stripes_48", 48, 48, _stripes, 1676),
    ("f5_blobs_48x64", 48, 64, _blobs, 2046),
    ("f6_blobs_64", 64, 64, _blobs, 2475),
    ("f7_grad_64", 64, 64, _grad, 2884),
)


def fixture_names():
    return [name for name, _, _, _, _ in _SPECS]


def fixture_image(index):
    _, h, w, gen, seed = _SPECS[index]
    img = gen(seed, h, w)
    return pngio.quantize(np.clip(img, 0.0, 1.0).astype(np.float32))


def fixture_suite():
    return [(name, fixture_image(i)) for i, (name, _, _, _, _) in enumerate(_SPECS)]


def write_fixture_suite(directory):
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in fixture_suite():
        path = directory / f"{name}.png"
        pngio.save_image(path, img)
        paths.append(path)
    return paths
