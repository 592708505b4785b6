"""Mask morphology and the segmentation-and-dilation map builder.

Masks are H x W boolean arrays; a mask set is an ordered list of masks
sharing dimensions. The region-guided map is an H x W x 3 float image in
[0, 1] where all-zero pixels mean "uncolored" and every colored pixel was
written exactly once (first writer wins).
"""

import json
from dataclasses import dataclass

import numpy as np

MASK_ORDERS = ("given", "area-desc")


@dataclass
class SadConfig:
    gamma: float = 0.1
    n_dilate: int = 100
    seed: int = 0
    mask_order: str = "given"

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.n_dilate < 0:
            raise ValueError(f"n_dilate must be >= 0, got {self.n_dilate}")
        if self.mask_order not in MASK_ORDERS:
            raise ValueError(f"mask_order must be one of {MASK_ORDERS}, got {self.mask_order!r}")


def as_mask(m):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"masks are 2-d, got {m.ndim} axes")
    return m.astype(bool, copy=False)


def mask_area(m):
    return int(np.count_nonzero(m))


def compute_grid_size(w, h, gamma):
    """floor(min(w, h) * gamma), clamped to at least 1."""
    if w < 1 or h < 1:
        raise ValueError(f"image extents must be >= 1, got {w}x{h}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    return max(1, int(min(w, h) * gamma))


def _dilate_once(m):
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    out[1:, 1:] |= m[:-1, :-1]
    out[1:, :-1] |= m[:-1, 1:]
    out[:-1, 1:] |= m[1:, :-1]
    out[:-1, :-1] |= m[1:, 1:]
    return out


def dilate_region(m, n):
    """n iterations of dilation with a 3x3 square structuring element."""
    if n < 0:
        raise ValueError(f"dilation count must be >= 0, got {n}")
    cur = as_mask(m).copy()
    for _ in range(n):
        nxt = _dilate_once(cur)
        if np.array_equal(nxt, cur):
            break  # fixpoint: further iterations cannot change anything
        cur = nxt
    return cur


def segment_grid(m, grid_size):
    """Split a mask along a grid anchored at (0, 0) into per-tile masks.

    Tiles are grid_size x grid_size (smaller at the right/bottom edges) and
    returned in row-major tile order; tiles with no set pixel are dropped.
    """
    if grid_size < 1:
        raise ValueError(f"grid_size must be >= 1, got {grid_size}")
    m = as_mask(m)
    h, w = m.shape
    out = []
    for ty in range(0, h, grid_size):
        for tx in range(0, w, grid_size):
            sub = m[ty:ty + grid_size, tx:tx + grid_size]
            if sub.any():
                tile = np.zeros_like(m)
                tile[ty:ty + grid_size, tx:tx + grid_size] = sub
                out.append(tile)
    return out


_OFFSETS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OFFSETS_8 = _OFFSETS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def _flood(m, visited, sy, sx, offsets):
    h, w = m.shape
    comp = np.zeros_like(m)
    stack = [(sy, sx)]
    visited[sy, sx] = True
    while stack:
        y, x = stack.pop()
        comp[y, x] = True
        for dy, dx in offsets:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not visited[ny, nx]:
                visited[ny, nx] = True
                stack.append((ny, nx))
    return comp


def connected_components(m, connectivity=4):
    """Maximal connected components of the set pixels, in scan order of their first pixel."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    m = as_mask(m)
    offsets = _OFFSETS_4 if connectivity == 4 else _OFFSETS_8
    visited = np.zeros_like(m)
    comps = []
    for y, x in zip(*np.nonzero(m & ~visited)):
        if visited[y, x]:
            continue
        comps.append(_flood(m, visited, int(y), int(x), offsets))
    return comps


def component_containing(m, y, x, connectivity=4):
    """The connected component of mask m that contains pixel (y, x)."""
    m = as_mask(m)
    h, w = m.shape
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"pixel ({x}, {y}) outside {w}x{h} mask")
    if not m[y, x]:
        return np.zeros_like(m)
    offsets = _OFFSETS_4 if connectivity == 4 else _OFFSETS_8
    visited = np.zeros_like(m)
    return _flood(m, visited, int(y), int(x), offsets)


def _check_mask_set(masks):
    if len(masks) == 0:
        raise ValueError("mask set is empty")
    masks = [as_mask(m) for m in masks]
    shape = masks[0].shape
    for i, m in enumerate(masks):
        if m.shape != shape:
            raise ValueError(f"mask {i} has shape {m.shape}, expected {shape}")
    return masks


def build_rgm(masks, cfg, write_counter=None):
    """Color a zero-initialized map from a mask set, small regions dilated,
    large regions split along the grid.

    A mask whose area is at most grid_size**2 is dilated cfg.n_dilate times
    and painted with one random color; larger masks get one random color
    per occupied grid tile. Color never overwrites: only currently
    uncolored (all-zero) pixels accept paint. Colors are drawn uniformly
    from {1..255}^3 / 255 (pure black excluded) in iteration order from a
    generator seeded with cfg.seed. `write_counter`, when given, is an
    H x W int array incremented on every pixel write (test instrumentation).
    """
    masks = _check_mask_set(masks)
    h, w = masks[0].shape
    if cfg.mask_order == "area-desc":
        masks = sorted(masks, key=mask_area, reverse=True)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    grid_size = compute_grid_size(w, h, cfg.gamma)
    rgm = np.zeros((h, w, 3), dtype=np.float32)

    def draw_color():
        return (rng.integers(1, 256, size=3) / 255.0).astype(np.float32)

    def paint(region, color):
        target = region & ~rgm.any(axis=2)
        rgm[target] = color
        if write_counter is not None:
            write_counter[target] += 1

    for m in masks:
        if mask_area(m) <= grid_size * grid_size:
            grown = dilate_region(m, cfg.n_dilate)
            paint(grown, draw_color())
        else:
            for block in segment_grid(m, grid_size):
                paint(block, draw_color())
    return rgm


def save_mask_set(directory, masks, stem="mask"):
    """Write one 8-bit grayscale PNG (0/255) per mask plus an index JSON."""
    from . import pngio

    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, m in enumerate(masks):
        name = f"{stem}_{i:03d}.png"
        pngio.save_mask(directory / name, m)
        entries.append({"file": name, "area": mask_area(m)})
    index = {"schema_version": 1, "masks": entries}
    pngio.atomic_write_text(directory / "index.json", json.dumps(index, indent=2))
    return directory / "index.json"


def load_mask_set(index_path):
    from . import pngio

    index = json.loads(index_path.read_text())
    return [pngio.load_mask(index_path.parent / e["file"]) for e in index["masks"]]
