"""Adaptive spatial compression: Canny edges, quad-tree patching, variable-size tokens.

Smooth regions end up in large patches and edge-dense regions in small ones.
Every patch is pooled to a fixed ``min_side x min_side`` footprint before
embedding, so one projection serves all patch sizes; a per-scale embedding
tells attention how large the patch was.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage, sparse

from .numerics import ops
from .numerics.tensor import as_tensor

# gradient direction bins (0, 45, 90, 135 degrees) as (row, col) steps
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


@dataclass(frozen=True)
class CannyParams:
    gaussian_sigma: float = 1.0
    low_frac: float = 0.10
    high_frac: float = 0.20

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be non-negative")
        if not 0 <= self.low_frac <= self.high_frac <= 1:
            raise ValueError("need 0 <= low_frac <= high_frac <= 1")


@dataclass(frozen=True)
class EdgeMap:
    edges: np.ndarray
    params: CannyParams = CannyParams()

    @property
    def height(self) -> int:
        return self.edges.shape[0]

    @property
    def width(self) -> int:
        return self.edges.shape[1]


def _neighbor(a, dr, dc):
    """``a[r + dr, c + dc]`` with zeros outside the image."""
    out = np.zeros_like(a)
    h, w = a.shape
    rs, re = max(dr, 0), h + min(dr, 0)
    cs, ce = max(dc, 0), w + min(dc, 0)
    out[rs - dr:re - dr, cs - dc:ce - dc] = a[rs:re, cs:ce]
    return out


def canny(image, params: CannyParams = CannyParams()) -> EdgeMap:
    """Classical Canny detector on a single-channel image.

    Ties in non-maximum suppression are broken towards the positive gradient
    direction, so a symmetric ridge yields a one-pixel-wide line.
    """
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError(f"canny needs a 2-D image of at least 3x3, got shape {img.shape}")
    if params.gaussian_sigma > 0:
        img = ndimage.gaussian_filter(img, params.gaussian_sigma, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    g_max = mag.max()
    if g_max <= 0:
        return EdgeMap(np.zeros(img.shape, dtype=bool), params)

    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    sector = np.mod(np.rint(angle / 45.0).astype(int), 4)
    keep = np.zeros(img.shape, dtype=bool)
    for s, (dr, dc) in enumerate(_DIRECTIONS):
        fwd = _neighbor(mag, dr, dc)
        back = _neighbor(mag, -dr, -dc)
        keep |= (sector == s) & (mag >= back) & (mag > fwd)
    thin = np.where(keep, mag, 0.0)

    weak = thin >= params.low_frac * g_max
    strong = thin >= params.high_frac * g_max
    weak &= thin > 0
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return EdgeMap(np.zeros(img.shape, dtype=bool), params)
    seeded = np.zeros(count + 1, dtype=bool)
    seeded[np.unique(labels[strong & weak])] = True
    seeded[0] = False
    return EdgeMap(seeded[labels], params)


# ---------------------------------------------------------------- quad-tree

def _check_sides(min_side: int, max_side: int) -> int:
    if min_side < 1 or max_side < min_side or max_side % min_side:
        raise ValueError(f"max_side {max_side} is not a power-of-two multiple of min_side {min_side}")
    ratio = max_side // min_side
    if ratio & (ratio - 1):
        raise ValueError(f"max_side {max_side} is not a power-of-two multiple of min_side {min_side}")
    return int(round(math.log2(ratio)))


@dataclass(frozen=True)
class PatchSet:
    patches: tuple
    image_height: int
    image_width: int
    min_side: int
    max_side: int
    density_threshold: float

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def num_scales(self) -> int:
        return _check_sides(self.min_side, self.max_side) + 1

    def scale_index(self) -> np.ndarray:
        """log2(side / min_side) per patch, indexing the patch-scale embedding."""
        sides = np.array([p[2] for p in self.patches], dtype=np.int64)
        return np.log2(sides // self.min_side).round().astype(np.intp)

    def rasterize(self) -> np.ndarray:
        """Patch index per pixel; raises if patches overlap or leave holes."""
        owner = np.full((self.image_height, self.image_width), -1, dtype=np.int64)
        for i, (r, c, s) in enumerate(self.patches):
            block = owner[r:r + s, c:c + s]
            if block.shape != (s, s) or np.any(block >= 0):
                raise ValueError(f"patch {i} at ({r}, {c}) side {s} overlaps or leaves the image")
            block[...] = i
        if np.any(owner < 0):
            raise ValueError("patches do not cover the image")
        return owner

    def to_json(self) -> str:
        return json.dumps({
            "min_side": self.min_side, "max_side": self.max_side, "threshold": self.density_threshold,
            "height": self.image_height, "width": self.image_width,
            "patches": [list(p) for p in self.patches],
        })

    @classmethod
    def from_json(cls, text: str) -> "PatchSet":
        doc = json.loads(text)
        return cls(tuple(tuple(int(v) for v in p) for p in doc["patches"]), int(doc["height"]),
                   int(doc["width"]), int(doc["min_side"]), int(doc["max_side"]), float(doc["threshold"]))


def uniform_patchset(height: int, width: int, side: int, max_side: int = None) -> PatchSet:
    """Every patch of one size; the degenerate partition used by plain ViT patching."""
    if height % side or width % side:
        raise ValueError(f"side {side} does not divide {height}x{width}")
    patches = tuple((r, c, side) for r in range(0, height, side) for c in range(0, width, side))
    return PatchSet(patches, height, width, side, max_side or side, 0.0)


def quadtree_partition(edges, min_side: int, max_side: int, density_threshold: float) -> PatchSet:
    """Split max_side cells while their edge density strictly exceeds the threshold.

    Patches are returned sorted by (row, col).
    """
    _check_sides(min_side, max_side)
    if not 0 <= density_threshold <= 1:
        raise ValueError("density_threshold must lie in [0, 1]")
    mask = np.asarray(getattr(edges, "edges", edges), dtype=bool)
    h, w = mask.shape
    if h % max_side or w % max_side:
        raise ValueError(f"edge map {h}x{w} is not padded to a multiple of max_side {max_side}")
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = mask.cumsum(0).cumsum(1)

    def count(r, c, s):
        return integral[r + s, c + s] - integral[r, c + s] - integral[r + s, c] + integral[r, c]

    out = []
    stack = [(r, c, max_side) for r in range(0, h, max_side) for c in range(0, w, max_side)]
    while stack:
        r, c, s = stack.pop()
        if s > min_side and count(r, c, s) / (s * s) > density_threshold:
            half = s // 2
            stack.extend([(r, c, half), (r, c + half, half), (r + half, c, half), (r + half, c + half, half)])
        else:
            out.append((r, c, s))
    out.sort()
    return PatchSet(tuple(out), h, w, min_side, max_side, float(density_threshold))


def compression_ratio(ps: PatchSet, uniform_side: int = None) -> float:
    """Uniform-patch token count divided by the quad-tree token count."""
    side = ps.min_side if uniform_side is None else uniform_side
    if side != ps.min_side:
        raise ValueError("compression ratio is defined against min_side patches")
    return (ps.image_height * ps.image_width / side ** 2) / len(ps)


def pad_to_multiple(x, multiple: int):
    """Replicate-pad the bottom and right edges of ``[C, H, W]`` up to a multiple."""
    _, h, w = x.shape
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return as_tensor(x)
    return ops.pad_edge(x, (0, ph, 0, pw))


# ---------------------------------------------------------------- tokens

@lru_cache(maxsize=64)
def _pool_matrices(ps: PatchSet):
    """(average-pool, nearest-broadcast) maps between pixels and patch sub-cells.

    Sub-cell rows are ordered patch-major, then (a, b) within the
    ``min_side x min_side`` footprint.
    """
    m = ps.min_side
    rows, cols, vals = [], [], []
    base = 0
    for r, c, s in ps.patches:
        f = s // m
        a, b, i, j = np.meshgrid(np.arange(m), np.arange(m), np.arange(f), np.arange(f), indexing="ij")
        rows.append(base + (a * m + b).ravel())
        cols.append(((r + a * f + i) * ps.image_width + (c + b * f + j)).ravel())
        vals.append(np.full(a.size, 1.0 / (f * f)))
        base += m * m
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    shape = (base, ps.image_height * ps.image_width)
    pool = sparse.csr_matrix((vals, (rows, cols)), shape=shape)
    spread = sparse.csr_matrix((np.ones_like(vals), (cols, rows)), shape=shape[::-1])
    return pool, spread


def tokenize(feature_image, ps: PatchSet, weight, scale_table, bias=None):
    """Pool each patch to min_side x min_side, embed it, add its scale embedding.

    ``weight`` is ``[C * min_side**2, dim]`` with inputs flattened channel-first,
    matching conventional ViT patch embedding. Returns ``(tokens, ps)``.
    """
    x = as_tensor(feature_image)
    c, h, w = x.shape
    if (h, w) != (ps.image_height, ps.image_width):
        raise ValueError(f"feature image {h}x{w} does not match layout {ps.image_height}x{ps.image_width}")
    m2 = ps.min_side ** 2
    pool, _ = _pool_matrices(ps)
    pixels = ops.transpose(ops.reshape(x, (c, h * w)), (1, 0))
    cells = ops.sparse_matmul(pool, pixels)
    cells = ops.transpose(ops.reshape(cells, (len(ps), m2, c)), (0, 2, 1))
    tokens = ops.linear(ops.reshape(cells, (len(ps), c * m2)), weight, bias)
    return ops.add(tokens, ops.take_rows(scale_table, ps.scale_index())), ps


def detokenize(tokens, ps: PatchSet, weight, smooth_kernel, bias=None, out_hw=None):
    """Project tokens to pixel blocks, broadcast over each patch, smooth with one 3x3 conv.

    ``weight`` is ``[dim, C * min_side**2]``. The result covers the padded
    layout and is cropped to ``out_hw`` when given.
    """
    tokens = as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[0] != len(ps):
        raise ValueError(f"{tokens.shape[0]} tokens for a layout of {len(ps)} patches")
    m2 = ps.min_side ** 2
    c = weight.shape[-1] // m2
    h, w = ps.image_height, ps.image_width
    _, spread = _pool_matrices(ps)
    cells = ops.reshape(ops.linear(tokens, weight, bias), (len(ps), c, m2))
    cells = ops.reshape(ops.transpose(cells, (0, 2, 1)), (len(ps) * m2, c))
    pixels = ops.sparse_matmul(spread, cells)
    img = ops.reshape(ops.transpose(pixels, (1, 0)), (c, h, w))
    img = ops.conv2d(img, smooth_kernel, padding="same")
    if out_hw is not None and tuple(out_hw) != (h, w):
        img = ops.getitem(img, (slice(None), slice(0, out_hw[0]), slice(0, out_hw[1])))
    return img


def identity_kernel(channels: int, dtype=np.float64) -> np.ndarray:
    k = np.zeros((channels, channels, 3, 3), dtype=dtype)
    k[np.arange(channels), np.arange(channels), 1, 1] = 1.0
    return k
