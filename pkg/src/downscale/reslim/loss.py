"""Latitude-weighted squared error plus a distance-weighted total-variation prior.

The prior sums a Huber-smoothed absolute difference over every pair of
8-neighbours, weighted by 1 / distance (1 for axial pairs, 1/sqrt(2) for
diagonal ones), and averages over the pairs present in the field. Ordered and
unordered pair counts give the same mean, so each pair is visited once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numerics import ops
from ..numerics.tensor import as_tensor

# (row step, col step, distance weight) for one direction of each neighbour pair
NEIGHBOR_OFFSETS = ((0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0 / math.sqrt(2.0)), (1, -1, 1.0 / math.sqrt(2.0)))


@dataclass(frozen=True)
class LatWeights:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0 or np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("latitude weights must be a non-empty vector of positive values")
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size

    def rows(self, start: int, stop: int) -> "LatWeights":
        """Sub-range of rows, keeping the global normalisation."""
        return LatWeights(self.weights[start:stop])

    @classmethod
    def uniform(cls, rows: int) -> "LatWeights":
        return cls(np.ones(rows))

    @classmethod
    def from_latitudes(cls, latitudes_deg) -> "LatWeights":
        c = np.cos(np.radians(np.asarray(latitudes_deg, dtype=np.float64)))
        if np.any(c <= 0):
            raise ValueError("latitudes must lie strictly inside (-90, 90)")
        return cls(c / c.mean())

    @classmethod
    def for_grid(cls, grid) -> "LatWeights":
        """cos-latitude weights for a georeferenced grid, ones for a bare array."""
        if hasattr(grid, "row_latitudes"):
            return cls.from_latitudes(grid.row_latitudes())
        return cls.uniform(np.shape(grid)[-2])


@dataclass(frozen=True)
class TvPrior:
    weight: float = 1e-3
    huber_delta: float = 1e-3

    def __post_init__(self):
        if self.weight < 0 or self.huber_delta <= 0:
            raise ValueError("TV weight must be >= 0 and huber_delta > 0")


def neighbor_pair_count(channels: int, h: int, w: int) -> int:
    """Unordered 8-neighbour pairs in a [channels, h, w] field."""
    return channels * (h * (w - 1) + (h - 1) * w + 2 * max(h - 1, 0) * max(w - 1, 0))


def _shifted(x, dr, dc):
    """(x[i], x[i + (dr, dc)]) over every position where both exist."""
    _, h, w = x.shape
    rows_a, rows_b = slice(0, h - dr), slice(dr, h)
    if dc >= 0:
        cols_a, cols_b = slice(0, w - dc), slice(dc, w)
    else:
        cols_a, cols_b = slice(-dc, w), slice(0, w + dc)
    return ops.getitem(x, (slice(None), rows_a, cols_a)), ops.getitem(x, (slice(None), rows_b, cols_b))


def data_term(pred, truth, latw: LatWeights):
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if len(latw) != pred.shape[-2]:
        raise ValueError(f"{len(latw)} latitude weights for {pred.shape[-2]} rows")
    w = latw.weights.astype(pred.dtype)[:, None]
    return ops.mean(ops.mul(ops.square(ops.sub(pred, truth)), w))


def tv_term(pred, prior: TvPrior):
    pred = as_tensor(pred)
    k, h, w = pred.shape
    pairs = neighbor_pair_count(k, h, w)
    if pairs == 0 or prior.weight == 0:
        return ops.mul(ops.sum(pred), 0.0)
    total = None
    for dr, dc, b in NEIGHBOR_OFFSETS:
        if h - dr < 1 or w - abs(dc) < 1:
            continue
        a, c = _shifted(pred, dr, dc)
        part = ops.mul(ops.sum(ops.huber(ops.sub(a, c), prior.huber_delta)), b)
        total = part if total is None else ops.add(total, part)
    return ops.mul(total, prior.weight / pairs)


def bayesian_loss(pred, truth, latw: LatWeights, prior: TvPrior, terms: dict = None):
    """Weighted data misfit plus TV prior on the prediction; returns a scalar tensor."""
    t1 = data_term(pred, truth, latw)
    t2 = tv_term(pred, prior)
    if terms is not None:
        terms["data"], terms["tv"] = float(t1.data), float(t2.data)
    return ops.add(t1, t2)
