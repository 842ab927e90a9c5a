"""Tile-wise sequence scaling: halo-padded tiles, tile-local attention, stitching.

A layout cuts the input into ``rows x cols`` core rectangles aligned to the
patch grid. Each tile is extracted with ``halo`` extra pixels on every side
(replicated where the image ends), run through the model on its own, and
cropped back to its core before stitching. Attention therefore only spans
one tile, which divides the quadratic attention cost by roughly T.

Training runs one model replica per worker. Every worker backpropagates its
share of the core-pixel-weighted loss, gradients are averaged in ascending
worker order, and each replica applies the same Adam update.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numerics import ops
from .numerics.flops import FlopLedger, credit_ledger, flop_scope, isolated_scope
from .numerics.optim import adam_step
from .numerics.tensor import as_tensor, backward, no_grad
from .reslim.loss import bayesian_loss
from .reslim.model import reslim_forward
from .reslim.train import prepare_pair, prior_for


class ReplicaDivergence(RuntimeError):
    pass


def _split(n: int, parts: int) -> list:
    base, extra = divmod(n, parts)
    sizes = [base + (1 if i < extra else 0) for i in range(parts)]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(parts)]


@dataclass(frozen=True)
class TileLayout:
    height: int
    width: int
    rows: int
    cols: int
    halo: int
    patch_size: int
    scale: int
    # (r0, r1, c0, c1) per tile, row-major over the tile grid
    cores: tuple
    padded: tuple

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def tile_shape(self, tid: int) -> tuple:
        r0, r1, c0, c1 = self.cores[tid]
        return r1 - r0 + 2 * self.halo, c1 - c0 + 2 * self.halo

    def output_core(self, tid: int) -> tuple:
        s = self.scale
        return tuple(s * v for v in self.cores[tid])

    def core_pixels(self, tid: int) -> int:
        r0, r1, c0, c1 = self.output_core(tid)
        return (r1 - r0) * (c1 - c0)

    def assign(self, workers: int) -> list:
        """Tiles owned by each worker (round-robin by tile id)."""
        return [[t for t in range(self.count) if t % workers == w] for w in range(workers)]


def plan_tiles(h: int, w: int, t_rows: int, t_cols: int, halo_width: int, patch_size: int,
               scale: int) -> TileLayout:
    """Split the patch grid as evenly as possible; earlier tiles take the remainder."""
    if t_rows < 1 or t_cols < 1:
        raise ValueError("tile grid must be at least 1x1")
    if h % patch_size or w % patch_size:
        raise ValueError(f"patch size {patch_size} does not divide {h}x{w}")
    gh, gw = h // patch_size, w // patch_size
    if t_rows > gh or t_cols > gw:
        raise ValueError(f"{t_rows}x{t_cols} tiles leave some tile smaller than one patch")
    if halo_width < 0 or halo_width % patch_size:
        raise ValueError("halo width must be a non-negative multiple of the patch size")
    row_spans = [(a * patch_size, b * patch_size) for a, b in _split(gh, t_rows)]
    col_spans = [(a * patch_size, b * patch_size) for a, b in _split(gw, t_cols)]
    smallest = min(min(b - a for a, b in row_spans), min(b - a for a, b in col_spans))
    if halo_width >= smallest and not (t_rows == 1 and t_cols == 1):
        raise ValueError(f"halo {halo_width} must be smaller than the smallest tile core ({smallest})")
    cores, padded = [], []
    for r0, r1 in row_spans:
        for c0, c1 in col_spans:
            cores.append((r0, r1, c0, c1))
            padded.append((max(r0 - halo_width, 0), min(r1 + halo_width, h),
                           max(c0 - halo_width, 0), min(c1 + halo_width, w)))
    return TileLayout(h, w, t_rows, t_cols, halo_width, patch_size, scale, tuple(cores), tuple(padded))


def extract_tile(x, layout: TileLayout, tid: int):
    """Padded rectangle of tile ``tid``, replicate-padded to the full halo at image borders."""
    if not 0 <= tid < layout.count:
        raise IndexError(f"tile id {tid} out of range for {layout.count} tiles")
    x = as_tensor(x)
    if x.shape[1:] != (layout.height, layout.width):
        raise ValueError(f"input {x.shape[1:]} does not match layout {layout.height}x{layout.width}")
    r0, r1, c0, c1 = layout.cores[tid]
    p0, p1, q0, q1 = layout.padded[tid]
    hw = layout.halo
    piece = ops.getitem(x, (slice(None), slice(p0, p1), slice(q0, q1)))
    missing = (hw - (r0 - p0), hw - (p1 - r1), hw - (c0 - q0), hw - (q1 - c1))
    if any(missing):
        piece = ops.pad_edge(piece, missing)
    return piece


def crop_core(tile_output, layout: TileLayout, tid: int):
    """Drop the (scaled) halo from one tile's output."""
    s, hw = layout.scale, layout.halo
    r0, r1, c0, c1 = layout.output_core(tid)
    return ops.getitem(tile_output, (slice(None), slice(s * hw, s * hw + r1 - r0), slice(s * hw, s * hw + c1 - c0)))


def stitch(tile_outputs, layout: TileLayout) -> np.ndarray:
    """Place every tile's core crop into the full ``[K, sH, sW]`` output."""
    if len(tile_outputs) != layout.count:
        raise ValueError(f"expected {layout.count} tile outputs, got {len(tile_outputs)}")
    s = layout.scale
    out = None
    for tid, t in enumerate(tile_outputs):
        if t is None:
            raise ValueError(f"missing output for tile {tid}")
        data = np.asarray(getattr(t, "data", t))
        th, tw = layout.tile_shape(tid)
        if data.shape[1:] != (s * th, s * tw):
            raise ValueError(f"tile {tid} output {data.shape[1:]} does not cover its padded rectangle")
        if out is None:
            out = np.zeros((data.shape[0], s * layout.height, s * layout.width), dtype=data.dtype)
        r0, r1, c0, c1 = layout.output_core(tid)
        out[:, r0:r1, c0:c1] = crop_core(data, layout, tid).data
    return out


def _run_workers(jobs, threads: int):
    """Run callables on a pool; results come back in submission order."""
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def tiled_forward(x, model, layout: TileLayout, threads: int = 1) -> np.ndarray:
    """Run the model tile by tile (no gradient) and stitch the cores."""

    def job(tid):
        def run():
            with isolated_scope() as ledger, no_grad():
                pred, _ = reslim_forward(extract_tile(x, layout, tid), model)
            return pred.data, ledger
        return run

    results = _run_workers([job(t) for t in range(layout.count)], threads)
    for _, ledger in results:
        credit_ledger(ledger)
    return stitch([r[0] for r in results], layout)


# ---------------------------------------------------------------- training

@dataclass
class WorkerReport:
    worker: int
    tile: int
    sample: int
    loss: float
    grad_norm: float
    flops: FlopLedger = field(default_factory=FlopLedger)
    wall_ms: float = 0.0


def _work_items(batch_size: int, layout: TileLayout, workers: int) -> list:
    """(sample, tile) pairs per worker: a sample's tiles are scattered across workers."""
    items = [(b, t) for b in range(batch_size) for t in range(layout.count)]
    return [[it for j, it in enumerate(items) if j % workers == w] for w in range(workers)]


def _worker_pass(wid, items, prepared, replica, layout):
    """This worker's share of the objective, ``sum_items (n_t / N) * loss``, as one graph."""
    n_total = sum(layout.core_pixels(t) for t in range(layout.count))
    reports, total = [], None
    prior = prior_for(replica.cfg)
    for b, tid in items:
        x, y, latw = prepared[b]
        start = time.perf_counter()
        with flop_scope() as ledger:
            pred, _ = reslim_forward(extract_tile(x, layout, tid), replica)
            core = crop_core(pred, layout, tid)
            r0, r1, c0, c1 = layout.output_core(tid)
            loss = bayesian_loss(core, y[:, r0:r1, c0:c1], latw.rows(r0, r1), prior)
        weighted = ops.mul(loss, layout.core_pixels(tid) / n_total)
        total = weighted if total is None else ops.add(total, weighted)
        reports.append(WorkerReport(wid, tid, b, float(loss.data), 0.0, ledger,
                                    1e3 * (time.perf_counter() - start)))
    return total, reports


def worker_gradients(batch, replicas, layout: TileLayout, threads: int = 1):
    """Per-worker gradients of ``(W / B) * sum_items (n_t / N) * loss``.

    Returns ``(grads, objective, reports)`` where ``grads[w]`` maps parameter
    names to arrays and ``objective`` is the global core-weighted mean loss.
    """
    if not batch:
        raise ValueError("empty batch")
    workers = len(replicas)
    cfg = replicas[0].cfg
    prepared = [prepare_pair(inp, truth, cfg) for inp, truth in batch]
    plan = _work_items(len(batch), layout, workers)

    def job(wid):
        def run():
            replica = replicas[wid]
            with isolated_scope() as ledger:
                total, reports = _worker_pass(wid, plan[wid], prepared, replica, layout)
            grads = {}
            value = 0.0
            if total is not None:
                local = ops.mul(total, workers / len(batch))
                value = float(local.data)
                backward(local)
                for name, p in replica.params.items():
                    grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad
                    p.grad = None
            else:
                grads = {name: np.zeros_like(p.data) for name, p in replica.params.items()}
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            for r in reports:
                r.grad_norm = norm
            return grads, value, reports, ledger
        return run

    results = _run_workers([job(w) for w in range(workers)], threads)
    grads, values, reports = [], [], []
    for g, v, rep, ledger in results:
        credit_ledger(ledger)
        grads.append(g)
        values.append(v)
        reports.extend(rep)
    objective = 0.0
    for v in values:
        objective += v
    return grads, objective / workers, reports


def average_gradients(grads: list) -> dict:
    """Arithmetic mean over workers, summed in ascending worker id."""
    out = {}
    for name in grads[0]:
        acc = np.zeros_like(grads[0][name])
        for g in grads:
            acc += g[name]
        out[name] = acc / len(grads)
    return out


def tiled_train_step(batch, replicas, layout: TileLayout, optimizers, threads: int = 1):
    """One synchronous data/tile-parallel step; returns ``(loss, reports)``.

    Exactly one gradient-averaging round happens per call. Raises
    :class:`ReplicaDivergence` if the replicas disagree afterwards.
    """
    if len(optimizers) != len(replicas):
        raise ValueError("need one optimizer state per replica")
    with flop_scope():
        grads, objective, reports = worker_gradients(batch, replicas, layout, threads)
    mean = average_gradients(grads)
    for replica, opt in zip(replicas, optimizers):
        for name, p in replica.params.items():
            p.grad = mean[name].copy()
        adam_step(replica.params, opt)
    hashes = [r.state_hash() for r in replicas]
    if len(set(hashes)) != 1:
        raise ReplicaDivergence(f"replica parameters diverged: {[h[:12] for h in hashes]}")
    return objective, reports


# ---------------------------------------------------------------- benchmarking

BENCH_COLUMNS = ("step", "T", "halo", "tokens_per_tile", "attn_madds", "wall_ms", "seam_rmse")


def seam_mask(layout: TileLayout, width: int) -> np.ndarray:
    """Output pixels within ``width`` of an interior tile boundary."""
    s = layout.scale
    mask = np.zeros((s * layout.height, s * layout.width), dtype=bool)
    for r0, r1, c0, c1 in (layout.output_core(t) for t in range(layout.count)):
        if r0 > 0:
            mask[max(r0 - width, 0):r0 + width, :] = True
        if c0 > 0:
            mask[:, max(c0 - width, 0):c0 + width] = True
    return mask


def seam_rmse(tiled: np.ndarray, reference: np.ndarray, layout: TileLayout) -> float:
    mask = seam_mask(layout, layout.scale * layout.patch_size)
    if not mask.any():
        return 0.0
    diff = (np.asarray(tiled, dtype=np.float64) - np.asarray(reference, dtype=np.float64))[:, mask]
    return float(np.sqrt(np.mean(diff ** 2)))


def bench_csv(rows: list, extra_columns: tuple = ()) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(BENCH_COLUMNS) + list(extra_columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()

