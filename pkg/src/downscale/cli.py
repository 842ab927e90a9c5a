"""Command-line entry point: gen-data, train, eval, bench, report.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 data mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .gridio import GeneratorSettings, load_manifest, make_pairs, synth_grf
from .numerics import AdamState, backward, flop_scope, mean, no_grad, square, with_flop_ledger
from .numerics.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .reslim import ConfigError, NonFiniteLoss, ReslimConfig, init_model, predict, train_step
from .reslim.config import config_to_section, section_to_config
from .reslim.model import normalize_input, reslim_forward, token_count
from .tiles import (bench_csv, crop_core, extract_tile, plan_tiles, seam_rmse, stitch, tiled_forward,
                    tiled_train_step)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("downscale")


class DataMismatch(ValueError):
    pass


# ---------------------------------------------------------------- run configuration

@dataclass
class RunSettings:
    data_dir: str = "data"
    out_dir: str = "run"
    steps: int = 200
    batch_size: int = 1
    lr: float = 1e-3
    tiles: str = "1x1"
    halo: int = 4
    workers: int = 1
    # auto: tiled path only when tiles or workers exceed one
    engine: str = "auto"
    seed: int = 0
    val_pairs: int = 1
    auto_norm: bool = True
    eval_transform: str = "none"
    log_every: int = 50

    def tile_grid(self) -> tuple:
        return parse_tiles(self.tiles)


@dataclass
class RunConfig:
    model: ReslimConfig
    run: RunSettings

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["model"] = config_to_section(self.model)
        parser["run"] = {f.name: str(getattr(self.run, f.name)) for f in fields(RunSettings)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()


def parse_run_settings(section: dict) -> RunSettings:
    known = {f.name: f for f in fields(RunSettings)}
    unknown = sorted(set(section) - set(known))
    if unknown:
        raise ConfigError(f"unknown run keys: {', '.join(unknown)}")
    base = RunSettings()
    kwargs = {}
    for key, text in section.items():
        default = getattr(base, key)
        try:
            if isinstance(default, bool):
                kwargs[key] = text.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[key] = int(text)
            elif isinstance(default, float):
                kwargs[key] = float(text)
            else:
                kwargs[key] = text.strip()
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r}") from exc
    run = RunSettings(**kwargs)
    if run.steps < 0 or run.batch_size < 1 or run.workers < 1 or run.halo < 0 or run.val_pairs < 0:
        raise ConfigError("steps >= 0, batch_size >= 1, workers >= 1, halo >= 0 and val_pairs >= 0 required")
    if run.engine not in ("auto", "single", "tiled"):
        raise ConfigError("engine must be auto, single or tiled")
    if run.eval_transform not in ("none", "log1p"):
        raise ConfigError("eval_transform must be none or log1p")
    run.tile_grid()
    return run


def load_run_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    extra = sorted(set(parser.sections()) - {"model", "run"})
    if extra:
        raise ConfigError(f"unknown sections: {', '.join(extra)}")
    model = section_to_config(dict(parser["model"])) if "model" in parser else ReslimConfig()
    run = parse_run_settings(dict(parser["run"])) if "run" in parser else RunSettings()
    return RunConfig(model, run)


def parse_tiles(text: str) -> tuple:
    """``"2x3"`` -> (2, 3); a bare square count ``"16"`` -> (4, 4)."""
    text = str(text).strip().lower()
    try:
        if "x" in text:
            r, c = (int(v) for v in text.split("x"))
        else:
            t = int(text)
            r = int(round(math.sqrt(t)))
            if r * r != t:
                r = 1
            c = t // r
    except ValueError as exc:
        raise ConfigError(f"bad tile grid {text!r}") from exc
    if r < 1 or c < 1:
        raise ConfigError(f"bad tile grid {text!r}")
    return r, c


def parse_size(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 128x128, got {text!r}") from exc
    return h, w


# ---------------------------------------------------------------- helpers

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_manifest(out_dir: Path, command: str, args: dict, config_hash: str = None,
                       inputs=(), outputs=()) -> Path:
    doc = {
        "command": command,
        "code_version": __version__,
        "args": {k: v for k, v in sorted(args.items())},
        "config_hash": config_hash,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(Path(p).name): file_sha256(p) for p in outputs},
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, default=str) + "\n", encoding="utf-8")
    return path


def _jsonable_args(ns) -> dict:
    return {k: v for k, v in vars(ns).items() if k != "func" and not callable(v)}


def load_pairs(data_dir):
    manifest = load_manifest(data_dir)
    pairs = [manifest.load(i) for i in range(len(manifest.pairs))]
    paths = [p for i in range(len(manifest.pairs)) for p in manifest.resolve(i)]
    return manifest, pairs, paths


def check_compatible(cfg: ReslimConfig, pairs) -> None:
    for inp, truth in pairs:
        if inp.channels != cfg.in_channels or truth.channels != cfg.out_channels:
            raise DataMismatch(f"data has {inp.channels}->{truth.channels} channels, model expects "
                               f"{cfg.in_channels}->{cfg.out_channels}")
        s = cfg.scale_factor
        if (truth.height, truth.width) != (s * inp.height, s * inp.width):
            raise DataMismatch(f"target {truth.height}x{truth.width} is not {s}x input {inp.height}x{inp.width}")
        if inp.height % cfg.patch_size or inp.width % cfg.patch_size:
            raise DataMismatch(f"patch size {cfg.patch_size} does not divide input {inp.height}x{inp.width}")


def channel_stats(grids) -> tuple:
    stack = np.stack([g.data.astype(np.float64) for g in grids])
    mean = stack.mean(axis=(0, 2, 3))
    std = stack.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def evaluate_pairs(model, pairs, transform: str, identity: bool = False) -> dict:
    """Per-pair metric reports plus their mean (r2 and rmse aggregate as plain means)."""
    rows = []
    for i, (inp, truth) in pairs:
        if identity:
            pred = truth.data
        else:
            pred = predict(model, inp)
            if pred.shape != truth.data.shape:
                raise DataMismatch(f"prediction {pred.shape} vs truth {truth.data.shape} for pair {i}")
        rep = metrics.evaluate(pred, truth, transform)
        rows.append({"pair": i, **json.loads(rep.to_json())})
    keys = ("r2", "rmse", "rmse_q68", "rmse_q95", "rmse_q997", "ssim", "psnr")
    agg = {}
    for k in keys:
        vals = [math.inf if r[k] == "inf" else r[k] for r in rows]
        mean = float(np.mean(vals)) if vals else float("nan")
        agg[k] = "inf" if math.isinf(mean) else mean
    agg["pairs"] = len(rows)
    return {"transform": transform, "pairs": rows, "aggregate": agg}


# ---------------------------------------------------------------- commands

def cmd_gen_data(ns) -> int:
    h, w = ns.size
    out = Path(ns.out)
    settings = GeneratorSettings(height=h, width=w, channels=ns.channels, spectral_slope=ns.slope, seed=ns.seed)
    make_pairs(out, ns.pairs, ns.scale, settings)
    files = sorted(out.glob("pair_*.orbg"))
    write_run_manifest(out, "gen-data", _jsonable_args(ns), outputs=files)
    print(out / "manifest.json")
    return EXIT_OK


def _batches(n_train: int, batch_size: int, steps: int, seed: int):
    rng = np.random.default_rng(seed)
    order = []
    for _ in range(steps):
        batch = []
        for _ in range(batch_size):
            if not order:
                order = list(rng.permutation(n_train))
            batch.append(int(order.pop(0)))
        yield batch


def train_run(rc: RunConfig, out_dir: Path, threads: int = 1) -> dict:
    """Train per the run config; returns paths of everything written."""
    run = rc.run
    manifest, pairs, input_paths = load_pairs(run.data_dir)
    if len(pairs) <= run.val_pairs:
        raise DataMismatch(f"{len(pairs)} pairs cannot leave {run.val_pairs} for validation")
    train_pairs = pairs[:len(pairs) - run.val_pairs]
    val = list(range(len(pairs) - run.val_pairs, len(pairs)))
    cfg = rc.model
    if manifest.scale_factor != cfg.scale_factor:
        raise DataMismatch(f"data scale {manifest.scale_factor} vs model scale {cfg.scale_factor}")
    check_compatible(cfg, pairs)
    if run.auto_norm:
        mean, std = channel_stats([p[0] for p in train_pairs])
        cfg = cfg.with_(norm_mean=mean, norm_std=std)
        rc = RunConfig(cfg, run)

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(rc.to_ini(), encoding="utf-8")
    model = init_model(cfg, run.seed)
    rows_t, cols_t = run.tile_grid()
    tiled = run.engine == "tiled" or (run.engine == "auto" and (rows_t * cols_t > 1 or run.workers > 1))
    if tiled:
        h, w = train_pairs[0][0].height, train_pairs[0][0].width
        layout = plan_tiles(h, w, rows_t, cols_t, run.halo if rows_t * cols_t > 1 else 0, cfg.patch_size,
                            cfg.scale_factor)
        replicas = [model] + [model.copy() for _ in range(run.workers - 1)]
        optimizers = [AdamState(lr=run.lr) for _ in replicas]
    else:
        optimizer = AdamState(lr=run.lr)

    loss_rows = []
    start = time.perf_counter()
    for step, idx in enumerate(_batches(len(train_pairs), run.batch_size, run.steps, run.seed)):
        batch = [train_pairs[i] for i in idx]
        t0 = time.perf_counter()
        if tiled:
            loss, _ = tiled_train_step(batch, replicas, layout, optimizers, threads)
        else:
            loss, _ = train_step(batch, model, optimizer)
        loss_rows.append((step, loss, 1e3 * (time.perf_counter() - t0)))
        if run.log_every and step % run.log_every == 0:
            log.info("step %d loss %.6g (%.1fs)", step, loss, time.perf_counter() - start)

    ckpt = out_dir / "model.orbw"
    save_checkpoint(model.arrays(), ckpt)
    # validate what was saved so eval of the checkpoint reproduces these numbers
    model.load_arrays(load_checkpoint(ckpt))
    loss_csv = out_dir / "loss.csv"
    with open(loss_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "wall_ms"])
        for step, loss, ms in loss_rows:
            writer.writerow([step, repr(loss), f"{ms:.3f}"])
    report = evaluate_pairs(model, [(i, pairs[i]) for i in val], run.eval_transform)
    val_json = out_dir / "val_metrics.json"
    val_json.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    outputs = [ckpt, loss_csv, val_json, out_dir / "config.ini"]
    write_run_manifest(out_dir, "train", {"data_dir": run.data_dir, "tiled": tiled}, rc.digest(),
                       inputs=input_paths, outputs=outputs)
    return {"checkpoint": ckpt, "loss_csv": loss_csv, "val_metrics": val_json, "model": model}


def cmd_train(ns) -> int:
    rc = load_run_config(ns.config)
    if ns.seed is not None:
        rc.run.seed = ns.seed
    if ns.data is not None:
        rc.run.data_dir = ns.data
    out = Path(ns.out or rc.run.out_dir)
    rc.run.out_dir = str(out)
    result = train_run(rc, out, ns.threads)
    print(result["checkpoint"])
    return EXIT_OK


def load_model_for(ckpt, config_path=None):
    ckpt = Path(ckpt)
    config_path = Path(config_path) if config_path else ckpt.parent / "config.ini"
    rc = load_run_config(config_path)
    model = init_model(rc.model, 0)
    try:
        model.load_arrays(load_checkpoint(ckpt))
    except (KeyError, ValueError) as exc:
        raise DataMismatch(f"checkpoint does not fit the configured model: {exc}") from exc
    return model, rc


def cmd_eval(ns) -> int:
    manifest, pairs, input_paths = load_pairs(ns.data)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    chosen = list(range(len(pairs)))
    if ns.last:
        chosen = chosen[-ns.last:]
    model, transform = None, ns.transform
    inputs = list(input_paths)
    if ns.identity:
        transform = transform or "none"
    else:
        if not ns.ckpt:
            raise ConfigError("eval needs --ckpt unless --identity is given")
        model, rc = load_model_for(ns.ckpt, ns.config)
        transform = transform or rc.run.eval_transform
        check_compatible(model.cfg, [pairs[i] for i in chosen])
        inputs.append(Path(ns.ckpt))
    report = evaluate_pairs(model, [(i, pairs[i]) for i in chosen], transform, identity=ns.identity)
    path = out / "eval_report.json"
    path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    outputs = [path]
    if ns.spectrum:
        for i in chosen:
            inp, truth = pairs[i]
            pred = truth.data if ns.identity else predict(model, inp)
            for c in range(pred.shape[0]):
                spec_path = out / f"spectrum_pair{i:04d}_ch{c:02d}.csv"
                spec_path.write_text(metrics.radial_power_spectrum(pred[c]).to_csv(), encoding="utf-8")
                outputs.append(spec_path)
    write_run_manifest(out, "eval", _jsonable_args(ns), inputs=inputs, outputs=outputs)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------- bench

def bench_input(h: int, w: int, channels: int, seed: int, kind: str = "grf") -> np.ndarray:
    """Deterministic benchmark input; ``piecewise`` gives smooth regions split by sharp fronts."""
    side = 1 << max(3, int(math.ceil(math.log2(max(h, w)))))
    field = synth_grf(side, side, channels, -3.0, seed).data[:, :h, :w].astype(np.float64)
    if kind == "piecewise":
        smooth = synth_grf(side, side, channels, -4.0, seed + 1).data[:, :h, :w].astype(np.float64)
        field = np.where(smooth > 0, 2.0, -2.0) + 0.3 * smooth
    return field


def run_bench(sizes, tile_counts, compressions, halo: int, steps: int = 1, mode: str = "forward",
              dim: int = 16, layers: int = 1, heads: int = 2, channels: int = 1, scale: int = 4,
              patch: int = 2, seed: int = 0, threads: int = 1, kind: str = "grf") -> list:
    """One row per (size, compression, T); timing is per sample.

    ``threads=None`` gives every tile its own worker thread.
    """
    rows = []
    first_ms = None
    for h, w in sizes:
        x = bench_input(h, w, channels, seed, kind)
        for comp in compressions:
            cfg = ReslimConfig(embed_dim=dim, num_layers=layers, num_heads=heads, in_channels=channels,
                               out_channels=channels, scale_factor=scale, patch_size=patch, compression=comp,
                               decoder_hidden=4, residual_hidden=4)
            model = init_model(cfg, seed)
            xn = normalize_input(x, cfg)
            reference = None
            for t in tile_counts:
                r, c = parse_tiles(t)
                row = {"step": 0, "T": r * c, "halo": halo if r * c > 1 else 0, "size": f"{h}x{w}",
                       "compression": "off" if comp is None else f"{comp[0]}-{comp[1]}@{comp[2]}"}
                try:
                    layout = plan_tiles(h, w, r, c, row["halo"], patch, scale)
                    th, tw = layout.tile_shape(0)
                    with no_grad():
                        row["tokens_per_tile"] = token_count(model, xn[:, :th, :tw]) if comp else \
                            (th // patch) * (tw // patch)
                    elapsed, ledger = 0.0, None
                    for step in range(steps):
                        t0 = time.perf_counter()
                        if mode == "forward":
                            with no_grad():
                                out, ledger = with_flop_ledger(tiled_forward, xn, model, layout, threads or r * c)
                        else:
                            out, ledger = _bench_train_step(xn, model, layout, scale)
                        elapsed += time.perf_counter() - t0
                    row["step"] = steps
                    row["attn_madds"] = ledger.attention
                    row["wall_ms"] = round(1e3 * elapsed / steps, 3)
                    if reference is None and r * c == 1:
                        reference = out
                    row["seam_rmse"] = seam_rmse(out, reference, layout) if reference is not None else ""
                    row["status"] = "ok"
                    first_ms = first_ms or row["wall_ms"]
                    row["speedup"] = round(first_ms / row["wall_ms"], 4) if row["wall_ms"] else ""
                except MemoryError as exc:
                    row.update({"status": f"memory: {exc}", "attn_madds": "", "wall_ms": "", "seam_rmse": "",
                                "speedup": "", "tokens_per_tile": row.get("tokens_per_tile", "")})
                rows.append(row)
                log.info("bench %s", row)
    return rows


def _bench_train_step(xn, model, layout, scale):
    """Forward + backward over all tiles of one synthetic sample (no update)."""
    outs = []
    with flop_scope() as ledger:
        for tid in range(layout.count):
            pred, _ = reslim_forward(extract_tile(xn, layout, tid), model)
            core = crop_core(pred, layout, tid)
            backward(mean(square(core)))
            outs.append(pred.data)
    for p in model.params.values():
        p.grad = None
    return stitch(outs, layout), ledger


BENCH_EXTRA = ("size", "compression", "status", "speedup")


def cmd_bench(ns) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    comps = []
    for text in ns.compression.split(","):
        text = text.strip()
        if text in ("off", "none", "1"):
            comps.append(None)
        else:
            lo, hi, thr = text.split(":")
            comps.append((int(lo), int(hi), float(thr)))
    rows = run_bench([parse_size(s) for s in ns.sizes.split(",")], ns.tiles.split(","), comps, ns.halo,
                     steps=ns.steps, mode=ns.mode, dim=ns.dim, layers=ns.layers, heads=ns.heads,
                     channels=ns.channels, scale=ns.scale, patch=ns.patch, seed=ns.seed, threads=ns.threads,
                     kind=ns.input)
    path = out / "bench.csv"
    path.write_text(bench_csv(rows, BENCH_EXTRA), encoding="utf-8")
    write_run_manifest(out, "bench", _jsonable_args(ns), outputs=[path])
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------- report

def cmd_report(ns) -> int:
    run = Path(ns.run)
    if not run.is_dir():
        raise ConfigError(f"{run} is not a directory")
    lines = [f"# Run report: {run.name}", ""]
    manifest = run / "run_manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text(encoding="utf-8"))
        lines += [f"- command: `{doc['command']}`", f"- code version: {doc['code_version']}",
                  f"- config hash: {doc.get('config_hash')}", ""]
    loss_csv = run / "loss.csv"
    if loss_csv.exists():
        with open(loss_csv, encoding="utf-8") as fh:
            losses = [float(r["loss"]) for r in csv.DictReader(fh)]
        if losses:
            lines += ["## Training", "", f"- steps: {len(losses)}", f"- first loss: {losses[0]:.6g}",
                      f"- final loss: {losses[-1]:.6g}", ""]
    for name, title in (("val_metrics.json", "Validation"), ("eval_report.json", "Evaluation")):
        path = run / name
        if path.exists():
            agg = json.loads(path.read_text(encoding="utf-8"))["aggregate"]
            lines += [f"## {title}", "", "| metric | value |", "|---|---|"]
            lines += [f"| {k} | {v if isinstance(v, str) else f'{v:.6g}'} |" for k, v in agg.items()]
            lines.append("")
    bench = run / "bench.csv"
    if bench.exists():
        lines += ["## Benchmark", "", "```", bench.read_text(encoding="utf-8").rstrip(), "```", ""]
    target = Path(ns.out) if ns.out else run / "report.md"
    target.write_text("\n".join(lines), encoding="utf-8")
    print(target)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker thread pool size")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="downscale", parents=[common],
                                     description="Downscaling experiments with tiled Reslim models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic coarse/fine pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--size", type=parse_size, default=(128, 128), help="fine grid size HxW")
    p.add_argument("--scale", type=int, default=4, choices=(2, 4, 8))
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--slope", type=float, default=-3.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="override run.data_dir")
    p.add_argument("--out", help="override run.out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--ckpt")
    p.add_argument("--config", help="defaults to config.ini beside the checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--transform", choices=("none", "log1p"))
    p.add_argument("--identity", action="store_true", help="score the truth against itself")
    p.add_argument("--last", type=int, default=0, help="only the last N pairs (the held-out split)")
    p.add_argument("--spectrum", action="store_true", help="write a power-spectrum CSV per channel")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="attention cost and timing sweeps")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default="64x64", help="comma-separated input sizes HxW")
    p.add_argument("--tiles", default="1,4,16", help="comma-separated tile counts or RxC grids")
    p.add_argument("--compression", default="off", help="comma-separated 'off' or min:max:threshold")
    p.add_argument("--halo", type=int, default=4)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--mode", choices=("forward", "train"), default="forward")
    p.add_argument("--input", choices=("grf", "piecewise"), default="grf")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--patch", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", parents=[common], help="summarise a run directory as Markdown")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    for name, default in (("seed", None), ("threads", 1), ("verbose", False)):
        if not hasattr(ns, name):
            setattr(ns, name, default)
    if ns.command == "gen-data" and ns.seed is None:
        ns.seed = 0
    if ns.command == "bench" and ns.seed is None:
        ns.seed = 0
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return ns.func(ns)
    except NonFiniteLoss as exc:
        print(f"error: {exc}\n{exc.diagnostics()}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataMismatch as exc:
        print(f"error: data mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
