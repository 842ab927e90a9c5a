"""Georeferenced grids, the ORBG file format, coarsening and synthetic field pairs.

ORBG layout (little-endian)::

    0-3    magic "ORB2"
    4-7    u32 version (1)
    8-19   u32 height, width, channels
    20-51  f64 lat_min, lat_max, lon_min, lon_max
    ...    channels * 32 bytes of zero-padded UTF-8 channel names
    ...    u32 CRC-32 of the payload
    ...    float32 payload, channel-major then row-major (row 0 = north)
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ORB2"
VERSION = 1
NAME_BYTES = 32
_HEADER = struct.Struct("<4sIIII4d")


class GridFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    data: np.ndarray
    channel_names: tuple
    lat_span: tuple = (-90.0, 90.0)
    lon_span: tuple = (0.0, 360.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"grid data must be [channels, rows, cols], got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError("grid dimensions must be at least 1")
        if not np.all(np.isfinite(data)):
            raise ValueError("grid values must be finite")
        names = tuple(str(n) for n in self.channel_names)
        if len(names) != data.shape[0] or any(not n for n in names):
            raise ValueError("need one non-empty name per channel")
        if any(len(n.encode("utf-8")) > NAME_BYTES for n in names):
            raise ValueError(f"channel names are limited to {NAME_BYTES} UTF-8 bytes")
        lat_min, lat_max = (float(v) for v in self.lat_span)
        if not (-90.0 <= lat_min < lat_max <= 90.0):
            raise ValueError(f"invalid latitude span {self.lat_span}")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "lat_span", (lat_min, lat_max))
        object.__setattr__(self, "lon_span", tuple(float(v) for v in self.lon_span))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def row_latitudes(self) -> np.ndarray:
        """Latitude of each row centre, north first."""
        lat_min, lat_max = self.lat_span
        step = (lat_max - lat_min) / self.height
        return lat_max - (np.arange(self.height) + 0.5) * step


def encode_grid(grid: Grid) -> bytes:
    payload = np.ascontiguousarray(grid.data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise ValueError("grid values overflow float32")
    payload = payload.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, grid.height, grid.width, grid.channels,
                          *grid.lat_span, *grid.lon_span)
    names = b"".join(n.encode("utf-8").ljust(NAME_BYTES, b"\0") for n in grid.channel_names)
    return header + names + struct.pack("<I", zlib.crc32(payload)) + payload


def decode_grid(blob: bytes) -> Grid:
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise GridFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    magic, version, h, w, c, lat0, lat1, lon0, lon1 = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise GridFormatError(f"unsupported ORBG version {version}")
    if 0 in (h, w, c):
        raise GridFormatError(f"zero dimension in header: {h}x{w}x{c}")
    off = _HEADER.size
    names = []
    for i in range(c):
        raw = blob[off + i * NAME_BYTES: off + (i + 1) * NAME_BYTES]
        names.append(raw.rstrip(b"\0").decode("utf-8"))
    off += c * NAME_BYTES
    expected = off + 4 + 4 * c * h * w
    if len(blob) != expected:
        raise GridFormatError(f"truncated or oversized file: expected {expected} bytes, got {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, off)
    payload = blob[off + 4:]
    if zlib.crc32(payload) != crc:
        raise GridFormatError("payload checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)
    return Grid(data, tuple(names), (lat0, lat1), (lon0, lon1))


def write_grid(grid: Grid, path) -> None:
    blob = encode_grid(grid)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_grid(path) -> Grid:
    with open(path, "rb") as fh:
        return decode_grid(fh.read())


def coarsen(fine: Grid, factor: int) -> Grid:
    """Block-average by ``factor`` along both axes."""
    if factor < 1 or fine.height % factor or fine.width % factor:
        raise ValueError(f"factor {factor} does not divide grid {fine.height}x{fine.width}")
    c, h, w = fine.data.shape
    blocks = fine.data.astype(np.float64).reshape(c, h // factor, factor, w // factor, factor)
    coarse = blocks.mean(axis=(2, 4)).astype(fine.data.dtype)
    return Grid(coarse, fine.channel_names, fine.lat_span, fine.lon_span)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def synth_grf(height: int, width: int, channels: int, spectral_slope: float, seed: int,
              lat_span=(-90.0, 90.0), lon_span=(0.0, 360.0)) -> Grid:
    """Gaussian random field with isotropic power spectrum ~ k**spectral_slope.

    White noise is shaped in Fourier space by ``k**(slope/2)`` (mean mode
    removed) and each channel is standardised to zero mean, unit variance.
    """
    if not (_is_pow2(height) and _is_pow2(width)) or min(height, width) < 8:
        raise ValueError("height and width must be powers of two >= 8")
    if spectral_slope >= 0:
        raise ValueError("spectral_slope must be negative")
    rng = np.random.default_rng(seed)
    ky = np.fft.fftfreq(height) * height
    kx = np.fft.rfftfreq(width) * width
    k = np.hypot(ky[:, None], kx[None, :])
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (spectral_slope / 2.0)
    fields = np.empty((channels, height, width), dtype=np.float32)
    for ch in range(channels):
        noise = rng.standard_normal((height, width))
        f = np.fft.irfft2(np.fft.rfft2(noise) * amp, s=(height, width))
        f -= f.mean()
        f /= f.std()
        fields[ch] = f
    names = tuple(f"var{i:02d}" for i in range(channels))
    return Grid(fields, names, lat_span, lon_span)


@dataclass
class GeneratorSettings:
    height: int = 128
    width: int = 128
    channels: int = 3
    spectral_slope: float = -3.0
    seed: int = 0
    lat_span: tuple = (-60.0, 60.0)
    lon_span: tuple = (0.0, 120.0)


@dataclass
class PairManifest:
    pairs: list
    scale_factor: int
    seed: int
    root: Path = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.scale_factor not in (2, 4, 8):
            raise ValueError("scale_factor must be 2, 4 or 8")

    def to_json(self) -> str:
        return json.dumps({"pairs": [list(p) for p in self.pairs],
                           "scale_factor": self.scale_factor, "seed": self.seed}, indent=2) + "\n"

    def resolve(self, i: int) -> tuple:
        base = Path(self.root) if self.root is not None else Path(".")
        return base / self.pairs[i][0], base / self.pairs[i][1]

    def load(self, i: int) -> tuple:
        a, b = self.resolve(i)
        return read_grid(a), read_grid(b)


def load_manifest(path) -> PairManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text(encoding="utf-8"))
    return PairManifest([tuple(p) for p in doc["pairs"]], int(doc["scale_factor"]), int(doc["seed"]),
                        root=path.parent)


def make_pairs(out_dir, count: int, scale_factor: int, settings: GeneratorSettings) -> PairManifest:
    """Write ``count`` (coarse input, fine target) pairs plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(settings.seed).generate_state(count, dtype=np.uint32)
    pairs = []
    for i in range(count):
        fine = synth_grf(settings.height, settings.width, settings.channels, settings.spectral_slope, int(seeds[i]),
                         settings.lat_span, settings.lon_span)
        coarse = coarsen(fine, scale_factor)
        names = (f"pair_{i:04d}_input.orbg", f"pair_{i:04d}_target.orbg")
        write_grid(coarse, out_dir / names[0])
        write_grid(fine, out_dir / names[1])
        pairs.append(names)
    manifest = PairManifest(pairs, scale_factor, settings.seed, root=out_dir)
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(manifest.to_json(), encoding="utf-8")
    os.replace(tmp, out_dir / "manifest.json")
    return manifest
