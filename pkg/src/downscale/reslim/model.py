"""Reslim: a slim ViT on coarse tokens plus a convolutional residual upsampling path.

Pipeline for one sample ``x[C, H, W]`` (already normalised)::

    per-variable patch embedding + variable id + 2-D sincos position
    -> cross-attention over variables (one token per location)
    -> + resolution embedding
    -> [optional quad-tree compression]
    -> pre-norm transformer blocks
    -> [decompression] -> linear head -> pixel shuffle -> two 3x3 convs
    + residual path on the upsampled mapped input channels

All convolutions replicate-pad their input, so a tile extracted with
replicate-padded borders sees exactly what the whole image would.
"""

from __future__ import annotations

import hashlib
import math
from functools import lru_cache

import numpy as np

from .. import compress
from ..numerics import ops
from ..numerics.checkpoint import encode_checkpoint
from ..numerics.tensor import Tensor, as_tensor, no_grad
from .config import RESOLUTION_KEYS, ReslimConfig


def _block_shapes(d: int, i: int) -> dict:
    p = f"blocks.{i}."
    return {
        p + "ln1.g": (d,), p + "ln1.b": (d,),
        p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
        p + "proj.w": (d, d), p + "proj.b": (d,),
        p + "ln2.g": (d,), p + "ln2.b": (d,),
        p + "fc1.w": (d, 4 * d), p + "fc1.b": (4 * d,),
        p + "fc2.w": (4 * d, d), p + "fc2.b": (d,),
    }


def param_shapes(cfg: ReslimConfig) -> dict:
    d, c, k = cfg.embed_dim, cfg.in_channels, cfg.out_channels
    p2 = cfg.patch_size ** 2
    out_block = cfg.patch_size * cfg.scale_factor
    shapes = {
        "embed.w": (c, p2, d), "embed.b": (c, d),
        "var_embed": (c, d),
        "agg.query": (d, 1), "agg.wk": (d, d), "agg.wv": (d, d),
        "res_embed": (len(RESOLUTION_KEYS), d),
    }
    for i in range(cfg.num_layers):
        shapes.update(_block_shapes(d, i))
    shapes.update({
        "head.ln.g": (d,), "head.ln.b": (d,),
        "head.w": (d, k * out_block ** 2), "head.b": (k * out_block ** 2,),
        "dec.conv1.w": (cfg.decoder_hidden, k, 3, 3), "dec.conv1.b": (cfg.decoder_hidden,),
        "dec.conv2.w": (k, cfg.decoder_hidden, 3, 3), "dec.conv2.b": (k,),
        "res.conv_a.w": (cfg.residual_hidden, k, 3, 3), "res.conv_a.b": (cfg.residual_hidden,),
        "res.conv_b.w": (k, cfg.residual_hidden, 3, 3), "res.conv_b.b": (k,),
    })
    if cfg.compression is not None:
        lo, hi, _ = cfg.compression
        scales = int(round(math.log2(hi // lo))) + 1
        shapes.update({
            "comp.feat.w": (d,),
            "comp.tok.w": (d * lo * lo, d), "comp.tok.b": (d,),
            "comp.scale": (scales, d),
            "comp.detok.w": (d, d * lo * lo), "comp.detok.b": (d * lo * lo,),
            "comp.smooth": (d, d, 3, 3),
        })
    return shapes


def count_parameters(cfg: ReslimConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def _init_array(name: str, shape: tuple, rng, cfg: ReslimConfig) -> np.ndarray:
    d = cfg.embed_dim
    if name.endswith(".b") or name in ("res_embed", "comp.scale", "dec.conv2.w", "res.conv_b.w"):
        return np.zeros(shape)
    if name.endswith(".g"):
        return np.ones(shape)
    if name == "comp.feat.w":
        return np.full(shape, 1.0 / d)
    if name in ("comp.tok.w", "comp.detok.w"):
        lo = cfg.compression[0]
        # average the min_side footprint into the embedding and back
        eye = np.eye(d)
        if name == "comp.tok.w":
            return np.repeat(eye, lo * lo, axis=0) / (lo * lo)
        return np.repeat(eye, lo * lo, axis=1)
    if name == "comp.smooth":
        return compress.identity_kernel(d)
    if name in ("var_embed", "agg.query"):
        return rng.normal(0.0, 0.02, shape)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    else:
        fan_in = shape[-2]
    return rng.normal(0.0, fan_in ** -0.5, shape)


class ReslimModel:
    """Parameters (name -> Tensor) plus the configuration they were built for."""

    def __init__(self, cfg: ReslimConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self.patch_cache = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def copy(self) -> "ReslimModel":
        return ReslimModel(self.cfg, {k: Tensor(p.data.copy(), requires_grad=True)
                                      for k, p in self.params.items()})

    def arrays(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) ^ set(arrays))
            raise KeyError(f"checkpoint does not match model parameters: {missing[:5]}")
        for k, a in arrays.items():
            if a.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {self.params[k].shape}")
            self.params[k].data[...] = a

    def state_hash(self) -> str:
        return hashlib.sha256(encode_checkpoint(self.arrays())).hexdigest()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def init_model(cfg: ReslimConfig, seed: int = 0) -> ReslimModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        arr = _init_array(name, shape, rng, cfg).astype(cfg.dtype)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return ReslimModel(cfg, params)


# ---------------------------------------------------------------- normalisation

def normalize_input(x, cfg: ReslimConfig) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    mean = np.asarray(cfg.norm_mean)[:, None, None]
    std = np.asarray(cfg.norm_std)[:, None, None]
    return ((x - mean) / std).astype(cfg.dtype)


def _output_stats(cfg: ReslimConfig):
    idx = list(cfg.residual_channel_map)
    return (np.asarray(cfg.norm_mean)[idx][:, None, None], np.asarray(cfg.norm_std)[idx][:, None, None])


def normalize_target(y, cfg: ReslimConfig) -> np.ndarray:
    """Targets use the statistics of the input channel each output is mapped to."""
    mean, std = _output_stats(cfg)
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    return ((y - mean) / std).astype(cfg.dtype)


def denormalize_output(pred, cfg: ReslimConfig) -> np.ndarray:
    mean, std = _output_stats(cfg)
    return np.asarray(getattr(pred, "data", pred), dtype=np.float64) * std + mean


# ---------------------------------------------------------------- stages

@lru_cache(maxsize=32)
def sincos_position(grid_h: int, grid_w: int, dim: int, dtype: str = "float64") -> np.ndarray:
    """2-D sine/cosine position table ``[grid_h * grid_w, dim]``, row-major."""
    if dim % 4:
        raise ValueError("position encoding needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    ang_r = rows.reshape(-1, 1) * omega
    ang_c = cols.reshape(-1, 1) * omega
    table = np.concatenate([np.sin(ang_r), np.cos(ang_r), np.sin(ang_c), np.cos(ang_c)], axis=1)
    table = table.astype(dtype)
    table.setflags(write=False)
    return table


def embed_variables(x, model: ReslimModel):
    """Per-variable patch tokens ``[C, n, dim]`` with variable and position embeddings added."""
    cfg = model.cfg
    x = as_tensor(x)
    c, h, w = x.shape
    if c != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
    p = cfg.patch_size
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide input {h}x{w}")
    tokens = ops.matmul(ops.patchify(x, p), model["embed.w"])
    tokens = ops.add(tokens, ops.reshape(ops.add(model["embed.b"], model["var_embed"]), (c, 1, cfg.embed_dim)))
    pos = sincos_position(h // p, w // p, cfg.embed_dim, cfg.dtype)
    return ops.add(tokens, pos)


def aggregate_variables(emb, model: ReslimModel):
    """One learned query per location attends over the variable axis: ``[C, n, d] -> [n, d]``."""
    d = model.cfg.embed_dim
    keys = ops.matmul(emb, model["agg.wk"])
    values = ops.matmul(emb, model["agg.wv"])
    scores = ops.mul(ops.matmul(keys, model["agg.query"]), 1.0 / math.sqrt(d))
    weights = ops.softmax(scores, axis=0)
    return ops.sum(ops.mul(weights, values), axis=0)


def add_resolution_embedding(tokens, model: ReslimModel, scale_factor: int):
    if scale_factor not in RESOLUTION_KEYS:
        raise ValueError(f"no resolution embedding for scale factor {scale_factor}")
    row = ops.take_rows(model["res_embed"], [RESOLUTION_KEYS.index(scale_factor)])
    return ops.add(tokens, row)


def transformer_block(x, model: ReslimModel, i: int):
    cfg = model.cfg
    n, d = x.shape
    heads, hd = cfg.num_heads, cfg.head_dim
    p = f"blocks.{i}."
    h = ops.layer_norm(x, model[p + "ln1.g"], model[p + "ln1.b"])
    qkv = ops.linear(h, model[p + "qkv.w"], model[p + "qkv.b"])
    qkv = ops.transpose(ops.reshape(qkv, (n, 3, heads, hd)), (1, 2, 0, 3))
    q, k, v = (ops.getitem(qkv, j) for j in range(3))
    att = ops.reshape(ops.transpose(ops.attention(q, k, v), (1, 0, 2)), (n, d))
    x = ops.add(x, ops.linear(att, model[p + "proj.w"], model[p + "proj.b"]))
    h = ops.layer_norm(x, model[p + "ln2.g"], model[p + "ln2.b"])
    h = ops.gelu(ops.linear(h, model[p + "fc1.w"], model[p + "fc1.b"]))
    return ops.add(x, ops.linear(h, model[p + "fc2.w"], model[p + "fc2.b"]))


def conv_replicate(x, kernels, bias=None):
    """3x3 convolution whose border context is replicated rather than zero."""
    return ops.conv2d(ops.pad_edge(x, kernels.shape[-1] // 2), kernels, bias, padding="valid")


def decode_tokens(tokens, model: ReslimModel, grid_h: int, grid_w: int):
    cfg = model.cfg
    block = cfg.patch_size * cfg.scale_factor
    t = ops.layer_norm(tokens, model["head.ln.g"], model["head.ln.b"])
    pix = ops.linear(t, model["head.w"], model["head.b"])
    img = ops.pixel_shuffle(pix, grid_h, grid_w, cfg.out_channels, block)
    img = ops.gelu(conv_replicate(img, model["dec.conv1.w"], model["dec.conv1.b"]))
    return conv_replicate(img, model["dec.conv2.w"], model["dec.conv2.b"])


def select_residual_channels(x, cfg: ReslimConfig):
    return ops.getitem(as_tensor(x), (np.asarray(cfg.residual_channel_map, dtype=np.intp),))


def residual_path(x, model: ReslimModel):
    """Bilinear skip of the mapped input channels plus a learned two-conv correction."""
    cfg = model.cfg
    s = cfg.scale_factor
    sel = select_residual_channels(x, cfg)
    skip = ops.upsample_bilinear(sel, s)
    # pad before upsampling so the two valid convs see replicated context at the border
    margin = max(1, math.ceil(2 / s))
    up = ops.upsample_bilinear(ops.pad_edge(sel, margin), s)
    h = ops.gelu(ops.conv2d(up, model["res.conv_a.w"], model["res.conv_a.b"], padding="valid"))
    h = ops.conv2d(h, model["res.conv_b.w"], model["res.conv_b.b"], padding="valid")
    crop = s * margin - 2
    _, hh, ww = skip.shape
    h = ops.getitem(h, (slice(None), slice(crop, crop + hh), slice(crop, crop + ww)))
    return ops.add(skip, h)


# ---------------------------------------------------------------- compression

def _feature_image(agg, pos, model: ReslimModel, grid_h: int, grid_w: int) -> np.ndarray:
    """One-channel image of the aggregated tokens with the positional signal removed."""
    # softmax weights sum to one, so the aggregated positional part is exactly pos @ Wv
    content = agg.data - pos @ model["agg.wv"].data
    feat = content @ model["comp.feat.w"].data
    return feat.reshape(grid_h, grid_w).astype(np.float64)


def plan_compression(x, agg, model: ReslimModel, grid_h: int, grid_w: int) -> compress.PatchSet:
    """Quad-tree layout on the token grid, cached per distinct input."""
    lo, hi, thr = model.cfg.compression
    key = hashlib.sha1(np.ascontiguousarray(x.data).tobytes() + str(x.shape).encode()).hexdigest()
    ps = model.patch_cache.get(key)
    if ps is None:
        pos = sincos_position(grid_h, grid_w, model.cfg.embed_dim, model.cfg.dtype)
        feat = _feature_image(agg, pos, model, grid_h, grid_w)
        feat = np.pad(feat, ((0, -grid_h % hi), (0, -grid_w % hi)), mode="edge")
        ps = compress.quadtree_partition(compress.canny(feat), lo, hi, thr)
        model.patch_cache[key] = ps
    return ps


# ---------------------------------------------------------------- forward

def _record(probe, name, t):
    if probe is not None:
        probe[name] = float(np.max(np.abs(t.data))) if t.size else 0.0


def reslim_forward(x, model: ReslimModel, probe: dict = None):
    """Return ``(pred[K, sH, sW], patchset or None)`` for one normalised input ``x[C, H, W]``.

    ``probe``, when given, receives the max |activation| of every stage.
    """
    cfg = model.cfg
    x = as_tensor(np.asarray(getattr(x, "data", x), dtype=cfg.dtype))
    _, h, w = x.shape
    gh, gw = h // cfg.patch_size, w // cfg.patch_size
    emb = embed_variables(x, model)
    _record(probe, "embed", emb)
    agg = aggregate_variables(emb, model)
    _record(probe, "aggregate", agg)
    tokens = add_resolution_embedding(agg, model, cfg.scale_factor)

    layout = None
    if cfg.compression is not None:
        with no_grad():
            layout = plan_compression(x, agg, model, gh, gw)
        grid = ops.reshape(ops.transpose(tokens, (1, 0)), (cfg.embed_dim, gh, gw))
        grid = compress.pad_to_multiple(grid, cfg.compression[1])
        tokens, _ = compress.tokenize(grid, layout, model["comp.tok.w"], model["comp.scale"],
                                      model["comp.tok.b"])
        _record(probe, "compress", tokens)

    for i in range(cfg.num_layers):
        tokens = transformer_block(tokens, model, i)
        _record(probe, f"block{i}", tokens)

    if layout is not None:
        grid = compress.detokenize(tokens, layout, model["comp.detok.w"], model["comp.smooth"],
                                   model["comp.detok.b"], out_hw=(gh, gw))
        tokens = ops.transpose(ops.reshape(grid, (cfg.embed_dim, gh * gw)), (1, 0))
        _record(probe, "decompress", tokens)

    main = decode_tokens(tokens, model, gh, gw)
    _record(probe, "decoder", main)
    res = residual_path(x, model)
    _record(probe, "residual", res)
    pred = ops.add(main, res)
    _record(probe, "pred", pred)
    return pred, layout


def predict(model: ReslimModel, inp) -> np.ndarray:
    """Raw-unit prediction ``[K, sH, sW]`` for a raw input grid or array."""
    with no_grad():
        pred, _ = reslim_forward(normalize_input(inp, model.cfg), model)
    return denormalize_output(pred, model.cfg)


def token_count(model: ReslimModel, x) -> int:
    """Tokens seen by the transformer blocks for this input (after compression, if enabled)."""
    cfg = model.cfg
    _, h, w = np.shape(getattr(x, "data", x))
    if cfg.compression is None:
        return (h // cfg.patch_size) * (w // cfg.patch_size)
    with no_grad():
        _, layout = reslim_forward(x, model)
    return len(layout)
