"""Toy diffusion-decoder: condition tokens, reference images and an output
segment share one bidirectional transformer stack.

Sequence layout is ``[condition text][input image 1..n][output image]``. The
condition and input-image tokens first pass through a two-block refiner; the
core blocks then process the whole sequence. The same block parameters serve
every token type.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import rope
from .numcore import (
    Graph,
    NonFiniteError,
    SeededStream,
    Tensor,
    add,
    concat,
    embedding,
    linear,
    matmul,
    mul,
    reshape,
    rms_norm,
    scale,
    silu,
    gelu,
    slice_axis,
    softmax,
    transpose,
)
from .rope import SchemeConfig, Segment

MODES = ("direct", "flow")
ACTIVATIONS = ("silu", "gelu")
CKPT_MAGIC = b"OMNICKPT"
CKPT_VERSION = 1


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    heads: int = 4
    layers: int = 4
    refiner_layers: int = 2
    patch: int = 2
    channels: int = 3
    max_image_index: int = 4
    condition_length: int = 4
    mlp_ratio: int = 4
    activation: str = "silu"
    mode: str = "direct"
    time_freq_dim: int = 64
    norm_eps: float = 1e-6
    rope: SchemeConfig = field(default_factory=SchemeConfig)

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.refiner_layers != 2:
            raise ValueError("the condition refiner has exactly 2 blocks")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if min(self.layers, self.patch, self.channels, self.max_image_index, self.condition_length) < 1:
            raise ValueError("layers, patch, channels, max_image_index and condition_length must be >= 1")
        self.rope.axis_channels(self.head_dim)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope"]["axis_split"] = list(self.rope.axis_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        r = dict(d.pop("rope", {}))
        if "axis_split" in r:
            r["axis_split"] = tuple(r["axis_split"])
        return cls(rope=SchemeConfig(**r), **d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _block_specs(prefix, cfg: ModelConfig, timestep: bool):
    d, hidden = cfg.dim, cfg.dim * cfg.mlp_ratio
    specs = [
        (f"{prefix}.attn.qkv.w", (d, 3 * d), "fan_in"),
        (f"{prefix}.attn.qkv.b", (3 * d,), "zeros"),
        (f"{prefix}.attn.out.w", (d, d), "fan_in"),
        (f"{prefix}.attn.out.b", (d,), "zeros"),
        (f"{prefix}.mlp.up.w", (d, hidden), "fan_in"),
        (f"{prefix}.mlp.up.b", (hidden,), "zeros"),
        (f"{prefix}.mlp.down.w", (hidden, d), "fan_in"),
        (f"{prefix}.mlp.down.b", (d,), "zeros"),
        # shift/scale/gate for the attention and MLP branches; gates start at 0
        (f"{prefix}.mod.b", (6 * d,), "zeros"),
    ]
    if timestep:
        specs.append((f"{prefix}.mod.w", (d, 6 * d), "zeros"))
    return specs


def param_specs(cfg: ModelConfig):
    """(name, shape, init) in declaration order; checkpoint order follows this."""
    d = cfg.dim
    flow = cfg.mode == "flow"
    specs = [
        ("cond.task", (cfg.condition_length, d), "embed"),
        ("cond.index", (cfg.max_image_index + 1, d), "embed"),
        ("patch.w", (cfg.patch_dim, d), "fan_in"),
        ("patch.b", (d,), "zeros"),
    ]
    if not flow:
        specs.append(("out.placeholder", (d,), "embed"))
    if cfg.rope.use_image_index_embedding:
        specs.append(("index_emb", (cfg.max_image_index + 1, d), "embed"))
    if flow:
        specs += [
            ("time.w1", (cfg.time_freq_dim, d), "fan_in"),
            ("time.b1", (d,), "zeros"),
            ("time.w2", (d, d), "fan_in"),
            ("time.b2", (d,), "zeros"),
        ]
    for i in range(cfg.refiner_layers):
        specs += _block_specs(f"refiner.{i}", cfg, timestep=False)
    for i in range(cfg.layers):
        specs += _block_specs(f"block.{i}", cfg, timestep=flow)
    specs.append(("final.mod.b", (2 * d,), "zeros"))
    if flow:
        specs.append(("final.mod.w", (d, 2 * d), "zeros"))
    specs += [("head.w", (d, cfg.patch_dim), "fan_in"), ("head.b", (cfg.patch_dim,), "zeros")]
    return specs


def init_params(cfg: ModelConfig, rng: SeededStream) -> dict:
    """Fresh parameters. The image-index table draws from its own sub-stream so
    the remaining parameters are identical with and without it."""
    params = {}
    for name, shape, kind in param_specs(cfg):
        src = rng.spawn("index_emb") if name == "index_emb" else rng
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "embed":
            arr = 0.02 * src.normal(shape)
        else:
            arr = src.normal(shape) / math.sqrt(shape[0])
        params[name] = arr.astype(np.float32)
    return params


def count_params(params: dict) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# token sequence
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    embeddings: Tensor  # (batch, tokens, dim)
    positions: np.ndarray  # (tokens, 3)
    layout: list
    ranges: list

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[1]

    @property
    def output_range(self) -> tuple[int, int]:
        for seg, r in zip(self.layout, self.ranges):
            if seg.kind == "image" and seg.role == "output":
                return r
        raise SequenceError("sequence has no output segment")

    @property
    def output_segment(self) -> Segment:
        for seg in self.layout:
            if seg.kind == "image" and seg.role == "output":
                return seg
        raise SequenceError("sequence has no output segment")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) -> (..., H/p * W/p, p*p*C), patches in row-major order."""
    *lead, h, w, c = images.shape
    if h % patch or w % patch:
        raise SequenceError(f"patch size {patch} does not divide image {h}x{w}")
    x = images.reshape(*lead, h // patch, patch, w // patch, patch, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(patches: np.ndarray, height: int, width: int, patch: int) -> np.ndarray:
    *lead, n, pd = patches.shape
    c = pd // (patch * patch)
    gh, gw = height // patch, width // patch
    x = patches.reshape(*lead, gh, gw, patch, patch, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, height, width, c)


def condition_embeddings(P: dict, ks: Sequence[int]) -> Tensor:
    """Stand-in for the VLM hidden states of "reproduce image k": a learned task
    sequence plus a learned embedding of k added to every position."""
    ks = np.asarray(ks, dtype=np.int64)
    idx = embedding(P["cond.index"], ks)
    idx = reshape(idx, (len(ks), 1, idx.shape[-1]))
    return add(P["cond.task"], idx)


def assemble_sequence(
    P: dict,
    condition: Tensor,
    images: np.ndarray,
    target,
    cfg: ModelConfig,
) -> TokenSequence:
    """Build ``[condition][inputs][output]`` with positions from ``cfg.rope``.

    ``images`` is (batch, n, H, W, C). ``target`` is the output grid ``(H, W)``
    in direct mode, or the noisy latent image (batch, H, W, C) in flow mode.
    The output segment takes image index 0 and inputs 1..n.
    """
    images = np.asarray(images)
    if images.ndim != 5:
        raise SequenceError(f"images must be (batch, n, H, W, C), got shape {images.shape}")
    b, n, h, w, c = images.shape
    if c != cfg.channels:
        raise SequenceError(f"images have {c} channels, model expects {cfg.channels}")
    if n > cfg.max_image_index:
        raise SequenceError(f"{n} input images exceed max_image_index {cfg.max_image_index}")
    if condition.ndim != 3 or condition.shape[0] != b or condition.shape[1] < 1:
        raise SequenceError(f"condition must be (batch={b}, length>=1, dim), got {condition.shape}")
    p = cfg.patch
    if h % p or w % p:
        raise SequenceError(f"patch size {p} does not divide input images {h}x{w}")

    if cfg.mode == "flow":
        x_t = np.asarray(target)
        if x_t.ndim != 4 or x_t.shape[0] != b:
            raise SequenceError(f"flow mode needs a noisy latent of shape (batch, H, W, C), got {x_t.shape}")
        th, tw = x_t.shape[1:3]
    else:
        th, tw = target
    if th % p or tw % p:
        raise SequenceError(f"patch size {p} does not divide output {th}x{tw}")
    grid_in, grid_out = (h // p, w // p), (th // p, tw // p)

    layout = [Segment.text(condition.shape[1])]
    layout += [Segment.image(k + 1, *grid_in) for k in range(n)]
    layout.append(Segment.image(0, *grid_out, role="output"))
    positions = rope.assign_positions(layout, cfg.rope)

    dtype = condition.data.dtype
    parts = [condition]
    if n:
        patches = patchify(images.astype(dtype, copy=False), p).reshape(b, -1, cfg.patch_dim)
        parts.append(linear(condition.graph.constant(patches), P["patch.w"], P["patch.b"]))
    n_out = grid_out[0] * grid_out[1]
    if cfg.mode == "flow":
        lat = patchify(x_t.astype(dtype, copy=False), p)
        parts.append(linear(condition.graph.constant(lat), P["patch.w"], P["patch.b"]))
    else:
        parts.append(mul(np.ones((b, n_out, 1), dtype=dtype), P["out.placeholder"]))
    emb = concat(parts, axis=1)
    if cfg.rope.use_image_index_embedding:
        emb = rope.image_index_embedding(emb, layout, P["index_emb"], cfg.rope)
    return TokenSequence(emb, positions, layout, rope.segment_ranges(layout))


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _modulation(P, prefix, d, c, parts):
    """Per-branch modulation vectors, each (batch or 1, 1, d)."""
    mod = P[f"{prefix}.mod.b"]
    if c is not None and f"{prefix}.mod.w" in P:
        mod = add(linear(silu(c), P[f"{prefix}.mod.w"]), mod)
        mod = reshape(mod, (mod.shape[0], 1, parts * d))
    else:
        mod = reshape(mod, (1, 1, parts * d))
    return [slice_axis(mod, i * d, (i + 1) * d, axis=2) for i in range(parts)]


def _modulate(x, shift, scl):
    return add(mul(x, add(scl, 1.0)), shift)


def attention(x: Tensor, P: dict, prefix: str, cfg: ModelConfig, cos, sin) -> Tensor:
    b, n, d = x.shape
    hds, hd = cfg.heads, cfg.head_dim
    qkv = linear(x, P[f"{prefix}.attn.qkv.w"], P[f"{prefix}.attn.qkv.b"])
    qkv = reshape(qkv, (b, n, 3, hds, hd))
    q, k, v = (reshape(slice_axis(qkv, i, i + 1, axis=2), (b, n, hds, hd)) for i in range(3))
    q = rope.rotary(q, cos, sin)
    k = rope.rotary(k, cos, sin)
    q = transpose(q, (0, 2, 1, 3))
    kt = transpose(k, (0, 2, 3, 1))
    v = transpose(v, (0, 2, 1, 3))
    att = softmax(scale(matmul(q, kt), 1.0 / math.sqrt(hd)))
    out = transpose(matmul(att, v), (0, 2, 1, 3))
    out = reshape(out, (b, n, d))
    return linear(out, P[f"{prefix}.attn.out.w"], P[f"{prefix}.attn.out.b"])


def mlp(x: Tensor, P: dict, prefix: str, cfg: ModelConfig) -> Tensor:
    act = silu if cfg.activation == "silu" else gelu
    h = act(linear(x, P[f"{prefix}.mlp.up.w"], P[f"{prefix}.mlp.up.b"]))
    return linear(h, P[f"{prefix}.mlp.down.w"], P[f"{prefix}.mlp.down.b"])


def block(x: Tensor, P: dict, prefix: str, cfg: ModelConfig, cos, sin, c=None) -> Tensor:
    """Pre-norm block with gated residual branches (gates start at zero)."""
    sh_a, sc_a, g_a, sh_m, sc_m, g_m = _modulation(P, prefix, cfg.dim, c, 6)
    h = _modulate(rms_norm(x, cfg.norm_eps), sh_a, sc_a)
    x = add(x, mul(g_a, attention(h, P, prefix, cfg, cos, sin)))
    h = _modulate(rms_norm(x, cfg.norm_eps), sh_m, sc_m)
    return add(x, mul(g_m, mlp(h, P, prefix, cfg)))


def _run_block(x, P, prefix, cfg, cos, sin, c=None):
    try:
        return block(x, P, prefix, cfg, cos, sin, c)
    except NonFiniteError as e:
        raise NonFiniteError(f"{prefix}/{e.node}", "non-finite activation") from e


def refine_conditions(P: dict, seq: TokenSequence, cfg: ModelConfig) -> TokenSequence:
    """Run the two refiner blocks jointly over the condition and input-image
    tokens; the output segment passes through untouched."""
    start, _ = seq.output_range
    dtype = seq.embeddings.data.dtype
    ctx = slice_axis(seq.embeddings, 0, start, axis=1)
    rest = slice_axis(seq.embeddings, start, seq.n_tokens, axis=1)
    cos, sin = rope.rotary_tables(seq.positions[:start], cfg.head_dim, cfg.rope, dtype)
    for i in range(cfg.refiner_layers):
        ctx = _run_block(ctx, P, f"refiner.{i}", cfg, cos, sin)
    return TokenSequence(concat([ctx, rest], axis=1), seq.positions, seq.layout, seq.ranges)


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of ``t * 1000``; first half cosines, second half sines."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(dtype)


def forward(P: dict, seq: TokenSequence, cfg: ModelConfig, t=None, refine: bool = True) -> Tensor:
    """Per-token prediction for the output segment: (batch, out_tokens, p*p*C).

    ``t`` (one value per batch item) is required in flow mode and forbidden in
    direct mode.
    """
    if cfg.mode == "flow" and t is None:
        raise ValueError("flow mode needs a time value t")
    if cfg.mode == "direct" and t is not None:
        raise ValueError("direct mode takes no time value")
    g = seq.embeddings.graph
    dtype = seq.embeddings.data.dtype
    if refine:
        seq = refine_conditions(P, seq, cfg)
    c = None
    if t is not None:
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (seq.embeddings.shape[0],))
        temb = g.constant(timestep_embedding(t, cfg.time_freq_dim, dtype))
        c = linear(silu(linear(temb, P["time.w1"], P["time.b1"])), P["time.w2"], P["time.b2"])
    cos, sin = rope.rotary_tables(seq.positions, cfg.head_dim, cfg.rope, dtype)
    x = seq.embeddings
    for i in range(cfg.layers):
        x = _run_block(x, P, f"block.{i}", cfg, cos, sin, c)
    start, stop = seq.output_range
    x = slice_axis(x, start, stop, axis=1)
    shift, scl = _modulation(P, "final", cfg.dim, c, 2)
    try:
        x = _modulate(rms_norm(x, cfg.norm_eps), shift, scl)
        return linear(x, P["head.w"], P["head.b"])
    except NonFiniteError as e:
        raise NonFiniteError(f"head/{e.node}", "non-finite activation") from e


def bind(graph: Graph, params: dict) -> dict:
    """Register every parameter as a differentiable leaf of ``graph``."""
    return {k: graph.param(v, label=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: dict) -> None:
    """Header (magic, version, config-JSON length, config JSON) followed by each
    parameter in declaration order: ndim, dims (uint32 LE) and float32 LE data."""
    names = [s[0] for s in param_specs(cfg)]
    if set(names) != set(params):
        raise ValueError("parameter set does not match the configuration")
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        for name in names:
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict]:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if buf.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack("<II", buf.read(8))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig.from_dict(json.loads(buf.read(n).decode("utf-8")))
    params = {}
    for name, shape, _ in param_specs(cfg):
        (ndim,) = struct.unpack("<I", buf.read(4))
        dims = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        if tuple(dims) != tuple(shape):
            raise ValueError(f"{path}: parameter {name} has shape {dims}, expected {shape}")
        count = int(np.prod(dims))
        params[name] = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if buf.read(1):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return cfg, params


def with_scheme(cfg: ModelConfig, scheme: str, index_embedding: bool) -> ModelConfig:
    return replace(cfg, rope=replace(cfg.rope, scheme=scheme, use_image_index_embedding=index_embedding))
