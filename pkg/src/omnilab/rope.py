"""Three-axis rotary position embeddings.

Every token carries an ``(instance, row, col)`` identifier. The head dimension
is split into three channel groups, one per axis, and each group is rotated
pairwise by ``theta ** (-2j / d_axis) * component`` exactly as in 1-D RoPE.

Three position-assignment schemes are provided:

``omni_rope``
    An image keeps its local grid ``(row, col)`` starting at ``(0, 0)``; its
    instance id is a running offset that advances by one per text token and
    by one per image. Text tokens get ``(t, t, t)``.
``lumina_accum``
    Instance is always 0; row/col offsets accumulate diagonally, advancing by
    ``L`` after a text run and by ``H``/``W`` after an image.
``qwen_accum``
    A single offset is added to all three axes; it advances by ``L`` after a
    text run and by ``max(H, W)`` after an image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .numcore import Tensor, embedding, mul, add

SCHEMES = ("omni_rope", "lumina_accum", "qwen_accum")


class LayoutError(ValueError):
    pass


class PosId3(NamedTuple):
    instance: int
    row: int
    col: int


@dataclass(frozen=True)
class Segment:
    kind: str  # "text" or "image"
    length: int = 0
    index: int = 0
    height: int = 0
    width: int = 0
    role: str = "input"

    @classmethod
    def text(cls, length: int) -> "Segment":
        return cls("text", length=length, role="condition")

    @classmethod
    def image(cls, index: int, height: int, width: int, role: str = "input") -> "Segment":
        return cls("image", index=index, height=height, width=width, role=role)

    @property
    def n_tokens(self) -> int:
        return self.length if self.kind == "text" else self.height * self.width


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "omni_rope"
    use_image_index_embedding: bool = False
    axis_split: tuple = (0.25, 0.375, 0.375)
    theta: float = 10000.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {', '.join(SCHEMES)}")
        if len(self.axis_split) != 3 or abs(sum(self.axis_split) - 1.0) > 1e-9 or min(self.axis_split) <= 0:
            raise ValueError(f"axis_split must be three positive fractions summing to 1, got {self.axis_split}")
        if self.theta <= 1.0:
            raise ValueError(f"theta must exceed 1, got {self.theta}")

    def axis_channels(self, head_dim: int) -> tuple[int, int, int]:
        """Even per-axis channel counts summing to ``head_dim`` (each at least 2)."""
        if head_dim % 2 or head_dim < 6:
            raise ValueError(f"head_dim must be even and >= 6, got {head_dim}")
        d_inst = max(2, 2 * int(np.floor(head_dim * self.axis_split[0] / 2 + 0.5)))
        d_row = max(2, 2 * int(np.floor(head_dim * self.axis_split[1] / 2 + 0.5)))
        d_col = head_dim - d_inst - d_row
        if d_col < 2:
            raise ValueError(f"axis_split {self.axis_split} leaves no column channels at head_dim {head_dim}")
        return d_inst, d_row, d_col


def validate_layout(layout: Sequence[Segment]) -> None:
    if not layout:
        raise LayoutError("layout is empty")
    seen = set()
    outputs = 0
    for i, seg in enumerate(layout):
        if seg.kind == "text":
            if seg.length < 1:
                raise LayoutError(f"segment {i}: text length must be >= 1, got {seg.length}")
        elif seg.kind == "image":
            if seg.height < 1 or seg.width < 1:
                raise LayoutError(f"segment {i}: image grid must be at least 1x1, got {seg.height}x{seg.width}")
            if seg.index < 0:
                raise LayoutError(f"segment {i}: negative image index {seg.index}")
            if seg.index in seen:
                raise LayoutError(f"segment {i}: duplicate image index {seg.index}")
            seen.add(seg.index)
            if seg.role == "output":
                outputs += 1
            elif seg.role != "input":
                raise LayoutError(f"segment {i}: unknown image role {seg.role!r}")
        else:
            raise LayoutError(f"segment {i}: unknown kind {seg.kind!r}")
    if outputs > 1:
        raise LayoutError(f"at most one output segment allowed, found {outputs}")


def segment_ranges(layout: Sequence[Segment]) -> list[tuple[int, int]]:
    out, start = [], 0
    for seg in layout:
        out.append((start, start + seg.n_tokens))
        start += seg.n_tokens
    return out


def _grid(h, w):
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return rows.ravel(), cols.ravel()


def assign_positions(layout: Sequence[Segment], config: SchemeConfig) -> np.ndarray:
    """Position ids for every token, as an int64 array of shape (tokens, 3)."""
    validate_layout(layout)
    parts = []
    offset = 0  # omni: running instance; qwen: shared offset
    dh = dw = 0  # lumina accumulators
    for seg in layout:
        if seg.kind == "text":
            t = np.arange(seg.length)
            if config.scheme == "lumina_accum":
                p = np.stack([np.zeros_like(t), t + dh, t + dw], axis=1)
                dh += seg.length
                dw += seg.length
            else:
                p = np.repeat((t + offset)[:, None], 3, axis=1)
                offset += seg.length
        else:
            r, c = _grid(seg.height, seg.width)
            if config.scheme == "omni_rope":
                p = np.stack([np.full_like(r, offset), r, c], axis=1)
                offset += 1
            elif config.scheme == "lumina_accum":
                p = np.stack([np.zeros_like(r), r + dh, c + dw], axis=1)
                dh += seg.height
                dw += seg.width
            else:
                p = np.stack([np.full_like(r, offset), r + offset, c + offset], axis=1)
                offset += max(seg.height, seg.width)
        parts.append(p)
    return np.concatenate(parts, axis=0).astype(np.int64)


def as_posids(positions: np.ndarray) -> list[PosId3]:
    return [PosId3(*map(int, p)) for p in positions]


def rotary_angles(positions: np.ndarray, head_dim: int, config: SchemeConfig) -> np.ndarray:
    """Rotation angle per (token, channel pair), float64 of shape (tokens, head_dim // 2)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    groups = []
    for axis, d in enumerate(config.axis_channels(head_dim)):
        inv_freq = config.theta ** (-np.arange(0, d, 2, dtype=np.float64) / d)
        groups.append(positions[:, axis : axis + 1] * inv_freq[None, :])
    return np.concatenate(groups, axis=1)


def rotary_tables(positions: np.ndarray, head_dim: int, config: SchemeConfig, dtype=np.float32):
    ang = rotary_angles(positions, head_dim, config)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Differentiable rotation of ``x`` with shape (batch, tokens, heads, head_dim)."""
    dtype = x.data.dtype
    cos = cos.astype(dtype, copy=False)
    sin = sin.astype(dtype, copy=False)
    neg_sin = -sin
    out = kernels.rotate_pairs(x.data, cos, sin)
    return x.graph.op("rotary", (x,), out, lambda gr: (kernels.rotate_pairs(gr, cos, neg_sin),))


def apply_rotary(vectors, positions, config: SchemeConfig):
    """Rotate per-token head vectors by their position ids.

    ``vectors`` has shape (tokens, head_dim) or (batch, tokens, heads, head_dim)
    and may be a numpy array or a graph :class:`Tensor`.
    """
    positions = np.asarray(positions).reshape(-1, 3)
    shape = vectors.shape
    if len(shape) not in (2, 4):
        raise ValueError(f"expected (tokens, head_dim) or (batch, tokens, heads, head_dim), got {shape}")
    tokens = shape[0] if len(shape) == 2 else shape[1]
    if tokens != positions.shape[0]:
        raise ValueError(f"{tokens} vectors but {positions.shape[0]} position ids")
    head_dim = shape[-1]
    if sum(config.axis_channels(head_dim)) != head_dim:
        raise ValueError(f"head_dim {head_dim} does not match channel split")
    if isinstance(vectors, Tensor):
        cos, sin = rotary_tables(positions, head_dim, config, vectors.data.dtype)
        x = vectors if len(shape) == 4 else vectors.reshape(1, tokens, 1, head_dim)
        out = rotary(x, cos, sin)
        return out if len(shape) == 4 else out.reshape(tokens, head_dim)
    arr = np.asarray(vectors)
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    cos, sin = rotary_tables(positions, head_dim, config, dtype)
    x = arr.astype(dtype, copy=False).reshape((1, tokens, 1, head_dim) if len(shape) == 2 else shape)
    return kernels.rotate_pairs(x, cos, sin).reshape(shape)


def image_index_rows(layout: Sequence[Segment]) -> tuple[np.ndarray, np.ndarray]:
    """Per-token table row (0 for text) and a 0/1 mask selecting image tokens."""
    rows, mask = [], []
    for seg in layout:
        n = seg.n_tokens
        if seg.kind == "image":
            rows.append(np.full(n, seg.index))
            mask.append(np.ones(n))
        else:
            rows.append(np.zeros(n, dtype=np.int64))
            mask.append(np.zeros(n))
    return np.concatenate(rows).astype(np.int64), np.concatenate(mask)


def image_index_embedding(tokens, layout: Sequence[Segment], table, config: SchemeConfig):
    """Add ``table[k]`` to every token of image ``k``; text tokens are untouched.

    ``tokens`` is (tokens, dim) or (batch, tokens, dim); numpy arrays and graph
    tensors are both accepted (``table`` must then be of the same kind).
    """
    if not config.use_image_index_embedding:
        return tokens
    rows, mask = image_index_rows(layout)
    n_rows = table.shape[0]
    if rows.max(initial=0) >= n_rows:
        raise IndexError(f"image index {int(rows.max())} outside embedding table of {n_rows} rows")
    if tokens.shape[-2] != rows.shape[0]:
        raise ValueError(f"{tokens.shape[-2]} tokens but layout has {rows.shape[0]}")
    if isinstance(tokens, Tensor):
        emb = embedding(table, rows)
        emb = mul(emb, mask.astype(tokens.data.dtype)[:, None])
        return add(tokens, emb)
    return tokens + np.asarray(table)[rows] * mask[:, None]
