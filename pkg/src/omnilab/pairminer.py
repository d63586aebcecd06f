"""Mining edit-style frame pairs from video.

Three filters, applied in order:

1. Scene cuts from frame-difference statistics: a jump in the frame's average
   RGB intensity marks a cut unless recent frames were already changing a lot
   per pixel in HSV space (camera motion), which raises the bar.
2. A band filter on externally computed embedding-difference scores: pairs
   that barely differ or differ too much are dropped.
3. A viewpoint check: both frames are cut into a grid of blocks, corresponding
   blocks are compared by colour-histogram intersection, and the pair is kept
   only if enough blocks still match.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class CutParams:
    t_rgb: float = 30.0
    window: int = 8
    alpha: float = 2.0
    min_scene_len: int = 5


@dataclass(frozen=True)
class BlockParams:
    grid: int = 4
    bins: int = 16
    tau_block: float = 0.8
    tau_frame: float = 0.7


@dataclass
class FrameStats:
    mean_rgb: np.ndarray  # (F, 3), 0..255
    rgb_diff: np.ndarray  # (F,), channel-mean |mean_rgb[i] - mean_rgb[i-1]|; entry 0 is 0
    hsv_delta: np.ndarray  # (F, 3): mean |dH| in degrees, |dS|, |dV|
    hsv_diff: np.ndarray  # (F,), combined HSV change on a 0..255 scale
    rolling_hsv: np.ndarray  # (F,), trailing mean of hsv_diff; NaN while i < window
    window: int

    @property
    def n_frames(self) -> int:
        return len(self.rgb_diff)


@dataclass(frozen=True)
class SceneCut:
    index: int
    value: float


@dataclass(frozen=True)
class FramePair:
    i: int
    j: int
    score: float
    proportion: float
    consistent: bool


class PairError(KeyError):
    pass


# ---------------------------------------------------------------------------
# scene detection
# ---------------------------------------------------------------------------


def _check_frames(frames) -> None:
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    shape = frames[0].shape
    if len(shape) != 3 or shape[2] != 3:
        raise ValueError(f"frames must be (H, W, 3), got {shape}")
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"frame {i} has shape {f.shape}, expected {shape}")


def combined_hsv(delta) -> float:
    """Average of hue (as a fraction of 180 degrees), saturation and value change, times 255."""
    return float((delta[0] / 180.0 + delta[1] + delta[2]) / 3.0 * 255.0)


def compute_frame_stats(frames: Sequence[np.ndarray], window: int = 8) -> FrameStats:
    _check_frames(frames)
    if window < 1:
        raise ValueError("window must be >= 1")
    n = len(frames)
    mean_rgb = np.stack([f.reshape(-1, 3).mean(axis=0) for f in frames])
    rgb_diff = np.zeros(n)
    rgb_diff[1:] = np.abs(np.diff(mean_rgb, axis=0)).mean(axis=1)
    hsv_delta = np.zeros((n, 3))
    hsv_diff = np.zeros(n)
    for i in range(1, n):
        hsv_delta[i] = kernels.hsv_delta(frames[i - 1], frames[i])
        hsv_diff[i] = combined_hsv(hsv_delta[i])
    rolling = np.full(n, np.nan)
    for i in range(window, n):
        rolling[i] = hsv_diff[i - window + 1 : i + 1].mean()
    return FrameStats(mean_rgb, rgb_diff, hsv_delta, hsv_diff, rolling, window)


def detect_scene_cuts(stats: FrameStats, params: CutParams = CutParams()) -> list:
    """Cut at frame ``i`` when ``rgb_diff[i] > t_rgb`` and ``rgb_diff[i]`` exceeds
    ``alpha`` times the mean HSV change over the (up to) ``window`` preceding
    frame pairs. Cuts closer than ``min_scene_len`` to the previous cut are
    skipped, and a final scene shorter than that is merged into its predecessor.
    """
    cuts = []
    last = 0
    w = params.window
    for i in range(1, stats.n_frames):
        d = stats.rgb_diff[i]
        if d <= params.t_rgb or i - last < params.min_scene_len:
            continue
        prior = stats.hsv_diff[max(1, i - w) : i]
        bar = params.alpha * prior.mean() if prior.size else 0.0
        if d > bar:
            cuts.append(SceneCut(i, float(d)))
            last = i
    if cuts and stats.n_frames - cuts[-1].index < params.min_scene_len:
        cuts.pop()
    return cuts


def scenes_from_cuts(cuts: Iterable, n_frames: int) -> list:
    """Half-open ``(start, end)`` frame ranges covering ``0..n_frames``."""
    bounds = [0] + [c.index for c in cuts] + [n_frames]
    return [(bounds[k], bounds[k + 1]) for k in range(len(bounds) - 1)]


# ---------------------------------------------------------------------------
# viewpoint consistency
# ---------------------------------------------------------------------------


def block_similarity(a: np.ndarray, b: np.ndarray, grid: int = 4, bins: int = 16, tau_block: float = 0.8) -> float:
    """Fraction of the ``grid x grid`` blocks whose colour histograms match.

    A block matches when the mean over channels of the histogram intersection
    (sum of bin-wise minima of normalised histograms) is at least ``tau_block``.
    """
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError(f"images must be (H, W, C), got {a.shape}")
    if grid < 1 or grid > min(a.shape[:2]):
        raise ValueError(f"grid {grid} does not fit image {a.shape[:2]}")
    ha = kernels.block_histograms(a, grid, bins)
    hb = kernels.block_histograms(b, grid, bins)
    inter = np.minimum(ha, hb).sum(axis=-1).mean(axis=-1)
    return int((inter >= tau_block).sum()) / (grid * grid)


def viewpoint_consistent(a, b, params: BlockParams = BlockParams()) -> bool:
    return block_similarity(a, b, params.grid, params.bins, params.tau_block) >= params.tau_frame


def evaluate_pairs(frames, scene, scores: dict, band, params: BlockParams = BlockParams(), candidates=None) -> list:
    """Every in-band candidate pair of ``scene`` with its block proportion and flag.

    ``candidates`` defaults to all ``i < j`` inside the half-open ``scene``.
    """
    start, end = scene
    lo, hi = band
    if candidates is None:
        candidates = [(i, j) for i in range(start, end) for j in range(i + 1, end)]
    out = []
    for i, j in candidates:
        if not (start <= i < j < end):
            raise ValueError(f"pair ({i}, {j}) is not an ordered pair inside scene {scene}")
        if (i, j) not in scores:
            raise PairError(f"no difference score for pair ({i}, {j})")
        s = float(scores[(i, j)])
        if not lo <= s <= hi:
            continue
        prop = block_similarity(frames[i], frames[j], params.grid, params.bins, params.tau_block)
        out.append(FramePair(i, j, s, prop, prop >= params.tau_frame))
    return out


def select_pairs(frames, scene, scores: dict, band, params: BlockParams = BlockParams(), candidates=None) -> list:
    """In-band pairs that also pass the viewpoint check."""
    return [p for p in evaluate_pairs(frames, scene, scores, band, params, candidates) if p.consistent]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval <= 255) -> uint8 (H, W, 3)."""
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if not m:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(x) for x in fields[1:])
    if not 0 < maxval <= 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    img = pix.reshape(h, w, 3)
    if maxval != 255:
        img = (img.astype(np.uint16) * 255 // maxval).astype(np.uint8)
    return img.copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm expects uint8 (H, W, 3)")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


FRAME_EXTENSIONS = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise ValueError(f"{path}: only PPM frames are supported without Pillow") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def list_frames(directory) -> list:
    files = [p for p in Path(directory).iterdir() if p.suffix.lower() in FRAME_EXTENSIONS]
    if not files:
        raise FileNotFoundError(f"no frames found in {directory}")

    def key(p: Path):
        nums = re.findall(r"\d+", p.stem)
        return (int(nums[-1]) if nums else -1, p.name)

    return sorted(files, key=key)


def load_frames(directory) -> list:
    return [_read_image(p) for p in list_frames(directory)]


def write_frames(directory, frames, prefix: str = "frame_") -> list:
    os.makedirs(directory, exist_ok=True)
    width = max(5, len(str(len(frames))))
    paths = []
    for i, f in enumerate(frames):
        p = Path(directory) / f"{prefix}{i:0{width}d}.ppm"
        write_ppm(p, f)
        paths.append(p)
    return paths


def read_scores(path) -> dict:
    """Score file: one ``i j score`` triple per line; ``#`` starts a comment."""
    scores = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'i j score', got {line!r}")
            i, j, s = int(parts[0]), int(parts[1]), float(parts[2])
            if i > j:
                i, j = j, i
            scores[(i, j)] = s
    return scores


def write_scores(path, scores: dict) -> None:
    with open(path, "w") as f:
        for (i, j), s in sorted(scores.items()):
            f.write(f"{i} {j} {s!r}\n")


def manifest_dict(scenes, pairs, params: dict | None = None) -> dict:
    return {
        "scenes": [{"start": s, "end": e} for s, e in scenes],
        "pairs": [
            {"i": p.i, "j": p.j, "score": p.score, "proportion": p.proportion, "consistent": p.consistent}
            for p in pairs
        ],
        "params": params or {},
    }
