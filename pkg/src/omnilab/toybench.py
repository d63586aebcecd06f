"""Positional-encoding ablation on a "reproduce the k-th image" toy task.

Each example shows the model ``n`` synthetic images plus a condition that
names one of them; the model must reproduce that image. Models for different
schemes share the seed-derived initialisation and data stream, so the only
differences between runs are the position ids and the optional image-index
embedding.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import decoder as dec
from . import flow
from .numcore import AdamWState, Graph, GraphError, SeededStream, adamw_step, add, derive_seed, mse, scale, seeded_stream
from .plotting import emit_plot
from .rope import SCHEMES

INDEX_SUFFIX = "+index_emb"
TRAINING_MODES = ("direct", "flow")


def valid_scheme_ids() -> list[str]:
    return list(SCHEMES) + [s + INDEX_SUFFIX for s in SCHEMES]


def parse_scheme(scheme_id: str) -> tuple[str, bool]:
    base, idx = scheme_id, False
    if scheme_id.endswith(INDEX_SUFFIX):
        base, idx = scheme_id[: -len(INDEX_SUFFIX)], True
    if base not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme_id!r}; valid: {', '.join(valid_scheme_ids())}")
    return base, idx


@dataclass(frozen=True)
class ExperimentConfig:
    model: dec.ModelConfig = field(default_factory=dec.ModelConfig)
    schemes: tuple = ("omni_rope", "qwen_accum", "lumina_accum", "omni_rope+index_emb")
    seeds: tuple = (0, 1, 2)
    max_steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    target_loss: float = 0.014
    smoothing_window: int = 50
    images_per_example: tuple = (2, 4)
    image_size: int = 16
    mode: str = "direct"

    def __post_init__(self):
        if not self.target_loss > 0:
            raise ValueError("target_loss must be > 0")
        if self.smoothing_window < 1 or self.max_steps < self.smoothing_window:
            raise ValueError("need 1 <= smoothing_window <= max_steps")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not self.schemes:
            raise ValueError("schemes must be non-empty")
        for s in self.schemes:
            parse_scheme(s)
        lo, hi = self.images_per_example
        if not 1 <= lo <= hi <= self.model.max_image_index:
            raise ValueError(f"images_per_example {self.images_per_example} must lie within [1, max_image_index]")
        if self.mode not in TRAINING_MODES:
            raise ValueError(f"mode must be one of {TRAINING_MODES}")
        if self.model.mode != self.mode:
            # the training mode decides how the model consumes its output segment
            object.__setattr__(self, "model", replace(self.model, mode=self.mode))
        if self.image_size % self.model.patch:
            raise ValueError(f"patch {self.model.patch} does not divide image_size {self.image_size}")
        if self.batch_size < 1 or self.lr < 0:
            raise ValueError("batch_size must be >= 1 and lr >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["schemes"] = list(self.schemes)
        d["seeds"] = list(self.seeds)
        d["images_per_example"] = list(self.images_per_example)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        model = dec.ModelConfig.from_dict(d.pop("model", {}))
        for key in ("schemes", "seeds", "images_per_example"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(model=model, **d)


@dataclass
class MetricsLog:
    scheme: str
    seed: int
    smoothed: np.ndarray  # smoothed loss after steps 1..max_steps
    steps_to_target: int | None
    final_loss: float | None
    wall_seconds: float
    failed: bool = False
    error: str = ""


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_image(rng: SeededStream, size: int, channels: int = 3) -> np.ndarray:
    """Background colour + linear gradient + three coloured rectangles, in [0, 1]."""
    img = np.empty((size, size, channels))
    img[:] = rng.uniform(size=channels)
    ang = rng.uniform(0.0, 2 * math.pi)
    amp = rng.uniform(-0.5, 0.5, size=channels)
    yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, size), np.linspace(-0.5, 0.5, size), indexing="ij")
    ramp = math.cos(ang) * xx + math.sin(ang) * yy
    img += ramp[:, :, None] * amp[None, None, :]
    for _ in range(3):
        h = int(rng.integers(2, max(2, size // 2)))
        w = int(rng.integers(2, max(2, size // 2)))
        r0 = int(rng.integers(0, size - h))
        c0 = int(rng.integers(0, size - w))
        img[r0 : r0 + h, c0 : c0 + w] = rng.uniform(size=channels)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_toy_example(config: ExperimentConfig, rng: SeededStream):
    """Returns ``(inputs (n, H, W, C), k, target)`` with ``k`` 1-based."""
    lo, hi = config.images_per_example
    n = int(rng.integers(lo, hi))
    inputs = np.stack([synth_image(rng, config.image_size, config.model.channels) for _ in range(n)])
    k = int(rng.integers(1, n))
    return inputs, k, inputs[k - 1].copy()


def make_batch(config: ExperimentConfig, rng: SeededStream) -> dict:
    """Draw ``batch_size`` examples, grouped by image count: n -> (inputs, ks, targets)."""
    groups: dict[int, list] = {}
    for _ in range(config.batch_size):
        inputs, k, target = gen_toy_example(config, rng)
        groups.setdefault(len(inputs), []).append((inputs, k, target))
    return {
        n: (np.stack([e[0] for e in ex]), np.array([e[1] for e in ex]), np.stack([e[2] for e in ex]))
        for n, ex in sorted(groups.items())
    }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def batch_loss(P: dict, batch: dict, cfg: dec.ModelConfig, rng: SeededStream | None = None):
    """Graph loss over a grouped batch, each group weighted by its share of examples."""
    total_examples = sum(len(ks) for _, ks, _ in batch.values())
    loss = None
    for n, (inputs, ks, targets) in batch.items():
        cond = dec.condition_embeddings(P, ks)
        x0 = dec.patchify(targets, cfg.patch)
        if cfg.mode == "flow":
            ts, x_t, v = [], [], []
            for tgt in targets:
                ex = flow.make_training_example(tgt, rng)
                ts.append(ex.t)
                x_t.append(ex.x_t)
                v.append(ex.v_target)
            seq = dec.assemble_sequence(P, cond, inputs, np.stack(x_t), cfg)
            pred = dec.forward(P, seq, cfg, t=np.array(ts))
            goal = dec.patchify(np.stack(v), cfg.patch)
        else:
            seq = dec.assemble_sequence(P, cond, inputs, targets.shape[1:3], cfg)
            pred = dec.forward(P, seq, cfg)
            goal = x0
        part = scale(mse(pred, goal), len(ks) / total_examples)
        loss = part if loss is None else add(loss, part)
    return loss


def train_step(params: dict, state: AdamWState, batch: dict, cfg: dec.ModelConfig, rng=None) -> float:
    with Graph() as g:
        P = dec.bind(g, params)
        loss = batch_loss(P, batch, cfg, rng)
        g.backward(loss)
        grads = {k: P[k].grad for k in P}
        value = float(loss.data)
    adamw_step(params, grads, state)
    return value


def reconstruct(params: dict, cfg: dec.ModelConfig, inputs: np.ndarray, k: int, steps: int = 1, rng=None) -> np.ndarray:
    """Predict image ``k`` (1-based) of ``inputs`` (n, H, W, C).

    Direct mode runs one forward pass; flow mode Euler-integrates the predicted
    velocity over ``steps`` steps from noise drawn from ``rng``.
    """
    h, w = inputs.shape[1:3]

    def run(x_t=None, t=None):
        with Graph() as g:
            P = {name: g.constant(v) for name, v in params.items()}
            seq = dec.assemble_sequence(P, dec.condition_embeddings(P, [k]), inputs[None], (h, w) if x_t is None else x_t, cfg)
            return dec.unpatchify(dec.forward(P, seq, cfg, t=t).data, h, w, cfg.patch)

    if cfg.mode == "direct":
        return run()[0]
    return flow.sample(lambda x, t: run(x, np.array([t])), (1, h, w, cfg.channels), steps, rng)[0]


def smooth(losses, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` values (fewer at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def steps_to_target(smoothed, target: float) -> int | None:
    hit = np.flatnonzero(np.asarray(smoothed) < target)
    return int(hit[0]) + 1 if hit.size else None


def run_seeds(seed: int) -> dict:
    """Independent sub-seeds for initialisation, data and (flow) noise."""
    return {k: derive_seed(seed, k) for k in ("init", "data", "noise")}


def model_for(config: ExperimentConfig, scheme_id: str) -> dec.ModelConfig:
    base, idx = parse_scheme(scheme_id)
    return dec.with_scheme(config.model, base, idx)


def run_experiment(scheme: str, seed: int, config: ExperimentConfig, progress=None) -> MetricsLog:
    """Train a fresh model for ``max_steps`` steps and log its smoothed loss.

    A non-finite loss or activation ends the run early and marks it failed;
    the log then covers only the completed steps.
    """
    cfg = model_for(config, scheme)
    seeds = run_seeds(seed)
    params = dec.init_params(cfg, seeded_stream(seeds["init"]))
    state = AdamWState.for_params(params, lr=config.lr, weight_decay=config.weight_decay)
    data_rng = seeded_stream(seeds["data"])
    noise_rng = seeded_stream(seeds["noise"])
    losses = []
    t0 = time.perf_counter()
    failed, error = False, ""
    for step in range(config.max_steps):
        batch = make_batch(config, data_rng)
        try:
            value = train_step(params, state, batch, cfg, noise_rng)
        except GraphError as e:
            failed, error = True, str(e)
            break
        if not math.isfinite(value):
            failed, error = True, f"non-finite loss at step {step + 1}"
            break
        losses.append(value)
        if progress is not None:
            progress(step + 1, value)
    sm = smooth(losses, config.smoothing_window)
    return MetricsLog(
        scheme=scheme,
        seed=seed,
        smoothed=sm,
        steps_to_target=None if failed else steps_to_target(sm, config.target_loss),
        final_loss=None if failed or not len(sm) else float(sm[-1]),
        wall_seconds=time.perf_counter() - t0,
        failed=failed,
        error=error,
    )


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------


@dataclass
class SchemeSummary:
    scheme: str
    median_steps_to_target: float | None
    median_final_loss: float | None
    n_seeds: int
    n_failed: int

    @property
    def failed(self) -> bool:
        return self.n_failed == self.n_seeds


def _median_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def summarize(logs: list) -> list:
    """Per scheme (in first-seen order): medians over seeds. A seed that never
    reached the target counts as +inf steps, so the median is ``None`` when
    half or more of the seeds missed it."""
    by_scheme: dict[str, list] = {}
    for log in logs:
        by_scheme.setdefault(log.scheme, []).append(log)
    rows = []
    for scheme, group in by_scheme.items():
        ok = [l for l in group if not l.failed]
        steps = [l.steps_to_target if l.steps_to_target is not None else math.inf for l in ok]
        med_steps = float(np.median(steps)) if steps else None
        if med_steps is not None and not math.isfinite(med_steps):
            med_steps = None
        rows.append(
            SchemeSummary(
                scheme=scheme,
                median_steps_to_target=med_steps,
                median_final_loss=_median_or_none([l.final_loss for l in ok]),
                n_seeds=len(group),
                n_failed=len(group) - len(ok),
            )
        )
    return rows


def median_curves(logs: list) -> dict:
    curves = {}
    by_scheme: dict[str, list] = {}
    for log in logs:
        if not log.failed and len(log.smoothed):
            by_scheme.setdefault(log.scheme, []).append(log.smoothed)
    for scheme, arrs in by_scheme.items():
        n = min(len(a) for a in arrs)
        if n < 2:
            continue
        med = np.median(np.stack([a[:n] for a in arrs]), axis=0)
        curves[scheme] = (list(range(1, n + 1)), med.tolist())
    return curves


def _fmt_float(v) -> str:
    return "" if v is None else repr(float(v))


def write_metrics_csv(path, logs: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scheme", "seed", "step", "smoothed_loss"])
        for log in logs:
            for i, v in enumerate(log.smoothed):
                w.writerow([log.scheme, log.seed, i + 1, repr(float(v))])


def write_summary_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scheme", "median_steps_to_target", "median_final_loss", "n_seeds", "n_failed"])
        for r in rows:
            steps = "" if r.median_steps_to_target is None else f"{r.median_steps_to_target:g}"
            w.writerow([r.scheme, steps, _fmt_float(r.median_final_loss), r.n_seeds, r.n_failed])


def read_summary_csv(path) -> dict:
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[row["scheme"]] = SchemeSummary(
                scheme=row["scheme"],
                median_steps_to_target=float(row["median_steps_to_target"]) if row["median_steps_to_target"] else None,
                median_final_loss=float(row["median_final_loss"]) if row["median_final_loss"] else None,
                n_seeds=int(row["n_seeds"]),
                n_failed=int(row["n_failed"]),
            )
    return out


def _run_job(args):
    scheme, seed, config = args
    return run_experiment(scheme, seed, config)


@dataclass
class Comparison:
    logs: list
    summary: list
    paths: dict


def compare_schemes(config: ExperimentConfig, out_dir=None, jobs: int = 1, progress=None) -> Comparison:
    """Run every (scheme, seed) pair, aggregate, and optionally write
    ``metrics.csv``, ``summary.csv`` and ``loss_curves.svg`` under ``out_dir``."""
    work = [(s, seed, config) for s in config.schemes for seed in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            logs = list(ex.map(_run_job, work))
    else:
        logs = []
        for item in work:
            logs.append(_run_job(item))
            if progress is not None:
                progress(logs[-1])
    rows = summarize(logs)
    paths = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": out / "metrics.csv", "summary": out / "summary.csv", "plot": out / "loss_curves.svg"}
        write_metrics_csv(paths["metrics"], logs)
        write_summary_csv(paths["summary"], rows)
        curves = median_curves(logs)
        if curves:
            emit_plot(curves, paths["plot"], threshold=config.target_loss, title="toy reconstruction: median smoothed loss")
        else:
            paths.pop("plot")
    return Comparison(logs=logs, summary=rows, paths=paths)
