"""Rotary-position toy benchmark, toy decoder training and sampling, and video pair mining.

Subcommands::

    omnilab toybench compare --config c.json --out DIR [--schemes ..] [--seeds ..] [--jobs N]
    omnilab toybench run     --config c.json --out DIR --scheme S --seed N
    omnilab train            --config c.json --out DIR [--scheme S] [--seed N]
    omnilab sample           --checkpoint DIR|model.bin --out DIR [--seed N] [--steps N]
    omnilab pairmine scenes  --frames DIR --out DIR [threshold flags]
    omnilab pairmine pairs   --frames DIR --scores FILE --out DIR [threshold flags]

Exit status: 0 when every requested artifact was written, 1 on a runtime
failure, 2 on usage or configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import decoder as dec
from . import flow, pairminer, toybench
from .config import ConfigError, RunManifest, build_dataclass, config_hash, load_json
from .numcore import AdamWState, Graph, seeded_stream
from .plotting import emit_plot

log = logging.getLogger("omnilab")


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _scheme_list(text: str) -> list:
    items = [x.strip() for x in text.split(",") if x.strip()]
    valid = toybench.valid_scheme_ids()
    for it in items:
        if it not in valid:
            raise argparse.ArgumentTypeError(f"invalid scheme {it!r} (choose from {', '.join(valid)})")
    return items


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


def _experiment_config(args) -> toybench.ExperimentConfig:
    data = load_json(args.config) if args.config else {}
    overrides = {
        "max_steps": args.max_steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "target_loss": args.target_loss,
        "mode": args.mode,
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if getattr(args, "schemes", None):
        data["schemes"] = list(args.schemes)
    if getattr(args, "seeds", None):
        data["seeds"] = list(args.seeds)
    if getattr(args, "scheme", None):
        data["schemes"] = [args.scheme]
    if getattr(args, "seed", None) is not None:
        data["seeds"] = [args.seed]
    return build_dataclass(toybench.ExperimentConfig, data)


def _add_experiment_flags(p):
    p.add_argument("--config", help="experiment JSON config (missing fields take defaults)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--target-loss", type=float)
    p.add_argument("--mode", choices=toybench.TRAINING_MODES)


def _manifest(command, cfg_dict, seeds, started, outputs, out_dir, extra=None) -> Path:
    path = Path(out_dir) / "manifest.json"
    RunManifest(
        command=command,
        config=cfg_dict,
        config_hash=config_hash(cfg_dict),
        seeds=list(seeds),
        started=started,
        finished=_now(),
        outputs={k: str(Path(v).name) for k, v in outputs.items()},
        extra=extra or {},
    ).write(path)
    return path


def _progress(step, value):
    if step % 100 == 0:
        log.info("step %d loss %.6f", step, value)


# ---------------------------------------------------------------------------
# toybench
# ---------------------------------------------------------------------------


def cmd_toybench_compare(args) -> dict:
    cfg = _experiment_config(args)
    started = _now()
    res = toybench.compare_schemes(
        cfg, args.out, jobs=args.jobs, progress=lambda l: log.info("%s seed %d: steps_to_target=%s final=%s", l.scheme, l.seed, l.steps_to_target, l.final_loss)
    )
    outputs = dict(res.paths)
    for row in res.summary:
        log.info("%s median steps=%s final=%s failed=%d/%d", row.scheme, row.median_steps_to_target, row.median_final_loss, row.n_failed, row.n_seeds)
    outputs["manifest"] = _manifest("toybench compare", cfg.to_dict(), cfg.seeds, started, outputs, args.out)
    return outputs


def cmd_toybench_run(args) -> dict:
    cfg = _experiment_config(args)
    started = _now()
    mlog = toybench.run_experiment(args.scheme, args.seed, cfg, progress=_progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"metrics": out / "metrics.csv", "summary": out / "summary.csv"}
    toybench.write_metrics_csv(outputs["metrics"], [mlog])
    toybench.write_summary_csv(outputs["summary"], toybench.summarize([mlog]))
    curves = toybench.median_curves([mlog])
    if curves:
        outputs["plot"] = out / "loss_curves.svg"
        emit_plot(curves, outputs["plot"], threshold=cfg.target_loss, title=f"{args.scheme} seed {args.seed}")
    extra = {"steps_to_target": mlog.steps_to_target, "final_loss": mlog.final_loss, "failed": mlog.failed, "error": mlog.error}
    outputs["manifest"] = _manifest("toybench run", cfg.to_dict(), [args.seed], started, outputs, out, extra)
    return outputs


# ---------------------------------------------------------------------------
# train / sample
# ---------------------------------------------------------------------------


def cmd_train(args) -> dict:
    cfg = _experiment_config(args)
    scheme, seed = cfg.schemes[0], cfg.seeds[0]
    mcfg = toybench.model_for(cfg, scheme)
    seeds = toybench.run_seeds(seed)
    params = dec.init_params(mcfg, seeded_stream(seeds["init"]))
    state = AdamWState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    data_rng, noise_rng = seeded_stream(seeds["data"]), seeded_stream(seeds["noise"])
    started = _now()
    losses = []
    for step in range(cfg.max_steps):
        value = toybench.train_step(params, state, toybench.make_batch(cfg, data_rng), mcfg, noise_rng)
        if not np.isfinite(value):
            raise RuntimeError(f"training diverged at step {step + 1}")
        losses.append(value)
        _progress(step + 1, value)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"checkpoint": out / "model.bin", "metrics": out / "metrics.csv"}
    dec.save_checkpoint(outputs["checkpoint"], mcfg, params)
    sm = toybench.smooth(losses, cfg.smoothing_window)
    with open(outputs["metrics"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scheme", "seed", "step", "loss", "smoothed_loss"])
        for i, (raw, s) in enumerate(zip(losses, sm)):
            w.writerow([scheme, seed, i + 1, repr(float(raw)), repr(float(s))])
    extra = {"scheme": scheme, "image_size": cfg.image_size, "images_per_example": list(cfg.images_per_example)}
    outputs["manifest"] = _manifest("train", cfg.to_dict(), [seed], started, outputs, out, extra)
    return outputs


def cmd_sample(args) -> dict:
    ckpt = Path(args.checkpoint)
    if ckpt.is_dir():
        ckpt = ckpt / "model.bin"
    mcfg, params = dec.load_checkpoint(ckpt)
    manifest_path = ckpt.with_name("manifest.json")
    size, lo, hi = args.image_size, 2, 4
    if manifest_path.exists():
        extra = json.loads(manifest_path.read_text()).get("extra", {})
        size = args.image_size or extra.get("image_size", 16)
        lo, hi = extra.get("images_per_example", [2, 4])
    size = size or 16
    ecfg = toybench.ExperimentConfig(model=mcfg, image_size=size, images_per_example=(lo, hi), mode=mcfg.mode, seeds=(args.seed,))
    rng = seeded_stream(args.seed)
    inputs, k, target = toybench.gen_toy_example(ecfg, rng.spawn("example"))
    started = _now()
    pred = toybench.reconstruct(params, mcfg, inputs, k, args.steps, rng.spawn("noise"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    to8 = lambda x: (np.clip(x, 0, 1) * 255 + 0.5).astype(np.uint8)
    outputs = {"prediction": out / "prediction.ppm", "target": out / "target.ppm", "metrics": out / "metrics.csv"}
    pairminer.write_ppm(outputs["prediction"], to8(pred))
    pairminer.write_ppm(outputs["target"], to8(target))
    for i, im in enumerate(inputs):
        outputs[f"input_{i + 1}"] = out / f"input_{i + 1}.ppm"
        pairminer.write_ppm(outputs[f"input_{i + 1}"], to8(im))
    err = flow.direct_loss(pred, target)
    with open(outputs["metrics"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", "mode", "steps", "k", "n_inputs", "mse"])
        w.writerow([args.seed, mcfg.mode, args.steps if mcfg.mode == "flow" else 0, k, len(inputs), repr(err)])
    outputs["manifest"] = _manifest("sample", mcfg.to_dict(), [args.seed], started, outputs, out, {"mse": err, "k": k})
    return outputs


# ---------------------------------------------------------------------------
# pair mining
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class MineConfig:
    cut: pairminer.CutParams = dataclasses.field(default_factory=pairminer.CutParams)
    block: pairminer.BlockParams = dataclasses.field(default_factory=pairminer.BlockParams)
    band: tuple = (0.05, 0.35)

    def __post_init__(self):
        if len(self.band) != 2 or not self.band[0] <= self.band[1]:
            raise ValueError(f"band must be [lo, hi] with lo <= hi, got {list(self.band)}")


def _mine_config(args) -> MineConfig:
    data = load_json(args.config) if args.config else {}
    cut = dict(data.get("cut", {}))
    block = dict(data.get("block", {}))
    for flag, key in (("t_rgb", "t_rgb"), ("window", "window"), ("alpha", "alpha"), ("min_scene_len", "min_scene_len")):
        if getattr(args, flag, None) is not None:
            cut[key] = getattr(args, flag)
    for flag in ("grid", "bins", "tau_block", "tau_frame"):
        if getattr(args, flag, None) is not None:
            block[flag] = getattr(args, flag)
    if cut:
        data["cut"] = cut
    if block:
        data["block"] = block
    band = list(data.get("band", MineConfig.band))
    if getattr(args, "band_lo", None) is not None:
        band[0] = args.band_lo
    if getattr(args, "band_hi", None) is not None:
        band[1] = args.band_hi
    data["band"] = band
    return build_dataclass(MineConfig, data)


def _mine_dict(cfg: MineConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["band"] = list(cfg.band)
    return d


def _scenes(frames, cfg: MineConfig):
    stats = pairminer.compute_frame_stats(frames, cfg.cut.window)
    cuts = pairminer.detect_scene_cuts(stats, cfg.cut)
    return stats, cuts, pairminer.scenes_from_cuts(cuts, len(frames))


def _write_stats_csv(path, stats: pairminer.FrameStats, cuts) -> None:
    cut_at = {c.index for c in cuts}
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "mean_r", "mean_g", "mean_b", "rgb_diff", "hsv_diff", "rolling_hsv", "cut"])
        for i in range(stats.n_frames):
            r = stats.rolling_hsv[i]
            w.writerow([i, *(repr(float(v)) for v in stats.mean_rgb[i]), repr(float(stats.rgb_diff[i])),
                        repr(float(stats.hsv_diff[i])), "" if np.isnan(r) else repr(float(r)), int(i in cut_at)])


def cmd_pairmine_scenes(args) -> dict:
    cfg = _mine_config(args)
    started = _now()
    frames = pairminer.load_frames(args.frames)
    stats, cuts, scenes = _scenes(frames, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"scenes": out / "scenes.json", "stats": out / "frame_stats.csv"}
    doc = pairminer.manifest_dict(scenes, [], _mine_dict(cfg))
    doc["cuts"] = [{"index": c.index, "value": c.value} for c in cuts]
    outputs["scenes"].write_text(json.dumps(doc, indent=2) + "\n")
    _write_stats_csv(outputs["stats"], stats, cuts)
    outputs["manifest"] = _manifest("pairmine scenes", _mine_dict(cfg), [], started, outputs, out, {"frames": len(frames)})
    return outputs


def cmd_pairmine_pairs(args) -> dict:
    cfg = _mine_config(args)
    started = _now()
    frames = pairminer.load_frames(args.frames)
    scores = pairminer.read_scores(args.scores)
    _, _, scenes = _scenes(frames, cfg)
    pairs = []
    for scene in scenes:
        if args.all_pairs:
            candidates = None
        else:
            candidates = sorted(p for p in scores if scene[0] <= p[0] < p[1] < scene[1])
        pairs += pairminer.evaluate_pairs(frames, scene, scores, cfg.band, cfg.block, candidates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"pairs": out / "pairs.json", "pairs_csv": out / "pairs.csv"}
    outputs["pairs"].write_text(json.dumps(pairminer.manifest_dict(scenes, pairs, _mine_dict(cfg)), indent=2) + "\n")
    with open(outputs["pairs_csv"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["i", "j", "score", "proportion", "consistent"])
        for p in pairs:
            w.writerow([p.i, p.j, repr(p.score), repr(p.proportion), int(p.consistent)])
    kept = sum(p.consistent for p in pairs)
    outputs["manifest"] = _manifest("pairmine pairs", _mine_dict(cfg), [], started, outputs, out, {"in_band": len(pairs), "kept": kept})
    return outputs


def _add_mine_flags(p, pairs: bool):
    p.add_argument("--frames", required=True, help="directory of numbered frames (PPM P6; PNG/JPEG with Pillow)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON with optional 'cut', 'block' and 'band' entries")
    p.add_argument("--t-rgb", dest="t_rgb", type=float, help="RGB difference threshold (0..255)")
    p.add_argument("--window", type=int, help="rolling HSV window in frames")
    p.add_argument("--alpha", type=float, help="multiple of the rolling HSV mean a cut must exceed")
    p.add_argument("--min-scene-len", dest="min_scene_len", type=int)
    if pairs:
        p.add_argument("--scores", required=True, help="text file of 'i j score' lines")
        p.add_argument("--band-lo", dest="band_lo", type=float)
        p.add_argument("--band-hi", dest="band_hi", type=float)
        p.add_argument("--grid", type=int)
        p.add_argument("--bins", type=int)
        p.add_argument("--tau-block", dest="tau_block", type=float)
        p.add_argument("--tau-frame", dest="tau_frame", type=float)
        p.add_argument("--all-pairs", action="store_true", help="require a score for every within-scene pair")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnilab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    tb = sub.add_parser("toybench", help="positional-encoding toy benchmark")
    tbs = tb.add_subparsers(dest="action", required=True)
    p = tbs.add_parser("compare", help="all schemes x seeds, with summary and plot")
    _add_experiment_flags(p)
    p.add_argument("--schemes", type=_scheme_list, help="comma-separated scheme ids")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_toybench_compare)
    p = tbs.add_parser("run", help="one scheme, one seed")
    _add_experiment_flags(p)
    p.add_argument("--scheme", required=True, choices=toybench.valid_scheme_ids())
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toybench_run)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _add_experiment_flags(p)
    p.add_argument("--scheme", choices=toybench.valid_scheme_ids())
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="reconstruct a seeded toy example from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="model.bin or the train output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=8, help="Euler steps (flow mode)")
    p.add_argument("--image-size", type=int, help="defaults to the training manifest's value")
    p.set_defaults(func=cmd_sample)

    pm = sub.add_parser("pairmine", help="video frame-pair mining")
    pms = pm.add_subparsers(dest="action", required=True)
    p = pms.add_parser("scenes", help="detect scene cuts")
    _add_mine_flags(p, pairs=False)
    p.set_defaults(func=cmd_pairmine_scenes)
    p = pms.add_parser("pairs", help="band-filter scored pairs and check viewpoint consistency")
    _add_mine_flags(p, pairs=True)
    p.set_defaults(func=cmd_pairmine_pairs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        outputs = args.func(args)
    except ConfigError as e:
        print(f"omnilab: invalid config: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"omnilab: error: {e}", file=sys.stderr)
        return 1
    missing = [str(p) for p in outputs.values() if not Path(p).exists()]
    if missing:
        print(f"omnilab: missing outputs: {', '.join(missing)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
