"""Command-line entry point: ``geossl <command> [options]``.

Every command writes ``run_config.json`` (the fully resolved configuration,
loadable again with ``--config``) and ``outputs.json`` (files produced, with
sizes and SHA-256) into its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("geossl")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5

EXIT_CODES_HELP = """exit codes:
  0  success
  2  usage error (unknown command or flag)
  3  missing input file
  4  invalid configuration
  5  runtime failure (numerical error, bad data)

environment:
  GAIA_THREADS  number of torch CPU threads (default: torch's choice)
  GEOSSL_NO_NUMBA=1  use the pure-numpy kernels instead of numba
"""

CONFIG_SECTIONS = ("model", "schedule", "data", "eval", "finetune")
CONFIG_META = ("preset", "output_dir", "command", "argv", "seed")


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    unknown = set(cfg) - set(CONFIG_SECTIONS) - set(CONFIG_META)
    if unknown:
        raise ConfigError(f"{p}: unknown config sections {sorted(unknown)}")
    return cfg


def _dataclass_from(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from None


class Resolved:
    """Config file values overlaid with command-line flags."""

    def __init__(self, args):
        from .data import SyntheticConfig
        from .heads import FinetuneConfig
        from .trainer import TrainSchedule
        from .vit import preset

        raw = _load_config(args.config)
        self.preset = args.preset or raw.get("preset") or "desk"
        seed = args.seed if args.seed is not None else raw.get("seed")
        try:
            self.model = preset(self.preset, **raw.get("model", {}))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid model config: {e}") from None

        sched = dict(raw.get("schedule", {}))
        data = dict(raw.get("data", {}))
        ft = dict(raw.get("finetune", {}))
        ev = dict(raw.get("eval", {}))
        if seed is not None:
            sched["seed"] = data["seed"] = ft["seed"] = ev["seed"] = int(seed)
        data.setdefault("height", self.model.image_h)
        data.setdefault("width", self.model.image_w)
        if "advection" in data:
            data["advection"] = tuple(data["advection"])
        if "betas" in sched:
            sched["betas"] = tuple(sched["betas"])
        self.schedule = _dataclass_from(TrainSchedule, sched, "schedule")
        self.data = _dataclass_from(SyntheticConfig, data, "data")
        self.finetune = ft
        unknown = set(ft) - {f.name for f in fields(FinetuneConfig)}
        if unknown:
            raise ConfigError(f"unknown keys in 'finetune': {sorted(unknown)}")
        self.eval = {"ratios": [0.3, 0.5, 0.7, 0.9, 0.95],
                     "families": ["random", "stripes_v", "stripes_h", "missing"], "seed": 0}
        unknown = set(ev) - set(self.eval)
        if unknown:
            raise ConfigError(f"unknown keys in 'eval': {sorted(unknown)}")
        self.eval.update(ev)
        self.seed = seed
        self.out = Path(args.out or raw.get("output_dir") or "geossl_out")

    def to_json(self, args) -> dict:
        return {
            "command": args.command, "argv": list(args.argv), "preset": self.preset, "seed": self.seed,
            "output_dir": str(self.out), "model": self.model.to_dict(), "schedule": self.schedule.to_dict(),
            "data": {**asdict(self.data), "advection": list(self.data.advection)},
            "eval": self.eval, "finetune": self.finetune,
        }


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def _frames(manifest):
    from .data import load_frames, read_manifest

    p = _need(manifest, "manifest")
    recs = read_manifest(p)
    for r in recs:
        if not Path(r["path"]).exists():
            raise MissingInput(f"frame listed in {p} not found: {r['path']}")
    return load_frames(recs)


def _check_shape(frames, cfg):
    for f in frames:
        if f.shape != (cfg.image_h, cfg.image_w):
            raise ConfigError(f"frame {f.timestamp} is {f.shape[0]}x{f.shape[1]} but the model expects "
                              f"{cfg.image_h}x{cfg.image_w}; pick a matching --preset or model config")


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, default=float))
    return path


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return path


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.info("matplotlib not installed; skipping plots")
        return None
    return plt


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, rc: Resolved) -> dict:
    from .data import save_sequence, synth_labels, synth_sequence, write_field, write_manifest

    cfg = rc.data
    if args.frames is not None:
        cfg = _dataclass_from(type(cfg), {**asdict(cfg), "n_timesteps": args.frames}, "data")
        rc.data = cfg
    frames = synth_sequence(cfg)
    data_dir = rc.out / "data"
    manifest = save_sequence(frames, data_dir)
    summary = {"manifest": str(manifest), "n_frames": len(frames),
               "missing_fraction": float(np.mean([f.missing_fraction for f in frames]))}
    for task in args.labels:
        if task == "tc":
            tracks, _ = synth_labels(frames, "tc", seed=cfg.seed)
            (data_dir / "tracks.json").write_text(json.dumps([t.to_json() for t in tracks], indent=2))
            summary["tracks"] = str(data_dir / "tracks.json")
            continue
        labels = synth_labels(frames, task, seed=cfg.seed)
        recs = []
        for i, (f, y) in enumerate(zip(frames, labels)):
            name = f"{task}_{i:05d}.fld"
            write_field(data_dir / name, y)
            recs.append({"path": f"frame_{i:05d}.fld", "label": name, "timestamp": int(f.timestamp)})
        summary[f"labels_{task}"] = str(write_manifest(data_dir / f"labels_{task}.jsonl", recs))
    return summary


def cmd_preprocess(args, rc: Resolved) -> dict:
    from .data import preprocess, read_manifest, read_field, write_field, write_manifest

    recs = read_manifest(_need(args.manifest, "manifest"))
    shape = tuple(args.shape) if args.shape else (rc.model.image_h, rc.model.image_w)
    out_dir = rc.out / "frames"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_recs = []
    for i, r in enumerate(recs):
        src = Path(r["path"])
        if not src.exists():
            raise MissingInput(f"input frame not found: {src}")
        f = preprocess(read_field(src), shape, radius=args.radius)
        name = f"frame_{i:05d}.fld"
        write_field(out_dir / name, f)
        out_recs.append({"path": name, "timestamp": int(f.timestamp)})
    m = write_manifest(out_dir / "manifest.jsonl", out_recs)
    return {"manifest": str(m), "n_frames": len(out_recs), "shape": list(shape)}


def cmd_pretrain(args, rc: Resolved) -> dict:
    from .trainer import TrainSchedule, fit

    if args.epochs is not None:
        rc.schedule = _dataclass_from(TrainSchedule, {**rc.schedule.to_dict(), "total_epochs": args.epochs,
                                                      "betas": tuple(rc.schedule.betas)}, "schedule")
    frames = _frames(args.manifest)
    _check_shape(frames, rc.model)
    resume = _need(args.resume, "resume") if args.resume else None
    t0 = time.time()
    ckpt = fit(None, rc.model, rc.schedule, rc.out, resume=resume, frames=frames,
               checkpoint_every=args.checkpoint_every, keep_last=args.keep_last)
    return {"checkpoint": str(ckpt), "seconds": time.time() - t0}


def cmd_gapfill(args, rc: Resolved) -> dict:
    from .data import write_field
    from .gapfill import gapfill, make_eval_mask, mask_ratio_sweep, rmse_masked, ssim
    from .patches import mask_pixels, missing_patches, patchify, save_mask
    from .rng import make_rng
    from .vit import load_model

    model, _ = load_model(_need(args.checkpoint, "checkpoint"))
    cfg = model.cfg
    frames = _frames(args.manifest)
    _check_shape(frames, cfg)
    seed = int(rc.eval["seed"])
    if args.frame is None:
        ratios = args.ratios or rc.eval["ratios"]
        families = args.families or rc.eval["families"]
        rep = mask_ratio_sweep(model, frames=frames, ratios=ratios, families=families, seed=seed)
        rep.write(rc.out)
        return {"rows": rep.rows}
    if not 0 <= args.frame < len(frames):
        raise ConfigError(f"--frame {args.frame} out of range (0..{len(frames) - 1})")
    f = frames[args.frame]
    family = (args.families or ["random"])[0]
    ratio = (args.ratios or [0.75])[0]
    _, miss = patchify(f, (cfg.patch_h, cfg.patch_w))
    rng = make_rng(seed, "sweep", family, int(round(ratio * 1e6)), int(f.timestamp))
    mask = make_eval_mask(family, ratio, cfg.grid_h, cfg.grid_w, rng, missing_patches(miss))
    res = gapfill(f, mask, model)
    hidden = mask_pixels(mask, cfg.grid_h, cfg.grid_w, cfg.patch_h, cfg.patch_w)
    stem = f"t{f.timestamp}"
    write_field(rc.out / f"composite_{stem}.fld", res.composite)
    write_field(rc.out / f"predicted_{stem}.fld", res.predicted_full)
    save_mask(rc.out / f"mask_{stem}.json", mask)
    out = {"timestamp": int(f.timestamp), "family": family, "ratio": ratio,
           "achieved_ratio": float(mask.hidden.mean()),
           "ssim": ssim(res.composite.values, f.values, valid=f.observed),
           "rmse_masked": rmse_masked(f, res.composite, hidden)}
    _write_json(rc.out / f"gapfill_{stem}.json", out)
    plt = _pyplot()
    if plt is not None:
        fig, axes = plt.subplots(1, 3, figsize=(12, 3))
        shown = np.where(hidden, np.nan, f.values)
        for ax, img, title in zip(axes, (f.values, shown, res.composite.values), ("truth", "input", "composite")):
            ax.imshow(img, cmap="gray_r", vmin=0, vmax=1)
            ax.set_title(title)
            ax.axis("off")
        fig.savefig(rc.out / f"panel_{stem}.png", dpi=100, bbox_inches="tight")
        plt.close(fig)
    return out


def cmd_pca(args, rc: Resolved) -> dict:
    from .data import Field, write_field
    from .embedding import embed_dataset, pca_profile
    from .vit import load_model

    model, _ = load_model(_need(args.checkpoint, "checkpoint"))
    frames = _frames(args.manifest)
    _check_shape(frames, model.cfg)
    emb = embed_dataset(model, frames=frames)
    prof, proj = pca_profile(emb, k=args.k, pooled=not args.per_frame)
    _write_json(rc.out / "pca_profile.json", {**prof.to_json(), "pooled": not args.per_frame,
                                              "n_frames": len(frames)})
    gh, gw = model.cfg.grid_h, model.cfg.grid_w
    proj_dir = rc.out / "projections"
    proj_dir.mkdir(parents=True, exist_ok=True)
    for f, p in zip(frames, proj):
        chans = p.T.reshape(-1, gh, gw)
        base = Field(chans[0], np.zeros((gh, gw), bool), f.timestamp, f.grid_id)
        write_field(proj_dir / f"pca_t{f.timestamp}.fld", base, channels=chans)
    plt = _pyplot()
    if plt is not None and args.k >= 3:
        p = proj[0][:, :3].reshape(gh, gw, 3)
        lo, hi = p.min(axis=(0, 1)), p.max(axis=(0, 1))
        rgb = (p - lo) / np.where(hi > lo, hi - lo, 1.0)
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.imshow(rgb)
        ax.axis("off")
        fig.savefig(rc.out / "pca_rgb.png", dpi=100, bbox_inches="tight")
        plt.close(fig)
    return prof.to_json()


def cmd_coherence(args, rc: Resolved) -> dict:
    from .embedding import embed_dataset, temporal_coherence
    from .vit import load_model

    model, _ = load_model(_need(args.checkpoint, "checkpoint"))
    frames = _frames(args.manifest)
    _check_shape(frames, model.cfg)
    max_lag = min(args.max_lag, len(frames) - 1)
    curve = temporal_coherence(embed_dataset(model, frames=frames), max_lag, centered=args.centered)
    _write_csv(rc.out / "coherence.csv", [{"lag": l, "mean_cosine": c}
                                          for l, c in zip(curve.lags, curve.mean_cosine)])
    _write_json(rc.out / "coherence.json", {**curve.to_json(), "centered": args.centered})
    return curve.to_json()


def cmd_finetune(args, rc: Resolved) -> dict:
    from .heads import FinetuneConfig, finetune, read_labeled

    ft = dict(rc.finetune)
    ft["task"] = args.task
    if args.epochs is not None:
        ft["epochs"] = args.epochs
    if args.lr is not None:
        ft["base_lr"] = args.lr
    cfg = _dataclass_from(FinetuneConfig, ft, "finetune")
    rc.finetune = asdict(cfg)
    pairs = read_labeled(_need(args.manifest, "manifest"))
    _check_shape([f for f, _ in pairs], _pretrained_config(args.checkpoint))
    path = finetune(args.task, args.checkpoint, pairs, cfg, rc.out)
    lines = (rc.out / f"{args.task}_metrics.jsonl").read_text().splitlines()
    last = json.loads(lines[-1])["loss"] if lines else None
    return {"checkpoint": str(path), "steps": len(lines), "final_loss": last}


def _pretrained_config(path):
    from .vit import ModelConfig, load_checkpoint

    header, _ = load_checkpoint(_need(path, "checkpoint"))
    return ModelConfig.from_dict(header["config"]["model"])


def cmd_eval(args, rc: Resolved) -> dict:
    from .metrics import binary_metrics, patch_aggregate, threshold_sweep, track_metrics

    if args.task == "tc":
        from .data import TrackRecord

        tracks = [TrackRecord.from_json(t) for t in json.loads(_need(args.tracks, "tracks").read_text())]
        dets = json.loads(_need(args.detections, "detections").read_text())
        rep = track_metrics(dets, tracks, iou_thr=args.iou, score_thr=args.threshold or 0.0)
        _write_json(rc.out / "eval_tc.json", rep)
        return rep

    from .heads import ar_forward, load_task_model, precip_forward, read_labeled

    model = load_task_model(_need(args.checkpoint, "checkpoint"))
    if model.task != args.task:
        raise ConfigError(f"checkpoint was fine-tuned for {model.task!r}, not {args.task!r}")
    pairs = read_labeled(_need(args.manifest, "manifest"))
    _check_shape([f for f, _ in pairs], model.cfg)
    preds, truths = [], []
    for f, y in pairs:
        p = precip_forward(f, model) if args.task == "precip" else ar_forward(f, model)
        preds.append(p.values)
        truths.append(np.where(y.observed, y.values, np.nan))
    pred, truth = np.stack(preds), np.stack(truths)
    thr = args.threshold if args.threshold is not None else 0.5
    out: dict = {"task": args.task, "n_frames": len(pairs), "threshold": thr}
    if args.task == "precip":
        ok = np.isfinite(truth)
        out["rmse_mm_hr"] = float(np.sqrt(np.mean((pred[ok] - truth[ok]) ** 2)))
        out["pixel"] = binary_metrics(pred, truth, thr, truth_threshold=thr).to_json()
        cfg = model.cfg
        from .data import Field

        pa, ta = [], []
        for p, (_, y) in zip(preds, pairs):
            pa.append(patch_aggregate(Field(p, np.zeros(p.shape, bool)), (cfg.patch_h, cfg.patch_w)).data)
            ta.append(patch_aggregate(y, (cfg.patch_h, cfg.patch_w)).data)
        out["patch"] = binary_metrics(np.stack(pa), np.stack(ta), thr, truth_threshold=thr).to_json()
    else:
        out["pixel"] = binary_metrics(pred, truth, thr).to_json()
        rows, best = threshold_sweep(pred, truth, [round(0.05 * i, 2) for i in range(1, 20)])
        _write_csv(rc.out / "eval_ar_thresholds.csv", rows)
        out["best_f1_threshold"] = best
    _write_json(rc.out / f"eval_{args.task}.json", out)
    return out


def cmd_adapter_shapes(args, rc: Resolved) -> dict:
    import torch

    from .heads import build_adapter, fpn_adapter
    from .rng import torch_seed
    from .vit import TokenSet

    gh, gw = args.grid if args.grid else (rc.model.grid_h, rc.model.grid_w)
    d = rc.model.enc_width
    adapter = build_adapter(d, seed=torch_seed(rc.schedule.seed, "adapter") % (2 ** 62))
    g = torch.Generator().manual_seed(rc.schedule.seed)
    n = gh * gw
    ts = TokenSet(torch.randn(1, n, d, generator=g), torch.arange(n)[None], torch.ones(1, n, dtype=torch.bool), None)
    with torch.no_grad():
        pyr = fpn_adapter(ts, adapter, gh, gw)
    shapes = [list(s) for s in pyr.shapes]
    ok = all(s == [256, gh * 2 ** i, gw * 2 ** i] for i, s in enumerate(shapes))
    out = {"grid": [gh, gw], "enc_width": d, "levels": shapes, "doubling_ok": ok}
    _write_json(rc.out / "adapter_shapes.json", out)
    if not ok:
        raise RuntimeError(f"pyramid shapes violate the doubling rule: {shapes}")
    return out


def cmd_report(args, rc: Resolved) -> dict:
    inputs = [Path(p) for p in args.inputs]
    for p in inputs:
        if not p.exists():
            raise MissingInput(f"input directory not found: {p}")
    found: dict = {}
    for d in inputs:
        for name in ("gapfill_sweep.csv", "coherence.csv", "metrics.jsonl", "pca_profile.json",
                     "eval_precip.json", "eval_ar.json", "eval_tc.json"):
            for p in sorted(d.rglob(name)):
                found.setdefault(name, []).append(p)
    report: dict = {"sources": {k: [str(p) for p in v] for k, v in found.items()}}
    if "gapfill_sweep.csv" in found:
        rows = list(csv.DictReader(open(found["gapfill_sweep.csv"][0])))
        report["gapfill"] = [{k: v if k == "family" else int(v) if k == "n" else float(v) for k, v in r.items()}
                             for r in rows]
    if "coherence.csv" in found:
        rows = list(csv.DictReader(open(found["coherence.csv"][0])))
        report["coherence"] = {int(r["lag"]): float(r["mean_cosine"]) for r in rows}
    if "metrics.jsonl" in found:
        recs = [json.loads(l) for l in found["metrics.jsonl"][0].read_text().splitlines() if l.strip()]
        if recs:
            report["pretrain"] = {"steps": len(recs), "first": recs[0], "last": recs[-1]}
    for name in ("pca_profile.json", "eval_precip.json", "eval_ar.json", "eval_tc.json"):
        if name in found:
            report[name.removesuffix(".json")] = json.loads(found[name][0].read_text())
    _write_json(rc.out / "report.json", report)

    plt = _pyplot()
    if plt is not None:
        if "gapfill" in report:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for fam in dict.fromkeys(r["family"] for r in report["gapfill"]):
                rs = [r for r in report["gapfill"] if r["family"] == fam]
                ax.plot([100 * r["ratio"] for r in rs], [r["rmse_mean"] for r in rs], marker="o", label=fam)
            ax.set_xlabel("mask ratio (%)")
            ax.set_ylabel("masked RMSE (normalized)")
            ax.legend()
            fig.savefig(rc.out / "rmse_vs_mask_ratio.png", dpi=100, bbox_inches="tight")
            plt.close(fig)
        if "coherence" in report:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(list(report["coherence"]), list(report["coherence"].values()), marker="o")
            ax.set_xlabel("lag (frames)")
            ax.set_ylabel("mean cosine")
            fig.savefig(rc.out / "coherence.png", dpi=100, bbox_inches="tight")
            plt.close(fig)
        if "metrics.jsonl" in found:
            recs = [json.loads(l) for l in found["metrics.jsonl"][0].read_text().splitlines() if l.strip()]
            if recs:
                fig, ax = plt.subplots(figsize=(5, 3.5))
                for k in ("total", "dino", "mae"):
                    ax.plot([r["step"] for r in recs], [r[k] for r in recs], label=k)
                ax.set_yscale("log")
                ax.set_xlabel("step")
                ax.legend()
                fig.savefig(rc.out / "loss_curves.png", dpi=100, bbox_inches="tight")
                plt.close(fig)
    return {k: v for k, v in report.items() if k != "sources"}


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "pretrain": cmd_pretrain, "gapfill": cmd_gapfill,
    "pca": cmd_pca, "coherence": cmd_coherence, "finetune": cmd_finetune, "eval": cmd_eval,
    "adapter-shapes": cmd_adapter_shapes, "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with model/schedule/data/eval/finetune sections")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", help="output directory (default: config output_dir or ./geossl_out)")
    common.add_argument("--preset", choices=("desk", "paper", "tiny"), help="model size preset (default desk)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="geossl", description="Masked-reconstruction + self-distillation "
                                "pretraining for gridded IR imagery.",
                                epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=EXIT_CODES_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    s = add("synth", "generate a synthetic advected IR sequence (and optional labels)")
    s.add_argument("--frames", type=int, help="number of time steps")
    s.add_argument("--labels", nargs="*", default=[], choices=("precip", "ar", "tc"))

    s = add("preprocess", "gap-fill, downscale and normalize .fld inputs listed in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--shape", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--radius", type=int, default=5)

    s = add("pretrain", "joint masked-reconstruction / self-distillation pretraining")
    s.add_argument("--manifest", required=True)
    s.add_argument("--epochs", type=int, help="overrides schedule.total_epochs")
    s.add_argument("--resume", help="checkpoint written by an earlier pretrain run")
    s.add_argument("--checkpoint-every", type=int, default=1)
    s.add_argument("--keep-last", type=int)

    s = add("gapfill", "fill one frame (--frame) or run the mask family x ratio sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--frame", type=int, help="index of a single frame to fill")
    s.add_argument("--ratios", type=float, nargs="+")
    s.add_argument("--families", nargs="+", choices=("random", "stripes_v", "stripes_h", "missing"))

    s = add("pca", "explained-variance profile and projections of encoder embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--per-frame", action="store_true", help="one decomposition per frame instead of pooled")

    s = add("coherence", "mean cosine similarity of pooled embeddings versus time lag")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--max-lag", type=int, default=10)
    s.add_argument("--centered", action="store_true", help="remove the sequence mean before cosines")

    s = add("finetune", "fine-tune a downstream head from a pretraining checkpoint")
    s.add_argument("--task", required=True, choices=("precip", "ar"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True, help="labeled manifest (path + label per line)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)

    s = add("eval", "evaluate a task checkpoint (precip, ar) or detections against tracks (tc)")
    s.add_argument("--task", required=True, choices=("precip", "ar", "tc"))
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s.add_argument("--threshold", type=float, help="decision threshold (precip mm/hr, ar probability, tc score)")
    s.add_argument("--tracks")
    s.add_argument("--detections")
    s.add_argument("--iou", type=float, default=0.30)

    s = add("adapter-shapes", "feature-pyramid adapter shape check")
    s.add_argument("--grid", type=int, nargs=2, metavar=("GH", "GW"))

    s = add("report", "aggregate run outputs into report.json and plots")
    s.add_argument("--inputs", nargs="+", required=True)
    return p


def _file_manifest(out: Path, since: float) -> list[dict]:
    files = []
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name == "outputs.json" or p.stat().st_mtime < since:
            continue
        h = hashlib.sha256(p.read_bytes()).hexdigest()
        files.append({"path": str(p.relative_to(out)), "bytes": p.stat().st_size, "sha256": h})
    return files


def _error(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    threads = os.environ.get("GAIA_THREADS")
    if threads:
        import torch

        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            return _error(EXIT_CONFIG, ConfigError(f"GAIA_THREADS must be an integer, got {threads!r}"))

    try:
        rc = Resolved(args)
        rc.out.mkdir(parents=True, exist_ok=True)
        start = time.time() - 1.0
        result = COMMANDS[args.command](args, rc)
        _write_json(rc.out / "run_config.json", rc.to_json(args))
        _write_json(rc.out / "outputs.json", {"command": args.command, "files": _file_manifest(rc.out, start)})
    except (MissingInput, FileNotFoundError) as e:
        return _error(EXIT_MISSING_INPUT, e)
    except ConfigError as e:
        return _error(EXIT_CONFIG, e)
    except (ValueError, FloatingPointError, RuntimeError, OSError) as e:
        log.debug("command failed", exc_info=True)
        return _error(EXIT_RUNTIME, e)
    print(json.dumps({"command": args.command, "out": str(rc.out), "result": result}, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
