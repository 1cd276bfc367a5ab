"""``neoact`` command line: generate, ingest, train, hpo, zeroshot, eval, timeline.

Exit codes: 0 ok, 1 runtime failure, 2 bad arguments or missing inputs.
Every subcommand writes ``run_manifest.json`` into its output directory;
passing that file back via ``--config`` reruns with the same settings.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .data import (LABELS, ArrayFrames, Episode, extract_clips, group_split, parse_annotations, read_clip,
                   read_manifest, resample_clip, write_annotations, write_clip, write_manifest)
from .synthetic import DEFAULT_FREQUENCIES, EpisodeFrames, ScenarioScript, sample_script

log = logging.getLogger("neoact")

MANIFEST = "run_manifest.json"


class UsageError(ValueError):
    """Bad arguments or missing inputs (exit code 2)."""


def sub_seed(seed: int, stream: str) -> int:
    """Named, independent sub-stream of the global ``--seed``."""
    h = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def dir_digest(root, exclude: tuple[str, ...] = (MANIFEST,)) -> str:
    """sha256 over relative paths and contents of every file under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(p.relative_to(root).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(out: Path, args, inputs: dict, outputs: dict, started: str) -> Path:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
    record = {"subcommand": args.command, "config": cfg, "inputs": inputs, "outputs": outputs,
              "seed": getattr(args, "seed", None), "version": __version__, "started": started,
              "finished": _now()}
    path = out / MANIFEST
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _floats(text: str, n: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} comma-separated numbers, got {len(vals)}")
    return vals


# -- generate / ingest -------------------------------------------------------------

def cmd_generate(args) -> int:
    from .pipeline import episode_seed

    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    if args.duration <= 0:
        raise UsageError("--duration must be positive")
    freqs = _floats(args.frequencies, 4) if isinstance(args.frequencies, str) else tuple(args.frequencies)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_seed = sub_seed(args.seed, "data")

    def one(i: int):
        sid = f"ep{i:03d}"
        script = sample_script(args.duration, freqs, episode_seed(data_seed, i))
        d = out / "episodes" / sid
        d.mkdir(parents=True, exist_ok=True)
        (d / "script.json").write_text(script.to_json() + "\n")
        write_annotations(d / "annotations.csv", script.tracks())
        return sid

    started = _now()
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        sids = list(pool.map(one, range(args.episodes)))
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "duration_s", "fps", "height", "width"])
        for sid in sids:
            w.writerow([sid, args.duration, args.fps, args.height, args.width])
    total = args.episodes * args.duration
    log.info("generated %d episodes, %.1f min of video", args.episodes, total / 60)
    write_run_manifest(out, args, {}, {"dataset": str(out), "digest": dir_digest(out),
                                       "total_minutes": total / 60}, started)
    return 0


def _load_episode(root: Path, row: dict) -> tuple[Episode, list]:
    d = root / "episodes" / row["source_id"]
    fps = int(row["fps"])
    tracks = parse_annotations(_require(d / "annotations.csv", "annotation file"))
    if (d / "script.json").exists():
        script = ScenarioScript.from_json((d / "script.json").read_text())
        frames = EpisodeFrames(script, int(row["height"]), int(row["width"]), fps)
    elif (d / "frames.npy").exists():
        arr = np.load(d / "frames.npy", mmap_mode="r")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        frames = ArrayFrames(arr, fps)
    else:
        raise UsageError(f"{d}: needs script.json or frames.npy")
    return Episode(row["source_id"], frames, float(row["duration_s"])), tracks


def cmd_ingest(args) -> int:
    root = _require(args.dataset, "dataset directory")
    with open(_require(root / "episodes.csv", "episodes table"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    out = Path(args.out)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    size = (args.size, args.size)
    started = _now()

    def one(row):
        ep, tracks = _load_episode(root, row)
        clips = extract_clips(ep, tracks, args.window, args.stride)
        recs = []
        for clip, y in clips:
            rel = f"clips/{clip.clip_id}.clip"
            write_clip(out / rel, resample_clip(clip, args.frames, size))
            recs.append({"clip_id": clip.clip_id, "source_id": clip.source_id, "start_time": clip.start_time,
                         "y": y.bits, "path": rel})
        return recs, clips.conflicts, clips.warnings

    records, conflicts, warnings = [], [], []
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        for recs, conf, warn in pool.map(one, rows):
            records += recs
            conflicts += conf
            warnings += warn
    write_manifest(out / "manifest.csv", records)
    with open(out / "conflicts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "start_time", "detail"])
        for c in conflicts:
            w.writerow([c.source_id, c.start_time, json.dumps(c.coverage_ms, sort_keys=True)])
    if warnings:
        log.warning("%d clips have an activity without baby_on_table", len(warnings))
    info = {"frames": args.frames, "size": args.size, "window_s": args.window, "stride_s": args.stride,
            "n_clips": len(records), "n_conflicts": len(conflicts)}
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    log.info("ingested %d clips (%d conflicts excluded)", len(records), len(conflicts))
    write_run_manifest(out, args, {"dataset": str(root)}, {"clips": str(out), "digest": dir_digest(out)}, started)
    return 0


class ClipSet:
    """Clip directory written by ``ingest``, loaded into memory."""

    def __init__(self, root):
        self.root = _require(root, "clip directory")
        self.info = json.loads(_require(self.root / "dataset.json", "dataset.json").read_text())
        self.records = read_manifest(self.root / "manifest.csv")
        if not self.records:
            raise UsageError(f"{self.root}: manifest has no clips")
        self.clip_ids = [r["clip_id"] for r in self.records]
        self.source_ids = [r["source_id"] for r in self.records]
        self.y = np.array([[int(c) for c in r["y"]] for r in self.records], dtype=np.int64)
        w = float(self.info["window_s"])
        self.spans = np.array([[r["start_time"], r["start_time"] + w] for r in self.records])
        self._x = None

    @property
    def x(self) -> np.ndarray:
        if self._x is None:
            self._x = np.stack([read_clip(self.root / r["path"]) for r in self.records])
        return self._x


# -- training --------------------------------------------------------------------------

def _train_config(args, mode: str, seed: int, overrides: dict | None = None):
    from .training import TrainConfig

    o = dict(overrides or {})
    lr_head = float(o.get("lr_head", args.lr_head))
    lr_back = o.get("lr_backbone")
    if lr_back is None and "lr_backbone_ratio" in o:
        lr_back = lr_head * float(o["lr_backbone_ratio"])
    if lr_back is None:
        lr_back = args.lr_backbone if args.lr_backbone is not None else lr_head
    w_plus = args.w_plus
    if isinstance(w_plus, str):
        w_plus = _floats(w_plus, 4)
    return TrainConfig(epochs=int(o.get("epochs", args.epochs)), batch_size=int(o.get("batch_size", args.batch_size)),
                       lr_head=lr_head, lr_backbone=float(lr_back), w_plus=w_plus, seed=seed,
                       patience=args.patience, mode=mode, weight_decay=float(o.get("weight_decay", args.weight_decay)),
                       max_steps=args.max_steps, val_fraction=args.val_fraction)


def _build_model(args, clips: ClipSet, train_y: np.ndarray, init_seed: int):
    from .fusion import FusionConfig, FusionModel
    from .spacetime import PatchConfig, SpaceTimeConfig, SpaceTimeModel

    t, s = int(clips.info["frames"]), int(clips.info["size"])
    if args.model == "spacetime":
        if args.mode != "baseline":
            raise UsageError("the spacetime model trains in --mode baseline")
        cfg = SpaceTimeConfig(PatchConfig(P=args.patch, d=args.dim, H=s, W=s, T=t), depth=args.depth,
                              n_heads=args.heads)
        priors = np.clip(train_y.mean(axis=0), 0.01, 0.99)
        return SpaceTimeModel(cfg, seed=init_seed, priors=priors)
    if args.mode == "baseline":
        raise UsageError("the fusion model trains in --mode ft-lc or ft-c-lora")
    cfg = FusionConfig(d=args.dim, n_heads=args.heads, n_blocks=args.depth, frames=t, P=args.patch, H=s, W=s,
                       lora_rank=args.lora_rank, lora_alpha=args.lora_alpha)
    return FusionModel(cfg, mode=args.mode, seed=args.backbone_seed, adapter_seed=init_seed)


def _inputs(model, x: np.ndarray, batch: int = 16) -> np.ndarray:
    return model.cache_inputs(x, batch) if hasattr(model, "cache_inputs") else x


def _apply_pos_power(cfg, y: np.ndarray, power: float):
    from .training import compute_pos_weights

    if cfg.w_plus is None:
        cfg.w_plus = tuple(float(w) for w in compute_pos_weights(y) ** power)
    return cfg


def _split(clips: ClipSet, args):
    test = group_split(clips.source_ids, args.test_fraction, seed=sub_seed(args.seed, "data"))
    if test.all() or not test.any():
        raise UsageError("test split is empty or covers every episode; adjust --test-fraction")
    return ~test, test


def cmd_train(args) -> int:
    from .evaluation import PredictionSet, evaluate_method
    from .training import train, write_run_dir

    started = _now()
    clips = ClipSet(args.clips)
    overrides = {}
    if args.hparams:
        overrides = json.loads(_require(args.hparams, "hyper-parameter file").read_text())
        overrides = overrides.get("best_params", overrides)
    tr, te = _split(clips, args)
    model = _build_model(args, clips, clips.y[tr], sub_seed(args.seed, "init"))
    cfg = _train_config(args, args.mode, sub_seed(args.seed, "train"), overrides)
    if "pos_weight_power" in overrides:
        _apply_pos_power(cfg, clips.y[tr], float(overrides["pos_weight_power"]))
    x = _inputs(model, clips.x)
    groups = [clips.source_ids[i] for i in np.flatnonzero(tr)]
    res = train(model, x[tr], clips.y[tr], cfg, groups=groups)
    probs = model.predict(x[te])
    idx = np.flatnonzero(te)
    preds = PredictionSet([clips.clip_ids[i] for i in idx], probs, clips.y[te], clips.spans[te],
                          [clips.source_ids[i] for i in idx])
    report = evaluate_method(f"{args.model}:{args.mode}", preds)
    out = Path(args.out)
    write_run_dir(out, cfg, res, {"test": json.loads(report.to_json())})
    preds.to_csv(out / "preds_test.csv")
    log.info("test macro-F1 %.4f", report.macro_f1)
    write_run_manifest(out, args, {"clips": str(clips.root)}, {"run": str(out)}, started)
    return 0


def cmd_hpo(args) -> int:
    from .hpo import MedianPruner, Study, load_space, parse_space, run_study
    from .training import train

    started = _now()
    clips = ClipSet(args.clips)
    if args.space:
        space = load_space(_require(args.space, "search space"))
    else:
        space = parse_space(json.loads(resources.files("neoact").joinpath("default_space.json").read_text()))
    tr, _ = _split(clips, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study_path = Path(args.study) if args.study else out / "study.jsonl"
    if study_path.exists() and study_path.stat().st_size:
        study = Study.load(study_path)
        log.info("resuming study with %d trials", len(study.trials))
    else:
        study = Study(seed=sub_seed(args.seed, "hpo"), n_startup=args.startup,
                      pruner=MedianPruner(args.prune_warmup, args.prune_min) if args.prune else None,
                      storage=str(study_path))
    ytr = clips.y[tr]
    groups = [clips.source_ids[i] for i in np.flatnonzero(tr)]
    base = _build_model(args, clips, ytr, sub_seed(args.seed, "init"))
    xtr = _inputs(base, clips.x[tr])

    def objective(params, report):
        model = _build_model(args, clips, ytr, sub_seed(args.seed, "init"))
        cfg = _train_config(args, args.mode, sub_seed(args.seed, "train"), params)
        _apply_pos_power(cfg, ytr, float(params.get("pos_weight_power", 1.0)))
        res = train(model, xtr, ytr, cfg, groups=groups,
                    on_epoch=lambda rec: report(rec.epoch - 1, rec.val_macro_f1))
        return res.best_val_macro_f1

    run_study(objective, space, args.trials, study, n_jobs=args.jobs)
    best = study.best_trial
    summary = {"best_trial": None if best is None else best.id,
               "best_value": None if best is None else best.value,
               "best_params": None if best is None else best.params,
               "n_trials": len(study.trials),
               "states": {s: sum(t.state == s for t in study.trials) for s in ("complete", "pruned", "failed")}}
    (out / "best_config.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, args, {"clips": str(clips.root)}, {"study": str(study_path)}, started)
    return 0 if best is not None else 1


# -- zero-shot ----------------------------------------------------------------------

def _load_script(path) -> dict:
    p = _require(path, "mock script")
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    script = {}
    for f in files:
        script.update(json.loads(f.read_text(encoding="utf-8")))
    return script


def cmd_zeroshot(args) -> int:
    from .evaluation import PredictionSet
    from .zeroshot import (BackendEndpoint, ClipRef, TranscriptWriter, load_prompt_spec, make_backend,
                           run_corpus)

    started = _now()
    protocol = {"zsc-co": "ZSC-CO", "zs-b": "ZS-B", "zsc-j": "ZSC-J"}[args.protocol]
    spec = load_prompt_spec(protocol, args.prompts, args.temperature)
    ep = BackendEndpoint(args.backend, args.url or "", args.timeout, args.retries)
    if args.backend == "mock" and args.script is None:
        raise UsageError("--backend mock needs --script")
    script = _load_script(args.script) if args.backend == "mock" else None
    vlm = make_backend(ep, script, seed=sub_seed(args.seed, "mock"))
    llm = make_backend(ep, script, seed=sub_seed(args.seed, "mock")) if protocol == "ZSC-J" else None
    clips = ClipSet(args.clips) if args.clips else None
    if clips is not None:
        refs = [ClipRef(cid, clips.x[i] if args.backend == "http" else None) for i, cid in enumerate(clips.clip_ids)]
    else:
        ids = dict.fromkeys(k.split("::", 1)[0] for k in script or {} if "::" in k)
        refs = [ClipRef(cid) for cid in ids]
    if not refs:
        raise UsageError("no clips to run: pass --clips or a script with clip_id::purpose keys")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tpath = out / "transcript.jsonl"
    tpath.unlink(missing_ok=True)
    results = run_corpus(protocol, refs, spec, vlm, llm, max_in_flight=args.jobs, writer=TranscriptWriter(tpath))
    y = np.array([r.y.y for r in results], dtype=np.float64)
    summary = {"protocol": protocol, "n_clips": len(results),
               "conflicts": sum(any(f.startswith("conflict") for f in r.flags) for r in results),
               "hallucinations": sum(len(r.hallucinations) for r in results),
               "flagged_clips": sum(bool(r.flags) for r in results)}
    classes = ("ventilation", "stimulation", "suction") if protocol == "ZSC-CO" else LABELS
    if clips is not None:
        preds = PredictionSet(clips.clip_ids, y, clips.y, clips.spans, clips.source_ids, classes)
        preds.to_csv(out / "preds.csv")
    else:
        with open(out / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip_id"] + list(LABELS) + ["flags"])
            for r in results:
                w.writerow([r.clip_id, *r.y.y, ";".join(r.flags)])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_run_manifest(out, args, {"clips": args.clips, "script": args.script}, {"transcript": str(tpath)}, started)
    return 0


# -- evaluation / timeline --------------------------------------------------------------

def _load_preds(path):
    from .evaluation import PredictionSet

    return PredictionSet.from_csv(_require(path, "prediction file"))


def cmd_eval(args) -> int:
    from .evaluation import evaluate_method, render_table

    started = _now()
    names = args.method or []
    reports = []
    for i, p in enumerate(args.preds):
        name = names[i] if i < len(names) else Path(p).stem
        summary = Path(p).with_name("summary.json")
        extra = json.loads(summary.read_text()) if summary.exists() else {}
        reports.append(evaluate_method(name, _load_preds(p), args.threshold,
                                       missing_class_as_zero=args.missing_class_as_zero,
                                       conflicts=extra.get("conflicts", 0),
                                       hallucinations=extra.get("hallucinations", 0)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.jsonl", "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    table = render_table(reports)
    (out / "table.md").write_text(table)
    sys.stdout.write(table)
    write_run_manifest(out, args, {"preds": list(args.preds)}, {"report": str(out / "report.jsonl")}, started)
    return 0


def cmd_timeline(args) -> int:
    from .evaluation import stitch_timeline, timeline_svg, write_timeline_csv

    started = _now()
    preds = _load_preds(args.preds)
    tl = stitch_timeline(preds, args.threshold, args.min_duration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_timeline_csv(tl.segments, out / "timeline.csv")
    with open(out / "violations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "clip_id", "start_s", "end_s", "kept", "dropped", "kept_mean_prob",
                    "dropped_mean_prob"])
        for v in tl.violations:
            w.writerow([v.source_id, v.clip_id, v.start_s, v.end_s, v.kept, v.dropped,
                        f"{v.kept_mean_prob:.6f}", f"{v.dropped_mean_prob:.6f}"])
    for sid in dict.fromkeys(preds.source_ids):
        end = float(preds.spans[[s == sid for s in preds.source_ids], 1].max())
        (out / f"{sid}.svg").write_text(timeline_svg(tl.segments, sid, end))
    log.info("%d segments, %d violations", len(tl.segments), len(tl.violations))
    write_run_manifest(out, args, {"preds": args.preds}, {"timeline": str(out / "timeline.csv")}, started)
    return 0


# -- parser -------------------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=("spacetime", "fusion"), default="spacetime")
    g.add_argument("--mode", choices=("baseline", "ft-lc", "ft-c-lora"), default="baseline")
    g.add_argument("--dim", type=int, default=64, help="token width d")
    g.add_argument("--depth", type=int, default=2, help="blocks (spacetime) or cross-modal blocks (fusion)")
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--patch", type=int, default=8, help="patch size P")
    g.add_argument("--lora-rank", type=int, default=8)
    g.add_argument("--lora-alpha", type=float, default=16.0)
    g.add_argument("--backbone-seed", type=int, default=0, help="seed of the frozen fusion backbone")
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr-head", type=float, default=1e-3)
    g.add_argument("--lr-backbone", type=float, default=None, help="defaults to --lr-head")
    g.add_argument("--w-plus", default=None, help="4 comma-separated positive weights (default: #neg/#pos)")
    g.add_argument("--weight-decay", type=float, default=0.01)
    g.add_argument("--patience", type=int, default=5)
    g.add_argument("--max-steps", type=int, default=None)
    g.add_argument("--val-fraction", type=float, default=0.1)
    g.add_argument("--test-fraction", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global seed; data/init/hpo use named sub-streams")
    common.add_argument("--jobs", type=int, default=1, help="worker pool size")
    common.add_argument("--config", default=None, help="JSON config (or run_manifest.json); flags win over it")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="neoact", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"neoact {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write synthetic episodes")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--duration", type=float, default=300.0, help="seconds per episode")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--fps", type=int, default=25)
    p.add_argument("--frequencies", default=",".join(str(f) for f in DEFAULT_FREQUENCIES),
                   help="target fractions of time for ventilation,stimulation,suction,baby_on_table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", parents=[common], help="extract labelled clips from a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--frames", type=int, default=8, help="frames per clip after resampling")
    p.add_argument("--size", type=int, default=32, help="square frame size after resampling")
    p.add_argument("--window", type=float, default=3.0)
    p.add_argument("--stride", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train a classifier on ingested clips")
    p.add_argument("--clips", required=True)
    _model_flags(p)
    p.add_argument("--hparams", default=None, help="best_config.json from hpo, or a plain JSON of hyper-parameters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("hpo", parents=[common], help="TPE search over training hyper-parameters")
    p.add_argument("--clips", required=True)
    _model_flags(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--space", default=None, help="search space JSON (default: shipped space)")
    p.add_argument("--study", default=None, help="study JSONL; resumed if it exists")
    p.add_argument("--startup", type=int, default=10, help="random trials before TPE")
    p.add_argument("--no-prune", dest="prune", action="store_false")
    p.add_argument("--prune-warmup", type=int, default=1)
    p.add_argument("--prune-min", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hpo)

    p = sub.add_parser("zeroshot", parents=[common], help="run a prompting protocol against a backend")
    p.add_argument("--protocol", choices=("zsc-co", "zs-b", "zsc-j"), required=True)
    p.add_argument("--backend", choices=("mock", "http"), default="mock")
    p.add_argument("--script", default=None, help="mock script JSON file or directory of them")
    p.add_argument("--url", default=None, help="HTTP endpoint (env NEOACT_BACKEND_URL overrides)")
    p.add_argument("--timeout", type=float, default=60.0, help="seconds (env NEOACT_BACKEND_TIMEOUT overrides)")
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--prompts", default=None, help="prompt configuration directory")
    p.add_argument("--clips", default=None, help="ingested clip directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("eval", parents=[common], help="per-class and macro F1 report and table")
    p.add_argument("--preds", action="append", required=True, help="prediction CSV; repeatable")
    p.add_argument("--method", action="append", help="method name per --preds")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--missing-class-as-zero", action="store_true",
                   help="count classes a method does not predict as F1 0 in the macro mean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("timeline", parents=[common], help="stitch clip predictions into activity timelines")
    p.add_argument("--preds", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-duration", type=float, default=0.0, help="drop segments shorter than this (s)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_timeline)
    return ap


def _config_defaults(path) -> dict:
    raw = json.loads(_require(path, "config file").read_text())
    if "subcommand" in raw and "config" in raw:
        raw = raw["config"]
    return {k.replace("-", "_"): v for k, v in raw.items() if k not in ("command", "func")}


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        cfg = {k: v for k, v in _config_defaults(args.config).items() if k in known}
        sub.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"neoact: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    from .data import ParameterError, SchemaError, SplitError
    from .hpo import SearchSpaceError
    from .training import ConfigError

    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (UsageError, ConfigError, ParameterError, SchemaError, SplitError, SearchSpaceError) as exc:
        print(f"neoact {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"neoact {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
