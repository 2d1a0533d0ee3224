"""``behaviorkit`` command line.

Stages, each reading and writing declared file formats only::

    behaviorkit gen-synthetic DATA                 # videos + detection/label manifests
    behaviorkit chunk    --data DATA --run RUN     # RUN/snippet_index.jsonl
    behaviorkit pretrain --data DATA --run RUN     # RUN/checkpoints/step_*, loss_curve.csv
    behaviorkit probe    --data DATA --run RUN --checkpoint init|final|PATH --head attention|full
    behaviorkit eval     RUN/probes/NAME/predictions.jsonl
    behaviorkit report   RUN

A run directory holds everything one experiment produces: ``config.json``,
``log.txt``, the snippet index, checkpoints, embedding caches, probe outputs
and reports.  Errors exit nonzero with their diagnostic category.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import manifests, synthetic
from .checkpoint import read_metadata, save_tensors
from .config import PRESETS, ExperimentConfig, desk_preset
from .datasets import PretrainClipStream, VideoStore, build_snippet_index, read_labels
from .errors import BehaviorKitError, CheckpointError, InvalidArgumentError
from .metrics import MetricsReport, evaluate, format_percent
from .pretrain import Pretrainer, checkpoint_dir, latest_checkpoint, run_dap
from .probe import embed_samples, load_embedding_cache, save_embedding_cache, train_probe

logger = logging.getLogger("behaviorkit")


# configuration ---------------------------------------------------------------

def _load_config(args, run_dir: Optional[Path] = None) -> ExperimentConfig:
    """``--config`` (a JSON file or preset name) > run-dir copy > desk preset; then ``--seed``."""
    saved = run_dir / "config.json" if run_dir is not None else None
    if args.config in PRESETS:
        cfg = PRESETS[args.config]()
    elif args.config:
        cfg = ExperimentConfig.load(args.config)
    elif saved is not None and saved.is_file():
        cfg = ExperimentConfig.load(saved)
    else:
        cfg = desk_preset()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synthetic.seed = args.seed
    cfg.validate()
    return cfg


def _bind_run(cfg: ExperimentConfig, run_dir: Path, force: bool) -> None:
    """Write the config copy into ``run_dir``, refusing to silently change an existing one."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    if path.is_file() and not force:
        old = ExperimentConfig.load(path)
        if old.to_dict() != cfg.to_dict():
            raise InvalidArgumentError(
                f"{path} was written with a different configuration; "
                "pass the same --config/--seed or use --force")
    cfg.save(path)
    handler = logging.FileHandler(run_dir / "log.txt")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logger.addHandler(handler)


def _refuse_existing(path: Path, force: bool, what: str) -> None:
    if path.exists():
        if not force:
            raise InvalidArgumentError(f"{what} {path} already exists (use --force to overwrite)")
        shutil.rmtree(path) if path.is_dir() else path.unlink()


def _data_dir(path) -> Path:
    data = Path(path)
    for name in ("videos.jsonl", "detections.jsonl"):
        if not (data / name).is_file():
            raise CheckpointError(f"dataset manifest missing: {data / name}")
    return data


# commands --------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    cfg = _load_config(args)
    out = synthetic.generate(cfg.synthetic, args.out, force=args.force)
    print(f"wrote {cfg.synthetic.n_videos} videos to {out}")
    return 0


def cmd_chunk(args) -> int:
    run = Path(args.run)
    cfg = _load_config(args, run)
    data = _data_dir(args.data)
    index = run / "snippet_index.jsonl"
    _refuse_existing(index, args.force, "snippet index")
    _bind_run(cfg, run, args.force)
    store = VideoStore(data)
    _, dets = manifests.read_detections(data / "detections.jsonl")
    entries = build_snippet_index(store, dets, cfg.pipeline.snippet_len, cfg.pipeline.snippet_stride)
    manifests.write_snippet_index(index, entries, data=str(data),
                                  snippet_len=cfg.pipeline.snippet_len,
                                  snippet_stride=cfg.pipeline.snippet_stride)
    kept = sum(e.has_detection for e in entries)
    print(f"{len(entries)} snippets ({kept} with detections) -> {index}")
    return 0


def cmd_pretrain(args) -> int:
    run = Path(args.run)
    cfg = _load_config(args, run)
    data = _data_dir(args.data)
    index = run / "snippet_index.jsonl"
    if not index.is_file():
        raise CheckpointError(f"snippet index missing: {index} (run `behaviorkit chunk` first)")
    if not args.resume and latest_checkpoint(run) is not None:
        if not args.force:
            raise InvalidArgumentError(
                f"{run / 'checkpoints'} already holds checkpoints (use --resume or --force)")
        shutil.rmtree(run / "checkpoints")
        (run / "loss_curve.csv").unlink(missing_ok=True)
    _bind_run(cfg, run, args.force)
    store = VideoStore(data)
    _, dets = manifests.read_detections(data / "detections.jsonl")
    stream = PretrainClipStream(cfg, store, manifests.read_snippet_index(index), dets)
    last = run_dap(cfg, stream, run, init=args.init, resume=args.resume, max_steps=args.max_steps)
    print(f"checkpoint: {last}")
    return 0


def _resolve_checkpoint(run: Path, which: str) -> Optional[Path]:
    if which == "none":
        return None
    if which == "init":
        path = checkpoint_dir(run, 0)
    elif which == "final":
        path = latest_checkpoint(run)
        if path is None:
            raise CheckpointError(f"no checkpoint under {run / 'checkpoints'} (run `behaviorkit pretrain` first)")
    else:
        path = Path(which)
    read_metadata(path)  # raises CheckpointError naming the file if missing or corrupt
    return path


def _embeddings(cfg, run: Path, data: Path, ckpt: Optional[Path], samples, task: str) -> np.ndarray:
    """Frozen target-encoder tokens for ``samples``, cached per (checkpoint, task)."""
    source = str(ckpt.resolve()) if ckpt is not None else f"random-seed{cfg.seed}"
    key = hashlib.sha256(json.dumps([source, task, str(data.resolve()), cfg.model.__dict__,
                                     cfg.pipeline.__dict__], sort_keys=True,
                                    default=str).encode()).hexdigest()[:16]
    cache = run / "embeddings" / key
    ids = [s.sample_id for s in samples]
    if (cache / "metadata.json").is_file():
        tensors, meta = load_embedding_cache(cache)
        if meta.get("source") == source and all(i in tensors for i in ids):
            logger.info("embedding cache hit %s", cache)
            return np.stack([tensors[i] for i in ids])
    trainer = Pretrainer(cfg)
    if ckpt is not None:
        trainer.load(ckpt, with_optimizer=False)
    emb = embed_samples(samples, VideoStore(data), trainer.model.target_encoder, cfg)
    save_embedding_cache(cache, ids, emb, {"source": source, "task": task})
    return emb


def cmd_probe(args) -> int:
    run = Path(args.run)
    cfg = _load_config(args, run)
    data = _data_dir(args.data)
    ckpt = _resolve_checkpoint(run, args.checkpoint)
    dap = ckpt is not None and read_metadata(ckpt)["metadata"].get("step", 0) > 0
    head_variant = args.head or cfg.probe.head
    name = args.name or f"{'dap' if dap else 'nodap'}-{head_variant}-{args.task}"
    out = run / "probes" / name
    _refuse_existing(out, args.force, "probe output")
    _bind_run(cfg, run, args.force)
    # the head flag selects the ablation variant without touching the run's config copy
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "probe": {**cfg.to_dict()["probe"],
                                                                 "head": head_variant}})

    label_file = "snippet_labels.jsonl" if args.task == "snippet" else "frame_labels.jsonl"
    header, samples = read_labels(data / label_file)
    task = "single" if args.task == "snippet" else "multi"
    H = _embeddings(cfg, run, data, ckpt, samples, args.task)
    Y = np.stack([s.label for s in samples])
    split = np.array([s.split for s in samples])
    tr, va, te = (split == "train"), (split == "val"), (split == "test")
    if not te.any():
        raise InvalidArgumentError(f"{data / label_file} has no test split")
    head, report = train_probe(H[tr], Y[tr], H[va], Y[va], cfg.probe, task, cfg.seed)
    with torch.no_grad():
        scores = head.predict_proba(torch.from_numpy(H[te])).double().numpy()

    out.mkdir(parents=True)
    save_tensors(out / "head", {k: v for k, v in head.state_dict().items()},
                 {"variant": cfg.probe.head, "task": task, "dim": int(H.shape[-1]),
                  "n_classes": int(Y.shape[1]), "num_heads": cfg.probe.num_heads})
    test_ids = [s.sample_id for s, t in zip(samples, te) if t]
    manifests.write_predictions(out / "predictions.jsonl", test_ids, scores, Y[te],
                                class_names=header["class_names"], task=task,
                                groups=header.get("groups"))
    meta = {"name": name, "dap": bool(dap), "head": cfg.probe.head, "task": args.task,
            "checkpoint": str(ckpt) if ckpt is not None else None, **report}
    (out / "probe_report.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    metrics = evaluate(manifests.read_predictions(out / "predictions.jsonl"))
    _write_metrics(out, metrics)
    print(f"{name}: best val {report['metric']} {format_percent(report['best_val_metric'])} "
          f"at epoch {report['best_epoch']}")
    print(metrics.format_table(), end="")
    return 0


def _write_metrics(out_dir: Path, metrics: MetricsReport) -> None:
    (out_dir / "metrics.json").write_text(metrics.to_json() + "\n")
    (out_dir / "metrics.txt").write_text(metrics.format_table())


def cmd_eval(args) -> int:
    preds = Path(args.predictions)
    metrics = evaluate(manifests.read_predictions(preds))
    out = Path(args.out) if args.out else preds.parent
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(out, metrics)
    print(metrics.format_table(), end="")
    return 0


def render_report(cells: dict, metric_label: str, heads=("attention", "full")) -> str:
    """2x2 (no DAP / DAP) x head table; ``cells[(dap, head)]`` is a fraction or None."""
    width = 12
    lines = [f"{metric_label:<16}" + "".join(f"{h:>{width}}" for h in heads)]
    for dap, label in ((False, "no DAP"), (True, "DAP")):
        lines.append(f"{label:<16}" + "".join(f"{format_percent(cells.get((dap, h))):>{width}}"
                                               for h in heads))
    deltas = []
    for h in heads:
        a, b = cells.get((False, h)), cells.get((True, h))
        deltas.append("—" if a is None or b is None else f"{100 * (b - a):+.2f}")
    lines.append(f"{'delta':<16}" + "".join(f"{d:>{width}}" for d in deltas))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    run = Path(args.run)
    tables = {}
    for probe_dir in sorted((run / "probes").glob("*")):
        meta_path, metrics_path = probe_dir / "probe_report.json", probe_dir / "metrics.json"
        if not (meta_path.is_file() and metrics_path.is_file()):
            continue
        meta = json.loads(meta_path.read_text())
        metrics = json.loads(metrics_path.read_text())
        label = "Top-1 Acc (%)" if meta["task"] == "snippet" else "mAP (%)"
        value = metrics.get("top1") if meta["task"] == "snippet" else metrics.get("mAP")
        tables.setdefault(label, {})[(bool(meta["dap"]), meta["head"])] = value
    if not tables:
        print(f"no evaluated probes under {run / 'probes'}")
        return 0
    text = "\n".join(render_report(cells, label) for label, cells in sorted(tables.items(),
                                                                             reverse=True))
    (run / "report.txt").write_text(text)
    print(text, end="")
    return 0


# entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config JSON file, or a preset name (desk, reference)")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="behaviorkit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic dataset")
    p.add_argument("out")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("chunk", parents=[common], help="index snippets with detections")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_chunk)

    p = sub.add_parser("pretrain", parents=[common], help="domain-adaptive pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--init", help="checkpoint to initialize the weights from")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", parents=[common], help="train an attentive probe")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", default="final",
                   help="init (before pretraining), final, none (random encoder) or a path")
    p.add_argument("--head", choices=("attention", "full"))
    p.add_argument("--task", choices=("snippet", "frame"), default="snippet")
    p.add_argument("--name", help="probe output name (default: <dap|nodap>-<head>-<task>)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", parents=[common], help="metrics for a prediction dump")
    p.add_argument("predictions")
    p.add_argument("--out", help="output directory (default: next to the dump)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="no-DAP/DAP x head comparison table")
    p.add_argument("run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.setLevel(logging.INFO)
    logger.addHandler(console)
    try:
        return args.func(args)
    except BehaviorKitError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        for h in list(logger.handlers):
            logger.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
