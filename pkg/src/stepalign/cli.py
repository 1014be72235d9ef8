"""Command-line entry point: gen-data, train, localize, zeroshot, eval, align.

All structured outputs are JSON (sorted keys); embeddings travel as SEMB
files. Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
STEPALIGN_THREADS caps per-video parallelism (0 or unset = auto).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import infer, synth
from . import losses as L
from . import model as M
from . import training as T
from .align import CostSpec, drop_dtw, match_cost_matrix, percentile_drop_cost
from .core import (DataError, SegmentLabeling, StepalignError, NumericalError,
                   gt_labeling, load_manifest, read_embedding_file,
                   save_manifest, write_embedding_file, EmbeddingSequence)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _thread_count() -> int:
    raw = os.environ.get("STEPALIGN_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        raise DataError(f"STEPALIGN_THREADS must be an integer, got {raw!r}")
    if value <= 0:
        return min(8, os.cpu_count() or 1)
    return value


def _map_videos(fn, items):
    threads = _thread_count()
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _config_from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise DataError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


def _train_config(doc: dict) -> T.TrainConfig:
    doc = dict(doc)
    if "model" in doc:
        doc["model"] = _config_from_dict(M.ModelConfig, doc["model"])
    if "contrastive" in doc:
        doc["contrastive"] = _config_from_dict(L.ContrastiveConfig, doc["contrastive"])
    return _config_from_dict(T.TrainConfig, doc)


def _synth_config(doc: dict) -> synth.SynthConfig:
    doc = dict(doc)
    for key in ("frames_range", "step_len_range"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return _config_from_dict(synth.SynthConfig, doc)


# --- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _synth_config(_load_json(args.config)) if args.config else synth.SynthConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples, prototypes = synth.generate(cfg)
    entries = []
    for sample in samples:
        video_rel = f"{sample.id}.video.semb"
        phrases_rel = f"{sample.id}.phrases.semb"
        texts_rel = f"{sample.id}.steps.semb"
        write_embedding_file(sample.video, out / video_rel)
        write_embedding_file(sample.phrases, out / phrases_rel)
        write_embedding_file(sample.gt_step_texts, out / texts_rel)
        entries.append({
            "id": sample.id,
            "task": sample.task,
            "video": video_rel,
            "phrases": phrases_rel,
            "gt_step_texts": texts_rel,
            "gt_segments": [list(seg) for seg in sample.gt_segments],
            "phrase_relevance": list(sample.phrase_relevance),
        })
    tasks = {}
    for task, protos in prototypes.items():
        rel = f"{task}.prototypes.semb"
        write_embedding_file(EmbeddingSequence(protos, "step_texts"), out / rel)
        tasks[task] = {"num_steps": int(protos.shape[0]), "prototypes": rel}
    save_manifest(out / "manifest.json", entries, tasks)
    print(f"wrote {len(entries)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(_load_json(args.config)) if args.config else T.TrainConfig()
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint_callback(epoch, params, step):
        M.save_checkpoint(out / f"checkpoint_epoch{epoch:04d}.ckpt", params, step, cfg.seed)

    result = T.train(list(manifest.samples), cfg,
                     checkpoint_callback=checkpoint_callback if cfg.checkpoint_every else None)
    M.save_checkpoint(out / "checkpoint_final.ckpt", result.params,
                      step=len(result.log), seed=cfg.seed)
    with open(out / "loss_log.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry.to_json_dict(), sort_keys=True) + "\n")
    print(f"trained {len(result.log)} steps; final total loss "
          f"{result.log[-1].loss.total:.6f}; checkpoint at {out / 'checkpoint_final.ckpt'}")
    return EXIT_OK


def _float_list(arr) -> list:
    return [float(v) for v in np.asarray(arr, dtype=np.float32).tolist()]


def cmd_localize(args) -> int:
    params, _, _ = M.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(sample):
        slots = M.forward(params, sample.video, training=False)
        labeling, corr = infer.localize_steps(slots, sample.video, args.percentile)
        doc = {
            "id": sample.id,
            "task": sample.task,
            "num_frames": sample.video.length,
            "frame_labels": list(labeling.frame_labels),
            "segments": [list(seg) for seg in labeling.segments],
            "detections": [
                {"slot": label, "start": start, "end": end,
                 "vector": _float_list(slots.data[label])}
                for label, start, end in labeling.segments
            ],
            "alignment": {
                "total_cost": corr.total_cost,
                "num_matches": corr.num_matches,
                "dropped_slots": sorted(corr.dropped_rows),
                "dropped_frames": len(corr.dropped_cols),
            },
        }
        if sample.gt_segments is not None:
            report = E.framewise_metrics(labeling, gt_labeling(sample),
                                         {label: label for label, _, _ in labeling.segments})
            doc["metrics_vs_gt_slot_ids"] = report.to_json_dict()
        return doc

    docs = _map_videos(run, list(manifest.samples))
    for doc in docs:
        _dump_json(out / f"{doc['id']}.localize.json", doc)
    _dump_json(out / "localize_index.json", {"samples": [d["id"] for d in docs],
                                             "percentile": args.percentile})
    print(f"localized {len(docs)} videos into {out}")
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    params, _, _ = M.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(sample):
        if sample.gt_step_texts is None:
            raise DataError(f"{sample.id}: zero-shot needs gt_step_texts")
        slots = M.forward(params, sample.video, training=False)
        labeling = infer.zero_shot_localize(slots, sample.gt_step_texts,
                                            sample.video, args.percentile)
        return {
            "id": sample.id,
            "task": sample.task,
            "num_frames": sample.video.length,
            "num_steps": sample.gt_step_texts.length,
            "frame_labels": list(labeling.frame_labels),
            "segments": [list(seg) for seg in labeling.segments],
        }

    docs = _map_videos(run, list(manifest.samples))
    for doc in docs:
        _dump_json(out / f"{doc['id']}.zeroshot.json", doc)
    _dump_json(out / "zeroshot_index.json", {"samples": [d["id"] for d in docs],
                                             "percentile": args.percentile})
    print(f"zero-shot localized {len(docs)} videos into {out}")
    return EXIT_OK


def _local_gt_labeling(sample) -> SegmentLabeling:
    # relabel task-level step ids with the video's local step order 0..T-1
    segs = [(i, start, end) for i, (_, start, end) in enumerate(sample.gt_segments)]
    return SegmentLabeling.from_segments(segs, sample.video.length)


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory not found: {pred_dir}")
    samples = {s.id: s for s in manifest.samples}

    if args.protocol == "unsupervised":
        task_videos, task_detections, task_gt, task_steps = {}, {}, {}, {}
        for sid, sample in samples.items():
            doc = _load_json(pred_dir / f"{sid}.localize.json")
            task = sample.task or "default"
            task_videos.setdefault(task, []).append((sid, sample.video.length))
            task_gt.setdefault(task, {})[sid] = gt_labeling(sample)
            labeling = SegmentLabeling(tuple(doc["frame_labels"]),
                                       tuple(tuple(s) for s in doc["segments"]))
            vectors = np.stack([d["vector"] for d in doc["detections"]]) if doc["detections"] \
                else np.zeros((0, sample.video.dim))
            dets = E.detections_from_labeling(sid, labeling, {
                d["slot"]: vectors[i] for i, d in enumerate(doc["detections"])})
            task_detections.setdefault(task, []).extend(dets)
        for task in task_videos:
            if task in manifest.tasks:
                task_steps[task] = manifest.tasks[task].num_steps
            else:
                task_steps[task] = 1 + max(
                    (seg[0] for sid, _ in task_videos[task] for seg in samples[sid].gt_segments),
                    default=0)
        report = E.unsupervised_protocol(task_videos, task_detections, task_gt,
                                         task_steps, seed=args.seed, aggregate=args.aggregate)
    elif args.protocol == "zeroshot":
        task_results = {}
        for sid, sample in samples.items():
            doc = _load_json(pred_dir / f"{sid}.zeroshot.json")
            task = sample.task or "default"
            pred = SegmentLabeling(tuple(doc["frame_labels"]),
                                   tuple(tuple(s) for s in doc["segments"]))
            task_results.setdefault(task, []).append((pred, _local_gt_labeling(sample)))
        report = E.zero_shot_protocol(task_results, aggregate=args.aggregate)
    else:
        raise DataError(f"unknown protocol {args.protocol!r}")

    _dump_json(args.out, report.to_json_dict())
    if args.csv:
        suffix = "localize" if args.protocol == "unsupervised" else "zeroshot"
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("task,sample,frame,pred_label,gt_label\n")
            for sid in sorted(samples):
                sample = samples[sid]
                doc = _load_json(pred_dir / f"{sid}.{suffix}.json")
                gt = gt_labeling(sample) if args.protocol == "unsupervised" \
                    else _local_gt_labeling(sample)
                for j, (p, g) in enumerate(zip(doc["frame_labels"], gt.frame_labels)):
                    fh.write(f"{sample.task},{sid},{j},{p},{g}\n")
    print(f"{args.protocol} report: f1={report.f1:.4f} iou={report.iou:.4f} "
          f"mof={report.mof:.4f} -> {args.out}")
    return EXIT_OK


def cmd_align(args) -> int:
    rows = read_embedding_file(args.rows)
    cols = read_embedding_file(args.cols)
    costs = match_cost_matrix(cols, rows)
    drop = percentile_drop_cost(costs, args.percentile)
    corr = drop_dtw(CostSpec(costs, drop, drop), args.mode)
    doc = {
        "mode": args.mode,
        "drop_cost": drop,
        "total_cost": corr.total_cost,
        "matches": [list(pair) for pair in corr.matches],
        "dropped_rows": sorted(corr.dropped_rows),
        "dropped_cols": sorted(corr.dropped_cols),
    }
    _dump_json(args.out, doc)
    print(f"aligned {rows.length}x{cols.length}: {corr.num_matches} matches, "
          f"total_cost={corr.total_cost:.6f} -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stepalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="SynthConfig JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    p.add_argument("--config", help="TrainConfig JSON (defaults used when omitted)")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("localize", help="discover and localize steps per video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, default=0.8)
    p.set_defaults(fn=cmd_localize)

    p = sub.add_parser("zeroshot", help="localize ground-truth step texts per video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, default=0.8)
    p.set_defaults(fn=cmd_zeroshot)

    p = sub.add_parser("eval", help="score predictions against the manifest ground truth")
    p.add_argument("--pred", required=True, help="directory of localize/zeroshot JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--protocol", choices=("unsupervised", "zeroshot"), default="unsupervised")
    p.add_argument("--aggregate", choices=("per_task", "pooled"), default="per_task")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="optional per-task CSV")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("align", help="Drop-DTW between two embedding files")
    p.add_argument("--rows", required=True, help="SEMB file providing the rows")
    p.add_argument("--cols", required=True, help="SEMB file providing the columns")
    p.add_argument("--mode", choices=("one_to_one", "many_to_one"), default="one_to_one")
    p.add_argument("--percentile", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_align)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except NumericalError as exc:
        print(f"stepalign: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, StepalignError, OSError) as exc:
        print(f"stepalign: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
