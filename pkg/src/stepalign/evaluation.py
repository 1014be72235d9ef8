"""Evaluation machinery: framewise metrics, clustering of detected steps,
Hungarian matching against ground truth, and the dataset-level protocols.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BACKGROUND, DataError, SegmentLabeling


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    mof: float
    iou: float
    per_task: dict = field(default_factory=dict)
    support: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "mof": self.mof, "iou": self.iou,
            "per_task": {k: dict(v) for k, v in sorted(self.per_task.items())},
            "support": dict(sorted(self.support.items())),
        }


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(precision: float, recall: float) -> float:
    return _safe_div(2.0 * precision * recall, precision + recall)


@dataclass
class FrameCounts:
    """Raw tallies that add across videos of one task."""

    correct_step: int = 0
    pred_step: int = 0
    gt_step: int = 0
    correct_all: int = 0
    frames: int = 0
    intersection: dict = field(default_factory=dict)  # gt class -> frames
    union: dict = field(default_factory=dict)

    def add(self, other: "FrameCounts") -> None:
        self.correct_step += other.correct_step
        self.pred_step += other.pred_step
        self.gt_step += other.gt_step
        self.correct_all += other.correct_all
        self.frames += other.frames
        for c, v in other.intersection.items():
            self.intersection[c] = self.intersection.get(c, 0) + v
        for c, v in other.union.items():
            self.union[c] = self.union.get(c, 0) + v


def frame_counts(pred: SegmentLabeling, gt: SegmentLabeling, class_map: dict) -> FrameCounts:
    if pred.num_frames != gt.num_frames:
        raise DataError(f"frame count mismatch: {pred.num_frames} vs {gt.num_frames}")
    mapped_values = [v for v in class_map.values() if v != BACKGROUND]
    if len(mapped_values) != len(set(mapped_values)):
        raise DataError("class_map must be injective")
    pred_arr = np.array([class_map.get(v, BACKGROUND) for v in pred.frame_labels])
    gt_arr = np.array(gt.frame_labels)
    counts = FrameCounts()
    counts.frames = len(gt_arr)
    hit = pred_arr == gt_arr
    step_hit = hit & (gt_arr != BACKGROUND)
    counts.correct_step = int(step_hit.sum())
    counts.pred_step = int((pred_arr != BACKGROUND).sum())
    counts.gt_step = int((gt_arr != BACKGROUND).sum())
    counts.correct_all = int(hit.sum())
    for c in sorted({int(v) for v in gt_arr if v != BACKGROUND}):
        p = pred_arr == c
        g = gt_arr == c
        counts.intersection[c] = int((p & g).sum())
        counts.union[c] = int((p | g).sum())
    return counts


def _report_from_counts(counts: FrameCounts) -> dict:
    precision = _safe_div(counts.correct_step, counts.pred_step)
    recall = _safe_div(counts.correct_step, counts.gt_step)
    ious = [_safe_div(counts.intersection[c], counts.union[c]) for c in counts.intersection]
    return {
        "precision": precision,
        "recall": recall,
        "f1": _f1(precision, recall),
        "mof": _safe_div(counts.correct_all, counts.frames),
        "iou": float(np.mean(ious)) if ious else 0.0,
    }


def framewise_metrics(pred: SegmentLabeling, gt: SegmentLabeling, class_map: dict) -> MetricsReport:
    """Frame accuracy of `pred` against `gt` after mapping predicted labels
    through `class_map` (unmapped labels count as background).

    precision/recall cover key-step frames only, MoF counts every frame, and
    IoU averages intersection-over-union across the ground-truth classes.
    """
    counts = frame_counts(pred, gt, class_map)
    numbers = _report_from_counts(counts)
    support = {"frames": counts.frames, "gt_step_frames": counts.gt_step,
               "pred_step_frames": counts.pred_step}
    return MetricsReport(**numbers, per_task={}, support=support)


# --- clustering --------------------------------------------------------------

def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int):
    """Lloyd iterations until the assignment stops changing; empty clusters are
    reseeded to the point currently farthest from its own centroid."""
    assignments = None
    inertia_trace = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignments = d2.argmin(axis=1)
        dist_own = d2[np.arange(len(points)), new_assignments]
        for c in range(len(centroids)):
            if (new_assignments == c).any():
                continue
            far = int(dist_own.argmax())
            new_assignments[far] = c
            centroids[c] = points[far]
            d2[:, c] = ((points - centroids[c]) ** 2).sum(axis=1)
            dist_own = d2[np.arange(len(points)), new_assignments]
        inertia_trace.append(float(dist_own.sum()))
        if assignments is not None and (new_assignments == assignments).all():
            break
        assignments = new_assignments
        for c in range(len(centroids)):
            centroids[c] = points[assignments == c].mean(axis=0)
    return assignments, centroids, inertia_trace


def kmeans(points, k: int, seed: int, max_iter: int = 300):
    """Seeded k-means++ initialization followed by Lloyd iterations to an
    assignment fixpoint (or max_iter). Returns (assignments, centroids)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise DataError("points must be a 2-d array")
    n = pts.shape[0]
    if k > n:
        raise DataError(f"k={k} exceeds the {n} available points")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    closest = ((pts - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[c] = pts[rng.integers(n)]
        else:
            centroids[c] = pts[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((pts - centroids[c]) ** 2).sum(axis=1))
    assignments, centroids, _ = _lloyd(pts, centroids, max_iter)
    return assignments, centroids


def keep_top_fraction(points, assignments, centroids, fraction: float = 0.6) -> np.ndarray:
    """Per cluster, keep the floor(fraction * size) members closest to the
    centroid (at least one); ties break toward the lower index."""
    pts = np.asarray(points, dtype=np.float64)
    assignments = np.asarray(assignments)
    kept = np.zeros(len(pts), dtype=bool)
    for c in range(len(centroids)):
        members = np.nonzero(assignments == c)[0]
        if members.size == 0:
            continue
        budget = max(1, int(fraction * members.size))
        dists = ((pts[members] - centroids[c]) ** 2).sum(axis=1)
        order = members[np.argsort(dists, kind="stable")]
        kept[order[:budget]] = True
    return kept


def hungarian(cost) -> dict:
    """Minimum-cost injective row-to-column assignment. Rectangular inputs
    behave as if padded with a cost above every real entry: only min(n, m)
    pairs are returned."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise DataError("cost must be a non-empty 2-d matrix")
    if not np.isfinite(cost).all():
        raise DataError("cost must be finite")
    rows, cols = linear_sum_assignment(cost)
    return {int(r): int(c) for r, c in zip(rows, cols)}


# --- protocols ----------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    """One surviving step detection inside a video."""

    sample_id: str
    slot: int
    start: int
    end: int
    vector: np.ndarray
    frames: tuple  # matched frame indices


def detections_from_labeling(sample_id: str, labeling: SegmentLabeling,
                             slot_vectors: np.ndarray) -> list[Detection]:
    out = []
    labels = np.array(labeling.frame_labels)
    for label, start, end in labeling.segments:
        frames = tuple(int(j) for j in np.nonzero(labels == label)[0])
        out.append(Detection(sample_id, label, start, end,
                             np.asarray(slot_vectors[label], dtype=np.float64), frames))
    return out


def _average_reports(per_task: dict) -> dict:
    keys = ("precision", "recall", "f1", "mof", "iou")
    return {k: float(np.mean([t[k] for t in per_task.values()])) if per_task else 0.0 for k in keys}


def _pool_counts(task_counts: dict) -> dict:
    pooled = FrameCounts()
    for counts in task_counts.values():
        pooled.add(counts)
    return _report_from_counts(pooled)


def unsupervised_protocol(task_videos: dict, task_detections: dict, task_gt: dict,
                          task_num_steps: dict, seed: int,
                          keep_fraction: float = 0.6, aggregate: str = "per_task") -> MetricsReport:
    """Cluster the detected step vectors of each task, keep the best members,
    match clusters to ground-truth steps with Hungarian on 1 - overlap, and
    score framewise. `task_videos` maps task -> list of (sample_id, n_frames);
    `task_detections` task -> list of Detection; `task_gt` task ->
    {sample_id: SegmentLabeling}."""
    if aggregate not in ("per_task", "pooled"):
        raise DataError(f"unknown aggregate {aggregate!r}")
    per_task = {}
    task_counts = {}
    for task in sorted(task_videos):
        videos = task_videos[task]
        detections = task_detections.get(task, [])
        gt_map = task_gt[task]
        labels_by_video = {sid: np.full(n, BACKGROUND) for sid, n in videos}

        if detections:
            vectors = np.stack([d.vector for d in detections])
            k = min(task_num_steps[task], len(detections))
            assignments, centroids = kmeans(vectors, k, seed)
            kept = keep_top_fraction(vectors, assignments, centroids, keep_fraction)
            for det, cluster, keep in zip(detections, assignments, kept):
                if not keep:
                    continue
                arr = labels_by_video[det.sample_id]
                arr[list(det.frames)] = int(cluster)

        pred_all = np.concatenate([labels_by_video[sid] for sid, _ in videos])
        gt_all = np.concatenate([np.array(gt_map[sid].frame_labels) for sid, _ in videos])

        num_clusters = task_num_steps[task]
        gt_steps = sorted({int(v) for v in gt_all if v != BACKGROUND})
        cost = np.ones((num_clusters, max(len(gt_steps), 1)))
        for ci in range(num_clusters):
            p = pred_all == ci
            for gi, g in enumerate(gt_steps):
                gmask = gt_all == g
                union = int((p | gmask).sum())
                if union:
                    cost[ci, gi] = 1.0 - int((p & gmask).sum()) / union
        assignment = hungarian(cost)
        class_map = {ci: gt_steps[gi] for ci, gi in assignment.items() if gi < len(gt_steps)}

        pred_lab = SegmentLabeling.from_frame_labels(pred_all.tolist())
        gt_lab = SegmentLabeling.from_frame_labels(gt_all.tolist())
        counts = frame_counts(pred_lab, gt_lab, class_map)
        task_counts[task] = counts
        per_task[task] = _report_from_counts(counts)

    numbers = _average_reports(per_task) if aggregate == "per_task" else _pool_counts(task_counts)
    support = {"tasks": len(per_task),
               "videos": sum(len(v) for v in task_videos.values()),
               "frames": sum(c.frames for c in task_counts.values())}
    return MetricsReport(**numbers, per_task=per_task, support=support)


def zero_shot_protocol(task_results: dict, aggregate: str = "per_task") -> MetricsReport:
    """Score zero-shot localizations. `task_results` maps task -> list of
    (pred: SegmentLabeling, gt: SegmentLabeling) per video, both labeled with
    the video's local step indices. Frame tallies pool within a task; IoU
    averages over (video, step) pairs."""
    if aggregate not in ("per_task", "pooled"):
        raise DataError(f"unknown aggregate {aggregate!r}")
    per_task = {}
    task_counts = {}
    all_ious = []
    for task in sorted(task_results):
        counts = FrameCounts()
        ious = []
        for pred, gt in task_results[task]:
            video_counts = frame_counts(pred, gt, _identity_map(gt))
            ious.extend(_safe_div(video_counts.intersection[c], video_counts.union[c])
                        for c in video_counts.intersection)
            # per-video IoU classes would collide across videos; pool scalars only
            video_counts.intersection = {}
            video_counts.union = {}
            counts.add(video_counts)
        numbers = _report_from_counts(counts)
        numbers["iou"] = float(np.mean(ious)) if ious else 0.0
        per_task[task] = numbers
        task_counts[task] = counts
        all_ious.extend(ious)
    if aggregate == "per_task":
        numbers = _average_reports(per_task)
    else:
        numbers = _pool_counts(task_counts)
        numbers["iou"] = float(np.mean(all_ious)) if all_ious else 0.0
    support = {"tasks": len(per_task),
               "videos": sum(len(v) for v in task_results.values()),
               "steps": len(all_ious)}
    return MetricsReport(**numbers, per_task=per_task, support=support)


def _identity_map(gt: SegmentLabeling) -> dict:
    return {label: label for label, _, _ in gt.segments}


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum assignment cost by enumerating all permutations (oracle)."""
    from itertools import permutations

    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best = np.inf
    if n <= m:
        for perm in permutations(range(m), n):
            total = sum(cost[i, perm[i]] for i in range(n))
            best = min(best, total)
    else:
        for perm in permutations(range(n), m):
            total = sum(cost[perm[j], j] for j in range(m))
            best = min(best, total)
    return best
