"""CLEAR-MOT counting and recall-integrated tracking metrics."""

import math
from dataclasses import asdict, dataclass, field
from logging import Logger, getLogger
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from inflection import humanize

from panoptrack.config.defaults import BEV_GATE, N_POINTS
from panoptrack.geom import Box3D, bev_distance, iou_3d
from panoptrack.tracker import TrackingResult, TrackOutput

RECALL_TOLERANCE = 1e-12


@dataclass(frozen=True)
class GroundTruthObject:
    object_id: int
    box: Box3D
    category: str = "car"


@dataclass
class GroundTruth:
    frames: Dict[int, List[GroundTruthObject]] = field(default_factory=dict)

    def add(self, frame: int, objects: Sequence[GroundTruthObject]) -> None:
        self.frames[frame] = sorted(objects, key=lambda o: o.object_id)

    @property
    def categories(self) -> List[str]:
        return sorted({o.category for objects in self.frames.values() for o in objects})

    def num_positives(self, category: Optional[str] = None) -> int:
        return sum(
            1
            for objects in self.frames.values()
            for o in objects
            if category is None or o.category == category
        )


@dataclass(frozen=True)
class Matcher:
    kind: str = "bev"
    threshold: float = BEV_GATE

    def __post_init__(self) -> None:
        if self.kind not in ("bev", "iou3d"):
            raise ValueError(f"unknown matcher kind: {self.kind}")
        if self.threshold < 0.0:
            raise ValueError(f"matcher threshold must not be negative: {self.threshold}")

    @classmethod
    def parse(cls, text: str) -> "Matcher":
        kind, _, value = text.partition(":")
        try:
            return cls(kind=kind.strip(), threshold=float(value))
        except ValueError as error:
            raise ValueError(f"matcher must look like bev:2.0 or iou3d:0.3, got {text!r}") from error

    def __str__(self) -> str:
        return f"{self.kind}:{self.threshold:g}"

    def cost(self, prediction: Box3D, truth: Box3D) -> Optional[float]:
        """Smaller is better; None when the pair fails the gate."""
        if self.kind == "bev":
            distance = bev_distance(prediction, truth)
            return distance if distance <= self.threshold else None
        overlap = iou_3d(prediction, truth)
        return -overlap if overlap >= self.threshold and overlap > 0.0 else None


@dataclass(frozen=True)
class FrameMatch:
    pairs: List[Tuple[int, int]]
    false_positives: List[int]
    false_negatives: List[int]


def match_frame(
    preds: Sequence[TrackOutput],
    gts: Sequence[GroundTruthObject],
    matcher: Matcher,
    previous: Mapping[int, int] = {},
) -> FrameMatch:
    """Greedy one-to-one matching of one frame.

    Pairs are (gt_index, pred_index). Candidates are ranked by cost, then by
    whether they continue the gt's previous pairing, then by gt and prediction
    position. Only same-category pairs are considered.
    """
    candidates = []
    for g, truth in enumerate(gts):
        for p, pred in enumerate(preds):
            if pred.category != truth.category:
                continue
            cost = matcher.cost(pred.box, truth.box)
            if cost is None:
                continue
            continues = previous.get(truth.object_id) == pred.track_id
            candidates.append((cost, 0 if continues else 1, g, p))
    candidates.sort()
    used_g, used_p = set(), set()
    pairs = []
    for _, _, g, p in candidates:
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        pairs.append((g, p))
    return FrameMatch(
        pairs=pairs,
        false_positives=[p for p in range(len(preds)) if p not in used_p],
        false_negatives=[g for g in range(len(gts)) if g not in used_g],
    )


@dataclass(frozen=True)
class ClearCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    distance: float = 0.0

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    def recall(self, positives: int) -> float:
        return self.tp / positives if positives else 0.0

    def mota(self, positives: int) -> float:
        if not positives:
            return 0.0
        return 1.0 - (self.ids + self.fp + self.fn) / positives

    @property
    def motp(self) -> float:
        return self.distance / self.tp if self.tp else math.nan


def _partition(
    result: TrackingResult, gt: GroundTruth, category: Optional[str]
) -> List[Tuple[List[TrackOutput], List[GroundTruthObject]]]:
    frames = sorted(set(result.frames) | set(gt.frames))
    return [
        (
            [o for o in result.frames.get(f, []) if category is None or o.category == category],
            [o for o in gt.frames.get(f, []) if category is None or o.category == category],
        )
        for f in frames
    ]


def clear_counts(
    result: TrackingResult,
    gt: GroundTruth,
    matcher: Matcher,
    score_threshold: float = -math.inf,
    category: Optional[str] = None,
) -> ClearCounts:
    return _count(_partition(result, gt, category), matcher, score_threshold)


def _count(
    frames: Sequence[Tuple[List[TrackOutput], List[GroundTruthObject]]],
    matcher: Matcher,
    score_threshold: float,
) -> ClearCounts:
    tp = fp = fn = ids = 0
    distance = 0.0
    last_match: Dict[int, int] = {}
    for preds, gts in frames:
        kept = [o for o in preds if o.confidence >= score_threshold]
        match = match_frame(kept, gts, matcher, last_match)
        for g, p in match.pairs:
            truth, pred = gts[g], kept[p]
            previous = last_match.get(truth.object_id)
            if previous is not None and previous != pred.track_id:
                ids += 1
            last_match[truth.object_id] = pred.track_id
            distance += bev_distance(pred.box, truth.box)
        tp += len(match.pairs)
        fp += len(match.false_positives)
        fn += len(match.false_negatives)
    return ClearCounts(tp=tp, fp=fp, fn=fn, ids=ids, distance=distance)


@dataclass(frozen=True)
class RecallPoint:
    recall: float
    reachable: bool
    threshold: float
    mota_r: float
    motp_r: float
    tp: int
    fp: int
    fn: int
    ids: int


def _motar(counts: ClearCounts, recall: float, positives: int) -> float:
    raw = 1.0 - (counts.ids + counts.fp + counts.fn - (1.0 - recall) * positives) / (
        recall * positives
    )
    # Overshooting the recall level at a coarse confidence step would exceed 1.
    return min(1.0, max(0.0, raw))


class _Sweep:
    """Lazily evaluated CLEAR-MOT counts over descending confidence thresholds."""

    def __init__(
        self,
        result: TrackingResult,
        gt: GroundTruth,
        matcher: Matcher,
        category: Optional[str],
    ) -> None:
        self.frames = _partition(result, gt, category)
        self.matcher = matcher
        self.positives = gt.num_positives(category)
        self.thresholds = sorted(
            {o.confidence for preds, _ in self.frames for o in preds}, reverse=True
        )
        self.counts: List[ClearCounts] = []

    def at(self, index: int) -> ClearCounts:
        while len(self.counts) <= index:
            threshold = self.thresholds[len(self.counts)]
            self.counts.append(_count(self.frames, self.matcher, threshold))
        return self.counts[index]

    def highest_reaching(self, recall: float) -> Optional[int]:
        for index in range(len(self.thresholds)):
            if self.at(index).recall(self.positives) >= recall - RECALL_TOLERANCE:
                return index
        return None

    def max_recall(self) -> float:
        if not self.thresholds or not self.positives:
            return 0.0
        best = 0.0
        for index in range(len(self.thresholds)):
            best = max(best, self.at(index).recall(self.positives))
            if best >= 1.0:
                break
        return best

    def point(self, recall: float, miss_distance: float) -> RecallPoint:
        index = self.highest_reaching(recall) if self.positives else None
        if index is None:
            return RecallPoint(recall, False, math.nan, 0.0, miss_distance, 0, 0, 0, 0)
        counts = self.at(index)
        motp = counts.motp if counts.tp else miss_distance
        return RecallPoint(
            recall=recall,
            reachable=True,
            threshold=self.thresholds[index],
            mota_r=_motar(counts, recall, self.positives),
            motp_r=motp,
            tp=counts.tp,
            fp=counts.fp,
            fn=counts.fn,
            ids=counts.ids,
        )


def recall_levels(n_points: int) -> List[float]:
    if n_points < 2:
        raise ValueError(f"n_points must be at least 2, got {n_points}")
    return [k / (n_points - 1) for k in range(1, n_points)]


def _miss_distance(matcher: Matcher) -> float:
    return matcher.threshold if matcher.kind == "bev" else BEV_GATE


def mota_at_recall(
    result: TrackingResult,
    gt: GroundTruth,
    recall: float,
    matcher: Matcher = Matcher(),
    category: Optional[str] = None,
) -> RecallPoint:
    if not 0.0 < recall <= 1.0:
        raise ValueError(f"recall level outside (0, 1]: {recall}")
    return _Sweep(result, gt, matcher, category).point(recall, _miss_distance(matcher))


@dataclass
class CategoryReport:
    category: str
    positives: int
    amota: float
    amotp: float
    recall: float
    mota: float
    ids: int
    fp: int
    fn: int
    points: List[RecallPoint]

    @property
    def unreachable(self) -> int:
        return sum(1 for p in self.points if not p.reachable)


@dataclass
class MetricReport:
    matcher: str
    n_points: int
    amota: float
    amotp: float
    recall: float
    mota: float
    ids: int
    fp: int
    fn: int
    categories: Dict[str, CategoryReport]

    def to_dict(self) -> Dict[str, object]:
        return _finite(asdict(self))

    def table(self) -> str:
        header = ("Category", "AMOTA", "AMOTP", "Recall", "MOTA", "IDS", "FP", "FN")
        rows = [
            (humanize(c.category), c.amota, c.amotp, c.recall, c.mota, c.ids, c.fp, c.fn)
            for c in self.categories.values()
        ]
        rows.append(
            ("Mean", self.amota, self.amotp, self.recall, self.mota, self.ids, self.fp, self.fn)
        )
        return format_table(header, rows)


def _finite(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_finite(v) for v in value]
    return value


def format_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    def cell(value: object) -> str:
        if isinstance(value, float):
            return f"{value:.3f}"
        return str(value)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
    lines = [
        "  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))
    ]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append(
            "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths)))
        )
    return "\n".join(lines) + "\n"


def evaluate_category(
    result: TrackingResult,
    gt: GroundTruth,
    category: Optional[str],
    matcher: Matcher = Matcher(),
    n_points: int = N_POINTS,
) -> CategoryReport:
    sweep = _Sweep(result, gt, matcher, category)
    miss = _miss_distance(matcher)
    points = [sweep.point(r, miss) for r in recall_levels(n_points)]
    reachable = [p for p in points if p.reachable]
    if reachable:
        best = max(reachable, key=lambda p: (p.mota_r, p.threshold))
        counts = ClearCounts(tp=best.tp, fp=best.fp, fn=best.fn, ids=best.ids)
        mota = max(0.0, counts.mota(sweep.positives))
    else:
        best, mota = None, 0.0
    return CategoryReport(
        category=category or "all",
        positives=sweep.positives,
        amota=float(np.mean([p.mota_r for p in points])),
        amotp=float(np.mean([p.motp_r for p in points])),
        recall=sweep.max_recall(),
        mota=mota,
        ids=best.ids if best else 0,
        fp=best.fp if best else 0,
        fn=best.fn if best else sweep.positives,
        points=points,
    )


def evaluate(
    result: TrackingResult,
    gt: GroundTruth,
    matcher: Matcher = Matcher(),
    n_points: int = N_POINTS,
    logger: Optional[Logger] = None,
) -> MetricReport:
    logger = logger or getLogger("panoptrack")
    categories = {
        c: evaluate_category(result, gt, c, matcher, n_points) for c in gt.categories
    }
    for report in categories.values():
        if report.unreachable:
            logger.warning(
                f"{report.category}: {report.unreachable} of {n_points - 1} "
                "recall levels unreachable"
            )
    reports = list(categories.values())
    if not reports:
        return MetricReport(str(matcher), n_points, 0.0, _miss_distance(matcher), 0.0, 0.0, 0, 0, 0, {})
    return MetricReport(
        matcher=str(matcher),
        n_points=n_points,
        amota=float(np.mean([r.amota for r in reports])),
        amotp=float(np.mean([r.amotp for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        mota=float(np.mean([r.mota for r in reports])),
        ids=sum(r.ids for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        categories=categories,
    )


def amota(
    result: TrackingResult,
    gt: GroundTruth,
    n_points: int = N_POINTS,
    matcher: Matcher = Matcher(),
) -> float:
    return evaluate(result, gt, matcher, n_points).amota


def amotp(
    result: TrackingResult,
    gt: GroundTruth,
    n_points: int = N_POINTS,
    matcher: Matcher = Matcher(),
) -> float:
    return evaluate(result, gt, matcher, n_points).amotp


def mota_iou(
    result: TrackingResult, gt: GroundTruth, iou_threshold: float
) -> Tuple[float, float]:
    """Single-threshold MOTA and mismatch ratio under 3D IoU gating."""
    counts = clear_counts(result, gt, Matcher("iou3d", iou_threshold))
    positives = gt.num_positives()
    if not positives:
        return 0.0, 0.0
    return counts.mota(positives), counts.ids / positives


def curve_rows(report: MetricReport) -> List[List[object]]:
    rows: List[List[object]] = []
    for category, category_report in report.categories.items():
        for p in category_report.points:
            rows.append(
                [category, p.recall, int(p.reachable), p.threshold, p.mota_r, p.motp_r, p.tp, p.fp, p.fn, p.ids]
            )
    return rows


CURVE_HEADER: Tuple[str, ...] = (
    "category",
    "recall",
    "reachable",
    "threshold",
    "mota_r",
    "motp_r",
    "tp",
    "fp",
    "fn",
    "ids",
)
