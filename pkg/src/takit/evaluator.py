"""Benchmark scoring: R2T exact match, T2R greedy IoU matching, dataset-level F1, Overall."""

from dataclasses import dataclass, field
from typing import Optional

from .adapters import ParsedPrediction
from .bench import Direction
from .geometry import iou
from .textnorm import normalize_r2t

IOU_THRESHOLD = 0.5


class DuplicateQueryId(ValueError):
    pass


@dataclass(frozen=True)
class T2RCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "T2RCounts") -> "T2RCounts":
        return T2RCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def score_r2t(pred: ParsedPrediction, gt: str) -> bool:
    if not pred.parse_ok or pred.text is None:
        return False
    return normalize_r2t(pred.text) == normalize_r2t(gt)


def _canonical_order(boxes) -> list:
    """Original indices sorted by box coordinates, so tie-breaks ignore input order."""
    return sorted(range(len(boxes)), key=lambda i: boxes[i].as_list())


def greedy_match(pred, gt, thr: float = IOU_THRESHOLD) -> list:
    """Accepted (pred_index, gt_index) pairs of the greedy IoU matching.

    Candidate pairs with IoU >= thr are visited by descending IoU, ties by
    ascending (pred rank, gt rank) where ranks come from coordinate order.
    """
    if not 0.0 < thr <= 1.0:
        raise ValueError(f"IoU threshold {thr} outside (0, 1]")
    p_order = _canonical_order(pred)
    g_order = _canonical_order(gt)
    cands = []
    for pr, pi in enumerate(p_order):
        for gr, gi in enumerate(g_order):
            v = iou(pred[pi], gt[gi])
            if v >= thr:
                cands.append((-v, pr, gr))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, pr, gr in cands:
        if pr in used_p or gr in used_g:
            continue
        used_p.add(pr)
        used_g.add(gr)
        pairs.append((p_order[pr], g_order[gr]))
    return pairs


def match_t2r(pred, gt, thr: float = IOU_THRESHOLD) -> T2RCounts:
    tp = len(greedy_match(pred, gt, thr))
    return T2RCounts(tp, len(pred) - tp, len(gt) - tp)


@dataclass
class QueryResult:
    query_id: str
    direction: Direction
    category: str
    r2t_match: Optional[bool] = None
    counts: Optional[T2RCounts] = None


def percent(num: int, den: int) -> float:
    """100 * num / den with 0/0 -> 0, computed in a single division."""
    return 0.0 if den == 0 else (100 * num) / den


def overall_score(acc_r2t: Optional[float], f1_t2r: Optional[float]) -> float:
    """Mean of the two directions; a missing direction counts as 0."""
    return ((acc_r2t or 0.0) + (f1_t2r or 0.0)) / 2


@dataclass
class DirectionTotals:
    r2t_queries: int = 0
    r2t_matches: int = 0
    t2r_queries: int = 0
    t2r: T2RCounts = field(default_factory=T2RCounts)

    def add(self, r: QueryResult):
        if r.direction is Direction.R2T:
            self.r2t_queries += 1
            self.r2t_matches += int(bool(r.r2t_match))
        else:
            self.t2r_queries += 1
            self.t2r = self.t2r + (r.counts or T2RCounts())

    def scores(self) -> dict:
        c = self.t2r
        acc = percent(self.r2t_matches, self.r2t_queries)
        f1 = percent(2 * c.tp, 2 * c.tp + c.fp + c.fn)
        out = {
            "acc_r2t": acc,
            "precision_t2r": percent(c.tp, c.tp + c.fp),
            "recall_t2r": percent(c.tp, c.tp + c.fn),
            "f1_t2r": f1,
            "overall": overall_score(acc, f1),
            "counts": {
                "r2t_queries": self.r2t_queries,
                "r2t_matches": self.r2t_matches,
                "t2r_queries": self.t2r_queries,
                "tp": c.tp,
                "fp": c.fp,
                "fn": c.fn,
            },
        }
        missing = [d for d, n in (("R2T", self.r2t_queries), ("T2R", self.t2r_queries)) if n == 0]
        if missing:
            out["missing_directions"] = missing
        return out


@dataclass
class EvalReport:
    acc_r2t: float
    precision_t2r: float
    recall_t2r: float
    f1_t2r: float
    overall: float
    counts: dict
    per_category: dict
    missing_directions: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "acc_r2t": self.acc_r2t,
            "precision_t2r": self.precision_t2r,
            "recall_t2r": self.recall_t2r,
            "f1_t2r": self.f1_t2r,
            "overall": self.overall,
            "counts": self.counts,
            "missing_directions": self.missing_directions,
            "per_category": self.per_category,
        }


def aggregate(records) -> EvalReport:
    seen = set()
    total = DirectionTotals()
    per_cat = {}
    for r in records:
        if r.query_id in seen:
            raise DuplicateQueryId(r.query_id)
        seen.add(r.query_id)
        total.add(r)
        per_cat.setdefault(r.category, DirectionTotals()).add(r)
    s = total.scores()
    return EvalReport(
        acc_r2t=s["acc_r2t"],
        precision_t2r=s["precision_t2r"],
        recall_t2r=s["recall_t2r"],
        f1_t2r=s["f1_t2r"],
        overall=s["overall"],
        counts=s["counts"],
        missing_directions=s.get("missing_directions", []),
        per_category={cat: per_cat[cat].scores() for cat in sorted(per_cat)},
    )


def score_query(q, pred: Optional[ParsedPrediction], thr: float = IOU_THRESHOLD) -> QueryResult:
    """Score one benchmark query; ``pred=None`` means the model produced nothing."""
    if q.direction is Direction.R2T:
        ok = pred is not None and score_r2t(pred, q.r2t_target)
        return QueryResult(q.query_id, q.direction, q.category, r2t_match=ok)
    boxes = pred.boxes if (pred is not None and pred.parse_ok) else []
    return QueryResult(q.query_id, q.direction, q.category, counts=match_t2r(boxes, q.t2r_targets, thr))
