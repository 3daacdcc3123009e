"""Benchmark construction: query templating, same-string merging, seeded quota sampling."""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .geometry import Box, ImageSize, iou
from .rng import Pcg32
from .textnorm import canonicalize_t2r, normalize_ws

log = logging.getLogger(__name__)

CATEGORIES = (
    "SceneText",
    "Receipt",
    "Ticket",
    "WarehouseSlip",
    "Report",
    "ChineseDocument",
    "Book",
    "Poster",
    "Notice",
    "PriceTag",
    "Invoice",
    "Certificate",
)

# Per-direction counts of the released benchmark (R2T = T2R in every category).
RELEASED_QUOTAS = {
    "SceneText": 1380,
    "Receipt": 280,
    "Ticket": 230,
    "WarehouseSlip": 195,
    "Report": 140,
    "ChineseDocument": 135,
    "Book": 105,
    "Poster": 90,
    "Notice": 60,
    "PriceTag": 40,
    "Invoice": 40,
    "Certificate": 30,
}

R2T_TEMPLATE = "What is the text at location [{}, {}, {}, {}]?"
T2R_TEMPLATE = 'Where is "{}" located in the image?'


class Direction(str, Enum):
    R2T = "R2T"
    T2R = "T2R"


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    image_id: str
    image: ImageSize
    box: Box
    transcript: str
    category: str
    source: str = ""
    index: int = 0  # position of the item within its image record

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise BenchError(f"unknown category {self.category!r}")
        if not normalize_ws(self.transcript):
            raise BenchError("empty transcript")


@dataclass
class BenchQuery:
    query_id: str
    image_id: str
    direction: Direction
    prompt: str
    category: str
    image: ImageSize
    r2t_target: Optional[str] = None
    t2r_targets: Optional[list] = None
    text: Optional[str] = None  # queried string for T2R, kept for prompt re-rendering
    box: Optional[Box] = None  # queried region for R2T

    def __post_init__(self):
        self.direction = Direction(self.direction)
        if self.direction is Direction.R2T:
            if self.r2t_target is None or self.t2r_targets is not None:
                raise BenchError(f"{self.query_id}: R2T query needs exactly r2t_target")
        elif not self.t2r_targets or self.r2t_target is not None:
            raise BenchError(f"{self.query_id}: T2R query needs a non-empty t2r_targets")

    def to_json(self) -> dict:
        rec = {
            "query_id": self.query_id,
            "image_id": self.image_id,
            "width": self.image.width,
            "height": self.image.height,
            "category": self.category,
            "direction": self.direction.value,
            "prompt": self.prompt,
        }
        if self.direction is Direction.R2T:
            rec["bbox"] = self.box.as_list()
            rec["r2t_target"] = self.r2t_target
        else:
            rec["text"] = self.text
            rec["t2r_targets"] = [b.as_list() for b in self.t2r_targets]
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "BenchQuery":
        direction = Direction(rec["direction"])
        kw = dict(
            query_id=rec["query_id"],
            image_id=rec["image_id"],
            direction=direction,
            prompt=rec["prompt"],
            category=rec["category"],
            image=ImageSize(int(rec["width"]), int(rec["height"])),
        )
        if direction is Direction.R2T:
            kw.update(r2t_target=rec["r2t_target"], box=Box.from_list(rec["bbox"]))
        else:
            kw.update(text=rec["text"], t2r_targets=[Box.from_list(b) for b in rec["t2r_targets"]])
        return cls(**kw)


def format_coord(v: float) -> str:
    return f"{v:.1f}"


def r2t_prompt(box: Box) -> str:
    return R2T_TEMPLATE.format(*(format_coord(v) for v in box.as_list()))


def t2r_prompt(text: str) -> str:
    return T2R_TEMPLATE.format(text)


def r2t_query_id(image_id: str, index: int) -> str:
    return f"{image_id}#r2t#{index:05d}"


def t2r_query_id(image_id: str, index: int) -> str:
    return f"{image_id}#t2r#{index:05d}"


def make_r2t_query(ann: Annotation) -> BenchQuery:
    return BenchQuery(
        query_id=r2t_query_id(ann.image_id, ann.index),
        image_id=ann.image_id,
        direction=Direction.R2T,
        prompt=r2t_prompt(ann.box),
        category=ann.category,
        image=ann.image,
        r2t_target=ann.transcript,
        box=ann.box,
    )


def make_t2r_queries(anns) -> list:
    """One query per canonical string; all boxes sharing the key become targets.

    The prompt uses the first-seen raw transcript of each group. Groups whose key
    is empty (pure punctuation / whitespace) are dropped.
    """
    anns = list(anns)
    if not anns:
        return []
    image_ids = {a.image_id for a in anns}
    if len(image_ids) != 1:
        raise BenchError(f"annotations span several images: {sorted(image_ids)}")
    groups = OrderedDict()
    for ann in anns:
        key = canonicalize_t2r(ann.transcript)
        if not key:
            log.warning("%s item %d: empty canonical text, dropped from T2R", ann.image_id, ann.index)
            continue
        groups.setdefault(key, []).append(ann)
    queries = []
    for gi, members in enumerate(groups.values()):
        first = members[0]
        targets = []
        for m in members:
            # exact duplicate boxes would inflate FN for a perfect responder
            if any(iou(m.box, t) == 1.0 for t in targets):
                continue
            targets.append(m.box)
        queries.append(
            BenchQuery(
                query_id=t2r_query_id(first.image_id, gi),
                image_id=first.image_id,
                direction=Direction.T2R,
                prompt=t2r_prompt(first.transcript),
                category=first.category,
                image=first.image,
                t2r_targets=targets,
                text=first.transcript,
            )
        )
    return queries


@dataclass
class QuotaSpec:
    """Per-category quota, shared by both directions (strict R2T/T2R parity)."""

    per_category: dict = field(default_factory=dict)

    def __post_init__(self):
        for cat, n in self.per_category.items():
            if cat not in CATEGORIES:
                raise BenchError(f"unknown category {cat!r} in quota")
            if int(n) != n or n < 0:
                raise BenchError(f"quota for {cat} must be a non-negative integer")

    @classmethod
    def from_json(cls, obj: dict) -> "QuotaSpec":
        """Accepts ``{cat: n}`` or ``{cat: {"R2T": n, "T2R": n}}``."""
        out = {}
        for cat, v in obj.items():
            if isinstance(v, dict):
                r2t, t2r = v.get("R2T"), v.get("T2R")
                if r2t != t2r:
                    raise BenchError(f"quota for {cat} breaks R2T/T2R parity ({r2t} vs {t2r})")
                v = r2t
            if isinstance(v, bool) or not isinstance(v, int):
                raise BenchError(f"quota for {cat} must be an integer")
            out[cat] = v
        return cls(out)

    @classmethod
    def released(cls) -> "QuotaSpec":
        return cls(dict(RELEASED_QUOTAS))


def floor5(n: int) -> int:
    return n - n % 5


def effective_quota(quota: int, n_r2t: int, n_t2r: int) -> int:
    return floor5(min(quota, n_r2t, n_t2r))


def _stream_id(category: str, direction: Direction) -> int:
    return CATEGORIES.index(category) * 2 + (0 if direction is Direction.R2T else 1)


def partial_shuffle_sample(items: list, k: int, rng: Pcg32) -> list:
    """First k positions of a Fisher-Yates shuffle (without replacement)."""
    items = list(items)
    n = len(items)
    for i in range(k):
        j = i + rng.bounded(n - i)
        items[i], items[j] = items[j], items[i]
    return items[:k]


def build_candidates(annotations_by_image) -> dict:
    """Map (category, direction) -> candidate queries sorted by (image_id, query_id)."""
    cands = {}
    for image_id in sorted(annotations_by_image):
        anns = sorted(annotations_by_image[image_id], key=lambda a: a.index)
        if not anns:
            continue
        cat = anns[0].category
        cands.setdefault((cat, Direction.R2T), []).extend(make_r2t_query(a) for a in anns)
        cands.setdefault((cat, Direction.T2R), []).extend(make_t2r_queries(anns))
    for lst in cands.values():
        lst.sort(key=lambda q: (q.image_id, q.query_id))
    return cands


def sample_benchmark(pool, quota: QuotaSpec, seed: int, counts: Optional[dict] = None) -> list:
    """Draw the benchmark from ``pool`` (an iterable of Annotations).

    For each category the per-direction quota is min(quota, R2T pool, T2R pool)
    floored to a multiple of 5, so both directions always come out equal.
    Output is grouped by category (canonical order), R2T before T2R, each group
    in candidate order.
    """
    by_image = {}
    for ann in pool:
        by_image.setdefault(ann.image_id, []).append(ann)
    cands = build_candidates(by_image)
    out = []
    for cat in CATEGORIES:
        if cat not in quota.per_category:
            continue
        r2t = cands.get((cat, Direction.R2T), [])
        t2r = cands.get((cat, Direction.T2R), [])
        if not r2t or not t2r:
            log.warning("EmptyCategory: no candidates for %s, quota set to 0", cat)
        k = effective_quota(quota.per_category[cat], len(r2t), len(t2r))
        if counts is not None:
            counts[cat] = k
        for direction, lst in ((Direction.R2T, r2t), (Direction.T2R, t2r)):
            rng = Pcg32.from_seed(seed, stream=_stream_id(cat, direction))
            picked = partial_shuffle_sample(lst, k, rng)
            picked.sort(key=lambda q: (q.image_id, q.query_id))
            out.extend(picked)
    return out
