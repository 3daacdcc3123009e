"""Two-engine pseudo-label agreement for scene text.

Geometry must agree first (mutual best IoU match above a threshold), then the
transcripts are compared after whitespace normalization, case preserved.
Disagreements are written to an adjudication queue for an external judge.
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .geometry import Box, ImageSize, iou
from .textnorm import normalize_ws

MATCH_IOU = 0.7


class DiscardReason(str, Enum):
    NO_MUTUAL_MATCH = "NoMutualMatch"
    LOW_IOU = "LowIoU"


class BoxPolicy(str, Enum):
    ENGINE_A = "a"
    UNION = "union"
    INTERSECTION = "intersection"


class MalformedVerdict(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class TextInstance:
    image_id: str
    image: ImageSize
    box: Box
    text: str
    source: str = ""
    mask_rle: Optional[list] = None

    def to_json(self) -> dict:
        rec = {
            "image": self.image_id,
            "width": self.image.width,
            "height": self.image.height,
            "bbox": self.box.as_list(),
            "text": self.text,
            "source": self.source,
        }
        if self.mask_rle is not None:
            rec["mask_rle"] = self.mask_rle
        return rec


@dataclass
class EngineOutput:
    engine_id: str
    instances: list  # (Box, transcript) pairs


@dataclass
class Disputed:
    box_a: Box
    box_b: Box
    text_a: str
    text_b: str
    box: Box  # geometry carried forward if the dispute is resolved


@dataclass
class ConsensusResult:
    agreed: list = field(default_factory=list)
    disputed: list = field(default_factory=list)
    discarded: Counter = field(default_factory=Counter)  # (engine_id, reason) -> count


def _argmax(values) -> int:
    best, best_i = -1.0, -1
    for i, v in enumerate(values):
        if v > best:  # strict: ties go to the lowest index
            best, best_i = v, i
    return best_i


def _iou_matrix(a_boxes, b_boxes):
    return [[iou(x, y) for y in b_boxes] for x in a_boxes]


def mutual_best_match(a: EngineOutput, b: EngineOutput, thr: float = MATCH_IOU) -> list:
    """(i, j) pairs where each box is the other's IoU argmax and IoU >= thr."""
    return [(i, j) for i, j, v in _mutual_pairs(a, b) if v >= thr]


def _mutual_pairs(a: EngineOutput, b: EngineOutput) -> list:
    a_boxes = [box for box, _ in a.instances]
    b_boxes = [box for box, _ in b.instances]
    if not a_boxes or not b_boxes:
        return []
    m = _iou_matrix(a_boxes, b_boxes)
    col_best = [_argmax(m[i][j] for i in range(len(a_boxes))) for j in range(len(b_boxes))]
    pairs = []
    for i, row in enumerate(m):
        j = _argmax(row)
        if row[j] > 0.0 and col_best[j] == i:
            pairs.append((i, j, row[j]))
    return pairs


def _merge_box(a: Box, b: Box, policy: BoxPolicy) -> Box:
    if policy is BoxPolicy.UNION:
        return Box(min(a.x_min, b.x_min), min(a.y_min, b.y_min), max(a.x_max, b.x_max), max(a.y_max, b.y_max))
    if policy is BoxPolicy.INTERSECTION:
        return Box(max(a.x_min, b.x_min), max(a.y_min, b.y_min), min(a.x_max, b.x_max), min(a.y_max, b.y_max))
    return a


def consensus(
    a: EngineOutput,
    b: EngineOutput,
    image_id: str = "",
    image: Optional[ImageSize] = None,
    thr: float = MATCH_IOU,
    policy: BoxPolicy = BoxPolicy.ENGINE_A,
    source: str = "scene",
) -> ConsensusResult:
    policy = BoxPolicy(policy)
    image = image or ImageSize(1, 1)
    res = ConsensusResult()
    matched_a, matched_b = set(), set()
    for i, j, v in _mutual_pairs(a, b):
        if v < thr:
            res.discarded[(a.engine_id, DiscardReason.LOW_IOU)] += 1
            res.discarded[(b.engine_id, DiscardReason.LOW_IOU)] += 1
            matched_a.add(i)
            matched_b.add(j)
            continue
        matched_a.add(i)
        matched_b.add(j)
        (box_a, text_a), (box_b, text_b) = a.instances[i], b.instances[j]
        box = _merge_box(box_a, box_b, policy)
        if normalize_ws(text_a) == normalize_ws(text_b):
            res.agreed.append(TextInstance(image_id, image, box, text_a, source))
        else:
            res.disputed.append(Disputed(box_a, box_b, text_a, text_b, box))
    for engine, n, matched in ((a, len(a.instances), matched_a), (b, len(b.instances), matched_b)):
        missing = n - len(matched)
        if missing:
            res.discarded[(engine.engine_id, DiscardReason.NO_MUTUAL_MATCH)] += missing
    return res


def disputed_record(image_id: str, image: ImageSize, d: Disputed) -> dict:
    """One adjudication-queue line. ``verdict`` is left blank for the judge."""
    return {
        "image": image_id,
        "width": image.width,
        "height": image.height,
        "bbox": d.box.as_list(),
        "bbox_a": d.box_a.as_list(),
        "bbox_b": d.box_b.as_list(),
        "text_a": d.text_a,
        "text_b": d.text_b,
        "verdict": "",
    }


def export_adjudication_queue(records, path) -> int:
    """Write disputed-record dicts as JSONL; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n


def apply_verdict(rec: dict, line: int = 0, source: str = "scene") -> Optional[TextInstance]:
    """Resolve one adjudicated record; None when rejected or still pending."""
    verdict = rec.get("verdict", "")
    if not isinstance(verdict, str):
        raise MalformedVerdict(line, f"verdict must be a string, got {verdict!r}")
    verdict = verdict.strip()
    if verdict in ("", "reject"):
        return None
    if verdict == "accept_a":
        text = rec["text_a"]
    elif verdict == "accept_b":
        text = rec["text_b"]
    elif verdict.startswith("corrected:"):
        text = verdict[len("corrected:") :]
        if len(text) >= 2 and text[0] == text[-1] == '"':
            text = text[1:-1]
        if not normalize_ws(text):
            raise MalformedVerdict(line, "corrected transcript is empty")
    else:
        raise MalformedVerdict(line, f"unknown verdict {verdict!r}")
    return TextInstance(
        rec["image"],
        ImageSize(int(rec["width"]), int(rec["height"])),
        Box.from_list(rec["bbox"]),
        text,
        source,
    )


def import_adjudications(path, source: str = "scene") -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                inst = apply_verdict(rec, line_no, source)
            except MalformedVerdict:
                raise
            except (ValueError, KeyError, TypeError) as e:
                raise MalformedVerdict(line_no, f"bad record: {e}") from e
            if inst is not None:
                out.append(inst)
    return out
