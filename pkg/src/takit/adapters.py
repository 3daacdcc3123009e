"""Per-interface prompt rendering and prediction parsing.

Profiles are plain data: a name, a native coordinate convention, a T2R prompt
style and an output grammar. The five built-ins cover the interface families
the benchmark was run against; more can be loaded from a JSON file.
"""

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .bench import BenchQuery, Direction, T2R_TEMPLATE, R2T_TEMPLATE
from .geometry import Box, CoordConvention, DegenerateBox, GeometryError, ImageSize, from_canonical, to_canonical
from .textnorm import normalize_r2t


class PromptStyle(str, Enum):
    NATURAL_LANGUAGE = "NaturalLanguage"
    GROUNDING_TAGS = "GroundingTags"


class Grammar(str, Enum):
    JSON_BOXES = "JsonBoxes"
    GROUNDING_TAGS = "GroundingTags"
    RAW_TEXT = "RawText"


class ParseFailure(str, Enum):
    INVALID_JSON = "InvalidJson"
    MISSING_BOXES = "MissingBoxes"
    MALFORMED_NUMERIC = "MalformedNumeric"
    DEGENERATE_BOX = "DegenerateBox"


class ProfileError(ValueError):
    pass


DEFAULT_TAGS = ("<|det|>", "<|/det|>", "<|ref|>", "<|/ref|>")


@dataclass(frozen=True)
class InterfaceProfile:
    name: str
    coord: CoordConvention = CoordConvention.XYXY_ABS
    t2r_prompt_style: PromptStyle = PromptStyle.NATURAL_LANGUAGE
    parse_grammar: Grammar = Grammar.JSON_BOXES
    # (box-open, box-close, ref-open, ref-close)
    tags: tuple = DEFAULT_TAGS

    def __post_init__(self):
        object.__setattr__(self, "coord", CoordConvention(self.coord))
        object.__setattr__(self, "t2r_prompt_style", PromptStyle(self.t2r_prompt_style))
        object.__setattr__(self, "parse_grammar", Grammar(self.parse_grammar))
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(self.tags) != 4 or not all(isinstance(t, str) and t for t in self.tags):
            raise ProfileError(f"{self.name}: tags must be four non-empty strings")
        if self.t2r_prompt_style is PromptStyle.GROUNDING_TAGS and self.parse_grammar is not Grammar.GROUNDING_TAGS:
            raise ProfileError(f"{self.name}: GroundingTags prompts require the GroundingTags grammar")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "coord": self.coord.value,
            "t2r_prompt_style": self.t2r_prompt_style.value,
            "parse_grammar": self.parse_grammar.value,
            "tags": list(self.tags),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InterfaceProfile":
        try:
            return cls(**{k: obj[k] for k in obj if k in ("name", "coord", "t2r_prompt_style", "parse_grammar", "tags")})
        except (TypeError, ValueError) as e:
            raise ProfileError(f"bad profile {obj.get('name')!r}: {e}") from e


BUILTIN_PROFILES = {
    p.name: p
    for p in (
        InterfaceProfile("StandardXyxyAbs", CoordConvention.XYXY_ABS),
        InterfaceProfile("StandardXyxyRel1000", CoordConvention.XYXY_REL1000),
        InterfaceProfile("YxyxAbs", CoordConvention.YXYX_ABS),
        InterfaceProfile("Norm01", CoordConvention.XYXY_NORM01),
        InterfaceProfile(
            "GroundingTags",
            CoordConvention.XYXY_REL1000,
            PromptStyle.GROUNDING_TAGS,
            Grammar.GROUNDING_TAGS,
        ),
    )
}


def load_profiles(path) -> dict:
    """Read a JSON profile file (a list of profile objects, or ``{"profiles": [...]}``)."""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = data.get("profiles", [])
    if not isinstance(data, list):
        raise ProfileError("profile file must hold a list of profiles")
    return {p.name: p for p in (InterfaceProfile.from_json(o) for o in data)}


def get_profile(name: str, extra: Optional[dict] = None) -> InterfaceProfile:
    if extra and name in extra:
        return extra[name]
    try:
        return BUILTIN_PROFILES[name]
    except KeyError:
        raise ProfileError(f"unknown profile {name!r}") from None


def _fmt_native(values, conv: CoordConvention) -> list:
    if conv is CoordConvention.XYXY_NORM01:
        return [f"{v:.4f}" for v in values]
    if conv is CoordConvention.XYXY_REL1000:
        return [f"{v:.0f}" for v in values]
    return [f"{v:.1f}" for v in values]


def render_prompt(q: BenchQuery, p: InterfaceProfile) -> str:
    if q.direction is Direction.R2T:
        if p.coord is CoordConvention.XYXY_ABS:
            return q.prompt
        native = from_canonical(q.box, p.coord, q.image)
        return R2T_TEMPLATE.format(*_fmt_native(native, p.coord))
    if p.t2r_prompt_style is PromptStyle.GROUNDING_TAGS:
        ref_open, ref_close = p.tags[2], p.tags[3]
        return f"Locate {ref_open}{q.text}{ref_close} in the image."
    return q.prompt if q.prompt else T2R_TEMPLATE.format(q.text)


@dataclass
class ParsedPrediction:
    query_id: str
    boxes: list = field(default_factory=list)
    text: Optional[str] = None
    parse_ok: bool = True
    reason: Optional[ParseFailure] = None

    @classmethod
    def failed(cls, query_id: str, reason: ParseFailure) -> "ParsedPrediction":
        return cls(query_id, [], None, False, reason)


class _Fail(Exception):
    def __init__(self, reason: ParseFailure):
        self.reason = reason


_NUMBER = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")


def _number(v) -> float:
    if isinstance(v, bool):
        raise _Fail(ParseFailure.MALFORMED_NUMERIC)
    if isinstance(v, (int, float)):
        x = float(v)
    elif isinstance(v, str) and _NUMBER.fullmatch(v.strip()):
        x = float(v.strip())
    else:
        raise _Fail(ParseFailure.MALFORMED_NUMERIC)
    if not math.isfinite(x):
        raise _Fail(ParseFailure.MALFORMED_NUMERIC)
    return x


def _to_box(coords, conv: CoordConvention, image: ImageSize) -> Box:
    if not isinstance(coords, (list, tuple)) or len(coords) != 4:
        raise _Fail(ParseFailure.MALFORMED_NUMERIC)
    nums = [_number(v) for v in coords]
    try:
        return to_canonical(nums, conv, image)
    except DegenerateBox:
        raise _Fail(ParseFailure.DEGENERATE_BOX) from None
    except GeometryError:
        raise _Fail(ParseFailure.MALFORMED_NUMERIC) from None


_DECODER = json.JSONDecoder()


def first_json_value(raw: str):
    """First syntactically complete JSON array/object embedded in ``raw``."""
    for m in re.finditer(r"[\[{]", raw):
        try:
            value, _ = _DECODER.raw_decode(raw, m.start())
        except ValueError:
            continue
        return value
    raise _Fail(ParseFailure.INVALID_JSON)


def _json_elements(value) -> list:
    if isinstance(value, dict):
        for key in ("boxes", "results", "objects"):
            if isinstance(value.get(key), list):
                return value[key]
        return [value]
    return value


def _parse_json_boxes(raw: str, conv: CoordConvention, image: ImageSize):
    elements = _json_elements(first_json_value(raw))
    boxes, labels = [], []
    for el in elements:
        if not isinstance(el, dict) or "bbox_2d" not in el:
            raise _Fail(ParseFailure.MISSING_BOXES)
        boxes.append(_to_box(el["bbox_2d"], conv, image))
        if isinstance(el.get("label"), str):
            labels.append(el["label"])
    return boxes, labels


def _parse_tagged_boxes(raw: str, p: InterfaceProfile, image: ImageSize) -> list:
    box_open, box_close = p.tags[0], p.tags[1]
    spans = re.findall(re.escape(box_open) + r"(.*?)" + re.escape(box_close), raw, flags=re.S)
    if not spans:
        raise _Fail(ParseFailure.MISSING_BOXES)
    boxes = []
    for span in spans:
        stripped = re.sub(r"[\[\]\(\),\s]", " ", span)
        tokens = stripped.split()
        if not tokens or len(tokens) % 4:
            raise _Fail(ParseFailure.MALFORMED_NUMERIC)
        nums = [_number(t) for t in tokens]
        boxes.extend(_to_box(nums[i : i + 4], p.coord, image) for i in range(0, len(nums), 4))
    return boxes


def _r2t_text(raw: str, p: InterfaceProfile) -> str:
    if p.parse_grammar is Grammar.JSON_BOXES:
        try:
            value = first_json_value(raw)
        except _Fail:
            return raw
        if isinstance(value, dict):
            for key in ("text", "label", "answer"):
                if isinstance(value.get(key), str):
                    return value[key]
        if isinstance(value, list) and value and isinstance(value[0], dict):
            for key in ("text", "label"):
                if isinstance(value[0].get(key), str):
                    return value[0][key]
    return raw


def parse_prediction(query_id: str, raw, p: InterfaceProfile, direction, image: ImageSize) -> ParsedPrediction:
    """Parse one stored model output. Never raises: failures become empty predictions."""
    direction = Direction(direction)
    if not isinstance(raw, str):
        return ParsedPrediction.failed(query_id, ParseFailure.INVALID_JSON)
    try:
        if direction is Direction.R2T or p.parse_grammar is Grammar.RAW_TEXT:
            return ParsedPrediction(query_id, [], normalize_r2t(_r2t_text(raw, p)))
        if p.parse_grammar is Grammar.GROUNDING_TAGS:
            return ParsedPrediction(query_id, _parse_tagged_boxes(raw, p, image))
        boxes, _ = _parse_json_boxes(raw, p.coord, image)
        return ParsedPrediction(query_id, boxes)
    except _Fail as f:
        return ParsedPrediction.failed(query_id, f.reason)
    except (ValueError, TypeError, RecursionError, OverflowError):
        return ParsedPrediction.failed(query_id, ParseFailure.INVALID_JSON)


def echo_response(q: BenchQuery, p: InterfaceProfile) -> str:
    """What an ideal model would answer in the profile's native format (used for self-tests)."""
    if q.direction is Direction.R2T:
        return q.r2t_target
    native = [from_canonical(b, p.coord, q.image) for b in q.t2r_targets]
    if p.parse_grammar is Grammar.GROUNDING_TAGS:
        box_open, box_close, ref_open, ref_close = p.tags
        coords = ", ".join("[" + ", ".join(repr(v) for v in n) + "]" for n in native)
        return f"{ref_open}{q.text}{ref_close}{box_open}[{coords}]{box_close}"
    return json.dumps([{"bbox_2d": n, "label": q.text} for n in native], ensure_ascii=False)
