"""JSONL record schemas shared by the command-line tools.

Every reader is a generator, so files are processed one line at a time.
Schema problems raise :class:`SchemaError` carrying the line number and field.
"""

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from itertools import islice

from .bench import CATEGORIES, Annotation
from .geometry import Box, DegenerateBox, GeometryError, ImageSize


class SchemaError(ValueError):
    def __init__(self, path, line, field, msg):
        self.path, self.line, self.field = path, line, field
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: field {field!r}: {msg}" if field else f"{where}: {msg}")


def iter_jsonl(path):
    """Yields (line_number, object) for every non-blank line."""
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise SchemaError(path, line_no, None, f"invalid JSON ({e})") from None
            if not isinstance(obj, dict):
                raise SchemaError(path, line_no, None, "record must be a JSON object")
            yield line_no, obj


def dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def _require(obj, key, path, line):
    if key not in obj:
        raise SchemaError(path, line, key, "missing")
    return obj[key]


def read_image_size(obj, path, line) -> ImageSize:
    w, h = _require(obj, "width", path, line), _require(obj, "height", path, line)
    for k, v in (("width", w), ("height", h)):
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise SchemaError(path, line, k, f"must be a positive integer, got {v!r}")
    return ImageSize(w, h)


def read_box(value, path, line, field="bbox") -> Box:
    if not isinstance(value, list) or len(value) != 4:
        raise SchemaError(path, line, field, "must be a list of 4 numbers")
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise SchemaError(path, line, field, f"non-numeric coordinate {v!r}")
    return Box.from_list(value)  # DegenerateBox propagates to the caller


def read_text(obj, path, line, field="text") -> str:
    t = _require(obj, field, path, line)
    if not isinstance(t, str):
        raise SchemaError(path, line, field, "must be a string")
    return t


def read_items(obj, path, line):
    """(Box-or-None, text) pairs from an ``items`` list; degenerate boxes come back as None."""
    items = _require(obj, "items", path, line)
    if not isinstance(items, list):
        raise SchemaError(path, line, "items", "must be a list")
    out = []
    for k, it in enumerate(items):
        if not isinstance(it, dict):
            raise SchemaError(path, line, f"items[{k}]", "must be an object")
        text = read_text(it, path, line, "text")
        try:
            box = read_box(_require(it, "bbox", path, line), path, line, f"items[{k}].bbox")
        except DegenerateBox:
            box = None
        except GeometryError as e:
            raise SchemaError(path, line, f"items[{k}].bbox", str(e)) from None
        out.append((box, text))
    return out


def read_image_id(obj, path, line) -> str:
    v = _require(obj, "image", path, line)
    if not isinstance(v, str) or not v:
        raise SchemaError(path, line, "image", "must be a non-empty string")
    return v


def iter_annotations(path, log=None):
    """Annotation pool: one image per line with category, source and items."""
    for line, obj in iter_jsonl(path):
        image_id = read_image_id(obj, path, line)
        image = read_image_size(obj, path, line)
        cat = _require(obj, "category", path, line)
        if cat not in CATEGORIES:
            raise SchemaError(path, line, "category", f"unknown category {cat!r}")
        source = obj.get("source", "")
        for idx, (box, text) in enumerate(read_items(obj, path, line)):
            if box is None:
                if log:
                    log.warning("%s:%d item %d: degenerate box dropped", path, line, idx)
                continue
            if not text.strip():
                if log:
                    log.warning("%s:%d item %d: empty transcript dropped", path, line, idx)
                continue
            yield Annotation(image_id, image, box, text, cat, source, idx)


def read_priors(value, path, line, field):
    if not isinstance(value, list):
        raise SchemaError(path, line, field, "must be a list of {bbox, text}")
    out = []
    for k, it in enumerate(value):
        if not isinstance(it, dict):
            raise SchemaError(path, line, f"{field}[{k}]", "must be an object")
        try:
            box = read_box(_require(it, "bbox", path, line), path, line, f"{field}[{k}].bbox")
        except GeometryError as e:
            raise SchemaError(path, line, f"{field}[{k}].bbox", str(e)) from None
        out.append((box, read_text(it, path, line)))
    return out


def priors_json(priors) -> list:
    return [{"bbox": b.as_list(), "text": t} for b, t in priors]


def ordered_map(fn, items, threads: int = 1, chunk: int = 512):
    """Lazy map preserving input order; at most ``chunk`` items are in flight."""
    if threads <= 1:
        yield from map(fn, items)
        return
    it = iter(items)
    with ThreadPoolExecutor(max_workers=threads) as ex:
        while True:
            block = list(islice(it, chunk))
            if not block:
                return
            yield from ex.map(fn, block)
