"""De-stylized text masks rendered from (transcript, box) with standard fonts."""

import math
import os
import threading
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .geometry import Box, ImageSize

MIN_SIZE, MAX_SIZE = 1, 512
LATIN, CJK = "latin", "cjk"
FONTS_ENV = "TAKIT_FONTS"
# file names looked up inside $TAKIT_FONTS
FONT_FILES = {
    LATIN: ("Ubuntu-Regular.ttf", "Ubuntu-R.ttf"),
    CJK: ("NotoSansSC-Regular.otf", "NotoSansSC-Regular.ttf"),
}

_CJK_RANGES = (
    (0x3000, 0x303F),  # CJK symbols and punctuation
    (0x3400, 0x4DBF),  # extension A
    (0x4E00, 0x9FFF),  # unified ideographs
    (0xF900, 0xFAFF),  # compatibility ideographs
    (0xFF00, 0xFFEF),  # half/full-width forms
    (0x20000, 0x2FA1F),  # extensions B+ and compatibility supplement
)


class EmptyText(ValueError):
    pass


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def select_font(text: str) -> str:
    if not text:
        raise EmptyText("empty transcript")
    return CJK if any(is_cjk(c) for c in text) else LATIN


@dataclass
class BinaryMask:
    width: int
    height: int
    data: np.ndarray  # uint8, shape (height, width), values in {0, 1}

    def to_rle(self) -> list:
        return rle_encode(self.data)

    @classmethod
    def from_rle(cls, counts, width: int, height: int) -> "BinaryMask":
        return cls(width, height, rle_decode(counts, width, height))


def rle_encode(data: np.ndarray) -> list:
    """Row-major run lengths, alternating, starting with a (possibly empty) zero run."""
    flat = np.asarray(data, dtype=np.uint8).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(counts, width: int, height: int) -> np.ndarray:
    if sum(counts) != width * height:
        raise ValueError(f"RLE covers {sum(counts)} pixels, expected {width * height}")
    values = np.arange(len(counts)) % 2
    return np.repeat(values, counts).astype(np.uint8).reshape(height, width)


def to_pgm(mask: BinaryMask) -> bytes:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    return header + (mask.data * 255).astype(np.uint8).tobytes()


class GlyphRasterizer:
    """Renders a single line of text to a coverage bitmap.

    ``rasterize`` returns a float array in [0, 1] cropped to its tight
    foreground bounds, or an empty array when nothing was drawn.
    """

    def rasterize(self, text: str, font_id: str, size: int) -> np.ndarray:
        raise NotImplementedError

    def bounds(self, text: str, font_id: str, size: int):
        a = self.rasterize(text, font_id, size)
        return (a.shape[1], a.shape[0]) if a.size else (0, 0)


class BlockRasterizer(GlyphRasterizer):
    """Font-free stand-in: one solid block per non-space character.

    Deterministic and monotone in size, so CI never depends on font files.
    """

    def rasterize(self, text, font_id, size):
        adv = max(1, math.ceil(0.6 * size))
        ink = adv - adv // 5  # non-decreasing in adv, keeps bounds monotone in size
        canvas = np.zeros((size, adv * len(text)))
        for i, ch in enumerate(text):
            if not ch.isspace():
                canvas[:, i * adv : i * adv + ink] = 1.0
        return _crop(canvas)


class PilRasterizer(GlyphRasterizer):
    """FreeType rendering through Pillow.

    ``fonts`` maps font ids (``latin``/``cjk``) to font file paths; ids without a
    path fall back to Pillow's bundled default font.
    """

    def __init__(self, fonts=None):
        self.fonts = dict(fonts or {})
        self._cache = {}
        self._lock = threading.Lock()

    @classmethod
    def from_env(cls, fonts_dir=None) -> "PilRasterizer":
        fonts_dir = fonts_dir or os.environ.get(FONTS_ENV)
        fonts = {}
        if fonts_dir:
            for fid, names in FONT_FILES.items():
                for name in names:
                    p = os.path.join(fonts_dir, name)
                    if os.path.exists(p):
                        fonts[fid] = p
                        break
        return cls(fonts)

    def _font(self, font_id, size):
        key = (font_id, size)
        with self._lock:
            f = self._cache.get(key)
            if f is None:
                path = self.fonts.get(font_id)
                f = ImageFont.truetype(path, size) if path else ImageFont.load_default(size)
                self._cache[key] = f
        return f

    def rasterize(self, text, font_id, size):
        font = self._font(font_id, size)
        left, top, right, bottom = font.getbbox(text)
        w, h = max(1, right - left), max(1, bottom - top)
        img = Image.new("L", (w + 2, h + 2), 0)
        ImageDraw.Draw(img).text((1 - left, 1 - top), text, fill=255, font=font)
        return _crop(np.asarray(img, dtype=np.float64) / 255.0)


def _crop(a: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(a.max(axis=1) > 0) if a.size else []
    if len(rows) == 0:
        return np.zeros((0, 0))
    cols = np.flatnonzero(a.max(axis=0) > 0)
    return a[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def fit_font_size(text: str, box: Box, r: GlyphRasterizer, font_id=None):
    """Largest integer size in [1, 512] whose tight render fits the box.

    Returns ``(size, fits)``; ``fits`` is False when even size 1 overflows.
    """
    if not text:
        raise EmptyText("empty transcript")
    font_id = font_id or select_font(text)

    def fits(size):
        bw, bh = r.bounds(text, font_id, size)
        return bw <= box.width and bh <= box.height

    if not fits(MIN_SIZE):
        return MIN_SIZE, False
    lo, hi = MIN_SIZE, MAX_SIZE
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo, True


def box_pixels(box: Box, image: ImageSize):
    """Integer pixel extent (x0, y0, x1, y1) of a box, at least one pixel wide and tall."""
    x0 = min(max(int(math.floor(box.x_min + 0.5)), 0), image.width - 1)
    y0 = min(max(int(math.floor(box.y_min + 0.5)), 0), image.height - 1)
    x1 = min(max(int(math.floor(box.x_max + 0.5)), x0 + 1), image.width)
    y1 = min(max(int(math.floor(box.y_max + 0.5)), y0 + 1), image.height)
    return x0, y0, x1, y1


def render_destylized(text: str, box: Box, image: ImageSize, r: GlyphRasterizer) -> BinaryMask:
    if not text or not text.strip():
        raise EmptyText("empty transcript")
    font_id = select_font(text)
    size, _ = fit_font_size(text, box, r, font_id)
    glyphs = r.rasterize(text, font_id, size)
    mask = np.zeros((image.height, image.width), dtype=np.uint8)
    if glyphs.size == 0:
        return BinaryMask(image.width, image.height, mask)
    binary = (glyphs >= 0.5 * glyphs.max()).astype(np.uint8)
    x0, y0, x1, y1 = box_pixels(box, image)
    tw, th = x1 - x0, y1 - y0
    # nearest-neighbour stretch of the tight crop onto the box
    src_rows = np.minimum((np.arange(th) * binary.shape[0]) // th, binary.shape[0] - 1)
    src_cols = np.minimum((np.arange(tw) * binary.shape[1]) // tw, binary.shape[1] - 1)
    mask[y0:y1, x0:x1] = binary[np.ix_(src_rows, src_cols)]
    return BinaryMask(image.width, image.height, mask)
