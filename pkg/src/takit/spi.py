"""Stochastic prior injection: OCR-like noise on (box, text) priors.

A noise profile (box recall/precision, CER and its deletion/insertion shares)
is turned into probabilities for three corruption modes: drop the instance,
jitter its box, or corrupt its transcript. ``materialize_gamma`` then builds
the present (1.0), noisy (0.5) or absent (0.0) prior set for one sample.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .geometry import Box, DegenerateBox, ImageSize, iou
from .rng import Pcg32

JITTER_RATIO = (0.12, 0.17)
TEXT_CORRUPTION_RATIO = (0.2, 0.6)
DELETION_SHARE = 0.7256
JITTER_MAX_ATTEMPTS = 10
GAMMAS = (1.0, 0.5, 0.0)
ALIGN_IOU = 0.5


class SpiError(ValueError):
    pass


class ZeroWeightSum(SpiError):
    pass


class MissingRawPriors(SpiError):
    pass


class Mode(str, Enum):
    DEL = "del"
    JIT = "jit"
    TXT = "txt"


@dataclass(frozen=True)
class NoiseProfile:
    recall: float
    precision: float
    cer: float
    e_del_hat: float
    e_ins_hat: float

    def __post_init__(self):
        for name in ("recall", "precision", "cer", "e_del_hat", "e_ins_hat"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                raise SpiError(f"{name}={v!r} outside [0, 1]")
        if self.e_del_hat + self.e_ins_hat > 1.0 + 1e-12:
            raise SpiError("e_del_hat + e_ins_hat exceeds 1")

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseProfile":
        try:
            return cls(**{k: obj[k] for k in ("recall", "precision", "cer", "e_del_hat", "e_ins_hat")})
        except KeyError as e:
            raise SpiError(f"noise profile is missing {e.args[0]!r}") from None


@dataclass(frozen=True)
class ModeWeights:
    w_del: float
    w_jit: float
    w_txt: float


@dataclass(frozen=True)
class ModeProbs:
    p_del: float
    p_jit: float
    p_txt: float

    def draw(self, rng: Pcg32) -> Mode:
        u = rng.random()
        if u < self.p_del:
            return Mode.DEL
        if u < self.p_del + self.p_jit:
            return Mode.JIT
        # guards p_txt == 0 against rounding in p_del + p_jit
        return Mode.TXT if self.p_txt > 0 else (Mode.JIT if self.p_jit > 0 else Mode.DEL)


def derive_weights(np_: NoiseProfile) -> ModeWeights:
    return ModeWeights(
        w_del=1.0 - np_.recall,
        w_jit=1.0 - np_.precision,
        w_txt=np_.recall * np_.cer * (np_.e_del_hat + np_.e_ins_hat),
    )


def normalize_weights(w: ModeWeights) -> ModeProbs:
    if min(w.w_del, w.w_jit, w.w_txt) < 0:
        raise SpiError("mode weights must be non-negative")
    total = math.fsum((w.w_del, w.w_jit, w.w_txt))
    if total <= 0.0:
        raise ZeroWeightSum("all corruption-mode weights are zero")
    return ModeProbs(w.w_del / total, w.w_jit / total, w.w_txt / total)


def jitter_box(b: Box, image: ImageSize, rng: Pcg32, ratio: Optional[float] = None):
    """Move each edge independently by U[-rho, rho] times the box extent.

    rho ~ U[0.12, 0.17] once per box unless ``ratio`` is given. Returns
    ``(box, ok)``; ``ok`` is False when every attempt degenerated and the
    original box is returned unchanged.
    """
    rho = rng.uniform(*JITTER_RATIO) if ratio is None else ratio
    w, h = b.width, b.height
    for _ in range(JITTER_MAX_ATTEMPTS):
        dx0 = rng.uniform(-rho, rho) * w
        dx1 = rng.uniform(-rho, rho) * w
        dy0 = rng.uniform(-rho, rho) * h
        dy1 = rng.uniform(-rho, rho) * h
        try:
            out = Box(b.x_min + dx0, b.y_min + dy0, b.x_max + dx1, b.y_max + dy1).clamp(image)
        except DegenerateBox:
            continue
        return out, True
    return b, False


def text_budget(n: int, ratio: float):
    """(n_del, n_ins) for a transcript of length n at corruption ratio ``ratio``."""
    e = max(1, round(ratio * n))
    n_del = round(DELETION_SHARE * e)
    return n_del, e - n_del


def perturb_text(t: str, rng: Pcg32, ratio: Optional[float] = None) -> str:
    """Delete then insert characters; inserted characters come from t itself."""
    if not t:
        raise SpiError("cannot perturb an empty transcript")
    r = rng.uniform(*TEXT_CORRUPTION_RATIO) if ratio is None else ratio
    n_del, n_ins = text_budget(len(t), r)
    alphabet = list(t)
    chars = list(t)
    for _ in range(min(n_del, len(chars))):
        del chars[rng.bounded(len(chars))]
    for _ in range(n_ins):
        c = alphabet[rng.bounded(len(alphabet))]
        chars.insert(rng.bounded(len(chars) + 1), c)
    return "".join(chars)


def corrupt_instance(box: Box, text: str, probs: ModeProbs, image: ImageSize, rng: Pcg32, mode: Optional[Mode] = None):
    """Apply one drawn corruption mode; None means the instance was deleted."""
    mode = probs.draw(rng) if mode is None else Mode(mode)
    if mode is Mode.DEL:
        return None
    if mode is Mode.JIT:
        return jitter_box(box, image, rng)[0], text
    return box, perturb_text(text, rng)


@dataclass
class PriorSet:
    gamma: float
    priors: list  # (Box, text) pairs

    def __post_init__(self):
        if self.gamma not in GAMMAS:
            raise SpiError(f"gamma must be one of {GAMMAS}, got {self.gamma!r}")
        if self.gamma == 0.0 and self.priors:
            raise SpiError("gamma 0.0 prior set must be empty")


def _aligned(priors, gt, thr: float) -> list:
    """Flags priors that have a mutual-best GT box with IoU >= thr."""
    flags = [False] * len(priors)
    if not priors or not gt:
        return flags
    m = [[iou(p, g) for g, _ in gt] for p, _ in priors]
    for i, row in enumerate(m):
        j = max(range(len(row)), key=lambda k: (row[k], -k))
        col = [m[k][j] for k in range(len(priors))]
        best_i = max(range(len(col)), key=lambda k: (col[k], -k))
        if best_i == i and row[j] >= thr:
            flags[i] = True
    return flags


def materialize_gamma(
    instances,
    gamma: float,
    probs: ModeProbs,
    image: ImageSize,
    rng: Pcg32,
    raw_priors=None,
    scene: bool = False,
    align_iou: float = ALIGN_IOU,
) -> PriorSet:
    """Build the prior set for one sample.

    ``instances`` are ground-truth (box, text) pairs. Scene samples use the raw
    engine output as priors; at gamma 0.5 only the raw priors aligned to a GT
    box are eligible for corruption, the rest pass through untouched.
    """
    if gamma not in GAMMAS:
        raise SpiError(f"gamma must be one of {GAMMAS}, got {gamma!r}")
    instances = list(instances)
    if gamma == 0.0:
        return PriorSet(0.0, [])
    if scene and raw_priors is None:
        raise MissingRawPriors("scene samples need raw engine output")
    base = list(raw_priors) if scene else instances
    if gamma == 1.0:
        return PriorSet(1.0, base)
    eligible = _aligned(base, instances, align_iou) if scene else [True] * len(base)
    out = []
    for (box, text), can_corrupt in zip(base, eligible):
        if can_corrupt and rng.random() < 0.5:
            res = corrupt_instance(box, text, probs, image, rng)
            if res is not None:
                out.append(res)
        else:
            out.append((box, text))
    return PriorSet(0.5, out)
