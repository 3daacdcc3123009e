"""Reference numerics for the causal query-driven mask decoder.

Only image and query hidden states reach the decoder; answer-token rows of the
backbone output are never read, so the predicted mask cannot depend on them.

Forward path::

    H_img, H_q  = rows of H_out
    Attn        = softmax((H_img Wq)(H_q Wk)^T / sqrt(d)) (H_q Wv)
    S           = ReLU(Attn W1 + b1) W2 + b2
    M~          = sigmoid(tconv2(ReLU(tconv1(reshape(S)))))

Both transposed convolutions use 4x4 kernels, stride 2, padding 1, so the mask
is 4h x 4w for an h x w token grid. Every forward function accepts optional
leading batch axes on inputs and parameters, which the gradient check uses to
evaluate all finite-difference probes in one vectorized pass.
"""

import json
import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

DICE_EPS = 1e-6
CE_CLAMP = 1e-7
KERNEL, STRIDE, PAD = 4, 2, 1
PARAMS_FORMAT = "takit.cqmd.params"


class CqmdError(ValueError):
    pass


class ShapeMismatch(CqmdError):
    pass


class GridMismatch(CqmdError):
    pass


class IndexOutOfRange(CqmdError):
    pass


class NonFiniteGradient(CqmdError):
    pass


class ParamsSchemaError(CqmdError):
    pass


@dataclass
class HiddenStates:
    h_out: np.ndarray  # (n + l + m, d)
    idx_img: np.ndarray
    idx_q: np.ndarray
    idx_a: np.ndarray

    def __post_init__(self):
        self.h_out = np.asarray(self.h_out, dtype=np.float64)
        self.idx_img, self.idx_q, self.idx_a = (np.asarray(i, dtype=np.int64).ravel() for i in (self.idx_img, self.idx_q, self.idx_a))
        rows = self.h_out.shape[0]
        allidx = np.concatenate([self.idx_img, self.idx_q, self.idx_a])
        if allidx.size and (allidx.min() < 0 or allidx.max() >= rows):
            raise IndexOutOfRange(f"index outside [0, {rows})")
        if allidx.size != rows or np.unique(allidx).size != rows:
            raise IndexOutOfRange("index sets must be disjoint and cover every row")

    @classmethod
    def contiguous(cls, h_out, n: int, l: int, m: int) -> "HiddenStates":
        return cls(h_out, np.arange(n), np.arange(n, n + l), np.arange(n + l, n + l + m))


def split_hidden(hs: HiddenStates):
    """(H_img, H_q, H_a) row gathers, each preserving its index order."""
    return hs.h_out[hs.idx_img], hs.h_out[hs.idx_q], hs.h_out[hs.idx_a]


@dataclass
class CqmdParams:
    w_query: np.ndarray  # (d, d)
    w_key: np.ndarray  # (d, d)
    w_value: np.ndarray  # (d, d)
    w1: np.ndarray  # (d, d_ff)
    b1: np.ndarray  # (d_ff,)
    w2: np.ndarray  # (d_ff, d)
    b2: np.ndarray  # (d,)
    k1: np.ndarray  # (d, d/2, 4, 4)  [in, out, ky, kx]
    c1: np.ndarray  # (d/2,)
    k2: np.ndarray  # (d/2, 1, 4, 4)
    c2: np.ndarray  # (1,)

    @property
    def d(self) -> int:
        return self.w_query.shape[-1]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[-1]

    def names(self):
        return [f.name for f in fields(self)]

    def arrays(self) -> dict:
        return {n: getattr(self, n) for n in self.names()}

    def expected_shapes(self) -> dict:
        d, f = self.d, self.d_ff
        h = d // 2
        return {
            "w_query": (d, d), "w_key": (d, d), "w_value": (d, d),
            "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
            "k1": (d, h, KERNEL, KERNEL), "c1": (h,),
            "k2": (h, 1, KERNEL, KERNEL), "c2": (1,),
        }  # fmt: skip

    def validate(self):
        if self.d < 2 or self.d % 2:
            raise ShapeMismatch(f"d={self.d} must be even and >= 2")
        for name, shape in self.expected_shapes().items():
            a = getattr(self, name)
            if a.shape != shape:
                raise ShapeMismatch(f"{name}: shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ShapeMismatch(f"{name}: non-finite entries")
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def unflatten(self, theta: np.ndarray) -> "CqmdParams":
        """Inverse of :meth:`flat`; ``theta`` may carry leading batch axes."""
        lead = theta.shape[:-1]
        out, pos = {}, 0
        for name, a in self.arrays().items():
            out[name] = theta[..., pos : pos + a.size].reshape(lead + a.shape)
            pos += a.size
        return CqmdParams(**out)

    @classmethod
    def random(cls, rng: np.random.Generator, d: int = 8, d_ff: int = 16) -> "CqmdParams":
        h = d // 2

        def w(shape, fan_in):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

        return cls(
            w_query=w((d, d), d), w_key=w((d, d), d), w_value=w((d, d), d),
            w1=w((d, d_ff), d), b1=w((d_ff,), d), w2=w((d_ff, d), d_ff), b2=w((d,), d_ff),
            k1=w((d, h, KERNEL, KERNEL), d * 4), c1=w((h,), d * 4),
            k2=w((h, 1, KERNEL, KERNEL), h * 4), c2=w((1,), h * 4),
        ).validate()  # fmt: skip

    @classmethod
    def zeros(cls, d: int = 8, d_ff: int = 16) -> "CqmdParams":
        p = cls.random(np.random.default_rng(0), d, d_ff)
        return cls(**{k: np.zeros_like(v) for k, v in p.arrays().items()})


# ---------------------------------------------------------------- forward


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_attention_shapes(h_img, h_q, p):
    d = p.w_query.shape[-1]
    if h_img.shape[-1] != d or h_q.shape[-1] != d:
        raise ShapeMismatch(f"hidden width {h_img.shape[-1]}/{h_q.shape[-1]} != d={d}")
    if h_q.shape[-2] < 1:
        raise ShapeMismatch("need at least one query token")


def cross_attention(h_img, h_q, p: CqmdParams, cache: Optional[dict] = None) -> np.ndarray:
    _check_attention_shapes(h_img, h_q, p)
    d = p.w_query.shape[-1]
    q = h_img @ p.w_query
    k = h_q @ p.w_key
    v = h_q @ p.w_value
    a = softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(d))
    out = a @ v
    if cache is not None:
        cache.update(h_img=h_img, h_q=h_q, q=q, k=k, v=v, a=a, attn=out)
    return out


def spatial_features(attn, p: CqmdParams, cache: Optional[dict] = None) -> np.ndarray:
    if attn.shape[-1] != p.w1.shape[-2]:
        raise ShapeMismatch(f"attn width {attn.shape[-1]} != W1 rows {p.w1.shape[-2]}")
    z1 = attn @ p.w1 + p.b1[..., None, :]
    r = np.maximum(z1, 0.0)
    s = r @ p.w2 + p.b2[..., None, :]
    if cache is not None:
        cache.update(z1=z1, r=r, s=s)
    return s


def tconv(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Stride-2, 4x4, padding-1 transposed convolution. x (..., C, H, W), k (..., C, O, 4, 4)."""
    *lead, _, hh, ww = x.shape
    o = k.shape[-3]
    t = np.einsum("...cyx,...cokl->...oyxkl", x, k)
    full = np.zeros(tuple(t.shape[:-5]) + (o, STRIDE * hh + 2, STRIDE * ww + 2))
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            full[..., ky : ky + STRIDE * hh : STRIDE, kx : kx + STRIDE * ww : STRIDE] += t[..., ky, kx]
    return full[..., PAD : PAD + STRIDE * hh, PAD : PAD + STRIDE * ww]


def tconv_backward(x: np.ndarray, k: np.ndarray, g: np.ndarray):
    """Gradients (dx, dk) of ``tconv(x, k)`` given upstream ``g``. Unbatched."""
    c, hh, ww = x.shape
    o = k.shape[1]
    full = np.zeros((o, STRIDE * hh + 2, STRIDE * ww + 2))
    full[:, PAD : PAD + STRIDE * hh, PAD : PAD + STRIDE * ww] = g
    dx = np.zeros_like(x)
    dk = np.zeros_like(k)
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            gk = full[:, ky : ky + STRIDE * hh : STRIDE, kx : kx + STRIDE * ww : STRIDE]  # (o, H, W)
            dx += np.einsum("co,oyx->cyx", k[:, :, ky, kx], gk)
            dk[:, :, ky, kx] = np.einsum("cyx,oyx->co", x, gk)
    return dx, dk


def sigmoid(x):
    # numerically safe for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode_mask(s, h: int, w: int, p: CqmdParams, cache: Optional[dict] = None) -> np.ndarray:
    """Reshape S (n x d, row-major grid) to d x h x w and upsample to a 4h x 4w probability map."""
    n, d = s.shape[-2], s.shape[-1]
    if n != h * w:
        raise GridMismatch(f"{n} tokens do not fill a {h}x{w} grid")
    if d != p.k1.shape[-4]:
        raise ShapeMismatch(f"feature width {d} != decoder input channels {p.k1.shape[-4]}")
    x0 = np.swapaxes(np.swapaxes(s.reshape(s.shape[:-2] + (h, w, d)), -1, -2), -2, -3)  # (..., d, h, w)
    y1 = tconv(x0, p.k1) + p.c1[..., :, None, None]
    r1 = np.maximum(y1, 0.0)
    y2 = tconv(r1, p.k2) + p.c2[..., :, None, None]
    m = sigmoid(y2)[..., 0, :, :]
    if cache is not None:
        cache.update(x0=x0, y1=y1, r1=r1, y2=y2, m=m)
    return m


def forward(h_img, h_q, grid, p: CqmdParams, cache: Optional[dict] = None):
    """Returns (S, M~)."""
    attn = cross_attention(h_img, h_q, p, cache)
    s = spatial_features(attn, p, cache)
    return s, decode_mask(s, grid[0], grid[1], p, cache)


def predict(hs: HiddenStates, grid, p: CqmdParams):
    h_img, h_q, _ = split_hidden(hs)
    return forward(h_img, h_q, grid, p)


# ---------------------------------------------------------------- losses


def _check_same(pred, gt):
    # leading batch axes on pred are allowed; the mask grid must agree
    if pred.ndim < 2 or pred.shape[-gt.ndim :] != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")


def dice_loss(pred, gt, eps: float = DICE_EPS):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_same(pred, gt)
    axes = (-2, -1)
    inter = (pred * gt).sum(axis=axes)
    return 1.0 - (2.0 * inter + eps) / (pred.sum(axis=axes) + gt.sum(axis=axes) + eps)


def ce_loss(pred, gt, clamp: float = CE_CLAMP):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_same(pred, gt)
    pc = np.clip(pred, clamp, 1.0 - clamp)
    return -(gt * np.log(pc) + (1.0 - gt) * np.log1p(-pc)).mean(axis=(-2, -1))


def mask_loss(pred, gt):
    return dice_loss(pred, gt) + ce_loss(pred, gt)


@dataclass
class LossTerms:
    l_ntp: float
    l_dice: float = 0.0
    l_ce: float = 0.0
    lambda_txt: float = 1.0
    lambda_seg: float = 1.0

    def __post_init__(self):
        if self.lambda_txt < 0 or self.lambda_seg < 0:
            raise CqmdError("loss weights must be non-negative")

    @property
    def l_mask(self) -> float:
        return self.l_dice + self.l_ce

    @property
    def l_ssa(self) -> float:
        return ssa_loss(self)


def ssa_loss(terms: LossTerms) -> float:
    return terms.lambda_txt * terms.l_ntp + terms.lambda_seg * terms.l_mask


def loss_terms(l_ntp: float, pred=None, gt=None, lambda_txt: float = 1.0, lambda_seg: float = 1.0) -> LossTerms:
    """Collect the loss terms of one sample; samples without a mask train on l_ntp only."""
    if gt is None:
        return LossTerms(l_ntp, lambda_txt=lambda_txt, lambda_seg=0.0)
    return LossTerms(l_ntp, float(dice_loss(pred, gt)), float(ce_loss(pred, gt)), lambda_txt, lambda_seg)


# ---------------------------------------------------------------- backward


def mask_loss_grad_wrt_pred(m, gt, eps: float = DICE_EPS, clamp: float = CE_CLAMP):
    inter = (m * gt).sum()
    num = 2.0 * inter + eps
    den = m.sum() + gt.sum() + eps
    d_dice = -(2.0 * gt * den - num) / den**2
    inside = (m > clamp) & (m < 1.0 - clamp)
    mc = np.clip(m, clamp, 1.0 - clamp)  # clamped region has zero gradient; avoid dividing by 0
    d_ce = np.where(inside, (-gt / mc + (1.0 - gt) / (1.0 - mc)) / m.size, 0.0)
    return d_dice + d_ce


def backward(cache: dict, gt, p: CqmdParams, dice_eps: float = DICE_EPS) -> CqmdParams:
    """Analytic gradient of l_mask with respect to every parameter (unbatched)."""
    m = cache["m"]
    dm = mask_loss_grad_wrt_pred(m, gt, eps=dice_eps)
    dy2 = (dm * m * (1.0 - m))[None]  # (1, 4h, 4w)
    dc2 = dy2.sum(axis=(1, 2))
    dr1, dk2 = tconv_backward(cache["r1"], p.k2, dy2)
    dy1 = dr1 * (cache["y1"] > 0)
    dc1 = dy1.sum(axis=(1, 2))
    dx0, dk1 = tconv_backward(cache["x0"], p.k1, dy1)
    ds = dx0.transpose(1, 2, 0).reshape(cache["s"].shape)  # (d, h, w) -> (n, d)
    db2 = ds.sum(axis=0)
    dw2 = cache["r"].T @ ds
    dz1 = (ds @ p.w2.T) * (cache["z1"] > 0)
    db1 = dz1.sum(axis=0)
    dw1 = cache["attn"].T @ dz1
    dattn = dz1 @ p.w1.T
    a, v, q, k = cache["a"], cache["v"], cache["q"], cache["k"]
    dv = a.T @ dattn
    da = dattn @ v.T
    dlogits = a * (da - (da * a).sum(axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(p.d)
    dq = dlogits @ k * scale
    dk = dlogits.T @ q * scale
    h_img, h_q = cache["h_img"], cache["h_q"]
    return CqmdParams(
        w_query=h_img.T @ dq, w_key=h_q.T @ dk, w_value=h_q.T @ dv,
        w1=dw1, b1=db1, w2=dw2, b2=db2, k1=dk1, c1=dc1, k2=dk2, c2=dc2,
    )  # fmt: skip


def mask_loss_and_grad(h_img, h_q, grid, gt, p: CqmdParams, dice_eps: float = DICE_EPS):
    cache = {}
    _, m = forward(h_img, h_q, grid, p, cache)
    return float(mask_loss(m, gt)), backward(cache, gt, p, dice_eps)


# ---------------------------------------------------------------- checks


def causal_independence_check(hs: HiddenStates, grid, p: CqmdParams, rng: Optional[np.random.Generator] = None) -> bool:
    """True iff overwriting every answer row with random values leaves S and M~ bit-identical."""
    rng = rng or np.random.default_rng(0)
    s0, m0 = predict(hs, grid, p)
    h2 = hs.h_out.copy()
    if hs.idx_a.size:
        h2[hs.idx_a] = rng.normal(0.0, 10.0, size=(hs.idx_a.size, h2.shape[1]))
    s1, m1 = predict(HiddenStates(h2, hs.idx_img, hs.idx_q, hs.idx_a), grid, p)
    return bool(np.array_equal(s0, s1) and np.array_equal(m0, m1))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_grad(h_img, h_q, grid, gt, p: CqmdParams, step: float = 1e-6) -> np.ndarray:
    """Central differences of l_mask over the flat parameter vector, all probes in one batch."""
    theta = p.flat()
    n = theta.size
    hstep = step * np.maximum(1.0, np.abs(theta))
    probes = np.repeat(theta[None, :], 2 * n, axis=0)
    idx = np.arange(n)
    probes[idx, idx] += hstep
    probes[n + idx, idx] -= hstep
    _, m = forward(h_img, h_q, grid, p.unflatten(probes))
    losses = mask_loss(m, gt)
    return (losses[:n] - losses[n:]) / (2.0 * hstep)


def grad_check(p: CqmdParams, h_img, h_q, grid, gt, dice_eps: float = DICE_EPS, step: float = 1e-6) -> float:
    """Max relative error between analytic and finite-difference parameter gradients.

    ``dice_eps`` only affects the analytic side, so passing a wrong value is a
    mutation test of the check itself.
    """
    _, g = mask_loss_and_grad(h_img, h_q, grid, gt, p, dice_eps)
    analytic = g.flat()
    numeric = numeric_grad(h_img, h_q, grid, gt, p, step)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NonFiniteGradient("gradient contains NaN or inf")
    return float(relative_error(analytic, numeric).max())


@dataclass
class ReferenceConfig:
    h: int = 4
    w: int = 4
    l: int = 3
    m: int = 4
    d: int = 8
    d_ff: int = 16

    @property
    def n(self) -> int:
        return self.h * self.w


def random_case(seed: int, cfg: ReferenceConfig = ReferenceConfig()):
    """Random (HiddenStates, params, gt mask) at the reference configuration.

    Token rows are interleaved by a random permutation so index sets are not
    contiguous.
    """
    rng = np.random.default_rng(seed)
    total = cfg.n + cfg.l + cfg.m
    perm = rng.permutation(total)
    hs = HiddenStates(
        rng.normal(size=(total, cfg.d)),
        perm[: cfg.n],
        perm[cfg.n : cfg.n + cfg.l],
        perm[cfg.n + cfg.l :],
    )
    p = CqmdParams.random(rng, cfg.d, cfg.d_ff)
    gt = (rng.random((4 * cfg.h, 4 * cfg.w)) < 0.3).astype(np.float64)
    return hs, p, gt


# ---------------------------------------------------------------- serialization


def _array_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]}


def _array_from_json(name: str, obj) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.asarray(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise ParamsSchemaError(f"{name}: bad array record ({e})") from None
    if data.ndim != 1 or data.size != math.prod(shape):
        raise ParamsSchemaError(f"{name}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def params_to_json(p: CqmdParams, golden: Optional[dict] = None) -> dict:
    doc = {
        "format": PARAMS_FORMAT,
        "version": 1,
        "d": p.d,
        "d_ff": p.d_ff,
        "arrays": {k: _array_json(v) for k, v in p.arrays().items()},
    }
    if golden is not None:
        doc["golden"] = {k: (_array_json(v) if isinstance(v, np.ndarray) else v) for k, v in golden.items()}
    return doc


def params_from_json(doc) -> tuple:
    """Returns (params, golden-or-None). Raises ParamsSchemaError on any schema problem."""
    if not isinstance(doc, dict) or doc.get("format") != PARAMS_FORMAT:
        raise ParamsSchemaError(f"not a {PARAMS_FORMAT} document")
    arrays = doc.get("arrays")
    names = [f.name for f in fields(CqmdParams)]
    if not isinstance(arrays, dict) or set(arrays) != set(names):
        raise ParamsSchemaError(f"arrays must be exactly {names}")
    try:
        p = CqmdParams(**{n: _array_from_json(n, arrays[n]) for n in names}).validate()
    except ShapeMismatch as e:
        raise ParamsSchemaError(str(e)) from None
    golden = doc.get("golden")
    if golden is not None:
        try:
            golden = {
                "grid": [int(v) for v in golden["grid"]],
                "h_img": _array_from_json("h_img", golden["h_img"]),
                "h_q": _array_from_json("h_q", golden["h_q"]),
                "mask": _array_from_json("mask", golden["mask"]),
            }
        except (KeyError, TypeError, ValueError) as e:
            raise ParamsSchemaError(f"bad golden section ({e})") from None
    return p, golden


def save_params(path, p: CqmdParams, golden: Optional[dict] = None):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(params_to_json(p, golden), f)


def load_params(path):
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, ValueError) as e:
        raise ParamsSchemaError(f"cannot read params file: {e}") from None
    return params_from_json(doc)
