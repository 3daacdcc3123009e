"""Text normalization for T2R merging, R2T scoring and consensus comparison."""

import re
import unicodedata

ZERO_WIDTH = "​‌‍﻿"
_ZW_TABLE = {ord(c): None for c in ZERO_WIDTH}

# Full-width / CJK punctuation -> ASCII, applied after NFKC for R2T scoring.
# Version 1. NFKC already folds most full-width forms (，：；！？（）); the
# entries are kept so the table is self-describing when exported.
R2T_PUNCT_TABLE_VERSION = 1
R2T_PUNCT_TABLE = {
    "，": ",",  # ，
    "。": ".",  # 。
    "：": ":",  # ：
    "；": ";",  # ；
    "！": "!",  # ！
    "？": "?",  # ？
    "（": "(",  # （
    "）": ")",  # ）
    "【": "[",  # 【
    "】": "]",  # 】
    "“": '"',  # “
    "”": '"',  # ”
    "‘": "'",  # ‘
    "’": "'",  # ’
    "、": ",",  # 、
}
_R2T_TRANS = {ord(k): v for k, v in R2T_PUNCT_TABLE.items()}
_R2T_TRANS.update(_ZW_TABLE)

_WS_RUN = re.compile(r"\s+")


def _is_stripped_for_t2r(ch: str) -> bool:
    if ch.isspace() or ch in ZERO_WIDTH:
        return True
    if "　" <= ch <= "〿":
        return True
    return unicodedata.category(ch).startswith("P")


def canonicalize_t2r(s: str) -> str:
    """Merge key for T2R queries: NFKC, then drop whitespace, punctuation and zero-width chars.

    Dropping characters can expose a new NFKC composition (e.g. a combining mark
    that followed a removed space), so the two steps are repeated to a fixed point.
    """
    out = s
    while True:
        nxt = "".join(ch for ch in unicodedata.normalize("NFKC", out) if not _is_stripped_for_t2r(ch))
        if nxt == out:
            return out
        out = nxt


def normalize_ws(s: str) -> str:
    """Collapse whitespace runs to one ASCII space and trim. Case and punctuation untouched."""
    return _WS_RUN.sub(" ", s).strip()


def normalize_r2t(s: str) -> str:
    """Reading-accuracy normalization: NFKC, CJK punctuation table, zero-width removal, whitespace collapse."""
    out = s
    while True:
        nxt = normalize_ws(unicodedata.normalize("NFKC", out).translate(_R2T_TRANS))
        if nxt == out:
            return out
        out = nxt


def export_punct_table_tsv() -> str:
    """The R2T punctuation table as two-column UTF-8 TSV (source, replacement)."""
    lines = [f"# takit r2t punctuation table v{R2T_PUNCT_TABLE_VERSION}"]
    lines += [f"{src}\t{dst}" for src, dst in R2T_PUNCT_TABLE.items()]
    return "\n".join(lines) + "\n"
