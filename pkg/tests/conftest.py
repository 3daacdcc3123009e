import json
import random

import pytest

from takit.bench import CATEGORIES, RELEASED_QUOTAS

WORDS = ["EXIT", "STOP", "Hello", "入库", "价格", "SALE", "Total", "日期", "Open", "No.5", "KS-SYSTEM", "用水年月"]


def synthetic_pool(seed=0, images_per_category=None, items=(3, 9), width=640, height=480):
    """Annotation pool records (one dict per image) with some repeated strings per image."""
    rnd = random.Random(seed)
    recs = []
    for cat in CATEGORIES:
        n_img = (images_per_category or {}).get(cat, 10)
        for i in range(n_img):
            k = rnd.randint(*items)
            its = []
            for j in range(k):
                # lay boxes on a coarse grid so same-string duplicates do not overlap
                x, y = (j % 5) * 120 + 4, (j // 5) * 40 + 4
                its.append({"bbox": [x, y, x + rnd.randint(20, 110), y + rnd.randint(10, 35)], "text": rnd.choice(WORDS) + ("" if rnd.random() < 0.6 else str(j))})
            recs.append({"image": f"{cat}_{i:04d}", "width": width, "height": height, "category": cat, "source": "synthetic", "items": its})
    return recs


def release_scale_pool(seed=0):
    """Large enough that every released quota is satisfiable in both directions."""
    sizes = {cat: RELEASED_QUOTAS[cat] // 2 + 5 for cat in CATEGORIES}
    return synthetic_pool(seed, sizes, items=(4, 10))


def write_jsonl(path, recs):
    with open(path, "w", encoding="utf-8") as f:
        for r in recs:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")
    return path


@pytest.fixture
def pool_file(tmp_path):
    return write_jsonl(tmp_path / "pool.jsonl", synthetic_pool(1))
