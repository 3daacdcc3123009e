"""Command-line entry point: ``takit <command> ...``.

Exit codes: 0 success, 1 a check or threshold failed, 2 bad input or schema.
Options resolve as command-line flag, then the ``--config`` JSON file section
for the command, then the built-in default. Effective values are echoed into
every report the command writes.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .adapters import ProfileError, get_profile, load_profiles, parse_prediction, BUILTIN_PROFILES
from .bench import BenchError, BenchQuery, CATEGORIES, QuotaSpec, sample_benchmark
from .consensus import (
    BoxPolicy,
    DiscardReason,
    EngineOutput,
    MalformedVerdict,
    consensus,
    disputed_record,
    import_adjudications,
)
from .cqmd import (
    CqmdParams,
    ParamsSchemaError,
    ReferenceConfig,
    causal_independence_check,
    decode_mask,
    forward,
    grad_check,
    load_params,
    random_case,
    save_params,
    softmax,
    split_hidden,
)
from .evaluator import DuplicateQueryId, aggregate, score_query
from .geometry import DegenerateBox
from .maskrender import BlockRasterizer, EmptyText, PilRasterizer, render_destylized, to_pgm
from .records import (
    SchemaError,
    dumps,
    file_digest,
    iter_annotations,
    iter_jsonl,
    ordered_map,
    priors_json,
    read_box,
    read_image_id,
    read_image_size,
    read_items,
    read_priors,
    read_text,
)
from .rng import Pcg32
from .spi import GAMMAS, MissingRawPriors, NoiseProfile, SpiError, derive_weights, materialize_gamma, normalize_weights
from .textnorm import export_punct_table_tsv

log = logging.getLogger("takit")

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2

DEFAULTS = {
    "gen-bench": {"seed": 42, "quota": "released", "threads": 1},
    "eval": {"profile": "StandardXyxyAbs", "iou": 0.5, "profiles": None},
    "consensus": {"iou": 0.7, "box_policy": "a", "allow_partial": False, "threads": 1, "source": "scene"},
    "spi": {"seed": 42, "threads": 1, "align_iou": 0.5},
    "render-masks": {"rasterizer": "pil", "fonts": None, "export_pgm": None, "threads": 1},
    "cqmd-selftest": {"seed": 0, "seeds": 3, "causal_draws": 100, "tolerance": 1e-5},
}


class InputError(Exception):
    """Bad user input; reported and mapped to exit code 2."""


def resolve(args, command: str, config: dict) -> dict:
    section = config.get(command, {}) if config else {}
    if not isinstance(section, dict):
        raise InputError(f"config section {command!r} must be an object")
    out = {}
    for key, default in DEFAULTS.get(command, {}).items():
        cli = getattr(args, key, None)
        out[key] = cli if cli is not None else section.get(key, default)
    return out


def _load_json(path, what):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise InputError(f"cannot read {what} {path}: {e}") from None
    except ValueError as e:
        raise InputError(f"{what} {path} is not valid JSON: {e}") from None


# ---------------------------------------------------------------- gen-bench


def cmd_gen_bench(args, cfg) -> int:
    quota_arg = cfg["quota"]
    try:
        quota = QuotaSpec.released() if quota_arg == "released" else QuotaSpec.from_json(_load_json(quota_arg, "quota file"))
    except BenchError as e:
        raise InputError(str(e)) from None
    counts = {}
    queries = sample_benchmark(iter_annotations(args.pool, log), quota, int(cfg["seed"]), counts)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("[\n")
        f.write(",\n".join(dumps(q.to_json()) for q in queries))
        f.write("\n]\n" if queries else "]\n")
    print(f"{'category':<16} {'quota':>6} {'R2T':>6} {'T2R':>6}")
    for cat in CATEGORIES:
        if cat in quota.per_category:
            k = counts.get(cat, 0)
            print(f"{cat:<16} {quota.per_category[cat]:>6} {k:>6} {k:>6}")
    print(f"{'total':<16} {'':>6} {sum(counts.values()):>6} {sum(counts.values()):>6}  ({len(queries)} queries)")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def load_bench(path) -> list:
    data = _load_json(path, "benchmark")
    if not isinstance(data, list):
        raise InputError(f"{path}: benchmark must be a JSON array")
    out, seen = [], set()
    for i, rec in enumerate(data):
        try:
            q = BenchQuery.from_json(rec)
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"{path}: query #{i}: {e}") from None
        if q.query_id in seen:
            raise InputError(f"{path}: duplicate query_id {q.query_id!r}")
        seen.add(q.query_id)
        out.append(q)
    return out


def load_predictions(path) -> dict:
    preds = {}
    for line, obj in iter_jsonl(path):
        qid = obj.get("query_id")
        if not isinstance(qid, str):
            raise SchemaError(path, line, "query_id", "must be a string")
        if qid in preds:
            raise InputError(f"{path}:{line}: duplicate query_id {qid!r}")
        raw = obj.get("raw_output")
        if raw is not None and not isinstance(raw, str):
            raise SchemaError(path, line, "raw_output", "must be a string")
        preds[qid] = raw
    return preds


def evaluate(queries, predictions: dict, profile, thr: float = 0.5):
    """Parse and score every query; queries without a prediction score as empty."""
    results = []
    for q in queries:
        raw = predictions.get(q.query_id)
        pred = None if raw is None else parse_prediction(q.query_id, raw, profile, q.direction, q.image)
        results.append(score_query(q, pred, thr))
    return aggregate(results)


def cmd_eval(args, cfg) -> int:
    try:
        extra = load_profiles(cfg["profiles"]) if cfg["profiles"] else None
        profile = get_profile(cfg["profile"], extra)
    except (ProfileError, OSError, ValueError) as e:
        raise InputError(str(e)) from None
    queries = load_bench(args.bench)
    preds = load_predictions(args.predictions)
    unknown = set(preds) - {q.query_id for q in queries}
    if unknown:
        log.warning("%d predictions refer to unknown query ids and are ignored", len(unknown))
    try:
        report = evaluate(queries, preds, profile, float(cfg["iou"]))
    except DuplicateQueryId as e:
        raise InputError(f"duplicate query_id {e}") from None
    doc = {
        "tool": "takit",
        "version": __version__,
        "inputs": {"bench": file_digest(args.bench), "predictions": file_digest(args.predictions)},
        "config": {**cfg, "profile_def": profile.to_json()},
        "report": report.to_json(),
    }
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=False, indent=2)
        f.write("\n")
    print(
        f"Acc_R2T {report.acc_r2t:.2f}  P_T2R {report.precision_t2r:.2f}  R_T2R {report.recall_t2r:.2f}  "
        f"F1_T2R {report.f1_t2r:.2f}  Overall {report.overall:.2f}"
    )
    return EXIT_OK


# ---------------------------------------------------------------- consensus


def _engine_records(path):
    for line, obj in iter_jsonl(path):
        image_id = read_image_id(obj, path, line)
        image = read_image_size(obj, path, line)
        items = [(b, t) for b, t in read_items(obj, path, line) if b is not None]
        yield image_id, image, items


def _paired_images(path_a, path_b, allow_partial: bool, skipped: dict):
    """Join two engine files on image id.

    Strict mode requires the same image sequence. With ``allow_partial`` both
    files must be sorted by image id and unmatched images are skipped.
    """
    it_a, it_b = _engine_records(path_a), _engine_records(path_b)
    a, b = next(it_a, None), next(it_b, None)
    last_a = last_b = None
    while a is not None or b is not None:
        if a is not None and b is not None and a[0] == b[0]:
            if a[1] != b[1]:
                raise InputError(f"image {a[0]!r}: engines disagree on image size")
            yield a, b
            last_a, last_b = a[0], b[0]
            a, b = next(it_a, None), next(it_b, None)
            continue
        if not allow_partial:
            ida = a[0] if a else None
            idb = b[0] if b else None
            raise InputError(f"image_id mismatch between engine files: {ida!r} vs {idb!r} (use --allow-partial)")
        for cur, last in ((a, last_a), (b, last_b)):
            if cur is not None and last is not None and cur[0] < last:
                raise InputError("--allow-partial needs both engine files sorted by image id")
        if b is None or (a is not None and a[0] < b[0]):
            skipped["A"] += 1
            last_a = a[0]
            a = next(it_a, None)
        else:
            skipped["B"] += 1
            last_b = b[0]
            b = next(it_b, None)


def cmd_consensus(args, cfg) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    thr = float(cfg["iou"])
    try:
        policy = BoxPolicy(cfg["box_policy"])
    except ValueError:
        raise InputError(f"unknown box policy {cfg['box_policy']!r}") from None
    skipped = {"A": 0, "B": 0}
    totals = {"images": 0, "instances_a": 0, "instances_b": 0, "agreed": 0, "disputed": 0}
    discarded = {"A": {r.value: 0 for r in DiscardReason}, "B": {r.value: 0 for r in DiscardReason}}

    def work(pair):
        (image_id, image, items_a), (_, _, items_b) = pair
        res = consensus(
            EngineOutput("A", items_a),
            EngineOutput("B", items_b),
            image_id,
            image,
            thr,
            policy,
            cfg["source"],
        )
        return image_id, image, len(items_a), len(items_b), res

    pairs = _paired_images(args.engine_a, args.engine_b, bool(cfg["allow_partial"]), skipped)
    with open(os.path.join(args.out_dir, "agreed.jsonl"), "w", encoding="utf-8") as fa, open(
        os.path.join(args.out_dir, "disputed.jsonl"), "w", encoding="utf-8"
    ) as fd:
        for image_id, image, na, nb, res in ordered_map(work, pairs, int(cfg["threads"])):
            totals["images"] += 1
            totals["instances_a"] += na
            totals["instances_b"] += nb
            totals["agreed"] += len(res.agreed)
            totals["disputed"] += len(res.disputed)
            for (engine, reason), n in res.discarded.items():
                discarded[engine][reason.value] += n
            for inst in res.agreed:
                fa.write(dumps(inst.to_json()) + "\n")
            for d in res.disputed:
                fd.write(dumps(disputed_record(image_id, image, d)) + "\n")
    pairs_matched = totals["agreed"] + totals["disputed"]
    stats = {
        **totals,
        "matched_pairs": pairs_matched,
        "discarded": discarded,
        "reasons": {
            "NoMutualMatch": discarded["A"]["NoMutualMatch"] + discarded["B"]["NoMutualMatch"],
            "LowIoU": discarded["A"]["LowIoU"] + discarded["B"]["LowIoU"],
            "TranscriptMismatch": totals["disputed"],
        },
        "acceptance_rate": totals["agreed"] / pairs_matched if pairs_matched else 0.0,
        "agreed_rate_a": totals["agreed"] / totals["instances_a"] if totals["instances_a"] else 0.0,
        "agreed_rate_b": totals["agreed"] / totals["instances_b"] if totals["instances_b"] else 0.0,
        "skipped_images": skipped,
        "config": {k: v for k, v in cfg.items() if k != "threads"},
        "inputs": {"engine_a": file_digest(args.engine_a), "engine_b": file_digest(args.engine_b)},
        "version": __version__,
    }
    with open(os.path.join(args.out_dir, "stats.json"), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    print(
        f"{totals['images']} images: {totals['agreed']} agreed, {totals['disputed']} disputed, "
        f"acceptance {100 * stats['acceptance_rate']:.1f}%"
    )
    return EXIT_OK


def cmd_adjudicate(args, cfg) -> int:
    try:
        resolved = import_adjudications(args.verdicts)
    except MalformedVerdict as e:
        raise InputError(f"{args.verdicts}: {e}") from None
    with open(args.out, "w", encoding="utf-8") as f:
        for inst in resolved:
            f.write(dumps(inst.to_json()) + "\n")
    print(f"{len(resolved)} instances resolved")
    return EXIT_OK


# ---------------------------------------------------------------- spi


def _is_scene(source: str) -> bool:
    return source.lower().startswith("scene")


def cmd_spi(args, cfg) -> int:
    try:
        gamma = float(args.gamma)
    except ValueError:
        raise InputError(f"invalid gamma {args.gamma!r}") from None
    if gamma not in GAMMAS:
        raise InputError(f"gamma must be one of {GAMMAS}, got {args.gamma}")
    try:
        noise = NoiseProfile.from_json(_load_json(args.profile, "noise profile"))
        probs = normalize_weights(derive_weights(noise))
    except SpiError as e:
        raise InputError(str(e)) from None
    seed = int(cfg["seed"])
    align = float(cfg["align_iou"])
    path = args.instances

    def work(entry):
        index, (line, obj) = entry
        image = read_image_size(obj, path, line)
        read_image_id(obj, path, line)
        text = read_text(obj, path, line)
        try:
            box = read_box(obj.get("bbox"), path, line)
        except DegenerateBox as e:
            raise SchemaError(path, line, "bbox", str(e)) from None
        source = obj.get("source", "")
        raw = obj.get("raw_priors")
        raw = read_priors(raw, path, line, "raw_priors") if raw is not None else None
        try:
            ps = materialize_gamma(
                [(box, text)],
                gamma,
                probs,
                image,
                Pcg32.for_record(seed, index),
                raw_priors=raw,
                scene=_is_scene(source),
                align_iou=align,
            )
        except MissingRawPriors as e:
            raise SchemaError(path, line, "raw_priors", str(e)) from None
        out = dict(obj)
        out["priors"] = priors_json(ps.priors)
        return out

    n = 0
    with open(args.out, "w", encoding="utf-8") as f:
        for rec in ordered_map(work, enumerate(iter_jsonl(path)), int(cfg["threads"])):
            f.write(dumps(rec) + "\n")
            n += 1
    print(f"{n} records, gamma={gamma}, p_del={probs.p_del:.3f} p_jit={probs.p_jit:.3f} p_txt={probs.p_txt:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- render-masks


def make_rasterizer(kind: str, fonts_cfg):
    if kind == "block":
        return BlockRasterizer()
    if kind != "pil":
        raise InputError(f"unknown rasterizer {kind!r}")
    if fonts_cfg:
        fonts = _load_json(fonts_cfg, "fonts config")
        if not isinstance(fonts, dict):
            raise InputError("fonts config must map font ids to paths")
        for fid, p in fonts.items():
            if not os.path.exists(p):
                raise InputError(f"font file for {fid!r} not found: {p}")
        return PilRasterizer(fonts)
    return PilRasterizer.from_env()


def cmd_render_masks(args, cfg) -> int:
    raster = make_rasterizer(cfg["rasterizer"], cfg["fonts"])
    pgm_dir = cfg["export_pgm"]
    if pgm_dir:
        os.makedirs(pgm_dir, exist_ok=True)
    path = args.instances

    def work(entry):
        index, (line, obj) = entry
        try:
            image = read_image_size(obj, path, line)
            text = read_text(obj, path, line)
            box = read_box(obj.get("bbox"), path, line).clamp(image)
            mask = render_destylized(text, box, image, raster)
        except EmptyText:
            return index, line, None, "empty transcript"
        except (SchemaError, ValueError) as e:
            return index, line, None, str(e)
        return index, line, (obj, mask), None

    total = skipped = 0
    with open(args.out, "w", encoding="utf-8") as f:
        for index, line, res, reason in ordered_map(work, enumerate(iter_jsonl(path)), int(cfg["threads"])):
            total += 1
            if res is None:
                skipped += 1
                log.warning("%s:%d skipped: %s", path, line, reason)
                continue
            obj, mask = res
            out = dict(obj)
            out["mask_rle"] = mask.to_rle()
            f.write(dumps(out) + "\n")
            if pgm_dir:
                with open(os.path.join(pgm_dir, f"{index:08d}.pgm"), "wb") as g:
                    g.write(to_pgm(mask))
    print(f"{total - skipped}/{total} masks rendered, {skipped} skipped")
    if total and skipped / total > 0.01:
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------- cqmd-selftest


def _shape_checks(p: CqmdParams, rng) -> list:
    failures = []
    for h, w in ((1, 1), (2, 3), (4, 4), (3, 5)):
        s = rng.normal(size=(h * w, p.d))
        m = decode_mask(s, h, w, p)
        if m.shape != (4 * h, 4 * w):
            failures.append(f"decode_mask {h}x{w} -> {m.shape}")
        if not (np.all(m > 0) and np.all(m < 1)):
            failures.append(f"decode_mask {h}x{w} left (0, 1)")
    rows = softmax(rng.normal(size=(16, 5)) * 10).sum(axis=-1)
    if np.max(np.abs(rows - 1.0)) > 1e-12:
        failures.append("softmax rows do not sum to 1")
    return failures


def cmd_cqmd_selftest(args, cfg) -> int:
    seed = int(cfg["seed"])
    tol = float(cfg["tolerance"])
    golden = None
    fixed = None
    if args.params:
        try:
            fixed, golden = load_params(args.params)
        except ParamsSchemaError as e:
            raise InputError(f"{args.params}: {e}") from None
    rng = np.random.default_rng(seed)
    ref = ReferenceConfig()
    failures = []

    base = fixed or CqmdParams.random(np.random.default_rng(seed), ref.d, ref.d_ff)
    failures += _shape_checks(base, rng)

    causal_ok = True
    for k in range(int(cfg["causal_draws"])):
        hs, p, _ = random_case(seed * 1_000_003 + k, ReferenceConfig(d=base.d, d_ff=base.d_ff))
        if not causal_independence_check(hs, (ref.h, ref.w), fixed or p, rng):
            causal_ok = False
            break
    if not causal_ok:
        failures.append("causal independence violated")

    max_err = 0.0
    for k in range(int(cfg["seeds"])):
        hs, p, gt = random_case(seed + k, ReferenceConfig(d=base.d, d_ff=base.d_ff))
        h_img, h_q, _ = split_hidden(hs)
        max_err = max(max_err, grad_check(fixed or p, h_img, h_q, (ref.h, ref.w), gt))
    if not max_err < tol:
        failures.append(f"gradient error {max_err:.3e} >= {tol:g}")

    golden_ok = None
    if golden is not None:
        _, m = forward(golden["h_img"], golden["h_q"], golden["grid"], fixed)
        golden_ok = bool(np.array_equal(m, golden["mask"]))
        if not golden_ok:
            failures.append("golden mask mismatch")

    if args.write_golden:
        hs, p, _ = random_case(seed)
        h_img, h_q, _ = split_hidden(hs)
        _, m = forward(h_img, h_q, (ref.h, ref.w), p)
        save_params(args.write_golden, p, {"grid": [ref.h, ref.w], "h_img": h_img, "h_q": h_q, "mask": m})

    print(f"causal independence: {'pass' if causal_ok else 'FAIL'}")
    print(f"max gradient relative error: {max_err:.3e} (tolerance {tol:g})")
    if golden_ok is not None:
        print(f"golden mask: {'bit-identical' if golden_ok else 'MISMATCH'}")
    for msg in failures:
        print(f"FAIL: {msg}")
    print("selftest: " + ("pass" if not failures else "FAIL"))
    return EXIT_OK if not failures else EXIT_CHECK


# ---------------------------------------------------------------- misc


def cmd_punct_table(args, cfg) -> int:
    sys.stdout.write(export_punct_table_tsv())
    return EXIT_OK


def cmd_profiles(args, cfg) -> int:
    print(json.dumps([p.to_json() for p in BUILTIN_PROFILES.values()], indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="takit", description="Text-anchoring benchmark and data-engine toolkit")
    ap.add_argument("--version", action="version", version=f"takit {__version__}")
    ap.add_argument("--config", help="JSON file with per-command option sections")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bench", help="sample the benchmark from an annotation pool")
    p.add_argument("pool", help="annotation pool JSONL")
    p.add_argument("--quota", help='quota JSON file, or "released" for the published per-category counts')
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="accepted for uniformity; sampling is single-threaded")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen_bench)

    p = sub.add_parser("eval", help="score stored model outputs against a benchmark")
    p.add_argument("bench")
    p.add_argument("predictions", help="JSONL of {query_id, raw_output}")
    p.add_argument("--profile")
    p.add_argument("--profiles", help="extra interface profiles (JSON)")
    p.add_argument("--iou", type=float)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("consensus", help="two-engine pseudo-label agreement")
    p.add_argument("engine_a")
    p.add_argument("engine_b")
    p.add_argument("out_dir")
    p.add_argument("--iou", type=float)
    p.add_argument("--box-policy", choices=[b.value for b in BoxPolicy])
    p.add_argument("--allow-partial", action="store_true", default=None)
    p.add_argument("--source")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("adjudicate", help="turn a judged adjudication queue into instances")
    p.add_argument("verdicts")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_adjudicate)

    p = sub.add_parser("spi", help="materialize injected priors for one gamma state")
    p.add_argument("instances")
    p.add_argument("profile", help="noise profile JSON")
    p.add_argument("--gamma", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--align-iou", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_spi)

    p = sub.add_parser("render-masks", help="render de-stylized masks into instance records")
    p.add_argument("instances")
    p.add_argument("--fonts", help='JSON {"latin": path, "cjk": path}')
    p.add_argument("--rasterizer", choices=["pil", "block"])
    p.add_argument("--export-pgm", help="directory for per-record PGM previews")
    p.add_argument("--threads", type=int)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_render_masks)

    p = sub.add_parser("cqmd-selftest", help="numerical checks of the mask decoder")
    p.add_argument("--params", help="parameter JSON (optionally with a golden section)")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="number of gradient-check draws")
    p.add_argument("--causal-draws", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--write-golden", help="write params + golden mask for --seed to this path")
    p.set_defaults(func=cmd_cqmd_selftest)

    p = sub.add_parser("punct-table", help="print the R2T punctuation table as TSV")
    p.set_defaults(func=cmd_punct_table)

    p = sub.add_parser("profiles", help="print the built-in interface profiles")
    p.set_defaults(func=cmd_profiles)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        config = _load_json(args.config, "config") if args.config else {}
        cfg = resolve(args, args.command, config)
        code = args.func(args, cfg)
    except (InputError, SchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
