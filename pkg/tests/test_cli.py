import json

import pytest

from takit.adapters import BUILTIN_PROFILES, echo_response
from takit.bench import BenchQuery
from takit.cli import main

from conftest import synthetic_pool, write_jsonl

NOISE = {"recall": 0.6069, "precision": 0.8072, "cer": 0.5, "e_del_hat": 0.45, "e_ins_hat": 0.335}


def read_lines(path):
    return [json.loads(x) for x in open(path, encoding="utf-8")]


@pytest.fixture
def bench(tmp_path, pool_file):
    out = tmp_path / "bench.json"
    q = tmp_path / "quota.json"
    q.write_text(json.dumps({"SceneText": 10, "Receipt": 5}))
    assert main(["gen-bench", str(pool_file), "--quota", str(q), "--seed", "7", "-o", str(out)]) == 0
    return out


def load_queries(path):
    return [BenchQuery.from_json(o) for o in json.loads(open(path).read())]


def test_gen_bench_deterministic(tmp_path, pool_file, bench):
    again = tmp_path / "again.json"
    q = tmp_path / "quota.json"
    assert main(["gen-bench", str(pool_file), "--quota", str(q), "--seed", "7", "-o", str(again)]) == 0
    assert again.read_bytes() == bench.read_bytes()
    qs = load_queries(bench)
    assert len(qs) == 30
    other = tmp_path / "other.json"
    main(["gen-bench", str(pool_file), "--quota", str(q), "--seed", "8", "-o", str(other)])
    assert other.read_bytes() != bench.read_bytes()


def test_gen_bench_unknown_quota_category(tmp_path, pool_file):
    q = tmp_path / "quota.json"
    q.write_text(json.dumps({"SceneText": 5, "NoSuchData": 5}))
    code = main(["gen-bench", str(pool_file), "--quota", str(q), "-o", str(tmp_path / "b.json")])
    assert code == 2


def test_gen_bench_missing_pool_category(tmp_path, caplog):
    recs = [r for r in synthetic_pool(0) if r["category"] != "Receipt"]
    pool = write_jsonl(tmp_path / "pool.jsonl", recs)
    q = tmp_path / "quota.json"
    q.write_text(json.dumps({"SceneText": 5, "Receipt": 5}))
    assert main(["gen-bench", str(pool), "--quota", str(q), "-o", str(tmp_path / "b.json")]) == 0
    assert "EmptyCategory" in caplog.text
    assert {x.category for x in load_queries(tmp_path / "b.json")} == {"SceneText"}


def test_gen_bench_bad_pool(tmp_path):
    bad = tmp_path / "pool.jsonl"
    bad.write_text('{"image": "a", "width": 10}\n')
    assert main(["gen-bench", str(bad), "-o", str(tmp_path / "b.json")]) == 2


def write_preds(path, queries, fn):
    write_jsonl(path, [{"query_id": q.query_id, "raw_output": fn(q)} for q in queries if fn(q) is not None])
    return path


def run_eval(tmp_path, bench, preds, profile="StandardXyxyAbs"):
    out = tmp_path / f"report_{profile}.json"
    assert main(["eval", str(bench), str(preds), "--profile", profile, "-o", str(out)]) == 0
    return json.loads(out.read_text())["report"]


@pytest.mark.parametrize("name", sorted(BUILTIN_PROFILES))
def test_eval_echo_is_perfect(tmp_path, bench, name):
    prof = BUILTIN_PROFILES[name]
    preds = write_preds(tmp_path / "p.jsonl", load_queries(bench), lambda q: echo_response(q, prof))
    rep = run_eval(tmp_path, bench, preds, name)
    assert rep["overall"] == 100.0 and rep["acc_r2t"] == 100.0 and rep["f1_t2r"] == 100.0


def test_eval_empty_predictions(tmp_path, bench):
    preds = tmp_path / "p.jsonl"
    preds.write_text("")
    rep = run_eval(tmp_path, bench, preds)
    assert rep["overall"] == 0 and rep["acc_r2t"] == 0 and rep["f1_t2r"] == 0


def test_eval_t2r_only_halves(tmp_path, bench):
    prof = BUILTIN_PROFILES["StandardXyxyAbs"]
    qs = load_queries(bench)
    preds = write_preds(tmp_path / "p.jsonl", qs, lambda q: echo_response(q, prof) if q.direction.value == "T2R" else None)
    rep = run_eval(tmp_path, bench, preds)
    assert rep["overall"] == rep["f1_t2r"] / 2 == 50.0


def test_eval_duplicate_predictions(tmp_path, bench):
    q = load_queries(bench)[0]
    preds = write_jsonl(tmp_path / "p.jsonl", [{"query_id": q.query_id, "raw_output": "x"}] * 2)
    assert main(["eval", str(bench), str(preds), "-o", str(tmp_path / "r.json")]) == 2


def test_eval_unknown_profile(tmp_path, bench):
    preds = tmp_path / "p.jsonl"
    preds.write_text("")
    assert main(["eval", str(bench), str(preds), "--profile", "Nope", "-o", str(tmp_path / "r.json")]) == 2


def test_config_precedence(tmp_path, bench):
    preds = write_preds(tmp_path / "p.jsonl", load_queries(bench), lambda q: "garbage")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"eval": {"profile": "Norm01", "iou": 0.3}}))
    out = tmp_path / "r.json"
    assert main(["--config", str(cfg), "eval", str(bench), str(preds), "--iou", "0.6", "-o", str(out)]) == 0
    conf = json.loads(out.read_text())["config"]
    assert conf["profile"] == "Norm01" and conf["iou"] == 0.6
    cfg.write_text("[1, 2")
    assert main(["--config", str(cfg), "eval", str(bench), str(preds), "-o", str(out)]) == 2


def engine_files(tmp_path, recs_a, recs_b):
    return write_jsonl(tmp_path / "a.jsonl", recs_a), write_jsonl(tmp_path / "b.jsonl", recs_b)


def test_consensus_self_agrees(tmp_path):
    recs = [{"image": f"im{i}", "width": 100, "height": 100, "items": [{"bbox": [0, 0, 20, 10], "text": "STOP"}, {"bbox": [30, 30, 60, 40], "text": "EXIT"}]} for i in range(5)]
    a, b = engine_files(tmp_path, recs, recs)
    out = tmp_path / "out"
    assert main(["consensus", str(a), str(b), str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["acceptance_rate"] == 1.0
    assert len(read_lines(out / "agreed.jsonl")) == 10
    assert read_lines(out / "disputed.jsonl") == []


def test_consensus_reasons_and_verdict_round_trip(tmp_path):
    ra = [{"image": "im", "width": 100, "height": 100, "items": [
        {"bbox": [0, 0, 20, 10], "text": "STOP"},
        {"bbox": [30, 30, 60, 40], "text": "EXIT"},
        {"bbox": [70, 70, 90, 80], "text": "alone"},
        {"bbox": [0, 50, 20, 60], "text": "low"}]}]  # fmt: skip
    rb = [{"image": "im", "width": 100, "height": 100, "items": [
        {"bbox": [0, 0, 20, 9], "text": "STOP"},
        {"bbox": [30, 30, 60, 40], "text": "EX1T"},
        {"bbox": [5, 50, 25, 60], "text": "low"}]}]  # fmt: skip
    a, b = engine_files(tmp_path, ra, rb)
    out = tmp_path / "out"
    assert main(["consensus", str(a), str(b), str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["reasons"] == {"NoMutualMatch": 1, "LowIoU": 2, "TranscriptMismatch": 1}
    queue = read_lines(out / "disputed.jsonl")
    assert len(queue) == 1 and queue[0]["verdict"] == ""
    queue[0]["verdict"] = "accept_a"
    judged = write_jsonl(tmp_path / "judged.jsonl", queue)
    res = tmp_path / "resolved.jsonl"
    assert main(["adjudicate", str(judged), "-o", str(res)]) == 0
    (inst,) = read_lines(res)
    assert inst["text"] == "EXIT" and inst["bbox"] == [30, 30, 60, 40]
    queue[0]["verdict"] = "perhaps"
    write_jsonl(judged, queue)
    assert main(["adjudicate", str(judged), "-o", str(res)]) == 2


def test_consensus_image_mismatch(tmp_path):
    rec = lambda i: {"image": i, "width": 10, "height": 10, "items": []}  # noqa: E731
    a, b = engine_files(tmp_path, [rec("a"), rec("b"), rec("c")], [rec("a"), rec("c")])
    assert main(["consensus", str(a), str(b), str(tmp_path / "o")]) == 2
    assert main(["consensus", str(a), str(b), str(tmp_path / "o"), "--allow-partial"]) == 0
    stats = json.loads((tmp_path / "o" / "stats.json").read_text())
    assert stats["skipped_images"] == {"A": 1, "B": 0}


def instance_records(n=60):
    recs = []
    for i in range(n):
        rec = {"image": f"im{i}", "width": 200, "height": 100, "bbox": [10 + i % 50, 10, 120, 60], "text": f"Word{i}", "source": "synthetic"}
        if i % 3 == 0:
            rec["source"] = "scene"
            rec["raw_priors"] = [{"bbox": [11 + i % 50, 10, 120, 61], "text": f"Wor{i}"}, {"bbox": [150, 70, 190, 90], "text": "ghost"}]
        recs.append(rec)
    return recs


def run_spi(tmp_path, inst, gamma, name, *extra):
    prof = tmp_path / "noise.json"
    prof.write_text(json.dumps(NOISE))
    out = tmp_path / name
    code = main(["spi", str(inst), str(prof), "--gamma", gamma, "-o", str(out), *extra])
    return code, out


def test_spi_gammas(tmp_path):
    recs = instance_records()
    inst = write_jsonl(tmp_path / "inst.jsonl", recs)
    code, out = run_spi(tmp_path, inst, "0.0", "g0.jsonl")
    assert code == 0 and all(r["priors"] == [] for r in read_lines(out))
    code, out = run_spi(tmp_path, inst, "1.0", "g1.jsonl")
    for rec, got in zip(recs, read_lines(out)):
        expect = rec["raw_priors"] if rec["source"] == "scene" else [{"bbox": rec["bbox"], "text": rec["text"]}]
        assert got["priors"] == [{"bbox": [float(v) for v in p["bbox"]], "text": p["text"]} for p in expect]
    code, out1 = run_spi(tmp_path, inst, "0.5", "h1.jsonl", "--seed", "3")
    code, out2 = run_spi(tmp_path, inst, "0.5", "h2.jsonl", "--seed", "3", "--threads", "8")
    assert out1.read_bytes() == out2.read_bytes()
    assert run_spi(tmp_path, inst, "0.7", "bad.jsonl")[0] == 2


def test_spi_scene_without_raw_priors(tmp_path):
    inst = write_jsonl(tmp_path / "inst.jsonl", [{"image": "a", "width": 10, "height": 10, "bbox": [0, 0, 5, 5], "text": "x", "source": "scene"}])
    assert run_spi(tmp_path, inst, "0.5", "o.jsonl")[0] == 2


def test_render_masks(tmp_path):
    recs = instance_records(20)
    inst = write_jsonl(tmp_path / "inst.jsonl", recs)
    outs = []
    for threads in ("1", "8"):
        out = tmp_path / f"m{threads}.jsonl"
        assert main(["render-masks", str(inst), "--rasterizer", "block", "--threads", threads, "-o", str(out), "--export-pgm", str(tmp_path / "pgm")]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    for rec in read_lines(tmp_path / "m1.jsonl"):
        assert sum(rec["mask_rle"]) == 200 * 100
    assert len(list((tmp_path / "pgm").iterdir())) == 20


def test_render_masks_skips(tmp_path):
    recs = instance_records(20)
    recs[3]["text"] = ""
    inst = write_jsonl(tmp_path / "inst.jsonl", recs)
    assert main(["render-masks", str(inst), "--rasterizer", "block", "-o", str(tmp_path / "m.jsonl")]) == 1
    assert len(read_lines(tmp_path / "m.jsonl")) == 19


def test_cqmd_selftest_and_golden(tmp_path, capsys):
    assert main(["cqmd-selftest", "--seeds", "2", "--causal-draws", "10"]) == 0
    gold = tmp_path / "gold.json"
    assert main(["cqmd-selftest", "--write-golden", str(gold), "--seed", "5"]) == 0
    assert main(["cqmd-selftest", "--params", str(gold), "--seeds", "1", "--causal-draws", "5"]) == 0
    doc = json.loads(gold.read_text())
    doc["golden"]["mask"]["data"][0] += 1e-12
    gold.write_text(json.dumps(doc))
    assert main(["cqmd-selftest", "--params", str(gold), "--seeds", "1", "--causal-draws", "5"]) == 1
    doc["arrays"]["w1"]["shape"] = [2, 2]
    gold.write_text(json.dumps(doc))
    assert main(["cqmd-selftest", "--params", str(gold)]) == 2


def test_small_commands(capsys):
    assert main(["punct-table"]) == 0
    assert "，\t," in capsys.readouterr().out
    assert main(["profiles"]) == 0
    assert "GroundingTags" in capsys.readouterr().out
