import json
import shutil
import subprocess
import sys

import pytest

from stockrag.cli import main
from stockrag.sequences import load_pool


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = [json.loads(line) for line in out.splitlines() if line.startswith("{")]
    return code, lines, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "market"
    assert main(["synth", str(root), "--stocks", "4", "--days", "320", "--seed", "3"]) == 0
    cfg = root / "config.ini"
    text = cfg.read_text().replace("epochs = 10", "epochs = 2").replace("max_examples = 2000", "max_examples = 60")
    cfg.write_text(text)
    assert main(["pipeline", "-c", str(cfg), "--retrievers", "random", "none"]) == 0
    return root


@pytest.fixture
def ws(workspace, tmp_path):
    dst = tmp_path / "ws"
    shutil.copytree(workspace, dst)
    return dst


def test_pipeline_artifacts(workspace):
    out = workspace / "out"
    for name in ("bars.jsonl", "datastore.jsonl", "queries_test.jsonl", "pool_train.jsonl", "pool_test.jsonl",
                 "training_examples.jsonl", "params.fseer", "loss_curve.json", "report_random.json",
                 "occurrences_random.csv", "eval_none.log.jsonl", "manifest.json"):
        assert (out / name).exists(), name
    man = json.loads((out / "manifest.json").read_text())["artifacts"]
    for entry in man.values():
        assert {"sha256", "config_hash", "inputs", "tool_version"} <= set(entry)
    assert man["bars.jsonl"]["external_inputs"]


def test_summary_line_per_command(ws, capsys):
    code, lines, _ = run(capsys, "mi", "-c", ws / "config.ini")
    assert code == 0 and len(lines) == 1 and lines[0]["command"] == "mi"
    code, lines, _ = run(capsys, "retrieve", "-c", ws / "config.ini", "--retriever", "dtw")
    assert code == 0 and lines[0]["retriever"] == "dtw"
    assert (ws / "out" / "retrieval_dtw.jsonl").exists()


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_console_script_usage():
    res = subprocess.run([sys.executable, "-m", "stockrag", "nope"], capture_output=True, text=True)
    assert res.returncode == 2 and "usage" in res.stderr


def test_config_errors_exit_3(ws, capsys):
    cfg = ws / "config.ini"
    code, _, err = run(capsys, "features", "-c", ws / "missing.ini")
    assert code == 3
    cfg.write_text(cfg.read_text().replace("tau = 0.02", "tau = 0"))
    code, _, err = run(capsys, "features", "-c", cfg)
    assert code == 3 and "tau" in err
    cfg.write_text(cfg.read_text().replace("tau = 0", "tau = 0.02").replace("k = 5", "k = -1"))
    assert run(capsys, "features", "-c", cfg)[0] == 3
    cfg.write_text(cfg.read_text().replace("k = -1", "k = 5").replace("bars_csv = market.csv", "bars_csv = gone.csv"))
    assert run(capsys, "ingest", "-c", cfg)[0] == 3
    cfg.write_text(cfg.read_text().replace("[run]", "[run]\nbogus = 1"))
    assert run(capsys, "ingest", "-c", cfg)[0] == 3


def test_negative_k_flag_exit_3(ws, capsys):
    assert run(capsys, "evaluate", "-c", ws / "config.ini", "--k", "-2")[0] == 3


def test_manifest_mismatch_exit_4_and_force(ws, capsys):
    pool = ws / "out" / "pool_test.jsonl"
    lines = pool.read_text().splitlines(keepends=True)
    pool.write_text("".join(lines[:-1]))
    code, _, err = run(capsys, "evaluate", "-c", ws / "config.ini", "--retriever", "random")
    assert code == 4 and "pool_test.jsonl" in err
    cfg = ws / "config.ini"
    cfg.write_text(cfg.read_text().replace("noise = 0.75", "noise = 0.5"))
    assert run(capsys, "evaluate", "-c", cfg, "--retriever", "none")[0] == 4


def test_force_skips_manifest(ws, capsys):
    cfg = ws / "config.ini"
    cfg.write_text(cfg.read_text().replace("noise = 0.75", "noise = 0.5"))
    code, lines, _ = run(capsys, "evaluate", "-c", cfg, "--retriever", "none", "--force")
    assert code == 0 and lines[0]["k"] == 0


def test_forecaster_failure_exit_5(ws, capsys):
    cfg = ws / "config.ini"
    text = cfg.read_text().replace("kind = synthetic", "kind = remote")
    text = text.replace("url = \ntoken_env = STOCKRAG_FORECASTER_TOKEN", "url = http://127.0.0.1:9/\ntoken_env = "
                        "STOCKRAG_FORECASTER_TOKEN").replace("max_retries = 3\nbackoff = 0.5",
                                                             "max_retries = 0\nbackoff = 0.0")
    cfg.write_text(text)
    code, _, err = run(capsys, "evaluate", "-c", cfg, "--retriever", "random", "--force")
    assert code == 5 and "ForecasterError" in err
    assert (ws / "out" / "eval_random.log.jsonl").read_text() == ""


def test_missing_artifact_exit_1(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "fresh"), "--stocks", "3", "--days", "30"]) == 0
    capsys.readouterr()
    code, _, err = run(capsys, "features", "-c", tmp_path / "fresh" / "config.ini")
    assert code == 1 and "bars.jsonl" in err


def test_pool_advance_one_day(ws, capsys):
    cfg = ws / "config.ini"
    out = ws / "out"
    full = load_pool(out / "pool_test.jsonl")
    cal_day = full.as_of
    code, lines, _ = run(capsys, "pool", "-c", cfg, "--split", "test", "--as-of", "2015-07-01")
    assert code == 0
    before = load_pool(out / "pool_test.jsonl")
    hw_before = json.loads((out / "pool_test.manifest.json").read_text())["high_water"]
    code, lines, _ = run(capsys, "pool", "-c", cfg, "--split", "test", "--advance", "1")
    assert code == 0
    after = load_pool(out / "pool_test.jsonl")
    hw_after = json.loads((out / "pool_test.manifest.json").read_text())["high_water"]
    assert hw_before == "2015-07-01" and hw_after == "2015-07-02"
    assert after.candidates[: len(before)] == before.candidates
    added = after.candidates[len(before):]
    assert added and {c.candidate_date.isoformat() for c in added} == {"2015-07-01"}
    assert lines[0]["pools"]["test"]["added"] == len(added)
    man = json.loads((out / "manifest.json").read_text())["artifacts"]
    assert man["pool_test.jsonl"]["high_water"] == "2015-07-02"
    assert cal_day > after.as_of


def test_pool_advance_past_end_fails(ws, capsys):
    code, _, err = run(capsys, "pool", "-c", ws / "config.ini", "--split", "test", "--advance", "1")
    assert code == 1 and "no trading day" in err


def test_random_evaluate_twice_byte_identical(ws, capsys):
    cfg = ws / "config.ini"
    out = ws / "out"
    blobs = []
    for _ in range(2):
        assert run(capsys, "evaluate", "-c", cfg, "--retriever", "random", "--seed", "7")[0] == 0
        blobs.append({n: (out / n).read_bytes() for n in
                      ("report_random.json", "eval_random.log.jsonl", "occurrences_random.csv")})
    assert blobs[0] == blobs[1]
    assert run(capsys, "evaluate", "-c", cfg, "--retriever", "random", "--seed", "8")[0] == 0
    assert (out / "eval_random.log.jsonl").read_bytes() != blobs[0]["eval_random.log.jsonl"]


def test_finseer_embedding_cache_reused(ws, capsys):
    cfg = ws / "config.ini"
    assert run(capsys, "evaluate", "-c", cfg, "--retriever", "finseer")[0] == 0
    first = (ws / "out" / "report_finseer.json").read_bytes()
    cache = ws / "out" / "embeddings_test.fsemb"
    mtime = cache.stat().st_mtime_ns
    assert run(capsys, "evaluate", "-c", cfg, "--retriever", "finseer")[0] == 0
    assert cache.stat().st_mtime_ns == mtime
    assert (ws / "out" / "report_finseer.json").read_bytes() == first
