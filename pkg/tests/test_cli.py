import csv
import io
import json

import pytest

from mlci.cli import Exit, main
from mlci.evaluator import write_pairs

from helpers import script_text, toy_models


def write(path, text):
    path.write_text(text)
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def csv_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# --------------------------------------------------------------------------
# estimate
# --------------------------------------------------------------------------


def test_estimate_f1_full(tmp_path, capsys):
    cfg = write(tmp_path / "ci.yml", script_text("n > 0.8 +/- 0.05"))
    code, out, _ = run(capsys, "estimate", cfg, "--format", "csv")
    assert code == Exit.OK
    (row,) = csv_rows(out)
    assert row["testset_size"] == "6279"
    assert row["bound"] == "hoeffding"


def test_estimate_semeval(tmp_path, capsys):
    none = write(tmp_path / "a.yml", script_text("n - o > 0 +/- 0.02", reliability="0.998", adaptivity="none", steps=7))
    full = write(tmp_path / "b.yml", script_text("n - o > 0 +/- 0.02", reliability="0.998", adaptivity="full", steps=7))
    _, out, _ = run(capsys, "estimate", none, "--format", "json", "--no-optimize")
    assert abs(json.loads(out)["testset_size"] - 44268) <= 1
    _, out, _ = run(capsys, "estimate", full, "--format", "json", "--no-optimize")
    assert json.loads(out)["testset_size"] == pytest.approx(58790, rel=0.01)


def test_estimate_text_and_exact(tmp_path, capsys):
    cfg = write(tmp_path / "ci.yml", script_text("n > 0.9 +/- 0.05", reliability="0.999", adaptivity="none", steps=1))
    code, out, _ = run(capsys, "estimate", cfg)
    assert code == 0 and "testset size:" in out
    _, out, _ = run(capsys, "estimate", cfg, "--bound", "exact", "--format", "csv")
    (row,) = csv_rows(out)
    assert row["bound"] == "exact-binomial"
    assert int(row["testset_size"]) == 570


@pytest.mark.parametrize("text", ["ml:\n  - condition : n >> 1\n", "nothing here\n"])
def test_estimate_bad_config(tmp_path, capsys, text):
    code, _, err = run(capsys, "estimate", write(tmp_path / "bad.yml", text))
    assert code == Exit.ERROR and "error" in err


def test_missing_config_and_usage(tmp_path, capsys):
    assert run(capsys, "estimate", tmp_path / "nope.yml")[0] == Exit.ERROR
    assert run(capsys, "bogus")[0] == Exit.ERROR
    assert run(capsys)[0] == Exit.ERROR


def test_help_exits_zero(capsys):
    assert main(["--help"]) == Exit.OK


# --------------------------------------------------------------------------
# Session lifecycle
# --------------------------------------------------------------------------


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.delenv("MLCI_SINK", raising=False)
    ids, old, new, labels = toy_models(400, 0.6, 0.95, seed=1)
    bad = {i: str(1 - int(labels[i])) for i in ids}
    files = {
        "manifest": write(tmp_path / "manifest.csv", write_pairs((i, labels[i]) for i in ids)),
        "old": write(tmp_path / "old.csv", write_pairs(old.predictions.items())),
        "new": write(tmp_path / "new.csv", write_pairs(new.predictions.items())),
        "bad": write(tmp_path / "bad.csv", write_pairs(bad.items())),
        "session": str(tmp_path / "s.json"),
        "dir": tmp_path,
    }
    return files


def config(ws, adaptivity, steps=4, mode="fp-free", cond="n > 0.5 +/- 0.2", first_change_on=None):
    text = script_text(cond, reliability="0.9", adaptivity=adaptivity, steps=steps, mode=mode, first_change_on=first_change_on)
    return write(ws["dir"] / f"ci-{adaptivity}.yml", text)


def init(capsys, ws, cfg):
    code, out, err = run(capsys, "init", cfg, ws["manifest"], "--session", ws["session"])
    assert code == Exit.OK, err
    return out


def commit(capsys, ws, cid, new="new", *extra):
    return run(capsys, "commit", ws["session"], "--id", cid, "--old", ws["old"], "--new", ws[new], *extra)


def test_first_change_pass_alarms(capsys, workspace):
    ws = workspace
    init(capsys, ws, config(ws, "firstChange"))
    code, out, _ = commit(capsys, ws, "abc123", "new", "--format", "json")
    assert code == Exit.OK
    doc = json.loads(out)
    assert doc["signal"] == "pass" and doc["alarm"] == "request-new-testset(passed)"
    events = (ws["dir"] / "s.json.events.jsonl").read_text().splitlines()
    assert json.loads(events[-1])["event"] == "alarm"
    code, _, err = commit(capsys, ws, "def456")
    assert code == Exit.ALARM and "exhausted" in err
    assert json.loads((ws["dir"] / "s.json").read_text())["commits_used"] == 1


def test_full_mode_fail_and_budget(capsys, workspace):
    ws = workspace
    init(capsys, ws, config(ws, "full", steps=2))
    assert commit(capsys, ws, "c1", "bad")[0] == Exit.FAIL
    code, out, _ = commit(capsys, ws, "c2")
    assert code == Exit.OK and "request-new-testset(budget)" in out
    assert commit(capsys, ws, "c3")[0] == Exit.ALARM


def test_unknown_exit_code(capsys, workspace):
    ws = workspace
    # the new model sits close to the threshold, so the interval straddles it
    init(capsys, ws, config(ws, "full", cond="n > 0.9 +/- 0.2"))
    code, out, _ = commit(capsys, ws, "c1", "new", "--format", "json")
    assert code == Exit.UNKNOWN
    assert json.loads(out)["value"] == "unknown"


def test_none_mode_exit_zero_and_sink(capsys, workspace, monkeypatch):
    ws = workspace
    sink = ws["dir"] / "sink.jsonl"
    monkeypatch.setenv("MLCI_SINK", str(sink))
    init(capsys, ws, config(ws, "none"))
    code, out, _ = commit(capsys, ws, "c1", "bad", "--format", "json")
    assert code == Exit.OK
    doc = json.loads(out)
    assert doc["signal"] == "accept" and "value" not in doc
    event = json.loads(sink.read_text().splitlines()[0])
    assert event["verdict"] == "fail" and event["address"] == "ci-results@example.com"


def test_sink_to_stderr(capsys, workspace, monkeypatch):
    ws = workspace
    monkeypatch.setenv("MLCI_SINK", "-")
    init(capsys, ws, config(ws, "none"))
    _, _, err = commit(capsys, ws, "c1", "bad")
    assert json.loads(err.splitlines()[0])["event"] == "verdict"


def test_init_errors(capsys, workspace):
    ws = workspace
    cfg = config(ws, "full", cond="n > 0.5 +/- 0.01")
    code, out, _ = run(capsys, "init", cfg, ws["manifest"], "--session", ws["session"])
    assert code == Exit.ERROR
    assert out.startswith("required: ")
    init(capsys, ws, config(ws, "full"))
    code, _, err = run(capsys, "init", config(ws, "full"), ws["manifest"], "--session", ws["session"])
    assert code == Exit.ERROR and "--force" in err
    code, _, _ = run(capsys, "init", config(ws, "full"), ws["manifest"], "--session", ws["session"], "--force")
    assert code == Exit.OK


def test_labels_identical_models(capsys, workspace):
    ws = workspace
    init(capsys, ws, config(ws, "full"))
    code, out, _ = run(capsys, "labels", ws["session"], "--old", ws["old"], "--new", ws["old"], "--format", "json")
    assert code == Exit.OK
    assert json.loads(out) == {"labels_needed": []}


def test_release(capsys, workspace):
    ws = workspace
    init(capsys, ws, config(ws, "full", steps=1))
    code, _, err = run(capsys, "release", ws["session"])
    assert code == Exit.ERROR and "alarm" in err
    commit(capsys, ws, "c1")
    out_path = ws["dir"] / "released.csv"
    assert run(capsys, "release", ws["session"], "--output", out_path)[0] == Exit.OK
    released = out_path.read_text()
    assert released == (ws["dir"] / "manifest.csv").read_text()
    code, out, _ = run(capsys, "release", ws["session"])
    assert code == Exit.OK and out == released


def test_commit_io_errors(capsys, workspace):
    ws = workspace
    init(capsys, ws, config(ws, "full"))
    code, _, err = run(capsys, "commit", ws["session"], "--id", "c", "--old", ws["old"], "--new", ws["dir"] / "missing.csv")
    assert code == Exit.ERROR
    assert run(capsys, "commit", ws["dir"] / "none.json", "--id", "c", "--old", ws["old"], "--new", ws["new"])[0] == Exit.ERROR


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def test_simulate_smoke_deterministic(capsys):
    a = run(capsys, "simulate", "--preset", "smoke", "--trials", "200", "--seed", "3", "--format", "csv")
    b = run(capsys, "simulate", "--preset", "smoke", "--trials", "200", "--seed", "3", "--format", "csv")
    assert a == b and a[0] == Exit.OK
    (row,) = csv_rows(a[1])
    assert row["verdict"] == "covered" and row["trials"] == "200"


def test_simulate_coverage_preset(capsys):
    code, out, _ = run(capsys, "simulate", "--preset", "coverage", "--trials", "100", "--steps", "4", "--format", "json")
    assert code == Exit.OK
    assert [r["label"] for r in json.loads(out)] == ["F1/none", "F1/full", "F2/none", "F2/full"]


def test_simulate_savings_grid(capsys):
    code, out, _ = run(capsys, "simulate", "--preset", "savings", "--grid", "eps=0.01;delta=0.0001;p=0.1,1", "--format", "csv")
    assert code == Exit.OK
    rows = csv_rows(out)
    assert [r["p"] for r in rows] == ["0.1", "1"]
    assert abs(int(rows[0]["n_active"]) - 2189) <= 1
    assert rows[1]["n_bennett"] == rows[1]["n_hoeffding"]


@pytest.mark.parametrize("grid", ["eps=", "foo=1", "eps=abc", "delta=2", "p=0", "eps"])
def test_simulate_bad_grid(capsys, grid):
    assert run(capsys, "simulate", "--preset", "savings", "--grid", grid)[0] == Exit.ERROR


def test_simulate_grid_needs_savings(capsys):
    assert run(capsys, "simulate", "--preset", "smoke", "--grid", "eps=0.1")[0] == Exit.ERROR
    assert run(capsys, "simulate", "--preset", "smoke", "--trials", "0")[0] == Exit.ERROR
