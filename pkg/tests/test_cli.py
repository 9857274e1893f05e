import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import DATA, FIXTURES
from tissueflow import kernels
from tissueflow.cli import main
from tissueflow.memory import open_store
from tissueflow.registry import REGISTRY_DATASET

FIXTURE_PLAN = DATA / "fixture_plan.json"
SCENARIO = DATA / "separable_scenario.json"


def cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_plan(tmp_path, doc, name="plan.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def sleep_node(nid, outputs=(), inputs=(), seconds=0.0):
    return {"id": nid, "tool": "sleep", "params": {"seconds": seconds},
            "inputs": list(inputs), "outputs": list(outputs)}


# -- run -------------------------------------------------------------------------


def test_fixture_run(tmp_path, capsys):
    store = tmp_path / "s"
    code, out, _ = cli(capsys, "--store", store, "run", FIXTURE_PLAN, "--log", tmp_path / "run.jsonl")
    assert code == 0
    assert out.splitlines()[-1].startswith("outcome\tsuccess")
    with open_store(store, readonly=True) as s:
        assert float(s.read_array("measurement_doi")) == 1500.0
        assert s.info("class_metastasis").attrs["label"] == "micrometastasis"
        assert REGISTRY_DATASET in s
    events = [json.loads(x) for x in (tmp_path / "run.jsonl").read_text().splitlines()]
    assert {e["event"] for e in events} == {"start", "done"}


def test_fixture_digest_identical_across_executors(tmp_path, capsys):
    digests = []
    for k, executor in enumerate(["inline", "pool=4", "inline"]):
        store = tmp_path / f"s{k}"
        assert cli(capsys, "--store", store, "--executor", executor, "run", FIXTURE_PLAN)[0] == 0
        with open_store(store, readonly=True) as s:
            digests.append(s.digest())
    assert len(set(digests)) == 1


def test_rerun_same_store_is_stable(tmp_path, capsys):
    store = tmp_path / "s"
    digests = []
    for _ in range(2):
        assert cli(capsys, "--store", store, "run", FIXTURE_PLAN)[0] == 0
        with open_store(store, readonly=True) as s:
            digests.append(s.digest())
    assert digests[0] == digests[1]


def test_bad_plan_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli(capsys, "--store", tmp_path / "s", "run", bad)[0] == 2
    unknown = write_plan(tmp_path, {"nodes": [], "colour": "red"})
    assert cli(capsys, "--store", tmp_path / "s", "run", unknown)[0] == 2
    assert cli(capsys, "--store", tmp_path / "s", "--executor", "threads", "run",
               FIXTURE_PLAN)[0] == 1


def test_cycle_exit_3(tmp_path, capsys):
    plan = write_plan(tmp_path, {"nodes": [sleep_node("a"), sleep_node("b")],
                                 "edges": [["a", "b"], ["b", "a"]]})
    code, _, err = cli(capsys, "--store", tmp_path / "s", "run", plan)
    assert code == 3
    assert "cycle" in err


def test_missing_input_exit_3(tmp_path, capsys):
    plan = write_plan(tmp_path, {"nodes": [sleep_node("a", inputs=["mask2D_absent"])]})
    assert cli(capsys, "--store", tmp_path / "s", "run", plan)[0] == 3


def test_store_locked_exit_4(tmp_path, capsys):
    store = tmp_path / "s"
    with open_store(store):
        assert cli(capsys, "--store", store, "run", FIXTURE_PLAN)[0] == 4


def test_plugin_crash_exit_5(tmp_path, capsys):
    plan = write_plan(tmp_path, {
        "tools": [{"tool_id": "crasher", "version": "1.0.0", "capability": "analysis",
                   "runner": f"{{python}} {FIXTURES / 'echo_plugin.py'} crash"}],
        "nodes": [{"id": "src", "tool": "phantom_segmenter",
                   "params": {"shape": [4, 4], "masks": [[]]}, "outputs": ["mask2D"]},
                  {"id": "boom", "tool": "crasher", "inputs": ["mask2D"],
                   "outputs": ["mask2D_copy"]}],
        "edges": [["src", "boom"]],
    })
    assert cli(capsys, "--store", tmp_path / "s", "run", plan)[0] == 5
    assert cli(capsys, "--store", tmp_path / "s2", "--strict", "run", plan)[0] == 5


def test_external_plugin_via_plan(tmp_path, capsys):
    plan = write_plan(tmp_path, {
        "tools": [{"tool_id": "copier", "version": "1.0.0", "capability": "analysis",
                   "runner": f"{{python}} {FIXTURES / 'echo_plugin.py'} ok"}],
        "nodes": [{"id": "src", "tool": "phantom_segmenter",
                   "params": {"shape": [4, 4], "masks": [[{"kind": "rect", "x0": 0, "x1": 2,
                                                           "y0": 0, "y1": 2}]]},
                   "outputs": ["mask2D"]},
                  {"id": "copy", "tool": "copier", "inputs": ["mask2D"],
                   "outputs": ["mask2D_copy"]}],
        "edges": [["src", "copy"]],
    })
    assert cli(capsys, "--store", tmp_path / "s", "run", plan)[0] == 0
    with open_store(tmp_path / "s", readonly=True) as s:
        assert np.array_equal(s.read_array("mask2D_copy"), s.read_array("mask2D"))


def test_partial_failure_and_strict(tmp_path, capsys):
    plan = write_plan(tmp_path, {"nodes": [
        {"id": "bad", "tool": "fail"}, sleep_node("good", outputs=["measurement_t"])]})
    code, _, err = cli(capsys, "--store", tmp_path / "s", "run", plan)
    assert code == 0 and "partial" in err
    assert cli(capsys, "--store", tmp_path / "s2", "--strict", "run", plan)[0] == 1
    only_bad = write_plan(tmp_path, {"nodes": [{"id": "bad", "tool": "fail"}]}, "bad.json")
    assert cli(capsys, "--store", tmp_path / "s3", "run", only_bad)[0] == 1


# -- inspect -------------------------------------------------------------------


@pytest.fixture
def populated(tmp_path, capsys):
    store = tmp_path / "s"
    assert cli(capsys, "--store", store, "run", FIXTURE_PLAN)[0] == 0
    return store


def test_inspect_list(populated, capsys):
    code, out, _ = cli(capsys, "--store", populated, "inspect", "list", "mask2D_*")
    assert code == 0
    lines = [x.split("\t") for x in out.splitlines()]
    assert [x[0] for x in lines] == ["mask2D_epithelium", "mask2D_tumor"]
    assert lines[0][1:4] == ["Mask2D", "u8", "128x128"]


def test_inspect_show_and_slice(populated, capsys):
    code, out, _ = cli(capsys, "--store", populated, "inspect", "show", "measurement_doi")
    assert code == 0
    assert "shape\tscalar" in out and "attr\tunit\tum" in out
    code, out, _ = cli(capsys, "--store", populated, "inspect", "show", "mask2D_tumor",
                       "--slice", "68:70,60:64")
    assert code == 0
    assert sum(line.startswith("data\t") for line in out.splitlines()) == 2
    assert cli(capsys, "--store", populated, "inspect", "show", "mask2D_tumor",
               "--slice", "a:b")[0] == 1


def test_inspect_history_hash_is_fnv(populated, capsys):
    code, out, _ = cli(capsys, "--store", populated, "inspect", "history", "mask2D_tumor")
    assert code == 0
    (line,) = out.splitlines()
    with open_store(populated, readonly=True) as s:
        expected = kernels.hexdigest(kernels.fnv1a64(s.read_dataset("mask2D_tumor").payload))
    assert expected in line.split("\t")


def test_inspect_journal(populated, capsys):
    code, out, _ = cli(capsys, "--store", populated, "inspect", "journal")
    seqs = [int(x.split("\t")[0]) for x in out.splitlines()]
    assert code == 0 and seqs == list(range(1, len(seqs) + 1))


def test_inspect_errors(tmp_path, populated, capsys):
    assert cli(capsys, "--store", tmp_path / "nowhere", "inspect", "list")[0] == 4
    assert cli(capsys, "--store", populated, "inspect", "show", "no_such")[0] == 1


# -- simulate, metrics, tools, gc ------------------------------------------------


def test_simulate_feedback(tmp_path, capsys):
    code, out, _ = cli(capsys, "--store", tmp_path / "s", "simulate-feedback", SCENARIO)
    assert code == 0
    rows = out.splitlines()
    assert rows[0] == "round\taccuracy" and len(rows) == 12
    assert float(rows[-1].split("\t")[1]) >= 0.95
    code, out2, _ = cli(capsys, "--store", tmp_path / "t", "simulate-feedback", SCENARIO)
    assert out2 == out
    code, out3, _ = cli(capsys, "--store", tmp_path / "u", "--seed", "9", "simulate-feedback",
                        SCENARIO, "--rounds", "0")
    assert out3.splitlines() == ["round\taccuracy", "0\t0.000000"]


def test_simulate_bad_scenario(tmp_path, capsys):
    bad = tmp_path / "scenario.json"
    bad.write_text(json.dumps({"wings": 2}))
    assert cli(capsys, "--store", tmp_path / "s", "simulate-feedback", bad)[0] == 2


def test_metrics_command(tmp_path, capsys):
    store = tmp_path / "s"
    with open_store(store) as s:
        s.write_array("table_truth", np.array([0, 1, 1, 0], np.int32))
        s.write_array("table_pred", np.array([0, 1, 0, 0], np.int32))
    code, out, _ = cli(capsys, "--store", store, "metrics", "table_truth", "table_pred",
                       "--kind", "classification", "--name", "demo")
    assert code == 0
    assert "accuracy\t0.75" in out
    with open_store(store, readonly=True) as s:
        assert "table_metrics_demo" in s
    code, out, _ = cli(capsys, "--store", store, "metrics", "table_truth", "table_pred",
                       "--kind", "regression")
    assert "mae\t0.25" in out
    assert cli(capsys, "--store", store, "metrics", "table_truth", "nothing",
               "--kind", "auc")[0] == 1


def test_tools_list(tmp_path, populated, capsys):
    code, out, _ = cli(capsys, "--store", tmp_path / "fresh", "tools", "list")
    assert code == 0 and "phantom_segmenter\t1.0.0" in out
    code, out, _ = cli(capsys, "--store", populated, "tools", "list")
    assert "classify_metastasis" in out
    code, out, _ = cli(capsys, "tools", "list", "--plan", FIXTURE_PLAN)
    assert out.splitlines()[0].startswith("tool_id\t")


def test_gc(populated, capsys):
    code, out, _ = cli(capsys, "--store", populated, "gc")
    assert code == 0 and out.startswith("removed\t")


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "tissueflow", "--store", str(tmp_path / "s"),
                          "inspect", "list"], capture_output=True, text=True)
    assert res.returncode == 4
    res = subprocess.run([sys.executable, "-m", "tissueflow", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "simulate-feedback" in res.stdout
