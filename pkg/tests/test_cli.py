"""Command-line pipeline, manifests and byte-level reproducibility."""

import json
import subprocess
import sys

import pytest

from ldmquant import formats
from ldmquant.cli import load_qgraph, main
from ldmquant.graph import deserialize, load_graph
from ldmquant.planner import HybridPlan
from ldmquant.quantizer import CalibrationTable

G = ["--depth", "2", "--channels", "4", "--latent", "1,4,8,8", "--seed", "1"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("build", *G, "--out", "g.json") == 0
    assert run("calibrate", "--graph", "g.json", "--T", 3, "--steps", "last", "--samples", 4, "--out", "last.json") == 0
    return tmp_path


def test_build_twice_identical(work):
    assert run("build", *G, "--out", "g2.json") == 0
    assert (work / "g.json").read_bytes() == (work / "g2.json").read_bytes()
    g = deserialize((work / "g.json").read_bytes())
    assert len(g.blocks) == 7


def test_build_depth_errors(work, capsys):
    assert run("build", "--depth", 2, "--latent", "1,4,16,16", "--out", "ok.json") == 0
    assert run("build", "--depth", 5, "--latent", "1,4,16,16", "--out", "bad.json") != 0
    assert "divisible" in capsys.readouterr().err
    assert not (work / "bad.json").exists()


def test_manifest_written(work):
    doc = json.loads((work / "g.json.manifest.json").read_text())
    assert doc["format"] == "ldmquant.manifest" and doc["command"] == "build"
    assert doc["params"]["seed"] == 1 and doc["params"]["depth"] == 2
    assert doc["tool_version"]


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("LDMQUANT_SEED", "9")
    assert run("build", "--depth", 2, "--channels", 4, "--latent", "1,4,8,8", "--out", "e.json") == 0
    assert json.loads((tmp_path / "e.json.manifest.json").read_text())["params"]["seed"] == 9
    assert run("build", *G[:-2], "--seed", 9, "--out", "s.json") == 0
    assert (tmp_path / "e.json").read_bytes() == (tmp_path / "s.json").read_bytes()


def test_calibrate_step_sets(work):
    last = CalibrationTable.from_text((work / "last.json").read_bytes())
    assert last.steps == (3,)
    assert run("calibrate", "--graph", "g.json", "--T", 3, "--steps", "all", "--samples", 4, "--out", "all.json") == 0
    full = CalibrationTable.from_text((work / "all.json").read_bytes())
    assert full.steps == (1, 2, 3)
    for nid, s in last.stats.items():
        assert full[nid].min <= s.min and s.max <= full[nid].max
    assert run("calibrate", "--graph", "g.json", "--T", 3, "--steps", "1,3", "--samples", 4, "--out", "l.json") == 0
    assert CalibrationTable.from_text((work / "l.json").read_bytes()).steps == (1, 3)


def test_calibrate_usage_errors(work):
    with pytest.raises(SystemExit) as info:
        run("calibrate", "--graph", "g.json", "--samples", 0, "--out", "x.json")
    assert info.value.code != 0
    assert run("calibrate", "--graph", "g.json", "--T", 3, "--steps", "9", "--out", "x.json") != 0


def test_sensitivity_blocks_and_modules(work):
    args = ["--graph", "g.json", "--calib", "last.json", "--T", 2, "--samples", 2]
    assert run("sensitivity", *args, "--mode", "blocks", "--out", "sweep.csv") == 0
    rows = (work / "sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 8
    assert (work / "sweep.csv.plot.csv").read_text().startswith("x,y\n")
    assert run("sensitivity", *args, "--mode", "modules", "--out", "mods.csv") == 0
    text = (work / "mods.csv").read_text()
    trace, averages = text.split("\n# averages\n")
    graph = load_graph(work / "g.json")
    n_param = sum(n.parameterized for n in graph.nodes.values())
    trace_rows = trace.strip().splitlines()[1:]
    assert len(trace_rows) == len(graph.nodes) * 2
    assert len(averages.strip().splitlines()) == 1 + n_param
    assert run("sensitivity", *args, "--mode", "modules", "--out", "mods2.csv") == 0
    assert (work / "mods2.csv").read_bytes() == (work / "mods.csv").read_bytes()


def test_plan_report_quantize(work, capsys):
    args = ["--graph", "g.json", "--calib", "last.json", "--T", 2, "--samples", 2]
    assert run("sensitivity", *args, "--out", "sweep.csv") == 0
    assert run("plan", "--sweep", "sweep.csv", "--graph", "g.json", "--out", "plan.json") == 0
    plan = HybridPlan.from_text((work / "plan.json").read_bytes())
    capsys.readouterr()
    assert run("report", "--plan", "plan.json", "--graph", "g.json", "--out", "report.json") == 0
    out = capsys.readouterr().out
    for col in ("Method", "Bits", "Size", "BOPs", "fp32", "homogeneous", "hybrid", "16.00x"):
        assert col in out
    assert json.loads((work / "report.json").read_text())["fp32_over_homogeneous_bops"] == 16.0
    assert run("quantize", "--graph", "g.json", "--calib", "last.json", "--plan", "plan.json", "--out", "q.json") == 0
    listing = capsys.readouterr().out.splitlines()
    q = load_qgraph((work / "q.json").read_bytes())
    expected = [f"{n} {w}/{a}" for n, (w, a) in plan.config.assignments(q.graph).items()]
    assert listing == expected
    assert [f"{n} {w}/{a}" for n, w, a in q.precision_listing()] == expected


def test_quantize_smoothing_audit(work):
    base = ["quantize", "--graph", "g.json", "--calib", "last.json", "--bits", "8W8A", "--T", 2, "--samples", 2]
    assert run(*base, "--smooth-top-k", 0, "--out", "q0.json") == 0
    doc = json.loads((work / "q0.json.manifest.json").read_text())
    assert doc["params"]["smooth_top_k"] == 0.0 and doc["result"]["smoothed_in_graph"] == []
    assert run(*base, "--smooth-top-k", 10, "--out", "q10.json") == 0
    doc = json.loads((work / "q10.json.manifest.json").read_text())
    assert len(doc["result"]["smoothed"]) == len(doc["result"]["smoothed_in_graph"]) >= 1
    assert (work / "q10.json.scales.csv").read_text().startswith("node_id,channel,s\n")


def test_quantize_needs_one_config(work):
    assert run("quantize", "--graph", "g.json", "--calib", "last.json", "--out", "q.json") != 0
    assert run("quantize", "--graph", "g.json", "--bits", "8W8A", "--out", "q.json") != 0


def test_eval_fp32_cap_and_repeatable(work):
    assert run("quantize", "--graph", "g.json", "--bits", "FP32", "--out", "q.json") == 0
    assert run("eval", "--qgraph", "q.json", "--T", 2, "--samples", 2, "--out", "e.json") == 0
    doc = formats.loads((work / "e.json").read_bytes(), "ldmquant.trace")
    assert doc["output_avg_db"] == 200.0
    assert run("quantize", "--graph", "g.json", "--calib", "last.json", "--bits", "8W8A", "--out", "q8.json") == 0
    assert run("eval", "--qgraph", "q8.json", "--T", 2, "--samples", 2, "--out", "a.json") == 0
    assert run("eval", "--qgraph", "q8.json", "--T", 2, "--samples", 2, "--out", "b.json") == 0
    assert (work / "a.json").read_bytes() == (work / "b.json").read_bytes()


def test_newer_version_refused(work, capsys):
    text = (work / "g.json").read_text().replace('"version": 1', '"version": 2', 1)
    (work / "new.json").write_text(text)
    assert run("calibrate", "--graph", "new.json", "--out", "c.json") != 0
    assert "version" in capsys.readouterr().err
    assert not (work / "c.json").exists()


def test_missing_input_is_an_error(work):
    assert run("calibrate", "--graph", "nope.json", "--out", "c.json") != 0


def test_rerun_reproduces_every_command(work):
    steps = [
        ("sensitivity", "--graph", "g.json", "--calib", "last.json", "--T", 2, "--samples", 2, "--out", "sweep.csv"),
        ("plan", "--sweep", "sweep.csv", "--graph", "g.json", "--out", "plan.json"),
        ("report", "--plan", "plan.json", "--graph", "g.json", "--out", "report.json"),
        ("quantize", "--graph", "g.json", "--calib", "last.json", "--plan", "plan.json", "--smooth-top-k", 10,
         "--T", 2, "--samples", 2, "--out", "q.json"),
        ("eval", "--qgraph", "q.json", "--T", 2, "--samples", 2, "--out", "e.json"),
    ]
    for argv in steps:
        assert run(*argv) == 0
    for name in ("g.json", "last.json", "sweep.csv", "plan.json", "report.json", "q.json", "e.json"):
        assert run("rerun", f"{name}.manifest.json", "--out", f"re_{name}") == 0
        assert (work / f"re_{name}").read_bytes() == (work / name).read_bytes(), name


def test_module_entry_point(work):
    proc = subprocess.run([sys.executable, "-m", "ldmquant", "build", "--depth", "9", "--out", "x.json"],
                          cwd=work, capture_output=True, text=True)
    assert proc.returncode != 0 and "error" in proc.stderr
