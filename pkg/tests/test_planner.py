"""BOPs and size accounting, hybrid plans and the summary report."""

import numpy as np
import pytest

from ldmquant import formats
from ldmquant.graph import BlockGroup, ModuleGraph, ModuleNode
from ldmquant.planner import HybridPlan, bops, make_plan, model_size, plan_report, render_report, report_json
from ldmquant.quantizer import PrecisionConfig, apply_config


@pytest.fixture
def three_node():
    """conv(1->2, 100 MACs) -> projection(2->3, 50 MACs) -> conv(3->1, 20 MACs)."""
    k = {"kernel": 1, "stride": 1, "padding": 0}
    a = ModuleNode("in_blocks.conv_in", "conv", ("@z",), {"weight": np.ones((2, 1, 1, 1)), "bias": np.zeros(2)}, k, 100)
    b = ModuleNode("mid_block.proj", "attention_projection", (a.id,), {"weight": np.ones((3, 2)), "bias": np.zeros(3)},
                   macs=50)
    c = ModuleNode("out_blocks.conv_out", "conv", (b.id,), {"weight": np.ones((1, 3, 1, 1)), "bias": np.zeros(1)}, k, 20)
    blocks = [BlockGroup("in_blocks", (a.id,), 0), BlockGroup("mid_block", (b.id,), 1),
              BlockGroup("out_blocks", (c.id,), 2)]
    return ModuleGraph(blocks, [a, b, c], c.id, (1, 1, 2, 2), 2, 2)


def test_single_node_bops(three_node):
    cfg = PrecisionConfig(rules=(("in_blocks.conv_in", ("int8", "int8")),
                                 ("mid_block.proj", ("fp32", "fp32")), ("out_blocks.conv_out", ("fp32", "fp32"))))
    assert bops(three_node, cfg) - (50 + 20) * 1024 == 6400


def test_three_node_hand_totals(three_node):
    plan = make_plan(three_node, 1, "8W8A")
    # in: 100*8*8; mid, out at fp16: (50 + 20)*16*16
    assert plan.total_bops == 6400 + 70 * 256 == 24320
    # params: in 2+2 at 8 bits, mid 6+3 and out 3+1 at 16 bits
    assert plan.total_size_bytes == (4 * 8 + 13 * 16) / 8 == 30.0
    assert bops(three_node, PrecisionConfig()) == 170 * 1024
    assert model_size(three_node, PrecisionConfig()) == 17 * 4


def test_homogeneous_ratios(small_graph):
    fp32 = bops(small_graph, PrecisionConfig())
    for preset, bits in (("8W8A", 64), ("4W8A", 32), ("FP16", 256)):
        b = bops(small_graph, PrecisionConfig.homogeneous(preset))
        assert b * 1024 == fp32 * bits
    assert fp32 / bops(small_graph, PrecisionConfig.homogeneous("8W8A")) == 16.0


def test_size_examples(three_node):
    assert model_size(three_node, PrecisionConfig()) == 68.0
    assert model_size(three_node, PrecisionConfig.homogeneous("4W8A")) == 17 * 4 / 8


def test_plan_boundaries(small_graph):
    n = len(small_graph.blocks)
    all_fp16 = make_plan(small_graph, 0)
    assert set(all_fp16.config.assignments(small_graph).values()) == {("fp16", "fp16")}
    all_low = make_plan(small_graph, n)
    assert set(all_low.config.assignments(small_graph).values()) == {("int8", "int8")}
    with pytest.raises(ValueError):
        make_plan(small_graph, n + 1)


def test_cut_at_up_block():
    from ldmquant.graph import build_toy_unet
    g = build_toy_unet(depth=3, base_channels=4, latent=(1, 4, 16, 16), seed=0)
    cut = [b.name for b in g.blocks].index("up_blocks.2")
    plan = make_plan(g, cut, "8W8A")
    for nid, pair in plan.config.assignments(g).items():
        late = g.block_of(nid) in ("up_blocks.2", "out_blocks")
        assert pair == (("fp16", "fp16") if late else ("int8", "int8")), nid
    assert plan.block_precisions[cut] == ("up_blocks.2", ("fp16", "fp16"))


def test_totals_monotone_in_cut(small_graph):
    plans = [make_plan(small_graph, c, "4W8A") for c in range(len(small_graph.blocks) + 1)]
    assert all(a.total_bops >= b.total_bops for a, b in zip(plans, plans[1:]))
    assert all(a.total_size_bytes >= b.total_size_bytes for a, b in zip(plans, plans[1:]))


def test_plan_applies(small_graph, small_table):
    plan = make_plan(small_graph, 4)
    q = apply_config(small_graph, plan.config, small_table)
    assert len(q.precision_listing()) == len(plan.config.assignments(small_graph))


def test_plan_text_round_trip(small_graph):
    plan = make_plan(small_graph, 3, "4W8A")
    back = HybridPlan.from_text(plan.to_text())
    assert back == plan
    bad = plan.to_text().replace(f'"version": {formats.FORMAT_VERSION}', '"version": 2')
    with pytest.raises(formats.UnsupportedVersionError):
        HybridPlan.from_text(bad)


def test_missing_macs_rejected(three_node):
    from dataclasses import replace
    from types import SimpleNamespace
    stub = SimpleNamespace(nodes={n: replace(v, macs=0) for n, v in three_node.nodes.items()})
    config = SimpleNamespace(assignments=lambda graph: {n: ("int8", "int8") for n in graph.nodes})
    with pytest.raises(ValueError, match="MAC"):
        bops(stub, config)


def test_report_rows(small_graph):
    plan = make_plan(small_graph, 4)
    rep = plan_report(small_graph, plan)
    assert [r["method"] for r in rep["rows"]] == ["fp32", "homogeneous", "hybrid"]
    assert [r["bits"] for r in rep["rows"]] == ["32fp/32fp", "8/8", "8/8+16fp/16fp"]
    assert all(r["size_bytes"] > 0 and r["bops"] > 0 for r in rep["rows"])
    assert rep["fp32_over_homogeneous_bops"] == 16.0
    text = render_report(rep)
    assert "Bits" in text and "Size" in text and "BOPs" in text
    assert "16.00x" in text
    assert '"format": "ldmquant.report"' in report_json(rep)


def test_report_counts_premultiplies(small_graph, small_table):
    from ldmquant.smoothing import smooth_selected
    nid = "up_blocks.0.resnets.0.conv_shortcut"
    g = smooth_selected(small_graph, [nid], small_table)
    rep = plan_report(g, make_plan(g, 4))
    assert rep["smoothed_modules"] == 1
    node = g.nodes[nid]
    assert rep["premultiply_elements"] == node.in_channels * 4 * 4
    assert bops(g, PrecisionConfig()) == bops(small_graph, PrecisionConfig())
