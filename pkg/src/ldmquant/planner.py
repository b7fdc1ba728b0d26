"""Global hybrid precision plans with BOPs and model-size accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import formats
from .graph import ModuleGraph, list_parameterized_modules
from .quantizer import FORMAT_BITS, PrecisionConfig, format_pair_text, parse_format_pair
from .sensitivity import prefix_config
from .smoothing import smoothed_nodes

HIGH_PRECISION = ("fp16", "fp16")
PLAN_FORMAT = "ldmquant.plan"


def bops(graph: ModuleGraph, config: PrecisionConfig) -> int:
    """Sum of ``MACs * weight_bits * activation_bits`` over parameterized nodes."""
    total = 0
    for nid, (wf, af) in config.assignments(graph).items():
        macs = graph.nodes[nid].macs
        if macs <= 0:
            raise ValueError(f"node {nid!r} has no MAC count")
        total += macs * FORMAT_BITS[wf] * FORMAT_BITS[af]
    return total


def model_size(graph: ModuleGraph, config: PrecisionConfig) -> float:
    """Bytes needed to store parameterized weights and biases at their weight bit width."""
    bits = sum(
        graph.nodes[nid].param_count * FORMAT_BITS[wf]
        for nid, (wf, _) in config.assignments(graph).items()
    )
    return bits / 8


@dataclass(frozen=True)
class HybridPlan:
    cut: int
    low: tuple[str, str]
    config: PrecisionConfig
    total_bops: int
    total_size_bytes: float
    block_precisions: tuple[tuple[str, tuple[str, str]], ...]
    high: tuple[str, str] = HIGH_PRECISION

    def to_text(self) -> str:
        body = {
            "cut": self.cut,
            "low": format_pair_text(self.low),
            "high": format_pair_text(self.high),
            "total_bops": self.total_bops,
            "total_size_bytes": self.total_size_bytes,
            "blocks": [[name, format_pair_text(p)] for name, p in self.block_precisions],
            "config": self.config.to_text(),
        }
        return formats.dumps(PLAN_FORMAT, body)

    @classmethod
    def from_text(cls, text) -> "HybridPlan":
        doc = formats.loads(text, PLAN_FORMAT)
        try:
            return cls(
                cut=int(doc["cut"]),
                low=parse_format_pair(doc["low"]),
                config=PrecisionConfig.from_text(doc["config"]),
                total_bops=int(doc["total_bops"]),
                total_size_bytes=float(doc["total_size_bytes"]),
                block_precisions=tuple((n, parse_format_pair(p)) for n, p in doc["blocks"]),
                high=parse_format_pair(doc["high"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise formats.FormatError(f"malformed plan: {exc}") from None


def make_plan(graph: ModuleGraph, cut: int, low_bits="8W8A") -> HybridPlan:
    """Low precision on blocks before ``cut``, fp16 from ``cut`` onward."""
    low = parse_format_pair(low_bits) if isinstance(low_bits, str) else tuple(low_bits)
    if not 0 <= cut <= len(graph.blocks):
        raise ValueError(f"cut {cut} outside block range [0, {len(graph.blocks)}]")
    config = prefix_config(graph, cut, low, rest=HIGH_PRECISION)
    blocks = tuple((b.name, low if i < cut else HIGH_PRECISION) for i, b in enumerate(graph.blocks))
    return HybridPlan(cut, low, config, bops(graph, config), model_size(graph, config), blocks)


def premultiply_elements(graph: ModuleGraph) -> dict[str, int]:
    """Input element counts (batch 1) of the runtime ``1/s`` multiplies on smoothed nodes."""
    wanted = set(smoothed_nodes(graph))
    counts: dict[str, int] = {}
    if not wanted:
        return counts

    def hook(node, args, out):
        if node.id in wanted:
            counts[node.id] = int(args[0].size)

    graph.forward(np.zeros(graph.latent_shape), 1, None, hooks=hook)
    return counts


def _row(label, pair_text, graph, config):
    return {
        "method": label,
        "bits": pair_text,
        "size_bytes": model_size(graph, config),
        "bops": bops(graph, config),
    }


def _format_label(fmt: str) -> str:
    return f"{FORMAT_BITS[fmt]}fp" if fmt.startswith("fp") else str(FORMAT_BITS[fmt])


def _bits_label(pair, high=None) -> str:
    text = "/".join(_format_label(f) for f in pair)
    if high is not None:
        text += "+" + "/".join(_format_label(f) for f in high)
    return text


def plan_report(graph: ModuleGraph, plan: HybridPlan) -> dict:
    """Summary rows for full precision, homogeneous low precision and the hybrid plan."""
    fp32 = PrecisionConfig.homogeneous(("fp32", "fp32"))
    homog = PrecisionConfig.homogeneous(plan.low)
    rows = [
        _row("fp32", _bits_label(("fp32", "fp32")), graph, fp32),
        _row("homogeneous", _bits_label(plan.low), graph, homog),
        _row("hybrid", _bits_label(plan.low, plan.high), graph, plan.config),
    ]
    pre = premultiply_elements(graph)
    return {
        "cut": plan.cut,
        "cut_block": graph.blocks[plan.cut].name if plan.cut < len(graph.blocks) else None,
        "rows": rows,
        "fp32_over_homogeneous_bops": rows[0]["bops"] / rows[1]["bops"],
        "blocks": [[n, format_pair_text(p)] for n, p in plan.block_precisions],
        "parameterized_modules": len(list_parameterized_modules(graph)),
        "smoothed_modules": len(pre),
        "premultiply_elements": sum(pre.values()),
    }


def render_report(report: dict) -> str:
    lines = [f"{'Method':<12} {'Bits(W/A)':<14} {'Size(MB)':>12} {'BOPs(G)':>12}"]
    for r in report["rows"]:
        lines.append(f"{r['method']:<12} {r['bits']:<14} {r['size_bytes'] / 1e6:>12.6f} {r['bops'] / 1e9:>12.6f}")
    lines.append(f"fp32/homogeneous BOPs ratio: {report['fp32_over_homogeneous_bops']:.2f}x")
    cut = report["cut_block"] or "none (fully low precision)"
    lines.append(f"fp16 from block: {cut}")
    lines.append(f"smoothed modules: {report['smoothed_modules']} "
                 f"(runtime 1/s multiplies: {report['premultiply_elements']} elements)")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps({"format": "ldmquant.report", "version": formats.FORMAT_VERSION, **report}, indent=1) + "\n"
