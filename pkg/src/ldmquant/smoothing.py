"""Per-channel scale migration from activations into weights for sensitive modules."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .graph import ModuleGraph, ModuleNode
from .quantizer import EPS_SCALE, CalibrationTable

DEFAULT_ALPHA = 0.7
SMOOTHABLE_KINDS = frozenset(
    {"conv", "linear", "attention_projection", "shortcut_conv", "downsample_conv", "upsample_conv"}
)


@dataclass(frozen=True, eq=False)
class SmoothingScales:
    node_id: str
    s: np.ndarray
    alpha: float


def compute_scales(act_absmax, weight_absmax, alpha: float = DEFAULT_ALPHA, node_id: str = "") -> SmoothingScales:
    """``s_j = max|Z_j|**alpha / max|W_j|**(1 - alpha)``; zero maxima are clamped to ``EPS_SCALE``."""
    a = np.asarray(act_absmax, dtype=np.float64)
    w = np.asarray(weight_absmax, dtype=np.float64)
    if a.shape != w.shape or a.ndim != 1:
        raise ValueError(f"channel maxima must be equal-length vectors, got {a.shape} and {w.shape}")
    if np.any(a < 0) or np.any(w < 0):
        raise ValueError("channel maxima must be non-negative")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    a = np.maximum(a, EPS_SCALE)
    w = np.maximum(w, EPS_SCALE)
    return SmoothingScales(node_id, a**alpha / w ** (1.0 - alpha), alpha)


def weight_channel_absmax(node: ModuleNode) -> np.ndarray:
    """Max ``|W|`` per input channel (axis 1 for both conv and linear weights)."""
    w = node.weight
    reduce = tuple(i for i in range(w.ndim) if i != 1)
    return np.max(np.abs(w), axis=reduce)


def apply_smoothing(node: ModuleNode, scales: SmoothingScales | np.ndarray) -> ModuleNode:
    """Fold ``diag(s)`` into the weight's input-channel axis and divide the input by ``s`` at run time."""
    if node.kind not in SMOOTHABLE_KINDS:
        raise TypeError(f"cannot smooth node {node.id!r} of kind {node.kind!r}")
    s = np.asarray(scales.s if isinstance(scales, SmoothingScales) else scales, dtype=np.float64)
    if s.shape != (node.in_channels,):
        raise ValueError(f"{node.id}: expected {node.in_channels} scales, got {s.shape}")
    if np.any(s <= 0):
        raise ValueError(f"{node.id}: smoothing scales must be positive")
    if np.all(s == 1.0):
        return node
    shape = [1] * node.weight.ndim
    shape[1] = -1
    params = dict(node.params)
    params["weight"] = node.weight * s.reshape(shape)
    smooth = s if node.smooth is None else node.smooth * s
    return replace(node, params=params, smooth=smooth)


def node_scales(graph: ModuleGraph, node_id: str, table: CalibrationTable, alpha: float) -> SmoothingScales:
    node = graph.nodes[node_id]
    stats = table[node_id]
    act = stats.channel_absmax
    if act.shape != (node.in_channels,):
        raise ValueError(f"{node_id}: calibration holds {act.shape[0]} channel maxima, node has {node.in_channels} inputs")
    if node.smooth is not None:
        act = act / node.smooth
    return compute_scales(act, weight_channel_absmax(node), alpha, node_id)


def smooth_selected(
    graph: ModuleGraph,
    node_ids: Iterable[str],
    table: CalibrationTable,
    alpha: float = DEFAULT_ALPHA,
) -> ModuleGraph:
    """Return a new graph with the selected nodes smoothed; every other node is shared unchanged."""
    replacements = {}
    for nid in node_ids:
        if nid not in graph.nodes:
            raise KeyError(f"unknown node {nid!r}")
        replacements[nid] = apply_smoothing(graph.nodes[nid], node_scales(graph, nid, table, alpha))
    if not replacements:
        return graph
    return graph.with_nodes(replacements)


def smoothed_nodes(graph: ModuleGraph) -> list[str]:
    return [nid for nid in graph.execution_order if graph.nodes[nid].smooth is not None]


def scales_csv(graph: ModuleGraph) -> str:
    """Per-channel smoothing scales of every smoothed node (``node_id,channel,s``)."""
    lines = ["node_id,channel,s"]
    for nid in smoothed_nodes(graph):
        lines.extend(f"{nid},{j},{v!r}" for j, v in enumerate(graph.nodes[nid].smooth.tolist()))
    return "\n".join(lines) + "\n"
